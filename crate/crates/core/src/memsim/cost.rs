use std::fmt::Write as _;

use serde::Serialize;

use crate::error::Result;

use super::efficiency::KernelEfficiencyTable;
use super::hierarchy::{Duplex, HierarchyConfig};
use super::plan::{plan_tiles, TilePlan};
use super::workload::{LayerStep, Workload};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepCost {
    pub label: String,
    pub tiles: usize,
    pub mac_count: u64,
    /// Σ per-tile kernel cycles.
    pub compute_cycles: u64,
    /// Σ per-tile transfer cycles, loads and stores.
    pub dma_cycles: u64,
    /// Double-buffered schedule length.
    pub overlapped_cycles: u64,
    pub bytes_moved: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub steps: Vec<StepCost>,
    pub mac_count: u64,
    pub compute_cycles: u64,
    pub cycles: u64,
    pub latency_s: f64,
    pub energy_j: f64,
    pub mac_per_cycle: f64,
}

pub const COST_HEADER: &str =
    "step,tiles,macs,compute_cycles,dma_cycles,overlapped_cycles,bytes_moved";

impl CostReport {
    fn from_steps(steps: Vec<StepCost>, cfg: &HierarchyConfig) -> Self {
        let mac_count = steps.iter().map(|s| s.mac_count).sum();
        let compute_cycles = steps.iter().map(|s| s.compute_cycles).sum();
        let cycles: u64 = steps.iter().map(|s| s.overlapped_cycles).sum();
        let latency_s = cycles as f64 / cfg.freq_hz;
        Self {
            steps,
            mac_count,
            compute_cycles,
            cycles,
            latency_s,
            energy_j: latency_s * cfg.avg_power_w,
            mac_per_cycle: if cycles == 0 {
                0.0
            } else {
                mac_count as f64 / cycles as f64
            },
        }
    }

    /// Relative excess of the schedule over pure kernel time.
    pub fn tiling_overhead(&self) -> f64 {
        self.cycles as f64 / self.compute_cycles as f64 - 1.0
    }

    /// Latency and energy of `iterations` repetitions of the costed steps.
    pub fn repeated(&self, iterations: usize) -> (f64, f64) {
        (
            self.latency_s * iterations as f64,
            self.energy_j * iterations as f64,
        )
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(COST_HEADER);
        out.push('\n');
        for s in &self.steps {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                s.label,
                s.tiles,
                s.mac_count,
                s.compute_cycles,
                s.dma_cycles,
                s.overlapped_cycles,
                s.bytes_moved
            )
            .expect("write to string");
        }
        out
    }
}

fn cycles_for_bytes(bytes: usize, bw_bits: u32) -> u64 {
    (bytes as u64 * 8).div_ceil(bw_bits as u64)
}

/// Costs one plan: prologue load, then per tile the longest of its compute,
/// the next tile's load and the previous tile's store, then the last store.
pub fn simulate(
    plan: &TilePlan,
    table: &KernelEfficiencyTable,
    cfg: &HierarchyConfig,
) -> Result<StepCost> {
    let s = &plan.step;
    let eff = table.effective(s.kind, s.step, cfg.cores, cfg.l1_bytes, cfg.dma_2d_strided)?;
    let comp: Vec<u64> = plan
        .tiles
        .iter()
        .map(|t| (t.macs() as f64 / eff).ceil() as u64)
        .collect();
    let load: Vec<u64> = plan
        .tiles
        .iter()
        .map(|t| cycles_for_bytes(t.in_bytes(), cfg.dma_read_bw))
        .collect();
    let store: Vec<u64> = plan
        .tiles
        .iter()
        .map(|t| cycles_for_bytes(t.out_bytes(), cfg.dma_write_bw))
        .collect();
    let n = plan.tiles.len();
    let mut total = load.first().copied().unwrap_or(0);
    for i in 0..n {
        let next_in = if i + 1 < n { load[i + 1] } else { 0 };
        let prev_out = if i > 0 { store[i - 1] } else { 0 };
        let dma = match cfg.duplex {
            Duplex::Full => next_in.max(prev_out),
            Duplex::Half => next_in + prev_out,
        };
        total += comp[i].max(dma);
    }
    total += store.last().copied().unwrap_or(0);
    Ok(StepCost {
        label: s.label(),
        tiles: n,
        mac_count: plan.macs() as u64,
        compute_cycles: comp.iter().sum(),
        dma_cycles: load.iter().sum::<u64>() + store.iter().sum::<u64>(),
        overlapped_cycles: total,
        bytes_moved: plan.bytes_moved() as u64,
    })
}

/// Plans and costs a sequence of steps.
pub fn simulate_steps(
    steps: &[LayerStep],
    table: &KernelEfficiencyTable,
    cfg: &HierarchyConfig,
) -> Result<CostReport> {
    let rows = steps
        .iter()
        .map(|s| simulate(&plan_tiles(s, cfg)?, table, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(CostReport::from_steps(rows, cfg))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepPoint {
    pub cores: u32,
    pub l1_bytes: usize,
    pub bw: u32,
    pub mac_count: u64,
    pub cycles: u64,
    pub mac_per_cycle: f64,
}

pub const SWEEP_HEADER: &str = "cores,l1_bytes,bw_bits_per_cycle,macs,cycles,mac_per_cycle";

/// Effective MAC/cyc of one training iteration of the adaptive stage from
/// `first` for every (cores, L1, bandwidth) combination. Read and write
/// bandwidth are both set to the swept value.
pub fn bandwidth_sweep(
    workload: &Workload,
    first: usize,
    base: &HierarchyConfig,
    table: &KernelEfficiencyTable,
    cores: &[u32],
    l1_sizes: &[usize],
    bandwidths: &[u32],
) -> Result<Vec<SweepPoint>> {
    let steps = workload.adaptive_steps(first, 1, 4)?;
    let mut out = Vec::new();
    for &c in cores {
        for &l1 in l1_sizes {
            for &bw in bandwidths {
                let cfg = HierarchyConfig {
                    cores: c,
                    l1_bytes: l1,
                    dma_read_bw: bw,
                    dma_write_bw: bw,
                    ..base.clone()
                };
                let r = simulate_steps(&steps, table, &cfg)?;
                out.push(SweepPoint {
                    cores: c,
                    l1_bytes: l1,
                    bw,
                    mac_count: r.mac_count,
                    cycles: r.cycles,
                    mac_per_cycle: r.mac_per_cycle,
                });
            }
        }
    }
    Ok(out)
}

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for p in points {
        writeln!(
            out,
            "{},{},{},{},{},{:.6}",
            p.cores, p.l1_bytes, p.bw, p.mac_count, p.cycles, p.mac_per_cycle
        )
        .expect("write to string");
    }
    out
}

/// Smallest swept bandwidth reaching `fraction` of the best efficiency of the
/// (cores, L1) curve: the point where the curve turns compute bound.
pub fn sweet_spot(
    points: &[SweepPoint],
    cores: u32,
    l1_bytes: usize,
    fraction: f64,
) -> Option<u32> {
    let mut curve: Vec<&SweepPoint> = points
        .iter()
        .filter(|p| p.cores == cores && p.l1_bytes == l1_bytes)
        .collect();
    curve.sort_by_key(|p| p.bw);
    let best = curve.iter().map(|p| p.mac_per_cycle).fold(0.0, f64::max);
    curve
        .iter()
        .find(|p| p.mac_per_cycle >= fraction * best)
        .map(|p| p.bw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memsim::efficiency::Step;

    fn tail() -> Workload {
        Workload::mobilenet_v1_128(50)
    }

    #[test]
    fn infinite_bandwidth_is_pure_compute() {
        let w = tail();
        let cfg = HierarchyConfig {
            dma_read_bw: u32::MAX,
            dma_write_bw: u32::MAX,
            ..Default::default()
        };
        let t = KernelEfficiencyTable::default();
        let ls = w.lower(22, Step::Fw, 1, 4).unwrap();
        let plan = plan_tiles(&ls, &cfg).unwrap();
        let c = simulate(&plan, &t, &cfg).unwrap();
        // each transfer rounds up to one cycle
        let slack = 2;
        assert!(c.overlapped_cycles >= c.compute_cycles);
        assert!(c.overlapped_cycles <= c.compute_cycles + slack);
    }

    #[test]
    fn infinite_efficiency_is_pure_transfer() {
        let w = tail();
        let cfg = HierarchyConfig {
            duplex: Duplex::Half,
            ..Default::default()
        };
        let t = KernelEfficiencyTable::default().scaled(1e12);
        let ls = w.lower(22, Step::Fw, 1, 4).unwrap();
        let plan = plan_tiles(&ls, &cfg).unwrap();
        let c = simulate(&plan, &t, &cfg).unwrap();
        assert_eq!(c.overlapped_cycles, c.dma_cycles);
        assert_eq!(
            c.dma_cycles,
            plan.tiles
                .iter()
                .map(|t| cycles_for_bytes(t.in_bytes(), 64) + cycles_for_bytes(t.out_bytes(), 64))
                .sum::<u64>()
        );
    }

    #[test]
    fn schedule_bounded_by_both_resources() {
        let w = tail();
        let t = KernelEfficiencyTable::default();
        for duplex in [Duplex::Full, Duplex::Half] {
            for bw in [8, 32, 128] {
                let cfg = HierarchyConfig {
                    dma_read_bw: bw,
                    dma_write_bw: bw,
                    duplex,
                    ..Default::default()
                };
                let r = simulate_steps(&w.adaptive_steps(19, 1, 4).unwrap(), &t, &cfg).unwrap();
                for s in &r.steps {
                    assert!(s.overlapped_cycles >= s.compute_cycles, "{}", s.label);
                    if duplex == Duplex::Half {
                        assert!(s.overlapped_cycles >= s.dma_cycles, "{}", s.label);
                    }
                    assert!(s.overlapped_cycles <= s.compute_cycles + s.dma_cycles);
                }
                assert!((r.energy_j - r.latency_s * cfg.avg_power_w).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn latency_monotone_in_bandwidth_and_cores() {
        let w = tail();
        let t = KernelEfficiencyTable::default();
        let pts = bandwidth_sweep(
            &w,
            19,
            &HierarchyConfig {
                duplex: Duplex::Half,
                ..Default::default()
            },
            &t,
            &[1, 2, 4, 8],
            &[128 * 1024],
            &[8, 16, 32, 64, 128],
        )
        .unwrap();
        for c in [1, 2, 4, 8] {
            let curve: Vec<_> = pts.iter().filter(|p| p.cores == c).collect();
            assert!(curve.windows(2).all(|p| p[1].cycles <= p[0].cycles));
        }
        for bw in [8, 16, 32, 64, 128] {
            let col: Vec<_> = pts.iter().filter(|p| p.bw == bw).collect();
            assert!(col.windows(2).all(|p| p[1].cycles <= p[0].cycles));
        }
        assert!(sweep_csv(&pts).starts_with(SWEEP_HEADER));
    }

    #[test]
    fn csv_has_one_row_per_step() {
        let w = tail();
        let steps = w.adaptive_steps(25, 1, 4).unwrap();
        let r = simulate_steps(
            &steps,
            &KernelEfficiencyTable::default(),
            &HierarchyConfig::default(),
        )
        .unwrap();
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), steps.len() + 1);
        assert!(csv.contains("L26 PW BW_GRAD"));
    }
}
