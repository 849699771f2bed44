use std::ops::Range;

use serde::Serialize;

use crate::error::{Error, Result};

use super::hierarchy::HierarchyConfig;
use super::workload::{ColumnAxis, LayerStep};

/// Operand of a lowered step. `Input` is the raw feature map a depthwise
/// im2col is built from when the DMA cannot gather columns itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Operand {
    A,
    B,
    C,
    Input,
    Im2colBuffer,
}

impl Operand {
    pub fn name(self) -> &'static str {
        match self {
            Operand::A => "A",
            Operand::B => "B",
            Operand::C => "C",
            Operand::Input => "input",
            Operand::Im2colBuffer => "im2col buffer",
        }
    }
}

/// A 3D strided DMA descriptor on the L2 side: `planes` × `rows` runs of
/// `row_bytes` contiguous bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Transfer {
    pub operand: Operand,
    pub l2_offset: usize,
    pub planes: usize,
    pub plane_stride: usize,
    pub rows: usize,
    pub row_stride: usize,
    pub row_bytes: usize,
}

impl Transfer {
    pub fn bytes(&self) -> usize {
        self.planes * self.rows * self.row_bytes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Buffer {
    Ping,
    Pong,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Tile {
    pub groups: Range<usize>,
    pub m: Range<usize>,
    pub n: Range<usize>,
    pub k: Range<usize>,
    pub buffer: Buffer,
    pub loads: Vec<Transfer>,
    /// Written back after the last reduction block of an output block.
    pub store: Option<Transfer>,
    pub working_set: usize,
}

impl Tile {
    pub fn macs(&self) -> usize {
        self.groups.len() * self.m.len() * self.n.len() * self.k.len()
    }

    pub fn in_bytes(&self) -> usize {
        self.loads.iter().map(Transfer::bytes).sum()
    }

    pub fn out_bytes(&self) -> usize {
        self.store.map_or(0, |t| t.bytes())
    }
}

/// Tile extents shared by every tile of a plan (edge tiles are clipped).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TileShape {
    pub groups: usize,
    pub m: usize,
    pub n: usize,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TilePlan {
    pub step: LayerStep,
    pub shape: TileShape,
    /// Largest working set a tile may use (half of L1).
    pub limit: usize,
    pub strided_dma: bool,
    /// Execution order: groups outermost, then m, then n, reduction innermost.
    pub tiles: Vec<Tile>,
}

impl TilePlan {
    pub fn max_working_set(&self) -> usize {
        self.tiles.iter().map(|t| t.working_set).max().unwrap_or(0)
    }

    pub fn macs(&self) -> usize {
        self.tiles.iter().map(Tile::macs).sum()
    }

    pub fn bytes_moved(&self) -> usize {
        self.tiles
            .iter()
            .map(|t| t.in_bytes() + t.out_bytes())
            .sum()
    }
}

fn chunks(total: usize, size: usize) -> impl Iterator<Item = Range<usize>> + Clone {
    (0..total)
        .step_by(size)
        .map(move |s| s..(s + size).min(total))
}

struct Sizer<'a> {
    step: &'a LayerStep,
    strided: bool,
}

impl Sizer<'_> {
    /// Columns gathered from the raw input (no strided DMA).
    fn raw_columns(&self) -> bool {
        self.step.columns.is_some() && !self.strided
    }

    fn positions(&self, n: &Range<usize>, k: &Range<usize>) -> Range<usize> {
        match self.step.columns.map(|c| c.axis) {
            Some(ColumnAxis::K) => k.clone(),
            _ => n.clone(),
        }
    }

    /// Per-operand L1 bytes of one tile.
    fn parts(
        &self,
        g: usize,
        m: usize,
        n: &Range<usize>,
        k: &Range<usize>,
    ) -> Vec<(Operand, usize)> {
        let e = self.step.elem_bytes;
        let mut parts = vec![(Operand::A, g * m * k.len() * e)];
        if self.raw_columns() {
            let c = self.step.columns.expect("column operand");
            let rows = c.input_rows(self.positions(n, k));
            parts.push((Operand::Input, g * rows * c.in_w * e));
            parts.push((Operand::Im2colBuffer, g * k.len() * n.len() * e));
        } else {
            parts.push((Operand::B, g * k.len() * n.len() * e));
        }
        parts.push((Operand::C, g * m * n.len() * e));
        parts
    }

    /// Worst working set over all tiles of the given shape.
    fn working_set(&self, t: TileShape) -> usize {
        let s = self.step;
        let ns: Vec<_> = if self.raw_columns() && s.columns.map(|c| c.axis) == Some(ColumnAxis::N) {
            chunks(s.n, t.n).collect()
        } else {
            std::iter::once(0..t.n.min(s.n)).collect()
        };
        let ks: Vec<_> = if self.raw_columns() && s.columns.map(|c| c.axis) == Some(ColumnAxis::K) {
            chunks(s.k, t.k).collect()
        } else {
            std::iter::once(0..t.k.min(s.k)).collect()
        };
        let mut worst = 0;
        for n in &ns {
            for k in &ks {
                let total: usize = self
                    .parts(t.groups.min(s.groups), t.m.min(s.m), n, k)
                    .iter()
                    .map(|p| p.1)
                    .sum();
                worst = worst.max(total);
            }
        }
        worst
    }

    /// Largest value in `1..=hi` for which `fits` holds, assuming `fits` is
    /// monotone decreasing; 0 if none.
    fn largest(hi: usize, fits: impl Fn(usize) -> bool) -> usize {
        if hi == 0 || !fits(1) {
            return 0;
        }
        let (mut lo, mut hi) = (1, hi);
        while lo < hi {
            let mid = lo + (hi - lo).div_ceil(2);
            if fits(mid) {
                lo = mid;
            } else {
                hi = mid - 1;
            }
        }
        lo
    }
}

/// Greedy tiling: grow along output channels (groups for depthwise, rows of
/// the output otherwise) with one output column and the full reduction, then
/// grow the column count. The reduction is split only when a single output
/// element with its full reduction does not fit.
pub fn plan_tiles(step: &LayerStep, cfg: &HierarchyConfig) -> Result<TilePlan> {
    cfg.validate()?;
    if step.groups == 0 || step.m == 0 || step.n == 0 || step.k == 0 || step.elem_bytes == 0 {
        return Err(Error::Config(format!("empty layer step {}", step.label())));
    }
    let limit = cfg.tile_limit();
    let sizer = Sizer {
        step,
        strided: cfg.dma_2d_strided,
    };
    let fits = |t: TileShape| sizer.working_set(t) <= limit;
    let s = step;
    let shape = {
        let g = if s.groups > 1 {
            Sizer::largest(s.groups, |g| {
                fits(TileShape {
                    groups: g,
                    m: s.m,
                    n: 1,
                    k: s.k,
                })
            })
        } else {
            0
        };
        if g > 0 {
            let n = Sizer::largest(s.n, |n| {
                fits(TileShape {
                    groups: g,
                    m: s.m,
                    n,
                    k: s.k,
                })
            });
            TileShape {
                groups: g,
                m: s.m,
                n,
                k: s.k,
            }
            .with_n(n)
        } else {
            let m = Sizer::largest(s.m, |m| {
                fits(TileShape {
                    groups: 1,
                    m,
                    n: 1,
                    k: s.k,
                })
            });
            if m > 0 {
                let n = Sizer::largest(s.n, |n| {
                    fits(TileShape {
                        groups: 1,
                        m,
                        n,
                        k: s.k,
                    })
                });
                TileShape {
                    groups: 1,
                    m,
                    n,
                    k: s.k,
                }
                .with_n(n)
            } else {
                let k = Sizer::largest(s.k, |k| {
                    fits(TileShape {
                        groups: 1,
                        m: 1,
                        n: 1,
                        k,
                    })
                });
                if k == 0 {
                    let one = 0..1;
                    let (operand, needed) = sizer
                        .parts(1, 1, &one, &one)
                        .into_iter()
                        .max_by_key(|p| p.1)
                        .expect("non-empty parts");
                    let total = sizer.working_set(TileShape {
                        groups: 1,
                        m: 1,
                        n: 1,
                        k: 1,
                    });
                    return Err(Error::InfeasiblePlan {
                        operand: format!(
                            "{} of {} (minimal tile needs {total} bytes)",
                            operand.name(),
                            s.label()
                        ),
                        needed,
                        limit,
                    });
                }
                TileShape {
                    groups: 1,
                    m: 1,
                    n: 1,
                    k,
                }
            }
        }
    };
    let tiles = emit(&sizer, shape);
    Ok(TilePlan {
        step: step.clone(),
        shape,
        limit,
        strided_dma: cfg.dma_2d_strided,
        tiles,
    })
}

impl TileShape {
    fn with_n(mut self, n: usize) -> Self {
        self.n = n.max(1);
        self
    }
}

fn emit(sizer: &Sizer<'_>, t: TileShape) -> Vec<Tile> {
    let s = sizer.step;
    let e = s.elem_bytes;
    let mut tiles = Vec::new();
    for g in chunks(s.groups, t.groups) {
        for m in chunks(s.m, t.m) {
            for n in chunks(s.n, t.n) {
                let k_blocks: Vec<_> = chunks(s.k, t.k).collect();
                let last = k_blocks.len() - 1;
                for (ki, k) in k_blocks.into_iter().enumerate() {
                    let mut loads = vec![Transfer {
                        operand: Operand::A,
                        l2_offset: ((g.start * s.m + m.start) * s.k + k.start) * e,
                        planes: g.len(),
                        plane_stride: s.m * s.k * e,
                        rows: m.len(),
                        row_stride: s.k * e,
                        row_bytes: k.len() * e,
                    }];
                    if sizer.raw_columns() {
                        let c = s.columns.expect("column operand");
                        let (top, rows) = c.row_span(sizer.positions(&n, &k));
                        let plane_rows = c.batch * c.in_h;
                        loads.push(Transfer {
                            operand: Operand::Input,
                            l2_offset: (g.start * plane_rows + top) * c.in_w * e,
                            planes: g.len(),
                            plane_stride: plane_rows * c.in_w * e,
                            rows,
                            row_stride: c.in_w * e,
                            row_bytes: c.in_w * e,
                        });
                    } else {
                        loads.push(Transfer {
                            operand: Operand::B,
                            l2_offset: ((g.start * s.k + k.start) * s.n + n.start) * e,
                            planes: g.len(),
                            plane_stride: s.k * s.n * e,
                            rows: k.len(),
                            row_stride: s.n * e,
                            row_bytes: n.len() * e,
                        });
                    }
                    let store = (ki == last).then(|| Transfer {
                        operand: Operand::C,
                        l2_offset: ((g.start * s.m + m.start) * s.n + n.start) * e,
                        planes: g.len(),
                        plane_stride: s.m * s.n * e,
                        rows: m.len(),
                        row_stride: s.n * e,
                        row_bytes: n.len() * e,
                    });
                    let working_set = sizer
                        .parts(g.len(), m.len(), &n, &k)
                        .iter()
                        .map(|p| p.1)
                        .sum();
                    let buffer = if tiles.len() % 2 == 0 {
                        Buffer::Ping
                    } else {
                        Buffer::Pong
                    };
                    tiles.push(Tile {
                        groups: g.clone(),
                        m: m.clone(),
                        n: n.clone(),
                        k,
                        buffer,
                        loads,
                        store,
                        working_set,
                    });
                }
            }
        }
    }
    tiles
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memsim::efficiency::Step;
    use crate::memsim::workload::Workload;

    fn cfg(l1_kb: usize) -> HierarchyConfig {
        HierarchyConfig {
            l1_bytes: l1_kb * 1024,
            ..Default::default()
        }
    }

    /// Every point of the iteration space is visited by exactly one tile.
    fn assert_partition(plan: &TilePlan) {
        let s = &plan.step;
        let mut seen = vec![0u8; s.groups * s.m * s.n * s.k];
        for t in &plan.tiles {
            for g in t.groups.clone() {
                for m in t.m.clone() {
                    for n in t.n.clone() {
                        for k in t.k.clone() {
                            seen[((g * s.m + m) * s.n + n) * s.k + k] += 1;
                        }
                    }
                }
            }
        }
        assert!(seen.iter().all(|&c| c == 1), "{}", s.label());
    }

    #[test]
    fn layer_22_pointwise_respects_half_l1() {
        let w = Workload::mobilenet_v1_128(50);
        for step in Step::ALL {
            let ls = w.lower(22, step, 1, 4).unwrap();
            let plan = plan_tiles(&ls, &cfg(128)).unwrap();
            assert!(plan.tiles.len() > 1);
            for t in &plan.tiles {
                assert!(t.working_set <= 64 * 1024);
            }
            assert_eq!(plan.macs(), ls.macs());
            assert_partition(&plan);
        }
    }

    #[test]
    fn small_layer_is_one_tile() {
        let w = Workload::mobilenet_v1_128(50);
        let ls = w.lower(27, Step::BwGrad, 1, 1).unwrap();
        let plan = plan_tiles(&ls, &cfg(512)).unwrap();
        assert_eq!(plan.tiles.len(), 1);
        assert_eq!(plan.tiles[0].in_bytes(), 50 + 1024);
    }

    #[test]
    fn plans_partition_all_tail_steps() {
        let w = Workload::mobilenet_v1_128(50);
        for strided in [true, false] {
            for kb in [128, 256, 512] {
                let c = HierarchyConfig {
                    dma_2d_strided: strided,
                    ..cfg(kb)
                };
                for ls in w.adaptive_steps(19, 1, 4).unwrap() {
                    let plan = plan_tiles(&ls, &c).unwrap();
                    assert!(2 * plan.max_working_set() <= c.l1_bytes);
                    assert_partition(&plan);
                }
            }
        }
    }

    #[test]
    fn tile_count_monotone_in_l1() {
        let w = Workload::mobilenet_v1_128(50);
        for ls in w.adaptive_steps(13, 1, 4).unwrap() {
            let counts: Vec<usize> = [512, 256, 128, 64, 32]
                .iter()
                .map(|&kb| plan_tiles(&ls, &cfg(kb)).unwrap().tiles.len())
                .collect();
            assert!(
                counts.windows(2).all(|p| p[0] <= p[1]),
                "{} {counts:?}",
                ls.label()
            );
        }
    }

    #[test]
    fn reduction_split_when_row_too_long() {
        let w = Workload::mobilenet_v1_128(50);
        let ls = w.lower(26, Step::BwGrad, 1, 4).unwrap();
        // K = 16 positions: tiny; force a split with a large reduction instead
        let big = LayerStep { k: 40_000, ..ls };
        let plan = plan_tiles(&big, &cfg(128)).unwrap();
        assert_eq!(plan.shape.m, 1);
        assert!(plan.shape.k < 40_000);
        let stores = plan.tiles.iter().filter(|t| t.store.is_some()).count();
        assert_eq!(stores, big.m * big.n);
    }

    #[test]
    fn infeasible_names_operand() {
        let w = Workload::mobilenet_v1_128(50);
        let ls = w.lower(1, Step::Fw, 1, 4).unwrap();
        let c = HierarchyConfig {
            l1_bytes: 64,
            dma_2d_strided: false,
            ..Default::default()
        };
        match plan_tiles(&ls, &c) {
            Err(Error::InfeasiblePlan { operand, limit, .. }) => {
                assert!(operand.contains("input"), "{operand}");
                assert_eq!(limit, 32);
            }
            other => panic!("expected infeasible plan, got {other:?}"),
        }
    }

    #[test]
    fn transfers_match_tile_extents() {
        let w = Workload::mobilenet_v1_128(50);
        let ls = w.lower(20, Step::Fw, 1, 4).unwrap();
        let plan = plan_tiles(&ls, &cfg(128)).unwrap();
        let mut loaded_a = 0;
        for t in &plan.tiles {
            let a = t.loads[0];
            assert_eq!(a.bytes(), t.m.len() * t.k.len() * 4);
            loaded_a += a.bytes();
        }
        // A is reloaded once per output column block
        let n_blocks = ls.n.div_ceil(plan.shape.n);
        assert_eq!(loaded_a, ls.m * ls.k * 4 * n_blocks);
    }
}
