use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::LatentPrecision;
use crate::replay::lr_bytes;

use super::workload::Workload;

/// Memory footprint of continual learning with the split at layer `l`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MemoryBreakdown {
    pub split: usize,
    /// Latent replay payload.
    pub lr_bytes: usize,
    /// Frozen-stage coefficients at one byte each.
    pub frozen_params: usize,
    /// Adaptive-stage coefficients in FP32.
    pub adaptive_params: usize,
    /// One FP32 gradient per adaptive coefficient.
    pub gradients: usize,
    /// FP32 inputs of every adaptive layer of one sample, kept for the
    /// backward pass.
    pub activations: usize,
}

impl MemoryBreakdown {
    pub fn total(&self) -> usize {
        self.lr_bytes
            + self.frozen_params
            + self.adaptive_params
            + self.gradients
            + self.activations
    }

    pub const CSV_HEADER: &'static str =
        "split,lr_bytes,frozen_params,adaptive_params,gradients,activations,total";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.split,
            self.lr_bytes,
            self.frozen_params,
            self.adaptive_params,
            self.gradients,
            self.activations,
            self.total()
        )
    }
}

/// Memory breakdown for `n_lr` latent replays stored at `precision`.
pub fn report_memory(
    workload: &Workload,
    l: usize,
    n_lr: usize,
    precision: LatentPrecision,
) -> Result<MemoryBreakdown> {
    report_memory_with_payload(
        workload,
        l,
        lr_bytes(n_lr, workload.latent_elems_checked(l)?, precision),
    )
}

/// Same as [`report_memory`] with the replay payload taken from an existing
/// buffer.
pub fn report_memory_with_payload(
    workload: &Workload,
    l: usize,
    lr_bytes: usize,
) -> Result<MemoryBreakdown> {
    workload.latent_elems_checked(l)?;
    let params = |r: std::ops::Range<usize>| -> usize {
        workload.layers[r]
            .iter()
            .map(|x| x.spec.param_count())
            .sum()
    };
    let adaptive = params(l..workload.len());
    Ok(MemoryBreakdown {
        split: l,
        lr_bytes,
        frozen_params: params(0..l),
        adaptive_params: adaptive * 4,
        gradients: adaptive * 4,
        activations: workload.layers[l..]
            .iter()
            .map(|x| x.input_elems())
            .sum::<usize>()
            * 4,
    })
}

impl Workload {
    fn latent_elems_checked(&self, l: usize) -> Result<usize> {
        if l >= self.len() {
            return Err(Error::Config(format!(
                "split {l} outside a {}-layer workload",
                self.len()
            )));
        }
        Ok(self.latent_elems(l))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Lifetime {
    Hours(f64),
    /// No learning events: nothing drains the battery.
    Unbounded,
}

impl Lifetime {
    pub fn hours(self) -> Option<f64> {
        match self {
            Lifetime::Hours(h) => Some(h),
            Lifetime::Unbounded => None,
        }
    }
}

impl fmt::Display for Lifetime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Lifetime::Hours(h) => write!(f, "{h:.1} h"),
            Lifetime::Unbounded => f.write_str("unbounded"),
        }
    }
}

/// Battery lifetime when only learning events draw energy.
pub fn report_lifetime(
    energy_per_event_j: f64,
    events_per_hour: f64,
    battery_mah: f64,
    battery_v: f64,
) -> Lifetime {
    let stored_j = battery_mah / 1000.0 * battery_v * 3600.0;
    let drain = energy_per_event_j * events_per_hour;
    if drain <= 0.0 {
        Lifetime::Unbounded
    } else {
        Lifetime::Hours(stored_j / drain)
    }
}

/// A platform's per-event cost, either simulated or a published figure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetFigures {
    pub name: String,
    pub latency_s: f64,
    pub energy_j: Option<f64>,
    /// Free-form origin, e.g. "simulated" or "literature".
    pub source: String,
}

impl TargetFigures {
    pub fn literature(name: &str, latency_s: f64, energy_j: Option<f64>) -> Self {
        Self {
            name: name.into(),
            latency_s,
            energy_j,
            source: "literature".into(),
        }
    }
}

/// Published per-event costs of the adaptive stage for one split layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PublishedRow {
    pub layer: usize,
    pub cluster_adaptive_s: f64,
    pub cluster_frozen_s: f64,
    pub cluster_energy_j: f64,
    pub mcu_total_s: f64,
    pub mcu_energy_j: f64,
    pub phone_total_s: Option<f64>,
}

/// Literature constants: an 8-core cluster at 375 MHz, an STM32L4 at 80 MHz
/// and a Snapdragon 845. Never computed, only compared against.
pub const PUBLISHED: [PublishedRow; 8] = [
    PublishedRow {
        layer: 20,
        cluster_adaptive_s: 2.49e3,
        cluster_frozen_s: 0.87,
        cluster_energy_j: 154.0,
        mcu_total_s: 1.65e5,
        mcu_energy_j: 5688.0,
        phone_total_s: None,
    },
    PublishedRow {
        layer: 21,
        cluster_adaptive_s: 1.73e3,
        cluster_frozen_s: 0.94,
        cluster_energy_j: 107.0,
        mcu_total_s: 1.15e5,
        mcu_energy_j: 3981.0,
        phone_total_s: None,
    },
    PublishedRow {
        layer: 22,
        cluster_adaptive_s: 1.64e3,
        cluster_frozen_s: 0.95,
        cluster_energy_j: 101.0,
        mcu_total_s: 1.08e5,
        mcu_energy_j: 3728.0,
        phone_total_s: None,
    },
    PublishedRow {
        layer: 23,
        cluster_adaptive_s: 8.77e2,
        cluster_frozen_s: 1.03,
        cluster_energy_j: 54.3,
        mcu_total_s: 5.86e4,
        mcu_energy_j: 2020.0,
        phone_total_s: None,
    },
    PublishedRow {
        layer: 24,
        cluster_adaptive_s: 7.81e2,
        cluster_frozen_s: 1.03,
        cluster_energy_j: 48.4,
        mcu_total_s: 5.12e4,
        mcu_energy_j: 1769.0,
        phone_total_s: None,
    },
    PublishedRow {
        layer: 25,
        cluster_adaptive_s: 4.01e2,
        cluster_frozen_s: 1.09,
        cluster_energy_j: 24.9,
        mcu_total_s: 2.65e4,
        mcu_energy_j: 915.0,
        phone_total_s: None,
    },
    PublishedRow {
        layer: 26,
        cluster_adaptive_s: 3.81e2,
        cluster_frozen_s: 1.10,
        cluster_energy_j: 23.5,
        mcu_total_s: 2.49e4,
        mcu_energy_j: 859.0,
        phone_total_s: None,
    },
    PublishedRow {
        layer: 27,
        cluster_adaptive_s: 2.07,
        cluster_frozen_s: 1.25,
        cluster_energy_j: 0.13,
        mcu_total_s: 1.39e2,
        mcu_energy_j: 4.80,
        phone_total_s: Some(0.50),
    },
];

pub fn published_row(layer: usize) -> Option<PublishedRow> {
    PUBLISHED.iter().copied().find(|r| r.layer == layer)
}

impl PublishedRow {
    pub fn cluster(&self) -> TargetFigures {
        TargetFigures::literature("VEGA", self.cluster_adaptive_s, Some(self.cluster_energy_j))
    }

    /// Baselines of this row.
    pub fn baselines(&self) -> Vec<TargetFigures> {
        let mut out = vec![TargetFigures::literature(
            "STM32L4",
            self.mcu_total_s,
            Some(self.mcu_energy_j),
        )];
        if let Some(t) = self.phone_total_s {
            out.push(TargetFigures::literature("Snapdragon845", t, None));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub ours: String,
    pub baseline: String,
    pub baseline_source: String,
    /// Baseline latency over ours.
    pub speedup: f64,
    /// Baseline energy over ours, when both are known.
    pub energy_ratio: Option<f64>,
}

pub fn compare_targets(ours: &TargetFigures, baselines: &[TargetFigures]) -> Vec<Comparison> {
    baselines
        .iter()
        .map(|b| Comparison {
            ours: ours.name.clone(),
            baseline: b.name.clone(),
            baseline_source: b.source.clone(),
            speedup: b.latency_s / ours.latency_s,
            energy_ratio: match (b.energy_j, ours.energy_j) {
                (Some(be), Some(oe)) => Some(be / oe),
                _ => None,
            },
        })
        .collect()
}

pub const COMPARISON_HEADER: &str = "ours,baseline,baseline_source,speedup,energy_ratio";

pub fn comparison_csv(rows: &[Comparison]) -> String {
    let mut out = String::from(COMPARISON_HEADER);
    out.push('\n');
    for r in rows {
        let energy = r
            .energy_ratio
            .map(|v| format!("{v:.3}"))
            .unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{:.3},{}",
            r.ours, r.baseline, r.baseline_source, r.speedup, energy
        )
        .expect("write to string");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn replay_component_matches_arithmetic() {
        let w = Workload::mobilenet_v1_128(50);
        let m8 = report_memory(&w, 27, 3000, LatentPrecision::Bits(8)).unwrap();
        assert_eq!(m8.lr_bytes, 3_072_000);
        let m32 = report_memory(&w, 27, 3000, LatentPrecision::Float32).unwrap();
        assert_eq!(m32.lr_bytes, 4 * m8.lr_bytes);
        let m19 = report_memory(&w, 19, 1500, LatentPrecision::Bits(8)).unwrap();
        assert_eq!(m19.lr_bytes, 49_152_000);
        let none = report_memory(&w, 27, 0, LatentPrecision::Bits(8)).unwrap();
        assert_eq!(none.lr_bytes, 0);
        assert_eq!(
            (
                none.frozen_params,
                none.adaptive_params,
                none.gradients,
                none.activations
            ),
            (
                m8.frozen_params,
                m8.adaptive_params,
                m8.gradients,
                m8.activations
            )
        );
        assert_eq!(m8.adaptive_params, (1024 * 50 + 50) * 4);
        assert_eq!(m8.activations, 1024 * 4);
        assert!(report_memory(&w, 28, 1, LatentPrecision::Bits(8)).is_err());
    }

    #[test]
    fn lifetime_formula() {
        let h = report_lifetime(0.13, 1080.0, 3300.0, 1.8).hours().unwrap();
        assert!((h - 152.307).abs() < 0.01, "{h}");
        let double = report_lifetime(0.13, 2160.0, 3300.0, 1.8).hours().unwrap();
        assert_eq!(double * 2.0, h);
        assert_eq!(report_lifetime(0.13, 0.0, 3300.0, 1.8), Lifetime::Unbounded);
        assert_eq!(Lifetime::Unbounded.to_string(), "unbounded");
    }

    #[test]
    fn published_ratios() {
        let row = published_row(23).unwrap();
        let cmp = compare_targets(&row.cluster(), &row.baselines());
        assert_eq!(cmp.len(), 1);
        assert!((cmp[0].speedup - 66.82).abs() < 0.01);
        assert!((cmp[0].energy_ratio.unwrap() - 37.2).abs() < 0.05);
        let same = compare_targets(&row.cluster(), &[row.cluster()]);
        assert_eq!(same[0].speedup, 1.0);
        assert_eq!(same[0].energy_ratio, Some(1.0));
        let last = published_row(27).unwrap();
        let cmp = compare_targets(&last.cluster(), &last.baselines());
        assert_eq!(cmp[1].energy_ratio, None);
        assert!(comparison_csv(&cmp).lines().nth(2).unwrap().ends_with(','));
    }
}
