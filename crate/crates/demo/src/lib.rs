//! WebAssembly bindings for the static demo page. Every export takes plain
//! numbers and returns a JSON string, or throws a string error.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use qlr_core::memsim::{
    bandwidth_sweep, report_lifetime, Duplex, HierarchyConfig, KernelEfficiencyTable, Workload,
};
use qlr_core::quant::{pack_codes, QuantParams};
use qlr_core::rng::Rng;

pub const SWEEP_BANDWIDTHS: [u32; 5] = [8, 16, 32, 64, 128];
pub const SWEEP_CORES: [u32; 4] = [1, 2, 4, 8];

#[derive(Debug, Serialize)]
pub struct Curve {
    pub cores: u32,
    pub mac_per_cycle: Vec<f64>,
}

#[derive(Debug, Serialize)]
pub struct Sweep {
    pub split: usize,
    pub l1_bytes: usize,
    pub bandwidths: Vec<u32>,
    pub curves: Vec<Curve>,
}

/// MAC/cyc of one MobileNet-V1 training iteration from `split` for each core
/// count across DMA bandwidths.
pub fn sweep(split: usize, l1_kb: usize, half_duplex: bool) -> Result<Sweep, String> {
    let w = Workload::mobilenet_v1_128(50);
    let base = HierarchyConfig {
        duplex: if half_duplex {
            Duplex::Half
        } else {
            Duplex::Full
        },
        ..Default::default()
    };
    let l1 = l1_kb * 1024;
    let pts = bandwidth_sweep(
        &w,
        split,
        &base,
        &KernelEfficiencyTable::default(),
        &SWEEP_CORES,
        &[l1],
        &SWEEP_BANDWIDTHS,
    )
    .map_err(|e| e.to_string())?;
    let curves = SWEEP_CORES
        .iter()
        .map(|&c| Curve {
            cores: c,
            mac_per_cycle: pts
                .iter()
                .filter(|p| p.cores == c)
                .map(|p| p.mac_per_cycle)
                .collect(),
        })
        .collect();
    Ok(Sweep {
        split,
        l1_bytes: l1,
        bandwidths: SWEEP_BANDWIDTHS.to_vec(),
        curves,
    })
}

#[derive(Debug, Serialize)]
pub struct RoundTrip {
    pub bits: u8,
    pub scale: f32,
    pub values: Vec<f32>,
    pub codes: Vec<i32>,
    pub restored: Vec<f32>,
    pub max_error: f32,
    pub packed_bytes: usize,
    pub float_bytes: usize,
}

/// Quantizes `count` seeded activations in `[0, max]` onto a `bits` grid.
pub fn round_trip(bits: u8, max: f32, count: usize, seed: u64) -> Result<RoundTrip, String> {
    let p = QuantParams::from_range(bits, false, 0.0, max).map_err(|e| e.to_string())?;
    let mut rng = Rng::new(seed);
    let values: Vec<f32> = (0..count).map(|_| rng.uniform(0.0, max)).collect();
    let codes: Vec<i32> = values.iter().map(|&v| p.quantize_value(v)).collect();
    let restored: Vec<f32> = codes.iter().map(|&c| p.dequantize_value(c)).collect();
    let max_error = values
        .iter()
        .zip(&restored)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f32::max);
    Ok(RoundTrip {
        bits,
        scale: p.scale,
        packed_bytes: pack_codes(&codes, bits).len(),
        float_bytes: 4 * count,
        values,
        codes,
        restored,
        max_error,
    })
}

#[derive(Debug, Serialize)]
pub struct LifetimeOut {
    pub hours: Option<f64>,
    pub days: Option<f64>,
}

pub fn lifetime(
    energy_j: f64,
    events_per_hour: f64,
    battery_mah: f64,
    battery_v: f64,
) -> LifetimeOut {
    let hours = report_lifetime(energy_j, events_per_hour, battery_mah, battery_v).hours();
    LifetimeOut {
        hours,
        days: hours.map(|h| h / 24.0),
    }
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("plain data serializes")
}

#[wasm_bindgen]
pub fn sweep_json(split: usize, l1_kb: usize, half_duplex: bool) -> Result<String, JsValue> {
    sweep(split, l1_kb, half_duplex)
        .map(|s| json(&s))
        .map_err(JsValue::from)
}

#[wasm_bindgen]
pub fn round_trip_json(bits: u8, max: f32, count: usize, seed: u32) -> Result<String, JsValue> {
    round_trip(bits, max, count, seed as u64)
        .map(|r| json(&r))
        .map_err(JsValue::from)
}

#[wasm_bindgen]
pub fn lifetime_json(
    energy_j: f64,
    events_per_hour: f64,
    battery_mah: f64,
    battery_v: f64,
) -> String {
    json(&lifetime(energy_j, events_per_hour, battery_mah, battery_v))
}
