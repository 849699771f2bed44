//! Calibration and post-training quantization of the frozen stage.

use crate::error::{Error, Result};
use crate::layers::LayerKind;
use crate::model::{FrozenQuant, LayerQuant, NetworkModel};
use crate::quant::{CalibrationStats, LatentPrecision, QuantParams};
use crate::tensor::Tensor;

/// Records weight ranges of every frozen parameterized layer and the output
/// range of every frozen layer over the calibration batches (NCHW each).
pub fn calibrate(model: &mut NetworkModel, batches: &[Tensor]) -> Result<CalibrationStats> {
    if batches.is_empty() {
        return Err(Error::Calibration("empty calibration set".into()));
    }
    let split = model.split();
    let mut stats = CalibrationStats::default();
    for i in 0..split {
        if let Some(w) = &model.layer(i).weight {
            stats.weights.insert(i, min_max(w.data()));
        }
    }
    for batch in batches {
        stats.samples += batch.shape()[0];
        let mut h = batch.clone();
        for i in 0..split {
            h = model.forward_range(&h, i, i + 1)?;
            let (lo, hi) = min_max(h.data());
            let e = stats.activations.entry(i).or_insert((0.0, 0.0));
            *e = (e.0.min(lo).max(0.0), e.1.max(hi));
        }
    }
    Ok(stats)
}

fn min_max(xs: &[f32]) -> (f32, f32) {
    xs.iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
}

/// Snaps every frozen weight onto its signed `q_bits` grid, attaches unsigned
/// `q_bits` activation grids after frozen ReLUs, and fixes the latent grid at
/// the requested precision.
pub fn freeze_and_quantize(
    model: &mut NetworkModel,
    stats: &CalibrationStats,
    q_bits: u8,
    latent: LatentPrecision,
) -> Result<FrozenQuant> {
    let split = model.split();
    if split == 0 {
        return Err(Error::Config(
            "split index 0 leaves no frozen stage to quantize".into(),
        ));
    }
    let mut layers = Vec::new();
    for i in 0..split {
        let mut entry = LayerQuant {
            layer: i,
            weight: None,
            activation: None,
        };
        if model.layer(i).weight.is_some() {
            let &(lo, hi) = stats
                .weights
                .get(&i)
                .ok_or_else(|| Error::Calibration(format!("no weight range for layer {i}")))?;
            let p = QuantParams::from_range(q_bits, true, lo, hi)?;
            let w = model.layer_mut(i).weight.as_mut().expect("checked above");
            for v in w.data_mut() {
                *v = p.fake_quant(*v);
            }
            entry.weight = Some(p);
        }
        if i + 1 < split && model.layer(i).spec.kind == LayerKind::Relu {
            let &(_, hi) = stats
                .activations
                .get(&i)
                .ok_or_else(|| Error::Calibration(format!("no activation range for layer {i}")))?;
            entry.activation = Some(QuantParams::from_range(q_bits, false, 0.0, hi)?);
        }
        layers.push(entry);
    }
    let latent_params = match latent {
        LatentPrecision::Float32 => None,
        LatentPrecision::Bits(q) => {
            let &(_, hi) = stats
                .activations
                .get(&(split - 1))
                .ok_or_else(|| Error::Calibration("no latent activation range".into()))?;
            Some(QuantParams::from_range(q, false, 0.0, hi)?)
        }
    };
    let fq = FrozenQuant {
        q_bits,
        latent,
        latent_params,
        layers,
    };
    model.set_frozen_quant(fq.clone());
    Ok(fq)
}
