//! Layer stack split into a frozen prefix and an adaptive suffix.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{argmax_rows, softmax_xent, Layer, LayerKind, LayerSpec, ParamGrad};
use crate::quant::{LatentPrecision, QuantParams};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const PARAMS_FILE: &str = "params.bin";

/// Post-training quantization state of the frozen stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrozenQuant {
    pub q_bits: u8,
    pub latent: LatentPrecision,
    /// Scale of the latent (last frozen) activation; absent for FP32 latents.
    pub latent_params: Option<QuantParams>,
    pub layers: Vec<LayerQuant>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerQuant {
    pub layer: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<QuantParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activation: Option<QuantParams>,
}

impl FrozenQuant {
    pub fn activation(&self, layer: usize) -> Option<&QuantParams> {
        self.layers
            .iter()
            .find(|l| l.layer == layer)
            .and_then(|l| l.activation.as_ref())
    }
}

/// Gradients of the adaptive-stage parameters, keyed by layer index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientSet {
    pub entries: BTreeMap<usize, ParamGrad>,
}

#[derive(Debug, Clone)]
pub struct NetworkModel {
    layers: Vec<Layer>,
    split: usize,
    input_shape: [usize; 3],
    /// Per-sample input shape of every layer, plus the network output.
    shapes: Vec<[usize; 3]>,
    frozen: Option<FrozenQuant>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelManifest {
    input_shape: [usize; 3],
    split: usize,
    layers: Vec<LayerSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    frozen: Option<FrozenQuant>,
}

impl NetworkModel {
    /// Builds a freshly initialized model. `split` is the index of the first
    /// adaptive layer; earlier layers are frozen.
    pub fn new(
        specs: &[LayerSpec],
        split: usize,
        input_shape: [usize; 3],
        rng: &mut Rng,
    ) -> Result<Self> {
        let layers = specs
            .iter()
            .map(|s| Layer::init(*s, rng))
            .collect::<Result<Vec<_>>>()?;
        Self::from_layers(layers, split, input_shape)
    }

    pub fn from_layers(
        mut layers: Vec<Layer>,
        split: usize,
        input_shape: [usize; 3],
    ) -> Result<Self> {
        if layers.is_empty() || split >= layers.len() {
            return Err(Error::Config(format!(
                "split index {split} outside [0, {})",
                layers.len()
            )));
        }
        let mut shapes = vec![input_shape];
        for l in &layers {
            let next = l.spec.output_shape(*shapes.last().expect("non-empty"))?;
            shapes.push(next);
        }
        for (i, l) in layers.iter_mut().enumerate() {
            l.spec.trainable = i >= split && l.spec.kind.has_params();
        }
        Ok(Self {
            layers,
            split,
            input_shape,
            shapes,
            frozen: None,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer(&self, i: usize) -> &Layer {
        &self.layers[i]
    }

    pub fn layer_mut(&mut self, i: usize) -> &mut Layer {
        &mut self.layers[i]
    }

    pub fn split(&self) -> usize {
        self.split
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    /// Per-sample input shape of layer `i` (`i == len` gives the output shape).
    pub fn shape_at(&self, i: usize) -> [usize; 3] {
        self.shapes[i]
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        self.shapes[self.split]
    }

    pub fn num_classes(&self) -> usize {
        let [c, h, w] = self.shapes[self.layers.len()];
        c * h * w
    }

    pub fn frozen_quant(&self) -> Option<&FrozenQuant> {
        self.frozen.as_ref()
    }

    pub(crate) fn set_frozen_quant(&mut self, q: FrozenQuant) {
        self.frozen = Some(q);
    }

    pub fn set_workers(&mut self, workers: usize) {
        for l in &mut self.layers {
            l.set_workers(workers);
        }
    }

    /// Total coefficient count N_P.
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.spec.param_count()).sum()
    }

    pub fn frozen_param_count(&self) -> usize {
        self.layers[..self.split]
            .iter()
            .map(|l| l.spec.param_count())
            .sum()
    }

    pub fn adaptive_param_count(&self) -> usize {
        self.layers[self.split..]
            .iter()
            .map(|l| l.spec.param_count())
            .sum()
    }

    /// Runs layers `[from, to)` without caching. Frozen activations are
    /// snapped to their grid when the stage has been quantized, except the
    /// latent output itself, which is left to the latent encoder.
    pub fn forward_range(&mut self, x: &Tensor, from: usize, to: usize) -> Result<Tensor> {
        let mut h = x.clone();
        for i in from..to {
            h = self.layers[i].forward(&h, false)?;
            if i + 1 < self.split {
                if let Some(p) = self.frozen.as_ref().and_then(|f| f.activation(i)) {
                    for v in h.data_mut() {
                        *v = p.fake_quant(*v);
                    }
                }
            }
        }
        Ok(h)
    }

    /// FP32 output of the frozen stage (before latent quantization).
    pub fn forward_frozen(&mut self, x: &Tensor) -> Result<Tensor> {
        self.forward_range(x, 0, self.split)
    }

    pub fn forward_adaptive(&mut self, latents: &Tensor) -> Result<Tensor> {
        self.forward_range(latents, self.split, self.layers.len())
    }

    pub fn predict(&mut self, latents: &Tensor) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.forward_adaptive(latents)?))
    }

    /// One forward/backward pass of the adaptive stage. Returns the mean loss
    /// and the parameter gradients; caches are released before returning.
    pub fn loss_and_grads(
        &mut self,
        latents: &Tensor,
        labels: &[usize],
    ) -> Result<(f32, GradientSet)> {
        let mut h = latents.clone();
        for i in self.split..self.layers.len() {
            h = self.layers[i].forward(&h, true)?;
        }
        let (loss, mut g) = softmax_xent(&h, labels)?;
        let mut grads = GradientSet::default();
        for i in (self.split..self.layers.len()).rev() {
            let layer = &self.layers[i];
            if layer.spec.kind.has_params() {
                grads.entries.insert(i, layer.backward_grad(&g)?);
            }
            if i > self.split {
                g = layer.backward_error(&g)?;
            }
        }
        for l in &mut self.layers[self.split..] {
            l.release_cache();
        }
        Ok((loss, grads))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let manifest = ModelManifest {
            input_shape: self.input_shape,
            split: self.split,
            layers: self.layers.iter().map(|l| l.spec).collect(),
            frozen: self.frozen.clone(),
        };
        let text = toml::to_string(&manifest).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(dir.join(MANIFEST_FILE), text)?;
        let mut w = BufWriter::new(fs::File::create(dir.join(PARAMS_FILE))?);
        for l in &self.layers {
            if let (Some(wt), Some(b)) = (&l.weight, &l.bias) {
                wt.write_to(&mut w)?;
                b.write_to(&mut w)?;
            }
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
        let manifest: ModelManifest =
            toml::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
        let mut r = BufReader::new(fs::File::open(dir.join(PARAMS_FILE))?);
        let mut layers = Vec::with_capacity(manifest.layers.len());
        for spec in &manifest.layers {
            let (w, b) = if spec.kind.has_params() {
                (
                    Some(Tensor::read_from(&mut r)?),
                    Some(Tensor::read_from(&mut r)?),
                )
            } else {
                (None, None)
            };
            layers.push(Layer::with_params(*spec, w, b)?);
        }
        let mut m = Self::from_layers(layers, manifest.split, manifest.input_shape)?;
        m.frozen = manifest.frozen;
        Ok(m)
    }

    /// Index of the last layer whose output feeds the adaptive stage.
    pub fn latent_layer(&self) -> Option<usize> {
        self.split.checked_sub(1)
    }

    pub fn describe(&self) -> String {
        self.layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let [c, h, w] = self.shapes[i + 1];
                let tag = if i < self.split { "frozen" } else { "adaptive" };
                format!(
                    "{i:>3} {:<5} -> {c}x{h}x{w} {tag}",
                    l.spec.kind.short_name()
                )
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Mini-batch SGD with optional momentum:
/// `v ← g + μ·v`, `w ← w − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    velocity: BTreeMap<usize, ParamGrad>,
}

impl Sgd {
    pub fn new(lr: f32, momentum: f32) -> Self {
        Self {
            lr,
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, model: &mut NetworkModel, grads: &GradientSet) -> Result<()> {
        for (&i, g) in &grads.entries {
            if i < model.split() {
                return Err(Error::State(format!("gradient for frozen layer {i}")));
            }
            let layer = model.layer_mut(i);
            let (w, b) = match (&mut layer.weight, &mut layer.bias) {
                (Some(w), Some(b)) => (w, b),
                _ => return Err(Error::State(format!("layer {i} has no parameters"))),
            };
            if w.shape() != g.weight.shape() || b.shape() != g.bias.shape() {
                return Err(Error::Dimension(format!(
                    "gradient shape mismatch at layer {i}"
                )));
            }
            let v = self.velocity.entry(i).or_insert_with(|| ParamGrad {
                weight: Tensor::zeros(g.weight.shape()),
                bias: Tensor::zeros(g.bias.shape()),
            });
            let (lr, mu) = (self.lr, self.momentum);
            for (param, (grad, vel)) in
                [(w, (&g.weight, &mut v.weight)), (b, (&g.bias, &mut v.bias))]
            {
                for ((p, &gi), vi) in param
                    .data_mut()
                    .iter_mut()
                    .zip(grad.data())
                    .zip(vel.data_mut().iter_mut())
                {
                    *vi = gi + mu * *vi;
                    if lr != 0.0 {
                        *p -= lr * *vi;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Layer kinds present in a model, in first-seen order.
pub fn kinds(model: &NetworkModel) -> Vec<LayerKind> {
    let mut out = Vec::new();
    for l in model.layers() {
        if !out.contains(&l.spec.kind) {
            out.push(l.spec.kind);
        }
    }
    out
}
