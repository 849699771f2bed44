use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{LayerKind, LayerSpec};
use crate::model::NetworkModel;
use crate::tensor::ConvGeometry;

use super::efficiency::{KernelKind, Step};

/// One MAC-carrying layer with the per-sample input it sees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimLayer {
    pub spec: LayerSpec,
    pub input: [usize; 3],
}

impl SimLayer {
    pub fn output(&self) -> [usize; 3] {
        self.spec
            .output_shape(self.input)
            .expect("validated workload")
    }

    pub fn input_elems(&self) -> usize {
        self.input.iter().product()
    }

    pub fn output_elems(&self) -> usize {
        self.output().iter().product()
    }

    pub fn kernel_kind(&self) -> KernelKind {
        match self.spec.kind {
            LayerKind::Depthwise => KernelKind::Dw,
            LayerKind::Linear => KernelKind::Linear,
            _ => KernelKind::Pw,
        }
    }

    fn geometry(&self) -> ConvGeometry {
        ConvGeometry {
            channels: self.input[0],
            height: self.input[1],
            width: self.input[2],
            kernel: self.spec.kernel,
            stride: self.spec.stride,
            pad: self.spec.pad,
        }
    }
}

/// A chain of layers, indexed from 0. Activations are not listed; they move
/// no weights and are fused into the neighbouring kernels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Workload {
    pub name: String,
    pub layers: Vec<SimLayer>,
}

/// One (layer, step) lowered to a grouped matrix product
/// `C[g] (m×n) = A[g] (m×k) · B[g] (k×n)` over `groups` independent groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStep {
    pub layer: usize,
    pub kind: KernelKind,
    pub step: Step,
    pub groups: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub elem_bytes: usize,
    /// Depthwise im2col operand: which axis runs over output positions and the
    /// raw input it is built from.
    pub columns: Option<ColumnOperand>,
}

/// Describes the im2col operand of a depthwise step so the planner can size
/// either DMA-side gathering or an explicit L1 buffer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColumnOperand {
    pub axis: ColumnAxis,
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_w: usize,
    pub stride: usize,
    pub pad: usize,
    pub kernel_h: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnAxis {
    /// Positions along `n` (forward: B = cols).
    N,
    /// Positions along `k` (weight gradient: B = colsᵀ).
    K,
}

impl ColumnOperand {
    fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel_h) / self.stride + 1
    }

    /// First row and row count of the raw input feeding output positions
    /// `pos` (half-open), counting rows of all samples stacked per channel.
    pub fn row_span(&self, pos: std::ops::Range<usize>) -> (usize, usize) {
        if pos.is_empty() {
            return (0, 0);
        }
        let per_sample = self.out_h() * self.out_w;
        let (s0, l0) = (pos.start / per_sample, pos.start % per_sample);
        let (s1, l1) = ((pos.end - 1) / per_sample, (pos.end - 1) % per_sample);
        let top = ((l0 / self.out_w) * self.stride).saturating_sub(self.pad);
        let bottom = ((l1 / self.out_w) * self.stride + self.kernel_h - 1)
            .saturating_sub(self.pad)
            .min(self.in_h - 1);
        let first = s0 * self.in_h + top;
        (first, s1 * self.in_h + bottom + 1 - first)
    }

    pub fn input_rows(&self, pos: std::ops::Range<usize>) -> usize {
        self.row_span(pos).1
    }
}

impl LayerStep {
    pub fn macs(&self) -> usize {
        self.groups * self.m * self.k * self.n
    }

    pub fn label(&self) -> String {
        format!("L{} {} {}", self.layer, self.kind.name(), self.step.name())
    }
}

impl Workload {
    pub fn validate(&self) -> Result<()> {
        for (i, l) in self.layers.iter().enumerate() {
            l.spec.validate()?;
            if l.spec.kind == LayerKind::Relu {
                return Err(Error::Config(format!(
                    "layer {i}: activations are not simulated"
                )));
            }
            l.spec.output_shape(l.input)?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// The MAC-carrying layers of a model, ReLUs dropped, indices renumbered.
    /// Returns the workload and the index of the first adaptive layer.
    pub fn from_model(model: &NetworkModel) -> (Self, usize) {
        let mut layers = Vec::new();
        let mut split = None;
        for (i, l) in model.layers().iter().enumerate() {
            if i >= model.split() && split.is_none() && l.spec.kind != LayerKind::Relu {
                split = Some(layers.len());
            }
            if l.spec.kind != LayerKind::Relu {
                layers.push(SimLayer {
                    spec: l.spec,
                    input: model.shape_at(i),
                });
            }
        }
        let n = layers.len();
        (
            Self {
                name: "model".into(),
                layers,
            },
            split.unwrap_or(n),
        )
    }

    /// MobileNet-V1 (width 1.0) at 128×128 with a 50-way head. Layer 0 is the
    /// stem convolution, odd layers 1..=25 are depthwise, even layers 2..=26
    /// pointwise, layer 27 the classifier on the globally pooled 1024 features.
    pub fn mobilenet_v1_128(classes: usize) -> Self {
        let mut layers = Vec::new();
        let mut shape = [3usize, 128, 128];
        let mut push = |spec: LayerSpec, shape: &mut [usize; 3]| {
            let l = SimLayer {
                spec,
                input: *shape,
            };
            *shape = l.output();
            layers.push(l);
        };
        push(LayerSpec::conv(3, 32, 3, 2, 1), &mut shape);
        let blocks: [(usize, usize, usize); 13] = [
            (32, 64, 1),
            (64, 128, 2),
            (128, 128, 1),
            (128, 256, 2),
            (256, 256, 1),
            (256, 512, 2),
            (512, 512, 1),
            (512, 512, 1),
            (512, 512, 1),
            (512, 512, 1),
            (512, 512, 1),
            (512, 1024, 2),
            (1024, 1024, 1),
        ];
        for (cin, cout, stride) in blocks {
            push(LayerSpec::depthwise(cin, stride), &mut shape);
            push(LayerSpec::pointwise(cin, cout), &mut shape);
        }
        // global average pooling folded into the classifier input
        let pooled = [shape[0], 1, 1];
        layers.push(SimLayer {
            spec: LayerSpec::linear(shape[0], classes),
            input: pooled,
        });
        Self {
            name: "mobilenet_v1_128".into(),
            layers,
        }
    }

    /// Per-sample element count of the input to layer `l` (the latent replay
    /// size when the split sits at `l`).
    pub fn latent_elems(&self, l: usize) -> usize {
        self.layers[l].input_elems()
    }

    /// Lowers one layer step for a batch of `batch` samples.
    pub fn lower(
        &self,
        layer: usize,
        step: Step,
        batch: usize,
        elem_bytes: usize,
    ) -> Result<LayerStep> {
        let l = self
            .layers
            .get(layer)
            .ok_or_else(|| Error::Config(format!("layer {layer} out of range")))?;
        let [_, ho, wo] = l.output();
        let p = ho * wo * batch;
        let (kh, kw) = l.spec.kernel;
        let taps_pw = l.spec.cin * kh * kw;
        let (cin, cout) = (l.spec.cin, l.spec.cout);
        let columns = |axis| {
            Some(ColumnOperand {
                axis,
                batch,
                in_h: l.input[1],
                in_w: l.input[2],
                out_w: wo,
                stride: l.spec.stride,
                pad: l.spec.pad,
                kernel_h: kh,
            })
        };
        let (groups, m, k, n, cols) = match (l.kernel_kind(), step) {
            (KernelKind::Dw, Step::Fw) => (cout, 1, kh * kw, p, columns(ColumnAxis::N)),
            (KernelKind::Dw, Step::BwErr) => (cout, kh * kw, 1, p, None),
            (KernelKind::Dw, Step::BwGrad) => (cout, 1, p, kh * kw, columns(ColumnAxis::K)),
            (KernelKind::Linear, Step::Fw) => (1, cout, cin, batch, None),
            (KernelKind::Linear, Step::BwErr) => (1, cin, cout, batch, None),
            (KernelKind::Linear, Step::BwGrad) => (1, cout, batch, cin, None),
            (KernelKind::Pw, Step::Fw) => (1, cout, taps_pw, p, None),
            (KernelKind::Pw, Step::BwErr) => (1, taps_pw, cout, p, None),
            (KernelKind::Pw, Step::BwGrad) => (1, cout, p, taps_pw, None),
        };
        debug_assert!(l.geometry().output_hw().is_ok());
        Ok(LayerStep {
            layer,
            kind: l.kernel_kind(),
            step,
            groups,
            m,
            k,
            n,
            elem_bytes,
            columns: cols,
        })
    }

    /// Steps of one training iteration of the adaptive stage starting at
    /// `first`: forward for every layer, then backward in reverse order. The
    /// first adaptive layer needs no input error.
    pub fn adaptive_steps(
        &self,
        first: usize,
        batch: usize,
        elem_bytes: usize,
    ) -> Result<Vec<LayerStep>> {
        if first >= self.layers.len() {
            return Err(Error::Config(format!(
                "split {first} leaves no adaptive layer in a {}-layer workload",
                self.layers.len()
            )));
        }
        let mut steps = Vec::new();
        for i in first..self.layers.len() {
            steps.push(self.lower(i, Step::Fw, batch, elem_bytes)?);
        }
        for i in (first..self.layers.len()).rev() {
            if i > first {
                steps.push(self.lower(i, Step::BwErr, batch, elem_bytes)?);
            }
            steps.push(self.lower(i, Step::BwGrad, batch, elem_bytes)?);
        }
        Ok(steps)
    }
}
