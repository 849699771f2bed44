//! Forward, backward-error and backward-gradient steps for the layer kinds of
//! the adaptive stage.
//!
//! Every convolution is lowered to matrix products over im2col columns:
//!
//! | kind   | forward            | backward error            | backward gradient     |
//! |--------|--------------------|---------------------------|-----------------------|
//! | conv   | `W · cols`         | `col2im(Wᵀ · dY)`         | `dY · colsᵀ`          |
//! | DW     | `w_c · cols_c`     | `col2im(w_cᵀ · dY_c)`     | `dY_c · cols_cᵀ`      |
//! | linear | `W · x + b`        | `Wᵀ · dY`                 | `dY · xᵀ`             |
//!
//! Gradients are summed over the batch; the mean reduction lives in the loss.

use std::thread;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{
    col2im_from, gemm_block, gemm_par, im2col_into, matmul_par, ConvGeometry, MatRef, Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    /// Dense KxK convolution. Only used for stems of the frozen stage.
    Conv,
    Pointwise,
    Depthwise,
    Linear,
    Relu,
}

impl LayerKind {
    pub fn has_params(self) -> bool {
        !matches!(self, LayerKind::Relu)
    }

    pub fn short_name(self) -> &'static str {
        match self {
            LayerKind::Conv => "CONV",
            LayerKind::Pointwise => "PW",
            LayerKind::Depthwise => "DW",
            LayerKind::Linear => "LIN",
            LayerKind::Relu => "RELU",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    /// Input channels; for `Linear` the flattened input feature count.
    pub cin: usize,
    pub cout: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub pad: usize,
    pub trainable: bool,
}

impl LayerSpec {
    pub fn conv(cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Self {
        Self {
            kind: LayerKind::Conv,
            cin,
            cout,
            kernel: (k, k),
            stride,
            pad,
            trainable: true,
        }
    }

    pub fn pointwise(cin: usize, cout: usize) -> Self {
        Self {
            kind: LayerKind::Pointwise,
            cin,
            cout,
            kernel: (1, 1),
            stride: 1,
            pad: 0,
            trainable: true,
        }
    }

    pub fn depthwise(channels: usize, stride: usize) -> Self {
        Self {
            kind: LayerKind::Depthwise,
            cin: channels,
            cout: channels,
            kernel: (3, 3),
            stride,
            pad: 1,
            trainable: true,
        }
    }

    pub fn linear(features: usize, outputs: usize) -> Self {
        Self {
            kind: LayerKind::Linear,
            cin: features,
            cout: outputs,
            kernel: (1, 1),
            stride: 1,
            pad: 0,
            trainable: true,
        }
    }

    pub fn relu(channels: usize) -> Self {
        Self {
            kind: LayerKind::Relu,
            cin: channels,
            cout: channels,
            kernel: (1, 1),
            stride: 1,
            pad: 0,
            trainable: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cin == 0 || self.cout == 0 || self.stride == 0 {
            return Err(Error::Config(format!("zero extent in {self:?}")));
        }
        match self.kind {
            LayerKind::Depthwise if self.cin != self.cout => Err(Error::Config(format!(
                "depthwise layer needs cin == cout, got {} -> {}",
                self.cin, self.cout
            ))),
            LayerKind::Depthwise if self.kernel != (3, 3) => {
                Err(Error::Config("depthwise kernel must be 3x3".into()))
            }
            LayerKind::Pointwise if self.kernel != (1, 1) || self.pad != 0 => Err(Error::Config(
                "pointwise layer needs a 1x1 kernel and no padding".into(),
            )),
            LayerKind::Relu if self.cin != self.cout => {
                Err(Error::Config("relu must preserve channels".into()))
            }
            _ => Ok(()),
        }
    }

    fn geometry(&self, c: usize, h: usize, w: usize) -> ConvGeometry {
        ConvGeometry {
            channels: c,
            height: h,
            width: w,
            kernel: self.kernel,
            stride: self.stride,
            pad: self.pad,
        }
    }

    /// Per-sample output shape `[C, H, W]` for an input `[C, H, W]`.
    pub fn output_shape(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let [c, h, w] = input;
        match self.kind {
            LayerKind::Linear => {
                if c * h * w != self.cin {
                    return Err(Error::Dimension(format!(
                        "linear layer expects {} features, got {c}x{h}x{w}",
                        self.cin
                    )));
                }
                Ok([self.cout, 1, 1])
            }
            LayerKind::Relu => {
                if c != self.cin {
                    return Err(Error::Dimension(format!(
                        "relu expects {} channels, got {c}",
                        self.cin
                    )));
                }
                Ok(input)
            }
            _ => {
                if c != self.cin {
                    return Err(Error::Dimension(format!(
                        "{:?} expects {} channels, got {c}",
                        self.kind, self.cin
                    )));
                }
                let (ho, wo) = self.geometry(c, h, w).output_hw()?;
                Ok([self.cout, ho, wo])
            }
        }
    }

    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        let (kh, kw) = self.kernel;
        match self.kind {
            LayerKind::Conv | LayerKind::Pointwise => Some(vec![self.cout, self.cin, kh, kw]),
            LayerKind::Depthwise => Some(vec![self.cout, 1, kh, kw]),
            LayerKind::Linear => Some(vec![self.cout, self.cin]),
            LayerKind::Relu => None,
        }
    }

    /// Weight and bias coefficient count.
    pub fn param_count(&self) -> usize {
        self.weight_shape()
            .map(|s| s.iter().product::<usize>() + self.cout)
            .unwrap_or(0)
    }

    /// Multiply-accumulates of one forward pass over one sample.
    pub fn forward_macs(&self, input: [usize; 3]) -> Result<usize> {
        let [_, ho, wo] = self.output_shape(input)?;
        let (kh, kw) = self.kernel;
        Ok(match self.kind {
            LayerKind::Conv | LayerKind::Pointwise => self.cout * self.cin * kh * kw * ho * wo,
            LayerKind::Depthwise => self.cout * kh * kw * ho * wo,
            LayerKind::Linear => self.cout * self.cin,
            LayerKind::Relu => 0,
        })
    }
}

/// Weight and bias gradient of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone)]
enum Cache {
    Empty,
    /// im2col columns of the whole batch, `[taps, N·P]`, sample-major.
    Columns {
        in_shape: Vec<usize>,
        cols: Tensor,
    },
    /// Last forward input (linear and relu).
    Input(Tensor),
}

/// A layer with its parameters and the activation cache of the current step.
#[derive(Debug, Clone)]
pub struct Layer {
    pub spec: LayerSpec,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
    cache: Cache,
    workers: usize,
}

impl Layer {
    /// He-normal weights, zero bias.
    pub fn init(spec: LayerSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let weight = spec.weight_shape().map(|s| {
            let fan_in: usize = s[1..].iter().product();
            rng.normal_tensor(&s, (2.0 / fan_in as f32).sqrt())
        });
        let bias = spec.kind.has_params().then(|| Tensor::zeros(&[spec.cout]));
        Ok(Self {
            spec,
            weight,
            bias,
            cache: Cache::Empty,
            workers: 1,
        })
    }

    pub fn with_params(
        spec: LayerSpec,
        weight: Option<Tensor>,
        bias: Option<Tensor>,
    ) -> Result<Self> {
        spec.validate()?;
        match (spec.weight_shape(), &weight) {
            (Some(s), Some(w)) if w.shape() == s.as_slice() => {}
            (None, None) => {}
            _ => {
                return Err(Error::Dimension(format!(
                    "weight shape {:?} does not fit {spec:?}",
                    weight.as_ref().map(|w| w.shape().to_vec())
                )))
            }
        }
        if let Some(b) = &bias {
            if b.shape() != [spec.cout] {
                return Err(Error::Dimension(format!("bias shape {:?}", b.shape())));
            }
        }
        Ok(Self {
            spec,
            weight,
            bias,
            cache: Cache::Empty,
            workers: 1,
        })
    }

    pub fn set_workers(&mut self, workers: usize) {
        self.workers = workers.max(1);
    }

    pub fn release_cache(&mut self) {
        self.cache = Cache::Empty;
    }

    pub fn has_cache(&self) -> bool {
        !matches!(self.cache, Cache::Empty)
    }

    fn weight_mat(&self) -> MatRef<'_> {
        let w = self.weight.as_ref().expect("parametrized layer");
        let rows = w.shape()[0];
        MatRef {
            data: w.data(),
            rows,
            cols: w.len() / rows,
        }
    }

    fn bias_data(&self) -> &[f32] {
        self.bias.as_ref().expect("parametrized layer").data()
    }

    /// Forward over an NCHW batch. `cache` keeps what the backward steps need.
    pub fn forward(&mut self, x: &Tensor, cache: bool) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let [co, ho, wo] = self.spec.output_shape([c, h, w])?;
        let out_len = co * ho * wo;
        let mut out = Vec::with_capacity(n * out_len);
        match self.spec.kind {
            LayerKind::Relu => {
                out.extend(x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }));
                if cache {
                    self.cache = Cache::Input(x.clone());
                }
            }
            LayerKind::Linear => {
                let xm = x.clone().reshape(&[n, self.spec.cin])?;
                let w = self.weight.as_ref().expect("linear weight");
                // yᵀ = W · xᵀ, one column per sample
                let yt = matmul_par(w, &xm.transpose()?, self.workers)?;
                let b = self.bias_data();
                for s in 0..n {
                    for (o, bo) in b.iter().enumerate().take(co) {
                        out.push(yt.data()[o * n + s] + bo);
                    }
                }
                if cache {
                    self.cache = Cache::Input(x.clone());
                }
            }
            LayerKind::Conv | LayerKind::Pointwise | LayerKind::Depthwise => {
                let geom = self.spec.geometry(c, h, w);
                let positions = ho * wo;
                let cols = batch_im2col(x, &geom)?;
                let y = self.apply_filters(&cols)?;
                let b = self.bias_data();
                let span = n * positions;
                for s in 0..n {
                    for o in 0..co {
                        let row = &y[o * span + s * positions..o * span + (s + 1) * positions];
                        out.extend(row.iter().map(|&v| v + b[o]));
                    }
                }
                if cache {
                    self.cache = Cache::Columns {
                        in_shape: x.shape().to_vec(),
                        cols,
                    };
                }
            }
        }
        Tensor::new(vec![n, co, ho, wo], out)
    }

    /// `W · cols` for batched columns, laid out `[cout, N·P]`.
    fn apply_filters(&self, cols: &Tensor) -> Result<Vec<f32>> {
        let wm = self.weight_mat();
        let cm = MatRef::of(cols)?;
        match self.spec.kind {
            LayerKind::Depthwise => {
                let taps = wm.cols;
                let span = cm.cols;
                let mut y = vec![0.0f32; self.spec.cout * span];
                for ch in 0..self.spec.cout {
                    let a = MatRef {
                        data: &wm.data[ch * taps..(ch + 1) * taps],
                        rows: 1,
                        cols: taps,
                    };
                    let b = MatRef {
                        data: &cm.data[ch * taps * span..(ch + 1) * taps * span],
                        rows: taps,
                        cols: span,
                    };
                    gemm_block(
                        a,
                        b,
                        &mut y[ch * span..(ch + 1) * span],
                        0..1,
                        0..span,
                        0..taps,
                    );
                }
                Ok(y)
            }
            _ => Ok(gemm_par(wm, cm, self.workers)),
        }
    }

    fn grad_shape_check(&self, grad_out: &Tensor, in_shape: &[usize]) -> Result<()> {
        let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
        let [co, ho, wo] = self.spec.output_shape([c, h, w])?;
        if grad_out.shape() != [n, co, ho, wo] {
            return Err(Error::Dimension(format!(
                "gradient {:?} does not match output [{n}, {co}, {ho}, {wo}]",
                grad_out.shape()
            )));
        }
        Ok(())
    }

    fn missing_cache(&self) -> Error {
        Error::State(format!(
            "{} layer has no cached forward input",
            self.spec.kind.short_name()
        ))
    }

    /// ∂L/∂x given ∂L/∂y.
    pub fn backward_error(&self, grad_out: &Tensor) -> Result<Tensor> {
        match (&self.cache, self.spec.kind) {
            (Cache::Input(x), LayerKind::Relu) => {
                if grad_out.shape() != x.shape() {
                    return Err(Error::Dimension(format!(
                        "gradient {:?} vs input {:?}",
                        grad_out.shape(),
                        x.shape()
                    )));
                }
                let data = x
                    .data()
                    .iter()
                    .zip(grad_out.data())
                    .map(|(&xi, &g)| if xi > 0.0 { g } else { 0.0 })
                    .collect();
                Tensor::new(x.shape().to_vec(), data)
            }
            (Cache::Input(x), LayerKind::Linear) => {
                self.grad_shape_check(grad_out, x.shape())?;
                let n = x.shape()[0];
                let g = grad_out.clone().reshape(&[n, self.spec.cout])?;
                let dx = matmul_par(
                    &g,
                    self.weight.as_ref().expect("linear weight"),
                    self.workers,
                )?;
                dx.reshape(x.shape())
            }
            (Cache::Columns { in_shape, cols: _ }, kind) => {
                self.grad_shape_check(grad_out, in_shape)?;
                let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
                let geom = self.spec.geometry(c, h, w);
                let (ho, wo) = geom.output_hw()?;
                let positions = ho * wo;
                let span = n * positions;
                let g = channel_major(grad_out.data(), n, self.spec.cout, positions);
                let gm = MatRef {
                    data: &g,
                    rows: self.spec.cout,
                    cols: span,
                };
                let wm = self.weight_mat();
                let dcols = if kind == LayerKind::Depthwise {
                    let taps = wm.cols;
                    let mut d = vec![0.0f32; c * taps * span];
                    for ch in 0..c {
                        let a = MatRef {
                            data: &wm.data[ch * taps..(ch + 1) * taps],
                            rows: taps,
                            cols: 1,
                        };
                        let b = MatRef {
                            data: &g[ch * span..(ch + 1) * span],
                            rows: 1,
                            cols: span,
                        };
                        gemm_block(
                            a,
                            b,
                            &mut d[ch * taps * span..(ch + 1) * taps * span],
                            0..taps,
                            0..span,
                            0..1,
                        );
                    }
                    d
                } else {
                    let wt = Tensor::new(vec![wm.rows, wm.cols], wm.data.to_vec())?.transpose()?;
                    gemm_par(MatRef::of(&wt)?, gm, self.workers)
                };
                let per = c * h * w;
                let mut out = vec![0.0f32; n * per];
                for (s, img) in out.chunks_mut(per).enumerate() {
                    col2im_from(&dcols, &geom, span, s * positions, img)?;
                }
                Tensor::new(in_shape.clone(), out)
            }
            _ => Err(self.missing_cache()),
        }
    }

    /// ∂L/∂W and ∂L/∂b given ∂L/∂y, summed over the batch in sample order.
    pub fn backward_grad(&self, grad_out: &Tensor) -> Result<ParamGrad> {
        if !self.spec.kind.has_params() {
            return Err(Error::State("relu has no parameters".into()));
        }
        match &self.cache {
            Cache::Input(x) => {
                self.grad_shape_check(grad_out, x.shape())?;
                let n = x.shape()[0];
                let g = grad_out.clone().reshape(&[n, self.spec.cout])?;
                let xm = x.clone().reshape(&[n, self.spec.cin])?;
                let gw = matmul_par(&g.transpose()?, &xm, self.workers)?;
                let mut gb = vec![0.0f32; self.spec.cout];
                for s in 0..n {
                    for (o, b) in gb.iter_mut().enumerate() {
                        *b += g.data()[s * self.spec.cout + o];
                    }
                }
                Ok(ParamGrad {
                    weight: gw.reshape(&[self.spec.cout, self.spec.cin])?,
                    bias: Tensor::new(vec![self.spec.cout], gb)?,
                })
            }
            Cache::Columns { in_shape, cols } => {
                self.grad_shape_check(grad_out, in_shape)?;
                let n = in_shape[0];
                let span = cols.shape()[1];
                let positions = span / n;
                let co = self.spec.cout;
                let g = channel_major(grad_out.data(), n, co, positions);
                let wshape = self.spec.weight_shape().expect("parametrized");
                let taps = wshape[1..].iter().product::<usize>();
                let depthwise = self.spec.kind == LayerKind::Depthwise;
                // columns (sample, position) accumulate in ascending order
                let gw = if depthwise {
                    let cd = cols.data();
                    let per_channel = par_map(co, self.workers, |o| {
                        let go = &g[o * span..(o + 1) * span];
                        Ok((0..taps)
                            .map(|t| {
                                let row = &cd[(o * taps + t) * span..(o * taps + t + 1) * span];
                                let mut acc = 0.0f32;
                                for (gv, cv) in go.iter().zip(row) {
                                    acc += gv * cv;
                                }
                                acc
                            })
                            .collect::<Vec<f32>>())
                    })?;
                    per_channel.concat()
                } else {
                    let gm = MatRef {
                        data: &g,
                        rows: co,
                        cols: span,
                    };
                    let cols_t = cols.transpose()?;
                    gemm_par(gm, MatRef::of(&cols_t)?, self.workers)
                };
                let gb: Vec<f32> = (0..co)
                    .map(|o| {
                        let mut acc = 0.0f32;
                        for &v in &g[o * span..(o + 1) * span] {
                            acc += v;
                        }
                        acc
                    })
                    .collect();
                Ok(ParamGrad {
                    weight: Tensor::new(wshape, gw)?,
                    bias: Tensor::new(vec![co], gb)?,
                })
            }
            Cache::Empty => Err(self.missing_cache()),
        }
    }
}

/// im2col of every sample of an NCHW batch, side by side: `[taps, N·P]`
/// with column `s·P + p` holding position `p` of sample `s`.
pub(crate) fn batch_im2col(x: &Tensor, geom: &ConvGeometry) -> Result<Tensor> {
    let n = x.shape()[0];
    let (ho, wo) = geom.output_hw()?;
    let positions = ho * wo;
    let span = n * positions;
    let per = geom.channels * geom.height * geom.width;
    let mut out = vec![0.0f32; geom.patch_len() * span];
    for s in 0..n {
        im2col_into(
            &x.data()[s * per..(s + 1) * per],
            geom,
            &mut out,
            span,
            s * positions,
        )?;
    }
    Tensor::new(vec![geom.patch_len(), span], out)
}

/// Reorders an `[N, C, P]` buffer to `[C, N·P]`.
pub(crate) fn channel_major(data: &[f32], n: usize, c: usize, positions: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; data.len()];
    let span = n * positions;
    for s in 0..n {
        for ch in 0..c {
            out[ch * span + s * positions..ch * span + (s + 1) * positions]
                .copy_from_slice(&data[(s * c + ch) * positions..(s * c + ch + 1) * positions]);
        }
    }
    out
}

/// Maps `f` over `0..n` on up to `workers` threads, each taking a contiguous
/// range; results come back in index order.
fn par_map<T: Send>(
    n: usize,
    workers: usize,
    f: impl Fn(usize) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    let workers = workers.clamp(1, n.max(1));
    if workers == 1 {
        return (0..n).map(f).collect();
    }
    let per = n.div_ceil(workers);
    let f = &f;
    thread::scope(|s| {
        let handles: Vec<_> = (0..n)
            .step_by(per)
            .map(|start| {
                s.spawn(move || {
                    (start..(start + per).min(n))
                        .map(f)
                        .collect::<Result<Vec<T>>>()
                })
            })
            .collect();
        let mut out = Vec::with_capacity(n);
        for h in handles {
            out.extend(h.join().expect("worker thread panicked")?);
        }
        Ok(out)
    })
}
/// Mean softmax cross-entropy over a batch of logits `[B, K]` (trailing unit
/// extents allowed). Returns the loss and `(softmax − onehot) / B`.
pub fn softmax_xent(logits: &Tensor, labels: &[usize]) -> Result<(f32, Tensor)> {
    let b = logits.shape()[0];
    let k = logits.len() / b;
    if labels.len() != b {
        return Err(Error::Dimension(format!(
            "{} labels for batch {b}",
            labels.len()
        )));
    }
    let mut grad = vec![0.0f32; b * k];
    let mut loss = 0.0f64;
    for (s, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::Label { label, classes: k });
        }
        let row = &logits.data()[s * k..(s + 1) * k];
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let exps: Vec<f64> = row.iter().map(|&v| ((v - max) as f64).exp()).collect();
        let sum: f64 = exps.iter().sum();
        loss += sum.ln() - (row[label] - max) as f64;
        for j in 0..k {
            let p = exps[j] / sum;
            let t = if j == label { 1.0 } else { 0.0 };
            grad[s * k + j] = ((p - t) / b as f64) as f32;
        }
    }
    Ok((
        (loss / b as f64) as f32,
        Tensor::new(logits.shape().to_vec(), grad)?,
    ))
}

/// Index of the largest logit per sample.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let b = logits.shape()[0];
    let k = logits.len() / b;
    logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |best, (i, &v)| {
                    if v > best.1 {
                        (i, v)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect()
}
