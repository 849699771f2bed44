//! Direct-loop f64 reference layers and finite-difference gradient checks.
#![allow(dead_code)]

use qlr_core::layers::{Layer, LayerKind, LayerSpec};
use qlr_core::rng::Rng;
use qlr_core::Tensor;

pub const FD_STEP: f64 = 1e-3;

/// Layer parameters and input in f64, NCHW.
#[derive(Debug, Clone)]
pub struct Instance {
    pub spec: LayerSpec,
    pub shape: [usize; 4],
    pub x: Vec<f64>,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    /// Weights of the scalar probe loss `Σ r·y`.
    pub r: Vec<f64>,
}

fn out_hw(spec: &LayerSpec, h: usize, w: usize) -> (usize, usize) {
    let (kh, kw) = spec.kernel;
    (
        (h + 2 * spec.pad - kh) / spec.stride + 1,
        (w + 2 * spec.pad - kw) / spec.stride + 1,
    )
}

pub fn out_len(spec: &LayerSpec, shape: [usize; 4]) -> usize {
    let [n, c, h, w] = shape;
    match spec.kind {
        LayerKind::Linear => n * spec.cout,
        LayerKind::Relu => n * c * h * w,
        _ => {
            let (ho, wo) = out_hw(spec, h, w);
            n * spec.cout * ho * wo
        }
    }
}

pub fn forward(spec: &LayerSpec, shape: [usize; 4], x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let [n, c, h, wd] = shape;
    match spec.kind {
        LayerKind::Relu => x.iter().map(|&v| v.max(0.0)).collect(),
        LayerKind::Linear => {
            let f = c * h * wd;
            let mut y = vec![0.0; n * spec.cout];
            for s in 0..n {
                for o in 0..spec.cout {
                    let mut acc = b[o];
                    for i in 0..f {
                        acc += w[o * f + i] * x[s * f + i];
                    }
                    y[s * spec.cout + o] = acc;
                }
            }
            y
        }
        LayerKind::Conv | LayerKind::Pointwise | LayerKind::Depthwise => {
            let (kh, kw) = spec.kernel;
            let (ho, wo) = out_hw(spec, h, wd);
            let dw = spec.kind == LayerKind::Depthwise;
            let cin_w = if dw { 1 } else { c };
            let mut y = vec![0.0; n * spec.cout * ho * wo];
            for s in 0..n {
                for o in 0..spec.cout {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let mut acc = b[o];
                            for ci in 0..cin_w {
                                let src_c = if dw { o } else { ci };
                                for ky in 0..kh {
                                    for kx in 0..kw {
                                        let iy =
                                            (oy * spec.stride + ky) as isize - spec.pad as isize;
                                        let ix =
                                            (ox * spec.stride + kx) as isize - spec.pad as isize;
                                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize
                                        {
                                            continue;
                                        }
                                        let xv = x[((s * c + src_c) * h + iy as usize) * wd
                                            + ix as usize];
                                        acc += w[((o * cin_w + ci) * kh + ky) * kw + kx] * xv;
                                    }
                                }
                            }
                            y[((s * spec.cout + o) * ho + oy) * wo + ox] = acc;
                        }
                    }
                }
            }
            y
        }
    }
}

impl Instance {
    pub fn random(spec: LayerSpec, shape: [usize; 4], rng: &mut Rng) -> Self {
        let len = shape.iter().product();
        // keep relu inputs well away from the kink
        let x = (0..len)
            .map(|_| {
                let v = rng.uniform(0.05, 1.0) as f64;
                if rng.bernoulli(0.5) {
                    v
                } else {
                    -v
                }
            })
            .collect();
        let wlen = spec.weight_shape().map_or(0, |s| s.iter().product());
        let w = (0..wlen).map(|_| rng.uniform(-1.0, 1.0) as f64).collect();
        let b = if spec.kind.has_params() {
            (0..spec.cout)
                .map(|_| rng.uniform(-0.5, 0.5) as f64)
                .collect()
        } else {
            Vec::new()
        };
        let r = (0..out_len(&spec, shape))
            .map(|_| rng.uniform(-1.0, 1.0) as f64)
            .collect();
        Self {
            spec,
            shape,
            x,
            w,
            b,
            r,
        }
    }

    fn loss(&self, x: &[f64], w: &[f64], b: &[f64]) -> f64 {
        forward(&self.spec, self.shape, x, w, b)
            .iter()
            .zip(&self.r)
            .map(|(y, r)| y * r)
            .sum()
    }

    fn fd(&self, which: usize) -> Vec<f64> {
        let base = [&self.x, &self.w, &self.b][which];
        (0..base.len())
            .map(|i| {
                let mut p = [self.x.clone(), self.w.clone(), self.b.clone()];
                p[which][i] += FD_STEP;
                let up = self.loss(&p[0], &p[1], &p[2]);
                p[which][i] -= 2.0 * FD_STEP;
                let down = self.loss(&p[0], &p[1], &p[2]);
                (up - down) / (2.0 * FD_STEP)
            })
            .collect()
    }

    fn layer(&self) -> Layer {
        let t = |shape: Vec<usize>, v: &[f64]| {
            Tensor::new(shape, v.iter().map(|&x| x as f32).collect()).unwrap()
        };
        let w = self.spec.weight_shape().map(|s| t(s, &self.w));
        let b = self
            .spec
            .kind
            .has_params()
            .then(|| t(vec![self.spec.cout], &self.b));
        Layer::with_params(self.spec, w, b).unwrap()
    }

    fn tensor(&self, v: &[f64], shape: Vec<usize>) -> Tensor {
        Tensor::new(shape, v.iter().map(|&x| x as f32).collect()).unwrap()
    }
}

/// Norm-wise relative error.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Relative errors of one instance against the oracle.
#[derive(Debug, Clone, Copy)]
pub struct Check {
    pub forward: f64,
    pub input_grad: f64,
    pub weight_grad: Option<f64>,
    pub bias_grad: Option<f64>,
}

impl Check {
    pub fn worst(&self) -> f64 {
        [
            Some(self.forward),
            Some(self.input_grad),
            self.weight_grad,
            self.bias_grad,
        ]
        .into_iter()
        .flatten()
        .fold(0.0, f64::max)
    }
}

pub fn check(inst: &Instance) -> Check {
    let mut layer = inst.layer();
    let x = inst.tensor(&inst.x, inst.shape.to_vec());
    let y = layer.forward(&x, true).unwrap();
    let y64: Vec<f64> = y.data().iter().map(|&v| v as f64).collect();
    let oracle_y = forward(&inst.spec, inst.shape, &inst.x, &inst.w, &inst.b);
    let r = inst.tensor(&inst.r, y.shape().to_vec());
    let dx = layer.backward_error(&r).unwrap();
    let to64 = |t: &Tensor| t.data().iter().map(|&v| v as f64).collect::<Vec<_>>();
    let (weight_grad, bias_grad) = if inst.spec.kind.has_params() {
        let g = layer.backward_grad(&r).unwrap();
        (
            Some(rel_err(&to64(&g.weight), &inst.fd(1))),
            Some(rel_err(&to64(&g.bias), &inst.fd(2))),
        )
    } else {
        (None, None)
    };
    Check {
        forward: rel_err(&y64, &oracle_y),
        input_grad: rel_err(&to64(&dx), &inst.fd(0)),
        weight_grad,
        bias_grad,
    }
}

/// Random layer of `kind` with a compatible small input shape.
pub fn random_case(kind: LayerKind, rng: &mut Rng) -> Instance {
    let n = 1 + rng.below(3);
    let h = 3 + rng.below(5);
    let w = 3 + rng.below(5);
    let c = 1 + rng.below(4);
    let (spec, shape) = match kind {
        LayerKind::Conv => {
            let k = [1, 3][rng.below(2)];
            let s = 1 + rng.below(2);
            (
                LayerSpec::conv(c, 1 + rng.below(4), k, s, k / 2),
                [n, c, h, w],
            )
        }
        LayerKind::Pointwise => (LayerSpec::pointwise(c, 1 + rng.below(5)), [n, c, h, w]),
        LayerKind::Depthwise => (LayerSpec::depthwise(c, 1 + rng.below(2)), [n, c, h, w]),
        LayerKind::Linear => (LayerSpec::linear(c * h * w, 1 + rng.below(6)), [n, c, h, w]),
        LayerKind::Relu => (LayerSpec::relu(c), [n, c, h, w]),
    };
    Instance::random(spec, shape, rng)
}

pub const KINDS: [LayerKind; 5] = [
    LayerKind::Conv,
    LayerKind::Pointwise,
    LayerKind::Depthwise,
    LayerKind::Linear,
    LayerKind::Relu,
];
