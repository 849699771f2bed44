use crate::error::{Error, Result};
use crate::layers::{batch_im2col, channel_major, Layer, LayerKind, ParamGrad};
use crate::tensor::{col2im_from, gemm_block, ConvGeometry, MatRef, Tensor};

use super::efficiency::Step;
use super::plan::TilePlan;

#[derive(Debug, Clone, PartialEq)]
pub enum StepOutput {
    Forward(Tensor),
    InputError(Tensor),
    Grad(ParamGrad),
}

/// Grouped operands laid out `[groups, rows, cols]`.
struct Grouped {
    data: Vec<f32>,
    rows: usize,
    cols: usize,
}

impl Grouped {
    fn view(&self, g: usize) -> MatRef<'_> {
        let len = self.rows * self.cols;
        MatRef {
            data: &self.data[g * len..(g + 1) * len],
            rows: self.rows,
            cols: self.cols,
        }
    }
}

fn transpose(data: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

/// Runs `plan` tile by tile, in plan order, and returns the step's result.
pub fn run_plan(plan: &TilePlan, a: &[f32], b: &[f32]) -> Vec<f32> {
    let s = &plan.step;
    let ga = Grouped {
        data: a.to_vec(),
        rows: s.m,
        cols: s.k,
    };
    let gb = Grouped {
        data: b.to_vec(),
        rows: s.k,
        cols: s.n,
    };
    let mut c = vec![0.0f32; s.groups * s.m * s.n];
    let clen = s.m * s.n;
    for t in &plan.tiles {
        for g in t.groups.clone() {
            gemm_block(
                ga.view(g),
                gb.view(g),
                &mut c[g * clen..(g + 1) * clen],
                t.m.clone(),
                t.n.clone(),
                t.k.clone(),
            );
        }
    }
    c
}

fn geometry(layer: &Layer, shape: &[usize]) -> ConvGeometry {
    ConvGeometry {
        channels: shape[1],
        height: shape[2],
        width: shape[3],
        kernel: layer.spec.kernel,
        stride: layer.spec.stride,
        pad: layer.spec.pad,
    }
}

/// Executes one step of `layer` on the batch `x` (and output gradient `dy`
/// for the backward steps) following `plan`. Bit-identical to the untiled
/// [`Layer`] methods for every feasible plan.
pub fn execute_tiled(
    layer: &Layer,
    x: &Tensor,
    dy: Option<&Tensor>,
    plan: &TilePlan,
) -> Result<StepOutput> {
    let spec = layer.spec;
    if spec.kind == LayerKind::Relu {
        return Err(Error::Config("activations are not tiled".into()));
    }
    let s = &plan.step;
    let (n, c, h, w) = x.dims4()?;
    let [co, ho, wo] = spec.output_shape([c, h, w])?;
    let p = ho * wo;
    let span = n * p;
    let weight = layer.weight.as_ref().expect("parametrized layer").data();
    let bias = layer.bias.as_ref().expect("parametrized layer").data();
    let dy = match (s.step, dy) {
        (Step::Fw, _) => None,
        (_, Some(g)) => {
            if g.len() != n * co * p {
                return Err(Error::Dimension(format!(
                    "gradient {:?} for output [{n}, {co}, {ho}, {wo}]",
                    g.shape()
                )));
            }
            Some(g.data())
        }
        (_, None) => {
            return Err(Error::Config(format!(
                "{} needs an output gradient",
                s.label()
            )))
        }
    };
    let taps = weight.len() / co;
    let expect = |groups, m, k, nn| {
        if (s.groups, s.m, s.k, s.n) != (groups, m, k, nn) {
            return Err(Error::Dimension(format!(
                "plan {} is {}x({}x{}·{}x{}), layer step needs {groups}x({m}x{k}·{k}x{nn})",
                s.label(),
                s.groups,
                s.m,
                s.k,
                s.k,
                s.n
            )));
        }
        Ok(())
    };
    let depthwise = spec.kind == LayerKind::Depthwise;
    match spec.kind {
        LayerKind::Linear => {
            let xt = transpose(x.data(), n, spec.cin);
            match s.step {
                Step::Fw => {
                    expect(1, co, spec.cin, n)?;
                    let yt = run_plan(plan, weight, &xt);
                    let mut out = Vec::with_capacity(n * co);
                    for smp in 0..n {
                        for o in 0..co {
                            out.push(yt[o * n + smp] + bias[o]);
                        }
                    }
                    Ok(StepOutput::Forward(Tensor::new(vec![n, co, 1, 1], out)?))
                }
                Step::BwErr => {
                    expect(1, spec.cin, co, n)?;
                    let wt = transpose(weight, co, spec.cin);
                    let gt = transpose(dy.expect("gradient"), n, co);
                    let dxt = run_plan(plan, &wt, &gt);
                    Ok(StepOutput::InputError(Tensor::new(
                        x.shape().to_vec(),
                        transpose(&dxt, spec.cin, n),
                    )?))
                }
                Step::BwGrad => {
                    expect(1, co, n, spec.cin)?;
                    let g = dy.expect("gradient");
                    let gt = transpose(g, n, co);
                    let gw = run_plan(plan, &gt, x.data());
                    let mut gb = vec![0.0f32; co];
                    for smp in 0..n {
                        for (o, b) in gb.iter_mut().enumerate() {
                            *b += g[smp * co + o];
                        }
                    }
                    Ok(StepOutput::Grad(ParamGrad {
                        weight: Tensor::new(vec![co, spec.cin], gw)?,
                        bias: Tensor::new(vec![co], gb)?,
                    }))
                }
            }
        }
        _ => {
            let geom = geometry(layer, x.shape());
            match s.step {
                Step::Fw => {
                    let cols = batch_im2col(x, &geom)?;
                    let y = if depthwise {
                        expect(co, 1, taps, span)?;
                        run_plan(plan, weight, cols.data())
                    } else {
                        expect(1, co, taps, span)?;
                        run_plan(plan, weight, cols.data())
                    };
                    let mut out = Vec::with_capacity(n * co * p);
                    for smp in 0..n {
                        for o in 0..co {
                            let row = &y[o * span + smp * p..o * span + (smp + 1) * p];
                            out.extend(row.iter().map(|&v| v + bias[o]));
                        }
                    }
                    Ok(StepOutput::Forward(Tensor::new(vec![n, co, ho, wo], out)?))
                }
                Step::BwErr => {
                    let g = channel_major(dy.expect("gradient"), n, co, p);
                    let dcols = if depthwise {
                        expect(co, taps, 1, span)?;
                        run_plan(plan, weight, &g)
                    } else {
                        expect(1, taps, co, span)?;
                        run_plan(plan, &transpose(weight, co, taps), &g)
                    };
                    // col2im once every tile has landed
                    let per = c * h * w;
                    let mut out = vec![0.0f32; n * per];
                    for (smp, img) in out.chunks_mut(per).enumerate() {
                        col2im_from(&dcols, &geom, span, smp * p, img)?;
                    }
                    Ok(StepOutput::InputError(Tensor::new(
                        x.shape().to_vec(),
                        out,
                    )?))
                }
                Step::BwGrad => {
                    let g = channel_major(dy.expect("gradient"), n, co, p);
                    let cols = batch_im2col(x, &geom)?;
                    let gw = if depthwise {
                        expect(co, 1, span, taps)?;
                        let mut colst = Vec::with_capacity(cols.len());
                        for ch in 0..co {
                            colst.extend(transpose(
                                &cols.data()[ch * taps * span..(ch + 1) * taps * span],
                                taps,
                                span,
                            ));
                        }
                        run_plan(plan, &g, &colst)
                    } else {
                        expect(1, co, span, taps)?;
                        run_plan(plan, &g, &transpose(cols.data(), taps, span))
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
                    Ok(StepOutput::Grad(ParamGrad {
                        weight: Tensor::new(spec.weight_shape().expect("parametrized"), gw)?,
                        bias: Tensor::new(vec![co], gb)?,
                    }))
                }
            }
        }
    }
}
