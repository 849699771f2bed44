//! Tiled execution against the untiled layer methods.
#![allow(dead_code)]

use qlr_core::layers::{Layer, LayerSpec};
use qlr_core::memsim::exec::StepOutput;
use qlr_core::memsim::{execute_tiled, plan_tiles, HierarchyConfig, SimLayer, Step, Workload};
use qlr_core::rng::Rng;

/// Outcome of one (layer, step, hierarchy) comparison.
#[derive(Debug)]
pub struct TiledCase {
    pub label: String,
    pub tiles: usize,
    pub identical: bool,
    /// Twice the largest tile working set fits in L1.
    pub fits: bool,
}

/// Runs every step of `spec` on a random batch both ways.
pub fn compare(
    spec: LayerSpec,
    input: [usize; 3],
    batch: usize,
    cfg: &HierarchyConfig,
    seed: u64,
) -> Vec<TiledCase> {
    let mut rng = Rng::new(seed);
    let mut layer = Layer::init(spec, &mut rng).unwrap();
    let x = rng.uniform_tensor(&[batch, input[0], input[1], input[2]], -1.0, 1.0);
    let y = layer.forward(&x, true).unwrap();
    let dy = rng.uniform_tensor(y.shape(), -1.0, 1.0);
    let dx = layer.backward_error(&dy).unwrap();
    let gr = layer.backward_grad(&dy).unwrap();
    let wl = Workload {
        name: "case".into(),
        layers: vec![SimLayer { spec, input }],
    };
    Step::ALL
        .iter()
        .map(|&step| {
            let ls = wl.lower(0, step, batch, 4).unwrap();
            let plan = plan_tiles(&ls, cfg).unwrap();
            let out = execute_tiled(&layer, &x, Some(&dy), &plan).unwrap();
            let identical = match (step, out) {
                (Step::Fw, StepOutput::Forward(t)) => t == y,
                (Step::BwErr, StepOutput::InputError(t)) => t == dx,
                (Step::BwGrad, StepOutput::Grad(g)) => g == gr,
                _ => false,
            };
            TiledCase {
                label: ls.label(),
                tiles: plan.tiles.len(),
                identical,
                fits: 2 * plan.max_working_set() <= cfg.l1_bytes,
            }
        })
        .collect()
}
