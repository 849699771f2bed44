//! Synthetic class/instance image set used by the desk-scale protocol.
//!
//! Every class owns a smooth prototype pattern (a sum of random oriented
//! gratings per channel); every instance of a class adds its own pattern on
//! top. Samples are randomly shifted, gain-jittered and noised copies, and a
//! fraction carry a bright class-agnostic "glare" patch that stretches the
//! activation range seen during calibration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub classes: usize,
    pub channels: usize,
    pub size: usize,
    pub instances_per_class: usize,
    /// Training samples generated per (class, instance).
    pub train_per_instance: usize,
    /// Held-out samples per (class, instance).
    pub test_per_instance: usize,
    pub instance_mix: f32,
    pub noise: f32,
    pub max_shift: usize,
    pub glare_prob: f64,
    pub glare_gain: f32,
    #[serde(default)]
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            channels: 3,
            size: 16,
            instances_per_class: 4,
            train_per_instance: 60,
            test_per_instance: 15,
            instance_mix: 0.6,
            noise: 0.35,
            max_shift: 2,
            glare_prob: 0.15,
            glare_gain: 4.0,
            seed: 7,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2
            || self.channels == 0
            || self.size < 4
            || self.instances_per_class == 0
            || self.train_per_instance == 0
            || self.test_per_instance == 0
        {
            return Err(Error::Config(format!("degenerate dataset spec {self:?}")));
        }
        if !(0.0..=1.0).contains(&self.glare_prob) {
            return Err(Error::Config("glare_prob outside [0, 1]".into()));
        }
        Ok(())
    }

    pub fn sample_shape(&self) -> [usize; 3] {
        [self.channels, self.size, self.size]
    }
}

/// A labeled image collection stored as one NCHW tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub instances: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        let parts = indices
            .iter()
            .map(|&i| self.images.sample(i))
            .collect::<Result<Vec<_>>>()?;
        Tensor::stack(&parts)
    }

    pub fn indices_where(&self, mut keep: impl FnMut(usize, usize) -> bool) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| keep(self.labels[i], self.instances[i]))
            .collect()
    }
}

/// Train and held-out test split of the synthetic set.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub train: Dataset,
    pub test: Dataset,
}

fn pattern(rng: &mut Rng, channels: usize, size: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; channels * size * size];
    for _ in 0..3 {
        let freq = rng.uniform(0.5, 2.5) * std::f32::consts::TAU / size as f32;
        let theta = rng.uniform(0.0, std::f32::consts::PI);
        let phase = rng.uniform(0.0, std::f32::consts::TAU);
        let (fx, fy) = (freq * theta.cos(), freq * theta.sin());
        let gains: Vec<f32> = (0..channels).map(|_| rng.uniform(-1.0, 1.0)).collect();
        for (c, g) in gains.iter().enumerate() {
            for y in 0..size {
                for x in 0..size {
                    out[(c * size + y) * size + x] +=
                        g * (fx * x as f32 + fy * y as f32 + phase).sin();
                }
            }
        }
    }
    out
}

fn render(spec: &DatasetSpec, base: &[f32], rng: &mut Rng) -> Vec<f32> {
    let s = spec.size;
    let shift = spec.max_shift as isize;
    let span = 2 * spec.max_shift + 1;
    let dx = rng.below(span) as isize - shift;
    let dy = rng.below(span) as isize - shift;
    let gain = rng.uniform(0.8, 1.2);
    let mut img = vec![0.0f32; base.len()];
    for c in 0..spec.channels {
        for y in 0..s {
            for x in 0..s {
                let sy = (y as isize + dy).rem_euclid(s as isize) as usize;
                let sx = (x as isize + dx).rem_euclid(s as isize) as usize;
                img[(c * s + y) * s + x] =
                    gain * base[(c * s + sy) * s + sx] + spec.noise * rng.normal();
            }
        }
    }
    if rng.bernoulli(spec.glare_prob) {
        let gy = rng.below(s - 3);
        let gx = rng.below(s - 3);
        for c in 0..spec.channels {
            for y in gy..gy + 4 {
                for x in gx..gx + 4 {
                    img[(c * s + y) * s + x] += spec.glare_gain;
                }
            }
        }
    }
    img
}

/// Generates the train/test split deterministically from `spec.seed`.
pub fn generate(spec: &DatasetSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut proto_rng = Rng::derive(spec.seed, 1);
    let mut bases = Vec::with_capacity(spec.classes * spec.instances_per_class);
    for _ in 0..spec.classes {
        let class = pattern(&mut proto_rng, spec.channels, spec.size);
        for _ in 0..spec.instances_per_class {
            let inst = pattern(&mut proto_rng, spec.channels, spec.size);
            bases.push(
                class
                    .iter()
                    .zip(&inst)
                    .map(|(a, b)| a + spec.instance_mix * b)
                    .collect::<Vec<f32>>(),
            );
        }
    }
    let build = |per: usize, tag: u64| -> Result<Dataset> {
        let mut rng = Rng::derive(spec.seed, tag);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        let mut instances = Vec::new();
        for c in 0..spec.classes {
            for i in 0..spec.instances_per_class {
                let base = &bases[c * spec.instances_per_class + i];
                for _ in 0..per {
                    data.extend(render(spec, base, &mut rng));
                    labels.push(c);
                    instances.push(i);
                }
            }
        }
        let [ch, h, w] = spec.sample_shape();
        Ok(Dataset {
            images: Tensor::new(vec![labels.len(), ch, h, w], data)?,
            labels,
            instances,
            classes: spec.classes,
        })
    };
    Ok(SyntheticData {
        train: build(spec.train_per_instance, 2)?,
        test: build(spec.test_per_instance, 3)?,
    })
}
