//! Class-incremental protocol at desk scale ("NICv2-mini").
//!
//! The initial phase trains the adaptive stage on the first
//! `initial_instances` instances of the first `initial_classes` classes and
//! fills the replay buffer from that set. Every remaining (class, instance)
//! unit of the training split is then delivered in one of `events` learning
//! events, each trained for `epochs` passes of mini-batches mixing `n_new`
//! new latents with `batch_size − n_new` replays. After every event the whole
//! test split is evaluated.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SyntheticData};
use crate::error::{Error, Result};
use crate::layers::{argmax_rows, softmax_xent, LayerSpec};
use crate::model::{NetworkModel, Sgd};
use crate::ptq::{calibrate, freeze_and_quantize};
use crate::quant::LatentPrecision;
use crate::replay::{frozen_latents, sample_minibatch, LatentCodec, ReplayBuffer};
use crate::rng::Rng;
use crate::tensor::Tensor;

const TAG_EVENTS: u64 = 11;
const TAG_TRAIN: u64 = 12;
const TAG_BUFFER: u64 = 13;
const TAG_MODEL: u64 = 14;
const TAG_REPLACE: u64 = 15;

fn default_batch() -> usize {
    128
}
fn default_new() -> usize {
    21
}
fn default_epochs() -> usize {
    4
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolConfig {
    pub initial_classes: usize,
    pub total_classes: usize,
    /// Instances per initial class seen in the initial phase.
    pub initial_instances: usize,
    pub events: usize,
    /// Upper bound on new samples per event.
    pub samples_per_event: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_new")]
    pub n_new: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Passes over the initial set; defaults to `epochs`.
    #[serde(default)]
    pub initial_epochs: Option<usize>,
    pub lr: f32,
    #[serde(default)]
    pub momentum: f32,
    #[serde(default)]
    pub seed: u64,
    /// Replace buffer entries class-balanced after each event instead of
    /// keeping the initial buffer.
    #[serde(default)]
    pub replacement: bool,
    /// Seeded shuffle of the event stream; off gives class-major order.
    #[serde(default = "default_true")]
    pub shuffle_events: bool,
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_new == 0 || self.n_new >= self.batch_size {
            return bad(format!(
                "need 0 < n_new ({}) < batch_size ({})",
                self.n_new, self.batch_size
            ));
        }
        if self.initial_classes == 0 || self.initial_classes > self.total_classes {
            return bad(format!(
                "initial_classes {} outside 1..={}",
                self.initial_classes, self.total_classes
            ));
        }
        if self.initial_instances == 0 || self.events == 0 || self.samples_per_event == 0 {
            return bad("initial_instances, events and samples_per_event must be positive".into());
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return bad(format!(
                "lr {} / momentum {} out of range",
                self.lr, self.momentum
            ));
        }
        Ok(())
    }

    pub fn initial_epochs(&self) -> usize {
        self.initial_epochs.unwrap_or(self.epochs)
    }
}

/// New labeled inputs delivered at one point of the stream.
#[derive(Debug, Clone, PartialEq)]
pub struct LearningEvent {
    pub index: usize,
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

/// Initial set plus the ordered event stream.
#[derive(Debug, Clone)]
pub struct ProtocolSplit {
    pub initial_inputs: Tensor,
    pub initial_labels: Vec<usize>,
    pub events: Vec<LearningEvent>,
}

/// Partitions the training split into the initial set and the event stream.
pub fn split_stream(train: &Dataset, cfg: &ProtocolConfig) -> Result<ProtocolSplit> {
    cfg.validate()?;
    if train.classes != cfg.total_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, protocol expects {}",
            train.classes, cfg.total_classes
        )));
    }
    let instances = train.instances.iter().max().map_or(0, |m| m + 1);
    if cfg.initial_instances > instances {
        return Err(Error::Config(format!(
            "initial_instances {} exceeds {instances} instances per class",
            cfg.initial_instances
        )));
    }
    let init_idx = train.indices_where(|c, i| c < cfg.initial_classes && i < cfg.initial_instances);
    let mut units: Vec<(usize, usize)> = (0..cfg.total_classes)
        .flat_map(|c| (0..instances).map(move |i| (c, i)))
        .filter(|&(c, i)| !(c < cfg.initial_classes && i < cfg.initial_instances))
        .collect();
    if cfg.events > units.len() {
        return Err(Error::Config(format!(
            "{} events requested but only {} new (class, instance) units",
            cfg.events,
            units.len()
        )));
    }
    let mut rng = Rng::derive(cfg.seed, TAG_EVENTS);
    if cfg.shuffle_events {
        rng.shuffle(&mut units);
    }
    let mut events = Vec::with_capacity(cfg.events);
    let (base, extra) = (units.len() / cfg.events, units.len() % cfg.events);
    let mut at = 0;
    for e in 0..cfg.events {
        let take = base + usize::from(e < extra);
        let group = &units[at..at + take];
        at += take;
        let pool = train.indices_where(|c, i| group.contains(&(c, i)));
        let keep = cfg.samples_per_event.min(pool.len());
        let mut picks: Vec<usize> = rng
            .sample_without_replacement(pool.len(), keep)
            .into_iter()
            .map(|j| pool[j])
            .collect();
        picks.sort_unstable();
        events.push(LearningEvent {
            index: e + 1,
            inputs: train.batch(&picks)?,
            labels: picks.iter().map(|&i| train.labels[i]).collect(),
        });
    }
    Ok(ProtocolSplit {
        initial_inputs: train.batch(&init_idx)?,
        initial_labels: init_idx.iter().map(|&i| train.labels[i]).collect(),
        events,
    })
}

/// Layer stack of the desk model: a strided conv stem and depthwise-separable
/// blocks in the shape of the MobileNet-V1 tail at reduced width, ending in a
/// linear classifier. Returns the specs and the default split index.
pub fn desk_model_specs(channels: usize, size: usize, classes: usize) -> (Vec<LayerSpec>, usize) {
    let spatial = size.div_ceil(2).div_ceil(2).div_ceil(2);
    let specs = vec![
        LayerSpec::conv(channels, 16, 3, 2, 1),
        LayerSpec::relu(16),
        LayerSpec::depthwise(16, 1),
        LayerSpec::relu(16),
        LayerSpec::pointwise(16, 32),
        LayerSpec::relu(32),
        LayerSpec::depthwise(32, 2),
        LayerSpec::relu(32),
        LayerSpec::pointwise(32, 64),
        LayerSpec::relu(64),
        LayerSpec::depthwise(64, 2),
        LayerSpec::relu(64),
        LayerSpec::pointwise(64, 128),
        LayerSpec::relu(128),
        LayerSpec::linear(128 * spatial * spatial, classes),
    ];
    (specs, 10)
}

/// Loss trace of one learning event.
#[derive(Debug, Clone, PartialEq)]
pub struct EventMetrics {
    pub losses: Vec<f32>,
    pub loss_mean: f32,
}

fn mean_loss(model: &mut NetworkModel, latents: &Tensor, labels: &[usize]) -> Result<f32> {
    let logits = model.forward_adaptive(latents)?;
    Ok(softmax_xent(&logits, labels)?.0)
}

/// Trains the adaptive stage on one event: `epochs` passes over the new
/// latents in chunks of `n_new` (the last chunk wraps around), each chunk
/// completed with replays from `buffer`. `new_latents` are already encoded.
pub fn run_learning_event(
    model: &mut NetworkModel,
    buffer: &ReplayBuffer,
    new_latents: &Tensor,
    new_labels: &[usize],
    cfg: &ProtocolConfig,
    rng: &mut Rng,
) -> Result<EventMetrics> {
    let n = new_labels.len();
    if n == 0 {
        return Err(Error::Config("learning event without samples".into()));
    }
    let [c, h, w] = model.latent_shape();
    if new_latents.shape() != [n, c, h, w]
        || (!buffer.is_empty() && buffer.vector_shape() != [c, h, w])
    {
        return Err(Error::Dimension(format!(
            "latents {:?} / buffer {:?} do not match the adaptive input {:?}",
            new_latents.shape(),
            buffer.vector_shape(),
            [c, h, w]
        )));
    }
    let mut sgd = Sgd::new(cfg.lr, cfg.momentum);
    let mut losses = Vec::new();
    for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        let batches = n.div_ceil(cfg.n_new);
        for b in 0..batches {
            let pick: Vec<usize> = (0..cfg.n_new)
                .map(|j| order[(b * cfg.n_new + j) % n])
                .collect();
            let parts: Vec<Tensor> = pick
                .iter()
                .map(|&i| new_latents.sample(i))
                .collect::<Result<_>>()?;
            let labels: Vec<usize> = pick.iter().map(|&i| new_labels[i]).collect();
            let mb = sample_minibatch(
                buffer,
                &Tensor::stack(&parts)?,
                &labels,
                cfg.batch_size,
                rng,
            )?;
            let (loss, grads) = model.loss_and_grads(&mb.latents, &mb.labels)?;
            sgd.step(model, &grads)?;
            losses.push(loss);
        }
    }
    let loss_mean = if losses.is_empty() {
        mean_loss(model, new_latents, new_labels)?
    } else {
        (losses.iter().map(|&l| l as f64).sum::<f64>() / losses.len() as f64) as f32
    };
    Ok(EventMetrics { losses, loss_mean })
}

/// Plain mini-batch training on `latents` without replays.
fn train_plain(
    model: &mut NetworkModel,
    latents: &Tensor,
    labels: &[usize],
    cfg: &ProtocolConfig,
    rng: &mut Rng,
) -> Result<EventMetrics> {
    let n = labels.len();
    let mut sgd = Sgd::new(cfg.lr, cfg.momentum);
    let mut losses = Vec::new();
    for _ in 0..cfg.initial_epochs() {
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let parts: Vec<Tensor> = chunk
                .iter()
                .map(|&i| latents.sample(i))
                .collect::<Result<_>>()?;
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let (loss, grads) = model.loss_and_grads(&Tensor::stack(&parts)?, &y)?;
            sgd.step(model, &grads)?;
            losses.push(loss);
        }
    }
    let loss_mean = if losses.is_empty() {
        mean_loss(model, latents, labels)?
    } else {
        (losses.iter().map(|&l| l as f64).sum::<f64>() / losses.len() as f64) as f32
    };
    Ok(EventMetrics { losses, loss_mean })
}

/// Test split pushed through the frozen stage and the latent codec once.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub latents: Tensor,
    pub labels: Vec<usize>,
}

impl EvalSet {
    pub fn encode(model: &mut NetworkModel, test: &Dataset) -> Result<Self> {
        let codec = LatentCodec::of_model(model)?;
        let latents = codec.round_trip(&frozen_latents(model, &test.images)?);
        Ok(Self {
            latents,
            labels: test.labels.clone(),
        })
    }

    pub fn predictions(&self, model: &mut NetworkModel) -> Result<Vec<usize>> {
        const CHUNK: usize = 256;
        let n = self.labels.len();
        let mut out = Vec::with_capacity(n);
        let mut start = 0;
        while start < n {
            let end = (start + CHUNK).min(n);
            let parts: Vec<Tensor> = (start..end)
                .map(|i| self.latents.sample(i))
                .collect::<Result<_>>()?;
            out.extend(argmax_rows(
                &model.forward_adaptive(&Tensor::stack(&parts)?)?,
            ));
            start = end;
        }
        Ok(out)
    }
}

/// Fraction of correct predictions among samples whose label passes `keep`.
pub fn accuracy_where(pred: &[usize], labels: &[usize], keep: impl Fn(usize) -> bool) -> f64 {
    let (mut hit, mut total) = (0usize, 0usize);
    for (&p, &y) in pred.iter().zip(labels) {
        if keep(y) {
            total += 1;
            hit += usize::from(p == y);
        }
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub event_index: usize,
    pub seen_classes: usize,
    pub test_accuracy: f64,
    pub loss_mean: f32,
    pub wallclock: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolOutcome {
    /// Row 0 follows the initial phase; row `k` follows event `k`.
    pub trace: Vec<TraceRow>,
    pub final_accuracy: f64,
    /// Final accuracy on the test samples of the initial classes.
    pub old_class_accuracy: f64,
    pub seen_classes: BTreeSet<usize>,
    pub buffer_payload_bytes: usize,
    pub buffer: ReplayBuffer,
}

pub const TRACE_HEADER: &str = "event_index,seen_classes,test_accuracy,loss_mean,wallclock";

impl ProtocolOutcome {
    /// Per-event CSV. Elapsed seconds are written only when
    /// `with_wallclock` is set, otherwise the column holds 0 so that
    /// reruns are byte-identical.
    pub fn to_csv(&self, with_wallclock: bool) -> String {
        let mut s = String::from(TRACE_HEADER);
        s.push('\n');
        for r in &self.trace {
            let wc = if with_wallclock { r.wallclock } else { 0.0 };
            let _ = writeln!(
                s,
                "{},{},{:.6},{:.6},{:.3}",
                r.event_index, r.seen_classes, r.test_accuracy, r.loss_mean, wc
            );
        }
        s
    }
}

/// Runs the initial phase and the event stream on a model whose frozen stage
/// is already fixed (and quantized, if latents are quantized).
pub fn run_protocol(
    model: &mut NetworkModel,
    data: &SyntheticData,
    cfg: &ProtocolConfig,
    n_lr: usize,
) -> Result<ProtocolOutcome> {
    let split = split_stream(&data.train, cfg)?;
    run_split(model, &split, &data.test, cfg, n_lr)
}

pub fn run_split(
    model: &mut NetworkModel,
    split: &ProtocolSplit,
    test: &Dataset,
    cfg: &ProtocolConfig,
    n_lr: usize,
) -> Result<ProtocolOutcome> {
    let buffer = build_initial_buffer(model, split, cfg, n_lr)?;
    run_with_buffer(model, split, test, cfg, buffer)
}

/// Replay buffer of `n_lr` latents drawn class-stratified from the initial set.
pub fn build_initial_buffer(
    model: &mut NetworkModel,
    split: &ProtocolSplit,
    cfg: &ProtocolConfig,
    n_lr: usize,
) -> Result<ReplayBuffer> {
    ReplayBuffer::build(
        model,
        &split.initial_inputs,
        &split.initial_labels,
        n_lr,
        &mut Rng::derive(cfg.seed, TAG_BUFFER),
    )
}

/// Initial phase and event stream with a prebuilt buffer.
pub fn run_with_buffer(
    model: &mut NetworkModel,
    split: &ProtocolSplit,
    test: &Dataset,
    cfg: &ProtocolConfig,
    mut buffer: ReplayBuffer,
) -> Result<ProtocolOutcome> {
    cfg.validate()?;
    if model.num_classes() != cfg.total_classes {
        return Err(Error::Config(format!(
            "model emits {} classes, protocol expects {}",
            model.num_classes(),
            cfg.total_classes
        )));
    }
    let start = Instant::now();
    let codec = LatentCodec::of_model(model)?;
    if !buffer.is_empty() && buffer.codec() != &codec {
        return Err(Error::Replay(
            "buffer was encoded with a different latent grid".into(),
        ));
    }
    let eval = EvalSet::encode(model, test)?;
    let mut train_rng = Rng::derive(cfg.seed, TAG_TRAIN);
    let mut replace_rng = Rng::derive(cfg.seed, TAG_REPLACE);

    let init_latents = codec.round_trip(&frozen_latents(model, &split.initial_inputs)?);
    let init = train_plain(
        model,
        &init_latents,
        &split.initial_labels,
        cfg,
        &mut train_rng,
    )?;
    let buffer_payload_bytes = buffer.payload_bytes();

    let mut seen: BTreeSet<usize> = split.initial_labels.iter().copied().collect();
    let mut trace = Vec::with_capacity(split.events.len() + 1);
    let pred = eval.predictions(model)?;
    trace.push(TraceRow {
        event_index: 0,
        seen_classes: seen.len(),
        test_accuracy: accuracy_where(&pred, &eval.labels, |_| true),
        loss_mean: init.loss_mean,
        wallclock: start.elapsed().as_secs_f64(),
    });
    for event in &split.events {
        let latents = codec.round_trip(&frozen_latents(model, &event.inputs)?);
        let m = run_learning_event(model, &buffer, &latents, &event.labels, cfg, &mut train_rng)?;
        if cfg.replacement {
            buffer.replace_balanced(&latents, &event.labels, &mut replace_rng)?;
        }
        seen.extend(event.labels.iter().copied());
        let pred = eval.predictions(model)?;
        trace.push(TraceRow {
            event_index: event.index,
            seen_classes: seen.len(),
            test_accuracy: accuracy_where(&pred, &eval.labels, |_| true),
            loss_mean: m.loss_mean,
            wallclock: start.elapsed().as_secs_f64(),
        });
    }
    let pred = eval.predictions(model)?;
    Ok(ProtocolOutcome {
        final_accuracy: accuracy_where(&pred, &eval.labels, |_| true),
        old_class_accuracy: accuracy_where(&pred, &eval.labels, |y| y < cfg.initial_classes),
        trace,
        seen_classes: seen,
        buffer_payload_bytes,
        buffer,
    })
}

/// Fresh model with weights drawn from the experiment seed.
pub fn init_model(
    specs: &[LayerSpec],
    split: usize,
    shape: [usize; 3],
    seed: u64,
) -> Result<NetworkModel> {
    NetworkModel::new(specs, split, shape, &mut Rng::derive(seed, TAG_MODEL))
}

/// Desk model initialized from the protocol seed, calibrated on the initial
/// set and frozen at `q_bits` with latents at `latent` precision.
pub fn prepare_desk_model(
    split: &ProtocolSplit,
    shape: [usize; 3],
    cfg: &ProtocolConfig,
    q_bits: u8,
    latent: LatentPrecision,
) -> Result<NetworkModel> {
    let (specs, l) = desk_model_specs(shape[0], shape[1], cfg.total_classes);
    let mut model = init_model(&specs, l, shape, cfg.seed)?;
    let stats = calibrate(&mut model, std::slice::from_ref(&split.initial_inputs))?;
    freeze_and_quantize(&mut model, &stats, q_bits, latent)?;
    Ok(model)
}

/// Full desk run: split, model preparation and protocol.
pub fn desk_run(
    data: &SyntheticData,
    cfg: &ProtocolConfig,
    q_bits: u8,
    latent: LatentPrecision,
    n_lr: usize,
    workers: usize,
) -> Result<ProtocolOutcome> {
    let split = split_stream(&data.train, cfg)?;
    let shape = [
        data.train.images.shape()[1],
        data.train.images.shape()[2],
        data.train.images.shape()[3],
    ];
    let mut model = prepare_desk_model(&split, shape, cfg, q_bits, latent)?;
    model.set_workers(workers);
    run_split(&mut model, &split, &data.test, cfg, n_lr)
}
