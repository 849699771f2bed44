//! Latent replay storage and mini-batch assembly.
//!
//! A [`ReplayBuffer`] keeps `N_LR` latent vectors (outputs of the last frozen
//! layer) with their labels, either as FP32 or as unsigned `Q_LR`-bit codes
//! sharing one scale. Replays are dequantized (`S · code`) when they enter a
//! mini-batch.
//!
//! # File layout
//!
//! All integers little-endian.
//!
//! | field | bytes |
//! |---|---|
//! | magic `QLRREPL1` | 8 |
//! | bits (`32` = FP32) | 1 |
//! | reserved | 3 |
//! | scale (f32, `1.0` for FP32) | 4 |
//! | layer | 4 |
//! | C, H, W | 3 × 4 |
//! | entry count N | 4 |
//! | labels | N × 4 |
//! | payload | N × ⌈elems·bits/8⌉ |
//!
//! Every entry is packed LSB-first and starts on a byte boundary, so a 7-bit
//! buffer carries exactly `N · ⌈elems·7/8⌉` payload bytes.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use log::warn;

use crate::error::{Error, Result};
use crate::model::NetworkModel;
use crate::quant::{pack_codes, packed_len, unpack_codes, LatentPrecision, QuantParams};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const REPLAY_MAGIC: [u8; 8] = *b"QLRREPL1";

/// Payload bytes of `n_lr` latent vectors of `elems` elements each.
pub fn lr_bytes(n_lr: usize, elems: usize, precision: LatentPrecision) -> usize {
    match precision {
        LatentPrecision::Float32 => n_lr * elems * 4,
        LatentPrecision::Bits(q) => n_lr * packed_len(elems, q),
    }
}

/// Maps frozen-stage outputs onto the latent representation and back.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatentCodec {
    pub precision: LatentPrecision,
    pub params: Option<QuantParams>,
}

impl LatentCodec {
    pub fn float() -> Self {
        Self {
            precision: LatentPrecision::Float32,
            params: None,
        }
    }

    pub fn quantized(params: QuantParams) -> Self {
        Self {
            precision: LatentPrecision::Bits(params.q_bits),
            params: Some(params),
        }
    }

    /// Codec fixed by the model's frozen-stage quantization.
    pub fn of_model(model: &NetworkModel) -> Result<Self> {
        match model.frozen_quant() {
            None => Ok(Self::float()),
            Some(fq) => match (fq.latent, fq.latent_params) {
                (LatentPrecision::Float32, _) => Ok(Self::float()),
                (LatentPrecision::Bits(_), Some(p)) => Ok(Self::quantized(p)),
                (LatentPrecision::Bits(q), None) => Err(Error::Replay(format!(
                    "{q}-bit latents without a calibrated scale"
                ))),
            },
        }
    }

    pub fn bits(&self) -> u8 {
        self.precision.bits()
    }

    /// Round trip through the stored representation (identity for FP32).
    pub fn round_trip(&self, x: &Tensor) -> Tensor {
        match self.params {
            None => x.clone(),
            Some(p) => {
                let data = x.data().iter().map(|&v| p.fake_quant(v)).collect();
                Tensor::new(x.shape().to_vec(), data).expect("same shape")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Storage {
    Float(Vec<f32>),
    Codes(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    codec: LatentCodec,
    layer: usize,
    vector_shape: [usize; 3],
    labels: Vec<usize>,
    storage: Storage,
}

/// Latents of `inputs` through the frozen stage, in chunks.
pub fn frozen_latents(model: &mut NetworkModel, inputs: &Tensor) -> Result<Tensor> {
    const CHUNK: usize = 64;
    let n = inputs.shape()[0];
    let mut parts = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        let idx: Vec<Tensor> = (start..end)
            .map(|i| inputs.sample(i))
            .collect::<Result<_>>()?;
        parts.push(model.forward_frozen(&Tensor::stack(&idx)?)?);
        start = end;
    }
    Tensor::stack(&parts)
}

/// Per-class quotas summing to `n`, proportional to the class counts
/// (largest remainder, ties to the lower class).
fn stratified_quotas(counts: &BTreeMap<usize, usize>, n: usize) -> BTreeMap<usize, usize> {
    let total: usize = counts.values().sum();
    let mut quotas = BTreeMap::new();
    let mut rema = Vec::new();
    let mut assigned = 0;
    for (&c, &k) in counts {
        let q = n * k / total;
        quotas.insert(c, q);
        assigned += q;
        rema.push(((n * k) % total, c));
    }
    rema.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, c) in rema.iter().take(n - assigned) {
        *quotas.get_mut(&c).expect("present") += 1;
    }
    quotas
}

impl ReplayBuffer {
    pub fn empty(codec: LatentCodec, layer: usize, vector_shape: [usize; 3]) -> Self {
        let storage = match codec.params {
            None => Storage::Float(Vec::new()),
            Some(_) => Storage::Codes(Vec::new()),
        };
        Self {
            codec,
            layer,
            vector_shape,
            labels: Vec::new(),
            storage,
        }
    }

    /// Draws `n_lr` of the given samples (seeded, without replacement,
    /// stratified by class), runs them through the frozen stage and stores the
    /// encoded latents.
    pub fn build(
        model: &mut NetworkModel,
        inputs: &Tensor,
        labels: &[usize],
        n_lr: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let available = labels.len();
        if inputs.shape().first() != Some(&available) {
            return Err(Error::Dimension(format!(
                "{} labels for inputs {:?}",
                available,
                inputs.shape()
            )));
        }
        if n_lr > available {
            return Err(Error::Replay(format!(
                "N_LR = {n_lr} exceeds {available} available samples"
            )));
        }
        let codec = LatentCodec::of_model(model)?;
        let layer = model
            .latent_layer()
            .ok_or_else(|| Error::Replay("model has no frozen stage".into()))?;
        let mut buffer = Self::empty(codec, layer, model.latent_shape());
        if n_lr == 0 {
            return Ok(buffer);
        }
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &c) in labels.iter().enumerate() {
            by_class.entry(c).or_default().push(i);
        }
        let counts = by_class.iter().map(|(&c, v)| (c, v.len())).collect();
        let quotas = stratified_quotas(&counts, n_lr);
        let mut chosen = Vec::with_capacity(n_lr);
        for (c, members) in &by_class {
            for j in rng.sample_without_replacement(members.len(), quotas[c]) {
                chosen.push(members[j]);
            }
        }
        let picked: Vec<Tensor> = chosen
            .iter()
            .map(|&i| inputs.sample(i))
            .collect::<Result<_>>()?;
        let latents = frozen_latents(model, &Tensor::stack(&picked)?)?;
        let picked_labels: Vec<usize> = chosen.iter().map(|&i| labels[i]).collect();
        buffer.push(&latents, &picked_labels)?;
        Ok(buffer)
    }

    pub fn codec(&self) -> &LatentCodec {
        &self.codec
    }

    pub fn precision(&self) -> LatentPrecision {
        self.codec.precision
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn vector_shape(&self) -> [usize; 3] {
        self.vector_shape
    }

    pub fn elems(&self) -> usize {
        self.vector_shape.iter().product()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_counts(&self) -> BTreeMap<usize, usize> {
        let mut out = BTreeMap::new();
        for &c in &self.labels {
            *out.entry(c).or_insert(0) += 1;
        }
        out
    }

    /// Latent payload only: `N_LR · ⌈elems·Q_LR/8⌉` (or `4·elems` for FP32).
    pub fn payload_bytes(&self) -> usize {
        lr_bytes(self.len(), self.elems(), self.precision())
    }

    /// Payload plus the FP32 scale and one `u32` label per entry.
    pub fn total_bytes(&self) -> usize {
        let scale = if self.codec.params.is_some() { 4 } else { 0 };
        self.payload_bytes() + scale + 4 * self.len()
    }

    /// Encodes and appends a batch of latents (`N×C×H×W`).
    pub fn push(&mut self, latents: &Tensor, labels: &[usize]) -> Result<()> {
        let [c, h, w] = self.vector_shape;
        if latents.shape() != [labels.len(), c, h, w] {
            return Err(Error::Replay(format!(
                "latents {:?} do not match {} vectors of {:?}",
                latents.shape(),
                labels.len(),
                self.vector_shape
            )));
        }
        match (&mut self.storage, self.codec.params) {
            (Storage::Float(v), _) => v.extend_from_slice(latents.data()),
            (Storage::Codes(v), Some(p)) => {
                v.extend(latents.data().iter().map(|&x| p.quantize_value(x) as u8));
            }
            (Storage::Codes(_), None) => unreachable!("codes imply a scale"),
        }
        self.labels.extend_from_slice(labels);
        Ok(())
    }

    fn entry_values(&self, i: usize, out: &mut Vec<f32>) {
        let e = self.elems();
        match (&self.storage, self.codec.params) {
            (Storage::Float(v), _) => out.extend_from_slice(&v[i * e..(i + 1) * e]),
            (Storage::Codes(v), Some(p)) => out.extend(
                v[i * e..(i + 1) * e]
                    .iter()
                    .map(|&c| p.dequantize_value(c as i32)),
            ),
            (Storage::Codes(_), None) => unreachable!("codes imply a scale"),
        }
    }

    /// Dequantized FP32 batch of the given entries.
    pub fn gather(&self, indices: &[usize]) -> Result<Tensor> {
        let [c, h, w] = self.vector_shape;
        let mut data = Vec::with_capacity(indices.len() * self.elems());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Replay(format!("entry {i} of {}", self.len())));
            }
            self.entry_values(i, &mut data);
        }
        Tensor::new(vec![indices.len(), c, h, w], data)
    }

    /// Raw integer codes of entry `i` (None for FP32 buffers).
    pub fn codes(&self, i: usize) -> Option<Vec<i32>> {
        let e = self.elems();
        match &self.storage {
            Storage::Codes(v) => Some(v[i * e..(i + 1) * e].iter().map(|&c| c as i32).collect()),
            Storage::Float(_) => None,
        }
    }

    /// Class-balanced replacement: inserts the new latents while keeping the
    /// buffer size fixed, evicting random entries of the currently largest
    /// classes until every seen class holds an equal share.
    pub fn replace_balanced(
        &mut self,
        latents: &Tensor,
        labels: &[usize],
        rng: &mut Rng,
    ) -> Result<()> {
        let capacity = self.len();
        if capacity == 0 {
            return Ok(());
        }
        let mut candidates: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &c) in labels.iter().enumerate() {
            candidates.entry(c).or_default().push(i);
        }
        let mut classes: Vec<usize> = self.class_counts().keys().copied().collect();
        for &c in candidates.keys() {
            if !classes.contains(&c) {
                classes.push(c);
            }
        }
        classes.sort_unstable();
        let share = capacity / classes.len();
        let mut keep: Vec<usize> = Vec::with_capacity(capacity);
        let mut incoming: Vec<usize> = Vec::new();
        for &c in &classes {
            let owned: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == c).collect();
            let fresh = candidates.get(&c).map(Vec::as_slice).unwrap_or(&[]);
            let want = share.min(owned.len() + fresh.len());
            let from_old = owned.len().min(want);
            for j in rng.sample_without_replacement(owned.len(), from_old) {
                keep.push(owned[j]);
            }
            for j in rng.sample_without_replacement(fresh.len(), want - from_old) {
                incoming.push(fresh[j]);
            }
        }
        keep.sort_unstable();
        let old = self.gather(&keep)?;
        let old_labels: Vec<usize> = keep.iter().map(|&i| self.labels[i]).collect();
        let mut next = Self::empty(self.codec, self.layer, self.vector_shape);
        if !keep.is_empty() {
            // gathered values sit on the grid, so re-encoding keeps the codes
            next.push(&old, &old_labels)?;
        }
        if !incoming.is_empty() {
            let parts: Vec<Tensor> = incoming
                .iter()
                .map(|&i| latents.sample(i))
                .collect::<Result<_>>()?;
            let lab: Vec<usize> = incoming.iter().map(|&i| labels[i]).collect();
            next.push(&Tensor::stack(&parts)?, &lab)?;
        }
        *self = next;
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let bits = self.codec.bits();
        w.write_all(&REPLAY_MAGIC)?;
        w.write_all(&[bits, 0, 0, 0])?;
        let scale = self.codec.params.map_or(1.0, |p| p.scale);
        w.write_all(&scale.to_le_bytes())?;
        w.write_all(&(self.layer as u32).to_le_bytes())?;
        for d in self.vector_shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        w.write_all(&(self.len() as u32).to_le_bytes())?;
        for &l in &self.labels {
            w.write_all(&(l as u32).to_le_bytes())?;
        }
        let e = self.elems();
        match &self.storage {
            Storage::Float(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
            Storage::Codes(v) => {
                for chunk in v.chunks(e) {
                    let codes: Vec<i32> = chunk.iter().map(|&c| c as i32).collect();
                    w.write_all(&pack_codes(&codes, bits))?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut head = [0u8; 12];
        r.read_exact(&mut head)?;
        if head[..8] != REPLAY_MAGIC {
            return Err(Error::Format("bad replay buffer magic".into()));
        }
        let precision = LatentPrecision::try_from(head[8]).map_err(Error::Format)?;
        let scale = f32::from_le_bytes(read4(&mut r)?);
        let layer = u32::from_le_bytes(read4(&mut r)?) as usize;
        let mut shape = [0usize; 3];
        for d in &mut shape {
            *d = u32::from_le_bytes(read4(&mut r)?) as usize;
        }
        let n = u32::from_le_bytes(read4(&mut r)?) as usize;
        let labels = (0..n)
            .map(|_| read4(&mut r).map(|b| u32::from_le_bytes(b) as usize))
            .collect::<Result<Vec<_>>>()?;
        let e: usize = shape.iter().product();
        let codec = match precision {
            LatentPrecision::Float32 => LatentCodec::float(),
            LatentPrecision::Bits(q) => {
                if !(scale > 0.0 && scale.is_finite()) {
                    return Err(Error::Format(format!("invalid scale {scale}")));
                }
                LatentCodec::quantized(QuantParams {
                    q_bits: q,
                    scale,
                    zero_point: 0,
                    signed: false,
                })
            }
        };
        let storage = match precision {
            LatentPrecision::Float32 => {
                let mut bytes = vec![0u8; n * e * 4];
                r.read_exact(&mut bytes)?;
                Storage::Float(
                    bytes
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect(),
                )
            }
            LatentPrecision::Bits(q) => {
                let per = packed_len(e, q);
                let mut codes = Vec::with_capacity(n * e);
                let mut bytes = vec![0u8; per];
                for _ in 0..n {
                    r.read_exact(&mut bytes)?;
                    codes.extend(
                        unpack_codes(&bytes, q, e, false)?
                            .into_iter()
                            .map(|c| c as u8),
                    );
                }
                Storage::Codes(codes)
            }
        };
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(Error::Format("trailing bytes after replay payload".into()));
        }
        Ok(Self {
            codec,
            layer,
            vector_shape: shape,
            labels,
            storage,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(fs::File::open(path)?))
    }
}

fn read4<R: Read>(r: &mut R) -> Result<[u8; 4]> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(b)
}

/// One training mini-batch of FP32 latents.
#[derive(Debug, Clone, PartialEq)]
pub struct MiniBatch {
    pub latents: Tensor,
    pub labels: Vec<usize>,
    pub replays: usize,
}

/// Appends `batch_size − n` replays (uniform, seeded) to the `n` new latents.
/// Replays are drawn without replacement when the buffer is large enough.
/// An empty buffer yields a new-only batch.
pub fn sample_minibatch(
    buffer: &ReplayBuffer,
    new_latents: &Tensor,
    new_labels: &[usize],
    batch_size: usize,
    rng: &mut Rng,
) -> Result<MiniBatch> {
    let n_new = new_labels.len();
    if new_latents.shape().first() != Some(&n_new) || n_new == 0 {
        return Err(Error::Dimension(format!(
            "{n_new} new labels for latents {:?}",
            new_latents.shape()
        )));
    }
    if n_new > batch_size {
        return Err(Error::Config(format!(
            "{n_new} new samples exceed batch size {batch_size}"
        )));
    }
    let want = batch_size - n_new;
    if buffer.is_empty() || want == 0 {
        if want > 0 {
            warn!("empty replay buffer, training on {n_new} new samples only");
        }
        return Ok(MiniBatch {
            latents: new_latents.clone(),
            labels: new_labels.to_vec(),
            replays: 0,
        });
    }
    let picks: Vec<usize> = if want <= buffer.len() {
        rng.sample_without_replacement(buffer.len(), want)
    } else {
        (0..want).map(|_| rng.below(buffer.len())).collect()
    };
    let replays = buffer.gather(&picks)?;
    let mut labels = new_labels.to_vec();
    labels.extend(picks.iter().map(|&i| buffer.labels[i]));
    Ok(MiniBatch {
        latents: Tensor::stack(&[new_latents.clone(), replays])?,
        labels,
        replays: want,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::LayerSpec;
    use crate::ptq::{calibrate, freeze_and_quantize};

    fn frozen_model(latent: LatentPrecision, rng: &mut Rng) -> (NetworkModel, Tensor, Vec<usize>) {
        let specs = [
            LayerSpec::pointwise(2, 4),
            LayerSpec::relu(4),
            LayerSpec::linear(4 * 3 * 3, 3),
        ];
        let mut m = NetworkModel::new(&specs, 2, [2, 3, 3], rng).unwrap();
        let x = rng.uniform_tensor(&[30, 2, 3, 3], -1.0, 1.0);
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let stats = calibrate(&mut m, std::slice::from_ref(&x)).unwrap();
        freeze_and_quantize(&mut m, &stats, 8, latent).unwrap();
        (m, x, labels)
    }

    #[test]
    fn byte_size_arithmetic() {
        assert_eq!(
            lr_bytes(1500, 8 * 8 * 512, LatentPrecision::Bits(8)),
            49_152_000
        );
        assert_eq!(lr_bytes(3000, 1024, LatentPrecision::Bits(8)), 3_072_000);
        assert_eq!(
            lr_bytes(10, 100, LatentPrecision::Float32),
            4 * lr_bytes(10, 100, LatentPrecision::Bits(8))
        );
        assert_eq!(lr_bytes(2, 10, LatentPrecision::Bits(7)), 2 * 9);
    }

    #[test]
    fn zero_entries_is_empty() {
        let mut rng = Rng::new(0);
        let (mut m, x, y) = frozen_model(LatentPrecision::Bits(8), &mut rng);
        let b = ReplayBuffer::build(&mut m, &x, &y, 0, &mut rng).unwrap();
        assert!(b.is_empty());
        assert_eq!(b.payload_bytes(), 0);
    }

    #[test]
    fn exhaustive_draw_covers_everything_once() {
        let mut rng = Rng::new(1);
        let (mut m, x, y) = frozen_model(LatentPrecision::Float32, &mut rng);
        let b = ReplayBuffer::build(&mut m, &x, &y, 30, &mut rng).unwrap();
        let all = b.gather(&(0..30).collect::<Vec<_>>()).unwrap();
        let reference = frozen_latents(&mut m, &x).unwrap();
        // every reference latent appears exactly once
        let mut used = [false; 30];
        for i in 0..30 {
            let row = all.sample(i).unwrap();
            let j = (0..30)
                .find(|&j| !used[j] && reference.sample(j).unwrap() == row)
                .expect("latent present");
            used[j] = true;
            assert_eq!(b.labels()[i], y[j]);
        }
    }

    #[test]
    fn oversized_request_rejected() {
        let mut rng = Rng::new(2);
        let (mut m, x, y) = frozen_model(LatentPrecision::Bits(8), &mut rng);
        assert!(matches!(
            ReplayBuffer::build(&mut m, &x, &y, 31, &mut rng),
            Err(Error::Replay(_))
        ));
    }

    #[test]
    fn stratified_draw_keeps_class_shares() {
        let mut rng = Rng::new(3);
        let (mut m, x, y) = frozen_model(LatentPrecision::Bits(8), &mut rng);
        let b = ReplayBuffer::build(&mut m, &x, &y, 9, &mut rng).unwrap();
        assert!(b.class_counts().values().all(|&k| k == 3));
        let q = stratified_quotas(&[(0, 1), (1, 3)].into_iter().collect(), 5);
        assert_eq!(q.values().sum::<usize>(), 5);
    }

    #[test]
    fn quantized_latent_within_half_step() {
        let mut rng = Rng::new(4);
        let (mut m, x, y) = frozen_model(LatentPrecision::Bits(8), &mut rng);
        let b = ReplayBuffer::build(&mut m, &x, &y, 30, &mut rng).unwrap();
        let s = b.codec().params.unwrap().scale;
        let fp = frozen_latents(&mut m, &x).unwrap();
        let q = LatentCodec::of_model(&m).unwrap().round_trip(&fp);
        assert!(fp.max_abs_diff(&q) <= s / 2.0 * (1.0 + 1e-6));
        assert_eq!(b.total_bytes(), b.payload_bytes() + 4 + 4 * 30);
    }

    #[test]
    fn file_round_trip_and_exact_payload() {
        let mut rng = Rng::new(5);
        let (mut m, x, y) = frozen_model(LatentPrecision::Bits(7), &mut rng);
        let b = ReplayBuffer::build(&mut m, &x, &y, 12, &mut rng).unwrap();
        let mut bytes = Vec::new();
        b.write_to(&mut bytes).unwrap();
        let header = 8 + 4 + 4 + 4 + 12 + 4 + 12 * 4;
        assert_eq!(bytes.len() - header, 12 * packed_len(36, 7));
        assert_eq!(bytes.len() - header, b.payload_bytes());
        let back = ReplayBuffer::read_from(bytes.as_slice()).unwrap();
        assert_eq!(back, b);
        bytes.push(0);
        assert!(ReplayBuffer::read_from(bytes.as_slice()).is_err());
    }

    #[test]
    fn float_file_round_trip() {
        let mut rng = Rng::new(6);
        let (mut m, x, y) = frozen_model(LatentPrecision::Float32, &mut rng);
        let b = ReplayBuffer::build(&mut m, &x, &y, 5, &mut rng).unwrap();
        let back = ReplayBuffer::read_from(b.to_vec().as_slice()).unwrap();
        assert_eq!(back, b);
    }

    impl ReplayBuffer {
        fn to_vec(&self) -> Vec<u8> {
            let mut v = Vec::new();
            self.write_to(&mut v).unwrap();
            v
        }
    }

    fn synthetic_buffer(counts: &[(usize, usize)]) -> ReplayBuffer {
        let mut b = ReplayBuffer::empty(LatentCodec::float(), 0, [1, 1, 1]);
        for &(class, k) in counts {
            let t = Tensor::full(&[k, 1, 1, 1], class as f32);
            b.push(&t, &vec![class; k]).unwrap();
        }
        b
    }

    #[test]
    fn minibatch_split_is_exact() {
        let b = synthetic_buffer(&[(0, 100), (1, 300)]);
        let new = Tensor::full(&[21, 1, 1, 1], 9.0);
        let mb = sample_minibatch(&b, &new, &[9; 21], 128, &mut Rng::new(0)).unwrap();
        assert_eq!(mb.replays, 107);
        assert_eq!(mb.labels.len(), 128);
        assert!(mb.labels[..21].iter().all(|&l| l == 9));
        let again = sample_minibatch(&b, &new, &[9; 21], 128, &mut Rng::new(0)).unwrap();
        assert_eq!(mb, again);
    }

    #[test]
    fn replay_class_ratio_follows_buffer() {
        let b = synthetic_buffer(&[(0, 100), (1, 300)]);
        let new = Tensor::full(&[21, 1, 1, 1], 9.0);
        let mut rng = Rng::new(11);
        let (mut zeros, mut ones) = (0usize, 0usize);
        for _ in 0..1000 {
            let mb = sample_minibatch(&b, &new, &[9; 21], 128, &mut rng).unwrap();
            for &l in &mb.labels[21..] {
                if l == 0 {
                    zeros += 1
                } else {
                    ones += 1
                }
            }
        }
        let ratio = ones as f64 / zeros as f64;
        assert!((ratio - 3.0).abs() / 3.0 < 0.05, "ratio {ratio}");
    }

    #[test]
    fn empty_buffer_falls_back_to_new_only() {
        let b = ReplayBuffer::empty(LatentCodec::float(), 0, [1, 1, 1]);
        let new = Tensor::full(&[21, 1, 1, 1], 1.0);
        let mb = sample_minibatch(&b, &new, &[0; 21], 128, &mut Rng::new(0)).unwrap();
        assert_eq!(mb.labels.len(), 21);
        assert_eq!(mb.replays, 0);
    }

    #[test]
    fn balanced_replacement_keeps_size_and_evens_classes() {
        let mut b = synthetic_buffer(&[(0, 6), (1, 6)]);
        let new = Tensor::full(&[10, 1, 1, 1], 2.0);
        b.replace_balanced(&new, &[2; 10], &mut Rng::new(0))
            .unwrap();
        assert_eq!(b.len(), 12);
        assert!(b.class_counts().values().all(|&k| k == 4));
    }
}
