//! Synthetic sequence tasks standing in for acoustic corpora at desk scale,
//! plus dataset splits, minibatch assembly, and a versioned on-disk format.

use std::io::{Read, Write};

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{StreamRole, StreamSeed};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// Sequence labels emitted over segments; trained with CTC.
    CtcSequence,
    /// Per-frame labels from the current frame only.
    FrameClassification,
    /// Per-frame labels that depend on frames exactly `required_half_width`
    /// away (and the center frame), so a candidate's receptive field is
    /// necessary and sufficient to solve the task.
    PlantedContext,
}

/// Pure description of a synthetic task; generation is a function of
/// `(spec, seed)` and nothing else.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub kind: TaskKind,
    /// Classes for frame tasks; symbol count including blank for CTC.
    pub vocab: usize,
    pub feat_dim: usize,
    pub time_range: (usize, usize),
    /// Items in the train+validation pool.
    pub num_sequences: usize,
    pub num_test: usize,
    #[serde(default)]
    pub required_half_width: usize,
    /// Label corruption probability for frame tasks.
    #[serde(default)]
    pub noise: f64,
    /// Fraction of the pool held out for search validation (paper split 90:10).
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    /// Temporal subsampling the consuming model applies; CTC label density is
    /// kept admissible at this output rate.
    #[serde(default = "default_one")]
    pub subsample_factor: usize,
    pub seed: u64,
}

fn default_val_fraction() -> f64 {
    0.1
}

fn default_one() -> usize {
    1
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 {
            return Err(Error::Config("task vocab must be >= 2".into()));
        }
        if self.feat_dim == 0 || self.num_sequences == 0 {
            return Err(Error::Config("task needs feat_dim > 0 and num_sequences > 0".into()));
        }
        let (lo, hi) = self.time_range;
        if lo == 0 || hi < lo {
            return Err(Error::Config(format!("bad time_range ({}, {})", lo, hi)));
        }
        if self.kind == TaskKind::PlantedContext && 2 * self.required_half_width >= lo {
            return Err(Error::Config(format!(
                "required_half_width {} too large for minimum length {}",
                self.required_half_width, lo
            )));
        }
        if !(0.0..1.0).contains(&self.noise) {
            return Err(Error::Config(format!("noise {} not in [0, 1)", self.noise)));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!("val_fraction {} not in (0, 1)", self.val_fraction)));
        }
        if self.subsample_factor == 0 {
            return Err(Error::Config("subsample_factor must be >= 1".into()));
        }
        Ok(())
    }
}

/// One item: `[t_len, feat_dim]` features plus frame labels or a label
/// sequence depending on the task kind.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence<T: Scalar> {
    pub features: Vec<T>,
    pub t_len: usize,
    pub frame_labels: Option<Vec<u32>>,
    pub label_seq: Option<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T: Scalar> {
    pub items: Vec<Sequence<T>>,
    pub feat_dim: usize,
    pub vocab: usize,
}

impl<T: Scalar> Dataset<T> {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct SplitData<T: Scalar> {
    pub train: Dataset<T>,
    pub val: Dataset<T>,
    pub test: Dataset<T>,
}

impl<T: Scalar> SplitData<T> {
    /// Re-split the train+val pool with a different validation fraction
    /// (retraining holds out 5% instead of the search split).
    pub fn resplit(&self, val_fraction: f64) -> SplitData<T> {
        let mut pool: Vec<Sequence<T>> = self.train.items.clone();
        pool.extend(self.val.items.iter().cloned());
        let n_val = ((pool.len() as f64) * val_fraction).round() as usize;
        let n_val = n_val.clamp(1, pool.len().saturating_sub(1).max(1));
        let val_items = pool.split_off(pool.len() - n_val);
        SplitData {
            train: Dataset { items: pool, feat_dim: self.train.feat_dim, vocab: self.train.vocab },
            val: Dataset { items: val_items, feat_dim: self.train.feat_dim, vocab: self.train.vocab },
            test: self.test.clone(),
        }
    }
}

/// Class-to-feature projections defining a frame task's labeling rule: one
/// matrix per time offset in the contiguous window -w..=w, so every frame in
/// that window (and none outside it) carries label information.
struct FrameRule {
    half_width: usize,
    /// `(2w+1)` matrices of `[vocab, feat_dim]`, offset order -w..=w.
    offsets: Vec<Vec<f64>>,
}

fn draw_rule(seed: &StreamSeed, vocab: usize, feat_dim: usize, half_width: usize) -> FrameRule {
    let mut rng = seed.stream(StreamRole::TaskData, &[u64::MAX]);
    let offsets = (0..2 * half_width + 1)
        .map(|_| (0..vocab * feat_dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    FrameRule { half_width, offsets }
}

fn frame_scores(rule: &FrameRule, x: &[f64], feat_dim: usize, t_len: usize, vocab: usize) -> Vec<u32> {
    let w = rule.half_width as isize;
    let mut labels = Vec::with_capacity(t_len);
    for t in 0..t_len as isize {
        let mut best = (f64::NEG_INFINITY, 0u32);
        for c in 0..vocab {
            let mut s = 0.0;
            for (oi, mat) in rule.offsets.iter().enumerate() {
                let src = t + oi as isize - w;
                if src < 0 || src as usize >= t_len {
                    continue; // zero padding contributes nothing
                }
                let f = &x[src as usize * feat_dim..(src as usize + 1) * feat_dim];
                for (j, &v) in f.iter().enumerate() {
                    s += mat[c * feat_dim + j] * v;
                }
            }
            if s > best.0 {
                best = (s, c as u32);
            }
        }
        labels.push(best.1);
    }
    labels
}

fn gen_frame_item<T: Scalar>(
    spec: &SyntheticTaskSpec,
    rule: &FrameRule,
    seed: &StreamSeed,
    index: u64,
) -> Sequence<T> {
    let mut rng = seed.stream(StreamRole::TaskData, &[index]);
    let (lo, hi) = spec.time_range;
    let t_len = rng.gen_range(lo..=hi);
    let x: Vec<f64> = (0..t_len * spec.feat_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut labels = frame_scores(rule, &x, spec.feat_dim, t_len, spec.vocab);
    if spec.noise > 0.0 {
        for l in labels.iter_mut() {
            if rng.gen::<f64>() < spec.noise {
                *l = rng.gen_range(0..spec.vocab) as u32;
            }
        }
    }
    Sequence {
        features: x.into_iter().map(T::from_f64).collect(),
        t_len,
        frame_labels: Some(labels),
        label_seq: None,
    }
}

fn gen_ctc_item<T: Scalar>(spec: &SyntheticTaskSpec, seed: &StreamSeed, index: u64) -> Sequence<T> {
    let mut rng = seed.stream(StreamRole::TaskData, &[index]);
    let (lo, hi) = spec.time_range;
    let t_len = rng.gen_range(lo..=hi);
    // Class embeddings are redrawn per task stream, index MAX-1.
    let mut emb_rng = seed.stream(StreamRole::TaskData, &[u64::MAX - 1]);
    let emb: Vec<f64> = (0..spec.vocab * spec.feat_dim)
        .map(|_| emb_rng.gen_range(-1.0..1.0))
        .collect();

    let mut features = vec![0.0f64; t_len * spec.feat_dim];
    let mut labels: Vec<u32> = Vec::new();
    let mut t = 0usize;
    while t < t_len {
        let silence = rng.gen_range(0..=2usize).min(t_len - t);
        for _ in 0..silence {
            features[t * spec.feat_dim..(t + 1) * spec.feat_dim]
                .copy_from_slice(&emb[0..spec.feat_dim]);
            t += 1;
        }
        if t_len - t < 3 {
            break;
        }
        let sym = rng.gen_range(1..spec.vocab) as u32;
        let seg = rng.gen_range(3..=5usize).min(t_len - t);
        for _ in 0..seg {
            features[t * spec.feat_dim..(t + 1) * spec.feat_dim]
                .copy_from_slice(&emb[sym as usize * spec.feat_dim..(sym as usize + 1) * spec.feat_dim]);
            t += 1;
        }
        labels.push(sym);
    }
    while t < t_len {
        features[t * spec.feat_dim..(t + 1) * spec.feat_dim].copy_from_slice(&emb[0..spec.feat_dim]);
        t += 1;
    }
    if labels.is_empty() {
        labels.push(1);
    }
    // Keep the label admissible at the model's output frame rate.
    let out_frames = t_len.div_ceil(spec.subsample_factor);
    while !labels.is_empty() {
        let repeats = labels.windows(2).filter(|w| w[0] == w[1]).count();
        if labels.len() + repeats <= out_frames {
            break;
        }
        labels.pop();
    }
    if labels.is_empty() {
        labels.push(1);
    }
    if spec.noise > 0.0 {
        for v in features.iter_mut() {
            *v += rng.gen_range(-1.0..1.0) * spec.noise;
        }
    }
    Sequence {
        features: features.into_iter().map(T::from_f64).collect(),
        t_len,
        frame_labels: None,
        label_seq: Some(labels),
    }
}

/// Generate (train, validation, test) deterministically from `(spec, seed)`.
pub fn generate_task<T: Scalar>(spec: &SyntheticTaskSpec) -> Result<SplitData<T>> {
    spec.validate()?;
    let seed = StreamSeed::new(spec.seed);
    let total = spec.num_sequences + spec.num_test;
    let rule_width = if spec.kind == TaskKind::PlantedContext {
        spec.required_half_width
    } else {
        0
    };
    let rule = draw_rule(&seed, spec.vocab, spec.feat_dim, rule_width);
    let mut items: Vec<Sequence<T>> = Vec::with_capacity(total);
    for i in 0..total {
        let item = match spec.kind {
            TaskKind::CtcSequence => gen_ctc_item(spec, &seed, i as u64),
            TaskKind::FrameClassification | TaskKind::PlantedContext => {
                gen_frame_item(spec, &rule, &seed, i as u64)
            }
        };
        items.push(item);
    }
    let test_items = items.split_off(spec.num_sequences);
    let n_val = ((spec.num_sequences as f64) * spec.val_fraction).round() as usize;
    let n_val = n_val.clamp(1, spec.num_sequences.saturating_sub(1).max(1));
    let val_items = items.split_off(items.len() - n_val);
    let mk = |items: Vec<Sequence<T>>| Dataset {
        items,
        feat_dim: spec.feat_dim,
        vocab: spec.vocab,
    };
    Ok(SplitData {
        train: mk(items),
        val: mk(val_items),
        test: mk(test_items),
    })
}

// ── minibatches ──────────────────────────────────────────────────────

/// A zero-padded minibatch. Frame targets use `u32::MAX` on padding.
#[derive(Debug, Clone)]
pub struct Minibatch<T: Scalar> {
    pub features: Vec<T>,
    pub batch: usize,
    pub max_t: usize,
    pub feat_dim: usize,
    pub frame_targets: Option<Vec<u32>>,
    pub labels: Option<Vec<Vec<u32>>>,
    pub input_lens: Vec<usize>,
}

/// Assemble items (by index) into one padded minibatch.
pub fn make_minibatch<T: Scalar>(data: &Dataset<T>, indices: &[usize]) -> Minibatch<T> {
    let batch = indices.len();
    let max_t = indices.iter().map(|&i| data.items[i].t_len).max().unwrap_or(1);
    let fd = data.feat_dim;
    let mut features = vec![T::ZERO; batch * max_t * fd];
    let mut input_lens = Vec::with_capacity(batch);
    let has_frames = data.items[indices[0]].frame_labels.is_some();
    let mut frame_targets = if has_frames {
        Some(vec![u32::MAX; batch * max_t])
    } else {
        None
    };
    let mut labels = if has_frames { None } else { Some(Vec::with_capacity(batch)) };
    for (b, &i) in indices.iter().enumerate() {
        let item = &data.items[i];
        features[b * max_t * fd..b * max_t * fd + item.t_len * fd].copy_from_slice(&item.features);
        input_lens.push(item.t_len);
        if let (Some(ft), Some(src)) = (frame_targets.as_mut(), item.frame_labels.as_ref()) {
            ft[b * max_t..b * max_t + item.t_len].copy_from_slice(src);
        }
        if let (Some(ls), Some(seq)) = (labels.as_mut(), item.label_seq.as_ref()) {
            ls.push(seq.clone());
        }
    }
    Minibatch {
        features,
        batch,
        max_t,
        feat_dim: fd,
        frame_targets,
        labels,
        input_lens,
    }
}

/// Split indices into consecutive minibatches of `size` (last one ragged).
pub fn batch_ranges(n: usize, size: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut lo = 0;
    while lo < n {
        let hi = (lo + size).min(n);
        out.push((lo, hi));
        lo = hi;
    }
    out
}

// ── versioned on-disk format ─────────────────────────────────────────

const MAGIC: &[u8; 8] = b"NASDATA1";
const FORMAT_VERSION: u32 = 1;

fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

/// Write a dataset: magic, version, dims, then per item lengths, features as
/// little-endian f64, and labels.
pub fn export_dataset<T: Scalar, W: Write>(data: &Dataset<T>, w: &mut W) -> Result<()> {
    w.write_all(MAGIC)?;
    write_u32(w, FORMAT_VERSION)?;
    write_u32(w, data.feat_dim as u32)?;
    write_u32(w, data.vocab as u32)?;
    write_u32(w, data.items.len() as u32)?;
    for item in &data.items {
        write_u32(w, item.t_len as u32)?;
        let (tag, labels): (u32, &[u32]) = match (&item.frame_labels, &item.label_seq) {
            (Some(f), _) => (1, f),
            (_, Some(s)) => (2, s),
            _ => (0, &[]),
        };
        write_u32(w, tag)?;
        write_u32(w, labels.len() as u32)?;
        for &v in &item.features {
            w.write_all(&v.to_f64().to_le_bytes())?;
        }
        for &l in labels {
            write_u32(w, l)?;
        }
    }
    Ok(())
}

pub fn import_dataset<T: Scalar, R: Read>(r: &mut R) -> Result<Dataset<T>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Serde("bad dataset magic".into()));
    }
    let version = read_u32(r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Serde(format!("unsupported dataset version {}", version)));
    }
    let feat_dim = read_u32(r)? as usize;
    let vocab = read_u32(r)? as usize;
    let n = read_u32(r)? as usize;
    let mut items = Vec::with_capacity(n);
    for _ in 0..n {
        let t_len = read_u32(r)? as usize;
        let tag = read_u32(r)?;
        let n_labels = read_u32(r)? as usize;
        let mut features = Vec::with_capacity(t_len * feat_dim);
        let mut buf = [0u8; 8];
        for _ in 0..t_len * feat_dim {
            r.read_exact(&mut buf)?;
            features.push(T::from_f64(f64::from_le_bytes(buf)));
        }
        let mut labels = Vec::with_capacity(n_labels);
        for _ in 0..n_labels {
            labels.push(read_u32(r)?);
        }
        let (frame_labels, label_seq) = match tag {
            1 => (Some(labels), None),
            2 => (None, Some(labels)),
            _ => (None, None),
        };
        items.push(Sequence {
            features,
            t_len,
            frame_labels,
            label_seq,
        });
    }
    Ok(Dataset { items, feat_dim, vocab })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn planted_spec() -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            kind: TaskKind::PlantedContext,
            vocab: 4,
            feat_dim: 6,
            time_range: (16, 16),
            num_sequences: 40,
            num_test: 10,
            required_half_width: 2,
            noise: 0.0,
            val_fraction: 0.1,
            subsample_factor: 1,
            seed: 5,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = planted_spec();
        let a: SplitData<f32> = generate_task(&spec).unwrap();
        let b: SplitData<f32> = generate_task(&spec).unwrap();
        assert_eq!(a.train.items, b.train.items);
        assert_eq!(a.val.items, b.val.items);
        assert_eq!(a.test.items, b.test.items);
    }

    #[test]
    fn search_split_is_90_10() {
        let mut spec = planted_spec();
        spec.num_sequences = 1000;
        spec.num_test = 5;
        let data: SplitData<f32> = generate_task(&spec).unwrap();
        assert_eq!(data.train.len(), 900);
        assert_eq!(data.val.len(), 100);
        assert_eq!(data.test.len(), 5);
    }

    #[test]
    fn resplit_holds_out_5_percent() {
        let mut spec = planted_spec();
        spec.num_sequences = 200;
        let data: SplitData<f32> = generate_task(&spec).unwrap();
        let re = data.resplit(0.05);
        assert_eq!(re.val.len(), 10);
        assert_eq!(re.train.len(), 190);
    }

    #[test]
    fn planted_labels_depend_on_the_whole_window() {
        // Perturbing x at every offset in -w..=w must be able to flip the
        // label at t; offsets beyond the window must never flip it.
        let spec = planted_spec();
        let data: SplitData<f64> = generate_task(&spec).unwrap();
        let seed = StreamSeed::new(spec.seed);
        let rule = draw_rule(&seed, spec.vocab, spec.feat_dim, spec.required_half_width);
        let item = &data.train.items[0];
        let x: Vec<f64> = item.features.iter().map(|v| v.to_f64()).collect();
        let base = frame_scores(&rule, &x, spec.feat_dim, item.t_len, spec.vocab);
        assert_eq!(&base, item.frame_labels.as_ref().unwrap());
        let w = spec.required_half_width as isize;
        for offset in [-w, -1, 1, w] {
            let mut flipped = 0;
            for trial in 0..16 {
                let mut x2 = x.clone();
                let t = (4 + trial % 8) as isize;
                let src = (t + offset) as usize;
                for j in 0..spec.feat_dim {
                    x2[src * spec.feat_dim + j] *= -5.0;
                }
                let relabeled = frame_scores(&rule, &x2, spec.feat_dim, item.t_len, spec.vocab);
                if relabeled[t as usize] != base[t as usize] {
                    flipped += 1;
                }
            }
            assert!(flipped > 0, "labels never depend on offset {}", offset);
        }
        // Outside the window: perturbing t+w+1 leaves the label at t intact.
        let mut unaffected = true;
        for trial in 0..16 {
            let mut x2 = x.clone();
            let t = 4 + trial % 8;
            let src = t + spec.required_half_width + 1;
            for j in 0..spec.feat_dim {
                x2[src * spec.feat_dim + j] *= -5.0;
            }
            let relabeled = frame_scores(&rule, &x2, spec.feat_dim, item.t_len, spec.vocab);
            if relabeled[t] != base[t] {
                unaffected = false;
            }
        }
        assert!(unaffected, "labels leaked dependence beyond the window");
    }

    #[test]
    fn ctc_items_are_admissible_after_subsampling() {
        let spec = SyntheticTaskSpec {
            kind: TaskKind::CtcSequence,
            vocab: 5,
            feat_dim: 4,
            time_range: (18, 30),
            num_sequences: 30,
            num_test: 5,
            required_half_width: 0,
            noise: 0.05,
            val_fraction: 0.1,
            subsample_factor: 3,
            seed: 2,
        };
        let data: SplitData<f32> = generate_task(&spec).unwrap();
        for item in data.train.items.iter().chain(&data.val.items) {
            let label = item.label_seq.as_ref().unwrap();
            assert!(!label.is_empty());
            let repeats = label.windows(2).filter(|w| w[0] == w[1]).count();
            let out_frames = item.t_len.div_ceil(3);
            assert!(label.len() + repeats <= out_frames);
        }
    }

    #[test]
    fn dataset_roundtrips_through_binary_format() {
        let spec = planted_spec();
        let data: SplitData<f64> = generate_task(&spec).unwrap();
        let mut buf = Vec::new();
        export_dataset(&data.train, &mut buf).unwrap();
        let back: Dataset<f64> = import_dataset(&mut buf.as_slice()).unwrap();
        assert_eq!(back.items, data.train.items);
        assert_eq!(back.feat_dim, data.train.feat_dim);
    }

    #[test]
    fn import_rejects_bad_magic() {
        let buf = b"NOTADATA0000".to_vec();
        assert!(import_dataset::<f32, _>(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = planted_spec();
        spec.required_half_width = 8; // 2*8 >= 16
        assert!(spec.validate().is_err());
        let mut spec = planted_spec();
        spec.time_range = (10, 5);
        assert!(spec.validate().is_err());
    }

    #[test]
    fn minibatch_pads_and_masks() {
        let data = Dataset::<f32> {
            items: vec![
                Sequence { features: vec![1.0; 2 * 3], t_len: 2, frame_labels: Some(vec![1, 2]), label_seq: None },
                Sequence { features: vec![2.0; 4 * 3], t_len: 4, frame_labels: Some(vec![0, 1, 2, 0]), label_seq: None },
            ],
            feat_dim: 3,
            vocab: 3,
        };
        let mb = make_minibatch(&data, &[0, 1]);
        assert_eq!(mb.max_t, 4);
        let ft = mb.frame_targets.unwrap();
        assert_eq!(&ft[0..4], &[1, 2, u32::MAX, u32::MAX]);
        assert_eq!(&ft[4..8], &[0, 1, 2, 0]);
        assert_eq!(mb.features[2 * 3], 0.0); // padded frame zeroed
    }
}
