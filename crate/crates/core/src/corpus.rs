//! Synthetic frame-aligned utterances, their binary file format and
//! frame-budgeted batching.
//!
//! Each label owns a Gaussian mean vector drawn once from the corpus seed.
//! Alignments are runs of labels whose durations are geometric, so they look
//! like HMM state occupancy; every frame is its label's mean plus isotropic
//! noise.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, Domain};
use crate::tensor::Tensor;

pub const CORPUS_MAGIC: &[u8; 5] = b"CHAM1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub num_utterances: usize,
    /// Held-out utterances drawn from the same label means.
    pub dev_utterances: usize,
    pub min_length: usize,
    pub max_length: usize,
    pub feature_dim: usize,
    pub num_labels: usize,
    /// Standard deviation of the per-label mean vectors.
    pub mean_scale: f64,
    /// Standard deviation of the per-frame noise.
    pub noise: f64,
    /// Mean label dwell time in frames.
    pub mean_segment_length: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            num_utterances: 200,
            dev_utterances: 20,
            min_length: 100,
            max_length: 400,
            feature_dim: 40,
            num_labels: 9001,
            mean_scale: 1.0,
            noise: 0.5,
            mean_segment_length: 5.0,
            seed: 7,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.min_length == 0 || self.min_length > self.max_length {
            return bad(format!(
                "corpus lengths need 1 <= min <= max, got ({}, {})",
                self.min_length, self.max_length
            ));
        }
        if self.num_labels < 2 {
            return bad(format!("num_labels must be >= 2, got {}", self.num_labels));
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be positive".into());
        }
        if !(self.mean_segment_length >= 1.0) {
            return bad(format!(
                "mean_segment_length must be >= 1, got {}",
                self.mean_segment_length
            ));
        }
        if !(self.noise >= 0.0) || !(self.mean_scale >= 0.0) {
            return bad("noise and mean_scale must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// `[T, F]`
    pub features: Tensor<f64>,
    /// One label per frame.
    pub alignment: Vec<usize>,
}

impl Utterance {
    pub fn new(id: impl Into<String>, features: Tensor<f64>, alignment: Vec<usize>) -> Result<Self> {
        let id = id.into();
        if features.rank() != 2 || features.dim(0) != alignment.len() || alignment.is_empty() {
            return Err(Error::Shape {
                op: "Utterance::new",
                detail: format!(
                    "{id}: features {:?} with {} labels",
                    features.shape(),
                    alignment.len()
                ),
            });
        }
        Ok(Self {
            id,
            features,
            alignment,
        })
    }

    pub fn len(&self) -> usize {
        self.alignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alignment.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.dim(1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
}

fn label_means(spec: &CorpusSpec) -> Vec<f64> {
    let mut rng = stream(spec.seed, Domain::LabelMeans, 0);
    (0..spec.num_labels * spec.feature_dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * spec.mean_scale
        })
        .collect()
}

fn synth_utterance(spec: &CorpusSpec, means: &[f64], id: String, rng: &mut ChaCha8Rng) -> Utterance {
    let t = rng.random_range(spec.min_length..=spec.max_length);
    let f = spec.feature_dim;
    let dwell = Geometric::new(1.0 / spec.mean_segment_length).expect("validated probability");
    let mut alignment = Vec::with_capacity(t);
    let mut prev: Option<usize> = None;
    while alignment.len() < t {
        let run = 1 + dwell.sample(rng) as usize;
        let label = match prev {
            None => rng.random_range(0..spec.num_labels),
            Some(p) => {
                let r = rng.random_range(0..spec.num_labels - 1);
                if r >= p {
                    r + 1
                } else {
                    r
                }
            }
        };
        prev = Some(label);
        let take = run.min(t - alignment.len());
        alignment.extend(std::iter::repeat_n(label, take));
    }
    let mut features = Vec::with_capacity(t * f);
    for &label in &alignment {
        for d in 0..f {
            let z: f64 = StandardNormal.sample(rng);
            // stored as f32 on disk; keep memory identical to what a reload gives
            features.push((means[label * f + d] + spec.noise * z) as f32 as f64);
        }
    }
    Utterance {
        id,
        features: Tensor::new([t, f], features).expect("consistent shape"),
        alignment,
    }
}

/// Deterministic corpus for `spec`; each utterance has its own generator
/// derived from `(seed, index)`.
pub fn generate(spec: &CorpusSpec) -> Result<Vec<Utterance>> {
    generate_split(spec, Split::Train)
}

pub fn generate_split(spec: &CorpusSpec, split: Split) -> Result<Vec<Utterance>> {
    spec.validate()?;
    let means = label_means(spec);
    let (domain, count, prefix) = match split {
        Split::Train => (Domain::Utterance, spec.num_utterances, "utt"),
        Split::Dev => (Domain::DevUtterance, spec.dev_utterances, "dev"),
    };
    Ok((0..count)
        .map(|i| {
            let mut rng = stream(spec.seed, domain, i as u64);
            synth_utterance(spec, &means, format!("{prefix}{i:06}"), &mut rng)
        })
        .collect())
}

pub fn total_frames(corpus: &[Utterance]) -> usize {
    corpus.iter().map(Utterance::len).sum()
}

/// Padded group of utterances.
#[derive(Clone, Debug)]
pub struct Batch<'a> {
    pub utterances: Vec<&'a Utterance>,
    /// `[B, T_max, F]`, zero beyond each utterance's length.
    pub padded_features: Tensor<f64>,
    /// `B * T_max` labels; zero in padding.
    pub padded_alignment: Vec<usize>,
    /// `B * T_max`, true exactly on real frames.
    pub frame_mask: Vec<bool>,
}

impl<'a> Batch<'a> {
    pub fn new(utterances: Vec<&'a Utterance>) -> Result<Self> {
        let feats: Vec<&Tensor<f64>> = utterances.iter().map(|u| &u.features).collect();
        let (padded_features, padded_alignment, frame_mask) = pad(&utterances, &feats)?;
        Ok(Self {
            utterances,
            padded_features,
            padded_alignment,
            frame_mask,
        })
    }

    /// Same batch with per-utterance features replaced (e.g. augmented).
    pub fn with_features(&self, features: &[Tensor<f64>]) -> Result<Self> {
        let feats: Vec<&Tensor<f64>> = features.iter().collect();
        let (padded_features, padded_alignment, frame_mask) = pad(&self.utterances, &feats)?;
        Ok(Self {
            utterances: self.utterances.clone(),
            padded_features,
            padded_alignment,
            frame_mask,
        })
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.utterances.iter().map(|u| u.len()).collect()
    }

    pub fn max_len(&self) -> usize {
        self.padded_features.dim(1)
    }

    pub fn padded_frames(&self) -> usize {
        self.utterances.len() * self.max_len()
    }

    pub fn real_frames(&self) -> usize {
        self.utterances.iter().map(|u| u.len()).sum()
    }
}

type Padded = (Tensor<f64>, Vec<usize>, Vec<bool>);

fn pad(utts: &[&Utterance], feats: &[&Tensor<f64>]) -> Result<Padded> {
    if utts.is_empty() {
        return Err(Error::EmptyInput("batch"));
    }
    let f = utts[0].feature_dim();
    let t_max = utts.iter().map(|u| u.len()).max().unwrap_or(0);
    let b = utts.len();
    let mut data = vec![0.0; b * t_max * f];
    let mut align = vec![0; b * t_max];
    let mut mask = vec![false; b * t_max];
    for (i, (u, x)) in utts.iter().zip(feats).enumerate() {
        if x.shape() != [u.len(), f] {
            return Err(Error::Shape {
                op: "batch",
                detail: format!("{}: features {:?}, expected [{}, {f}]", u.id, x.shape(), u.len()),
            });
        }
        let t = u.len();
        data[i * t_max * f..(i * t_max + t) * f].copy_from_slice(x.data());
        align[i * t_max..i * t_max + t].copy_from_slice(&u.alignment);
        mask[i * t_max..i * t_max + t].iter_mut().for_each(|m| *m = true);
    }
    Ok((Tensor::new([b, t_max, f], data)?, align, mask))
}

/// Length bucket: eight buckets per doubling of length.
fn bucket_of(len: usize) -> i64 {
    ((len as f64).log2() * 8.0).floor() as i64
}

/// Groups utterances into batches whose padded size `B * T_max` stays within
/// `frame_budget`.
///
/// Utterances are bucketed by length, longest bucket first, and shuffled
/// within their bucket with a generator derived from `seed`. Batches are then
/// filled greedily in that order: the next utterance joins the current batch
/// unless the padded size would exceed the budget.
pub fn make_batches(corpus: &[Utterance], frame_budget: usize, seed: u64) -> Result<Vec<Batch<'_>>> {
    if let Some(u) = corpus.iter().find(|u| u.len() > frame_budget) {
        return Err(Error::Config(format!(
            "utterance {} has {} frames, more than the batch budget {frame_budget}",
            u.id,
            u.len()
        )));
    }
    let mut rng = stream(seed, Domain::Batching, 0);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut rng);
    // stable: the shuffle survives inside each bucket
    order.sort_by_key(|&i| std::cmp::Reverse(bucket_of(corpus[i].len())));

    let mut batches = Vec::new();
    let mut current: Vec<&Utterance> = Vec::new();
    let mut t_max = 0;
    for i in order {
        let u = &corpus[i];
        let grown = t_max.max(u.len());
        if !current.is_empty() && (current.len() + 1) * grown > frame_budget {
            batches.push(Batch::new(std::mem::take(&mut current))?);
            t_max = 0;
        }
        t_max = t_max.max(u.len());
        current.push(u);
    }
    if !current.is_empty() {
        batches.push(Batch::new(current)?);
    }
    Ok(batches)
}

fn format_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Format(msg.into()))
}

pub fn write_corpus(w: &mut impl Write, corpus: &[Utterance]) -> Result<()> {
    w.write_all(CORPUS_MAGIC)?;
    w.write_all(&u32_of(corpus.len(), "utterance count")?.to_le_bytes())?;
    for u in corpus {
        let id = u.id.as_bytes();
        w.write_all(&u32_of(id.len(), "id length")?.to_le_bytes())?;
        w.write_all(id)?;
        w.write_all(&u32_of(u.len(), "frame count")?.to_le_bytes())?;
        w.write_all(&u32_of(u.feature_dim(), "feature dim")?.to_le_bytes())?;
        for &x in u.features.data() {
            w.write_all(&(x as f32).to_le_bytes())?;
        }
        for &l in &u.alignment {
            let l = i32::try_from(l).map_err(|_| Error::Format(format!("label {l} exceeds i32")))?;
            w.write_all(&l.to_le_bytes())?;
        }
    }
    Ok(())
}

fn u32_of(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("{what} {n} exceeds u32")))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_corpus(r: &mut impl Read) -> Result<Vec<Utterance>> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)?;
    if &magic != CORPUS_MAGIC {
        return format_err(format!("bad corpus magic {magic:?}"));
    }
    let n = read_u32(r)? as usize;
    let mut out = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let id_len = read_u32(r)? as usize;
        let mut id = vec![0u8; id_len];
        r.read_exact(&mut id)?;
        let id = String::from_utf8(id).map_err(|_| Error::Format("utterance id is not UTF-8".into()))?;
        let t = read_u32(r)? as usize;
        let f = read_u32(r)? as usize;
        if t == 0 || f == 0 {
            return format_err(format!("utterance {id} has shape [{t}, {f}]"));
        }
        let mut buf = vec![0u8; t * f * 4];
        r.read_exact(&mut buf)?;
        let feats = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let mut buf = vec![0u8; t * 4];
        r.read_exact(&mut buf)?;
        let mut alignment = Vec::with_capacity(t);
        for c in buf.chunks_exact(4) {
            let l = i32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            if l < 0 {
                return format_err(format!("utterance {id} has negative label {l}"));
            }
            alignment.push(l as usize);
        }
        out.push(Utterance::new(id, Tensor::new([t, f], feats)?, alignment)?);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return format_err("trailing bytes after corpus");
    }
    Ok(out)
}

pub fn save_corpus(path: impl AsRef<Path>, corpus: &[Utterance]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_corpus(&mut w, corpus)?;
    w.flush()?;
    Ok(())
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<Utterance>> {
    read_corpus(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn utt(id: &str, len: usize) -> Utterance {
        Utterance::new(id, Tensor::zeros([len, 2]), vec![0; len]).unwrap()
    }

    fn small_spec() -> CorpusSpec {
        CorpusSpec {
            num_utterances: 6,
            dev_utterances: 2,
            min_length: 20,
            max_length: 40,
            feature_dim: 5,
            num_labels: 7,
            ..CorpusSpec::default()
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        let a = generate(&small_spec()).unwrap();
        let b = generate(&small_spec()).unwrap();
        assert_eq!(a, b);
        let other = generate(&CorpusSpec {
            seed: 8,
            ..small_spec()
        })
        .unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn lengths_and_labels_in_range() {
        let spec = small_spec();
        for u in generate(&spec).unwrap().iter().chain(&generate_split(&spec, Split::Dev).unwrap()) {
            assert!((spec.min_length..=spec.max_length).contains(&u.len()));
            assert!(u.alignment.iter().all(|&l| l < spec.num_labels));
            assert_eq!(u.features.shape(), [u.len(), spec.feature_dim]);
        }
    }

    #[test]
    fn segments_have_mean_dwell_near_five() {
        let spec = CorpusSpec {
            num_utterances: 50,
            min_length: 400,
            max_length: 400,
            feature_dim: 1,
            num_labels: 50,
            ..CorpusSpec::default()
        };
        let corpus = generate(&spec).unwrap();
        let mut runs = 0usize;
        let mut frames = 0usize;
        for u in &corpus {
            runs += 1 + u.alignment.windows(2).filter(|w| w[0] != w[1]).count();
            frames += u.len();
        }
        let mean = frames as f64 / runs as f64;
        // last run of each utterance is truncated, so allow a little slack
        assert!((mean - 5.0).abs() < 0.3, "mean dwell {mean}");
    }

    #[test]
    fn greedy_fill_counts_padded_frames() {
        let corpus = vec![utt("a", 4000), utt("b", 3500), utt("c", 2600)];
        let batches = make_batches(&corpus, 10_000, 1).unwrap();
        let ids: Vec<Vec<&str>> = batches
            .iter()
            .map(|b| b.utterances.iter().map(|u| u.id.as_str()).collect())
            .collect();
        assert_eq!(ids, vec![vec!["a", "b"], vec!["c"]]);
        assert_eq!(batches[0].padded_frames(), 8000);
    }

    #[test]
    fn utterance_at_budget_is_a_singleton() {
        let corpus = vec![utt("a", 100), utt("b", 30)];
        let batches = make_batches(&corpus, 100, 0).unwrap();
        assert_eq!(batches[0].utterances.len(), 1);
        assert_eq!(batches[0].utterances[0].id, "a");
    }

    #[test]
    fn over_budget_utterance_is_rejected() {
        let corpus = vec![utt("a", 101)];
        assert!(matches!(make_batches(&corpus, 100, 0), Err(Error::Config(_))));
    }

    #[test]
    fn batches_partition_the_corpus() {
        let corpus = generate(&small_spec()).unwrap();
        let batches = make_batches(&corpus, 90, 3).unwrap();
        let mut ids: Vec<&str> = batches
            .iter()
            .flat_map(|b| b.utterances.iter().map(|u| u.id.as_str()))
            .collect();
        ids.sort();
        let mut expected: Vec<&str> = corpus.iter().map(|u| u.id.as_str()).collect();
        expected.sort();
        assert_eq!(ids, expected);
        let frames: usize = batches.iter().map(Batch::real_frames).sum();
        assert_eq!(frames, total_frames(&corpus));
        for b in &batches {
            assert!(b.padded_frames() <= 90);
            assert_eq!(b.frame_mask.iter().filter(|&&m| m).count(), b.real_frames());
        }
    }

    #[test]
    fn empty_and_seeded_corpora_round_trip() {
        for corpus in [Vec::new(), generate(&small_spec()).unwrap()] {
            let mut buf = Vec::new();
            write_corpus(&mut buf, &corpus).unwrap();
            assert_eq!(read_corpus(&mut buf.as_slice()).unwrap(), corpus);
        }
    }

    #[test]
    fn corrupted_magic_is_a_format_error() {
        let mut buf = Vec::new();
        write_corpus(&mut buf, &generate(&small_spec()).unwrap()).unwrap();
        buf[0] = b'X';
        assert!(matches!(read_corpus(&mut buf.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_file_is_an_error() {
        let mut buf = Vec::new();
        write_corpus(&mut buf, &generate(&small_spec()).unwrap()).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_corpus(&mut buf.as_slice()).is_err());
    }
}
