//! Face verification: input normalization, embedding comparison and the
//! k-fold pair protocol.
//!
//! Pairs are split into `folds` contiguous folds. For each fold the decision
//! threshold is the one that maximizes accuracy on the remaining folds; it is
//! then scored on the held-out fold. Candidate thresholds are midpoints of
//! the sorted unique training similarities plus one value below and one above
//! the whole range; ties go to the lowest threshold. A pair is predicted
//! "same" when its similarity is strictly greater than the threshold.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::executor::Model;
use crate::graph::MOBIFACE_INPUT;
use crate::image::load_image;
use crate::tensor::{l2_normalize, Tensor};

pub const PIXEL_MEAN: f32 = 127.5;
pub const PIXEL_SCALE: f32 = 128.0;

/// A normalized `[3, 112, 112]` face crop with values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedFace(Tensor);

impl AlignedFace {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    /// `[1, 3, 112, 112]` batch of one.
    pub fn to_batch(&self) -> Tensor {
        let mut shape = vec![1];
        shape.extend_from_slice(self.0.shape());
        self.0.clone().reshape(&shape).expect("same element count")
    }
}

/// `(raw - 127.5) / 128` on a `[3, 112, 112]` image of `0..=255` pixels.
pub fn preprocess(raw: &Tensor) -> Result<AlignedFace> {
    if raw.shape() != MOBIFACE_INPUT {
        return Err(Error::Image(format!("expected a {:?} image, got {:?}", MOBIFACE_INPUT, raw.shape())));
    }
    if let Some(v) = raw.data().iter().find(|v| !(0.0..=255.0).contains(*v)) {
        return Err(Error::Image(format!("pixel value {v} outside [0, 255]")));
    }
    let data = raw.data().iter().map(|v| (v - PIXEL_MEAN) / PIXEL_SCALE).collect();
    Ok(AlignedFace(Tensor::new(raw.shape(), data)?))
}

pub fn cosine_similarity(a: &Tensor, b: &Tensor) -> Result<f32> {
    if a.rank() != 1 || a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(a.shape().to_vec(), b.shape().to_vec()));
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (f64::from(x), f64::from(y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0) as f32)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pair {
    pub a: String,
    pub b: String,
    pub same: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairList {
    pub pairs: Vec<Pair>,
    pub folds: usize,
}

impl PairList {
    pub fn new(pairs: Vec<Pair>, folds: usize) -> Result<Self> {
        let list = Self { pairs, folds };
        list.check()?;
        Ok(list)
    }

    fn check(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::Protocol(format!("need at least 2 folds, got {}", self.folds)));
        }
        if self.pairs.is_empty() || !self.pairs.len().is_multiple_of(self.folds) {
            return Err(Error::Protocol(format!(
                "{} pairs cannot be split into {} equal folds",
                self.pairs.len(),
                self.folds
            )));
        }
        Ok(())
    }

    /// Parses the tab-separated pair format:
    ///
    /// ```text
    /// #folds=10
    /// a.ppm<TAB>b.ppm<TAB>1
    /// ```
    ///
    /// Blank lines and other `#` lines are ignored. Labels are `1` (same) or `0`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut folds = None;
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                if let Some(v) = rest.trim().strip_prefix("folds=") {
                    let n = v
                        .trim()
                        .parse()
                        .map_err(|_| Error::PairList { line: line_no, msg: format!("bad fold count `{v}`") })?;
                    folds = Some(n);
                }
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [a, b, label] = fields.as_slice() else {
                return Err(Error::PairList {
                    line: line_no,
                    msg: format!("expected 3 tab-separated fields, found {}", fields.len()),
                });
            };
            let same = match label.trim() {
                "1" => true,
                "0" => false,
                other => {
                    return Err(Error::PairList { line: line_no, msg: format!("label must be 0 or 1, got `{other}`") })
                }
            };
            if a.is_empty() || b.is_empty() {
                return Err(Error::PairList { line: line_no, msg: "empty image path".into() });
            }
            pairs.push(Pair { a: a.to_string(), b: b.to_string(), same });
        }
        let folds = folds.ok_or_else(|| Error::PairList { line: 1, msg: "missing `#folds=N` header".into() })?;
        Self::new(pairs, folds)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("#folds={}\n", self.folds);
        for p in &self.pairs {
            s.push_str(&format!("{}\t{}\t{}\n", p.a, p.b, u8::from(p.same)));
        }
        s
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FoldResult {
    pub fold: usize,
    pub threshold: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairEvalResult {
    pub folds: Vec<FoldResult>,
    pub mean_accuracy: f64,
    /// Population standard deviation across folds.
    pub std_accuracy: f64,
}

/// Threshold maximizing accuracy on `(score, same)` samples.
fn best_threshold(samples: &[(f64, bool)]) -> f64 {
    let mut sorted: Vec<(f64, bool)> = samples.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let positives = sorted.iter().filter(|s| s.1).count();
    // threshold below everything: all predicted same
    let mut best_correct = positives;
    let mut best_t = sorted[0].0 - 1.0;
    let (mut neg_below, mut pos_below) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let v = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == v {
            if sorted[i].1 {
                pos_below += 1;
            } else {
                neg_below += 1;
            }
            i += 1;
        }
        let t = match sorted.get(i) {
            Some(next) => 0.5 * (v + next.0),
            None => v + 1.0,
        };
        let correct = neg_below + (positives - pos_below);
        if correct > best_correct {
            best_correct = correct;
            best_t = t;
        }
    }
    best_t
}

fn accuracy(samples: &[(f64, bool)], threshold: f64) -> f64 {
    let correct = samples.iter().filter(|(s, same)| (*s > threshold) == *same).count();
    correct as f64 / samples.len() as f64
}

/// k-fold protocol over precomputed similarities.
pub fn evaluate_scores(scores: &[f32], labels: &[bool], folds: usize) -> Result<PairEvalResult> {
    if scores.len() != labels.len() {
        return Err(Error::DimMismatch { expected: labels.len(), actual: scores.len() });
    }
    if folds < 2 || scores.is_empty() || !scores.len().is_multiple_of(folds) {
        return Err(Error::Protocol(format!("{} pairs cannot be split into {folds} equal folds", scores.len())));
    }
    let samples: Vec<(f64, bool)> = scores.iter().map(|&s| f64::from(s)).zip(labels.iter().copied()).collect();
    let size = samples.len() / folds;
    let mut results = Vec::with_capacity(folds);
    for f in 0..folds {
        let test = &samples[f * size..(f + 1) * size];
        let train: Vec<(f64, bool)> =
            samples[..f * size].iter().chain(&samples[(f + 1) * size..]).copied().collect();
        let threshold = best_threshold(&train);
        results.push(FoldResult { fold: f, threshold, accuracy: accuracy(test, threshold) });
    }
    let mean = results.iter().map(|r| r.accuracy).sum::<f64>() / folds as f64;
    let var = results.iter().map(|r| (r.accuracy - mean).powi(2)).sum::<f64>() / folds as f64;
    Ok(PairEvalResult { folds: results, mean_accuracy: mean, std_accuracy: var.sqrt() })
}

/// Anything that maps a normalized face to an embedding vector.
pub trait Embedder: Sync {
    fn embed(&self, face: &AlignedFace) -> Result<Tensor>;
}

/// Backbone embedding, optionally averaged with the flip head's prediction.
pub struct NetworkEmbedder<'a> {
    pub model: &'a Model,
    pub use_flip_head: bool,
}

impl Embedder for NetworkEmbedder<'_> {
    fn embed(&self, face: &AlignedFace) -> Result<Tensor> {
        let batch = face.to_batch();
        let out = if self.use_flip_head { self.model.embed_with_flip(&batch)? } else { self.model.forward(&batch)? };
        out.sample(0)
    }
}

/// Embeds every distinct image once (in parallel), then runs the protocol on
/// cosine similarities of the L2-normalized embeddings.
pub fn evaluate_pairs_with<E, L>(embedder: &E, pairs: &PairList, load: L) -> Result<PairEvalResult>
where
    E: Embedder,
    L: Fn(&str) -> Result<Tensor> + Sync,
{
    pairs.check()?;
    let mut refs: Vec<&str> = Vec::new();
    let mut index: HashMap<&str, usize> = HashMap::new();
    for p in &pairs.pairs {
        for r in [p.a.as_str(), p.b.as_str()] {
            index.entry(r).or_insert_with(|| {
                refs.push(r);
                refs.len() - 1
            });
        }
    }
    let embeddings: Vec<Tensor> = refs
        .par_iter()
        .map(|r| {
            let face = preprocess(&load(r)?).map_err(|e| Error::Image(format!("{r}: {e}")))?;
            l2_normalize(&embedder.embed(&face)?)
        })
        .collect::<Result<_>>()?;
    let mut scores = Vec::with_capacity(pairs.pairs.len());
    let mut labels = Vec::with_capacity(pairs.pairs.len());
    for p in &pairs.pairs {
        scores.push(cosine_similarity(&embeddings[index[p.a.as_str()]], &embeddings[index[p.b.as_str()]])?);
        labels.push(p.same);
    }
    evaluate_scores(&scores, &labels, pairs.folds)
}

/// Runs the protocol with images loaded from disk; relative paths resolve
/// against `base_dir`.
pub fn evaluate_pairs(model: &Model, pairs: &PairList, use_flip_head: bool, base_dir: &Path) -> Result<PairEvalResult> {
    if use_flip_head && !model.has_flip_head() {
        return Err(Error::InvalidParam("flip head requested but the model has none".into()));
    }
    let embedder = NetworkEmbedder { model, use_flip_head };
    evaluate_pairs_with(&embedder, pairs, |r| load_image(resolve(base_dir, r)))
}

pub fn resolve(base_dir: &Path, r: &str) -> PathBuf {
    let p = Path::new(r);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base_dir.join(p)
    }
}
