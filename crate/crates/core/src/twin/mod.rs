//! Twin network over fingerprint images.
//!
//! Both arms run the same [`Weights`]; the dissimilarity score of a pair is
//! the Euclidean distance between the two embeddings, and training
//! minimizes the contrastive loss over those distances.

mod io;
mod net;
mod train;

use std::collections::HashMap;
use std::io::{Read, Write};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fingerprint::{FingerprintImage, ImageKey};
use crate::pairing::{ImagePair, PairLabel, Split};

pub use io::{load_model, read_model, save_model, write_model, MODEL_FORMAT_VERSION, MODEL_MAGIC};
pub use net::{ArchDescriptor, RunningStats, Weights, BN_EPS, BN_MOMENTUM, TENSOR_NAMES};
pub use train::{batch_loss, batch_loss_and_gradient, batch_loss_and_pattern, train, Adam, EarlyStopping, EpochLog, TrainConfig};

/// Scores above this are predicted dissimilar.
pub const SCORE_THRESHOLD: f64 = 0.5;
const INFER_CHUNK: usize = 256;

#[derive(Debug, Error)]
pub enum TwinError {
    #[error("input has {got} pixels, the architecture expects {expected}")]
    Shape { expected: usize, got: usize },
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("no pairs to {0}")]
    EmptyPairs(&'static str),
    #[error("training diverged at epoch {epoch}: {what} is not finite")]
    Divergence { epoch: usize, what: &'static str },
    #[error("model file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerInfo {
    pub name: String,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

/// How a model came to be. Contains no wall-clock data so equal seeds give
/// equal files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub seed: u64,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_validation_loss: Option<f64>,
    pub stopped_early: bool,
    pub batch_size: usize,
    pub margin: f64,
    pub patience: usize,
    pub optimizer: OptimizerInfo,
    pub initial_train_loss: Option<f64>,
    pub final_train_loss: Option<f64>,
    pub history: Vec<EpochLog>,
}

impl TrainMeta {
    fn untrained(seed: u64) -> Self {
        let cfg = TrainConfig::default();
        Self {
            seed,
            epochs_run: 0,
            best_epoch: 0,
            best_validation_loss: None,
            stopped_early: false,
            batch_size: cfg.batch_size,
            margin: cfg.margin,
            patience: cfg.patience,
            optimizer: Adam::info(cfg.learning_rate),
            initial_train_loss: None,
            final_train_loss: None,
            history: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwinModel {
    pub arch: ArchDescriptor,
    pub weights: Weights,
    pub running: RunningStats,
    pub meta: TrainMeta,
}

fn scale_pixels(pixels: &[u8], out: &mut Vec<f64>) {
    out.extend(pixels.iter().map(|&p| f64::from(p) / 255.0));
}

impl TwinModel {
    /// Seeded, untrained model.
    pub fn new(arch: ArchDescriptor, seed: u64) -> Result<Self, TwinError> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            arch,
            weights: Weights::init(&arch, &mut rng),
            running: RunningStats::new(&arch),
            meta: TrainMeta::untrained(seed),
        })
    }

    fn check_len(&self, len: usize) -> Result<(), TwinError> {
        if len != self.arch.positions() {
            return Err(TwinError::Shape {
                expected: self.arch.positions(),
                got: len,
            });
        }
        Ok(())
    }

    /// Inference embeddings of raw 8-bit images, one row per image.
    pub fn embed_pixels(&self, images: &[&[u8]]) -> Result<Array2<f64>, TwinError> {
        let mut out = Array2::zeros((images.len(), self.arch.embedding_dim));
        let mut stats = self.running.clone();
        for (c, chunk) in images.chunks(INFER_CHUNK).enumerate() {
            let mut input = Vec::with_capacity(chunk.len() * self.arch.positions());
            for px in chunk {
                self.check_len(px.len())?;
                scale_pixels(px, &mut input);
            }
            let (emb, _) = net::forward(&self.arch, &self.weights, &mut stats, &input, net::Mode::Infer);
            let start = c * INFER_CHUNK;
            out.slice_mut(ndarray::s![start..start + chunk.len(), ..]).assign(&emb);
        }
        Ok(out)
    }

    pub fn embed(&self, image: &FingerprintImage) -> Result<Vec<f64>, TwinError> {
        Ok(self.embed_pixels(&[image.pixels()])?.row(0).to_vec())
    }

    /// Both arms in one pass.
    pub fn embed_pair(&self, left: &FingerprintImage, right: &FingerprintImage) -> Result<(Vec<f64>, Vec<f64>), TwinError> {
        let e = self.embed_pixels(&[left.pixels(), right.pixels()])?;
        Ok((e.row(0).to_vec(), e.row(1).to_vec()))
    }

    pub fn score(&self, pair: &ImagePair) -> Result<ScoreRecord, TwinError> {
        let (a, b) = self.embed_pair(&pair.left, &pair.right)?;
        Ok(ScoreRecord::new(pair, euclidean(&a, &b)))
    }

    /// Scores of many pairs, embedding every distinct image once.
    pub fn score_pairs(&self, pairs: &[ImagePair]) -> Result<Vec<ScoreRecord>, TwinError> {
        let mut slot: HashMap<&ImageKey, usize> = HashMap::new();
        let mut images: Vec<&[u8]> = Vec::new();
        for p in pairs {
            for img in [&p.left, &p.right] {
                slot.entry(&img.key).or_insert_with(|| {
                    images.push(img.pixels());
                    images.len() - 1
                });
            }
        }
        let emb = self.embed_pixels(&images)?;
        Ok(pairs
            .iter()
            .map(|p| {
                let a = emb.row(slot[&p.left.key]);
                let b = emb.row(slot[&p.right.key]);
                let d = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
                ScoreRecord::new(p, d)
            })
            .collect())
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `(1 - y) d^2 + y max(0, m - d)^2` with y = 0 for similar pairs.
pub fn contrastive_loss(d: f64, label: PairLabel, margin: f64) -> f64 {
    match label {
        PairLabel::Similar => d * d,
        PairLabel::Dissimilar => {
            let h = (margin - d).max(0.0);
            h * h
        }
    }
}

pub fn predict(score: f64) -> PairLabel {
    if score > SCORE_THRESHOLD {
        PairLabel::Dissimilar
    } else {
        PairLabel::Similar
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub left: ImageKey,
    pub right: ImageKey,
    pub label: PairLabel,
    pub split: Split,
    pub score: f64,
    pub predicted: PairLabel,
}

impl ScoreRecord {
    pub fn new(pair: &ImagePair, score: f64) -> Self {
        Self {
            left: pair.left.key.clone(),
            right: pair.right.key.clone(),
            label: pair.label,
            split: pair.split,
            score,
            predicted: predict(score),
        }
    }

    pub fn is_correct(&self) -> bool {
        self.predicted == self.label
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy_all: f64,
    /// `None` when the set holds no similar pairs.
    pub accuracy_similar_only: Option<f64>,
    pub mean_loss: f64,
    pub records: Vec<ScoreRecord>,
}

impl Evaluation {
    pub fn from_records(records: Vec<ScoreRecord>, margin: f64) -> Result<Self, TwinError> {
        if records.is_empty() {
            return Err(TwinError::EmptyPairs("evaluate"));
        }
        let n = records.len() as f64;
        let correct = records.iter().filter(|r| r.is_correct()).count() as f64;
        let similar: Vec<_> = records.iter().filter(|r| r.label == PairLabel::Similar).collect();
        let accuracy_similar_only = (!similar.is_empty())
            .then(|| similar.iter().filter(|r| r.is_correct()).count() as f64 / similar.len() as f64);
        let mean_loss = records.iter().map(|r| contrastive_loss(r.score, r.label, margin)).sum::<f64>() / n;
        Ok(Self {
            accuracy_all: correct / n,
            accuracy_similar_only,
            mean_loss,
            records,
        })
    }
}

pub fn evaluate_pairs(model: &TwinModel, pairs: &[ImagePair]) -> Result<Evaluation, TwinError> {
    if pairs.is_empty() {
        return Err(TwinError::EmptyPairs("evaluate"));
    }
    Evaluation::from_records(model.score_pairs(pairs)?, model.meta.margin)
}

#[derive(Debug, Serialize, Deserialize)]
struct ScoreRow {
    left_device: String,
    left_day: u32,
    left_window: usize,
    right_device: String,
    right_day: u32,
    right_window: usize,
    score: f64,
    label: PairLabel,
    split: Split,
}

/// Score dump with one row per pair.
pub fn write_scores_csv<W: Write>(writer: W, records: &[ScoreRecord]) -> Result<(), TwinError> {
    let mut w = csv::Writer::from_writer(writer);
    for r in records {
        w.serialize(ScoreRow {
            left_device: r.left.device_id.clone(),
            left_day: r.left.day_index,
            left_window: r.left.window_index,
            right_device: r.right.device_id.clone(),
            right_day: r.right.day_index,
            right_window: r.right.window_index,
            score: r.score,
            label: r.label,
            split: r.split,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_scores_csv<R: Read>(reader: R) -> Result<Vec<ScoreRecord>, TwinError> {
    let mut out = Vec::new();
    for row in csv::Reader::from_reader(reader).deserialize() {
        let row: ScoreRow = row?;
        if !(row.score >= 0.0) {
            return Err(TwinError::Format(format!("negative or NaN score {}", row.score)));
        }
        out.push(ScoreRecord {
            left: ImageKey::new(row.left_device, row.left_day, row.left_window),
            right: ImageKey::new(row.right_device, row.right_day, row.right_window),
            label: row.label,
            split: row.split,
            score: row.score,
            predicted: predict(row.score),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fingerprint::PIXEL_COUNT;
    use std::sync::Arc;

    fn img(seed: u8, window: usize) -> Arc<FingerprintImage> {
        let px = (0..PIXEL_COUNT).map(|i| (i as u8).wrapping_mul(seed).wrapping_add(seed)).collect();
        Arc::new(FingerprintImage::new(ImageKey::new("d", 1, window), px).unwrap())
    }

    fn pair(a: Arc<FingerprintImage>, b: Arc<FingerprintImage>, label: PairLabel) -> ImagePair {
        ImagePair { left: a, right: b, label, split: Split::Train }
    }

    #[test]
    fn loss_examples() {
        assert_eq!(contrastive_loss(0.0, PairLabel::Similar, 1.0), 0.0);
        assert_eq!(contrastive_loss(0.0, PairLabel::Dissimilar, 1.0), 1.0);
        assert_eq!(contrastive_loss(1.5, PairLabel::Dissimilar, 1.0), 0.0);
        assert_eq!(euclidean(&[0.0, 0.0], &[3.0, 4.0]), 5.0);
    }

    #[test]
    fn inference_is_deterministic_and_symmetric() {
        let m = TwinModel::new(ArchDescriptor::compact(), 3).unwrap();
        let (a, b) = (img(3, 0), img(7, 1));
        assert_eq!(m.embed(&a).unwrap(), m.embed(&a).unwrap());
        let same = FingerprintImage::new(ImageKey::new("e", 2, 5), a.pixels().to_vec()).unwrap();
        assert_eq!(m.embed(&a).unwrap(), m.embed(&same).unwrap());
        let ab = m.score(&pair(a.clone(), b.clone(), PairLabel::Similar)).unwrap().score;
        let ba = m.score(&pair(b.clone(), a.clone(), PairLabel::Similar)).unwrap().score;
        assert!(ab > 0.0 && (ab - ba).abs() <= 1e-12);
        assert_eq!(m.score(&pair(a.clone(), a, PairLabel::Similar)).unwrap().score, 0.0);
    }

    #[test]
    fn both_arms_match_single_embeddings() {
        let m = TwinModel::new(ArchDescriptor::compact(), 9).unwrap();
        let (a, b) = (img(5, 0), img(11, 1));
        let (ea, eb) = m.embed_pair(&a, &b).unwrap();
        assert_eq!(ea, m.embed(&a).unwrap());
        assert_eq!(eb, m.embed(&b).unwrap());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let m = TwinModel::new(ArchDescriptor::compact(), 0).unwrap();
        assert!(matches!(m.embed_pixels(&[&[0u8; 10]]), Err(TwinError::Shape { .. })));
    }

    fn records(scores: &[(f64, PairLabel)]) -> Vec<ScoreRecord> {
        let a = img(1, 0);
        scores
            .iter()
            .map(|&(s, l)| ScoreRecord::new(&pair(a.clone(), a.clone(), l), s))
            .collect()
    }

    #[test]
    fn accuracy_examples() {
        let all_zero = Evaluation::from_records(records(&[(0.0, PairLabel::Similar); 4]), 1.0).unwrap();
        assert_eq!(all_zero.accuracy_all, 1.0);
        let straddle = Evaluation::from_records(
            records(&[(0.4, PairLabel::Similar), (0.6, PairLabel::Similar)]),
            1.0,
        )
        .unwrap();
        assert_eq!(straddle.accuracy_all, 0.5);
        let constant = Evaluation::from_records(
            records(&[(0.49, PairLabel::Similar), (0.49, PairLabel::Dissimilar)]),
            1.0,
        )
        .unwrap();
        assert_eq!(constant.accuracy_all, 0.5);
        assert_eq!(constant.accuracy_similar_only, Some(1.0));
        assert!(Evaluation::from_records(Vec::new(), 1.0).is_err());
    }

    #[test]
    fn score_csv_round_trip() {
        let recs = records(&[(0.25, PairLabel::Similar), (0.75, PairLabel::Dissimilar)]);
        let mut buf = Vec::new();
        write_scores_csv(&mut buf, &recs).unwrap();
        assert_eq!(read_scores_csv(&buf[..]).unwrap(), recs);
    }
}
