//! Labeled image pairs for training, validation and the two experiments.
//!
//! Day 1 is always the anchor. Similar pairs are the full cross product of
//! a device's day-1 images with its images on the target day; dissimilar
//! training pairs pair each anchor image with a random image of a random
//! other device on the same target day, as many as there are similar pairs.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::PathBuf;
use std::sync::Arc;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fingerprint::{FingerprintImage, ImageKey};
use crate::seed::{mix, stable_hash};

pub const ANCHOR_DAY: u32 = 1;
pub const TRAIN_DAY: u32 = 2;
pub const VALIDATION_DAY: u32 = 3;
pub const STABLE_DAYS: [u32; 4] = [4, 5, 6, 7];
pub const CHANGE_DAYS: [u32; 4] = [8, 9, 10, 11];
/// 30 windows x 30 windows.
pub const MAX_SIMILAR_PER_DEVICE_DAY: usize = 900;

#[derive(Debug, Error)]
pub enum PairingError {
    #[error("no images of any other device available for negatives of `{0}`")]
    EmptyPool(String),
    #[error("pair file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("pair file references unknown image {0:?}")]
    UnknownImage(ImageKey),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PairLabel {
    Similar = 0,
    Dissimilar = 1,
}

impl PairLabel {
    pub fn as_f64(self) -> f64 {
        match self {
            PairLabel::Similar => 0.0,
            PairLabel::Dissimilar => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Split {
    Train,
    Validation,
    TestStable,
    TestChange,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Validation => 2,
            Split::TestStable => 3,
            Split::TestChange => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::TestStable => "test_stable",
            Split::TestChange => "test_change",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImagePair {
    pub left: Arc<FingerprintImage>,
    pub right: Arc<FingerprintImage>,
    pub label: PairLabel,
    pub split: Split,
}

impl ImagePair {
    pub fn provenance(&self) -> (&ImageKey, &ImageKey) {
        (&self.left.key, &self.right.key)
    }
}

/// Similar / dissimilar counts for one (device, target day).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairCounts {
    pub similar: usize,
    pub dissimilar: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairSet {
    pub split: Split,
    pub seed: u64,
    pub pairs: Vec<ImagePair>,
    /// Keyed by (anchor device, target day).
    pub counts: BTreeMap<(String, u32), PairCounts>,
}

impl PairSet {
    fn new(split: Split, seed: u64) -> Self {
        Self {
            split,
            seed,
            pairs: Vec::new(),
            counts: BTreeMap::new(),
        }
    }

    fn push_all(&mut self, pairs: Vec<ImagePair>) {
        for p in pairs {
            let c = self
                .counts
                .entry((p.left.key.device_id.clone(), p.right.key.day_index))
                .or_default();
            match p.label {
                PairLabel::Similar => c.similar += 1,
                PairLabel::Dissimilar => c.dissimilar += 1,
            }
            self.pairs.push(p);
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn count_label(&self, label: PairLabel) -> usize {
        self.pairs.iter().filter(|p| p.label == label).count()
    }
}

/// Non-degenerate images grouped by device and day, windows in order.
#[derive(Debug, Clone, Default)]
pub struct ImageCorpus {
    devices: BTreeMap<String, BTreeMap<u32, Vec<Arc<FingerprintImage>>>>,
}

impl ImageCorpus {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds the image unless it is degenerate. Returns whether it was kept.
    pub fn insert(&mut self, image: FingerprintImage) -> bool {
        if image.is_degenerate() {
            return false;
        }
        let day = self
            .devices
            .entry(image.key.device_id.clone())
            .or_default()
            .entry(image.key.day_index)
            .or_default();
        let pos = day.partition_point(|i| i.key.window_index < image.key.window_index);
        day.insert(pos, Arc::new(image));
        true
    }

    pub fn devices(&self) -> impl Iterator<Item = &str> {
        self.devices.keys().map(String::as_str)
    }

    pub fn day(&self, device: &str, day: u32) -> &[Arc<FingerprintImage>] {
        self.devices
            .get(device)
            .and_then(|d| d.get(&day))
            .map_or(&[], Vec::as_slice)
    }

    pub fn get(&self, key: &ImageKey) -> Option<Arc<FingerprintImage>> {
        self.day(&key.device_id, key.day_index)
            .iter()
            .find(|i| i.key.window_index == key.window_index)
            .cloned()
    }

    pub fn image_count(&self) -> usize {
        self.devices.values().flat_map(|d| d.values()).map(Vec::len).sum()
    }
}

/// Every anchor image paired with every target image.
pub fn gen_similar_pairs(
    anchor: &[Arc<FingerprintImage>],
    target: &[Arc<FingerprintImage>],
    split: Split,
) -> Vec<ImagePair> {
    if anchor.is_empty() || target.is_empty() {
        warn!("no similar pairs: anchor has {} images, target has {}", anchor.len(), target.len());
        return Vec::new();
    }
    anchor
        .iter()
        .flat_map(|a| {
            target.iter().map(move |t| ImagePair {
                left: Arc::clone(a),
                right: Arc::clone(t),
                label: PairLabel::Similar,
                split,
            })
        })
        .collect()
}

/// `n` negatives for `anchor`. For each pair a foreign device is drawn
/// uniformly from `pool`, then one of its images uniformly (with replacement).
/// Anchor images are used round-robin.
pub fn gen_dissimilar_pairs<R: Rng>(
    anchor: &[Arc<FingerprintImage>],
    pool: &[(&str, &[Arc<FingerprintImage>])],
    n: usize,
    rng: &mut R,
    split: Split,
) -> Result<Vec<ImagePair>, PairingError> {
    if n == 0 || anchor.is_empty() {
        return Ok(Vec::new());
    }
    let anchor_device = &anchor[0].key.device_id;
    let candidates: Vec<&[Arc<FingerprintImage>]> = pool
        .iter()
        .filter(|(dev, imgs)| *dev != anchor_device.as_str() && !imgs.is_empty())
        .map(|(_, imgs)| *imgs)
        .collect();
    if candidates.is_empty() {
        return Err(PairingError::EmptyPool(anchor_device.clone()));
    }
    Ok((0..n)
        .map(|i| {
            let device_images = candidates[rng.random_range(0..candidates.len())];
            let other = &device_images[rng.random_range(0..device_images.len())];
            ImagePair {
                left: Arc::clone(&anchor[i % anchor.len()]),
                right: Arc::clone(other),
                label: PairLabel::Dissimilar,
                split,
            }
        })
        .collect())
}

/// Seed of one device's negative sampler for one split.
pub fn device_seed(seed: u64, device: &str, split: Split) -> u64 {
    mix(seed ^ stable_hash(device), split.tag())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitSet {
    pub train: PairSet,
    pub validation: PairSet,
    pub test_stable: PairSet,
    pub test_change: PairSet,
}

impl SplitSet {
    pub fn iter(&self) -> impl Iterator<Item = &PairSet> {
        [&self.train, &self.validation, &self.test_stable, &self.test_change].into_iter()
    }
}

fn balanced_split(corpus: &ImageCorpus, target_day: u32, split: Split, seed: u64) -> Result<PairSet, PairingError> {
    let mut set = PairSet::new(split, seed);
    let pool: Vec<(&str, &[Arc<FingerprintImage>])> =
        corpus.devices().map(|d| (d, corpus.day(d, target_day))).collect();
    for device in corpus.devices() {
        let anchor = corpus.day(device, ANCHOR_DAY);
        let target = corpus.day(device, target_day);
        if anchor.is_empty() || target.is_empty() {
            warn!("device `{device}` excluded from {}: missing day {ANCHOR_DAY} or {target_day}", split.name());
            continue;
        }
        let similar = gen_similar_pairs(anchor, target, split);
        let mut rng = ChaCha8Rng::seed_from_u64(device_seed(seed, device, split));
        let dissimilar = gen_dissimilar_pairs(anchor, &pool, similar.len(), &mut rng, split)?;
        set.push_all(similar);
        set.push_all(dissimilar);
    }
    Ok(set)
}

fn test_split(
    corpus: &ImageCorpus,
    days: &[u32],
    split: Split,
    label: PairLabel,
    seed: u64,
    devices: &mut dyn Iterator<Item = &str>,
) -> PairSet {
    let mut set = PairSet::new(split, seed);
    for device in devices {
        let anchor = corpus.day(device, ANCHOR_DAY);
        if anchor.is_empty() {
            warn!("device `{device}` excluded from {}: no day {ANCHOR_DAY} images", split.name());
            continue;
        }
        for &day in days {
            let target = corpus.day(device, day);
            if target.is_empty() {
                warn!("device `{device}` has no images on day {day} for {}", split.name());
                continue;
            }
            let mut pairs = gen_similar_pairs(anchor, target, split);
            for p in &mut pairs {
                p.label = label;
            }
            set.push_all(pairs);
        }
    }
    set
}

/// Build all four splits. `changed_devices` lists the devices whose days
/// 8-11 run a new version; `None` treats every device as changed.
pub fn build_splits(
    corpus: &ImageCorpus,
    seed: u64,
    changed_devices: Option<&BTreeSet<String>>,
) -> Result<SplitSet, PairingError> {
    let train = balanced_split(corpus, TRAIN_DAY, Split::Train, seed)?;
    let validation = balanced_split(corpus, VALIDATION_DAY, Split::Validation, seed)?;
    let test_stable = test_split(
        corpus,
        &STABLE_DAYS,
        Split::TestStable,
        PairLabel::Similar,
        seed,
        &mut corpus.devices(),
    );
    let mut changed = corpus
        .devices()
        .filter(|d| changed_devices.is_none_or(|set| set.contains(*d)));
    let test_change = test_split(
        corpus,
        &CHANGE_DAYS,
        Split::TestChange,
        PairLabel::Dissimilar,
        seed,
        &mut changed,
    );
    Ok(SplitSet {
        train,
        validation,
        test_stable,
        test_change,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct PairLine {
    left_path: PathBuf,
    right_path: PathBuf,
    label: PairLabel,
    split: Split,
    provenance: Provenance,
}

#[derive(Debug, Serialize, Deserialize)]
struct Provenance {
    left: ImageKey,
    right: ImageKey,
}

/// One JSON object per line: paths relative to the image root, label,
/// split and full provenance.
pub fn write_pairs<W: Write>(mut writer: W, pairs: &[ImagePair]) -> Result<(), PairingError> {
    for p in pairs {
        let line = PairLine {
            left_path: p.left.key.relative_path(),
            right_path: p.right.key.relative_path(),
            label: p.label,
            split: p.split,
            provenance: Provenance {
                left: p.left.key.clone(),
                right: p.right.key.clone(),
            },
        };
        let json = serde_json::to_string(&line).expect("pair line serializes");
        writeln!(writer, "{json}")?;
    }
    Ok(())
}

/// Parse a pair file, resolving images through `resolve`.
pub fn read_pairs<R, F>(reader: R, mut resolve: F) -> Result<Vec<ImagePair>, PairingError>
where
    R: BufRead,
    F: FnMut(&ImageKey) -> Option<Arc<FingerprintImage>>,
{
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: PairLine = serde_json::from_str(&line).map_err(|e| PairingError::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if parsed.left_path != parsed.provenance.left.relative_path()
            || parsed.right_path != parsed.provenance.right.relative_path()
        {
            return Err(PairingError::Parse {
                line: i + 1,
                msg: "path does not match provenance".into(),
            });
        }
        let left = resolve(&parsed.provenance.left)
            .ok_or_else(|| PairingError::UnknownImage(parsed.provenance.left.clone()))?;
        let right = resolve(&parsed.provenance.right)
            .ok_or_else(|| PairingError::UnknownImage(parsed.provenance.right.clone()))?;
        out.push(ImagePair {
            left,
            right,
            label: parsed.label,
            split: parsed.split,
        });
    }
    Ok(out)
}
