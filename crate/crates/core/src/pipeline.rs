//! End-to-end runs, in memory or as file-producing stages.
//!
//! Directory layout under the output root:
//!
//! ```text
//! stats/<device>-dayNN.csv
//! images/<device>/dayNN/wMM.png, images/index.jsonl
//! runs/rNN/{train,validation,test_stable,test_change}.jsonl
//! runs/rNN/{model.bin, scores.csv, eval.json, drift.csv, drift.json}
//! manifest.json, runs/rNN/manifest.json
//! ```
//!
//! Captures live under a separate data root, written by the synth stage as
//! `<device>-dayNN.pcap` next to the `lab.json` describing the devices.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::capture::{parse_capture_with, CaptureError, DeviceDayCapture, DeviceSelector, LaneClassifier, ParseOptions};
use crate::drift::{accuracy_metrics, baselines_from, group_scores, AccuracyReport, DayTruth, DriftError, DriftReport};
use crate::fingerprint::{
    load_image, read_index, render_image, store_image, write_index, FingerprintImage, ImageError, ImageKey, IndexEntry,
};
use crate::flow::{compute_device_day, DeviceDayStats, StatsError};
use crate::pairing::{build_splits, read_pairs, write_pairs, ImageCorpus, PairingError, Split, SplitSet};
use crate::seed::mix;
use crate::synth::{
    generate_lab, load_lab, pcap_file_name, LabConfig, PerturbationKind, SynthError, VersionCatalog, LAB_FILE,
};
use crate::twin::{
    load_model, read_scores_csv, save_model, train, write_scores_csv, Evaluation, ScoreRecord, TrainConfig, TwinError,
    TwinModel,
};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const STATS_DIR: &str = "stats";
pub const IMAGES_DIR: &str = "images";
pub const RUNS_DIR: &str = "runs";
pub const MODEL_FILE: &str = "model.bin";
pub const SCORES_FILE: &str = "scores.csv";
pub const EVAL_FILE: &str = "eval.json";
pub const DRIFT_CSV: &str = "drift.csv";
pub const DRIFT_JSON: &str = "drift.json";
pub const CATALOG_FILE: &str = "catalog.json";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("missing artifact `{}`", .0.display())]
    MissingArtifact(PathBuf),
    #[error("config: {0}")]
    Config(String),
    #[error("{}: {msg}", path.display())]
    Json { path: PathBuf, msg: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Capture {
        path: PathBuf,
        #[source]
        source: CaptureError,
    },
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Pairing(#[from] PairingError),
    #[error(transparent)]
    Twin(#[from] TwinError),
    #[error(transparent)]
    Drift(#[from] DriftError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

impl PipelineError {
    pub fn is_divergence(&self) -> bool {
        matches!(self, PipelineError::Twin(TwinError::Divergence { .. }))
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Every tunable of a run. CLI flags override the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Base seed for pairing and model initialization.
    pub seed: u64,
    /// Seed of the synthetic traffic; fixed across runs.
    pub synth_seed: u64,
    pub runs: usize,
    /// Lab description; the shipped twelve-device lab when absent.
    pub lab: Option<PathBuf>,
    pub classifier: LaneClassifier,
    /// `seed` inside is replaced by the per-run model seed.
    pub train: TrainConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            synth_seed: 2024,
            runs: 1,
            lab: None,
            classifier: LaneClassifier::default(),
            train: TrainConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| PipelineError::Json {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.runs == 0 {
            return Err(PipelineError::Config("runs must be at least 1".into()));
        }
        self.train.validate()?;
        Ok(())
    }

    pub fn lab(&self) -> Result<LabConfig, PipelineError> {
        Ok(match &self.lab {
            Some(path) => load_lab(path)?,
            None => crate::synth::default_lab(),
        })
    }

    pub fn run_seeds(&self, run: usize) -> RunSeeds {
        RunSeeds::new(self.seed, run)
    }

    pub fn train_config(&self, seeds: &RunSeeds) -> TrainConfig {
        TrainConfig {
            seed: seeds.model,
            ..self.train
        }
    }
}

/// Seeds of one run, derived from the base seed and the 1-based run number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSeeds {
    pub run: usize,
    pub pairing: u64,
    pub model: u64,
}

impl RunSeeds {
    pub fn new(base: u64, run: usize) -> Self {
        let r = run as u64;
        Self {
            run,
            pairing: mix(base, 2 * r),
            model: mix(base, 2 * r + 1),
        }
    }
}

// ---------------------------------------------------------------------------
// in-memory pipeline

/// All 30 window images of a device-day, degenerate ones included.
pub fn device_day_images(capture: &DeviceDayCapture) -> Vec<FingerprintImage> {
    let stats = compute_device_day(capture);
    images_from_stats(&stats)
}

fn images_from_stats(stats: &DeviceDayStats) -> Vec<FingerprintImage> {
    stats
        .per_window
        .iter()
        .enumerate()
        .map(|(w, lanes)| render_image(lanes, ImageKey::new(stats.device_id.clone(), stats.day_index, w)))
        .collect()
}

/// Synthesizes every device-day of the lab straight into a corpus.
pub fn lab_corpus(lab: &LabConfig, synth_seed: u64) -> Result<ImageCorpus, PipelineError> {
    let mut corpus = ImageCorpus::new();
    for id in lab.device_ids() {
        for day in 1..=lab.days {
            let synth = lab.synth_device_day(&id, day, synth_seed)?;
            for image in device_day_images(&synth.capture) {
                corpus.insert(image);
            }
        }
    }
    Ok(corpus)
}

/// Accuracy of the model on a training-style split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAccuracy {
    pub pairs: usize,
    pub accuracy_all: f64,
    pub accuracy_similar_only: Option<f64>,
    pub mean_loss: f64,
}

impl SplitAccuracy {
    fn of(records: &[ScoreRecord], split: Split, margin: f64) -> Result<Self, PipelineError> {
        let subset: Vec<ScoreRecord> = records.iter().filter(|r| r.split == split).cloned().collect();
        let e = Evaluation::from_records(subset, margin)?;
        Ok(Self {
            pairs: e.records.len(),
            accuracy_all: e.accuracy_all,
            accuracy_similar_only: e.accuracy_similar_only,
            mean_loss: e.mean_loss,
        })
    }
}

/// What one run concluded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub seeds: RunSeeds,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub training: SplitAccuracy,
    pub validation: SplitAccuracy,
    /// Stable-version days of every device.
    pub stable: AccuracyReport,
    /// Updated devices whose change shows on the wire.
    pub change: Option<AccuracyReport>,
    /// Every updated device, invisible updates included.
    pub change_all: Option<AccuracyReport>,
}

/// Devices whose update should be detectable from traffic.
pub fn wire_visible(catalog: &VersionCatalog) -> BTreeSet<String> {
    catalog.devices_with(&[PerturbationKind::Subtle, PerturbationKind::Large])
}

fn truth_map(records: &[ScoreRecord]) -> BTreeMap<(String, u32), DayTruth> {
    let mut truth = BTreeMap::new();
    for r in records {
        let t = match r.split {
            Split::TestStable => DayTruth::Stable,
            Split::TestChange => DayTruth::Changed,
            _ => continue,
        };
        truth.insert((r.left.device_id.clone(), r.right.day_index), t);
    }
    truth
}

/// Turns a run's scores into accuracy tables and per-day drift verdicts.
pub fn assess(
    records: &[ScoreRecord],
    catalog: &VersionCatalog,
    seeds: RunSeeds,
    model: &TwinModel,
) -> Result<(RunOutcome, DriftReport), PipelineError> {
    let margin = model.meta.margin;
    let baselines = baselines_from(records)?;
    let truth = truth_map(records);
    let seed = seeds.pairing;

    let stable_days = group_scores(records, Split::TestStable)?;
    let (stable, stable_drift) = accuracy_metrics(&stable_days, &truth, &baselines, Split::TestStable, seed)?;

    let change_days = group_scores(records, Split::TestChange)?;
    let visible = wire_visible(catalog);
    let visible_days: Vec<_> = change_days
        .iter()
        .filter(|d| visible.contains(&d.device_id))
        .cloned()
        .collect();
    let change = if visible_days.is_empty() {
        None
    } else {
        Some(accuracy_metrics(&visible_days, &truth, &baselines, Split::TestChange, seed)?.0)
    };
    let (change_all, change_drift) = if change_days.is_empty() {
        (None, Vec::new())
    } else {
        let (r, d) = accuracy_metrics(&change_days, &truth, &baselines, Split::TestChange, seed)?;
        (Some(r), d)
    };

    let outcome = RunOutcome {
        seeds,
        epochs_run: model.meta.epochs_run,
        best_epoch: model.meta.best_epoch,
        training: SplitAccuracy::of(records, Split::Train, margin)?,
        validation: SplitAccuracy::of(records, Split::Validation, margin)?,
        stable,
        change,
        change_all,
    };
    let days = stable_drift.into_iter().chain(change_drift).collect();
    Ok((outcome, DriftReport::new(seed, &baselines, days)))
}

/// Everything an in-memory run produces.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub splits: SplitSet,
    pub model: TwinModel,
    pub records: Vec<ScoreRecord>,
    pub outcome: RunOutcome,
    pub drift: DriftReport,
}

fn all_pairs(splits: &SplitSet) -> Vec<crate::pairing::ImagePair> {
    splits.iter().flat_map(|s| s.pairs.iter().cloned()).collect()
}

/// Pair, train, score and assess one run over a ready corpus.
pub fn run_experiment(
    corpus: &ImageCorpus,
    catalog: &VersionCatalog,
    seeds: RunSeeds,
    train_config: &TrainConfig,
) -> Result<Experiment, PipelineError> {
    let changed = catalog.changed_devices();
    let splits = build_splits(corpus, seeds.pairing, Some(&changed))?;
    let cfg = TrainConfig {
        seed: seeds.model,
        ..*train_config
    };
    let model = train(&cfg, &splits.train.pairs, &splits.validation.pairs)?;
    let records = model.score_pairs(&all_pairs(&splits))?;
    let (outcome, drift) = assess(&records, catalog, seeds, &model)?;
    Ok(Experiment {
        splits,
        model,
        records,
        outcome,
        drift,
    })
}

// ---------------------------------------------------------------------------
// file stages

/// One file a stage wrote, relative to the output root.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub stage: String,
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub started_unix: u64,
    pub finished_unix: u64,
}

/// Record of a run: its seeds, configuration, artifacts and stage times.
/// Shared stages live in a manifest with run id `shared` and no seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub run_id: String,
    pub seeds: Option<RunSeeds>,
    pub config: PipelineConfig,
    pub data_root: PathBuf,
    pub artifacts: Vec<Artifact>,
    pub stages: Vec<StageRecord>,
}

impl RunManifest {
    fn new(run_id: String, seeds: Option<RunSeeds>, config: &PipelineConfig, data_root: &Path) -> Self {
        Self {
            schema_version: MANIFEST_SCHEMA_VERSION,
            run_id,
            seeds,
            config: config.clone(),
            data_root: data_root.to_path_buf(),
            artifacts: Vec::new(),
            stages: Vec::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Json {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }

    pub fn artifact(&self, rel: &Path) -> Option<&Artifact> {
        self.artifacts.iter().find(|a| a.path == rel)
    }

    pub fn has_stage(&self, stage: &str) -> bool {
        self.stages.iter().any(|s| s.stage == stage)
    }
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, PipelineError> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(PipelineError::MissingArtifact(path.to_path_buf()))
        }
        Err(e) => return Err(io_err(path)(e)),
    };
    serde_json::from_str(&text).map_err(|e| PipelineError::Json {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

fn require(path: &Path) -> Result<(), PipelineError> {
    if path.exists() {
        Ok(())
    } else {
        Err(PipelineError::MissingArtifact(path.to_path_buf()))
    }
}

/// Parses `<device>-dayNN.<ext>`.
pub fn parse_day_file(name: &str, ext: &str) -> Option<(String, u32)> {
    let stem = name.strip_suffix(ext)?.strip_suffix('.')?;
    let (device, day) = stem.rsplit_once("-day")?;
    if device.is_empty() || day.len() < 2 || !day.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    Some((device.to_string(), day.parse().ok()?))
}

fn sorted_dir(dir: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()
        .map_err(io_err(dir))?;
    out.sort();
    Ok(out)
}

/// A pipeline rooted at an output directory.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub config: PipelineConfig,
    pub data_root: PathBuf,
    pub out: PathBuf,
}

impl Workspace {
    pub fn new(config: PipelineConfig, data_root: impl Into<PathBuf>, out: impl Into<PathBuf>) -> Self {
        Self {
            config,
            data_root: data_root.into(),
            out: out.into(),
        }
    }

    pub fn stats_dir(&self) -> PathBuf {
        self.out.join(STATS_DIR)
    }

    pub fn images_dir(&self) -> PathBuf {
        self.out.join(IMAGES_DIR)
    }

    pub fn run_dir(&self, run: usize) -> PathBuf {
        self.out.join(RUNS_DIR).join(format!("r{run:02}"))
    }

    pub fn split_file(&self, run: usize, split: Split) -> PathBuf {
        self.run_dir(run).join(format!("{}.jsonl", split.name()))
    }

    fn manifest_path(&self, run: Option<usize>) -> PathBuf {
        match run {
            Some(r) => self.run_dir(r).join(MANIFEST_FILE),
            None => self.out.join(MANIFEST_FILE),
        }
    }

    /// Loads the manifest, refusing one written under a different
    /// configuration. The run count may differ.
    fn open_manifest(&self, run: Option<usize>) -> Result<RunManifest, PipelineError> {
        let path = self.manifest_path(run);
        let seeds = run.map(|r| self.config.run_seeds(r));
        if !path.exists() {
            let id = run.map_or_else(|| "shared".to_string(), |r| format!("r{r:02}"));
            return Ok(RunManifest::new(id, seeds, &self.config, &self.data_root));
        }
        let m = RunManifest::load(&path)?;
        let comparable = |c: &PipelineConfig| PipelineConfig { runs: 1, ..c.clone() };
        if comparable(&m.config) != comparable(&self.config) || m.seeds != seeds {
            return Err(PipelineError::Config(format!(
                "{} was written with a different configuration; use a fresh --out or the same config",
                path.display()
            )));
        }
        Ok(m)
    }

    fn record(&self, run: Option<usize>, stage: &str, started: u64, files: &[PathBuf]) -> Result<(), PipelineError> {
        let mut m = self.open_manifest(run)?;
        m.config.runs = self.config.runs;
        m.artifacts.retain(|a| a.stage != stage);
        for f in files {
            let bytes = fs::read(f).map_err(io_err(f))?;
            let rel = f.strip_prefix(&self.out).unwrap_or(f).to_path_buf();
            m.artifacts.push(Artifact {
                stage: stage.to_string(),
                path: rel,
                sha256: sha256_hex(&bytes),
            });
        }
        m.stages.retain(|s| s.stage != stage);
        m.stages.push(StageRecord {
            stage: stage.to_string(),
            started_unix: started,
            finished_unix: now_unix(),
        });
        write_json(&self.manifest_path(run), &m)
    }

    fn lab_in_data_root(&self) -> Result<LabConfig, PipelineError> {
        let path = self.data_root.join(LAB_FILE);
        require(&path)?;
        Ok(load_lab(&path)?)
    }

    /// Writes the synthetic lab's captures to the data root.
    pub fn synth(&self) -> Result<Vec<PathBuf>, PipelineError> {
        let started = now_unix();
        self.open_manifest(None)?;
        let lab = self.config.lab()?;
        info!("synthesizing {} devices x {} days", lab.devices.len(), lab.days);
        let summary = generate_lab(&lab, self.config.synth_seed, &self.data_root)?;
        let files: Vec<PathBuf> = summary.files.clone();
        let in_out: Vec<PathBuf> = files.iter().filter(|f| f.starts_with(&self.out)).cloned().collect();
        self.record(None, "synth", started, &in_out)?;
        Ok(files)
    }

    /// Parses every `<device>-dayNN.pcap` of the lab's devices into flow
    /// statistics.
    pub fn extract(&self) -> Result<Vec<PathBuf>, PipelineError> {
        let started = now_unix();
        self.open_manifest(None)?;
        let lab = self.lab_in_data_root()?;
        let mut written = Vec::new();
        let macs: BTreeMap<String, [u8; 6]> = lab
            .devices
            .iter()
            .map(|d| (d.profile.device_id.clone(), d.profile.mac.0))
            .collect();
        for path in sorted_dir(&self.data_root)? {
            let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
            let Some((device, day)) = parse_day_file(name, "pcap") else { continue };
            let Some(mac) = macs.get(&device) else {
                warn!("skipping {name}: device `{device}` is not in {LAB_FILE}");
                continue;
            };
            let bytes = fs::read(&path).map_err(io_err(&path))?;
            let opts = ParseOptions {
                device_id: Some(device.clone()),
                day_index: Some(day),
                day_start: None,
                classifier: self.config.classifier,
            };
            let capture = parse_capture_with(&bytes, &DeviceSelector::Mac(*mac), &opts).map_err(|source| {
                PipelineError::Capture {
                    path: path.clone(),
                    source,
                }
            })?;
            let stats = compute_device_day(&capture);
            let mut buf = Vec::new();
            stats.write_csv(&mut buf)?;
            let out = self.stats_dir().join(name.replace(".pcap", ".csv"));
            write_atomic(&out, &buf)?;
            written.push(out);
        }
        if written.is_empty() {
            return Err(PipelineError::MissingArtifact(self.data_root.join(pcap_file_name("<device>", 1))));
        }
        let catalog = self.out.join(CATALOG_FILE);
        write_json(&catalog, &lab.catalog())?;
        written.push(catalog);
        self.record(None, "extract", started, &written)?;
        Ok(written)
    }

    /// Renders every statistics file into window images plus the index.
    pub fn imagize(&self) -> Result<Vec<PathBuf>, PipelineError> {
        let started = now_unix();
        self.open_manifest(None)?;
        let stats_dir = self.stats_dir();
        require(&stats_dir)?;
        let root = self.images_dir();
        let mut entries = Vec::new();
        let mut written = Vec::new();
        for path in sorted_dir(&stats_dir)? {
            let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
            let Some((device, day)) = parse_day_file(name, "csv") else { continue };
            let f = fs::File::open(&path).map_err(io_err(&path))?;
            let stats = DeviceDayStats::read_csv(BufReader::new(f), &device, day)?;
            for image in images_from_stats(&stats) {
                written.push(store_image(&root, &image)?);
                entries.push(IndexEntry::for_image(&image));
            }
        }
        if entries.is_empty() {
            return Err(PipelineError::MissingArtifact(stats_dir.join("<device>-day01.csv")));
        }
        write_index(&root, &entries)?;
        written.push(root.join(crate::fingerprint::INDEX_FILE));
        self.record(None, "imagize", started, &written)?;
        Ok(written)
    }

    /// Loads the non-degenerate images listed in the index.
    pub fn load_corpus(&self) -> Result<ImageCorpus, PipelineError> {
        let root = self.images_dir();
        require(&root.join(crate::fingerprint::INDEX_FILE))?;
        let mut corpus = ImageCorpus::new();
        for entry in read_index(&root)? {
            if entry.degenerate {
                continue;
            }
            let path = root.join(&entry.path);
            require(&path)?;
            let image = load_image(&path)?;
            if image.key != entry.key() {
                return Err(ImageError::Index(format!("{} does not match its index entry", path.display())).into());
            }
            corpus.insert(image);
        }
        Ok(corpus)
    }

    pub fn catalog(&self) -> Result<VersionCatalog, PipelineError> {
        read_json(&self.out.join(CATALOG_FILE))
    }

    /// Writes the four pair files of one run.
    pub fn pair(&self, run: usize) -> Result<Vec<PathBuf>, PipelineError> {
        let started = now_unix();
        self.open_manifest(Some(run))?;
        let corpus = self.load_corpus()?;
        let catalog = self.catalog()?;
        let seeds = self.config.run_seeds(run);
        let splits = build_splits(&corpus, seeds.pairing, Some(&catalog.changed_devices()))?;
        let mut written = Vec::new();
        for set in splits.iter() {
            let mut buf = Vec::new();
            write_pairs(&mut buf, &set.pairs)?;
            let path = self.split_file(run, set.split);
            write_atomic(&path, &buf)?;
            written.push(path);
        }
        self.record(Some(run), "pair", started, &written)?;
        Ok(written)
    }

    fn load_split(&self, run: usize, split: Split, corpus: &ImageCorpus) -> Result<Vec<crate::pairing::ImagePair>, PipelineError> {
        let path = self.split_file(run, split);
        require(&path)?;
        let f = fs::File::open(&path).map_err(io_err(&path))?;
        Ok(read_pairs(BufReader::new(f), |k| corpus.get(k))?)
    }

    pub fn train(&self, run: usize) -> Result<PathBuf, PipelineError> {
        let started = now_unix();
        self.open_manifest(Some(run))?;
        let corpus = self.load_corpus()?;
        let train_pairs = self.load_split(run, Split::Train, &corpus)?;
        let val_pairs = self.load_split(run, Split::Validation, &corpus)?;
        let cfg = self.config.train_config(&self.config.run_seeds(run));
        info!("run {run}: training on {} pairs, validating on {}", train_pairs.len(), val_pairs.len());
        let model = train(&cfg, &train_pairs, &val_pairs)?;
        let path = self.run_dir(run).join(MODEL_FILE);
        fs::create_dir_all(self.run_dir(run)).map_err(io_err(&self.run_dir(run)))?;
        save_model(&model, &path)?;
        self.record(Some(run), "train", started, std::slice::from_ref(&path))?;
        Ok(path)
    }

    /// Scores every pair of the run and writes the accuracy tables.
    pub fn eval(&self, run: usize) -> Result<RunOutcome, PipelineError> {
        let started = now_unix();
        self.open_manifest(Some(run))?;
        let model_path = self.run_dir(run).join(MODEL_FILE);
        require(&model_path)?;
        let model = load_model(&model_path, Some(&self.config.train.arch))?;
        let corpus = self.load_corpus()?;
        let mut pairs = Vec::new();
        for split in [Split::Train, Split::Validation, Split::TestStable, Split::TestChange] {
            pairs.extend(self.load_split(run, split, &corpus)?);
        }
        let records = model.score_pairs(&pairs)?;
        let mut buf = Vec::new();
        write_scores_csv(&mut buf, &records)?;
        let scores = self.run_dir(run).join(SCORES_FILE);
        write_atomic(&scores, &buf)?;
        let (outcome, _) = assess(&records, &self.catalog()?, self.config.run_seeds(run), &model)?;
        let eval = self.run_dir(run).join(EVAL_FILE);
        write_json(&eval, &outcome)?;
        self.record(Some(run), "eval", started, &[scores, eval])?;
        Ok(outcome)
    }

    /// Per device-day change verdicts from the run's scores.
    pub fn detect(&self, run: usize) -> Result<DriftReport, PipelineError> {
        let started = now_unix();
        self.open_manifest(Some(run))?;
        let scores = self.run_dir(run).join(SCORES_FILE);
        require(&scores)?;
        let model = load_model(&self.run_dir(run).join(MODEL_FILE), Some(&self.config.train.arch))?;
        let f = fs::File::open(&scores).map_err(io_err(&scores))?;
        let records = read_scores_csv(BufReader::new(f))?;
        let (_, drift) = assess(&records, &self.catalog()?, self.config.run_seeds(run), &model)?;
        let csv_path = self.run_dir(run).join(DRIFT_CSV);
        let mut buf = Vec::new();
        drift.write_csv(&mut buf)?;
        write_atomic(&csv_path, &buf)?;
        let json_path = self.run_dir(run).join(DRIFT_JSON);
        write_json(&json_path, &drift)?;
        self.record(Some(run), "detect", started, &[csv_path, json_path])?;
        Ok(drift)
    }

    pub fn load_outcome(&self, run: usize) -> Result<RunOutcome, PipelineError> {
        read_json(&self.run_dir(run).join(EVAL_FILE))
    }

    pub fn load_drift(&self, run: usize) -> Result<DriftReport, PipelineError> {
        read_json(&self.run_dir(run).join(DRIFT_JSON))
    }

    /// Writes `report.txt` and `report.json` over runs 1..=runs.
    pub fn report(&self) -> Result<crate::report::PipelineReport, PipelineError> {
        let started = now_unix();
        self.open_manifest(None)?;
        let mut outcomes = Vec::new();
        let mut drifts = Vec::new();
        for run in 1..=self.config.runs {
            outcomes.push(self.load_outcome(run)?);
            drifts.push(self.load_drift(run)?);
        }
        let report = crate::report::PipelineReport::new(outcomes, drifts);
        let txt = self.out.join(crate::report::REPORT_TXT);
        write_atomic(&txt, report.render().as_bytes())?;
        let json = self.out.join(crate::report::REPORT_JSON);
        write_json(&json, &report)?;
        self.record(None, "report", started, &[txt, json])?;
        Ok(report)
    }

    /// Every stage in order for every run.
    pub fn run_all(&self) -> Result<crate::report::PipelineReport, PipelineError> {
        self.synth()?;
        self.extract()?;
        self.imagize()?;
        for run in 1..=self.config.runs {
            self.pair(run)?;
            self.train(run)?;
            self.eval(run)?;
            self.detect(run)?;
        }
        self.report()
    }
}
