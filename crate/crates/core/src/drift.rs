//! Effect sizes over score distributions and the drift verdict.
//!
//! A day is compared against the device's baseline, the scores of its
//! day-1 x day-2 similar pairs. Hedges' g is taken with the candidate day as
//! group 1, so growing dissimilarity gives a positive g, and a day is
//! flagged as changed when g exceeds 0.5.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pairing::{PairLabel, Split};
use crate::twin::{ScoreRecord, SCORE_THRESHOLD};

/// g above this flags a version change.
pub const CHANGE_THRESHOLD: f64 = 0.5;
/// Stand-in for an infinite g when both groups have zero spread.
pub const DEGENERATE_SENTINEL: f64 = 1e9;
pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DriftError {
    #[error("group {group} has {n} scores, at least 2 are needed")]
    TooFewScores { group: u8, n: usize },
    #[error("score {0} is negative or not finite")]
    BadScore(f64),
    #[error("no baseline for device `{0}`")]
    MissingBaseline(String),
    #[error("no ground truth for device `{0}` day {1}")]
    MissingTruth(String, u32),
    #[error("no scored days")]
    NoDays,
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EffectLabel {
    VerySmall,
    Small,
    Medium,
    Large,
    VeryLarge,
}

impl EffectLabel {
    /// Bins with edges halfway between the anchors 0.01, 0.2, 0.5, 0.8, 1.2.
    pub fn from_g(g: f64) -> Self {
        let a = g.abs();
        if a < 0.105 {
            Self::VerySmall
        } else if a < 0.35 {
            Self::Small
        } else if a < 0.65 {
            Self::Medium
        } else if a < 1.0 {
            Self::Large
        } else {
            Self::VeryLarge
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HedgesResult {
    pub g: f64,
    pub group1_n: usize,
    pub group2_n: usize,
    pub group1_mean: f64,
    pub group2_mean: f64,
    pub pooled_sd: f64,
    pub j: f64,
    pub effect_label: EffectLabel,
    pub degenerate: bool,
}

fn mean_and_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let ss = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>();
    (mean, ss / (n - 1.0))
}

/// Small-sample correction factor.
pub fn bias_correction(n1: usize, n2: usize) -> f64 {
    1.0 - 3.0 / (4.0 * (n1 + n2) as f64 - 9.0)
}

/// Standardized, bias-corrected mean difference of `group1` over `group2`.
pub fn hedges_g(group1: &[f64], group2: &[f64]) -> Result<HedgesResult, DriftError> {
    for (group, xs) in [(1u8, group1), (2, group2)] {
        if xs.len() < 2 {
            return Err(DriftError::TooFewScores { group, n: xs.len() });
        }
        if let Some(&bad) = xs.iter().find(|x| !x.is_finite()) {
            return Err(DriftError::BadScore(bad));
        }
    }
    let (n1, n2) = (group1.len(), group2.len());
    let (m1, v1) = mean_and_var(group1);
    let (m2, v2) = mean_and_var(group2);
    let pooled_sd = (((n1 - 1) as f64 * v1 + (n2 - 1) as f64 * v2) / (n1 + n2 - 2) as f64).sqrt();
    let j = bias_correction(n1, n2);
    let diff = m1 - m2;
    let (g, degenerate) = if pooled_sd > 0.0 {
        (diff / pooled_sd * j, false)
    } else if diff == 0.0 {
        (0.0, true)
    } else {
        (DEGENERATE_SENTINEL.copysign(diff), true)
    };
    Ok(HedgesResult {
        g,
        group1_n: n1,
        group2_n: n2,
        group1_mean: m1,
        group2_mean: m2,
        pooled_sd,
        j,
        effect_label: EffectLabel::from_g(g),
        degenerate,
    })
}

/// Scores of one device on one day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSample {
    pub device_id: String,
    pub day_index: u32,
    pub scores: Vec<f64>,
}

impl ScoreSample {
    pub fn new(device_id: impl Into<String>, day_index: u32, scores: Vec<f64>) -> Result<Self, DriftError> {
        if let Some(&bad) = scores.iter().find(|s| !(**s >= 0.0) || !s.is_finite()) {
            return Err(DriftError::BadScore(bad));
        }
        Ok(Self {
            device_id: device_id.into(),
            day_index,
            scores,
        })
    }

    pub fn mean(&self) -> f64 {
        self.scores.iter().sum::<f64>() / self.scores.len() as f64
    }

    pub fn count_above(&self) -> usize {
        self.scores.iter().filter(|&&s| s > SCORE_THRESHOLD).count()
    }

    pub fn count_below(&self) -> usize {
        self.scores.len() - self.count_above()
    }
}

/// True iff g > 0.5. A negative g of any size never flags.
pub fn change_verdict(baseline: &ScoreSample, candidate: &ScoreSample) -> Result<(bool, HedgesResult), DriftError> {
    let h = hedges_g(&candidate.scores, &baseline.scores)?;
    Ok((h.g > CHANGE_THRESHOLD, h))
}

/// Groups scores by (anchor device, target day) for one split.
pub fn group_scores(records: &[ScoreRecord], split: Split) -> Result<Vec<ScoreSample>, DriftError> {
    let mut groups: BTreeMap<(String, u32), Vec<f64>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.split == split) {
        groups
            .entry((r.left.device_id.clone(), r.right.day_index))
            .or_default()
            .push(r.score);
    }
    groups
        .into_iter()
        .map(|((device, day), scores)| ScoreSample::new(device, day, scores))
        .collect()
}

/// Per-device baselines: the similar-pair scores of the training split.
pub fn baselines_from(records: &[ScoreRecord]) -> Result<BTreeMap<String, ScoreSample>, DriftError> {
    let similar: Vec<ScoreRecord> = records
        .iter()
        .filter(|r| r.split == Split::Train && r.label == PairLabel::Similar)
        .cloned()
        .collect();
    Ok(group_scores(&similar, Split::Train)?
        .into_iter()
        .map(|s| (s.device_id.clone(), s))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DayTruth {
    Stable,
    Changed,
}

impl DayTruth {
    fn correct_side(self, value: f64) -> bool {
        match self {
            DayTruth::Stable => value <= SCORE_THRESHOLD,
            DayTruth::Changed => value > SCORE_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AccuracyMetric {
    AllSamples,
    MajoritySamples,
    MajorityMeanThreshold,
    HedgesG,
}

impl AccuracyMetric {
    pub const ALL: [AccuracyMetric; 4] = [
        AccuracyMetric::AllSamples,
        AccuracyMetric::MajoritySamples,
        AccuracyMetric::MajorityMeanThreshold,
        AccuracyMetric::HedgesG,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AccuracyMetric::AllSamples => "All Samples",
            AccuracyMetric::MajoritySamples => "Majority Samples",
            AccuracyMetric::MajorityMeanThreshold => "Majority Mean Threshold",
            AccuracyMetric::HedgesG => "Hedges' g",
        }
    }
}

/// One device-day against its baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayDrift {
    pub device_id: String,
    pub day_index: u32,
    pub n: usize,
    pub below: usize,
    pub above: usize,
    pub mean: f64,
    pub hedges: HedgesResult,
    pub change_verdict: bool,
    pub truth: Option<DayTruth>,
}

impl DayDrift {
    pub fn new(baseline: &ScoreSample, day: &ScoreSample, truth: Option<DayTruth>) -> Result<Self, DriftError> {
        let (verdict, hedges) = change_verdict(baseline, day)?;
        let above = day.count_above();
        Ok(Self {
            device_id: day.device_id.clone(),
            day_index: day.day_index,
            n: day.scores.len(),
            below: day.scores.len() - above,
            above,
            mean: day.mean(),
            hedges,
            change_verdict: verdict,
            truth,
        })
    }

    /// Whether the day counts as correct under a day-level metric. `None`
    /// without truth and for AllSamples, which counts scores instead.
    pub fn correct(&self, metric: AccuracyMetric) -> Option<bool> {
        let truth = self.truth?;
        Some(match metric {
            AccuracyMetric::AllSamples => return None,
            AccuracyMetric::MajoritySamples => {
                let right = if truth == DayTruth::Changed { self.above } else { self.below };
                right * 2 > self.n
            }
            AccuracyMetric::MajorityMeanThreshold => truth.correct_side(self.mean),
            AccuracyMetric::HedgesG => self.change_verdict == (truth == DayTruth::Changed),
        })
    }

    /// Scores on the correct side of the threshold.
    pub fn correct_samples(&self) -> Option<usize> {
        Some(match self.truth? {
            DayTruth::Changed => self.above,
            DayTruth::Stable => self.below,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineSummary {
    pub device_id: String,
    pub n: usize,
    pub below: usize,
    pub above: usize,
    pub mean: f64,
}

/// The four accuracy indicators of one split in one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub split: Split,
    pub seed: u64,
    pub days: usize,
    pub samples: usize,
    pub all_samples: f64,
    pub majority_samples: f64,
    pub majority_mean_threshold: f64,
    pub hedges_g: f64,
}

impl AccuracyReport {
    pub fn get(&self, metric: AccuracyMetric) -> f64 {
        match metric {
            AccuracyMetric::AllSamples => self.all_samples,
            AccuracyMetric::MajoritySamples => self.majority_samples,
            AccuracyMetric::MajorityMeanThreshold => self.majority_mean_threshold,
            AccuracyMetric::HedgesG => self.hedges_g,
        }
    }
}

/// All four indicators over the days of one split. AllSamples pools every
/// score; the other three count days. Majority ties count as wrong.
pub fn accuracy_metrics(
    days: &[ScoreSample],
    truth: &BTreeMap<(String, u32), DayTruth>,
    baselines: &BTreeMap<String, ScoreSample>,
    split: Split,
    seed: u64,
) -> Result<(AccuracyReport, Vec<DayDrift>), DriftError> {
    if days.is_empty() {
        return Err(DriftError::NoDays);
    }
    let mut drifts = Vec::with_capacity(days.len());
    for day in days {
        let baseline = baselines
            .get(&day.device_id)
            .ok_or_else(|| DriftError::MissingBaseline(day.device_id.clone()))?;
        let t = truth
            .get(&(day.device_id.clone(), day.day_index))
            .copied()
            .ok_or_else(|| DriftError::MissingTruth(day.device_id.clone(), day.day_index))?;
        drifts.push(DayDrift::new(baseline, day, Some(t))?);
    }
    let n_days = drifts.len() as f64;
    let samples: usize = drifts.iter().map(|d| d.n).sum();
    let correct_samples: usize = drifts.iter().map(|d| d.correct_samples().expect("truth set")).sum();
    let frac = |m: AccuracyMetric| drifts.iter().filter(|d| d.correct(m) == Some(true)).count() as f64 / n_days;
    let report = AccuracyReport {
        split,
        seed,
        days: drifts.len(),
        samples,
        all_samples: correct_samples as f64 / samples as f64,
        majority_samples: frac(AccuracyMetric::MajoritySamples),
        majority_mean_threshold: frac(AccuracyMetric::MajorityMeanThreshold),
        hedges_g: frac(AccuracyMetric::HedgesG),
    };
    Ok((report, drifts))
}

/// Everything one run concluded about drift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub schema_version: u32,
    pub seed: u64,
    pub baselines: Vec<BaselineSummary>,
    pub days: Vec<DayDrift>,
}

impl DriftReport {
    pub fn new(seed: u64, baselines: &BTreeMap<String, ScoreSample>, days: Vec<DayDrift>) -> Self {
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            seed,
            baselines: baselines
                .values()
                .map(|b| BaselineSummary {
                    device_id: b.device_id.clone(),
                    n: b.scores.len(),
                    below: b.count_below(),
                    above: b.count_above(),
                    mean: b.mean(),
                })
                .collect(),
            days,
        }
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), DriftError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "device", "day", "n", "below", "above", "mean", "baseline_mean", "pooled_sd", "j", "g", "effect",
            "degenerate", "verdict", "truth",
        ])?;
        for d in &self.days {
            w.write_record([
                d.device_id.clone(),
                d.day_index.to_string(),
                d.n.to_string(),
                d.below.to_string(),
                d.above.to_string(),
                d.mean.to_string(),
                d.hedges.group2_mean.to_string(),
                d.hedges.pooled_sd.to_string(),
                d.hedges.j.to_string(),
                d.hedges.g.to_string(),
                format!("{:?}", d.hedges.effect_label),
                d.hedges.degenerate.to_string(),
                d.change_verdict.to_string(),
                d.truth.map_or_else(String::new, |t| format!("{t:?}")),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
