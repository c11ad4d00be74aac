//! Recording ingestion, cohort filtering and synthetic cohort generation.
//!
//! Recordings live in a small binary container (one file per subject, see
//! [`container`]) with a JSON sidecar; scores are a two-column delimited
//! table. [`filter_cohort`] applies the cohort exclusion rules and
//! [`generate_synthetic_cohort`] produces deterministic desk-scale cohorts
//! with a plantable class signal for end-to-end verification.

pub mod bundle;
pub mod container;
pub mod synth;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use container::{read_recording, write_recording};
pub use synth::{generate_synthetic_cohort, write_cohort, SynthCohort};

/// Fraction of exactly-zero samples above which a required channel counts as
/// corrupt.
pub const CORRUPT_ZERO_FRACTION: f64 = 0.90;

/// Default minimum recording duration in seconds (5 hours).
pub const DEFAULT_MIN_DURATION_S: f64 = 18_000.0;

#[derive(Debug, Error)]
pub enum PsgIoError {
    #[error("unreadable container {path}: {reason}")]
    Unreadable { path: String, reason: String },
    #[error("container {path} holds zero channels")]
    Empty { path: String },
    #[error("malformed score table {path}: {reason}")]
    BadScoreTable { path: String, reason: String },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// One named signal channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Channel {
    pub name: String,
    /// EEG channels are in microvolts, ECG channels in millivolts.
    pub samples: Vec<f64>,
}

/// A multi-channel raw recording for one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub subject_id: String,
    pub rate_hz: f64,
    pub duration_s: f64,
    channels: Vec<Channel>,
}

impl Recording {
    /// Builds a recording and checks the length/rate/duration invariants:
    /// positive rate and duration, and every channel within one sample of
    /// `rate_hz * duration_s`.
    pub fn new(subject_id: impl Into<String>, rate_hz: f64, channels: Vec<Channel>) -> Recording {
        assert!(rate_hz > 0.0, "rate must be positive");
        let n = channels.first().map(|c| c.samples.len()).unwrap_or(0);
        let duration_s = n as f64 / rate_hz;
        for ch in &channels {
            let expect = (rate_hz * duration_s).round();
            assert!(
                (ch.samples.len() as f64 - expect).abs() <= 1.0,
                "channel {} length {} deviates from rate*duration {}",
                ch.name,
                ch.samples.len(),
                expect
            );
        }
        Recording { subject_id: subject_id.into(), rate_hz, duration_s, channels }
    }

    pub fn channels(&self) -> &[Channel] {
        &self.channels
    }

    pub fn channel(&self, name: &str) -> Option<&[f64]> {
        self.channels
            .iter()
            .find(|c| c.name == name)
            .map(|c| c.samples.as_slice())
    }

    pub fn channel_names(&self) -> Vec<&str> {
        self.channels.iter().map(|c| c.name.as_str()).collect()
    }
}

/// Why a subject was excluded from the cohort.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExcludeReason {
    #[serde(rename = "MISSING_CHANNEL")]
    MissingChannel,
    #[serde(rename = "CORRUPT_SIGNAL")]
    CorruptSignal,
    #[serde(rename = "NO_SCORE")]
    NoScore,
    #[serde(rename = "TOO_SHORT")]
    TooShort,
}

impl std::fmt::Display for ExcludeReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ExcludeReason::MissingChannel => "MISSING_CHANNEL",
            ExcludeReason::CorruptSignal => "CORRUPT_SIGNAL",
            ExcludeReason::NoScore => "NO_SCORE",
            ExcludeReason::TooShort => "TOO_SHORT",
        };
        f.write_str(s)
    }
}

/// Outcome of the cohort exclusion rules.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CohortManifest {
    pub included: Vec<String>,
    pub excluded: Vec<(String, ExcludeReason)>,
    /// Scores of the included subjects.
    pub score_table: BTreeMap<String, f64>,
}

/// Applies the exclusion rules, in order: missing required channel, corrupt
/// signal (more than 90% exactly-zero samples in a required channel), missing
/// score, recording shorter than `min_duration_s`. The manifest is sorted by
/// subject id, so the result does not depend on input order.
pub fn filter_cohort(
    recordings: &[Recording],
    scores: &BTreeMap<String, f64>,
    required_channels: &[String],
    min_duration_s: f64,
) -> CohortManifest {
    let mut manifest = CohortManifest::default();
    for rec in recordings {
        let reason = exclusion_reason(rec, scores, required_channels, min_duration_s);
        match reason {
            Some(r) => manifest.excluded.push((rec.subject_id.clone(), r)),
            None => {
                manifest.included.push(rec.subject_id.clone());
                manifest
                    .score_table
                    .insert(rec.subject_id.clone(), scores[&rec.subject_id]);
            }
        }
    }
    manifest.included.sort();
    manifest.included.dedup();
    manifest.excluded.sort_by(|a, b| a.0.cmp(&b.0));
    manifest.excluded.dedup();
    manifest
}

fn exclusion_reason(
    rec: &Recording,
    scores: &BTreeMap<String, f64>,
    required_channels: &[String],
    min_duration_s: f64,
) -> Option<ExcludeReason> {
    for name in required_channels {
        if rec.channel(name).is_none() {
            return Some(ExcludeReason::MissingChannel);
        }
    }
    for name in required_channels {
        let samples = rec.channel(name).unwrap();
        if samples.is_empty() {
            return Some(ExcludeReason::CorruptSignal);
        }
        let zeros = samples.iter().filter(|v| **v == 0.0).count();
        if zeros as f64 / samples.len() as f64 > CORRUPT_ZERO_FRACTION {
            return Some(ExcludeReason::CorruptSignal);
        }
    }
    if !scores.contains_key(&rec.subject_id) {
        return Some(ExcludeReason::NoScore);
    }
    if rec.duration_s < min_duration_s {
        return Some(ExcludeReason::TooShort);
    }
    None
}

/// Synthetic cohort parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthCohortSpec {
    pub n_subjects: usize,
    pub duration_s: f64,
    pub rate_hz: f64,
    /// Separation between the two planted classes, in `[0, 1]`.
    pub effect_strength: f64,
    pub seed: u64,
}

impl SynthCohortSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.n_subjects < 2 {
            return Err(format!("n_subjects must be >= 2, got {}", self.n_subjects));
        }
        if !(0.0..=1.0).contains(&self.effect_strength) {
            return Err(format!(
                "effect_strength must be in [0, 1], got {}",
                self.effect_strength
            ));
        }
        if self.duration_s <= 0.0 || self.rate_hz <= 0.0 {
            return Err("duration_s and rate_hz must be positive".into());
        }
        Ok(())
    }
}

/// Re-export of band-limited resampling with the module's length contract.
pub fn resample(signal: &[f64], from_hz: f64, to_hz: f64) -> Vec<f64> {
    crate::dsp::resample(signal, from_hz, to_hz)
}

/// Reads a two-column `subject_id,score` table. A header row is required.
pub fn read_score_table(path: &Path) -> Result<BTreeMap<String, f64>, PsgIoError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| PsgIoError::BadScoreTable { path: path.display().to_string(), reason: e.to_string() })?;
    let headers = reader
        .headers()
        .map_err(|e| PsgIoError::BadScoreTable { path: path.display().to_string(), reason: e.to_string() })?
        .clone();
    if headers.len() < 2 || headers.get(0) != Some("subject_id") || headers.get(1) != Some("score") {
        return Err(PsgIoError::BadScoreTable {
            path: path.display().to_string(),
            reason: format!("expected header subject_id,score got {headers:?}"),
        });
    }
    let mut out = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| PsgIoError::BadScoreTable {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        let id = record.get(0).unwrap_or_default().to_string();
        let score: f64 = record
            .get(1)
            .unwrap_or_default()
            .trim()
            .parse()
            .map_err(|e| PsgIoError::BadScoreTable {
                path: path.display().to_string(),
                reason: format!("bad score for {id}: {e}"),
            })?;
        out.insert(id, score);
    }
    Ok(out)
}

/// Writes a score table in the same two-column format.
pub fn write_score_table(path: &Path, scores: &BTreeMap<String, f64>) -> Result<(), PsgIoError> {
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| PsgIoError::Io { path: path.display().to_string(), source: e.into() })?;
    writer
        .write_record(["subject_id", "score"])
        .map_err(|e| io_err(path, e))?;
    for (id, score) in scores {
        writer
            .write_record([id.as_str(), &format!("{score}")])
            .map_err(|e| io_err(path, e))?;
    }
    writer.flush().map_err(|e| PsgIoError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok(())
}

fn io_err(path: &Path, e: csv::Error) -> PsgIoError {
    PsgIoError::Io { path: path.display().to_string(), source: e.into() }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, names: &[&str], len: usize, rate: f64) -> Recording {
        let channels = names
            .iter()
            .map(|n| Channel { name: n.to_string(), samples: vec![1.0; len] })
            .collect();
        Recording::new(id, rate, channels)
    }

    fn required() -> Vec<String> {
        vec!["C3".into(), "M2".into(), "ECG-I".into()]
    }

    #[test]
    fn missing_channel_is_excluded() {
        let r = rec("a", &["C3", "ECG-I"], 100, 10.0);
        let scores = BTreeMap::from([("a".to_string(), 1.0)]);
        let m = filter_cohort(&[r], &scores, &required(), 1.0);
        assert_eq!(m.excluded, vec![("a".to_string(), ExcludeReason::MissingChannel)]);
        assert!(m.included.is_empty());
    }

    #[test]
    fn mostly_zero_channel_is_corrupt() {
        let mut r = rec("a", &["C3", "M2", "ECG-I"], 1000, 10.0);
        for (i, v) in r.channels[2].samples.iter_mut().enumerate() {
            if i < 950 {
                *v = 0.0;
            }
        }
        let scores = BTreeMap::from([("a".to_string(), 1.0)]);
        let m = filter_cohort(&[r], &scores, &required(), 1.0);
        assert_eq!(m.excluded, vec![("a".to_string(), ExcludeReason::CorruptSignal)]);
    }

    #[test]
    fn exactly_90_percent_zeros_is_kept() {
        let mut r = rec("a", &["C3", "M2", "ECG-I"], 1000, 10.0);
        for (i, v) in r.channels[0].samples.iter_mut().enumerate() {
            if i < 900 {
                *v = 0.0;
            }
        }
        let scores = BTreeMap::from([("a".to_string(), 1.0)]);
        let m = filter_cohort(&[r], &scores, &required(), 1.0);
        assert_eq!(m.included, vec!["a".to_string()]);
    }

    #[test]
    fn all_valid_subjects_are_included() {
        let recs: Vec<Recording> = (0..10)
            .map(|i| rec(&format!("s{i}"), &["C3", "M2", "ECG-I"], 100, 10.0))
            .collect();
        let scores: BTreeMap<String, f64> =
            (0..10).map(|i| (format!("s{i}"), i as f64)).collect();
        let m = filter_cohort(&recs, &scores, &required(), 1.0);
        assert_eq!(m.included.len(), 10);
        assert!(m.excluded.is_empty());
    }

    #[test]
    fn missing_score_and_short_recording_are_excluded() {
        let a = rec("a", &["C3", "M2", "ECG-I"], 100, 10.0);
        let b = rec("b", &["C3", "M2", "ECG-I"], 40, 10.0);
        let scores = BTreeMap::from([("b".to_string(), 2.0)]);
        let m = filter_cohort(&[a, b], &scores, &required(), 5.0);
        assert_eq!(
            m.excluded,
            vec![
                ("a".to_string(), ExcludeReason::NoScore),
                ("b".to_string(), ExcludeReason::TooShort)
            ]
        );
    }

    #[test]
    fn filtering_is_order_independent_and_idempotent() {
        let mut recs: Vec<Recording> = (0..6)
            .map(|i| rec(&format!("s{i}"), &["C3", "M2", "ECG-I"], 100, 10.0))
            .collect();
        recs[3].channels.remove(1);
        let scores: BTreeMap<String, f64> = (0..5).map(|i| (format!("s{i}"), i as f64)).collect();

        let forward = filter_cohort(&recs, &scores, &required(), 1.0);
        recs.reverse();
        let backward = filter_cohort(&recs, &scores, &required(), 1.0);
        assert_eq!(forward.included, backward.included);
        assert_eq!(forward.excluded, backward.excluded);

        let survivors: Vec<Recording> = recs
            .iter()
            .filter(|r| forward.included.contains(&r.subject_id))
            .cloned()
            .collect();
        let again = filter_cohort(&survivors, &scores, &required(), 1.0);
        assert_eq!(again.included, forward.included);
        assert!(again.excluded.is_empty());
    }
}
