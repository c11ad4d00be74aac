//! Raw-signal conditioning: re-referencing, band-pass filtering, artifact
//! masking, cropping to a uniform duration, segmentation and z-scoring.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::butter::{FilterError, Sos};
use crate::psg_io::Recording;

pub const BUTTER_ORDER: usize = 4;

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("length mismatch: primary {primary} vs reference {reference}")]
    LengthMismatch { primary: usize, reference: usize },
    #[error("invalid filter band: {0}")]
    InvalidBand(#[from] FilterError),
    #[error("recording too short: {duration_s:.1} s < target {target_s:.1} s")]
    TooShort { duration_s: f64, target_s: f64 },
    #[error("window of {window_s:.1} s exceeds signal duration {duration_s:.1} s")]
    WindowTooLarge { window_s: f64, duration_s: f64 },
    #[error("channel {0} missing from recording")]
    MissingChannel(String),
}

/// Per-epoch artifact flags (true = artifact).
#[derive(Debug, Clone, PartialEq)]
pub struct ArtifactMask {
    pub epoch_len_s: f64,
    pub flags: Vec<bool>,
}

/// Windowed signal: `[segments x samples]` rows in temporal order.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentTensor {
    pub data: Array2<f64>,
    pub window_s: f64,
    pub step_s: f64,
    pub rate_hz: f64,
}

impl SegmentTensor {
    pub fn n_segments(&self) -> usize {
        self.data.nrows()
    }

    pub fn samples_per_segment(&self) -> usize {
        self.data.ncols()
    }
}

/// Preprocessing parameters. Defaults reproduce the reference pipeline:
/// 70 Hz common rate, 0.3-34.5 Hz EEG band, 0.5-34.5 Hz ECG band (the upper
/// edge is nudged below the 35 Hz Nyquist), 5-hour crop, 30 s / 2 min
/// segmentation and the 5-second artifact epoch rule.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub target_rate_hz: f64,
    pub eeg_channel: String,
    /// Mastoid reference channel; when present the EEG channel is
    /// re-referenced as `eeg - reference` before filtering.
    pub ref_channel: Option<String>,
    pub ecg_channel: String,
    pub eeg_band_hz: (f64, f64),
    pub ecg_band_hz: (f64, f64),
    pub crop_s: f64,
    pub eeg_window_s: f64,
    pub eeg_step_s: f64,
    pub ecg_window_s: f64,
    pub ecg_step_s: f64,
    pub artifact_epoch_s: f64,
    pub artifact_p2p_uv: f64,
    pub artifact_std_factor: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            target_rate_hz: 70.0,
            eeg_channel: "C3".into(),
            ref_channel: Some("M2".into()),
            ecg_channel: "ECG-I".into(),
            eeg_band_hz: (0.3, 34.5),
            ecg_band_hz: (0.5, 34.5),
            crop_s: 18_000.0,
            eeg_window_s: 30.0,
            eeg_step_s: 30.0,
            ecg_window_s: 120.0,
            ecg_step_s: 120.0,
            artifact_epoch_s: 5.0,
            artifact_p2p_uv: 300.0,
            artifact_std_factor: 5.0,
        }
    }
}

/// `primary - reference`, elementwise.
pub fn rereference(primary: &[f64], reference: &[f64]) -> Result<Vec<f64>, PreprocessError> {
    if primary.len() != reference.len() {
        return Err(PreprocessError::LengthMismatch {
            primary: primary.len(),
            reference: reference.len(),
        });
    }
    Ok(primary.iter().zip(reference).map(|(p, r)| p - r).collect())
}

/// Zero-phase 4th-order Butterworth band-pass.
pub fn bandpass(signal: &[f64], low_hz: f64, high_hz: f64, rate_hz: f64) -> Result<Vec<f64>, PreprocessError> {
    let sos = Sos::butter_bandpass(BUTTER_ORDER, low_hz, high_hz, rate_hz)?;
    Ok(sos.filtfilt(signal))
}

/// Flags 5-second epochs whose peak-to-peak amplitude exceeds `p2p_limit`
/// or whose standard deviation exceeds `std_factor` times the median epoch
/// standard deviation.
pub fn detect_artifacts_with(
    eeg: &[f64],
    rate_hz: f64,
    epoch_len_s: f64,
    p2p_limit: f64,
    std_factor: f64,
) -> ArtifactMask {
    let epoch_n = (epoch_len_s * rate_hz).round() as usize;
    let n_epochs = eeg.len() / epoch_n.max(1);
    let mut p2p = Vec::with_capacity(n_epochs);
    let mut stds = Vec::with_capacity(n_epochs);
    for e in 0..n_epochs {
        let seg = &eeg[e * epoch_n..(e + 1) * epoch_n];
        let (mut lo, mut hi, mut sum, mut sumsq) = (f64::INFINITY, f64::NEG_INFINITY, 0.0, 0.0);
        for &v in seg {
            lo = lo.min(v);
            hi = hi.max(v);
            sum += v;
            sumsq += v * v;
        }
        let mean = sum / epoch_n as f64;
        let var = (sumsq / epoch_n as f64 - mean * mean).max(0.0);
        p2p.push(hi - lo);
        stds.push(var.sqrt());
    }
    let mut sorted = stds.clone();
    sorted.sort_by(f64::total_cmp);
    let median_std = if sorted.is_empty() {
        0.0
    } else if sorted.len() % 2 == 0 {
        0.5 * (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2])
    } else {
        sorted[sorted.len() / 2]
    };
    let flags = p2p
        .iter()
        .zip(&stds)
        .map(|(&pp, &sd)| pp > p2p_limit || sd > std_factor * median_std)
        .collect();
    ArtifactMask { epoch_len_s, flags }
}

/// [`detect_artifacts_with`] at the default thresholds (300 uV peak-to-peak,
/// 5x median epoch standard deviation, 5-second epochs).
pub fn detect_artifacts(eeg: &[f64], rate_hz: f64) -> ArtifactMask {
    detect_artifacts_with(eeg, rate_hz, 5.0, 300.0, 5.0)
}

/// Keeps the first `target_s` seconds.
pub fn crop(signal: &[f64], rate_hz: f64, target_s: f64) -> Result<Vec<f64>, PreprocessError> {
    let n_target = (target_s * rate_hz).round() as usize;
    if signal.len() < n_target {
        return Err(PreprocessError::TooShort {
            duration_s: signal.len() as f64 / rate_hz,
            target_s,
        });
    }
    Ok(signal[..n_target].to_vec())
}

/// Slices the signal into rows of `round(window_s * rate_hz)` samples every
/// `round(step_s * rate_hz)` samples.
pub fn segment(
    signal: &[f64],
    rate_hz: f64,
    window_s: f64,
    step_s: f64,
) -> Result<SegmentTensor, PreprocessError> {
    let t = (window_s * rate_hz).round() as usize;
    let step = (step_s * rate_hz).round().max(1.0) as usize;
    if t == 0 || signal.len() < t {
        return Err(PreprocessError::WindowTooLarge {
            window_s,
            duration_s: signal.len() as f64 / rate_hz,
        });
    }
    let s = (signal.len() - t) / step + 1;
    let mut data = Array2::zeros((s, t));
    for r in 0..s {
        data.row_mut(r)
            .as_slice_mut()
            .unwrap()
            .copy_from_slice(&signal[r * step..r * step + t]);
    }
    Ok(SegmentTensor { data, window_s, step_s, rate_hz })
}

/// Zeroes every sample that falls into a flagged artifact epoch. Segment
/// count and shape are unchanged so downstream sequence positions stay
/// aligned. Epochs beyond the mask are treated as clean.
pub fn apply_mask(segments: &SegmentTensor, mask: &ArtifactMask) -> SegmentTensor {
    let mut out = segments.clone();
    let step = (segments.step_s * segments.rate_hz).round() as usize;
    let epoch_n = (mask.epoch_len_s * segments.rate_hz).round().max(1.0) as usize;
    for (r, mut row) in out.data.rows_mut().into_iter().enumerate() {
        let row_start = r * step;
        for (o, v) in row.iter_mut().enumerate() {
            let epoch = (row_start + o) / epoch_n;
            if mask.flags.get(epoch).copied().unwrap_or(false) {
                *v = 0.0;
            }
        }
    }
    out
}

/// Outcome of a z-score pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ZscoreOutcome {
    /// Set when the scope had fewer than two samples or zero variance; the
    /// output is all zeros in that case.
    pub degenerate: bool,
}

/// Standardizes the slice to zero mean, unit (population) standard
/// deviation. Degenerate scopes become all zeros with a warning flag.
pub fn zscore_inplace(x: &mut [f64]) -> ZscoreOutcome {
    let n = x.len();
    if n < 2 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return ZscoreOutcome { degenerate: true };
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    // A standard deviation at rounding-noise scale counts as zero variance.
    let scale = x.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1e-300);
    if var.sqrt() <= 1e-12 * scale || !var.is_finite() {
        x.iter_mut().for_each(|v| *v = 0.0);
        return ZscoreOutcome { degenerate: true };
    }
    let inv_sd = 1.0 / var.sqrt();
    for v in x.iter_mut() {
        *v = (*v - mean) * inv_sd;
    }
    ZscoreOutcome { degenerate: false }
}

/// Column-wise z-score over an `[rows x features]` array. When `valid_rows`
/// is given, statistics come from valid rows only and invalid rows are
/// zeroed after the transform. Returns one degeneracy flag per column.
pub fn zscore_columns(x: &mut Array2<f64>, valid_rows: Option<&[bool]>) -> Vec<ZscoreOutcome> {
    let (rows, cols) = x.dim();
    let mut outcomes = Vec::with_capacity(cols);
    for c in 0..cols {
        let mut vals: Vec<f64> = (0..rows)
            .filter(|&r| valid_rows.map_or(true, |m| m[r]))
            .map(|r| x[[r, c]])
            .collect();
        let outcome = zscore_inplace(&mut vals);
        if outcome.degenerate {
            for r in 0..rows {
                x[[r, c]] = 0.0;
            }
        } else {
            let mut it = vals.into_iter();
            for r in 0..rows {
                if valid_rows.map_or(true, |m| m[r]) {
                    x[[r, c]] = it.next().unwrap();
                } else {
                    x[[r, c]] = 0.0;
                }
            }
        }
        outcomes.push(outcome);
    }
    outcomes
}

/// A subject after the full preprocessing chain.
#[derive(Debug, Clone)]
pub struct PreprocessedSubject {
    pub subject_id: String,
    /// Z-scored, artifact-masked EEG segments for the model.
    pub eeg_model: SegmentTensor,
    /// Z-scored ECG segments for the model.
    pub ecg_model: SegmentTensor,
    /// Artifact-masked EEG segments in physical units (for band powers).
    pub eeg_physical: SegmentTensor,
    /// Filtered, cropped continuous ECG in physical units (for R-peaks).
    pub ecg_physical: Vec<f64>,
    pub mask: ArtifactMask,
    /// Degenerate z-score scopes encountered (e.g. fully flat channels).
    pub warnings: Vec<String>,
}

/// Runs the chain: re-reference, resample to the common rate, band-pass,
/// crop, artifact mask, segment, z-score, mask-fill. Z-scoring happens
/// before mask application so flagged epochs are exactly zero in the model
/// tensors.
pub fn preprocess_subject(
    rec: &Recording,
    cfg: &PreprocessConfig,
) -> Result<PreprocessedSubject, PreprocessError> {
    let eeg_raw = rec
        .channel(&cfg.eeg_channel)
        .ok_or_else(|| PreprocessError::MissingChannel(cfg.eeg_channel.clone()))?;
    let ecg_raw = rec
        .channel(&cfg.ecg_channel)
        .ok_or_else(|| PreprocessError::MissingChannel(cfg.ecg_channel.clone()))?;

    let eeg = match &cfg.ref_channel {
        Some(name) => match rec.channel(name) {
            Some(reference) => rereference(eeg_raw, reference)?,
            None => eeg_raw.to_vec(),
        },
        None => eeg_raw.to_vec(),
    };
    let mut ecg = ecg_raw.to_vec();

    let mut eeg = eeg;
    if (rec.rate_hz - cfg.target_rate_hz).abs() > 1e-9 {
        eeg = crate::dsp::resample(&eeg, rec.rate_hz, cfg.target_rate_hz);
        ecg = crate::dsp::resample(&ecg, rec.rate_hz, cfg.target_rate_hz);
    }
    let rate = cfg.target_rate_hz;

    let eeg = bandpass(&eeg, cfg.eeg_band_hz.0, cfg.eeg_band_hz.1, rate)?;
    let ecg = bandpass(&ecg, cfg.ecg_band_hz.0, cfg.ecg_band_hz.1, rate)?;

    let eeg = crop(&eeg, rate, cfg.crop_s)?;
    let ecg = crop(&ecg, rate, cfg.crop_s)?;

    let mask = detect_artifacts_with(
        &eeg,
        rate,
        cfg.artifact_epoch_s,
        cfg.artifact_p2p_uv,
        cfg.artifact_std_factor,
    );

    let eeg_seg = segment(&eeg, rate, cfg.eeg_window_s, cfg.eeg_step_s)?;
    let ecg_seg = segment(&ecg, rate, cfg.ecg_window_s, cfg.ecg_step_s)?;

    let mut warnings = Vec::new();
    let mut eeg_model = eeg_seg.clone();
    if zscore_inplace(eeg_model.data.as_slice_mut().unwrap()).degenerate {
        warnings.push(format!("{}: EEG channel has zero variance", rec.subject_id));
    }
    let mut ecg_model = ecg_seg.clone();
    if zscore_inplace(ecg_model.data.as_slice_mut().unwrap()).degenerate {
        warnings.push(format!("{}: ECG channel has zero variance", rec.subject_id));
    }
    let eeg_model = apply_mask(&eeg_model, &mask);
    let eeg_physical = apply_mask(&eeg_seg, &mask);

    Ok(PreprocessedSubject {
        subject_id: rec.subject_id.clone(),
        eeg_model,
        ecg_model,
        eeg_physical,
        ecg_physical: ecg,
        mask,
        warnings,
    })
}
