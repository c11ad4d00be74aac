//! Feature extraction: multitaper EEG band powers per 30-second segment and
//! time/frequency HRV series from detected R-peaks.

pub mod bandpower;
pub mod hrv;
pub mod rpeaks;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::preprocess::SegmentTensor;

pub use bandpower::{multitaper_bandpower, multitaper_psd};
pub use hrv::{freq_hrv, time_hrv, FreqHrv, RRSeries, TimeHrv};
pub use rpeaks::detect_rpeaks;

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("no R-peaks detected")]
    NoPeaks,
    #[error("too few beats: {got} intervals, need {need}")]
    TooFewBeats { got: usize, need: usize },
    #[error("intervals span only {span_s:.1} s")]
    WindowTooSparse { span_s: f64 },
}

/// A named frequency band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandDefinition {
    pub name: String,
    pub low_hz: f64,
    pub high_hz: f64,
}

impl BandDefinition {
    pub fn new(name: &str, low_hz: f64, high_hz: f64) -> BandDefinition {
        assert!(low_hz >= 0.0 && low_hz < high_hz, "invalid band {name}");
        BandDefinition { name: name.into(), low_hz, high_hz }
    }
}

/// The six standard EEG bands: Delta 0.5-4, Theta 4-8, Alpha 8-12,
/// Sigma 12-16, Beta 16-30, Gamma 30-35 Hz.
pub fn standard_bands() -> Vec<BandDefinition> {
    vec![
        BandDefinition::new("delta", 0.5, 4.0),
        BandDefinition::new("theta", 4.0, 8.0),
        BandDefinition::new("alpha", 8.0, 12.0),
        BandDefinition::new("sigma", 12.0, 16.0),
        BandDefinition::new("beta", 16.0, 30.0),
        BandDefinition::new("gamma", 30.0, 35.0),
    ]
}

/// True iff the implied mean heart rate `60 * (n_peaks - 1) / window_s`
/// lies inside `range_bpm`. Zero or one peak is always invalid.
pub fn hr_sanity(n_peaks: usize, window_s: f64, range_bpm: (f64, f64)) -> bool {
    if n_peaks < 2 {
        return false;
    }
    let hr = 60.0 * (n_peaks as f64 - 1.0) / window_s;
    hr >= range_bpm.0 && hr <= range_bpm.1
}

/// Feature-stage parameters; defaults follow the reference setup
/// (multitaper NW 4 / 7 tapers, 2-minute time-HRV and 5-minute
/// frequency-HRV windows, both with 50% overlap, 40-100 bpm sanity range).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub hrv_time_window_s: f64,
    pub hrv_time_step_s: f64,
    pub hrv_freq_window_s: f64,
    pub hrv_freq_step_s: f64,
    pub hr_range_bpm: (f64, f64),
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            hrv_time_window_s: 120.0,
            hrv_time_step_s: 60.0,
            hrv_freq_window_s: 300.0,
            hrv_freq_step_s: 150.0,
            hr_range_bpm: (40.0, 100.0),
        }
    }
}

/// The three feature time-series with per-row validity masks. Invalid rows
/// are zero-filled so sequence positions stay aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    /// `[n_eeg_segments x 6]` absolute band powers.
    pub eeg_power: Array2<f64>,
    /// `[n_time_windows x 6]` MeanNN, SDNN, RMSSD, CVNN, SDRMSSD, pNN20.
    pub hrv_time: Array2<f64>,
    /// `[n_freq_windows x 5]` VLF, LF, HF, LF/HF, TP.
    pub hrv_freq: Array2<f64>,
    pub eeg_power_valid: Vec<bool>,
    pub hrv_time_valid: Vec<bool>,
    pub hrv_freq_valid: Vec<bool>,
}

/// Number of sliding windows of `window_s` every `step_s` over `duration_s`.
pub fn n_windows(duration_s: f64, window_s: f64, step_s: f64) -> usize {
    if duration_s < window_s {
        return 0;
    }
    (((duration_s - window_s) / step_s).floor() as usize) + 1
}

/// Computes the full feature set for one subject: band powers per EEG
/// segment, and HRV statistics over sliding ECG windows. Windows that fail
/// the heart-rate sanity check or have too few beats become zero rows with
/// a false validity flag; per-window failures never abort the subject.
pub fn build_feature_sequences(
    eeg_segments: &SegmentTensor,
    ecg_signal: &[f64],
    rate_hz: f64,
    cfg: &FeatureConfig,
) -> FeatureSet {
    let bands = standard_bands();
    let s30 = eeg_segments.n_segments();
    let mut eeg_power = Array2::zeros((s30, bands.len()));
    let mut eeg_power_valid = vec![false; s30];
    for (r, row) in eeg_segments.data.rows().into_iter().enumerate() {
        let (powers, valid) = multitaper_bandpower(row.as_slice().unwrap(), rate_hz, &bands);
        for (c, p) in powers.iter().enumerate() {
            eeg_power[[r, c]] = *p;
        }
        eeg_power_valid[r] = valid;
    }

    // One detection pass over the whole record; windows select their peaks.
    let peak_times_s: Vec<f64> = match detect_rpeaks(ecg_signal, rate_hz) {
        Ok(peaks) => peaks.iter().map(|&i| i as f64 / rate_hz).collect(),
        Err(_) => Vec::new(),
    };

    let duration_s = ecg_signal.len() as f64 / rate_hz;
    let (hrv_time, hrv_time_valid) = hrv_windows(
        &peak_times_s,
        duration_s,
        cfg.hrv_time_window_s,
        cfg.hrv_time_step_s,
        cfg.hr_range_bpm,
        6,
        |rr| time_hrv(rr).ok().map(|t| t.as_array().to_vec()),
    );
    let (hrv_freq, hrv_freq_valid) = hrv_windows(
        &peak_times_s,
        duration_s,
        cfg.hrv_freq_window_s,
        cfg.hrv_freq_step_s,
        cfg.hr_range_bpm,
        5,
        |rr| freq_hrv(rr).ok().map(|f| f.as_array().to_vec()),
    );

    FeatureSet { eeg_power, hrv_time, hrv_freq, eeg_power_valid, hrv_time_valid, hrv_freq_valid }
}

fn hrv_windows(
    peak_times_s: &[f64],
    duration_s: f64,
    window_s: f64,
    step_s: f64,
    hr_range: (f64, f64),
    n_features: usize,
    compute: impl Fn(&RRSeries) -> Option<Vec<f64>>,
) -> (Array2<f64>, Vec<bool>) {
    let n_win = n_windows(duration_s, window_s, step_s);
    let mut out = Array2::zeros((n_win, n_features));
    let mut valid = vec![false; n_win];
    for w in 0..n_win {
        let t0 = w as f64 * step_s;
        let t1 = t0 + window_s;
        let in_window: Vec<f64> = peak_times_s
            .iter()
            .copied()
            .filter(|t| *t >= t0 && *t < t1)
            .collect();
        if !hr_sanity(in_window.len(), window_s, hr_range) {
            continue;
        }
        let intervals: Vec<f64> = in_window.windows(2).map(|p| (p[1] - p[0]) * 1000.0).collect();
        if intervals.is_empty() {
            continue;
        }
        let rr = RRSeries::new(intervals, in_window[1]);
        if let Some(values) = compute(&rr) {
            if values.iter().all(|v| v.is_finite()) {
                for (c, v) in values.iter().enumerate() {
                    out[[w, c]] = *v;
                }
                valid[w] = true;
            }
        }
    }
    (out, valid)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hr_sanity_applies_the_bpm_range() {
        let range = (40.0, 100.0);
        assert!(!hr_sanity(70, 120.0, range)); // 34.5 bpm
        assert!(hr_sanity(120, 120.0, range)); // 59.5 bpm
        assert!(!hr_sanity(0, 120.0, range));
        assert!(!hr_sanity(1, 120.0, range));
        assert!(!hr_sanity(202, 120.0, range)); // 100.5 bpm
    }

    #[test]
    fn window_grid_matches_five_hour_arithmetic() {
        assert_eq!(n_windows(18_000.0, 120.0, 60.0), 299);
        assert_eq!(n_windows(18_000.0, 300.0, 150.0), 119);
        assert_eq!(n_windows(18_000.0, 30.0, 30.0), 600);
    }

    fn qrs_signal(rate: f64, secs: f64, bpm: f64) -> Vec<f64> {
        let n = (rate * secs) as usize;
        let mut x = vec![0.0; n];
        let mut t = 0.4;
        while t < secs {
            let idx = (t * rate).round() as usize;
            if idx < n {
                x[idx] = 1.0;
            }
            t += 60.0 / bpm;
        }
        x
    }

    #[test]
    fn feature_shapes_follow_the_window_grids() {
        let rate = 70.0;
        let secs = 1200.0;
        let eeg: Vec<f64> = (0..(rate * secs) as usize)
            .map(|i| (2.0 * std::f64::consts::PI * 10.0 * i as f64 / rate).sin())
            .collect();
        let seg = crate::preprocess::segment(&eeg, rate, 30.0, 30.0).unwrap();
        let ecg = qrs_signal(rate, secs, 60.0);
        let fs = build_feature_sequences(&seg, &ecg, rate, &FeatureConfig::default());
        assert_eq!(fs.eeg_power.dim(), (40, 6));
        assert_eq!(fs.hrv_time.dim(), (n_windows(secs, 120.0, 60.0), 6));
        assert_eq!(fs.hrv_freq.dim(), (n_windows(secs, 300.0, 150.0), 5));
        assert!(fs.eeg_power_valid.iter().all(|v| *v));
        assert!(fs.hrv_time_valid.iter().all(|v| *v));
        assert!(fs.hrv_freq_valid.iter().all(|v| *v));
    }

    #[test]
    fn flat_ecg_invalidates_all_hrv_rows() {
        let rate = 70.0;
        let secs = 600.0;
        let eeg: Vec<f64> = vec![1.0; (rate * secs) as usize];
        let seg = crate::preprocess::segment(&eeg, rate, 30.0, 30.0).unwrap();
        let ecg = vec![0.0; (rate * secs) as usize];
        let fs = build_feature_sequences(&seg, &ecg, rate, &FeatureConfig::default());
        assert!(fs.hrv_time_valid.iter().all(|v| !v));
        assert!(fs.hrv_freq_valid.iter().all(|v| !v));
        assert!(fs.hrv_time.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn bradycardic_window_is_rejected_row_by_row() {
        let rate = 70.0;
        let secs = 600.0;
        // 60 bpm everywhere except 35 bpm inside [120, 240).
        let n = (rate * secs) as usize;
        let mut x = vec![0.0; n];
        let mut t: f64 = 0.4;
        while t < secs {
            let idx = (t * rate).round() as usize;
            if idx < n {
                x[idx] = 1.0;
            }
            t += if (120.0..240.0).contains(&t) { 60.0 / 35.0 } else { 1.0 };
        }
        let eeg = vec![1.0; n];
        let seg = crate::preprocess::segment(&eeg, rate, 30.0, 30.0).unwrap();
        let fs = build_feature_sequences(&seg, &x, rate, &FeatureConfig::default());
        // Window index 2 covers [120, 240): exactly the bradycardic span.
        assert!(!fs.hrv_time_valid[2]);
        assert!(fs.hrv_time.row(2).iter().all(|v| *v == 0.0));
        assert!(fs.hrv_time_valid[6], "steady window should be valid");
    }
}
