//! Heart-rate-variability statistics over RR interval series.

use crate::dsp::{band_power, welch_psd, CubicSpline};

use super::FeatureError;

/// Successive R-to-R intervals in milliseconds, anchored at the time of the
/// first interval's closing beat.
#[derive(Debug, Clone, PartialEq)]
pub struct RRSeries {
    pub intervals_ms: Vec<f64>,
    pub t_start_s: f64,
}

impl RRSeries {
    pub fn new(intervals_ms: Vec<f64>, t_start_s: f64) -> RRSeries {
        assert!(intervals_ms.iter().all(|v| *v > 0.0), "RR intervals must be positive");
        RRSeries { intervals_ms, t_start_s }
    }

    /// Time span covered by the intervals, in seconds.
    pub fn span_s(&self) -> f64 {
        self.intervals_ms.iter().sum::<f64>() / 1000.0
    }
}

/// Time-domain HRV statistics. `sdrmssd` is the SDNN-to-RMSSD ratio and is
/// reported as 0 with `sdrmssd_valid == false` when RMSSD is zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeHrv {
    pub mean_nn: f64,
    pub sdnn: f64,
    pub rmssd: f64,
    pub cvnn: f64,
    pub sdrmssd: f64,
    pub pnn20: f64,
    pub sdrmssd_valid: bool,
}

impl TimeHrv {
    pub fn as_array(&self) -> [f64; 6] {
        [self.mean_nn, self.sdnn, self.rmssd, self.cvnn, self.sdrmssd, self.pnn20]
    }
}

/// MeanNN, SDNN (population), RMSSD, CVNN, SDRMSSD and pNN20 (strict
/// `> 20 ms`). Needs at least 3 intervals.
pub fn time_hrv(rr: &RRSeries) -> Result<TimeHrv, FeatureError> {
    let x = &rr.intervals_ms;
    if x.len() < 3 {
        return Err(FeatureError::TooFewBeats { got: x.len(), need: 3 });
    }
    let n = x.len() as f64;
    let mean_nn = x.iter().sum::<f64>() / n;
    let sdnn = (x.iter().map(|v| (v - mean_nn) * (v - mean_nn)).sum::<f64>() / n).sqrt();
    let diffs: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
    let rmssd = (diffs.iter().map(|d| d * d).sum::<f64>() / diffs.len() as f64).sqrt();
    let cvnn = sdnn / mean_nn;
    let (sdrmssd, sdrmssd_valid) = if rmssd > 0.0 { (sdnn / rmssd, true) } else { (0.0, false) };
    let pnn20 = 100.0 * diffs.iter().filter(|d| d.abs() > 20.0).count() as f64 / diffs.len() as f64;
    Ok(TimeHrv { mean_nn, sdnn, rmssd, cvnn, sdrmssd, pnn20, sdrmssd_valid })
}

/// Frequency-domain HRV. `lf_hf` is reported as 0 with
/// `lf_hf_valid == false` when the HF power vanishes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FreqHrv {
    pub vlf: f64,
    pub lf: f64,
    pub hf: f64,
    pub lf_hf: f64,
    pub tp: f64,
    pub lf_hf_valid: bool,
}

impl FreqHrv {
    pub fn as_array(&self) -> [f64; 5] {
        [self.vlf, self.lf, self.hf, self.lf_hf, self.tp]
    }
}

/// Grid rate for the interpolated tachogram.
pub const RR_GRID_HZ: f64 = 4.0;
/// Task-force band edges in Hz: VLF, LF, HF.
pub const VLF_BAND: (f64, f64) = (0.0033, 0.04);
pub const LF_BAND: (f64, f64) = (0.04, 0.15);
pub const HF_BAND: (f64, f64) = (0.15, 0.40);

/// VLF/LF/HF/LF-HF-ratio/total power (ms^2) of the RR tachogram: cubic
/// interpolation onto a 4 Hz grid, linear detrend, Welch PSD. Needs at
/// least 10 intervals spanning at least 120 s.
pub fn freq_hrv(rr: &RRSeries) -> Result<FreqHrv, FeatureError> {
    let x = &rr.intervals_ms;
    if x.len() < 10 {
        return Err(FeatureError::TooFewBeats { got: x.len(), need: 10 });
    }
    if rr.span_s() < 120.0 {
        return Err(FeatureError::WindowTooSparse { span_s: rr.span_s() });
    }

    // Beat times at the close of each interval.
    let mut times = Vec::with_capacity(x.len());
    let mut t = rr.t_start_s;
    for v in x {
        t += v / 1000.0;
        times.push(t);
    }
    let spline = CubicSpline::new(&times, x);
    let t0 = times[0];
    let t1 = times[times.len() - 1];
    let n_grid = ((t1 - t0) * RR_GRID_HZ).floor() as usize + 1;
    let mut grid: Vec<f64> = (0..n_grid)
        .map(|i| spline.eval(t0 + i as f64 / RR_GRID_HZ))
        .collect();
    detrend_linear(&mut grid);

    let nperseg = 256.min(grid.len());
    let psd = welch_psd(&grid, RR_GRID_HZ, nperseg, nperseg / 2);
    let vlf = band_power(&psd, VLF_BAND.0, VLF_BAND.1, false);
    let lf = band_power(&psd, LF_BAND.0, LF_BAND.1, false);
    let hf = band_power(&psd, HF_BAND.0, HF_BAND.1, false);
    let tp = band_power(&psd, VLF_BAND.0, HF_BAND.1, false);
    let (lf_hf, lf_hf_valid) = if hf > 0.0 { (lf / hf, true) } else { (0.0, false) };
    Ok(FreqHrv { vlf, lf, hf, lf_hf, tp, lf_hf_valid })
}

/// Removes the least-squares line in place.
pub fn detrend_linear(x: &mut [f64]) {
    let n = x.len();
    if n < 2 {
        return;
    }
    let nf = n as f64;
    let t_mean = (nf - 1.0) / 2.0;
    let x_mean = x.iter().sum::<f64>() / nf;
    let mut cov = 0.0;
    let mut var = 0.0;
    for (i, v) in x.iter().enumerate() {
        let dt = i as f64 - t_mean;
        cov += dt * (v - x_mean);
        var += dt * dt;
    }
    let slope = if var > 0.0 { cov / var } else { 0.0 };
    for (i, v) in x.iter_mut().enumerate() {
        *v -= x_mean + slope * (i as f64 - t_mean);
    }
}
