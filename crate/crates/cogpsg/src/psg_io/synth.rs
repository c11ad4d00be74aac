//! Deterministic synthetic PSG cohorts with a plantable class signal.
//!
//! Each subject gets an EEG-like channel built from band-limited noise in
//! the six standard bands plus occasional 12-15 Hz spindle bursts, and an
//! ECG-like channel built from a jittered QRS impulse train. A latent binary
//! class is planted: "high" subjects carry `(1 + effect/2)x` alpha-band
//! power and `(1 + effect/2)x` beat-to-beat jitter, and scores are drawn so
//! that a median split recovers the planted class exactly at full effect
//! strength and carries no information at zero effect.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex64;

use crate::dsp::fft;

use super::{Channel, PsgIoError, Recording, SynthCohortSpec};

/// Channel names used by synthetic cohorts (same shape as a minimal clinical
/// montage: raw C3, mastoid reference, one ECG lead).
pub const EEG_CHANNEL: &str = "C3";
pub const REF_CHANNEL: &str = "M2";
pub const ECG_CHANNEL: &str = "ECG-I";

/// Base band amplitudes in microvolts RMS: delta, theta, alpha, sigma,
/// beta, gamma.
const BAND_AMPS_UV: [(f64, f64, f64); 6] = [
    (0.5, 4.0, 20.0),
    (4.0, 8.0, 8.0),
    (8.0, 12.0, 10.0),
    (12.0, 16.0, 4.0),
    (16.0, 30.0, 3.0),
    (30.0, 34.9, 1.5),
];

/// Within-class log-amplitude spread per band.
const AMP_LOG_SD: f64 = 0.03;

#[derive(Debug, Clone)]
pub struct SynthCohort {
    pub recordings: Vec<Recording>,
    pub scores: BTreeMap<String, f64>,
    /// Planted ground-truth class per subject (0 low, 1 high).
    pub labels: BTreeMap<String, u8>,
}

/// Generates a cohort. Pure function of the spec: identical specs yield
/// bit-identical cohorts, and subjects are independent streams so the loop
/// can be parallelized without changing results.
pub fn generate_synthetic_cohort(spec: &SynthCohortSpec) -> SynthCohort {
    spec.validate().expect("invalid synthetic cohort spec");
    let mut recordings = Vec::with_capacity(spec.n_subjects);
    let mut scores = BTreeMap::new();
    let mut labels = BTreeMap::new();
    for idx in 0..spec.n_subjects {
        let subject = generate_subject(spec, idx);
        scores.insert(subject.recording.subject_id.clone(), subject.score);
        labels.insert(subject.recording.subject_id.clone(), subject.label);
        recordings.push(subject.recording);
    }
    SynthCohort { recordings, scores, labels }
}

pub struct SynthSubject {
    pub recording: Recording,
    pub score: f64,
    pub label: u8,
}

/// Generates one subject of the cohort (subjects alternate low/high class).
pub fn generate_subject(spec: &SynthCohortSpec, idx: usize) -> SynthSubject {
    let id = format!("s{idx:04}");
    let label = (idx % 2) as u8;
    let high = label == 1;
    let n = (spec.rate_hz * spec.duration_s).round() as usize;

    let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(spec.seed, idx as u64, 0));

    // EEG core: spectrally shaped noise, alpha power scaled by class.
    let mut amps = BAND_AMPS_UV;
    for band in &mut amps {
        band.2 *= (AMP_LOG_SD * rng.sample::<f64, _>(StandardNormal)).exp();
    }
    if high {
        amps[2].2 *= (1.0 + 0.5 * spec.effect_strength).sqrt();
    }
    let mut eeg = band_noise(n, spec.rate_hz, &amps, &mut rng);
    add_spindles(&mut eeg, spec.rate_hz, &mut rng);

    // Mastoid reference: independent broadband noise. The stored raw EEG
    // channel is core + reference, so re-referencing recovers the core.
    let m2_hi = (30.0_f64).min(0.49 * spec.rate_hz);
    let m2 = band_noise(n, spec.rate_hz, &[(0.3, m2_hi, 5.0)], &mut rng);
    let c3: Vec<f64> = eeg
        .iter()
        .zip(&m2)
        .map(|(a, b)| quantize(a + b))
        .collect();
    let m2: Vec<f64> = m2.iter().map(|&v| quantize(v)).collect();

    // ECG: QRS impulse train, jitter scaled by class.
    let hr_bpm = 55.0 + 30.0 * rng.random::<f64>();
    let jitter = 0.025 * (1.0 + if high { 0.5 * spec.effect_strength } else { 0.0 });
    let ecg = qrs_train(n, spec.rate_hz, spec.duration_s, hr_bpm, jitter, &mut rng);

    // Score stream is separate from the signal stream so both stay aligned
    // across effect strengths.
    let mut score_rng = ChaCha12Rng::seed_from_u64(mix_seed(spec.seed, idx as u64, 1));
    let sign = if high { 1.0 } else { -1.0 };
    let noise = 2.0 * score_rng.random::<f64>() - 1.0;
    let score = 50.0 + 15.0 * spec.effect_strength * sign + 10.0 * (1.0 - spec.effect_strength) * noise;

    let recording = Recording::new(
        id,
        spec.rate_hz,
        vec![
            Channel { name: EEG_CHANNEL.into(), samples: c3 },
            Channel { name: REF_CHANNEL.into(), samples: m2 },
            Channel { name: ECG_CHANNEL.into(), samples: ecg },
        ],
    );
    SynthSubject { recording, score, label }
}

/// Gaussian noise with a flat spectrum inside each `(low, high, rms)` band,
/// synthesized in the frequency domain with a single inverse FFT.
fn band_noise(n: usize, rate_hz: f64, bands: &[(f64, f64, f64)], rng: &mut ChaCha12Rng) -> Vec<f64> {
    let mut spec = vec![Complex64::new(0.0, 0.0); n];
    for &(lo, hi, rms) in bands {
        let hi = hi.min(0.499 * rate_hz);
        if hi <= lo {
            continue;
        }
        let k_lo = ((lo * n as f64 / rate_hz).ceil() as usize).max(1);
        let k_hi = ((hi * n as f64 / rate_hz).floor() as usize).min(n / 2 - 1);
        if k_hi < k_lo {
            continue;
        }
        let m = (k_hi - k_lo + 1) as f64;
        // Per-bin amplitude so the band's time-domain variance is rms^2.
        let sigma = rms * n as f64 / (2.0 * m).sqrt() / 2.0_f64.sqrt();
        for k in k_lo..=k_hi {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            spec[k] = Complex64::new(sigma * re, sigma * im);
            spec[n - k] = spec[k].conj();
        }
    }
    fft::ifft(&spec).iter().map(|c| c.re).collect()
}

/// Adds 1-second, 13 Hz Hann-windowed bursts at exponentially distributed
/// intervals (mean 45 s).
fn add_spindles(signal: &mut [f64], rate_hz: f64, rng: &mut ChaCha12Rng) {
    let n = signal.len();
    let duration = n as f64 / rate_hz;
    let burst_len = 1.0;
    let amp = 8.0;
    let mut t = 0.0;
    loop {
        let u: f64 = rng.random::<f64>().max(1e-12);
        t += -45.0 * u.ln();
        if t + burst_len >= duration {
            break;
        }
        let start = (t * rate_hz) as usize;
        let len = (burst_len * rate_hz) as usize;
        for i in 0..len.min(n - start) {
            let phase = 2.0 * std::f64::consts::PI * 13.0 * i as f64 / rate_hz;
            let hann = 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / len as f64).cos());
            signal[start + i] += amp * hann * phase.sin();
        }
    }
}

/// Smoothed impulse train in millivolts with mean heart rate `hr_bpm` and
/// multiplicative beat-to-beat jitter.
fn qrs_train(
    n: usize,
    rate_hz: f64,
    duration_s: f64,
    hr_bpm: f64,
    jitter_frac: f64,
    rng: &mut ChaCha12Rng,
) -> Vec<f64> {
    let rr_base = 60.0 / hr_bpm;
    let mut out: Vec<f64> = (0..n)
        .map(|_| 0.01 * rng.sample::<f64, _>(StandardNormal))
        .collect();

    let qrs_sigma_s = 0.012;
    let mut t = 0.3 + rr_base * rng.random::<f64>();
    while t < duration_s - 0.1 {
        let amp = 1.2 * (1.0 + 0.05 * rng.sample::<f64, _>(StandardNormal));
        let center = t * rate_hz;
        let center_idx = center.round() as i64;
        for offset in -4i64..=4 {
            let idx = center_idx + offset;
            if idx < 0 || idx as usize >= n {
                continue;
            }
            let dt = idx as f64 / rate_hz - t;
            out[idx as usize] += amp * (-0.5 * (dt / qrs_sigma_s).powi(2)).exp();
        }
        let eps: f64 = rng.sample::<f64, _>(StandardNormal);
        let rr = rr_base * (1.0 + jitter_frac * eps.clamp(-3.0, 3.0));
        t += rr.max(0.25 * rr_base);
    }
    for v in &mut out {
        *v = quantize(*v);
    }
    out
}

/// Samples are rounded to f32 so that in-memory cohorts survive the f32
/// container round trip bit-exactly.
fn quantize(v: f64) -> f64 {
    v as f32 as f64
}

fn mix_seed(seed: u64, idx: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(idx.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(stream.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Writes all recordings, the score table and the planted labels into `dir`.
pub fn write_cohort(dir: &Path, cohort: &SynthCohort) -> Result<(), PsgIoError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| PsgIoError::Io { path: dir.display().to_string(), source: e })?;
    for rec in &cohort.recordings {
        let path = dir.join(format!("{}.psg", rec.subject_id));
        super::write_recording(&path, rec)?;
    }
    super::write_score_table(&dir.join("scores.csv"), &cohort.scores)?;
    let labels_path = dir.join("labels.json");
    std::fs::write(&labels_path, serde_json::to_string_pretty(&cohort.labels).unwrap())
        .map_err(|e| PsgIoError::Io { path: labels_path.display().to_string(), source: e })?;
    Ok(())
}
