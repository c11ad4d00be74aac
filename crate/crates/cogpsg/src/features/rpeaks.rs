//! QRS detection: band-pass, differentiate, square, integrate, adaptive
//! threshold, with peak refinement on the raw signal and a 250 ms
//! refractory period.

use crate::dsp::Sos;

use super::FeatureError;

/// Refractory period between accepted beats.
pub const REFRACTORY_S: f64 = 0.25;
const INTEGRATION_WINDOW_S: f64 = 0.15;

/// Detects R-peak sample indices (strictly increasing). The signal must
/// cover at least 10 seconds.
pub fn detect_rpeaks(ecg: &[f64], rate_hz: f64) -> Result<Vec<usize>, FeatureError> {
    assert!(ecg.len() as f64 >= 10.0 * rate_hz, "need at least 10 s of ECG");
    let max_abs = ecg.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if max_abs <= 0.0 {
        return Err(FeatureError::NoPeaks);
    }

    // QRS emphasis band; clamp for low sampling rates.
    let high = 15.0_f64.min(0.45 * rate_hz);
    let low = 5.0_f64.min(high / 3.0);
    let band = Sos::butter_bandpass(2, low, high, rate_hz)
        .map(|sos| sos.filtfilt(ecg))
        .unwrap_or_else(|_| ecg.to_vec());

    // Central-difference derivative, squared.
    let n = ecg.len();
    let mut energy = vec![0.0; n];
    for i in 1..n - 1 {
        let d = (band[i + 1] - band[i - 1]) * 0.5;
        energy[i] = d * d;
    }

    // Moving-window integration.
    let win = ((INTEGRATION_WINDOW_S * rate_hz).round() as usize).max(1);
    let mut integ = vec![0.0; n];
    let mut acc = 0.0;
    for i in 0..n {
        acc += energy[i];
        if i >= win {
            acc -= energy[i - win];
        }
        integ[i] = acc / win as f64;
    }

    let refractory = (REFRACTORY_S * rate_hz).round() as usize;

    // Candidate local maxima of the integrated signal, spaced by the
    // refractory period.
    let mut candidates: Vec<usize> = Vec::new();
    let mut i = 1;
    while i + 1 < n {
        if integ[i] >= integ[i - 1] && integ[i] >= integ[i + 1] && integ[i] > 0.0 {
            if let Some(&last) = candidates.last() {
                if i - last < refractory {
                    if integ[i] > integ[last] {
                        *candidates.last_mut().unwrap() = i;
                    }
                    i += 1;
                    continue;
                }
            }
            candidates.push(i);
        }
        i += 1;
    }
    if candidates.is_empty() {
        return Err(FeatureError::NoPeaks);
    }

    // Adaptive signal/noise levels over the candidate peaks.
    let learn_n = ((2.0 * rate_hz) as usize).min(n);
    let learn_max = integ[..learn_n].iter().fold(0.0_f64, |m, v| m.max(*v));
    let global_max = integ.iter().fold(0.0_f64, |m, v| m.max(*v));
    let mut spk = if learn_max > 0.0 { learn_max } else { global_max };
    let mut npk = spk * 0.1;
    let mut accepted: Vec<usize> = Vec::new();
    for &c in &candidates {
        let threshold = npk + 0.25 * (spk - npk);
        if integ[c] >= threshold && integ[c] > 1e-12 * global_max {
            spk = 0.125 * integ[c] + 0.875 * spk;
            accepted.push(c);
        } else {
            npk = 0.125 * integ[c] + 0.875 * npk;
        }
    }
    if accepted.is_empty() {
        return Err(FeatureError::NoPeaks);
    }

    // Refine each detection to the raw-signal maximum in a trailing window
    // (the integrator peaks after the R wave).
    let search = win + (0.1 * rate_hz) as usize;
    let mut peaks: Vec<usize> = Vec::with_capacity(accepted.len());
    for &c in &accepted {
        let lo = c.saturating_sub(search);
        let hi = (c + win / 2 + 1).min(n);
        let best = (lo..hi)
            .max_by(|&a, &b| ecg[a].total_cmp(&ecg[b]))
            .unwrap_or(c);
        peaks.push(best);
    }
    peaks.sort_unstable();
    peaks.dedup();

    // Refractory on the refined locations: keep the taller beat.
    let mut out: Vec<usize> = Vec::with_capacity(peaks.len());
    for p in peaks {
        match out.last() {
            Some(&last) if p - last < refractory => {
                if ecg[p] > ecg[last] {
                    *out.last_mut().unwrap() = p;
                }
            }
            _ => out.push(p),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn impulse_train(rate: f64, secs: f64, bpm: f64) -> Vec<f64> {
        let n = (rate * secs) as usize;
        let mut x = vec![0.0; n];
        let period = 60.0 / bpm;
        let mut t = 0.5;
        while t < secs {
            let idx = (t * rate).round() as usize;
            if idx < n {
                x[idx] = 1.0;
            }
            t += period;
        }
        x
    }

    #[test]
    fn sixty_bpm_train_yields_one_peak_per_second() {
        let rate = 70.0;
        let x = impulse_train(rate, 120.0, 60.0);
        let peaks = detect_rpeaks(&x, rate).unwrap();
        assert!(
            (peaks.len() as i64 - 120).abs() <= 1,
            "{} peaks detected",
            peaks.len()
        );
        for gap in peaks.windows(2) {
            let d = gap[1] - gap[0];
            assert!((d as i64 - 70).abs() <= 1, "gap {d}");
        }
    }

    #[test]
    fn flat_signal_has_no_peaks() {
        let x = vec![0.0; 70 * 30];
        assert!(matches!(detect_rpeaks(&x, 70.0), Err(FeatureError::NoPeaks)));
    }

    #[test]
    fn deleted_beat_shows_up_as_double_interval() {
        let rate = 70.0;
        let mut x = impulse_train(rate, 120.0, 60.0);
        // Remove the beat near t = 60.5 s.
        let victim = (60.5 * rate).round() as usize;
        for v in &mut x[victim - 2..victim + 3] {
            *v = 0.0;
        }
        let peaks = detect_rpeaks(&x, rate).unwrap();
        let rr_ms: Vec<f64> = peaks
            .windows(2)
            .map(|w| (w[1] - w[0]) as f64 / rate * 1000.0)
            .collect();
        let long: Vec<&f64> = rr_ms.iter().filter(|r| **r > 1500.0).collect();
        assert_eq!(long.len(), 1, "rr intervals {rr_ms:?}");
        assert!((*long[0] - 2000.0).abs() < 30.0);
        assert!(rr_ms.iter().filter(|r| **r <= 1500.0).all(|r| (r - 1000.0).abs() < 30.0));
    }

    #[test]
    fn detection_tracks_rate_extremes() {
        let rate = 70.0;
        for bpm in [40.0, 100.0] {
            let x = impulse_train(rate, 120.0, bpm);
            let truth: Vec<usize> = {
                let mut t = 0.5;
                let mut v = Vec::new();
                while t < 120.0 {
                    v.push((t * rate).round() as usize);
                    t += 60.0 / bpm;
                }
                v
            };
            let peaks = detect_rpeaks(&x, rate).unwrap();
            let tol = (0.05 * rate) as i64;
            let hits = peaks
                .iter()
                .filter(|p| truth.iter().any(|t| (**p as i64 - *t as i64).abs() <= tol))
                .count();
            let recall = hits as f64 / truth.len() as f64;
            let precision = hits as f64 / peaks.len() as f64;
            assert!(recall >= 0.99, "bpm {bpm} recall {recall}");
            assert!(precision >= 0.99, "bpm {bpm} precision {precision}");
        }
    }
}
