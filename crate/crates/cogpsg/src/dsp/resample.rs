//! Band-limited (Fourier-domain) resampling.

use super::fft;
use rustfft::num_complex::Complex64;

/// Resamples `x` from `from_hz` to `to_hz` by spectral truncation or
/// zero-padding. Output length is `round(len * to_hz / from_hz)`; the total
/// duration is preserved within one sample period. Downsampling is
/// anti-aliased by construction (frequencies above the new Nyquist are cut).
pub fn resample(x: &[f64], from_hz: f64, to_hz: f64) -> Vec<f64> {
    assert!(from_hz > 0.0 && to_hz > 0.0, "rates must be positive");
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let m = ((n as f64) * to_hz / from_hz).round() as usize;
    if m == n {
        return x.to_vec();
    }
    if m == 0 {
        return Vec::new();
    }

    let spec = fft::fft_real(x);
    let mut out = vec![Complex64::new(0.0, 0.0); m];
    let keep = n.min(m);
    let half = keep / 2;

    out[0] = spec[0];
    for k in 1..half + keep % 2 {
        out[k] = spec[k];
        out[m - k] = spec[n - k];
    }
    if keep % 2 == 0 && half > 0 {
        if m < n {
            // Fold both old bins that alias onto the new Nyquist.
            out[half] = spec[half] + spec[n - half];
        } else {
            // Split the old Nyquist bin conjugately.
            out[half] = spec[half] * 0.5;
            out[m - half] = spec[half] * 0.5;
        }
    }

    let scale = m as f64 / n as f64;
    fft::ifft(&out).iter().map(|c| c.re * scale).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn length_follows_rate_ratio() {
        let x = vec![0.0; 1000];
        assert_eq!(resample(&x, 256.0, 70.0).len(), 273);
        assert_eq!(resample(&x, 70.0, 256.0).len(), 3657);
    }

    #[test]
    fn identity_rate_is_exact() {
        let x: Vec<f64> = (0..500).map(|i| (i as f64 * 0.1).sin()).collect();
        let y = resample(&x, 128.0, 128.0);
        let rms: f64 = x
            .iter()
            .zip(&y)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
            / (x.len() as f64).sqrt();
        assert!(rms < 1e-9);
    }

    #[test]
    fn sine_survives_downsampling() {
        // 5 Hz tone, 8 s at 256 Hz -> 70 Hz. FFT oracle on the output: the
        // dominant bin must sit at 5 Hz with amplitude within 2%.
        let (from, to, secs) = (256.0, 70.0, 8.0);
        let n = (from * secs) as usize;
        let x: Vec<f64> = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * 5.0 * i as f64 / from).sin())
            .collect();
        let y = resample(&x, from, to);
        assert_eq!(y.len(), (n as f64 * to / from).round() as usize);

        let spec = crate::dsp::fft::fft_real(&y);
        let m = y.len();
        let (peak_bin, peak_mag) = spec
            .iter()
            .take(m / 2)
            .enumerate()
            .map(|(i, c)| (i, c.norm()))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        let peak_hz = peak_bin as f64 * to / m as f64;
        assert!((peak_hz - 5.0).abs() < 0.51 * to / m as f64);
        let amplitude = 2.0 * peak_mag / m as f64;
        assert!((amplitude - 1.0).abs() < 0.02, "amplitude {amplitude}");
    }

    #[test]
    fn duration_preserved_within_one_period() {
        for (n, from, to) in [(1000usize, 256.0, 70.0), (777, 93.5, 70.0), (70, 70.0, 200.0)] {
            let x = vec![1.0; n];
            let y = resample(&x, from, to);
            let d_in = n as f64 / from;
            let d_out = y.len() as f64 / to;
            assert!((d_in - d_out).abs() <= 1.0 / to + 1e-12);
        }
    }
}
