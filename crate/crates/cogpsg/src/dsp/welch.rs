//! Welch power spectral density estimation.

/// One-sided PSD on a uniform frequency grid.
#[derive(Debug, Clone)]
pub struct Psd {
    pub freqs: Vec<f64>,
    pub values: Vec<f64>,
    pub df: f64,
}

/// Welch estimate with a periodic Hann window, 50% overlap by default
/// convention of the callers, and per-segment mean removal. `nperseg` is
/// clamped to the signal length.
pub fn welch_psd(x: &[f64], fs: f64, nperseg: usize, noverlap: usize) -> Psd {
    assert!(!x.is_empty(), "empty signal");
    let nseg = nperseg.min(x.len()).max(2);
    let step = nseg - noverlap.min(nseg - 1);
    let window: Vec<f64> = (0..nseg)
        .map(|i| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / nseg as f64).cos()))
        .collect();
    let win_sumsq: f64 = window.iter().map(|w| w * w).sum();
    let scale = 1.0 / (fs * win_sumsq);

    let n_freq = nseg / 2 + 1;
    let mut acc = vec![0.0; n_freq];
    let mut count = 0usize;
    let mut start = 0usize;
    while start + nseg <= x.len() {
        let seg = &x[start..start + nseg];
        let mean = seg.iter().sum::<f64>() / nseg as f64;
        let tapered: Vec<f64> = seg
            .iter()
            .zip(&window)
            .map(|(v, w)| (v - mean) * w)
            .collect();
        let spec = super::fft::fft_real(&tapered);
        for (k, a) in acc.iter_mut().enumerate() {
            let mut p = spec[k].norm_sqr() * scale;
            if k != 0 && !(nseg % 2 == 0 && k == n_freq - 1) {
                p *= 2.0;
            }
            *a += p;
        }
        count += 1;
        start += step;
    }
    if count == 0 {
        // Signal shorter than one segment after clamping cannot happen, but
        // guard the loop anyway.
        count = 1;
    }
    let df = fs / nseg as f64;
    Psd {
        freqs: (0..n_freq).map(|k| k as f64 * df).collect(),
        values: acc.iter().map(|a| a / count as f64).collect(),
        df,
    }
}

/// Integrated power over `[low, high)` (rectangle rule over bins). When
/// `include_upper` is set the closing edge is included, which matters for a
/// band that ends exactly at Nyquist.
pub fn band_power(psd: &Psd, low: f64, high: f64, include_upper: bool) -> f64 {
    psd.freqs
        .iter()
        .zip(&psd.values)
        .filter(|(f, _)| **f >= low && (**f < high || (include_upper && (**f - high).abs() < 1e-12)))
        .map(|(_, v)| v * psd.df)
        .sum()
}
