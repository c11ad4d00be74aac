//! Multitaper EEG band powers.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use ndarray::Array2;

use crate::dsp::{dpss_tapers, fft};

use super::BandDefinition;

/// Default multitaper parameters: time-half-bandwidth 4 with 7 tapers.
pub const DEFAULT_NW: f64 = 4.0;
pub const DEFAULT_N_TAPERS: usize = 7;

fn taper_cache() -> &'static Mutex<HashMap<(usize, u64, usize), Arc<Array2<f64>>>> {
    static CACHE: OnceLock<Mutex<HashMap<(usize, u64, usize), Arc<Array2<f64>>>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

fn cached_tapers(n: usize, nw: f64, k: usize) -> Arc<Array2<f64>> {
    let key = (n, nw.to_bits(), k);
    let mut cache = taper_cache().lock().unwrap();
    cache
        .entry(key)
        .or_insert_with(|| Arc::new(dpss_tapers(n, nw, k)))
        .clone()
}

/// One-sided multitaper PSD (power per Hz) of a segment.
pub fn multitaper_psd(segment: &[f64], rate_hz: f64, nw: f64, n_tapers: usize) -> crate::dsp::Psd {
    let n = segment.len();
    let tapers = cached_tapers(n, nw, n_tapers);
    let n_freq = n / 2 + 1;
    let mut acc = vec![0.0; n_freq];
    for k in 0..n_tapers {
        let tapered: Vec<f64> = (0..n).map(|t| tapers[[k, t]] * segment[t]).collect();
        let spec = fft::fft_real(&tapered);
        for (f, a) in acc.iter_mut().enumerate() {
            *a += spec[f].norm_sqr();
        }
    }
    // Tapers are unit-energy, so the density scale is 1/(K * fs), doubled
    // away from DC/Nyquist for the one-sided spectrum.
    let scale = 1.0 / (n_tapers as f64 * rate_hz);
    let df = rate_hz / n as f64;
    let values: Vec<f64> = acc
        .iter()
        .enumerate()
        .map(|(f, a)| {
            let one_sided = if f == 0 || (n % 2 == 0 && f == n_freq - 1) { 1.0 } else { 2.0 };
            a * scale * one_sided
        })
        .collect();
    crate::dsp::Psd {
        freqs: (0..n_freq).map(|f| f as f64 * df).collect(),
        values,
        df,
    }
}

/// Absolute band powers (uV^2 for EEG in microvolts) from the multitaper
/// PSD. An all-zero or non-finite segment yields zero powers and a false
/// validity flag. Bands are integrated half-open `[low, high)`; a band
/// ending at Nyquist includes the closing edge.
pub fn multitaper_bandpower(
    segment: &[f64],
    rate_hz: f64,
    bands: &[BandDefinition],
) -> (Vec<f64>, bool) {
    assert!(segment.len() as f64 >= 2.0 * rate_hz, "segment shorter than 2 s");
    let degenerate = segment.iter().all(|v| *v == 0.0) || segment.iter().any(|v| !v.is_finite());
    if degenerate {
        return (vec![0.0; bands.len()], false);
    }
    let psd = multitaper_psd(segment, rate_hz, DEFAULT_NW, DEFAULT_N_TAPERS);
    let nyquist = rate_hz / 2.0;
    let powers: Vec<f64> = bands
        .iter()
        .map(|b| {
            let include_upper = b.high_hz >= nyquist - 1e-9;
            crate::dsp::band_power(&psd, b.low_hz, b.high_hz, include_upper)
        })
        .collect();
    let valid = powers.iter().all(|p| p.is_finite());
    (powers, valid)
}
