//! Butterworth band-pass design (bilinear transform, second-order sections)
//! and zero-phase forward-backward filtering.

use rustfft::num_complex::Complex64;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum FilterError {
    /// Band edges must satisfy 0 < low < high < fs/2.
    #[error("invalid band: low {low} Hz, high {high} Hz at fs {fs} Hz")]
    InvalidBand { low: f64, high: f64, fs: f64 },
    #[error("pole pairing failed; band is degenerate for this order")]
    Degenerate,
}

/// One second-order section with a0 normalized to 1.
#[derive(Debug, Clone, Copy)]
pub struct Biquad {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub a1: f64,
    pub a2: f64,
}

impl Biquad {
    /// DC gain H(z=1).
    fn dc_gain(&self) -> f64 {
        (self.b0 + self.b1 + self.b2) / (1.0 + self.a1 + self.a2)
    }

    /// Steady-state filter state for a unit-step input (direct form II
    /// transposed), so that constant inputs produce no start-up transient.
    /// Solves the DF2T fixed point:
    ///   y  = b0 + z1;  z1 = b1 - a1*y + z2;  z2 = b2 - a2*y
    fn step_zi(&self) -> (f64, f64) {
        let denom = 1.0 + self.a1 + self.a2;
        let z1 = (self.b1 + self.b2 - (self.a1 + self.a2) * self.b0) / denom;
        let y = self.b0 + z1;
        let z2 = self.b2 - self.a2 * y;
        (z1, z2)
    }
}

/// A cascade of second-order sections.
#[derive(Debug, Clone)]
pub struct Sos {
    sections: Vec<Biquad>,
}

impl Sos {
    /// Designs a Butterworth band-pass filter of the given prototype order
    /// (an order-n prototype yields a 2n-pole band-pass, i.e. n sections).
    pub fn butter_bandpass(order: usize, low_hz: f64, high_hz: f64, fs: f64) -> Result<Sos, FilterError> {
        if !(low_hz > 0.0 && low_hz < high_hz && high_hz < fs / 2.0) || order == 0 {
            return Err(FilterError::InvalidBand { low: low_hz, high: high_hz, fs });
        }

        // Analog prototype poles on the unit circle, left half-plane.
        let n = order;
        let proto: Vec<Complex64> = (0..n)
            .map(|k| {
                let theta = std::f64::consts::PI * (2.0 * k as f64 + 1.0) / (2.0 * n as f64)
                    + std::f64::consts::FRAC_PI_2;
                Complex64::from_polar(1.0, theta)
            })
            .collect();

        // Pre-warped band edges for the bilinear transform.
        let fs2 = 2.0 * fs;
        let warp = |f: f64| fs2 * (std::f64::consts::PI * f / fs).tan();
        let wl = warp(low_hz);
        let wh = warp(high_hz);
        let bw = wh - wl;
        let w0 = (wl * wh).sqrt();

        // Low-pass -> band-pass: each prototype pole splits in two.
        let mut poles: Vec<Complex64> = Vec::with_capacity(2 * n);
        for &p in &proto {
            let a = p * (bw / 2.0);
            let disc = (a * a - Complex64::new(w0 * w0, 0.0)).sqrt();
            poles.push(a + disc);
            poles.push(a - disc);
        }
        let gain_analog = bw.powi(n as i32);

        // Bilinear transform of poles; n zeros at z=+1 (from s=0) and n at
        // z=-1 (degree deficit).
        let k_num = Complex64::new(fs2.powi(n as i32), 0.0);
        let mut k_den = Complex64::new(1.0, 0.0);
        let zpoles: Vec<Complex64> = poles
            .iter()
            .map(|&s| {
                k_den *= fs2 - s;
                (Complex64::new(fs2, 0.0) + s) / (Complex64::new(fs2, 0.0) - s)
            })
            .collect();
        let gain = gain_analog * (k_num / k_den).re;

        // Pair complex-conjugate poles into sections.
        let mut upper: Vec<Complex64> = zpoles.iter().copied().filter(|p| p.im > 1e-12).collect();
        if upper.len() != n {
            return Err(FilterError::Degenerate);
        }
        upper.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));

        let mag = gain.abs().powf(1.0 / n as f64);
        let mut sections: Vec<Biquad> = upper
            .iter()
            .map(|p| Biquad {
                b0: mag,
                b1: 0.0,
                b2: -mag,
                a1: -2.0 * p.re,
                a2: p.norm_sqr(),
            })
            .collect();
        if gain < 0.0 {
            sections[0].b0 = -sections[0].b0;
            sections[0].b2 = -sections[0].b2;
        }
        Ok(Sos { sections })
    }

    pub fn n_sections(&self) -> usize {
        self.sections.len()
    }

    /// Single-pass causal filtering with steady-state initial conditions
    /// scaled to the first sample.
    pub fn filter(&self, x: &[f64]) -> Vec<f64> {
        let mut y = x.to_vec();
        self.filter_in_place(&mut y);
        y
    }

    fn filter_in_place(&self, buf: &mut [f64]) {
        if buf.is_empty() {
            return;
        }
        let x0 = buf[0];
        let mut dc_scale = 1.0;
        for sec in &self.sections {
            let (zi1, zi2) = sec.step_zi();
            let mut z1 = zi1 * x0 * dc_scale;
            let mut z2 = zi2 * x0 * dc_scale;
            for v in buf.iter_mut() {
                let x = *v;
                let y = sec.b0 * x + z1;
                z1 = sec.b1 * x - sec.a1 * y + z2;
                z2 = sec.b2 * x - sec.a2 * y;
                *v = y;
            }
            dc_scale *= sec.dc_gain();
        }
    }

    /// Zero-phase filtering: forward pass, backward pass, with odd-reflection
    /// padding at both ends. Output length equals input length. The pad is
    /// sized from the slowest pole so that narrow band edges settle before
    /// the true signal starts.
    pub fn filtfilt(&self, x: &[f64]) -> Vec<f64> {
        if x.is_empty() {
            return Vec::new();
        }
        let max_radius = self
            .sections
            .iter()
            .map(|s| s.a2.abs().sqrt())
            .fold(0.0_f64, f64::max)
            .min(1.0 - 1e-9);
        let time_const = if max_radius > 0.0 { -1.0 / max_radius.ln() } else { 1.0 };
        let padlen = ((8.0 * time_const).ceil() as usize)
            .max(3 * (2 * self.sections.len() + 1))
            .min(x.len().saturating_sub(1));
        let n = x.len();
        let mut ext = Vec::with_capacity(n + 2 * padlen);
        for i in (1..=padlen).rev() {
            ext.push(2.0 * x[0] - x[i]);
        }
        ext.extend_from_slice(x);
        for i in (1..=padlen).rev() {
            ext.push(2.0 * x[n - 1] - x[n - 1 - i]);
        }

        self.filter_in_place(&mut ext);
        ext.reverse();
        self.filter_in_place(&mut ext);
        ext.reverse();
        ext[padlen..padlen + n].to_vec()
    }

    /// Complex frequency response at `f_hz` for sampling rate `fs`.
    pub fn freq_response(&self, f_hz: f64, fs: f64) -> Complex64 {
        let w = 2.0 * std::f64::consts::PI * f_hz / fs;
        let z1 = Complex64::from_polar(1.0, -w);
        let z2 = z1 * z1;
        let mut h = Complex64::new(1.0, 0.0);
        for s in &self.sections {
            h *= (s.b0 + s.b1 * z1 + s.b2 * z2) / (1.0 + s.a1 * z1 + s.a2 * z2);
        }
        h
    }
}
