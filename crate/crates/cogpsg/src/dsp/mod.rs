//! Signal-processing primitives shared by the preprocessing and feature
//! stages: FFT helpers, IIR filter design, Fourier resampling, Slepian
//! tapers, Welch spectra and cubic interpolation.

pub mod butter;
pub mod dpss;
pub mod fft;
pub mod resample;
pub mod spline;
pub mod welch;

pub use butter::Sos;
pub use dpss::dpss_tapers;
pub use resample::resample;
pub use spline::CubicSpline;
pub use welch::{band_power, welch_psd, Psd};
