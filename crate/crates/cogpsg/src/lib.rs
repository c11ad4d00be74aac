//! # cogpsg — sleep-signal modeling toolkit
//!
//! A config-driven pipeline that goes from raw polysomnography recordings to
//! subject-level cognition-class predictions:
//!
//! ```text
//! recordings (or synthetic cohorts)
//!   │  psg_io       container I/O, cohort filtering, synthesis
//!   │  preprocess   re-reference → band-pass → artifact mask → crop → segment → z-score
//!   │  features     EEG band powers (multitaper), HRV time/frequency series
//!   │  model        multi-scale conv-Transformer family + baselines
//!   │  training     median-split labels, subject-wise k-fold CV, Adam/BCE
//!   └─ reports      per-fold metrics, architecture comparison tables
//! ```
//!
//! Every stage is deterministic under a fixed seed, and every stage is usable
//! on its own. The `cogpsg` binary chains them (`synth`, `prepare`, `train`,
//! `report`).

pub mod dsp;
pub mod features;
pub mod model;
pub mod preprocess;
pub mod psg_io;

pub use psg_io::{CohortManifest, Recording, SynthCohortSpec};
