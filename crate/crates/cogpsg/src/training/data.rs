//! Subject tensors as the model consumes them, and batch assembly.

use std::collections::BTreeMap;

use ndarray::{s, Array2, Array3};

use crate::features::FeatureSet;
use crate::model::BatchInputs;
use crate::preprocess::{zscore_columns, PreprocessedSubject};

/// One subject's model-ready tensors: raw segment grids (already z-scored
/// and artifact-masked) and per-subject column-normalized feature series.
#[derive(Debug, Clone)]
pub struct SubjectData {
    pub subject_id: String,
    pub eeg_raw: Array2<f64>,
    pub ecg_raw: Array2<f64>,
    pub eeg_power: Array2<f64>,
    pub hrv_time: Array2<f64>,
    pub hrv_freq: Array2<f64>,
}

/// A cohort ready for training.
#[derive(Debug, Clone, Default)]
pub struct CohortData {
    pub subjects: Vec<SubjectData>,
    pub labels: BTreeMap<String, u8>,
}

impl CohortData {
    pub fn subject_ids(&self) -> Vec<String> {
        self.subjects.iter().map(|s| s.subject_id.clone()).collect()
    }

    pub fn subject(&self, id: &str) -> Option<&SubjectData> {
        self.subjects.iter().find(|s| s.subject_id == id)
    }
}

/// Builds model inputs from a preprocessed subject and its feature set.
/// Feature columns are z-scored per subject over valid rows; invalid rows
/// stay zero.
pub fn subject_data(pre: &PreprocessedSubject, features: &FeatureSet) -> SubjectData {
    let mut eeg_power = features.eeg_power.clone();
    zscore_columns(&mut eeg_power, Some(&features.eeg_power_valid));
    let mut hrv_time = features.hrv_time.clone();
    zscore_columns(&mut hrv_time, Some(&features.hrv_time_valid));
    let mut hrv_freq = features.hrv_freq.clone();
    zscore_columns(&mut hrv_freq, Some(&features.hrv_freq_valid));
    SubjectData {
        subject_id: pre.subject_id.clone(),
        eeg_raw: pre.eeg_model.data.clone(),
        ecg_raw: pre.ecg_model.data.clone(),
        eeg_power,
        hrv_time,
        hrv_freq,
    }
}

/// Stacks subjects into batch tensors. All subjects must share shapes.
pub fn assemble_batch(subjects: &[&SubjectData]) -> BatchInputs {
    assert!(!subjects.is_empty(), "empty batch");
    let b = subjects.len();
    let stack2 = |get: &dyn Fn(&SubjectData) -> &Array2<f64>| -> Array3<f64> {
        let (rows, cols) = get(subjects[0]).dim();
        let mut out = Array3::zeros((b, rows, cols));
        for (i, subj) in subjects.iter().enumerate() {
            let a = get(subj);
            assert_eq!(a.dim(), (rows, cols), "subject {} has inconsistent shape", subj.subject_id);
            out.slice_mut(s![i, .., ..]).assign(a);
        }
        out
    };
    BatchInputs {
        eeg_raw: stack2(&|s| &s.eeg_raw),
        ecg_raw: stack2(&|s| &s.ecg_raw),
        eeg_power: stack2(&|s| &s.eeg_power),
        hrv_time: stack2(&|s| &s.hrv_time),
        hrv_freq: stack2(&|s| &s.hrv_freq),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy_subject(id: &str, shift: f64) -> SubjectData {
        SubjectData {
            subject_id: id.into(),
            eeg_raw: Array2::from_shape_fn((4, 16), |(a, b)| ((a * 3 + b) as f64 * 0.2).sin() + shift),
            ecg_raw: Array2::from_shape_fn((2, 32), |(a, b)| ((a + b) as f64 * 0.1).cos()),
            eeg_power: Array2::from_elem((4, 6), shift),
            hrv_time: Array2::from_elem((3, 6), -shift),
            hrv_freq: Array2::from_elem((2, 5), 0.0),
        }
    }

    #[test]
    fn batch_assembly_stacks_in_order() {
        let a = toy_subject("a", 1.0);
        let b = toy_subject("b", -1.0);
        let batch = assemble_batch(&[&a, &b]);
        assert_eq!(batch.eeg_raw.dim(), (2, 4, 16));
        assert_eq!(batch.eeg_raw.slice(s![0, .., ..]), a.eeg_raw);
        assert_eq!(batch.eeg_raw.slice(s![1, .., ..]), b.eeg_raw);
    }
}
