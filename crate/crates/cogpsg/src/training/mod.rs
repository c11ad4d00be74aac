//! Training harness: median-split labeling, subject-wise k-fold
//! cross-validation, the Adam/BCE loop, hyperparameter search and the
//! architecture-comparison runner.

pub mod adam;
pub mod data;
pub mod report;
pub mod search;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{bce_with_logits, build_architecture, Model, ModelConfig, ModelError, ModelVariant};

pub use adam::Adam;
pub use data::{assemble_batch, subject_data, CohortData, SubjectData};
pub use report::{AblationReport, FoldResult, VariantResult, PAPER_REFERENCE};
pub use search::{HpAssignment, SearchSpace};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("need at least {need} subjects, got {got}")]
    TooFewSubjects { got: usize, need: usize },
    #[error("loss became NaN at epoch {epoch}, step {step} (learning rate too high or bad data)")]
    NanLoss { epoch: usize, step: usize },
    #[error("train/test subject sets overlap: {0:?}")]
    FoldOverlap(Vec<String>),
    #[error("unknown subject {0}")]
    UnknownSubject(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Median-split labels: 1 for scores strictly above the cohort median.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledCohort {
    pub subjects: Vec<String>,
    pub labels: BTreeMap<String, u8>,
    pub threshold: f64,
}

/// Binarizes scores at the median; ties go to the low class.
pub fn binarize_labels(scores: &BTreeMap<String, f64>) -> LabeledCohort {
    assert!(scores.len() >= 2, "need at least two subjects");
    let mut values: Vec<f64> = scores.values().copied().collect();
    values.sort_by(f64::total_cmp);
    let n = values.len();
    let threshold = if n % 2 == 0 {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    } else {
        values[n / 2]
    };
    let labels = scores
        .iter()
        .map(|(id, s)| (id.clone(), u8::from(*s > threshold)))
        .collect();
    LabeledCohort { subjects: scores.keys().cloned().collect(), labels, threshold }
}

/// Subject-wise fold assignment with fold sizes differing by at most one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub folds: Vec<Vec<String>>,
    pub seed: u64,
    /// Fraction of the train+val subjects reserved for hyperparameter
    /// tuning in each round.
    pub tune_fraction: f64,
}

/// One round's subject assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldSplit {
    pub train: Vec<String>,
    /// Tuning/validation subjects (drawn per fold, seeded).
    pub tune: Vec<String>,
    pub test: Vec<String>,
}

pub fn make_folds(subjects: &[String], k: usize, seed: u64) -> Result<FoldPlan, TrainError> {
    if subjects.len() < k || k == 0 {
        return Err(TrainError::TooFewSubjects { got: subjects.len(), need: k.max(1) });
    }
    let mut order = subjects.to_vec();
    order.sort();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let n = order.len();
    let base = n / k;
    let extra = n % k;
    let mut folds = Vec::with_capacity(k);
    let mut at = 0;
    for i in 0..k {
        let size = base + usize::from(i < extra);
        folds.push(order[at..at + size].to_vec());
        at += size;
    }
    Ok(FoldPlan { folds, seed, tune_fraction: 0.15 })
}

impl FoldPlan {
    pub fn k(&self) -> usize {
        self.folds.len()
    }

    /// Train/tune/test subjects for one round. The tuning subset is
    /// re-drawn per fold from the train+val side, seeded by the plan seed
    /// and fold index.
    pub fn split(&self, fold: usize) -> FoldSplit {
        let test = self.folds[fold].clone();
        let mut rest: Vec<String> = self
            .folds
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != fold)
            .flat_map(|(_, f)| f.iter().cloned())
            .collect();
        rest.sort();
        let mut rng = ChaCha12Rng::seed_from_u64(mix(self.seed, fold as u64 + 1, 0x7C15));
        rest.shuffle(&mut rng);
        let n_tune = ((rest.len() as f64) * self.tune_fraction).round() as usize;
        let tune = rest[..n_tune].to_vec();
        let train = rest[n_tune..].to_vec();
        FoldSplit { train, tune, test }
    }
}

/// Errors when a subject appears on both sides of a split.
pub fn verify_disjoint(train: &[String], test: &[String]) -> Result<(), TrainError> {
    let overlap: Vec<String> = train.iter().filter(|s| test.contains(s)).cloned().collect();
    if overlap.is_empty() {
        Ok(())
    } else {
        Err(TrainError::FoldOverlap(overlap))
    }
}

/// Optimization settings; defaults follow the reference setup (Adam at
/// 1e-4, batch size 4, 70 epochs, binary cross-entropy).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSpec {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainSpec {
    fn default() -> Self {
        TrainSpec {
            lr: 1e-4,
            epochs: 70,
            batch_size: 4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

/// Trains a fresh model on the given subjects for the full epoch budget
/// (no early stopping; the final-epoch model is returned together with the
/// per-epoch mean training loss). Deterministic under fixed seeds: data
/// order, initialization and dropout draws all derive from `cfg.seed` /
/// `spec.seed`.
pub fn train_fold(
    cfg: &ModelConfig,
    spec: &TrainSpec,
    cohort: &CohortData,
    train_ids: &[String],
) -> Result<(Model, Vec<f64>), TrainError> {
    let mut model = build_architecture(cfg)?;
    let mut adam = Adam::new(&model.store, spec.lr, spec.adam_beta1, spec.adam_beta2, spec.adam_eps);
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);

    let subjects: Vec<&SubjectData> = train_ids
        .iter()
        .map(|id| cohort.subject(id).ok_or_else(|| TrainError::UnknownSubject(id.clone())))
        .collect::<Result<_, _>>()?;
    let labels: Vec<f64> = train_ids.iter().map(|id| cohort.labels[id] as f64).collect();

    let mut loss_curve = Vec::with_capacity(spec.epochs);
    let mut order: Vec<usize> = (0..subjects.len()).collect();
    for epoch in 0..spec.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut n_batches = 0usize;
        for (step, chunk) in order.chunks(spec.batch_size.max(1)).enumerate() {
            let batch_subjects: Vec<&SubjectData> = chunk.iter().map(|&i| subjects[i]).collect();
            let batch_labels: Vec<f64> = chunk.iter().map(|&i| labels[i]).collect();
            let batch = assemble_batch(&batch_subjects);

            let (out, trace) = model.forward(&batch, true, Some(&mut rng), true)?;
            let (loss, dlogits) = bce_with_logits(&out.logits, &batch_labels);
            if !loss.is_finite() {
                return Err(TrainError::NanLoss { epoch, step });
            }
            model.store.zero_grads();
            model.backward(&batch, trace.as_ref().unwrap(), &dlogits)?;
            adam.step(&mut model.store);
            epoch_loss += loss;
            n_batches += 1;
        }
        loss_curve.push(epoch_loss / n_batches.max(1) as f64);
    }
    Ok((model, loss_curve))
}

/// Accuracy and F1 (positive class) on held-out subjects. Probabilities at
/// exactly 0.5 classify as the low class.
pub fn evaluate(
    model: &mut Model,
    cohort: &CohortData,
    test_ids: &[String],
) -> Result<(f64, f64), TrainError> {
    let mut preds = Vec::with_capacity(test_ids.len());
    let mut labels = Vec::with_capacity(test_ids.len());
    for chunk in test_ids.chunks(8) {
        let subjects: Vec<&SubjectData> = chunk
            .iter()
            .map(|id| cohort.subject(id).ok_or_else(|| TrainError::UnknownSubject(id.clone())))
            .collect::<Result<_, _>>()?;
        let batch = assemble_batch(&subjects);
        let probs = model.predict(&batch)?;
        for (p, id) in probs.iter().zip(chunk) {
            preds.push(u8::from(*p > 0.5));
            labels.push(cohort.labels[id]);
        }
    }
    Ok(metrics(&preds, &labels))
}

/// Accuracy and positive-class F1 from hard predictions.
pub fn metrics(preds: &[u8], labels: &[u8]) -> (f64, f64) {
    assert_eq!(preds.len(), labels.len());
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut tn = 0usize;
    let mut fn_ = 0usize;
    for (&p, &y) in preds.iter().zip(labels) {
        match (p, y) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 0) => tn += 1,
            _ => fn_ += 1,
        }
    }
    let accuracy = (tp + tn) as f64 / preds.len().max(1) as f64;
    let denom = 2 * tp + fp + fn_;
    let f1 = if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 };
    (accuracy, f1)
}

/// Cross-validated evaluation of several architectures on one cohort.
/// Every fold trains from scratch with fold- and variant-derived seeds; a
/// failing fold marks the variant incomplete instead of aborting the run.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation(
    variants: &[ModelVariant],
    cohort: &CohortData,
    base_cfg: &ModelConfig,
    spec: &TrainSpec,
    k: usize,
    seed: u64,
    search_budget: usize,
    space: Option<&SearchSpace>,
) -> Result<AblationReport, TrainError> {
    assert!(!variants.is_empty(), "need at least one variant");
    let ids = cohort.subject_ids();
    let plan = make_folds(&ids, k, seed)?;

    let mut rows = Vec::with_capacity(variants.len());
    for (vi, &variant) in variants.iter().enumerate() {
        let mut fold_results = Vec::with_capacity(k);
        let mut error: Option<String> = None;
        for fold in 0..k {
            let split = plan.split(fold);
            match run_one_fold(variant, vi, fold, &split, cohort, base_cfg, spec, seed, search_budget, space) {
                Ok(result) => fold_results.push(result),
                Err(e) => {
                    error = Some(format!("fold {fold}: {e}"));
                    break;
                }
            }
        }
        let incomplete = error.is_some() || fold_results.len() < k;
        let mean_accuracy = mean(fold_results.iter().map(|f| f.accuracy));
        let mean_f1 = mean(fold_results.iter().map(|f| f.f1));
        rows.push(VariantResult { variant, fold_results, mean_accuracy, mean_f1, incomplete, error });
    }
    Ok(AblationReport { rows, k, seed })
}

#[allow(clippy::too_many_arguments)]
fn run_one_fold(
    variant: ModelVariant,
    variant_idx: usize,
    fold: usize,
    split: &FoldSplit,
    cohort: &CohortData,
    base_cfg: &ModelConfig,
    spec: &TrainSpec,
    seed: u64,
    search_budget: usize,
    space: Option<&SearchSpace>,
) -> Result<FoldResult, TrainError> {
    verify_disjoint(&split.train, &split.test)?;
    verify_disjoint(&split.tune, &split.test)?;

    let mut cfg = base_cfg.clone();
    cfg.variant = variant;
    cfg.seed = mix(seed, variant_idx as u64, fold as u64);
    let mut fold_spec = spec.clone();
    fold_spec.seed = mix(seed, variant_idx as u64 + 101, fold as u64);

    let mut chosen_hp = None;
    if let Some(space) = space {
        if search_budget > 0 {
            let (best, _) = search::search_hyperparameters(
                space,
                search_budget,
                &cfg,
                &fold_spec,
                cohort,
                &split.train,
                &split.tune,
                mix(seed, variant_idx as u64 + 211, fold as u64),
            )?;
            best.apply(&mut cfg, &mut fold_spec);
            chosen_hp = Some(best);
        }
    }

    // Without a tuning pass the tuning subjects rejoin the training side.
    let mut train_ids = split.train.clone();
    if chosen_hp.is_none() {
        train_ids.extend(split.tune.iter().cloned());
        train_ids.sort();
    }

    let (mut model, loss_curve) = train_fold(&cfg, &fold_spec, cohort, &train_ids)?;
    let (accuracy, f1) = evaluate(&mut model, cohort, &split.test)?;
    Ok(FoldResult { fold_index: fold, accuracy, f1, loss_curve, chosen_hp, model: Some(model) })
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

pub(crate) fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::StreamConfig;
    use ndarray::Array2;

    #[test]
    fn median_split_examples() {
        let scores: BTreeMap<String, f64> =
            [("a", 1.0), ("b", 2.0), ("c", 3.0), ("d", 4.0), ("e", 5.0)]
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect();
        let lc = binarize_labels(&scores);
        assert_eq!(lc.threshold, 3.0);
        let want = [("a", 0u8), ("b", 0), ("c", 0), ("d", 1), ("e", 1)];
        for (id, label) in want {
            assert_eq!(lc.labels[id], label);
        }

        let even: BTreeMap<String, f64> = [("a", 1.0), ("b", 2.0), ("c", 3.0), ("d", 4.0)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        let lc = binarize_labels(&even);
        assert_eq!(lc.threshold, 2.5);
        assert_eq!(lc.labels["a"], 0);
        assert_eq!(lc.labels["b"], 0);
        assert_eq!(lc.labels["c"], 1);
        assert_eq!(lc.labels["d"], 1);

        let equal: BTreeMap<String, f64> =
            [("a", 7.0), ("b", 7.0), ("c", 7.0)].into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        let lc = binarize_labels(&equal);
        assert!(lc.labels.values().all(|v| *v == 0));
    }

    #[test]
    fn labels_are_invariant_under_monotone_transforms() {
        let scores: BTreeMap<String, f64> = (0..17)
            .map(|i| (format!("s{i}"), ((i * 37) % 17) as f64 * 0.71 - 3.0))
            .collect();
        let base = binarize_labels(&scores);
        let transformed: BTreeMap<String, f64> = scores
            .iter()
            .map(|(k, v)| (k.clone(), (v * 0.3).exp() + 11.0))
            .collect();
        let mapped = binarize_labels(&transformed);
        assert_eq!(base.labels, mapped.labels);
    }

    #[test]
    fn fold_sizes_differ_by_at_most_one() {
        let subjects: Vec<String> = (0..817).map(|i| format!("s{i:04}")).collect();
        let plan = make_folds(&subjects, 10, 42).unwrap();
        let mut sizes: Vec<usize> = plan.folds.iter().map(|f| f.len()).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![81, 81, 81, 82, 82, 82, 82, 82, 82, 82]);

        // Partition: every subject in exactly one fold.
        let mut all: Vec<String> = plan.folds.iter().flatten().cloned().collect();
        all.sort();
        let mut want = subjects.clone();
        want.sort();
        assert_eq!(all, want);

        // Determinism.
        let again = make_folds(&subjects, 10, 42).unwrap();
        assert_eq!(plan, again);
        let other = make_folds(&subjects, 10, 43).unwrap();
        assert_ne!(plan.folds, other.folds);
    }

    #[test]
    fn split_reserves_the_tuning_fraction() {
        let subjects: Vec<String> = (0..100).map(|i| format!("s{i:03}")).collect();
        let plan = make_folds(&subjects, 10, 7).unwrap();
        let split = plan.split(3);
        assert_eq!(split.test.len(), 10);
        // 15% of the 90 train+val subjects, rounded.
        assert_eq!(split.tune.len(), 14);
        assert_eq!(split.train.len(), 76);
        verify_disjoint(&split.train, &split.test).unwrap();
        verify_disjoint(&split.tune, &split.test).unwrap();
        verify_disjoint(&split.train, &split.tune).unwrap();
    }

    #[test]
    fn overlap_detection_fires() {
        let train = vec!["a".to_string(), "b".to_string()];
        let test = vec!["b".to_string(), "c".to_string()];
        assert!(matches!(
            verify_disjoint(&train, &test),
            Err(TrainError::FoldOverlap(ids)) if ids == vec!["b".to_string()]
        ));
    }

    #[test]
    fn too_few_subjects_is_rejected() {
        let subjects: Vec<String> = (0..5).map(|i| format!("s{i}")).collect();
        assert!(matches!(
            make_folds(&subjects, 10, 0),
            Err(TrainError::TooFewSubjects { .. })
        ));
    }

    #[test]
    fn metrics_match_a_confusion_matrix_oracle() {
        // Deterministic pseudo-random prediction/label pairs.
        for trial in 0..50 {
            let n = 3 + (trial * 7) % 40;
            let preds: Vec<u8> = (0..n).map(|i| ((i * 13 + trial) % 3 == 0) as u8).collect();
            let labels: Vec<u8> = (0..n).map(|i| ((i * 29 + trial * 5) % 2 == 0) as u8).collect();
            let (acc, f1) = metrics(&preds, &labels);

            // Brute-force oracle.
            let correct = preds.iter().zip(&labels).filter(|(p, y)| p == y).count();
            let tp = preds.iter().zip(&labels).filter(|(p, y)| **p == 1 && **y == 1).count();
            let pred_pos = preds.iter().filter(|p| **p == 1).count();
            let actual_pos = labels.iter().filter(|y| **y == 1).count();
            let acc_want = correct as f64 / n as f64;
            let f1_want = if tp == 0 {
                0.0
            } else {
                let precision = tp as f64 / pred_pos as f64;
                let recall = tp as f64 / actual_pos as f64;
                2.0 * precision * recall / (precision + recall)
            };
            assert!((acc - acc_want).abs() < 1e-12);
            assert!((f1 - f1_want).abs() < 1e-12, "trial {trial}: {f1} vs {f1_want}");
        }
    }

    #[test]
    fn perfect_and_inverted_predictions() {
        let labels = [1u8, 0, 1, 0, 1, 0, 1, 0, 1, 0];
        let (acc, f1) = metrics(&labels, &labels);
        assert_eq!((acc, f1), (1.0, 1.0));
        let inverted: Vec<u8> = labels.iter().map(|y| 1 - y).collect();
        let (acc, f1) = metrics(&inverted, &labels);
        assert_eq!((acc, f1), (0.0, 0.0));
    }

    /// Eight separable toy subjects: class encoded in the feature columns.
    fn separable_cohort() -> CohortData {
        let mut subjects = Vec::new();
        let mut labels = BTreeMap::new();
        for i in 0..8 {
            let label = (i % 2) as u8;
            let sign = if label == 1 { 1.0 } else { -1.0 };
            let id = format!("s{i}");
            let mut s = data::tests::toy_subject(&id, 0.0);
            s.eeg_power = Array2::from_elem((4, 6), sign);
            s.hrv_time = Array2::from_elem((3, 6), sign * 0.5);
            subjects.push(s);
            labels.insert(id, label);
        }
        CohortData { subjects, labels }
    }

    fn tiny_cfg(variant: ModelVariant) -> ModelConfig {
        ModelConfig {
            variant,
            raw: StreamConfig { d_model: 8, n_layers: 1, n_heads: 2, d_ffn: 12, dropout: 0.0 },
            feat: StreamConfig { d_model: 4, n_layers: 1, n_heads: 2, d_ffn: 6, dropout: 0.0 },
            classifier_dim: 8,
            max_seq_len: 16,
            eeg_segment_len: 16,
            ecg_segment_len: 32,
            seed: 3,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn overfits_a_tiny_separable_cohort() {
        let cohort = separable_cohort();
        let ids = cohort.subject_ids();
        let spec = TrainSpec { lr: 5e-3, epochs: 70, batch_size: 4, seed: 1, ..TrainSpec::default() };
        let (mut model, curve) = train_fold(&tiny_cfg(ModelVariant::VanillaFeat), &spec, &cohort, &ids).unwrap();
        let (acc, f1) = evaluate(&mut model, &cohort, &ids).unwrap();
        assert_eq!(acc, 1.0, "train accuracy (loss tail {:?})", &curve[curve.len() - 3..]);
        assert_eq!(f1, 1.0);
        // Loss is monotone non-increasing after the burn-in, within noise.
        for w in curve[5..].windows(2) {
            assert!(w[1] <= w[0] + 1e-3, "loss increased: {w:?}");
        }
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let cohort = separable_cohort();
        let ids = cohort.subject_ids();
        let spec = TrainSpec { lr: 0.0, epochs: 5, batch_size: 4, seed: 1, ..TrainSpec::default() };
        let cfg = tiny_cfg(ModelVariant::VanillaFeat);
        let (model, curve) = train_fold(&cfg, &spec, &cohort, &ids).unwrap();
        let fresh = build_architecture(&cfg).unwrap();
        for (a, b) in model.store.params().iter().zip(fresh.store.params()) {
            if a.name.contains("bn") {
                continue; // running statistics still update in train mode
            }
            assert_eq!(a.value, b.value, "{} drifted", a.name);
        }
        for w in curve.windows(2) {
            assert!((w[0] - w[1]).abs() < 1e-12, "loss curve should be constant");
        }
    }

    #[test]
    fn training_is_seed_deterministic() {
        let cohort = separable_cohort();
        let ids = cohort.subject_ids();
        let mut cfg = tiny_cfg(ModelVariant::VanillaFeat);
        cfg.feat.dropout = 0.1;
        let spec = TrainSpec { lr: 1e-3, epochs: 6, batch_size: 4, seed: 9, ..TrainSpec::default() };
        let (_, c1) = train_fold(&cfg, &spec, &cohort, &ids).unwrap();
        let (_, c2) = train_fold(&cfg, &spec, &cohort, &ids).unwrap();
        assert_eq!(c1, c2);
    }

    #[test]
    fn ablation_report_is_deterministic_and_ordered() {
        let cohort = separable_cohort();
        let variants = [ModelVariant::VanillaFeat, ModelVariant::LstmMixed];
        let spec = TrainSpec { lr: 5e-3, epochs: 10, batch_size: 4, seed: 2, ..TrainSpec::default() };
        let cfg = tiny_cfg(ModelVariant::VanillaFeat);
        let a = run_ablation(&variants, &cohort, &cfg, &spec, 2, 5, 0, None).unwrap();
        let b = run_ablation(&variants, &cohort, &cfg, &spec, 2, 5, 0, None).unwrap();
        assert_eq!(a.rows.len(), 2);
        assert_eq!(a.rows[0].variant, ModelVariant::VanillaFeat);
        for (ra, rb) in a.rows.iter().zip(&b.rows) {
            assert_eq!(ra.mean_accuracy.to_bits(), rb.mean_accuracy.to_bits());
            assert_eq!(ra.mean_f1.to_bits(), rb.mean_f1.to_bits());
            assert!(!ra.incomplete);
        }
    }
}
