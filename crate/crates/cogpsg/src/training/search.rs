//! Random hyperparameter search over the declared grid.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::model::ModelConfig;

use super::{data::CohortData, evaluate, train_fold, TrainError, TrainSpec};

/// The tunable grid. Defaults declare the reference search space; the
/// learning-rate axis is five log-spaced points on `[1e-5, 1e-3]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSpace {
    pub layers_raw: Vec<usize>,
    pub layers_feat: Vec<usize>,
    pub heads: Vec<usize>,
    pub ffn_raw: Vec<usize>,
    pub ffn_feat: Vec<usize>,
    pub d_model_raw: Vec<usize>,
    pub d_model_feat: Vec<usize>,
    pub dropout: Vec<f64>,
    pub classifier_dim: Vec<usize>,
    pub learning_rate: Vec<f64>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            layers_raw: vec![2, 3, 4],
            layers_feat: vec![2, 3, 4],
            heads: vec![4, 8],
            ffn_raw: vec![92, 128, 256, 512],
            ffn_feat: vec![8, 16, 32],
            d_model_raw: vec![32, 64, 128],
            d_model_feat: vec![8, 16],
            dropout: vec![0.01, 0.05, 0.1, 0.2],
            classifier_dim: vec![92, 128, 256],
            learning_rate: vec![1e-3, 10f64.powf(-3.5), 1e-4, 10f64.powf(-4.5), 1e-5],
        }
    }
}

/// One sampled assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HpAssignment {
    pub layers_raw: usize,
    pub layers_feat: usize,
    pub heads: usize,
    pub ffn_raw: usize,
    pub ffn_feat: usize,
    pub d_model_raw: usize,
    pub d_model_feat: usize,
    pub dropout: f64,
    pub classifier_dim: usize,
    pub learning_rate: f64,
}

impl SearchSpace {
    pub fn sample(&self, rng: &mut ChaCha12Rng) -> HpAssignment {
        fn pick<T: Copy>(v: &[T], rng: &mut ChaCha12Rng) -> T {
            v[rng.random_range(0..v.len())]
        }
        HpAssignment {
            layers_raw: pick(&self.layers_raw, rng),
            layers_feat: pick(&self.layers_feat, rng),
            heads: pick(&self.heads, rng),
            ffn_raw: pick(&self.ffn_raw, rng),
            ffn_feat: pick(&self.ffn_feat, rng),
            d_model_raw: pick(&self.d_model_raw, rng),
            d_model_feat: pick(&self.d_model_feat, rng),
            dropout: pick(&self.dropout, rng),
            classifier_dim: pick(&self.classifier_dim, rng),
            learning_rate: pick(&self.learning_rate, rng),
        }
    }

    /// The reference selected assignment (learning rate 1e-4, layers 3/4,
    /// 4 heads, FFN 92/8, model dims 64/8, dropout 0.05, classifier 92).
    pub fn selected() -> HpAssignment {
        HpAssignment {
            layers_raw: 3,
            layers_feat: 4,
            heads: 4,
            ffn_raw: 92,
            ffn_feat: 8,
            d_model_raw: 64,
            d_model_feat: 8,
            dropout: 0.05,
            classifier_dim: 92,
            learning_rate: 1e-4,
        }
    }

    pub fn contains(&self, hp: &HpAssignment) -> bool {
        self.layers_raw.contains(&hp.layers_raw)
            && self.layers_feat.contains(&hp.layers_feat)
            && self.heads.contains(&hp.heads)
            && self.ffn_raw.contains(&hp.ffn_raw)
            && self.ffn_feat.contains(&hp.ffn_feat)
            && self.d_model_raw.contains(&hp.d_model_raw)
            && self.d_model_feat.contains(&hp.d_model_feat)
            && self.dropout.contains(&hp.dropout)
            && self.classifier_dim.contains(&hp.classifier_dim)
            && self.learning_rate.contains(&hp.learning_rate)
    }
}

impl HpAssignment {
    pub fn apply(&self, cfg: &mut ModelConfig, spec: &mut TrainSpec) {
        cfg.raw.n_layers = self.layers_raw;
        cfg.feat.n_layers = self.layers_feat;
        cfg.raw.n_heads = self.heads;
        cfg.feat.n_heads = self.heads;
        cfg.raw.d_ffn = self.ffn_raw;
        cfg.feat.d_ffn = self.ffn_feat;
        cfg.raw.d_model = self.d_model_raw;
        cfg.feat.d_model = self.d_model_feat;
        cfg.raw.dropout = self.dropout;
        cfg.feat.dropout = self.dropout;
        cfg.classifier_dim = self.classifier_dim;
        spec.lr = self.learning_rate;
    }
}

/// Random search: draws `budget` assignments, trains each on the training
/// subjects and scores tuning-set accuracy. Best accuracy wins; ties go to
/// the earliest draw.
#[allow(clippy::too_many_arguments)]
pub fn search_hyperparameters(
    space: &SearchSpace,
    budget: usize,
    base_cfg: &ModelConfig,
    base_spec: &TrainSpec,
    cohort: &CohortData,
    train_ids: &[String],
    tune_ids: &[String],
    seed: u64,
) -> Result<(HpAssignment, f64), TrainError> {
    assert!(budget >= 1, "search budget must be at least 1");
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut best: Option<(HpAssignment, f64)> = None;
    for draw in 0..budget {
        let hp = space.sample(&mut rng);
        let mut cfg = base_cfg.clone();
        let mut spec = base_spec.clone();
        hp.apply(&mut cfg, &mut spec);
        spec.seed = super::mix(seed, draw as u64, 0xA5);
        cfg.seed = super::mix(seed, draw as u64, 0x5A);
        let (mut model, _) = train_fold(&cfg, &spec, cohort, train_ids)?;
        let (acc, _) = evaluate(&mut model, cohort, tune_ids)?;
        let better = match &best {
            None => true,
            Some((_, best_acc)) => acc > *best_acc,
        };
        if better {
            best = Some((hp, acc));
        }
    }
    Ok(best.expect("budget >= 1"))
}
