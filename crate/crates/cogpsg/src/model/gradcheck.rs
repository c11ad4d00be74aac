//! Finite-difference verification of the analytic gradients.

use super::{bce_with_logits, build_architecture, BatchInputs, ModelConfig, ModelError};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub within_tol: usize,
    pub max_rel_err: f64,
    /// Worst offender, for diagnostics.
    pub worst_param: String,
}

impl GradCheckReport {
    pub fn fraction_ok(&self) -> f64 {
        if self.checked == 0 {
            return 0.0;
        }
        self.within_tol as f64 / self.checked as f64
    }
}

/// Compares analytic BCE gradients against central finite differences on a
/// freshly built model. Dropout must be disabled in the config (the check
/// runs the stochastic-free training path: batch statistics, no dropout).
/// Samples up to `per_tensor` entries from every trainable tensor.
pub fn finite_difference_check(
    cfg: &ModelConfig,
    batch: &BatchInputs,
    labels: &[f64],
    per_tensor: usize,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport, ModelError> {
    assert!(
        cfg.raw.dropout == 0.0 && cfg.feat.dropout == 0.0,
        "gradient check requires dropout 0"
    );
    let mut model = build_architecture(cfg)?;

    // Analytic gradients.
    let (out, trace) = model.forward(batch, true, None, true)?;
    let (_, dlogits) = bce_with_logits(&out.logits, labels);
    model.store.zero_grads();
    model.backward(batch, &trace.unwrap(), &dlogits)?;
    let analytic: Vec<ndarray::ArrayD<f64>> =
        model.store.params().iter().map(|p| p.grad.clone()).collect();

    let loss_at = |model: &mut super::Model| -> Result<f64, ModelError> {
        let (out, _) = model.forward(batch, true, None, false)?;
        Ok(bce_with_logits(&out.logits, labels).0)
    };

    let mut checked = 0usize;
    let mut within = 0usize;
    let mut max_rel: f64 = 0.0;
    let mut worst = String::new();
    for idx in 0..model.store.params().len() {
        if !model.store.params()[idx].trainable {
            continue;
        }
        let n = model.store.params()[idx].value.len();
        let stride = (n / per_tensor.max(1)).max(1);
        for flat in (0..n).step_by(stride) {
            let orig = model.store.params()[idx].value.as_slice().unwrap()[flat];
            model.store.params_mut()[idx].value.as_slice_mut().unwrap()[flat] = orig + step;
            let lp = loss_at(&mut model)?;
            model.store.params_mut()[idx].value.as_slice_mut().unwrap()[flat] = orig - step;
            let lm = loss_at(&mut model)?;
            model.store.params_mut()[idx].value.as_slice_mut().unwrap()[flat] = orig;
            let fd = (lp - lm) / (2.0 * step);
            let an = analytic[idx].as_slice().unwrap()[flat];

            // Relative error with an absolute floor for near-zero pairs.
            let denom = fd.abs().max(an.abs());
            let rel = if denom < 1e-10 { 0.0 } else { (fd - an).abs() / denom };
            checked += 1;
            if rel <= tol {
                within += 1;
            }
            if rel > max_rel {
                max_rel = rel;
                worst = format!(
                    "{}[{flat}]: fd {fd:.3e} vs analytic {an:.3e}",
                    model.store.params()[idx].name
                );
            }
        }
    }
    Ok(GradCheckReport { checked, within_tol: within, max_rel_err: max_rel, worst_param: worst })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::tiny_batch;
    use crate::model::{ModelVariant, StreamConfig};

    #[test]
    fn reduced_model_gradients_match_finite_differences() {
        let cfg = ModelConfig {
            variant: ModelVariant::MsScShs,
            raw: StreamConfig { d_model: 8, n_layers: 1, n_heads: 2, d_ffn: 12, dropout: 0.0 },
            feat: StreamConfig { d_model: 4, n_layers: 1, n_heads: 2, d_ffn: 6, dropout: 0.0 },
            kernel_sizes: vec![3, 7],
            eeg_segment_len: 16,
            ecg_segment_len: 32,
            max_seq_len: 16,
            seed: 21,
            ..ModelConfig::default()
        };
        let batch = tiny_batch(2, 2, 16, 1, 32);
        let labels = [1.0, 0.0];
        let report = finite_difference_check(&cfg, &batch, &labels, 6, 1e-5, 1e-3).unwrap();
        assert!(report.checked > 100, "only {} checked", report.checked);
        assert!(
            report.fraction_ok() >= 0.98,
            "fraction {} worst {}",
            report.fraction_ok(),
            report.worst_param
        );
    }
}
