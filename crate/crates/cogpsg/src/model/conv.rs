//! Multi-scale convolutional embedding over raw-signal segments.
//!
//! One stored kernel tensor serves several kernel sizes: the forward pass
//! slices the leading `k` taps of the shared weights for each scale (or uses
//! independent per-scale tensors). Each scale applies valid 1-D convolution,
//! ReLU, per-channel batch normalization and global average pooling over
//! time; the pooled vectors are concatenated across scales and passed
//! through dropout.
//!
//! Because batch norm is a per-channel affine map, pooling commutes with it:
//! only per-segment pooled sums and per-channel batch moments are kept, and
//! the backward pass recomputes the convolution segment by segment. Memory
//! stays `O(segments x channels)` even for hours-long inputs.

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

use super::layers::{dropout_backward, dropout_forward, DropoutMask};
use super::store::{ParamId, ParamStore};
use super::ModelError;

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct ConvScale {
    pub kernel: usize,
    pub w: ParamId,
    pub b: ParamId,
    pub bn_gamma: ParamId,
    pub bn_beta: ParamId,
    pub bn_mean: ParamId,
    pub bn_var: ParamId,
}

#[derive(Debug, Clone)]
pub struct MultiScaleConv {
    pub scales: Vec<ConvScale>,
    pub d_conv: usize,
    pub shared_weights: bool,
    pub dropout: f64,
}

pub struct ScaleCache {
    /// Per-(subject, segment) sums of the post-ReLU response, `[B, S, C]`.
    pooled_sums: Array3<f64>,
    mu: Array1<f64>,
    sigma: Array1<f64>,
    t_prime: usize,
}

pub struct ConvCache {
    scales: Vec<ScaleCache>,
    dropout: DropoutMask,
}

impl MultiScaleConv {
    /// `kernel_sizes` must be ascending; with `shared_weights` one
    /// `[d_conv, k_max]` tensor is stored and sliced per scale, otherwise
    /// each scale owns its tensor. Batch normalizers are always per scale.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        d_conv: usize,
        kernel_sizes: &[usize],
        shared_weights: bool,
        dropout: f64,
    ) -> MultiScaleConv {
        assert!(!kernel_sizes.is_empty());
        assert!(kernel_sizes.windows(2).all(|w| w[0] < w[1]), "kernel sizes must ascend");
        let k_max = *kernel_sizes.last().unwrap();

        let shared = shared_weights.then(|| {
            let bound = 1.0 / (k_max as f64).sqrt();
            let w = store.alloc_uniform(&format!("{name}.w"), &[d_conv, k_max], bound, rng);
            let b = store.alloc_uniform(&format!("{name}.b"), &[d_conv], bound, rng);
            (w, b)
        });

        let scales = kernel_sizes
            .iter()
            .map(|&k| {
                let (w, b) = match shared {
                    Some(pair) => pair,
                    None => {
                        let bound = 1.0 / (k as f64).sqrt();
                        (
                            store.alloc_uniform(&format!("{name}.w_k{k}"), &[d_conv, k], bound, rng),
                            store.alloc_uniform(&format!("{name}.b_k{k}"), &[d_conv], bound, rng),
                        )
                    }
                };
                ConvScale {
                    kernel: k,
                    w,
                    b,
                    bn_gamma: store.alloc_const(&format!("{name}.bn_k{k}.gamma"), &[d_conv], 1.0, true),
                    bn_beta: store.alloc_const(&format!("{name}.bn_k{k}.beta"), &[d_conv], 0.0, true),
                    bn_mean: store.alloc_const(&format!("{name}.bn_k{k}.mean"), &[d_conv], 0.0, false),
                    bn_var: store.alloc_const(&format!("{name}.bn_k{k}.var"), &[d_conv], 1.0, false),
                }
            })
            .collect();

        MultiScaleConv { scales, d_conv, shared_weights, dropout }
    }

    pub fn out_dim(&self) -> usize {
        self.scales.len() * self.d_conv
    }

    /// Effective kernel for a scale: the leading `k` taps of the stored
    /// tensor when weights are shared across scales.
    fn kernel_view<'a>(&self, store: &'a ParamStore, scale: &ConvScale) -> ArrayView2<'a, f64> {
        let w = store.mat(scale.w);
        w.slice_move(s![.., ..scale.kernel])
    }

    /// Raw valid-convolution response `[T', C]` of one segment under one
    /// scale, exactly as used inside the embedding (exposed so the slicing
    /// mechanism can be checked against an independent convolution).
    pub fn conv_response(
        &self,
        store: &ParamStore,
        segment: ArrayView1<'_, f64>,
        scale_idx: usize,
    ) -> Array2<f64> {
        let scale = &self.scales[scale_idx];
        let w = self.kernel_view(store, scale);
        let bias = store.vec1(scale.b);
        conv1d_valid(segment, &w, &bias)
    }

    /// Embeds `[B, S, T]` raw segments into `[B, S, n_scales * d_conv]`.
    /// Train mode uses batch statistics and updates the running moments;
    /// eval mode uses the stored running moments and is deterministic.
    pub fn forward(
        &self,
        store: &mut ParamStore,
        x: &Array3<f64>,
        train: bool,
        rng: Option<&mut ChaCha12Rng>,
        keep_cache: bool,
    ) -> Result<(Array3<f64>, Option<ConvCache>), ModelError> {
        let (b, s_count, t) = x.dim();
        let k_max = self.scales.iter().map(|sc| sc.kernel).max().unwrap();
        if t < k_max {
            return Err(ModelError::SegmentTooShort { t, k: k_max });
        }

        let c = self.d_conv;
        let mut out = Array3::zeros((b, s_count, self.out_dim()));
        let mut scale_caches = Vec::with_capacity(self.scales.len());

        for (si, scale) in self.scales.iter().enumerate() {
            let w = self.kernel_view(store, scale).to_owned();
            let bias = store.vec1(scale.b).to_owned();
            let t_prime = t - scale.kernel + 1;

            // Per-subject partial sums, reduced in index order below.
            let partials: Vec<(Array2<f64>, Array1<f64>, Array1<f64>)> = (0..b)
                .into_par_iter()
                .map(|ib| {
                    let mut pooled = Array2::zeros((s_count, c));
                    let mut sum_z = Array1::zeros(c);
                    let mut sum_z2 = Array1::zeros(c);
                    for is in 0..s_count {
                        let seg = x.slice(s![ib, is, ..]);
                        let mut conv = conv1d_valid(seg, &w.view(), &bias.view());
                        conv.mapv_inplace(|v| v.max(0.0));
                        for tt in 0..t_prime {
                            for ch in 0..c {
                                let z = conv[[tt, ch]];
                                pooled[[is, ch]] += z;
                                sum_z[ch] += z;
                                sum_z2[ch] += z * z;
                            }
                        }
                    }
                    (pooled, sum_z, sum_z2)
                })
                .collect();

            let n = (b * s_count * t_prime) as f64;
            let mut sum_z = Array1::zeros(c);
            let mut sum_z2 = Array1::zeros(c);
            let mut pooled_sums = Array3::zeros((b, s_count, c));
            for (ib, (pooled, sz, sz2)) in partials.into_iter().enumerate() {
                pooled_sums.slice_mut(s![ib, .., ..]).assign(&pooled);
                sum_z += &sz;
                sum_z2 += &sz2;
            }

            let (mu, var) = if train {
                let mu = &sum_z / n;
                let var = (&sum_z2 / n - &mu * &mu).mapv(|v| v.max(0.0));
                // Update running moments.
                {
                    let rm = store.value_mut(scale.bn_mean);
                    for (r, m) in rm.iter_mut().zip(mu.iter()) {
                        *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
                    }
                }
                {
                    let rv = store.value_mut(scale.bn_var);
                    for (r, v) in rv.iter_mut().zip(var.iter()) {
                        *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
                    }
                }
                (mu, var)
            } else {
                (
                    store.vec1(scale.bn_mean).to_owned(),
                    store.vec1(scale.bn_var).to_owned(),
                )
            };
            let sigma = var.mapv(|v| (v + BN_EPS).sqrt());
            let gamma = store.vec1(scale.bn_gamma).to_owned();
            let beta = store.vec1(scale.bn_beta).to_owned();

            let inv_t = 1.0 / t_prime as f64;
            for ib in 0..b {
                for is in 0..s_count {
                    for ch in 0..c {
                        let m = pooled_sums[[ib, is, ch]] * inv_t;
                        out[[ib, is, si * c + ch]] =
                            gamma[ch] * (m - mu[ch]) / sigma[ch] + beta[ch];
                    }
                }
            }

            if keep_cache {
                scale_caches.push(ScaleCache { pooled_sums, mu, sigma, t_prime });
            }
        }

        // Dropout over the concatenated multi-scale embedding.
        let d_out = self.out_dim();
        let mut flat = out.into_shape_with_order((b * s_count, d_out)).unwrap();
        let mask = dropout_forward(&mut flat, if train { self.dropout } else { 0.0 }, rng);
        let out = flat.into_shape_with_order((b, s_count, d_out)).unwrap();

        let cache = keep_cache.then_some(ConvCache { scales: scale_caches, dropout: mask });
        Ok((out, cache))
    }

    /// Accumulates weight, bias and batch-norm gradients. Raw inputs are
    /// leaves, so no input gradient is produced; the convolution response is
    /// recomputed segment by segment instead of being cached.
    pub fn backward(
        &self,
        store: &mut ParamStore,
        x: &Array3<f64>,
        cache: &ConvCache,
        dout: &Array3<f64>,
    ) {
        let (b, s_count, _t) = x.dim();
        let c = self.d_conv;
        let d_out = self.out_dim();

        let mut dflat = dout.to_shape((b * s_count, d_out)).unwrap().to_owned();
        dropout_backward(&cache.dropout, &mut dflat);
        let dpool_all = dflat.into_shape_with_order((b, s_count, d_out)).unwrap();

        for (si, scale) in self.scales.iter().enumerate() {
            let sc = &cache.scales[si];
            let dpool = dpool_all.slice(s![.., .., si * c..(si + 1) * c]);
            let t_prime = sc.t_prime;
            let inv_t = 1.0 / t_prime as f64;
            let n = (b * s_count * t_prime) as f64;

            let gamma = store.vec1(scale.bn_gamma).to_owned();

            // Per-channel reductions.
            let mut dbeta = Array1::zeros(c);
            let mut dgamma = Array1::zeros(c);
            let mut sg = Array1::<f64>::zeros(c);
            for ib in 0..b {
                for is in 0..s_count {
                    for ch in 0..c {
                        let g = dpool[[ib, is, ch]];
                        let m = sc.pooled_sums[[ib, is, ch]] * inv_t;
                        dbeta[ch] += g;
                        dgamma[ch] += g * (m - sc.mu[ch]) / sc.sigma[ch];
                        sg[ch] += g;
                    }
                }
            }
            store.add_grad_1d(scale.bn_beta, &dbeta);
            store.add_grad_1d(scale.bn_gamma, &dgamma);

            // dL/d conv[c,t] = (P - D * conv) on the ReLU-active set, where
            // P collects the per-(subject, segment) terms and D the batch
            // variance coupling.
            let mut d_ch = Array1::zeros(c);
            for ch in 0..c {
                d_ch[ch] = gamma[ch] * dgamma[ch] / (n * sc.sigma[ch] * sc.sigma[ch]);
            }

            let w = self.kernel_view(store, scale).to_owned();
            let bias = store.vec1(scale.b).to_owned();
            let k = scale.kernel;

            let partials: Vec<(Array2<f64>, Array1<f64>)> = (0..b)
                .into_par_iter()
                .map(|ib| {
                    let mut dw = Array2::zeros((c, k));
                    let mut db = Array1::zeros(c);
                    let mut p_row = Array1::zeros(c);
                    for is in 0..s_count {
                        for ch in 0..c {
                            let g = dpool[[ib, is, ch]];
                            p_row[ch] = gamma[ch] / sc.sigma[ch]
                                * (g * inv_t - sg[ch] / n
                                    + sc.mu[ch] * dgamma[ch] / (n * sc.sigma[ch]));
                        }
                        let seg = x.slice(s![ib, is, ..]);
                        let conv = conv1d_valid(seg, &w.view(), &bias.view());
                        // r[t, ch] = (P - D*conv) on active entries.
                        let mut r = conv;
                        for tt in 0..t_prime {
                            for ch in 0..c {
                                let v = r[[tt, ch]];
                                r[[tt, ch]] = if v > 0.0 { p_row[ch] - d_ch[ch] * v } else { 0.0 };
                            }
                        }
                        let xcol = im2col(seg, k);
                        dw += &r.t().dot(&xcol);
                        db += &r.sum_axis(ndarray::Axis(0));
                    }
                    (dw, db)
                })
                .collect();

            let mut dw_total = Array2::zeros((c, k));
            let mut db_total = Array1::zeros(c);
            for (dw, db) in partials {
                dw_total += &dw;
                db_total += &db;
            }
            // Shared tensors may be wider than this scale's kernel: pad.
            let stored_k = store.mat(scale.w).ncols();
            if stored_k > k {
                let mut padded = Array2::zeros((c, stored_k));
                padded.slice_mut(s![.., ..k]).assign(&dw_total);
                store.add_grad_2d(scale.w, &padded);
            } else {
                store.add_grad_2d(scale.w, &dw_total);
            }
            store.add_grad_1d(scale.b, &db_total);
        }
    }
}

/// Valid 1-D convolution (cross-correlation) of a segment with a `[C, k]`
/// kernel bank: output `[T - k + 1, C]`, computed as im2col + matmul.
pub fn conv1d_valid(
    segment: ArrayView1<'_, f64>,
    w: &ArrayView2<'_, f64>,
    bias: &ArrayView1<'_, f64>,
) -> Array2<f64> {
    let k = w.ncols();
    let xcol = im2col(segment, k);
    let mut out = xcol.dot(&w.t());
    out += bias;
    out
}

fn im2col(segment: ArrayView1<'_, f64>, k: usize) -> Array2<f64> {
    let t = segment.len();
    let t_prime = t - k + 1;
    let mut xcol = Array2::zeros((t_prime, k));
    let seg = segment.as_slice().unwrap();
    for tt in 0..t_prime {
        xcol.row_mut(tt)
            .as_slice_mut()
            .unwrap()
            .copy_from_slice(&seg[tt..tt + k]);
    }
    xcol
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    /// Direct-loop convolution, written independently of the im2col path.
    fn naive_conv(x: &[f64], w: &Array2<f64>, bias: &[f64]) -> Array2<f64> {
        let (c, k) = w.dim();
        let t_prime = x.len() - k + 1;
        let mut out = Array2::zeros((t_prime, c));
        for ch in 0..c {
            for t in 0..t_prime {
                let mut acc = bias[ch];
                for j in 0..k {
                    acc += w[[ch, j]] * x[t + j];
                }
                out[[t, ch]] = acc;
            }
        }
        out
    }

    #[test]
    fn sliced_kernels_match_an_independent_convolution() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(2024);
        let conv = MultiScaleConv::new(&mut store, &mut rng, "conv", 5, &[3, 7], true, 0.0);
        let x: Vec<f64> = (0..64).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let xv = ndarray::ArrayView1::from(&x);

        for (si, k) in [(0usize, 3usize), (1, 7)] {
            let got = conv.conv_response(&store, xv, si);
            // Oracle: copy the leading-k slice into a standalone kernel.
            let full = store.mat(conv.scales[si].w).to_owned();
            let mut sliced = Array2::zeros((5, k));
            sliced.assign(&full.slice(s![.., ..k]));
            let bias = store.vec1(conv.scales[si].b).to_owned();
            let want = naive_conv(&x, &sliced, bias.as_slice().unwrap());
            let max_err = (&got - &want).iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            assert!(max_err < 1e-6, "scale {si} max err {max_err}");
        }
    }

    #[test]
    fn shape_contract_and_zero_propagation() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let conv = MultiScaleConv::new(&mut store, &mut rng, "conv", 4, &[3, 7], true, 0.0);
        let x = Array3::from_shape_fn((2, 6, 40), |(a, b, c)| ((a + b * 3 + c) as f64 * 0.21).sin());
        let (out, _) = conv.forward(&mut store, &x, false, None, false).unwrap();
        assert_eq!(out.dim(), (2, 6, 8));

        // Zero input with zero bias: conv 0, ReLU 0, pooled 0; eval-mode BN
        // with fresh running stats maps 0 to 0.
        store.value_mut(conv.scales[0].b).fill(0.0);
        let zeros = Array3::zeros((1, 3, 40));
        let (out, _) = conv.forward(&mut store, &zeros, false, None, false).unwrap();
        assert!(out.iter().all(|v| v.abs() < 1e-12));

        let tiny = Array3::zeros((1, 1, 5));
        assert!(matches!(
            conv.forward(&mut store, &tiny, false, None, false),
            Err(ModelError::SegmentTooShort { .. })
        ));
    }

    #[test]
    fn constant_input_pooling_is_length_independent() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let conv = MultiScaleConv::new(&mut store, &mut rng, "conv", 6, &[7], true, 0.0);
        let short = Array3::from_elem((1, 1, 2100), 0.7);
        let long = Array3::from_elem((1, 1, 8400), 0.7);
        let (a, _) = conv.forward(&mut store, &short, false, None, false).unwrap();
        let (b, _) = conv.forward(&mut store, &long, false, None, false).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            let denom = x.abs().max(y.abs()).max(1e-12);
            assert!((x - y).abs() / denom < 0.02, "{x} vs {y}");
        }
    }

    #[test]
    fn separate_scales_have_more_parameters_than_shared() {
        let mut s1 = ParamStore::new();
        let mut s2 = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        MultiScaleConv::new(&mut s1, &mut rng, "c", 8, &[3, 7], true, 0.0);
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        MultiScaleConv::new(&mut s2, &mut rng, "c", 8, &[3, 7], false, 0.0);
        assert!(s2.n_trainable() > s1.n_trainable());
    }

    #[test]
    fn conv_gradients_match_finite_differences_in_train_mode() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(33);
        let conv = MultiScaleConv::new(&mut store, &mut rng, "conv", 3, &[2, 4], true, 0.0);
        let x = Array3::from_shape_fn((2, 3, 12), |(a, b, c)| ((a * 11 + b * 5 + c * 3) as f64 * 0.37).sin());

        // Loss = sum of squares of the embedding (train mode, but freeze the
        // running stats against drift by reloading them each call).
        let saved_store = store.clone();
        let loss = |store: &mut ParamStore| -> f64 {
            // Restore running stats so repeated forwards see identical state.
            for scale in &conv.scales {
                let fresh_m = saved_store.value(scale.bn_mean).to_owned();
                let fresh_v = saved_store.value(scale.bn_var).to_owned();
                store.value_mut(scale.bn_mean).assign(&fresh_m);
                store.value_mut(scale.bn_var).assign(&fresh_v);
            }
            let (y, _) = conv.forward(store, &x, true, None, false).unwrap();
            y.iter().map(|v| v * v).sum()
        };

        let (y, cache) = conv.forward(&mut store, &x, true, None, true).unwrap();
        let dy = y.mapv(|v| 2.0 * v);
        store.zero_grads();
        conv.backward(&mut store, &x, &cache.unwrap(), &dy);
        let grads: Vec<ndarray::ArrayD<f64>> =
            store.params().iter().map(|p| p.grad.clone()).collect();

        let h = 1e-6;
        let mut max_rel: f64 = 0.0;
        for idx in 0..store.params().len() {
            if !store.params()[idx].trainable {
                continue;
            }
            let n = store.params()[idx].value.len();
            for flat in 0..n {
                let orig = store.params()[idx].value.as_slice().unwrap()[flat];
                store.params_mut()[idx].value.as_slice_mut().unwrap()[flat] = orig + h;
                let lp = loss(&mut store);
                store.params_mut()[idx].value.as_slice_mut().unwrap()[flat] = orig - h;
                let lm = loss(&mut store);
                store.params_mut()[idx].value.as_slice_mut().unwrap()[flat] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let an = grads[idx].as_slice().unwrap()[flat];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                max_rel = max_rel.max(rel);
            }
        }
        assert!(max_rel < 1e-4, "max rel err {max_rel}");
    }
}
