//! Multi-head self-attention and the post-norm Transformer encoder layer.

use ndarray::{s, Array2, Array3, Array4};
use rand_chacha::ChaCha12Rng;

use super::layers::{
    dropout_backward, dropout_forward, relu_backward, relu_forward, DropoutMask, LayerNorm,
    LayerNormCache, Linear,
};
use super::store::ParamStore;

/// Multi-head self-attention with input/output projections.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub d: usize,
    pub heads: usize,
}

#[derive(Debug)]
pub struct MhaCache {
    q: Array3<f64>,
    k: Array3<f64>,
    v: Array3<f64>,
    /// Softmax attention weights `[B, heads, S, S]`.
    attn: Array4<f64>,
    ctx: Array3<f64>,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        d: usize,
        heads: usize,
    ) -> MultiHeadAttention {
        assert!(d % heads == 0, "model dim {d} not divisible by {heads} heads");
        MultiHeadAttention {
            wq: Linear::new(store, rng, &format!("{name}.wq"), d, d),
            wk: Linear::new(store, rng, &format!("{name}.wk"), d, d),
            wv: Linear::new(store, rng, &format!("{name}.wv"), d, d),
            wo: Linear::new(store, rng, &format!("{name}.wo"), d, d),
            d,
            heads,
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Array3<f64>) -> (Array3<f64>, MhaCache) {
        let (b, s, d) = x.dim();
        debug_assert_eq!(d, self.d);
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let flat = x.to_shape((b * s, d)).unwrap();
        let q3 = project(&self.wq, store, &flat, b, s, d);
        let k3 = project(&self.wk, store, &flat, b, s, d);
        let v3 = project(&self.wv, store, &flat, b, s, d);

        let mut attn = Array4::zeros((b, self.heads, s, s));
        let mut ctx = Array3::zeros((b, s, d));
        for ib in 0..b {
            for h in 0..self.heads {
                let cols = s![ib, .., h * dh..(h + 1) * dh];
                let qh = q3.slice(cols);
                let kh = k3.slice(cols);
                let vh = v3.slice(cols);
                let mut scores = qh.dot(&kh.t());
                scores *= scale;
                softmax_rows(&mut scores);
                let ctx_h = scores.dot(&vh);
                attn.slice_mut(s![ib, h, .., ..]).assign(&scores);
                ctx.slice_mut(cols).assign(&ctx_h);
            }
        }

        let ctx_flat = ctx.to_shape((b * s, d)).unwrap().to_owned();
        let out = self
            .wo
            .forward2(store, &ctx_flat)
            .into_shape_with_order((b, s, d))
            .unwrap();
        (out, MhaCache { q: q3, k: k3, v: v3, attn, ctx })
    }

    /// Backward pass; accumulates projection gradients and returns the input
    /// gradient. `x` is the layer input that produced the cache.
    pub fn backward(
        &self,
        store: &mut ParamStore,
        x: &Array3<f64>,
        cache: &MhaCache,
        dout: &Array3<f64>,
    ) -> Array3<f64> {
        let (b, s, d) = x.dim();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let ctx_flat = cache.ctx.to_shape((b * s, d)).unwrap().to_owned();
        let dout_flat = dout.to_shape((b * s, d)).unwrap().to_owned();
        let dctx_flat = self.wo.backward2(store, &ctx_flat, &dout_flat);
        let dctx = dctx_flat.into_shape_with_order((b, s, d)).unwrap();

        let mut dq = Array3::<f64>::zeros((b, s, d));
        let mut dk = Array3::<f64>::zeros((b, s, d));
        let mut dv = Array3::<f64>::zeros((b, s, d));
        for ib in 0..b {
            for h in 0..self.heads {
                let cols = s![ib, .., h * dh..(h + 1) * dh];
                let a = cache.attn.slice(s![ib, h, .., ..]);
                let dctx_h = dctx.slice(cols);
                let vh = cache.v.slice(cols);

                let da = dctx_h.dot(&vh.t());
                dv.slice_mut(cols).assign(&a.t().dot(&dctx_h));

                // Softmax backward per row.
                let mut dscores = Array2::zeros((s, s));
                for r in 0..s {
                    let arow = a.row(r);
                    let darow = da.row(r);
                    let dot: f64 = arow.iter().zip(darow.iter()).map(|(p, g)| p * g).sum();
                    for c in 0..s {
                        dscores[[r, c]] = arow[c] * (darow[c] - dot);
                    }
                }
                dscores *= scale;

                let qh = cache.q.slice(cols);
                let kh = cache.k.slice(cols);
                dq.slice_mut(cols).assign(&dscores.dot(&kh));
                dk.slice_mut(cols).assign(&dscores.t().dot(&qh));
            }
        }

        let flat_x = x.to_shape((b * s, d)).unwrap().to_owned();
        let mut dx = self
            .wq
            .backward2(store, &flat_x, &dq.to_shape((b * s, d)).unwrap().to_owned());
        dx += &self
            .wk
            .backward2(store, &flat_x, &dk.to_shape((b * s, d)).unwrap().to_owned());
        dx += &self
            .wv
            .backward2(store, &flat_x, &dv.to_shape((b * s, d)).unwrap().to_owned());
        dx.into_shape_with_order((b, s, d)).unwrap()
    }
}

fn project(
    lin: &Linear,
    store: &ParamStore,
    flat: &ndarray::CowArray<'_, f64, ndarray::Ix2>,
    b: usize,
    s: usize,
    d: usize,
) -> Array3<f64> {
    lin.forward2(store, &flat.to_owned())
        .into_shape_with_order((b, s, d))
        .unwrap()
}

pub fn softmax_rows(x: &mut Array2<f64>) {
    for mut row in x.rows_mut() {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Post-norm encoder layer:
/// `z = LN(x + Drop(MHA(x)))`, `h = LN(z + Drop(FFN(z)))`.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub mha: MultiHeadAttention,
    pub ln1: LayerNorm,
    pub lin1: Linear,
    pub lin2: Linear,
    pub ln2: LayerNorm,
    pub dropout: f64,
}

#[derive(Debug)]
pub struct EncoderLayerCache {
    x: Array3<f64>,
    mha: MhaCache,
    drop1: DropoutMask,
    ln1: LayerNormCache,
    z: Array3<f64>,
    ffn_pre: Array2<f64>,
    ffn_hidden: Array2<f64>,
    drop2: DropoutMask,
    ln2: LayerNormCache,
}

impl EncoderLayer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        d: usize,
        heads: usize,
        d_ffn: usize,
        dropout: f64,
    ) -> EncoderLayer {
        EncoderLayer {
            mha: MultiHeadAttention::new(store, rng, &format!("{name}.mha"), d, heads),
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            lin1: Linear::new(store, rng, &format!("{name}.ffn1"), d, d_ffn),
            lin2: Linear::new(store, rng, &format!("{name}.ffn2"), d_ffn, d),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            dropout,
        }
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        x: &Array3<f64>,
        mut rng: Option<&mut ChaCha12Rng>,
        keep_cache: bool,
    ) -> (Array3<f64>, Option<EncoderLayerCache>) {
        let (b, s, d) = x.dim();

        let (attn_out, mha_cache) = self.mha.forward(store, x);
        let mut attn_flat = attn_out.into_shape_with_order((b * s, d)).unwrap();
        let drop1 = dropout_forward(&mut attn_flat, self.dropout, rng.as_deref_mut());
        let mut r1 = x.to_shape((b * s, d)).unwrap().to_owned();
        r1 += &attn_flat;
        let (z_flat, ln1_cache) = self.ln1.forward2(store, &r1);

        let ffn_pre = self.lin1.forward2(store, &z_flat);
        let mut hidden = ffn_pre.clone();
        relu_forward(&mut hidden);
        let mut ffn_out = self.lin2.forward2(store, &hidden);
        let drop2 = dropout_forward(&mut ffn_out, self.dropout, rng.as_deref_mut());
        let mut r2 = z_flat.clone();
        r2 += &ffn_out;
        let (h_flat, ln2_cache) = self.ln2.forward2(store, &r2);

        let h = h_flat.into_shape_with_order((b, s, d)).unwrap();
        let cache = keep_cache.then(|| EncoderLayerCache {
            x: x.clone(),
            mha: mha_cache,
            drop1,
            ln1: ln1_cache,
            z: z_flat.into_shape_with_order((b, s, d)).unwrap(),
            ffn_pre,
            ffn_hidden: hidden,
            drop2,
            ln2: ln2_cache,
        });
        (h, cache)
    }

    pub fn backward(
        &self,
        store: &mut ParamStore,
        cache: &EncoderLayerCache,
        dh: &Array3<f64>,
    ) -> Array3<f64> {
        let (b, s, d) = dh.dim();
        let dh_flat = dh.to_shape((b * s, d)).unwrap().to_owned();

        let dr2 = self.ln2.backward2(store, &cache.ln2, &dh_flat);
        let mut dffn = dr2.clone();
        dropout_backward(&cache.drop2, &mut dffn);
        let mut dhidden = self.lin2.backward2(store, &cache.ffn_hidden, &dffn);
        relu_backward(&cache.ffn_pre, &mut dhidden);
        let z_flat = cache.z.to_shape((b * s, d)).unwrap().to_owned();
        let mut dz = self.lin1.backward2(store, &z_flat, &dhidden);
        dz += &dr2; // residual

        let dr1 = self.ln1.backward2(store, &cache.ln1, &dz);
        let mut dattn = dr1.clone();
        dropout_backward(&cache.drop1, &mut dattn);
        let dattn3 = dattn.into_shape_with_order((b, s, d)).unwrap();
        let mut dx = self.mha.backward(store, &cache.x, &cache.mha, &dattn3);
        let dr1_3 = dr1.into_shape_with_order((b, s, d)).unwrap();
        dx += &dr1_3; // residual
        dx
    }
}

/// A stack of encoder layers.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub layers: Vec<EncoderLayer>,
}

impl Encoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        d: usize,
        heads: usize,
        d_ffn: usize,
        n_layers: usize,
        dropout: f64,
    ) -> Encoder {
        let layers = (0..n_layers)
            .map(|i| EncoderLayer::new(store, rng, &format!("{name}.layer{i}"), d, heads, d_ffn, dropout))
            .collect();
        Encoder { layers }
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        x: Array3<f64>,
        mut rng: Option<&mut ChaCha12Rng>,
        keep_cache: bool,
    ) -> (Array3<f64>, Vec<EncoderLayerCache>) {
        let mut h = x;
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (next, cache) = layer.forward(store, &h, rng.as_deref_mut(), keep_cache);
            if let Some(c) = cache {
                caches.push(c);
            }
            h = next;
        }
        (h, caches)
    }

    pub fn backward(
        &self,
        store: &mut ParamStore,
        caches: &[EncoderLayerCache],
        dh: Array3<f64>,
    ) -> Array3<f64> {
        let mut grad = dh;
        for (layer, cache) in self.layers.iter().zip(caches).rev() {
            grad = layer.backward(store, cache, &grad);
        }
        grad
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn softmax_rows_are_distributions() {
        let mut x = Array2::from_shape_fn((4, 6), |(i, j)| (i as f64 - j as f64) * 1.7);
        softmax_rows(&mut x);
        for row in x.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|v| *v > 0.0));
        }
    }

    #[test]
    fn encoder_preserves_shape_and_is_batch_equivariant() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let enc = Encoder::new(&mut store, &mut rng, "enc", 8, 2, 16, 2, 0.0);
        let x = Array3::from_shape_fn((3, 5, 8), |(b, s, d)| ((b * 31 + s * 7 + d) as f64 * 0.11).sin());
        let (y, _) = enc.forward(&store, x.clone(), None, false);
        assert_eq!(y.dim(), (3, 5, 8));

        // Swap subjects 0 and 2: outputs swap identically.
        let mut xp = x.clone();
        let (a, c) = (x.slice(s![0, .., ..]).to_owned(), x.slice(s![2, .., ..]).to_owned());
        xp.slice_mut(s![0, .., ..]).assign(&c);
        xp.slice_mut(s![2, .., ..]).assign(&a);
        let (yp, _) = enc.forward(&store, xp, None, false);
        assert_eq!(yp.slice(s![0, .., ..]), y.slice(s![2, .., ..]));
        assert_eq!(yp.slice(s![2, .., ..]), y.slice(s![0, .., ..]));
    }

    #[test]
    fn final_positions_are_layer_normalized() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        let enc = Encoder::new(&mut store, &mut rng, "enc", 16, 4, 32, 3, 0.0);
        let x = Array3::from_shape_fn((2, 9, 16), |(b, s, d)| ((b + s * 3 + d * 5) as f64 * 0.29).cos());
        let (y, _) = enc.forward(&store, x, None, false);
        for b in 0..2 {
            for pos in 0..9 {
                let row = y.slice(s![b, pos, ..]);
                let mean = row.sum() / 16.0;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
                assert!(mean.abs() < 1e-10, "mean {mean}");
                assert!((var - 1.0).abs() < 1e-4, "var {var}");
            }
        }
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(41);
        let enc = Encoder::new(&mut store, &mut rng, "enc", 6, 2, 10, 2, 0.0);
        let x = Array3::from_shape_fn((2, 4, 6), |(b, s, d)| ((b * 17 + s * 5 + d * 3) as f64 * 0.17).sin());

        // Weighted linear loss: sums of squares are nearly invariant under
        // the final layer norm, leaving only noise-level input gradients.
        let coef = Array3::from_shape_fn((2, 4, 6), |(b, s, d)| ((b * 13 + s * 7 + d * 3) as f64 * 0.41).cos() + 0.1);
        let loss = |store: &ParamStore| -> f64 {
            let (y, _) = enc.forward(store, x.clone(), None, false);
            (&y * &coef).sum()
        };

        let (_, caches) = enc.forward(&store, x.clone(), None, true);
        let dy = coef.clone();
        store.zero_grads();
        enc.backward(&mut store, &caches, dy);

        // Sample a handful of parameters from every tensor. Gradients below
        // the FD noise floor are compared absolutely.
        let h = 1e-5;
        let mut checked = 0;
        let mut max_rel: f64 = 0.0;
        for idx in 0..store.params().len() {
            let n = store.params()[idx].value.len();
            let stride = (n / 3).max(1);
            for flat in (0..n).step_by(stride) {
                let orig = store.params()[idx].value.as_slice().unwrap()[flat];
                store.params_mut()[idx].value.as_slice_mut().unwrap()[flat] = orig + h;
                let lp = loss(&store);
                store.params_mut()[idx].value.as_slice_mut().unwrap()[flat] = orig - h;
                let lm = loss(&store);
                store.params_mut()[idx].value.as_slice_mut().unwrap()[flat] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let an = store.params()[idx].grad.as_slice().unwrap()[flat];
                let denom = fd.abs().max(an.abs());
                let rel = if denom < 1e-5 { (fd - an).abs() } else { (fd - an).abs() / denom };
                max_rel = max_rel.max(rel);
                checked += 1;
            }
        }
        assert!(checked > 30);
        assert!(max_rel < 2e-4, "max rel err {max_rel}");
    }
}
