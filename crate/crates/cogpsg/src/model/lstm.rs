//! Stacked LSTM used by the recurrent baseline.

use ndarray::{s, Array1, Array2, Array3};
use rand_chacha::ChaCha12Rng;

use super::store::{ParamId, ParamStore};

/// One LSTM layer with PyTorch-style gate packing (input, forget, cell,
/// output along the first axis).
#[derive(Debug, Clone)]
pub struct LstmLayer {
    pub w_ih: ParamId, // [4H, in]
    pub w_hh: ParamId, // [4H, H]
    pub b: ParamId,    // [4H]
    pub d_in: usize,
    pub d_h: usize,
}

#[derive(Debug, Clone)]
pub struct LstmStack {
    pub layers: Vec<LstmLayer>,
}

pub struct LstmLayerCache {
    /// Inputs per step `[S, in]`.
    x: Array2<f64>,
    /// Gate activations per step.
    i: Array2<f64>,
    f: Array2<f64>,
    g: Array2<f64>,
    o: Array2<f64>,
    c: Array2<f64>,
    h: Array2<f64>,
}

pub struct LstmCache {
    /// One cache per (subject, layer).
    per_subject: Vec<Vec<LstmLayerCache>>,
}

impl LstmStack {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        d_in: usize,
        d_h: usize,
        n_layers: usize,
    ) -> LstmStack {
        let bound = 1.0 / (d_h as f64).sqrt();
        let layers = (0..n_layers)
            .map(|l| {
                let in_dim = if l == 0 { d_in } else { d_h };
                LstmLayer {
                    w_ih: store.alloc_uniform(&format!("{name}.l{l}.w_ih"), &[4 * d_h, in_dim], bound, rng),
                    w_hh: store.alloc_uniform(&format!("{name}.l{l}.w_hh"), &[4 * d_h, d_h], bound, rng),
                    b: store.alloc_uniform(&format!("{name}.l{l}.b"), &[4 * d_h], bound, rng),
                    d_in: in_dim,
                    d_h,
                }
            })
            .collect();
        LstmStack { layers }
    }

    pub fn d_h(&self) -> usize {
        self.layers[0].d_h
    }

    /// Consumes `[B, S, d_in]`, returns the top layer's last hidden state
    /// `[B, H]`.
    pub fn forward(
        &self,
        store: &ParamStore,
        x: &Array3<f64>,
        keep_cache: bool,
    ) -> (Array2<f64>, Option<LstmCache>) {
        let (b, s_count, _) = x.dim();
        let d_h = self.d_h();
        let mut last = Array2::zeros((b, d_h));
        let mut per_subject = Vec::with_capacity(b);
        for ib in 0..b {
            let mut input = x.slice(s![ib, .., ..]).to_owned();
            let mut caches = Vec::with_capacity(self.layers.len());
            for layer in &self.layers {
                let (h_seq, cache) = layer_forward(store, layer, &input);
                input = h_seq;
                if keep_cache {
                    caches.push(cache);
                }
            }
            last.row_mut(ib).assign(&input.row(s_count - 1));
            if keep_cache {
                per_subject.push(caches);
            }
        }
        (last, keep_cache.then_some(LstmCache { per_subject }))
    }

    /// Backward from the gradient of the last hidden state only. Returns
    /// the gradient of the input sequence.
    pub fn backward(
        &self,
        store: &mut ParamStore,
        cache: &LstmCache,
        d_last: &Array2<f64>,
    ) -> Array3<f64> {
        let b = cache.per_subject.len();
        let s_count = cache.per_subject[0][0].x.nrows();
        let d_in = self.layers[0].d_in;
        let mut dx_all = Array3::zeros((b, s_count, d_in));
        for ib in 0..b {
            let caches = &cache.per_subject[ib];
            // Seed: gradient only at the last step of the top layer.
            let top_h = self.d_h();
            let mut d_hseq = Array2::zeros((s_count, top_h));
            d_hseq.row_mut(s_count - 1).assign(&d_last.row(ib));
            for (layer, lcache) in self.layers.iter().zip(caches).rev() {
                d_hseq = layer_backward(store, layer, lcache, &d_hseq);
            }
            dx_all.slice_mut(s![ib, .., ..]).assign(&d_hseq);
        }
        dx_all
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn layer_forward(store: &ParamStore, layer: &LstmLayer, x: &Array2<f64>) -> (Array2<f64>, LstmLayerCache) {
    let s_count = x.nrows();
    let h_dim = layer.d_h;
    let w_ih = store.mat(layer.w_ih);
    let w_hh = store.mat(layer.w_hh);
    let bias = store.vec1(layer.b);

    let mut i_g = Array2::zeros((s_count, h_dim));
    let mut f_g = Array2::zeros((s_count, h_dim));
    let mut g_g = Array2::zeros((s_count, h_dim));
    let mut o_g = Array2::zeros((s_count, h_dim));
    let mut c_s = Array2::zeros((s_count, h_dim));
    let mut h_s = Array2::zeros((s_count, h_dim));

    let mut h_prev = Array1::zeros(h_dim);
    let mut c_prev = Array1::zeros(h_dim);
    for t in 0..s_count {
        let xt = x.row(t);
        // z = W_ih x + W_hh h + b, packed [i f g o].
        let mut z = w_ih.dot(&xt);
        z += &w_hh.dot(&h_prev);
        z += &bias;
        for j in 0..h_dim {
            let (zi, zf, zg, zo) = (z[j], z[h_dim + j], z[2 * h_dim + j], z[3 * h_dim + j]);
            let i = sigmoid(zi);
            let f = sigmoid(zf);
            let g = zg.tanh();
            let o = sigmoid(zo);
            let c: f64 = f * c_prev[j] + i * g;
            let h = o * c.tanh();
            i_g[[t, j]] = i;
            f_g[[t, j]] = f;
            g_g[[t, j]] = g;
            o_g[[t, j]] = o;
            c_s[[t, j]] = c;
            h_s[[t, j]] = h;
        }
        h_prev.assign(&h_s.row(t));
        c_prev.assign(&c_s.row(t));
    }
    let cache = LstmLayerCache { x: x.clone(), i: i_g, f: f_g, g: g_g, o: o_g, c: c_s, h: h_s.clone() };
    (h_s, cache)
}

fn layer_backward(
    store: &mut ParamStore,
    layer: &LstmLayer,
    cache: &LstmLayerCache,
    d_hseq: &Array2<f64>,
) -> Array2<f64> {
    let s_count = cache.x.nrows();
    let h_dim = layer.d_h;
    let w_ih = store.mat(layer.w_ih).to_owned();
    let w_hh = store.mat(layer.w_hh).to_owned();

    let mut dw_ih = Array2::zeros((4 * h_dim, layer.d_in));
    let mut dw_hh = Array2::zeros((4 * h_dim, h_dim));
    let mut db = Array1::zeros(4 * h_dim);
    let mut dx = Array2::zeros((s_count, layer.d_in));

    let mut dh_next = Array1::<f64>::zeros(h_dim);
    let mut dc_next = Array1::<f64>::zeros(h_dim);
    for t in (0..s_count).rev() {
        let mut dz = Array1::zeros(4 * h_dim);
        for j in 0..h_dim {
            let dh = d_hseq[[t, j]] + dh_next[j];
            let (i, f, g, o, c) =
                (cache.i[[t, j]], cache.f[[t, j]], cache.g[[t, j]], cache.o[[t, j]], cache.c[[t, j]]);
            let tc = c.tanh();
            let do_ = dh * tc;
            let mut dc = dh * o * (1.0 - tc * tc) + dc_next[j];
            let di = dc * g;
            let dg = dc * i;
            let c_prev = if t > 0 { cache.c[[t - 1, j]] } else { 0.0 };
            let df = dc * c_prev;
            dc *= f;
            dc_next[j] = dc;
            dz[j] = di * i * (1.0 - i);
            dz[h_dim + j] = df * f * (1.0 - f);
            dz[2 * h_dim + j] = dg * (1.0 - g * g);
            dz[3 * h_dim + j] = do_ * o * (1.0 - o);
        }
        let xt = cache.x.row(t);
        let h_prev = if t > 0 {
            cache.h.row(t - 1).to_owned()
        } else {
            Array1::zeros(h_dim)
        };
        // Outer products.
        for r in 0..4 * h_dim {
            let dzr = dz[r];
            if dzr != 0.0 {
                for cc in 0..layer.d_in {
                    dw_ih[[r, cc]] += dzr * xt[cc];
                }
                for cc in 0..h_dim {
                    dw_hh[[r, cc]] += dzr * h_prev[cc];
                }
                db[r] += dzr;
            }
        }
        dx.row_mut(t).assign(&w_ih.t().dot(&dz));
        dh_next = w_hh.t().dot(&dz);
    }
    store.add_grad_2d(layer.w_ih, &dw_ih);
    store.add_grad_2d(layer.w_hh, &dw_hh);
    store.add_grad_1d(layer.b, &db);
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn output_shape_and_determinism() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let lstm = LstmStack::new(&mut store, &mut rng, "lstm", 6, 10, 2);
        let x = Array3::from_shape_fn((3, 12, 6), |(a, b, c)| ((a * 3 + b * 5 + c) as f64 * 0.19).sin());
        let (h1, _) = lstm.forward(&store, &x, false);
        let (h2, _) = lstm.forward(&store, &x, false);
        assert_eq!(h1.dim(), (3, 10));
        assert_eq!(h1, h2);
    }

    #[test]
    fn lstm_gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let lstm = LstmStack::new(&mut store, &mut rng, "lstm", 3, 4, 2);
        let x = Array3::from_shape_fn((2, 5, 3), |(a, b, c)| ((a * 7 + b * 3 + c * 11) as f64 * 0.23).cos());

        let loss = |store: &ParamStore| -> f64 {
            let (h, _) = lstm.forward(store, &x, false);
            h.iter().map(|v| v * v).sum()
        };

        let (h, cache) = lstm.forward(&store, &x, true);
        let dh = h.mapv(|v| 2.0 * v);
        store.zero_grads();
        lstm.backward(&mut store, &cache.unwrap(), &dh);

        let step = 1e-6;
        let mut max_rel: f64 = 0.0;
        for idx in 0..store.params().len() {
            let n = store.params()[idx].value.len();
            let stride = (n / 6).max(1);
            for flat in (0..n).step_by(stride) {
                let orig = store.params()[idx].value.as_slice().unwrap()[flat];
                store.params_mut()[idx].value.as_slice_mut().unwrap()[flat] = orig + step;
                let lp = loss(&store);
                store.params_mut()[idx].value.as_slice_mut().unwrap()[flat] = orig - step;
                let lm = loss(&store);
                store.params_mut()[idx].value.as_slice_mut().unwrap()[flat] = orig;
                let fd = (lp - lm) / (2.0 * step);
                let an = store.params()[idx].grad.as_slice().unwrap()[flat];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-7);
                max_rel = max_rel.max(rel);
            }
        }
        assert!(max_rel < 1e-4, "max rel err {max_rel}");
    }
}
