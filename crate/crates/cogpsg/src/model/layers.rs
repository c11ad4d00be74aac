//! Shared building blocks: affine maps, layer normalization, dropout and
//! sinusoidal positional encoding, each with an explicit backward pass.

use ndarray::{Array1, Array2, Array3, Axis};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use super::store::{ParamId, ParamStore};
use super::ModelError;

/// Affine map `y = x W + b` applied to the rows of a 2-D input.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Linear {
        let bound = 1.0 / (d_in as f64).sqrt();
        let w = store.alloc_uniform(&format!("{name}.w"), &[d_in, d_out], bound, rng);
        let b = store.alloc_uniform(&format!("{name}.b"), &[d_out], bound, rng);
        Linear { w, b, d_in, d_out }
    }

    pub fn forward2(&self, store: &ParamStore, x: &Array2<f64>) -> Array2<f64> {
        debug_assert_eq!(x.ncols(), self.d_in);
        let mut y = x.dot(&store.mat(self.w));
        y += &store.vec1(self.b);
        y
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward2(&self, store: &mut ParamStore, x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
        store.add_grad_2d(self.w, &x.t().dot(dy));
        store.add_grad_1d(self.b, &dy.sum_axis(Axis(0)));
        dy.dot(&store.mat(self.w).t())
    }
}

/// Per-position layer normalization over the last (feature) dimension.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub d: usize,
    pub eps: f64,
}

#[derive(Debug)]
pub struct LayerNormCache {
    /// Normalized input, one row per position.
    xhat: Array2<f64>,
    inv_sigma: Array1<f64>,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> LayerNorm {
        let gamma = store.alloc_const(&format!("{name}.gamma"), &[d], 1.0, true);
        let beta = store.alloc_const(&format!("{name}.beta"), &[d], 0.0, true);
        LayerNorm { gamma, beta, d, eps: 1e-5 }
    }

    pub fn forward2(&self, store: &ParamStore, x: &Array2<f64>) -> (Array2<f64>, LayerNormCache) {
        let n = x.nrows();
        let d = self.d as f64;
        let mut xhat = x.clone();
        let mut inv_sigma = Array1::zeros(n);
        for (r, mut row) in xhat.rows_mut().into_iter().enumerate() {
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let inv = 1.0 / (var + self.eps).sqrt();
            inv_sigma[r] = inv;
            row.mapv_inplace(|v| (v - mean) * inv);
        }
        let gamma = store.vec1(self.gamma);
        let beta = store.vec1(self.beta);
        let mut y = xhat.clone();
        for mut row in y.rows_mut() {
            row.zip_mut_with(&gamma, |v, g| *v *= g);
            row += &beta;
        }
        (y, LayerNormCache { xhat, inv_sigma })
    }

    pub fn backward2(
        &self,
        store: &mut ParamStore,
        cache: &LayerNormCache,
        dy: &Array2<f64>,
    ) -> Array2<f64> {
        let d = self.d as f64;
        let gamma = store.vec1(self.gamma).to_owned();
        let mut dgamma = Array1::zeros(self.d);
        let mut dbeta = Array1::zeros(self.d);
        let mut dx = Array2::zeros(dy.raw_dim());
        for r in 0..dy.nrows() {
            let dyr = dy.row(r);
            let xh = cache.xhat.row(r);
            for c in 0..self.d {
                dgamma[c] += dyr[c] * xh[c];
                dbeta[c] += dyr[c];
            }
            // dxhat = dy * gamma; dx = inv_sigma * (dxhat - mean(dxhat)
            //        - xhat * mean(dxhat * xhat))
            let mut m1 = 0.0;
            let mut m2 = 0.0;
            for c in 0..self.d {
                let dxh = dyr[c] * gamma[c];
                m1 += dxh;
                m2 += dxh * xh[c];
            }
            m1 /= d;
            m2 /= d;
            let inv = cache.inv_sigma[r];
            for c in 0..self.d {
                let dxh = dyr[c] * gamma[c];
                dx[[r, c]] = inv * (dxh - m1 - xh[c] * m2);
            }
        }
        store.add_grad_1d(self.gamma, &dgamma);
        store.add_grad_1d(self.beta, &dbeta);
        dx
    }
}

/// Inverted dropout. The mask stores `0` or `1/(1-p)` so backward is a
/// plain elementwise product.
#[derive(Debug)]
pub struct DropoutMask {
    scale: Option<Array2<f64>>,
}

pub fn dropout_forward(
    x: &mut Array2<f64>,
    p: f64,
    rng: Option<&mut ChaCha12Rng>,
) -> DropoutMask {
    match rng {
        Some(rng) if p > 0.0 => {
            let keep = 1.0 / (1.0 - p);
            let mask = Array2::from_shape_fn(x.raw_dim(), |_| {
                if rng.random::<f64>() < p {
                    0.0
                } else {
                    keep
                }
            });
            *x *= &mask;
            DropoutMask { scale: Some(mask) }
        }
        _ => DropoutMask { scale: None },
    }
}

pub fn dropout_backward(mask: &DropoutMask, dy: &mut Array2<f64>) {
    if let Some(scale) = &mask.scale {
        *dy *= scale;
    }
}

/// Fixed sinusoidal positional encoding table.
#[derive(Debug, Clone)]
pub struct PositionalEncoding {
    table: Array2<f64>,
}

impl PositionalEncoding {
    pub fn new(max_len: usize, d: usize) -> PositionalEncoding {
        let mut table = Array2::zeros((max_len, d));
        for pos in 0..max_len {
            for i in 0..d {
                let angle = pos as f64 / 10_000.0_f64.powf((2 * (i / 2)) as f64 / d as f64);
                table[[pos, i]] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
            }
        }
        PositionalEncoding { table }
    }

    pub fn max_len(&self) -> usize {
        self.table.nrows()
    }

    /// Adds the encoding in place; the backward pass is the identity.
    pub fn apply(&self, x: &mut Array3<f64>) -> Result<(), ModelError> {
        let s = x.dim().1;
        if s > self.table.nrows() {
            return Err(ModelError::SequenceTooLong { got: s, max: self.table.nrows() });
        }
        for mut subject in x.outer_iter_mut() {
            subject += &self.table.slice(ndarray::s![..s, ..]);
        }
        Ok(())
    }
}

pub fn relu_forward(x: &mut Array2<f64>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Backward through ReLU given the pre-activation values.
pub fn relu_backward(pre: &Array2<f64>, dy: &mut Array2<f64>) {
    dy.zip_mut_with(pre, |g, p| {
        if *p <= 0.0 {
            *g = 0.0;
        }
    });
}
