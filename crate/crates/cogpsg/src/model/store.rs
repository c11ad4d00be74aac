//! Flat registry of named parameter tensors with gradient buffers.
//!
//! Layers hold [`ParamId`] handles instead of the tensors themselves, which
//! keeps borrowing simple: reads go through `&ParamStore`, gradient
//! accumulation is a short `&mut` call per tensor, and the optimizer /
//! checkpoint code can walk every parameter without knowing the
//! architecture.

use ndarray::{ArrayD, ArrayView1, ArrayView2, ArrayViewD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
    /// Running statistics and the like are stored but skipped by the
    /// optimizer.
    pub trainable: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn alloc_const(&mut self, name: &str, shape: &[usize], fill: f64, trainable: bool) -> ParamId {
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            value: ArrayD::from_elem(IxDyn(shape), fill),
            grad: ArrayD::zeros(IxDyn(shape)),
            trainable,
        });
        id
    }

    /// Uniform init in `[-bound, bound]`, drawn in row-major order.
    pub fn alloc_uniform(
        &mut self,
        name: &str,
        shape: &[usize],
        bound: f64,
        rng: &mut ChaCha12Rng,
    ) -> ParamId {
        let id = self.alloc_const(name, shape, 0.0, true);
        for v in self.params[id.0].value.iter_mut() {
            *v = bound * (2.0 * rng.random::<f64>() - 1.0);
        }
        id
    }

    pub fn value(&self, id: ParamId) -> ArrayViewD<'_, f64> {
        self.params[id.0].value.view()
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.params[id.0].value
    }

    /// 2-D view of a matrix parameter.
    pub fn mat(&self, id: ParamId) -> ArrayView2<'_, f64> {
        self.params[id.0]
            .value
            .view()
            .into_dimensionality()
            .expect("parameter is not 2-D")
    }

    /// 1-D view of a vector parameter.
    pub fn vec1(&self, id: ParamId) -> ArrayView1<'_, f64> {
        self.params[id.0]
            .value
            .view()
            .into_dimensionality()
            .expect("parameter is not 1-D")
    }

    pub fn add_grad(&mut self, id: ParamId, delta: &ArrayD<f64>) {
        self.params[id.0].grad += delta;
    }

    pub fn add_grad_2d(&mut self, id: ParamId, delta: &ndarray::Array2<f64>) {
        let mut g = self.params[id.0]
            .grad
            .view_mut()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("gradient is not 2-D");
        g += delta;
    }

    pub fn add_grad_1d(&mut self, id: ParamId, delta: &ndarray::Array1<f64>) {
        let mut g = self.params[id.0]
            .grad
            .view_mut()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("gradient is not 1-D");
        g += delta;
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of trainable scalar parameters.
    pub fn n_trainable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn alloc_and_grad_round_trip() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let w = store.alloc_uniform("w", &[2, 3], 0.5, &mut rng);
        let running = store.alloc_const("bn.mean", &[3], 0.0, false);
        assert!(store.value(w).iter().all(|v| v.abs() <= 0.5));
        assert_eq!(store.n_trainable(), 6);
        assert!(!store.params()[1].trainable);

        store.add_grad_2d(w, &ndarray::Array2::ones((2, 3)));
        store.add_grad_2d(w, &ndarray::Array2::ones((2, 3)));
        assert!(store.params()[0].grad.iter().all(|g| *g == 2.0));
        store.zero_grads();
        assert!(store.params()[0].grad.iter().all(|g| *g == 0.0));
        assert_eq!(store.by_name("bn.mean"), Some(running));
    }

    #[test]
    fn same_seed_same_init() {
        let mut a = ParamStore::new();
        let mut b = ParamStore::new();
        let mut ra = ChaCha12Rng::seed_from_u64(9);
        let mut rb = ChaCha12Rng::seed_from_u64(9);
        let wa = a.alloc_uniform("w", &[4, 4], 1.0, &mut ra);
        let wb = b.alloc_uniform("w", &[4, 4], 1.0, &mut rb);
        assert_eq!(a.value(wa), b.value(wb));
    }
}
