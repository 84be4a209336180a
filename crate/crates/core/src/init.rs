use darc_tensor::{ParamId, ParamStore, Scalar, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Registers freshly initialized parameters and buffers under hierarchical names.
pub(crate) struct Builder<'a, T: Scalar> {
    pub params: &'a mut ParamStore<T>,
    pub buffers: &'a mut ParamStore<T>,
    pub rng: &'a mut ChaCha8Rng,
}

impl<T: Scalar> Builder<'_, T> {
    pub fn normal(&mut self, name: &str, shape: [usize; 4], std: f64) -> ParamId {
        let dist = Normal::new(0.0, std).expect("valid std");
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| T::of(dist.sample(rng)));
        self.params.add(name, t)
    }

    pub fn uniform(&mut self, name: &str, shape: [usize; 4], bound: f64) -> ParamId {
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| T::of(rng.random_range(-bound..bound)));
        self.params.add(name, t)
    }

    /// He-normal convolution weight for `[out, in, k, k]`.
    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> ParamId {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        self.normal(name, [cout, cin, k, k], std)
    }

    pub fn full(&mut self, name: &str, shape: [usize; 4], v: f64) -> ParamId {
        self.params.add(name, Tensor::full(shape, T::of(v)))
    }

    pub fn buffer(&mut self, name: &str, shape: [usize; 4], v: f64) -> ParamId {
        self.buffers.add(name, Tensor::full(shape, T::of(v)))
    }
}
