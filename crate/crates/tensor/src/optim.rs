use crate::{Gradients, ParamStore, Scalar, Tensor};

/// Adam with the usual default moments.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros: Vec<_> = params
            .iter()
            .map(|(_, _, t)| Tensor::zeros(t.shape()))
            .collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Parameters without a gradient are left untouched
    /// but their moments still decay, matching dense Adam with a zero gradient.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let step_size = T::of(lr / bc1);
        let (b1t, b2t) = (T::of(b1), T::of(b2));
        let (ob1, ob2) = (T::of(1.0 - b1), T::of(1.0 - b2));
        let eps = T::of(self.eps);
        let inv_sqrt_bc2 = T::of(1.0 / bc2.sqrt());
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let i = id.index();
            let g = grads.param(id);
            let p = params.get_mut(id).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for j in 0..p.len() {
                let gj = g.map_or(T::zero(), |g| g.data()[j]);
                m[j] = b1t * m[j] + ob1 * gj;
                v[j] = b2t * v[j] + ob2 * gj * gj;
                let denom = v[j].sqrt() * inv_sqrt_bc2 + eps;
                p[j] -= step_size * m[j] / denom;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Graph;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::from_vec([1, 2, 1, 1], vec![3.0f64, -2.0]));
        let mut opt = Adam::new(&store);
        for _ in 0..2000 {
            let grads = {
                let mut g = Graph::new(&store);
                let x = g.param(id);
                let zero = g.constant(Tensor::zeros([1, 2, 1, 1]));
                let l = g.mse(x, zero);
                g.backward(l)
            };
            opt.step(&mut store, &grads, 1e-2);
        }
        assert!(store.get(id).data().iter().all(|v| v.abs() < 1e-2));
        assert_eq!(opt.steps(), 2000);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::scalar(1.0f64));
        let mut opt = Adam::new(&store);
        let grads = {
            let mut g = Graph::new(&store);
            let x = g.param(id);
            let l = g.mean_all(x);
            g.backward(l)
        };
        opt.step(&mut store, &grads, 0.1);
        assert!((store.get(id).data()[0] - 0.9).abs() < 1e-6);
    }
}
