//! Adam with bias correction.

use super::graph::Gradients;
use super::params::ParamStore;
use super::tensor::{cast, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamStore<T>, lr: f64) -> Result<Self> {
        Self::with_betas(params, lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(params: &ParamStore<T>, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<Self> {
        if lr.is_nan() || lr <= 0.0 {
            return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
        }
        let m: Vec<Tensor<T>> = params.iter().map(|(_, e)| Tensor::zeros(e.value.shape())).collect();
        Ok(AdamState {
            step: 0,
            lr,
            beta1,
            beta2,
            eps,
            v: m.clone(),
            m,
        })
    }

    /// Applies one update. Parameters without a gradient entry (frozen or
    /// unused this step) are left untouched, moments included.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
        for (id, g) in grads.iter() {
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient {
                    name: params.get(id).name.clone(),
                });
            }
            if g.shape() != params.value(id).shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!(
                        "gradient {:?} for `{}` of shape {:?}",
                        g.shape(),
                        params.get(id).name,
                        params.value(id).shape()
                    ),
                ));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (cast::<T>(self.beta1), cast::<T>(self.beta2));
        let bc1 = cast::<T>(1.0 - self.beta1.powi(t));
        let bc2 = cast::<T>(1.0 - self.beta2.powi(t));
        let (lr, eps) = (cast::<T>(self.lr), cast::<T>(self.eps));
        let one = T::one();
        for (id, g) in grads.iter() {
            let m = self.m[id].data_mut();
            let v = self.v[id].data_mut();
            let p = params.value_mut(id).data_mut();
            for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorcore::graph::Graph;

    fn grads_for(store: &ParamStore<f64>, g: Vec<f64>) -> Gradients<f64> {
        // d/dx of sum(c * x) is c.
        let mut graph = Graph::new();
        let vars = store.bind(&mut graph);
        let c = graph.constant(Tensor::vector(g));
        let p = graph.mul(vars[0], c).unwrap();
        let s = graph.sum(p).unwrap();
        graph.backward(s).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut store = ParamStore::new();
        store.add("x", Tensor::vector(vec![1.0, -2.0])).unwrap();
        let mut adam = AdamState::new(&store, 1e-3).unwrap();
        let grads = grads_for(&store, vec![0.0, 0.0]);
        adam.step(&mut store, &grads).unwrap();
        assert_eq!(store.value(0).data(), &[1.0, -2.0]);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn first_step_closed_form() {
        let mut store = ParamStore::new();
        store.add("x", Tensor::vector(vec![0.5, 0.5])).unwrap();
        let lr = 0.01;
        let mut adam = AdamState::new(&store, lr).unwrap();
        let g = [3.0, -0.25];
        let grads = grads_for(&store, g.to_vec());
        adam.step(&mut store, &grads).unwrap();
        for (i, &gi) in g.iter().enumerate() {
            let expected = 0.5 - lr * gi / (gi.abs() + 1e-8);
            assert!((store.value(0).data()[i] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn descends_a_parabola() {
        let mut store = ParamStore::<f64>::new();
        store.add("x", Tensor::vector(vec![1.0])).unwrap();
        let mut adam = AdamState::new(&store, 0.1).unwrap();
        for _ in 0..100 {
            let mut graph = Graph::new();
            let x = store.bind(&mut graph)[0];
            let xx = graph.mul(x, x).unwrap();
            let loss = graph.sum(xx).unwrap();
            let grads = graph.backward(loss).unwrap();
            adam.step(&mut store, &grads).unwrap();
        }
        assert!(store.value(0).data()[0].abs() < 0.1);
        assert_eq!(adam.step, 100);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut store = ParamStore::<f64>::new();
        store.add("encoder.w", Tensor::vector(vec![1.0])).unwrap();
        let mut adam = AdamState::new(&store, 0.1).unwrap();
        let mut graph = Graph::new();
        let x = store.bind(&mut graph)[0];
        let loss = graph.sum(x).unwrap();
        let mut grads = graph.backward(loss).unwrap();
        grads.insert(0, Tensor::vector(vec![f64::NAN]));
        let err = adam.step(&mut store, &grads).unwrap_err();
        assert!(err.to_string().contains("encoder.w"));
        assert_eq!(adam.step, 0);
        assert_eq!(store.value(0).data(), &[1.0]);
    }

    #[test]
    fn rejects_non_positive_lr() {
        let store = ParamStore::<f32>::new();
        assert!(AdamState::new(&store, 0.0).is_err());
    }
}
