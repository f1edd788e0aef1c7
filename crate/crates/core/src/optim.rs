//! Adam over a [`ParamStore`].

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

pub const DEFAULT_LR: f64 = 2e-4;
pub const DEFAULT_BETA1: f64 = 0.5;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct Adam<T: Real> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of updates applied so far.
    pub t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>, lr: f64) -> Self {
        Self::with_betas(store, lr, DEFAULT_BETA1, DEFAULT_BETA2)
    }

    pub fn with_betas(store: &ParamStore<T>, lr: f64, beta1: f64, beta2: f64) -> Self {
        let zeros = |e: &crate::params::Entry<T>| {
            if e.trainable {
                vec![T::zero(); e.tensor.len()]
            } else {
                Vec::new()
            }
        };
        Adam {
            lr,
            beta1,
            beta2,
            eps: DEFAULT_EPS,
            t: 0,
            m: store.entries().iter().map(zeros).collect(),
            v: store.entries().iter().map(zeros).collect(),
        }
    }

    /// Applies one update from the accumulated gradients; entries without a
    /// gradient buffer are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>) {
        self.t += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::one() - T::of(self.beta1.powi(self.t as i32));
        let c2 = T::one() - T::of(self.beta2.powi(self.t as i32));
        let (lr, eps) = (T::of(self.lr), T::of(self.eps));
        for ((e, m), v) in store
            .entries_mut()
            .iter_mut()
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            if !e.trainable {
                continue;
            }
            let Some(grad) = e.tensor.grad().map(<[T]>::to_vec) else {
                continue;
            };
            for (i, p) in e.tensor.data_mut().iter_mut().enumerate() {
                let gi = grad[i];
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                *p = *p - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }

    /// First and second moments as tensors, in store order (empty for buffers).
    pub fn moments(&self) -> (Vec<Tensor<T>>, Vec<Tensor<T>>) {
        let wrap = |vs: &Vec<Vec<T>>| {
            vs.iter()
                .map(|x| Tensor::new(&[x.len()], x.clone()).expect("flat shape"))
                .collect()
        };
        (wrap(&self.m), wrap(&self.v))
    }

    pub fn set_moments(&mut self, m: Vec<Vec<T>>, v: Vec<Vec<T>>) -> Result<()> {
        let fits = |a: &[Vec<T>], b: &[Vec<T>]| {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.len() == y.len())
        };
        if !fits(&m, &self.m) || !fits(&v, &self.v) {
            return Err(Error::Corrupt(
                "optimizer moments do not match parameters".into(),
            ));
        }
        self.m = m;
        self.v = v;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_scripted_single_parameter() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", Tensor::scalar(1.5));
        let buf = store.add_buffer("stat", Tensor::scalar(3.0));
        let mut adam = Adam::new(&store, 0.01);

        // Oracle: f(x) = x², so g = 2x.
        let (mut x, mut m, mut v) = (1.5f64, 0.0f64, 0.0f64);
        for t in 1..=5 {
            let g = 2.0 * x;
            m = 0.5 * m + 0.5 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.5f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= 0.01 * mh / (vh.sqrt() + 1e-8);

            store.zero_grads();
            let cur = store.get(id).item();
            store.get_mut(id).accumulate_grad(&[2.0 * cur]);
            adam.step(&mut store);
            assert!((store.get(id).item() - x).abs() < 1e-8, "step {t}");
        }
        assert_eq!(adam.t, 5);
        assert_eq!(store.get(buf).item(), 3.0);
    }

    #[test]
    fn moments_round_trip() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", Tensor::new(&[2], vec![1.0, -1.0]).unwrap());
        let mut adam = Adam::new(&store, 0.1);
        store.get_mut(id).accumulate_grad(&[0.5, 0.25]);
        adam.step(&mut store);
        let (m, v) = adam.moments();
        let mut other = Adam::new(&store, 0.1);
        other
            .set_moments(
                m.into_iter().map(Tensor::into_data).collect(),
                v.into_iter().map(Tensor::into_data).collect(),
            )
            .unwrap();
        assert_eq!(other.moments().0[0].data(), adam.moments().0[0].data());
        assert!(other.set_moments(vec![], vec![]).is_err());
    }
}
