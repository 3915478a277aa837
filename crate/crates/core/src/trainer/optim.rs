use crate::model::{ParamGroup, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Adam with decoupled weight decay and per-parameter step counts.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    /// Updates applied to each parameter so far (frozen steps do not count).
    pub steps: Vec<u64>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &ParamStore<T>, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
            m: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            steps: vec![0; params.len()],
        }
    }

    /// One update from the accumulated gradients. Parameters whose group is
    /// rejected by `update` keep their values and moments untouched.
    pub fn step(&mut self, params: &mut ParamStore<T>, lr: f64, update: impl Fn(ParamGroup) -> bool) {
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - self.beta1), T::of(1.0 - self.beta2));
        let eps = T::of(self.eps);
        let decay = T::of(1.0 - lr * self.weight_decay);
        for (i, p) in params.iter_mut().enumerate() {
            if !update(p.group) {
                continue;
            }
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let c1 = T::of(1.0 / (1.0 - self.beta1.powi(t)));
            let c2 = T::of(1.0 / (1.0 - self.beta2.powi(t)));
            let lr_t = T::of(lr);
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let g = p.grad.data();
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + one_b1 * g[j];
                v[j] = b2 * v[j] + one_b2 * g[j] * g[j];
                let m_hat = m[j] * c1;
                let v_hat = v[j] * c2;
                *w = *w * decay - lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Linear warmup from 0 to `peak` over `warmup` steps, then linear
/// (polynomial, power 1) decay to 0 at `total`.
pub fn lr_at(step: usize, peak: f64, warmup: usize, total: usize) -> f64 {
    if step >= total {
        0.0
    } else if step < warmup {
        peak * step as f64 / warmup as f64
    } else {
        peak * (total - step) as f64 / (total - warmup) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_closed_form() {
        assert_eq!(lr_at(0, 1e-3, 10, 100), 0.0);
        assert_eq!(lr_at(10, 1e-3, 10, 100), 1e-3);
        assert!((lr_at(5, 1e-3, 10, 100) - 5e-4).abs() < 1e-18);
        assert!((lr_at(55, 1e-3, 10, 100) - 5e-4).abs() < 1e-18);
        assert_eq!(lr_at(100, 1e-3, 10, 100), 0.0);
        assert_eq!(lr_at(0, 1e-3, 0, 100), 1e-3);
    }

    #[test]
    fn matches_hand_stepped_reference() {
        // Minimize Σ c_i (w_i − 1)² over three scalars.
        let c = [1.0, 3.0, 0.5];
        let mut store = ParamStore::<f64>::default();
        store.add("w".into(), ParamGroup::TextEncoder, Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap());
        let (b1, b2, eps, wd, lr) = (0.9, 0.98, 1e-8, 0.1, 0.05);
        let mut opt = AdamW::new(&store, b1, b2, eps, wd);

        let mut w = [0.5f64, -1.0, 2.0];
        let (mut m, mut v) = ([0.0f64; 3], [0.0f64; 3]);
        for t in 1..=10 {
            let grad: Vec<f64> = (0..3).map(|i| 2.0 * c[i] * (w[i] - 1.0)).collect();
            store.zero_grads();
            let id = store.id("w").unwrap();
            store.get_mut(id).grad.data_mut().copy_from_slice(&grad);
            opt.step(&mut store, lr, |_| true);
            for i in 0..3 {
                m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
                v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
                let mh = m[i] / (1.0 - b1.powi(t));
                let vh = v[i] / (1.0 - b2.powi(t));
                w[i] = w[i] - lr * wd * w[i] - lr * mh / (vh.sqrt() + eps);
            }
            let got = store.get(id).value.data();
            for i in 0..3 {
                assert!((got[i] - w[i]).abs() <= 1e-12, "step {t}: {} vs {}", got[i], w[i]);
            }
        }
    }

    #[test]
    fn masked_groups_are_untouched() {
        let mut store = ParamStore::<f32>::default();
        let a = store.add("a".into(), ParamGroup::Speech, Tensor::full(&[2], 1.0));
        let b = store.add("b".into(), ParamGroup::Adapter, Tensor::full(&[2], 1.0));
        for id in [a, b] {
            store.get_mut(id).grad = Tensor::full(&[2], 0.5);
        }
        let mut opt = AdamW::new(&store, 0.9, 0.98, 1e-8, 0.1);
        opt.step(&mut store, 0.1, |g| g != ParamGroup::Speech);
        assert_eq!(store.get(a).value.data(), &[1.0, 1.0]);
        assert_eq!(opt.steps, vec![0, 1]);
        assert!(store.get(b).value.data()[0] < 1.0);
    }
}
