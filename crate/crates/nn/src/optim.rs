use crate::params::{ParamGrads, ParamStore};
use crate::{Float, Tensor};

/// Adam with bias correction, matching the usual `torch.optim.Adam` update.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    step: u64,
    m: Vec<Option<Tensor<T>>>,
    v: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Adam<T> {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam {
            lr: T::cst(lr),
            beta1: T::cst(beta1),
            beta2: T::cst(beta2),
            eps: T::cst(1e-8),
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &ParamGrads<T>) {
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = T::one() - self.beta1.powi(t);
        let bc2 = T::one() - self.beta2.powi(t);
        for id in store.ids().collect::<Vec<_>>() {
            if !store.is_trainable(id) {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let p = store.get_mut(id);
            let m = self.m[id.0].get_or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self.v[id.0].get_or_insert_with(|| Tensor::zeros(p.shape()));
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = self.beta1 * *mi + (T::one() - self.beta1) * gi;
                *vi = self.beta2 * *vi + (T::one() - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamId;

    #[test]
    fn first_step_moves_by_lr_in_sign_direction() {
        let mut ps = ParamStore::<f64>::new();
        let id = ps.add("p", Tensor::new(&[3], vec![1.0, 1.0, 1.0]));
        let mut g = ParamGrads::new(&ps);
        g.add(id, &Tensor::new(&[3], vec![0.5, -2.0, 0.0]));
        let mut opt = Adam::new(0.1, 0.5, 0.999);
        opt.step(&mut ps, &g);
        let d = ps.get(ParamId(0)).data();
        assert!((d[0] - 0.9).abs() < 1e-6);
        assert!((d[1] - 1.1).abs() < 1e-6);
        assert_eq!(d[2], 1.0);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut ps = ParamStore::<f64>::new();
        let id = ps.add("p", Tensor::new(&[2], vec![3.0, -4.0]));
        let mut opt = Adam::new(0.05, 0.9, 0.999);
        for _ in 0..2000 {
            let mut g = ParamGrads::new(&ps);
            let p = ps.get(id).clone();
            g.add(id, &p.map(|x| 2.0 * x));
            opt.step(&mut ps, &g);
        }
        assert!(ps.get(id).sq_norm() < 1e-4);
    }
}
