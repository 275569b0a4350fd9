//! Adversarial, L1 and perceptual losses, and the gradient penalty.

use arepas_nn::{Float, Graph, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Loss terms of one step. Generator-side terms and discriminator-side
/// terms are filled by [`generator_loss`] and [`discriminator_loss`] respectively;
/// `total` is the weighted sum for whichever side produced the value.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub adversarial: f64,
    pub l1: f64,
    pub perceptual: f64,
    pub total: f64,
    pub d_real: f64,
    pub d_fake: f64,
    pub gp: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [
            self.adversarial,
            self.l1,
            self.perceptual,
            self.total,
            self.d_real,
            self.d_fake,
            self.gp,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    pub fn accumulate(&mut self, o: &LossBreakdown, w: f64) {
        self.adversarial += w * o.adversarial;
        self.l1 += w * o.l1;
        self.perceptual += w * o.perceptual;
        self.total += w * o.total;
        self.d_real += w * o.d_real;
        self.d_fake += w * o.d_fake;
        self.gp += w * o.gp;
    }
}

/// Loss weights shared by both sides.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_l1: f64,
    pub lambda_perceptual: f64,
    pub lambda_gp: f64,
    pub real_label: f64,
}

#[inline]
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean binary cross-entropy of `sigmoid(z)` against a constant `target`,
/// with its gradient with respect to `z`.
pub fn bce_with_logits<T: Float>(z: &[T], target: f64) -> (f64, Vec<T>) {
    let n = z.len() as f64;
    let mut total = 0.0;
    let grad = z
        .iter()
        .map(|&zi| {
            let zi = zi.as_f64();
            total += softplus(zi) - target * zi;
            T::cst((sigmoid(zi) - target) / n)
        })
        .collect();
    (total / n, grad)
}

/// Mean absolute difference and its (sub)gradient with respect to `a`.
pub fn l1_loss<T: Float>(a: &[T], b: &[T]) -> (f64, Vec<T>) {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let mut total = 0.0;
    let grad = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x.as_f64() - y.as_f64();
            total += d.abs();
            T::cst(d.signum() * (d != 0.0) as u8 as f64 / n)
        })
        .collect();
    (total / n, grad)
}

/// Mean squared difference and its gradient with respect to `a`.
pub fn mse_loss<T: Float>(a: &[T], b: &[T]) -> (f64, Vec<T>) {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let mut total = 0.0;
    let grad = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x.as_f64() - y.as_f64();
            total += d * d;
            T::cst(2.0 * d / n)
        })
        .collect();
    (total / n, grad)
}

/// Generator objective on graph nodes. `fake` and `d_fake_logits` must be
/// connected to the generator; `features` optionally carries extractor
/// features of the fake image together with the fixed features of the real one.
pub fn generator_loss<T: Float>(
    g: &mut Graph<T>,
    fake: Var,
    real: &Tensor<T>,
    d_fake_logits: Var,
    features: Option<(Var, &Tensor<T>)>,
    w: &LossWeights,
) -> (Var, LossBreakdown) {
    let (adv, g_adv) = bce_with_logits(g.value(d_fake_logits).data(), 1.0);
    let (l1, mut g_l1) = l1_loss(g.value(fake).data(), real.data());
    let lam = T::cst(w.lambda_l1);
    g_l1.iter_mut().for_each(|v| *v *= lam);
    let mut inputs = vec![fake, d_fake_logits];
    let mut grads = vec![
        Tensor::new(g.value(fake).shape(), g_l1),
        Tensor::new(g.value(d_fake_logits).shape(), g_adv),
    ];
    let mut perceptual = 0.0;
    if let Some((ff, fr)) = features {
        if w.lambda_perceptual > 0.0 {
            let (p, mut gp) = mse_loss(g.value(ff).data(), fr.data());
            let lp = T::cst(w.lambda_perceptual);
            gp.iter_mut().for_each(|v| *v *= lp);
            perceptual = p;
            grads.push(Tensor::new(g.value(ff).shape(), gp));
            inputs.push(ff);
        }
    }
    let total = adv + w.lambda_l1 * l1 + w.lambda_perceptual * perceptual;
    let out = g.external(&inputs, T::cst(total), grads);
    (
        out,
        LossBreakdown {
            adversarial: adv,
            l1,
            perceptual,
            total,
            ..Default::default()
        },
    )
}

/// Discriminator objective from logits and an already computed penalty value.
/// Returns the breakdown and the gradients with respect to both logit grids.
pub fn discriminator_loss<T: Float>(
    d_real_logits: &[T],
    d_fake_logits: &[T],
    gp_value: f64,
    w: &LossWeights,
) -> (LossBreakdown, Vec<T>, Vec<T>) {
    let (d_real, g_real) = bce_with_logits(d_real_logits, w.real_label);
    let (d_fake, g_fake) = bce_with_logits(d_fake_logits, 0.0);
    (
        LossBreakdown {
            d_real,
            d_fake,
            gp: gp_value,
            total: d_real + d_fake + w.lambda_gp * gp_value,
            ..Default::default()
        },
        g_real,
        g_fake,
    )
}

/// Scalar function of an input batch with its input gradient.
pub trait Critic<T: Float> {
    fn value_and_input_grad(&mut self, x: &Tensor<T>) -> (T, Tensor<T>);
}

impl<T: Float, F: FnMut(&Tensor<T>) -> (T, Tensor<T>)> Critic<T> for F {
    fn value_and_input_grad(&mut self, x: &Tensor<T>) -> (T, Tensor<T>) {
        self(x)
    }
}

/// Penalty evaluation at a random interpolate.
#[derive(Clone, Debug)]
pub struct PenaltySample<T> {
    /// Interpolation weights, one per batch item.
    pub eps: Vec<f64>,
    pub x_hat: Tensor<T>,
    /// `∇_x̂ D(x̂)`.
    pub grad: Tensor<T>,
    /// Per-item gradient norms.
    pub norms: Vec<f64>,
    /// Mean over items of `(‖∇‖ − 1)²`.
    pub value: f64,
}

/// `x̂ = ε·real + (1 − ε)·fake` with `ε ~ U(0, 1)` per batch item, and the
/// penalty `(‖∇_x̂ D(x̂)‖₂ − 1)²` averaged over items. `D` is the critic's
/// scalar output, which for a batch is the sum of per-item scores.
pub fn gradient_penalty<T: Float, C: Critic<T> + ?Sized, R: Rng + ?Sized>(
    critic: &mut C,
    real: &Tensor<T>,
    fake: &Tensor<T>,
    rng: &mut R,
) -> PenaltySample<T> {
    assert_eq!(real.shape(), fake.shape());
    let n = real.shape()[0];
    let per = real.len() / n;
    let eps: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let data = real
        .data()
        .iter()
        .zip(fake.data())
        .enumerate()
        .map(|(i, (&r, &f))| {
            let e = T::cst(eps[i / per]);
            e * r + (T::one() - e) * f
        })
        .collect();
    let x_hat = Tensor::new(real.shape(), data);
    penalty_at(critic, x_hat, eps)
}

/// Penalty at a given interpolate.
pub fn penalty_at<T: Float, C: Critic<T> + ?Sized>(critic: &mut C, x_hat: Tensor<T>, eps: Vec<f64>) -> PenaltySample<T> {
    let n = x_hat.shape()[0];
    let per = x_hat.len() / n;
    let (_, grad) = critic.value_and_input_grad(&x_hat);
    let norms: Vec<f64> = grad
        .data()
        .chunks(per)
        .map(|c| c.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt())
        .collect();
    let value = norms.iter().map(|g| (g - 1.0) * (g - 1.0)).sum::<f64>() / n as f64;
    PenaltySample {
        eps,
        x_hat,
        grad,
        norms,
        value,
    }
}

/// Direction `v` and scale `s` such that the parameter gradient of the
/// penalty equals `s · ∇_θ ⟨v, ∇_x D(x̂)⟩`, with `‖v‖ = 1`.
/// Returns `None` when the penalty gradient vanishes.
pub fn penalty_direction<T: Float>(p: &PenaltySample<T>) -> Option<(Tensor<T>, f64)> {
    let n = p.norms.len();
    let per = p.grad.len() / n;
    let mut v: Vec<f64> = Vec::with_capacity(p.grad.len());
    for (i, chunk) in p.grad.data().chunks(per).enumerate() {
        let g = p.norms[i];
        let c = if g > 0.0 { 2.0 * (g - 1.0) / (g * n as f64) } else { 0.0 };
        v.extend(chunk.iter().map(|x| c * x.as_f64()));
    }
    let s = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(s > 0.0) {
        return None;
    }
    let v = Tensor::new(p.grad.shape(), v.iter().map(|x| T::cst(x / s)).collect());
    Some((v, s))
}

/// Finite-difference step for the Hessian-vector product in the penalty gradient.
pub fn hvp_step<T: Float>() -> f64 {
    if T::BYTES == 4 {
        1e-2
    } else {
        1e-5
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn w() -> LossWeights {
        LossWeights {
            lambda_l1: 100.0,
            lambda_perceptual: 1.0,
            lambda_gp: 1.0,
            real_label: 0.9,
        }
    }

    #[test]
    fn bce_at_zero_logit_is_ln2() {
        let (v, _) = bce_with_logits(&[0.0f64; 9], 1.0);
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
        let (v, _) = bce_with_logits(&[0.0f64; 4], 0.0);
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn smoothed_real_label_at_logit_ten() {
        let (d, _, _) = discriminator_loss(&[10.0f64], &[0.0], 0.0, &w());
        let expect = 0.1 * (1.0 + 10f64.exp()).ln() + 0.9 * (1.0 + (-10f64).exp()).ln();
        assert!((d.d_real - expect).abs() < 1e-12);
        assert!((d.total - (d.d_real + d.d_fake)).abs() < 1e-15);
    }

    #[test]
    fn identical_images_have_zero_l1() {
        let mut g = Graph::<f64>::new();
        let real = Tensor::new(&[1, 1, 2, 2], vec![0.1, -0.2, 0.3, 0.4]);
        let fake = g.input(real.clone(), true);
        let logits = g.input(Tensor::zeros(&[1, 1, 1, 1]), true);
        let (_, b) = generator_loss(&mut g, fake, &real, logits, None, &w());
        assert_eq!(b.l1, 0.0);
        assert!((b.adversarial - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn linear_critic_penalty_closed_form() {
        let n = 37;
        let mut critic = |x: &Tensor<f64>| (x.sum(), Tensor::full(x.shape(), 1.0));
        let real = Tensor::full(&[1, 1, 1, n], 0.5);
        let fake = Tensor::zeros(&[1, 1, 1, n]);
        let p = gradient_penalty(&mut critic, &real, &fake, &mut ChaCha8Rng::seed_from_u64(0));
        let expect = ((n as f64).sqrt() - 1.0).powi(2);
        assert!((p.value - expect).abs() < 1e-4);
        let mut constant = |x: &Tensor<f64>| (1.0, Tensor::zeros(x.shape()));
        let p = gradient_penalty(&mut constant, &real, &fake, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(p.value, 1.0);
    }
}
