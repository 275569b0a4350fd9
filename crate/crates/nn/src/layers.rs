//! Parameterized layers. Each layer owns [`ParamId`]s into a shared [`ParamStore`].

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::{Float, Tensor};

/// Weight initialization scheme.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// N(0, std²); the usual choice for adversarial image translation nets.
    Normal(f64),
    /// Glorot/Xavier uniform over `(fan_in, fan_out)`.
    GlorotUniform,
}

fn init_tensor<T: Float>(shape: &[usize], fan_in: usize, fan_out: usize, init: Init, rng: &mut impl Rng) -> Tensor<T> {
    let len: usize = shape.iter().product();
    let data = match init {
        Init::Normal(std) => {
            let d = Normal::new(0.0, std).expect("valid std");
            (0..len).map(|_| T::cst(d.sample(rng))).collect()
        }
        Init::GlorotUniform => {
            let lim = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let d = Uniform::new_inclusive(-lim, lim).expect("valid range");
            (0..len).map(|_| T::cst(d.sample(rng))).collect()
        }
    };
    Tensor::new(shape, data)
}

/// Per-forward context: the graph being recorded, the parameters, and the mode.
pub struct Fwd<'a, T, R> {
    pub graph: &'a mut Graph<T>,
    pub params: &'a ParamStore<T>,
    pub train: bool,
    pub rng: &'a mut R,
    /// Parameters enter the graph as constants, so no gradients flow to them.
    pub frozen: bool,
    /// Buffer values produced during a training forward (running statistics).
    pub buffer_updates: Vec<(ParamId, Tensor<T>)>,
}

impl<'a, T: Float, R: Rng> Fwd<'a, T, R> {
    pub fn new(graph: &'a mut Graph<T>, params: &'a ParamStore<T>, train: bool, rng: &'a mut R) -> Self {
        Fwd {
            graph,
            params,
            train,
            rng,
            frozen: false,
            buffer_updates: Vec::new(),
        }
    }

    pub fn frozen(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if self.frozen {
            self.graph.constant(self.params.get(id).clone())
        } else {
            self.graph.param(self.params, id)
        }
    }
}

/// Applies buffer updates collected during a training forward.
pub fn apply_buffer_updates<T: Float>(store: &mut ParamStore<T>, updates: Vec<(ParamId, Tensor<T>)>) {
    for (id, t) in updates {
        store.set(id, t);
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: (usize, usize, usize, usize),
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float>(
        ps: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: (usize, usize, usize, usize),
        bias: bool,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let fan_out = out_ch * kernel * kernel;
        let weight = ps.add(
            format!("{name}.weight"),
            init_tensor(&[out_ch, in_ch, kernel, kernel], fan_in, fan_out, init, rng),
        );
        let bias = bias.then(|| ps.add(format!("{name}.bias"), Tensor::zeros(&[out_ch])));
        Conv2d {
            weight,
            bias,
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
        }
    }

    /// `pad` zeros on every side.
    pub fn symmetric(pad: usize) -> (usize, usize, usize, usize) {
        (pad, pad, pad, pad)
    }

    /// TensorFlow-style "same" padding for stride 1 (extra row/col after).
    pub fn same(kernel: usize) -> (usize, usize, usize, usize) {
        let total = kernel - 1;
        let before = total / 2;
        (before, total - before, before, total - before)
    }

    pub fn forward<T: Float, R: Rng>(&self, f: &mut Fwd<'_, T, R>, x: Var) -> Var {
        let w = f.param(self.weight);
        let b = self.bias.map(|b| f.param(b));
        f.graph.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
    pub out_pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float>(
        ps: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        out_pad: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = ps.add(
            format!("{name}.weight"),
            init_tensor(
                &[in_ch, out_ch, kernel, kernel],
                out_ch * kernel * kernel,
                in_ch * kernel * kernel,
                init,
                rng,
            ),
        );
        let bias = Some(ps.add(format!("{name}.bias"), Tensor::zeros(&[out_ch])));
        ConvTranspose2d {
            weight,
            bias,
            stride,
            pad,
            out_pad,
        }
    }

    pub fn forward<T: Float, R: Rng>(&self, f: &mut Fwd<'_, T, R>, x: Var) -> Var {
        let w = f.param(self.weight);
        let b = self.bias.map(|b| f.param(b));
        f.graph.conv_transpose2d(x, w, b, self.stride, self.pad, self.out_pad)
    }
}

/// Convolution whose weight is divided by its largest singular value,
/// estimated by power iteration on a persistent `u` buffer.
#[derive(Clone, Debug)]
pub struct SpectralConv2d {
    pub conv: Conv2d,
    pub u: ParamId,
}

impl SpectralConv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float>(
        ps: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let conv = Conv2d::new(
            ps,
            name,
            in_ch,
            out_ch,
            kernel,
            stride,
            Conv2d::symmetric(pad),
            true,
            init,
            rng,
        );
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut u: Vec<T> = (0..out_ch).map(|_| T::cst(normal.sample(rng))).collect();
        normalize(&mut u);
        let u = ps.add_buffer(format!("{name}.sn_u"), Tensor::new(&[out_ch], u));
        let layer = SpectralConv2d { conv, u };
        // Settle the estimate so the very first forward is already normalized.
        for _ in 0..10 {
            layer.power_iteration(ps);
        }
        layer
    }

    fn uv<T: Float>(&self, ps: &ParamStore<T>) -> (Vec<T>, Vec<T>) {
        let w = ps.get(self.conv.weight);
        let rows = w.shape()[0];
        let cols = w.len() / rows;
        let u = ps.get(self.u).data().to_vec();
        let wd = w.data();
        let mut v = vec![T::zero(); cols];
        for i in 0..rows {
            for j in 0..cols {
                v[j] += wd[i * cols + j] * u[i];
            }
        }
        normalize(&mut v);
        (u, v)
    }

    /// One power-iteration step, updating the stored `u`.
    pub fn power_iteration<T: Float>(&self, ps: &mut ParamStore<T>) {
        let (_, v) = self.uv(ps);
        let w = ps.get(self.conv.weight);
        let rows = w.shape()[0];
        let cols = v.len();
        let wd = w.data();
        let mut u: Vec<T> = (0..rows)
            .map(|i| wd[i * cols..(i + 1) * cols].iter().zip(&v).map(|(&a, &b)| a * b).sum())
            .collect();
        normalize(&mut u);
        ps.set(self.u, Tensor::new(&[rows], u));
    }

    pub fn forward<T: Float, R: Rng>(&self, f: &mut Fwd<'_, T, R>, x: Var) -> Var {
        let (u, v) = self.uv(f.params);
        let w = f.param(self.conv.weight);
        let w = f.graph.spectral_norm(w, &u, &v);
        let b = self.conv.bias.map(|b| f.param(b));
        f.graph.conv2d(x, w, b, self.conv.stride, self.conv.pad)
    }
}

fn normalize<T: Float>(x: &mut [T]) {
    let n = x.iter().map(|&a| a * a).sum::<T>().sqrt() + T::cst(1e-12);
    for a in x {
        *a /= n;
    }
}

/// Batch normalization with learned affine and running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new<T: Float>(ps: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: ps.add(format!("{name}.gamma"), Tensor::full(&[channels], T::one())),
            beta: ps.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: ps.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: ps.add_buffer(format!("{name}.running_var"), Tensor::full(&[channels], T::one())),
            momentum: 0.1,
            eps: 1e-3,
        }
    }

    pub fn forward<T: Float, R: Rng>(&self, f: &mut Fwd<'_, T, R>, x: Var) -> Var {
        let gamma = f.param(self.gamma);
        let beta = f.param(self.beta);
        let eps = T::cst(self.eps);
        if f.train {
            let (y, mean, var) = f.graph.batch_norm(x, gamma, beta, None, eps);
            let mom = T::cst(self.momentum);
            let shape = f.graph.value(x).shape();
            let count: usize = shape[0] * shape[2..].iter().product::<usize>();
            let unbias = if count > 1 {
                T::cst(count as f64 / (count - 1) as f64)
            } else {
                T::one()
            };
            let rm = f.params.get(self.running_mean);
            let rv = f.params.get(self.running_var);
            let new_mean: Vec<T> = rm
                .data()
                .iter()
                .zip(&mean)
                .map(|(&r, &m)| (T::one() - mom) * r + mom * m)
                .collect();
            let new_var: Vec<T> = rv
                .data()
                .iter()
                .zip(&var)
                .map(|(&r, &v)| (T::one() - mom) * r + mom * v * unbias)
                .collect();
            let c = new_mean.len();
            f.buffer_updates.push((self.running_mean, Tensor::new(&[c], new_mean)));
            f.buffer_updates.push((self.running_var, Tensor::new(&[c], new_var)));
            y
        } else {
            let mean = f.params.get(self.running_mean).data().to_vec();
            let var = f.params.get(self.running_var).data().to_vec();
            f.graph.batch_norm(x, gamma, beta, Some((&mean, &var)), eps).0
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Float>(ps: &mut ParamStore<T>, name: &str, fin: usize, fout: usize, init: Init, rng: &mut impl Rng) -> Self {
        Linear {
            weight: ps.add(format!("{name}.weight"), init_tensor(&[fout, fin], fin, fout, init, rng)),
            bias: ps.add(format!("{name}.bias"), Tensor::zeros(&[fout])),
        }
    }

    pub fn forward<T: Float, R: Rng>(&self, f: &mut Fwd<'_, T, R>, x: Var) -> Var {
        let w = f.param(self.weight);
        let b = f.param(self.bias);
        f.graph.linear(x, w, b)
    }
}

/// Inverted dropout; identity outside training.
pub fn dropout<T: Float, R: Rng>(f: &mut Fwd<'_, T, R>, x: Var, p: f64) -> Var {
    if !f.train || p <= 0.0 {
        return x;
    }
    let keep = T::cst(1.0 / (1.0 - p));
    let n = f.graph.value(x).len();
    let mask = (0..n)
        .map(|_| if f.rng.random::<f64>() < p { T::zero() } else { keep })
        .collect();
    f.graph.mask(x, mask)
}
