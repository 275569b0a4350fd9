//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation eagerly; [`Graph::backward`] walks the
//! tape in reverse. Graphs are built per step and dropped afterwards.

use crate::conv::{self, ConvGeom};
use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ReflectPad {
        x: Var,
        pad: usize,
    },
    InstanceNorm {
        x: Var,
        inv_std: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        training: bool,
    },
    Relu(Var),
    LeakyRelu(Var, T),
    Tanh(Var),
    Mask {
        x: Var,
        mask: Vec<T>,
    },
    Add(Var, Var),
    AvgPool2(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Reshape(Var),
    ConcatChannels(Vec<Var>),
    SpectralNorm {
        w: Var,
        u: Vec<T>,
        v: Vec<T>,
        sigma: T,
    },
    External {
        inputs: Vec<Var>,
        grads: Vec<Tensor<T>>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf input; gradients are tracked when `requires_grad` is set.
    pub fn input(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.input(t, false)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let trainable = store.is_trainable(id);
        self.push(store.get(id).clone(), Op::Param(id), trainable)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: (usize, usize, usize, usize)) -> Var {
        let (n, c, h, wd) = self.value(x).dims4();
        let (o, wc, kh, kw) = self.value(w).dims4();
        assert_eq!(c, wc, "conv2d channel mismatch");
        let geom = ConvGeom {
            in_h: h,
            in_w: wd,
            kh,
            kw,
            stride,
            pad,
        };
        assert!(geom.valid(), "conv2d kernel larger than padded input");
        let y = conv::conv2d_forward(
            self.value(x).data(),
            n,
            c,
            self.value(w).data(),
            o,
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        let shape = [n, o, geom.out_h(), geom.out_w()];
        self.push(Tensor::new(&shape, y), Op::Conv2d { x, w, b, geom }, ng)
    }

    /// Transposed convolution with `w` shaped `[Cin, Cout, k, k]`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Var {
        let (n, c, h, wd) = self.value(x).dims4();
        let (wc, o, k, _) = self.value(w).dims4();
        assert_eq!(c, wc, "conv_transpose2d channel mismatch");
        let geom = conv::transpose_geom(h, wd, k, stride, pad, out_pad);
        let y = conv::conv_transpose2d_forward(
            self.value(x).data(),
            n,
            c,
            self.value(w).data(),
            o,
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        let shape = [n, o, geom.in_h, geom.in_w];
        self.push(Tensor::new(&shape, y), Op::ConvTranspose2d { x, w, b, geom }, ng)
    }

    pub fn reflect_pad(&mut self, x: Var, pad: usize) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert!(pad < h && pad < w, "reflection pad must be smaller than the input");
        let (oh, ow) = (h + 2 * pad, w + 2 * pad);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); n * c * oh * ow];
        for p in 0..n * c {
            for r in 0..oh {
                let sr = reflect(r as isize - pad as isize, h);
                for q in 0..ow {
                    let sq = reflect(q as isize - pad as isize, w);
                    out[(p * oh + r) * ow + q] = src[(p * h + sr) * w + sq];
                }
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::new(&[n, c, oh, ow], out), Op::ReflectPad { x, pad }, ng)
    }

    /// Per-sample, per-channel normalization without affine parameters.
    pub fn instance_norm(&mut self, x: Var, eps: T) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let hw = h * w;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        let mut inv_std = Vec::with_capacity(n * c);
        let m = T::cst(hw as f64);
        for p in 0..n * c {
            let s = &src[p * hw..(p + 1) * hw];
            let mean = s.iter().copied().sum::<T>() / m;
            let var = s.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / m;
            let is = T::one() / (var + eps).sqrt();
            for (o, &v) in out[p * hw..(p + 1) * hw].iter_mut().zip(s) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let ng = self.ng(x);
        self.push(Tensor::new(&[n, c, h, w], out), Op::InstanceNorm { x, inv_std }, ng)
    }

    /// Batch normalization over `(N, H, W)` per channel. Accepts `[N, C]` or `[N, C, H, W]`.
    ///
    /// With `stats = None` batch statistics are used and returned as
    /// `(mean, biased_var)`; otherwise the given `(mean, var)` are applied.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Option<(&[T], &[T])>,
        eps: T,
    ) -> (Var, Vec<T>, Vec<T>) {
        let shape = self.value(x).shape().to_vec();
        let (n, c) = (shape[0], shape[1]);
        let hw: usize = shape[2..].iter().product();
        let src = self.value(x).data();
        let m = T::cst((n * hw) as f64);
        let (mean, var) = match stats {
            Some((mu, var)) => (mu.to_vec(), var.to_vec()),
            None => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ci in 0..c {
                    let mut acc = T::zero();
                    for s in 0..n {
                        acc += src[(s * c + ci) * hw..(s * c + ci + 1) * hw].iter().copied().sum::<T>();
                    }
                    mean[ci] = acc / m;
                    let mut acc = T::zero();
                    for s in 0..n {
                        for &v in &src[(s * c + ci) * hw..(s * c + ci + 1) * hw] {
                            acc += (v - mean[ci]) * (v - mean[ci]);
                        }
                    }
                    var[ci] = acc / m;
                }
                (mean, var)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); src.len()];
        let mut out = vec![T::zero(); src.len()];
        for s in 0..n {
            for ci in 0..c {
                for i in (s * c + ci) * hw..(s * c + ci + 1) * hw {
                    xhat[i] = (src[i] - mean[ci]) * inv_std[ci];
                    out[i] = g[ci] * xhat[i] + b[ci];
                }
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let training = stats.is_none();
        let v = self.push(
            Tensor::new(&shape, out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            },
            ng,
        );
        (v, mean, var)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let ng = self.ng(x);
        self.push(y, Op::Relu(x), ng)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let y = self.value(x).map(|v| if v > T::zero() { v } else { v * slope });
        let ng = self.ng(x);
        self.push(y, Op::LeakyRelu(x, slope), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.tanh());
        let ng = self.ng(x);
        self.push(y, Op::Tanh(x), ng)
    }

    /// Elementwise product with a constant mask (dropout).
    pub fn mask(&mut self, x: Var, mask: Vec<T>) -> Var {
        let src = self.value(x);
        assert_eq!(src.len(), mask.len());
        let data = src.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let y = Tensor::new(src.shape(), data);
        let ng = self.ng(x);
        self.push(y, Op::Mask { x, mask }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(y, Op::Add(a, b), ng)
    }

    /// 2×2 average pooling with stride 2 (odd trailing rows/cols dropped).
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value(x).data();
        let q = T::cst(0.25);
        let mut out = vec![T::zero(); n * c * oh * ow];
        for p in 0..n * c {
            for r in 0..oh {
                for s in 0..ow {
                    let base = p * h * w;
                    let v = src[base + 2 * r * w + 2 * s]
                        + src[base + 2 * r * w + 2 * s + 1]
                        + src[base + (2 * r + 1) * w + 2 * s]
                        + src[base + (2 * r + 1) * w + 2 * s + 1];
                    out[(p * oh + r) * ow + s] = v * q;
                }
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::new(&[n, c, oh, ow], out), Op::AvgPool2(x), ng)
    }

    /// `y = x wᵀ + b` with `x: [N, in]`, `w: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(xs.len(), 2);
        assert_eq!(xs[1], ws[1], "linear input width");
        let (n, fin, fout) = (xs[0], xs[1], ws[0]);
        let mut out = Vec::with_capacity(n * fout);
        let bias = self.value(b).data();
        for _ in 0..n {
            out.extend_from_slice(bias);
        }
        crate::float::gemm(
            crate::float::MatRef::new(self.value(x).data(), n, fin),
            crate::float::MatRef::t(self.value(w).data(), fout, fin),
            T::one(),
            &mut out,
        );
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(Tensor::new(&[n, fout], out), Op::Linear { x, w, b }, ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let y = self.value(x).clone().reshape(shape);
        let ng = self.ng(x);
        self.push(y, Op::Reshape(x), ng)
    }

    /// Concatenates NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        let (n, _, h, w) = self.value(parts[0]).dims4();
        let hw = h * w;
        let mut ctot = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).dims4();
            assert_eq!((pn, ph, pw), (n, h, w), "concat shape mismatch");
            ctot += pc;
        }
        let mut out = Vec::with_capacity(n * ctot * hw);
        for s in 0..n {
            for &p in parts {
                let pc = self.value(p).shape()[1];
                out.extend_from_slice(&self.value(p).data()[s * pc * hw..(s + 1) * pc * hw]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(
            Tensor::new(&[n, ctot, h, w], out),
            Op::ConcatChannels(parts.to_vec()),
            ng,
        )
    }

    /// `w / σ` with `σ = uᵀ W v`, `W` viewed as `[rows, numel/rows]`.
    /// `u` and `v` are treated as constants.
    pub fn spectral_norm(&mut self, w: Var, u: &[T], v: &[T]) -> Var {
        let wt = self.value(w);
        let rows = wt.shape()[0];
        let cols = wt.len() / rows;
        assert_eq!(u.len(), rows);
        assert_eq!(v.len(), cols);
        let d = wt.data();
        let mut sigma = T::zero();
        for i in 0..rows {
            let row: T = d[i * cols..(i + 1) * cols]
                .iter()
                .zip(v)
                .map(|(&a, &b)| a * b)
                .sum();
            sigma += u[i] * row;
        }
        let inv = T::one() / sigma;
        let y = wt.map(|x| x * inv);
        let ng = self.ng(w);
        self.push(
            y,
            Op::SpectralNorm {
                w,
                u: u.to_vec(),
                v: v.to_vec(),
                sigma,
            },
            ng,
        )
    }

    /// Scalar node whose value and local gradients were computed outside the graph.
    pub fn external(&mut self, inputs: &[Var], value: T, grads: Vec<Tensor<T>>) -> Var {
        assert_eq!(inputs.len(), grads.len());
        for (&v, g) in inputs.iter().zip(&grads) {
            assert_eq!(self.value(v).shape(), g.shape(), "external gradient shape");
        }
        let ng = inputs.iter().any(|&v| self.ng(v));
        self.push(
            Tensor::scalar(value),
            Op::External {
                inputs: inputs.to_vec(),
                grads,
            },
            ng,
        )
    }

    /// Reverse pass from the scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), T::one()));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            self.backward_node(node, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        Gradients { grads }
    }

    fn backward_node(&self, node: &Node<T>, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let acc = |v: Var, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]| {
            if !self.ng(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(a) => a.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Conv2d { x, w, b, geom } => {
                let (n, c, _, _) = self.value(*x).dims4();
                let wt = self.value(*w);
                let o = wt.shape()[0];
                let (dx, dw, db) = conv::conv2d_backward(
                    self.value(*x).data(),
                    n,
                    c,
                    wt.data(),
                    o,
                    geom,
                    gy.data(),
                    self.ng(*x),
                    self.ng(*w),
                );
                if let Some(dx) = dx {
                    acc(*x, Tensor::new(self.value(*x).shape(), dx), grads);
                }
                acc(*w, Tensor::new(wt.shape(), dw), grads);
                if let Some(b) = b {
                    acc(*b, Tensor::new(&[o], db), grads);
                }
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let (n, c, _, _) = self.value(*x).dims4();
                let wt = self.value(*w);
                let o = wt.shape()[1];
                let (dx, dw, db) = conv::conv_transpose2d_backward(
                    self.value(*x).data(),
                    n,
                    c,
                    wt.data(),
                    o,
                    geom,
                    gy.data(),
                    self.ng(*x),
                    self.ng(*w),
                );
                if let Some(dx) = dx {
                    acc(*x, Tensor::new(self.value(*x).shape(), dx), grads);
                }
                acc(*w, Tensor::new(wt.shape(), dw), grads);
                if let Some(b) = b {
                    acc(*b, Tensor::new(&[o], db), grads);
                }
            }
            Op::ReflectPad { x, pad } => {
                let (n, c, h, w) = self.value(*x).dims4();
                let (oh, ow) = (h + 2 * pad, w + 2 * pad);
                let mut dx = vec![T::zero(); n * c * h * w];
                let g = gy.data();
                for p in 0..n * c {
                    for r in 0..oh {
                        let sr = reflect(r as isize - *pad as isize, h);
                        for q in 0..ow {
                            let sq = reflect(q as isize - *pad as isize, w);
                            dx[(p * h + sr) * w + sq] += g[(p * oh + r) * ow + q];
                        }
                    }
                }
                acc(*x, Tensor::new(&[n, c, h, w], dx), grads);
            }
            Op::InstanceNorm { x, inv_std } => {
                let y = node.value.data();
                let (n, c, h, w) = node.value.dims4();
                let hw = h * w;
                let m = T::cst(hw as f64);
                let g = gy.data();
                let mut dx = vec![T::zero(); y.len()];
                for p in 0..n * c {
                    let r = p * hw..(p + 1) * hw;
                    let mg = g[r.clone()].iter().copied().sum::<T>() / m;
                    let mgy = g[r.clone()]
                        .iter()
                        .zip(&y[r.clone()])
                        .map(|(&a, &b)| a * b)
                        .sum::<T>()
                        / m;
                    for i in r {
                        dx[i] = inv_std[p] * (g[i] - mg - y[i] * mgy);
                    }
                }
                acc(*x, Tensor::new(&[n, c, h, w], dx), grads);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            } => {
                let shape = node.value.shape();
                let (n, c) = (shape[0], shape[1]);
                let hw: usize = shape[2..].iter().product();
                let g = gy.data();
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for s in 0..n {
                    for ci in 0..c {
                        for i in (s * c + ci) * hw..(s * c + ci + 1) * hw {
                            dgamma[ci] += g[i] * xhat[i];
                            dbeta[ci] += g[i];
                        }
                    }
                }
                if self.ng(*x) {
                    let mut dx = vec![T::zero(); g.len()];
                    let m = T::cst((n * hw) as f64);
                    for ci in 0..c {
                        let k = gam[ci] * inv_std[ci];
                        let (mg, mgx) = if *training {
                            (dbeta[ci] / m, dgamma[ci] / m)
                        } else {
                            (T::zero(), T::zero())
                        };
                        for s in 0..n {
                            for i in (s * c + ci) * hw..(s * c + ci + 1) * hw {
                                dx[i] = k * (g[i] - mg - xhat[i] * mgx);
                            }
                        }
                    }
                    acc(*x, Tensor::new(shape, dx), grads);
                }
                acc(*gamma, Tensor::new(&[c], dgamma), grads);
                acc(*beta, Tensor::new(&[c], dbeta), grads);
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let data = gy
                    .data()
                    .iter()
                    .zip(xv)
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                acc(*x, Tensor::new(gy.shape(), data), grads);
            }
            Op::LeakyRelu(x, slope) => {
                let xv = self.value(*x).data();
                let data = gy
                    .data()
                    .iter()
                    .zip(xv)
                    .map(|(&g, &v)| if v > T::zero() { g } else { g * *slope })
                    .collect();
                acc(*x, Tensor::new(gy.shape(), data), grads);
            }
            Op::Tanh(x) => {
                let data = gy
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(&g, &y)| g * (T::one() - y * y))
                    .collect();
                acc(*x, Tensor::new(gy.shape(), data), grads);
            }
            Op::Mask { x, mask } => {
                let data = gy.data().iter().zip(mask).map(|(&g, &m)| g * m).collect();
                acc(*x, Tensor::new(gy.shape(), data), grads);
            }
            Op::Add(a, b) => {
                acc(*a, gy.clone(), grads);
                acc(*b, gy.clone(), grads);
            }
            Op::AvgPool2(x) => {
                let (n, c, h, w) = self.value(*x).dims4();
                let (oh, ow) = (h / 2, w / 2);
                let q = T::cst(0.25);
                let g = gy.data();
                let mut dx = vec![T::zero(); n * c * h * w];
                for p in 0..n * c {
                    let base = p * h * w;
                    for r in 0..oh {
                        for s in 0..ow {
                            let v = g[(p * oh + r) * ow + s] * q;
                            dx[base + 2 * r * w + 2 * s] = v;
                            dx[base + 2 * r * w + 2 * s + 1] = v;
                            dx[base + (2 * r + 1) * w + 2 * s] = v;
                            dx[base + (2 * r + 1) * w + 2 * s + 1] = v;
                        }
                    }
                }
                acc(*x, Tensor::new(&[n, c, h, w], dx), grads);
            }
            Op::Linear { x, w, b } => {
                let xs = self.value(*x).shape();
                let (n, fin) = (xs[0], xs[1]);
                let fout = self.value(*w).shape()[0];
                let g = gy.data();
                if self.ng(*x) {
                    let mut dx = vec![T::zero(); n * fin];
                    crate::float::gemm(
                        crate::float::MatRef::new(g, n, fout),
                        crate::float::MatRef::new(self.value(*w).data(), fout, fin),
                        T::zero(),
                        &mut dx,
                    );
                    acc(*x, Tensor::new(&[n, fin], dx), grads);
                }
                if self.ng(*w) {
                    let mut dw = vec![T::zero(); fout * fin];
                    crate::float::gemm(
                        crate::float::MatRef::t(g, n, fout),
                        crate::float::MatRef::new(self.value(*x).data(), n, fin),
                        T::zero(),
                        &mut dw,
                    );
                    acc(*w, Tensor::new(&[fout, fin], dw), grads);
                }
                let mut db = vec![T::zero(); fout];
                for s in 0..n {
                    for (j, d) in db.iter_mut().enumerate() {
                        *d += g[s * fout + j];
                    }
                }
                acc(*b, Tensor::new(&[fout], db), grads);
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                acc(*x, gy.clone().reshape(&shape), grads);
            }
            Op::ConcatChannels(parts) => {
                let (n, ctot, h, w) = node.value.dims4();
                let hw = h * w;
                let g = gy.data();
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).shape()[1];
                    if self.ng(p) {
                        let mut d = Vec::with_capacity(n * pc * hw);
                        for s in 0..n {
                            let start = (s * ctot + offset) * hw;
                            d.extend_from_slice(&g[start..start + pc * hw]);
                        }
                        acc(p, Tensor::new(&[n, pc, h, w], d), grads);
                    }
                    offset += pc;
                }
            }
            Op::SpectralNorm { w, u, v, sigma } => {
                let wt = self.value(*w);
                let rows = u.len();
                let cols = v.len();
                let g = gy.data();
                let inner: T = g.iter().zip(wt.data()).map(|(&a, &b)| a * b).sum();
                let k = inner / (*sigma * *sigma);
                let mut dw = vec![T::zero(); g.len()];
                for i in 0..rows {
                    for j in 0..cols {
                        dw[i * cols + j] = g[i * cols + j] / *sigma - k * u[i] * v[j];
                    }
                }
                acc(*w, Tensor::new(wt.shape(), dw), grads);
            }
            Op::External { inputs, grads: local } => {
                let s = gy.item();
                for (&v, lg) in inputs.iter().zip(local) {
                    let mut g = lg.clone();
                    g.scale(s);
                    acc(v, g, grads);
                }
            }
        }
    }
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * n - 2 - i
    } else {
        i
    };
    r as usize
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Accumulates gradients of every parameter leaf of `graph` into `out`.
    pub fn collect_params(&self, graph: &Graph<T>, out: &mut ParamGrads<T>) {
        for (i, node) in graph.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &self.grads[i]) {
                out.add(*id, g);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(len: usize, k: f64) -> Vec<f64> {
        (0..len).map(|i| ((i as f64 + 0.5) * k).sin()).collect()
    }

    /// Checks d(sum(y ∘ r))/dx against central differences for a unary op builder.
    fn check_unary(shape: &[usize], build: impl Fn(&mut Graph<f64>, Var) -> Var) {
        let x0 = seq(shape.iter().product(), 0.77);
        let probe = |x: &[f64]| -> (f64, Vec<f64>) {
            let mut g = Graph::new();
            let xv = g.input(Tensor::new(shape, x.to_vec()), true);
            let y = build(&mut g, xv);
            let r = seq(g.value(y).len(), 0.31);
            let val: f64 = g.value(y).data().iter().zip(&r).map(|(a, b)| a * b).sum();
            let out = g.external(&[y], val, vec![Tensor::new(g.value(y).shape(), r)]);
            let gr = g.backward(out);
            (val, gr.wrt(xv).unwrap().data().to_vec())
        };
        let (_, grad) = probe(&x0);
        let h = 1e-6;
        for i in 0..x0.len() {
            let mut xp = x0.clone();
            xp[i] += h;
            let mut xm = x0.clone();
            xm[i] -= h;
            let fd = (probe(&xp).0 - probe(&xm).0) / (2.0 * h);
            assert!(
                (fd - grad[i]).abs() < 1e-6 * (1.0 + fd.abs()),
                "component {i}: fd {fd} vs analytic {}",
                grad[i]
            );
        }
    }

    #[test]
    fn reflect_pad_values() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(&[1, 1, 3, 3], (1..=9).map(f64::from).collect()));
        let y = g.reflect_pad(x, 1);
        let v = g.value(y).data();
        assert_eq!(&v[0..5], &[5.0, 4.0, 5.0, 6.0, 5.0]);
        assert_eq!(&v[5..10], &[2.0, 1.0, 2.0, 3.0, 2.0]);
    }

    #[test]
    fn grads_of_pointwise_and_structural_ops() {
        check_unary(&[2, 3, 4, 4], |g, x| g.reflect_pad(x, 2));
        check_unary(&[2, 3, 4, 5], |g, x| g.instance_norm(x, 1e-5));
        check_unary(&[2, 3, 4, 4], |g, x| g.tanh(x));
        check_unary(&[2, 3, 4, 4], |g, x| g.avg_pool2(x));
        check_unary(&[2, 3, 5, 4], |g, x| g.leaky_relu(x, 0.2));
        check_unary(&[2, 3, 4, 4], |g, x| {
            let y = g.concat_channels(&[x, x]);
            g.reshape(y, &[2, 96])
        });
    }

    #[test]
    fn grads_of_parametric_ops() {
        let w = Tensor::new(&[4, 3, 3, 3], seq(108, 0.41));
        let b = Tensor::new(&[4], seq(4, 1.3));
        check_unary(&[2, 3, 6, 6], move |g, x| {
            let w = g.input(w.clone(), false);
            let b = g.input(b.clone(), false);
            g.conv2d(x, w, Some(b), 2, (1, 1, 1, 1))
        });
        let wt = Tensor::new(&[3, 2, 3, 3], seq(54, 0.23));
        check_unary(&[1, 3, 4, 4], move |g, x| {
            let w = g.input(wt.clone(), false);
            g.conv_transpose2d(x, w, None, 2, 1, 1)
        });
        let gamma = Tensor::new(&[3], vec![1.5, -0.5, 0.7]);
        let beta = Tensor::new(&[3], vec![0.1, 0.2, 0.3]);
        check_unary(&[4, 3, 2, 2], move |g, x| {
            let ga = g.input(gamma.clone(), false);
            let be = g.input(beta.clone(), false);
            g.batch_norm(x, ga, be, None, 1e-5).0
        });
        let lw = Tensor::new(&[5, 6], seq(30, 0.19));
        let lb = Tensor::new(&[5], seq(5, 0.7));
        check_unary(&[3, 6], move |g, x| {
            let w = g.input(lw.clone(), false);
            let b = g.input(lb.clone(), false);
            g.linear(x, w, b)
        });
    }

    #[test]
    fn grads_wrt_weights() {
        // conv weight, batch-norm affine, spectral norm via weight-as-input
        let x = Tensor::new(&[2, 2, 5, 5], seq(100, 0.53));
        check_unary(&[3, 2, 3, 3], move |g, w| {
            let xv = g.input(x.clone(), false);
            g.conv2d(xv, w, None, 1, (1, 1, 1, 1))
        });
        let u = vec![0.6, 0.8];
        let v = vec![0.5, 0.5, 0.5, 0.5];
        check_unary(&[2, 4], move |g, w| g.spectral_norm(w, &u, &v));
        let x = Tensor::new(&[4, 3], seq(12, 0.9));
        check_unary(&[3], move |g, gamma| {
            let xv = g.input(x.clone(), false);
            let beta = g.input(Tensor::new(&[3], vec![0.0; 3]), false);
            g.batch_norm(xv, gamma, beta, None, 1e-5).0
        });
    }

    #[test]
    fn eval_mode_batch_norm_uses_given_stats() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::new(&[2, 1], vec![1.0, 3.0]), true);
        let ga = g.constant(Tensor::new(&[1], vec![2.0]));
        let be = g.constant(Tensor::new(&[1], vec![1.0]));
        let (y, _, _) = g.batch_norm(x, ga, be, Some((&[1.0], &[4.0])), 0.0);
        assert_eq!(g.value(y).data(), &[1.0, 3.0]);
    }
}
