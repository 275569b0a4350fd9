//! Edge-to-image generator and patch discriminator.

use arepas_nn::layers::{dropout, Conv2d, ConvTranspose2d, Fwd, Init, SpectralConv2d};
use arepas_nn::{Float, ParamStore, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

const IN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Width of the first convolution; doubles at each downsampling.
    pub ngf: usize,
    pub downsample_layers: usize,
    pub resnet_blocks: usize,
    pub dropout_p: f64,
    pub init_std: f64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            in_channels: 1,
            out_channels: 1,
            ngf: 64,
            downsample_layers: 2,
            resnet_blocks: 9,
            dropout_p: 0.5,
            init_std: 0.02,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.ngf == 0 {
            return Err(CoreError::Config("generator widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(CoreError::Config(format!("dropout_p {} not in [0, 1)", self.dropout_p)));
        }
        Ok(())
    }

    /// Input sides must be divisible by this.
    pub fn side_multiple(&self) -> usize {
        1 << self.downsample_layers
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorSpec {
    /// Edge channel plus image channel.
    pub in_channels: usize,
    pub ndf: usize,
    pub conv_layers: usize,
    pub kernel: usize,
    pub leaky_slope: f64,
    pub init_std: f64,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        DiscriminatorSpec {
            in_channels: 2,
            ndf: 64,
            conv_layers: 5,
            kernel: 4,
            leaky_slope: 0.2,
            init_std: 0.02,
        }
    }
}

impl DiscriminatorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.conv_layers < 3 || self.ndf == 0 || self.kernel < 2 {
            return Err(CoreError::Config(
                "discriminator needs >= 3 layers, ndf > 0 and kernel >= 2".into(),
            ));
        }
        Ok(())
    }

    /// `(in, out, stride)` of every layer: widths ndf·2^i capped at 8·ndf,
    /// stride 2 except the last two layers, one output channel.
    pub fn layout(&self) -> Vec<(usize, usize, usize)> {
        let n = self.conv_layers;
        let mut cin = self.in_channels;
        (0..n)
            .map(|i| {
                let cout = if i == n - 1 { 1 } else { self.ndf << i.min(3) };
                let stride = if i + 2 < n { 2 } else { 1 };
                let l = (cin, cout, stride);
                cin = cout;
                l
            })
            .collect()
    }

    /// Logit grid side for a square input of side `side` (every layer pads by 1).
    pub fn output_side(&self, side: usize) -> usize {
        self.layout()
            .iter()
            .fold(side, |s, &(_, _, st)| (s + 2 - self.kernel) / st + 1)
    }
}

struct ResBlock {
    c1: Conv2d,
    c2: Conv2d,
}

/// ResNet encoder-decoder with reflection-padded 7x7 ends and a tanh output.
pub struct Generator {
    pub spec: GeneratorSpec,
    head: Conv2d,
    down: Vec<Conv2d>,
    blocks: Vec<ResBlock>,
    up: Vec<ConvTranspose2d>,
    tail: Conv2d,
}

impl Generator {
    pub fn build<T: Float>(spec: &GeneratorSpec, ps: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let init = Init::Normal(spec.init_std);
        let nopad = Conv2d::symmetric(0);
        let head = Conv2d::new(ps, "g.head", spec.in_channels, spec.ngf, 7, 1, nopad, true, init, rng);
        let mut ch = spec.ngf;
        let mut down = Vec::new();
        for i in 0..spec.downsample_layers {
            down.push(Conv2d::new(ps, &format!("g.down{i}"), ch, ch * 2, 3, 2, Conv2d::symmetric(1), true, init, rng));
            ch *= 2;
        }
        let blocks = (0..spec.resnet_blocks)
            .map(|i| ResBlock {
                c1: Conv2d::new(ps, &format!("g.res{i}.c1"), ch, ch, 3, 1, nopad, true, init, rng),
                c2: Conv2d::new(ps, &format!("g.res{i}.c2"), ch, ch, 3, 1, nopad, true, init, rng),
            })
            .collect();
        let mut up = Vec::new();
        for i in 0..spec.downsample_layers {
            up.push(ConvTranspose2d::new(ps, &format!("g.up{i}"), ch, ch / 2, 3, 2, 1, 1, init, rng));
            ch /= 2;
        }
        let tail = Conv2d::new(ps, "g.tail", ch, spec.out_channels, 7, 1, nopad, true, init, rng);
        Ok(Generator {
            spec: spec.clone(),
            head,
            down,
            blocks,
            up,
            tail,
        })
    }

    pub fn check_side(&self, h: usize, w: usize) -> Result<()> {
        let m = self.spec.side_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(CoreError::NotDivisibleBy4(if h % m != 0 { h } else { w }));
        }
        if h <= 3 || w <= 3 {
            return Err(CoreError::shape(format!("{h}x{w} too small for the generator")));
        }
        Ok(())
    }

    /// `x`: `[N, in, H, W]` signed edge maps; returns `[N, out, H, W]` in `(-1, 1)`.
    pub fn forward<T: Float, R: Rng>(&self, f: &mut Fwd<'_, T, R>, x: Var) -> Var {
        let eps = T::cst(IN_EPS);
        let mut h = f.graph.reflect_pad(x, 3);
        h = self.head.forward(f, h);
        h = f.graph.instance_norm(h, eps);
        h = f.graph.relu(h);
        for d in &self.down {
            h = d.forward(f, h);
            h = f.graph.instance_norm(h, eps);
            h = f.graph.relu(h);
        }
        for b in &self.blocks {
            let mut r = f.graph.reflect_pad(h, 1);
            r = b.c1.forward(f, r);
            r = f.graph.instance_norm(r, eps);
            r = f.graph.relu(r);
            r = dropout(f, r, self.spec.dropout_p);
            r = f.graph.reflect_pad(r, 1);
            r = b.c2.forward(f, r);
            r = f.graph.instance_norm(r, eps);
            h = f.graph.add(h, r);
        }
        for u in &self.up {
            h = u.forward(f, h);
            h = f.graph.instance_norm(h, eps);
            h = f.graph.relu(h);
        }
        h = f.graph.reflect_pad(h, 3);
        h = self.tail.forward(f, h);
        f.graph.tanh(h)
    }
}

/// Spectrally normalized convolutional patch discriminator.
pub struct Discriminator {
    pub spec: DiscriminatorSpec,
    pub layers: Vec<SpectralConv2d>,
}

impl Discriminator {
    pub fn build<T: Float>(spec: &DiscriminatorSpec, ps: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .layout()
            .into_iter()
            .enumerate()
            .map(|(i, (cin, cout, stride))| {
                SpectralConv2d::new(ps, &format!("d.conv{i}"), cin, cout, spec.kernel, stride, 1, Init::Normal(spec.init_std), rng)
            })
            .collect();
        Ok(Discriminator {
            spec: spec.clone(),
            layers,
        })
    }

    /// One power-iteration step on every layer.
    pub fn refresh_spectral<T: Float>(&self, ps: &mut ParamStore<T>) {
        for l in &self.layers {
            l.power_iteration(ps);
        }
    }

    /// `x`: `[N, 2, H, W]` (edge, image); returns the patch logit grid `[N, 1, h, w]`.
    pub fn forward<T: Float, R: Rng>(&self, f: &mut Fwd<'_, T, R>, x: Var) -> Var {
        let slope = T::cst(self.spec.leaky_slope);
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(f, h);
            if i < last {
                h = f.graph.leaky_relu(h, slope);
            }
        }
        h
    }
}
