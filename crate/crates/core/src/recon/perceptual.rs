//! Frozen convolutional feature extractor for the perceptual loss.
//!
//! The layout follows the first three stages of VGG-19 up to `relu3_1`
//! (`conv1_1 conv1_2 pool conv2_1 conv2_2 pool conv3_1`). Weights are read
//! from a parameter-store file whose entries are named `conv{s}_{i}.weight`
//! and `conv{s}_{i}.bias`. Single-channel input in `[-1, 1]` is replicated to
//! three channels and normalized with the usual ImageNet statistics. Pooling
//! is 2x2 averaging in place of max pooling.

use std::path::Path;

use arepas_nn::layers::{Conv2d, Fwd, Init};
use arepas_nn::{Float, ParamStore, Tensor, Var};
use rand::Rng;

use crate::error::{CoreError, Result};

const MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const STD: [f64; 3] = [0.229, 0.224, 0.225];
const LAYERS: [(&str, usize, usize, bool); 5] = [
    ("conv1_1", 3, 64, false),
    ("conv1_2", 64, 64, true),
    ("conv2_1", 64, 128, false),
    ("conv2_2", 128, 128, true),
    ("conv3_1", 128, 256, false),
];

pub struct PerceptualExtractor<T> {
    pub params: ParamStore<T>,
    convs: Vec<(Conv2d, bool)>,
    to_rgb_w: Tensor<T>,
    to_rgb_b: Tensor<T>,
}

impl<T: Float> PerceptualExtractor<T> {
    fn skeleton(rng: &mut impl Rng, width_div: usize) -> (ParamStore<T>, Vec<(Conv2d, bool)>) {
        let mut ps = ParamStore::new();
        let convs = LAYERS
            .iter()
            .map(|&(name, cin, cout, pool)| {
                let cin = if cin == 3 { 3 } else { cin / width_div };
                let c = Conv2d::new(&mut ps, name, cin, cout / width_div, 3, 1, Conv2d::symmetric(1), true, Init::GlorotUniform, rng);
                (c, pool)
            })
            .collect();
        (ps, convs)
    }

    fn with(params: ParamStore<T>, convs: Vec<(Conv2d, bool)>) -> Self {
        let to_rgb_w = Tensor::new(&[3, 1, 1, 1], STD.iter().map(|s| T::cst(0.5 / s)).collect());
        let to_rgb_b = Tensor::new(&[3], MEAN.iter().zip(STD).map(|(m, s)| T::cst((0.5 - m) / s)).collect());
        PerceptualExtractor {
            params,
            convs,
            to_rgb_w,
            to_rgb_b,
        }
    }

    /// Loads pretrained weights; names and shapes must match the fixed layout.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CoreError::io(path, e))?;
        let stored = ParamStore::<T>::from_bytes(&bytes).map_err(|e| CoreError::Decode {
            path: path.into(),
            message: e.to_string(),
        })?;
        let mut rng = crate::rng::seeded(0);
        let (mut ps, convs) = Self::skeleton(&mut rng, 1);
        ps.load_from(&stored).map_err(|e| CoreError::Decode {
            path: path.into(),
            message: e.to_string(),
        })?;
        Ok(Self::with(ps, convs))
    }

    /// Randomly initialized extractor with widths divided by `width_div`; for tests.
    pub fn random(rng: &mut impl Rng, width_div: usize) -> Self {
        let (ps, convs) = Self::skeleton(rng, width_div.max(1));
        Self::with(ps, convs)
    }

    /// Features of `x` (`[N, 1, H, W]`). Parameters enter the graph as constants.
    pub fn features<R: Rng>(&self, f: &mut Fwd<'_, T, R>, x: Var) -> Var {
        let w = f.graph.constant(self.to_rgb_w.clone());
        let b = f.graph.constant(self.to_rgb_b.clone());
        let mut h = f.graph.conv2d(x, w, Some(b), 1, (0, 0, 0, 0));
        for (c, pool) in &self.convs {
            let wv = f.graph.constant(self.params.get(c.weight).clone());
            let bv = c.bias.map(|b| f.graph.constant(self.params.get(b).clone()));
            h = f.graph.conv2d(h, wv, bv, 1, c.pad);
            h = f.graph.relu(h);
            if *pool {
                h = f.graph.avg_pool2(h);
            }
        }
        h
    }
}
