//! Adversarial training of the edge-to-image reconstructor, checkpointing, and inference.

use std::path::{Path, PathBuf};

use arepas_nn::layers::Fwd;
use arepas_nn::optim::Adam;
use arepas_nn::{Float, Graph, ParamGrads, ParamStore, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::loss::{
    discriminator_loss, generator_loss, hvp_step, penalty_at, penalty_direction, LossBreakdown,
    LossWeights,
};
use super::nets::{Discriminator, DiscriminatorSpec, Generator, GeneratorSpec};
use super::perceptual::PerceptualExtractor;
use crate::canny::{canny_edges, CannyParams};
use crate::checkpoint;
use crate::error::{CoreError, Result};
use crate::image::{EdgeMap, Grid, Image2D, Modality};
use crate::rng::{seeded, Rng as StdRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReconTrainConfig {
    pub lambda_l1: f64,
    pub lambda_perceptual: f64,
    pub lambda_gp: f64,
    pub real_label: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Pretrained extractor weights; required when `lambda_perceptual > 0`.
    pub perceptual_weights: Option<PathBuf>,
}

impl Default for ReconTrainConfig {
    fn default() -> Self {
        ReconTrainConfig {
            lambda_l1: 100.0,
            lambda_perceptual: 1.0,
            lambda_gp: 1.0,
            real_label: 0.9,
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            batch_size: 1,
            epochs: 10,
            seed: 0,
            perceptual_weights: None,
        }
    }
}

impl ReconTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_l1 < 0.0 || self.lambda_perceptual < 0.0 || self.lambda_gp < 0.0 {
            return Err(CoreError::Config("loss weights must be >= 0".into()));
        }
        if !(self.real_label > 0.0 && self.real_label <= 1.0) {
            return Err(CoreError::Config(format!("real_label {} not in (0, 1]", self.real_label)));
        }
        if self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(CoreError::Config("batch_size and lr must be positive".into()));
        }
        if self.lambda_perceptual > 0.0 && self.perceptual_weights.is_none() {
            return Err(CoreError::Config(
                "lambda_perceptual > 0 needs perceptual_weights; set lambda_perceptual = 0 to disable the term".into(),
            ));
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_l1: self.lambda_l1,
            lambda_perceptual: self.lambda_perceptual,
            lambda_gp: self.lambda_gp,
            real_label: self.real_label,
        }
    }
}

/// One training or validation pair.
#[derive(Clone, Debug)]
pub struct ReconSample {
    pub id: String,
    pub edges: EdgeMap,
    pub target: Image2D,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub generator: LossBreakdown,
    pub discriminator: LossBreakdown,
    /// Mean and standard deviation of per-image mean |real − rec| on held-out pairs.
    pub val_l1_mean: Option<f64>,
    pub val_l1_std: Option<f64>,
}

/// Maps modality intensities onto the generator's `[-1, 1]` range.
pub fn to_net(v: f32, m: Modality) -> f32 {
    let (lo, hi) = m.range();
    2.0 * (v - lo) / (hi - lo) - 1.0
}

pub fn from_net(v: f32, m: Modality) -> f32 {
    let (lo, hi) = m.range();
    ((v + 1.0) * 0.5 * (hi - lo) + lo).clamp(lo, hi)
}

fn edge_batch<T: Float>(items: &[&EdgeMap]) -> Tensor<T> {
    let (h, w) = items[0].shape();
    let data = items.iter().flat_map(|e| e.to_signed()).map(|v| T::cst(v as f64)).collect();
    Tensor::new(&[items.len(), 1, h, w], data)
}

fn target_batch<T: Float>(items: &[&Image2D]) -> Tensor<T> {
    let (h, w) = items[0].shape();
    let data = items
        .iter()
        .flat_map(|im| im.pixels.data().iter().map(|&v| T::cst(to_net(v, im.modality) as f64)))
        .collect();
    Tensor::new(&[items.len(), 1, h, w], data)
}

/// Generator and discriminator with their parameters.
pub struct ReconNets<T> {
    pub generator: Generator,
    pub g_params: ParamStore<T>,
    pub discriminator: Discriminator,
    pub d_params: ParamStore<T>,
}

impl<T: Float> ReconNets<T> {
    pub fn build(g: &GeneratorSpec, d: &DiscriminatorSpec, rng: &mut impl Rng) -> Result<Self> {
        let mut g_params = ParamStore::new();
        let generator = Generator::build(g, &mut g_params, rng)?;
        let mut d_params = ParamStore::new();
        let discriminator = Discriminator::build(d, &mut d_params, rng)?;
        Ok(ReconNets {
            generator,
            g_params,
            discriminator,
            d_params,
        })
    }

    /// Sum of patch logits and its gradient with respect to the image channel.
    pub fn critic_grad(&self, edges: &Tensor<T>, img: &Tensor<T>) -> (T, Tensor<T>) {
        let mut g = Graph::new();
        let e = g.constant(edges.clone());
        let x = g.input(img.clone(), true);
        let cat = g.concat_channels(&[e, x]);
        let mut rng = seeded(0);
        let logits = {
            let mut f = Fwd::new(&mut g, &self.d_params, false, &mut rng).frozen();
            self.discriminator.forward(&mut f, cat)
        };
        let lt = g.value(logits);
        let s = lt.sum();
        let root = g.external(&[logits], s, vec![Tensor::full(lt.shape(), T::one())]);
        let grads = g.backward(root);
        (s, grads.wrt(x).cloned().unwrap_or_else(|| Tensor::zeros(img.shape())))
    }

    /// Parameter gradient of the summed patch logits at `(edges, img)`.
    fn critic_param_grad(&self, edges: &Tensor<T>, img: &Tensor<T>) -> ParamGrads<T> {
        let mut g = Graph::new();
        let e = g.constant(edges.clone());
        let x = g.constant(img.clone());
        let cat = g.concat_channels(&[e, x]);
        let mut rng = seeded(0);
        let logits = {
            let mut f = Fwd::new(&mut g, &self.d_params, true, &mut rng);
            self.discriminator.forward(&mut f, cat)
        };
        let lt = g.value(logits);
        let root = g.external(&[logits], lt.sum(), vec![Tensor::full(lt.shape(), T::one())]);
        let mut out = ParamGrads::new(&self.d_params);
        g.backward(root).collect_params(&g, &mut out);
        out
    }

    /// Discriminator loss and parameter gradients for one batch. The penalty's
    /// parameter gradient `∇_θ (‖∇_x D‖ − 1)²` is obtained from a central
    /// difference of `∇_θ D` along the input gradient direction.
    pub fn discriminator_step(
        &self,
        edges: &Tensor<T>,
        real: &Tensor<T>,
        fake: &Tensor<T>,
        w: &LossWeights,
        rng: &mut impl Rng,
    ) -> (LossBreakdown, ParamGrads<T>) {
        let n = real.shape()[0];
        let mut g = Graph::new();
        let e2 = g.constant(Tensor::cat_batch(&[edges, edges]));
        let x2 = g.constant(Tensor::cat_batch(&[real, fake]));
        let cat = g.concat_channels(&[e2, x2]);
        let mut frng = seeded(0);
        let logits = {
            let mut f = Fwd::new(&mut g, &self.d_params, true, &mut frng);
            self.discriminator.forward(&mut f, cat)
        };
        let lt = g.value(logits).clone();
        let half = lt.len() / 2;
        let (lr, lf) = lt.data().split_at(half);

        let gp = if w.lambda_gp > 0.0 {
            let eps: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let per = real.len() / n;
            let xh = real
                .data()
                .iter()
                .zip(fake.data())
                .enumerate()
                .map(|(i, (&r, &f))| {
                    let e = T::cst(eps[i / per]);
                    e * r + (T::one() - e) * f
                })
                .collect();
            let mut critic = |x: &Tensor<T>| self.critic_grad(edges, x);
            Some(penalty_at(&mut critic, Tensor::new(real.shape(), xh), eps))
        } else {
            None
        };
        let gp_value = gp.as_ref().map_or(0.0, |p| p.value);
        let (breakdown, g_real, g_fake) = discriminator_loss(lr, lf, gp_value, w);
        let mut lg = g_real;
        lg.extend(g_fake);
        let root = g.external(&[logits], T::cst(breakdown.total), vec![Tensor::new(lt.shape(), lg)]);
        let mut grads = ParamGrads::new(&self.d_params);
        g.backward(root).collect_params(&g, &mut grads);

        if let Some((v, s)) = gp.as_ref().and_then(penalty_direction) {
            let h = hvp_step::<T>();
            let p = gp.as_ref().unwrap();
            let shifted = |sign: f64| {
                let d = p
                    .x_hat
                    .data()
                    .iter()
                    .zip(v.data())
                    .map(|(&x, &vi)| x + T::cst(sign * h) * vi)
                    .collect();
                Tensor::new(p.x_hat.shape(), d)
            };
            let plus = self.critic_param_grad(edges, &shifted(1.0));
            let minus = self.critic_param_grad(edges, &shifted(-1.0));
            let k = w.lambda_gp * s / (2.0 * h);
            grads.add_scaled(&plus, T::cst(k));
            grads.add_scaled(&minus, T::cst(-k));
        }
        (breakdown, grads)
    }
}

/// Trained reconstructor.
pub struct ReconModel {
    pub generator_spec: GeneratorSpec,
    pub discriminator_spec: DiscriminatorSpec,
    pub config: ReconTrainConfig,
    pub image_side: usize,
    pub nets: ReconNets<f32>,
    pub log: Vec<EpochLog>,
}

#[derive(Serialize, Deserialize)]
struct ReconHeader {
    kind: String,
    generator_spec: GeneratorSpec,
    discriminator_spec: DiscriminatorSpec,
    config: ReconTrainConfig,
    image_side: usize,
    log: Vec<EpochLog>,
}

const RECON_KIND: &str = "reconstructor";

impl ReconModel {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        checkpoint::encode(&self.header(), &[self.nets.g_params.to_bytes(), self.nets.d_params.to_bytes()])
    }

    fn header(&self) -> ReconHeader {
        ReconHeader {
            kind: RECON_KIND.into(),
            generator_spec: self.generator_spec.clone(),
            discriminator_spec: self.discriminator_spec.clone(),
            config: self.config.clone(),
            image_side: self.image_side,
            log: self.log.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::write(path, &self.header(), &[self.nets.g_params.to_bytes(), self.nets.d_params.to_bytes()])
    }

    fn from_parts(h: ReconHeader, blobs: Vec<Vec<u8>>) -> Result<Self> {
        if h.kind != RECON_KIND || blobs.len() != 2 {
            return Err(CoreError::Checkpoint(format!("expected a {RECON_KIND} checkpoint, found {}", h.kind)));
        }
        let mut nets = ReconNets::build(&h.generator_spec, &h.discriminator_spec, &mut seeded(0))?;
        nets.g_params.load_from(&ParamStore::from_bytes(&blobs[0])?)?;
        nets.d_params.load_from(&ParamStore::from_bytes(&blobs[1])?)?;
        Ok(ReconModel {
            generator_spec: h.generator_spec,
            discriminator_spec: h.discriminator_spec,
            config: h.config,
            image_side: h.image_side,
            nets,
            log: h.log,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (h, blobs) = checkpoint::decode(bytes)?;
        Self::from_parts(h, blobs)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, blobs) = checkpoint::read(path)?;
        Self::from_parts(h, blobs)
    }

    /// Generator output in modality intensities for a given edge map.
    pub fn generate(&self, edges: &EdgeMap, modality: Modality) -> Result<Grid<f32>> {
        let (h, w) = edges.shape();
        if h != self.image_side || w != self.image_side {
            return Err(CoreError::shape(format!(
                "input {h}x{w} does not match the trained size {0}x{0}",
                self.image_side
            )));
        }
        let mut g = Graph::<f32>::new();
        let x = g.constant(edge_batch(&[edges]));
        let mut rng = seeded(0);
        let y = {
            let mut f = Fwd::new(&mut g, &self.nets.g_params, false, &mut rng);
            self.nets.generator.forward(&mut f, x)
        };
        let out = g.value(y).data().iter().map(|&v| from_net(v, modality)).collect();
        Grid::new(h, w, out)
    }

    /// Reconstruction `N(C(img))` from the clean Canny edges of `img`.
    pub fn reconstruct(&self, img: &Image2D, canny: &CannyParams) -> Result<Image2D> {
        let edges = canny_edges(img, canny)?;
        let pixels = self.generate(&edges, img.modality)?;
        Image2D::new(pixels, img.modality, img.mask.clone())
    }

    /// Validation L1 statistics of the final logged epoch.
    pub fn val_l1(&self) -> Option<(f64, f64)> {
        let last = self.log.last()?;
        Some((last.val_l1_mean?, last.val_l1_std?))
    }
}

/// Per-image mean absolute difference between a sample's target and its reconstruction.
pub fn validation_l1(model: &ReconModel, val: &[ReconSample]) -> Result<Vec<f64>> {
    val.iter()
        .map(|s| {
            let rec = model.generate(&s.edges, s.target.modality)?;
            let n = rec.len() as f64;
            Ok(rec
                .data()
                .iter()
                .zip(s.target.pixels.data())
                .map(|(&a, &b)| (a - b).abs() as f64)
                .sum::<f64>()
                / n)
        })
        .collect()
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Alternating discriminator/generator training with Adam.
pub fn train_reconstructor(
    train: &[ReconSample],
    val: &[ReconSample],
    gspec: &GeneratorSpec,
    dspec: &DiscriminatorSpec,
    cfg: &ReconTrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<ReconModel> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(CoreError::Empty("reconstructor training set"));
    }
    let side = train[0].target.side();
    for s in train.iter().chain(val) {
        if s.target.shape() != (side, side) || s.edges.shape() != (side, side) {
            return Err(CoreError::shape(format!("sample {} is not {side}x{side}", s.id)));
        }
    }
    let mut rng: StdRng = seeded(cfg.seed);
    let nets = ReconNets::<f32>::build(gspec, dspec, &mut rng)?;
    nets.generator.check_side(side, side)?;
    if dspec.output_side(side) == 0 {
        return Err(CoreError::shape(format!("{side} too small for the discriminator")));
    }
    let extractor = match (&cfg.perceptual_weights, cfg.lambda_perceptual > 0.0) {
        (Some(p), true) => Some(PerceptualExtractor::<f32>::load(p)?),
        _ => None,
    };
    let mut model = ReconModel {
        generator_spec: gspec.clone(),
        discriminator_spec: dspec.clone(),
        config: cfg.clone(),
        image_side: side,
        nets,
        log: Vec::new(),
    };
    let w = cfg.weights();
    let mut adam_g = Adam::<f32>::new(cfg.lr, cfg.beta1, cfg.beta2);
    let mut adam_d = Adam::<f32>::new(cfg.lr, cfg.beta1, cfg.beta2);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut g_sum = LossBreakdown::default();
        let mut d_sum = LossBreakdown::default();
        let batches = order.chunks(cfg.batch_size).count();
        for batch in order.chunks(cfg.batch_size) {
            let items: Vec<&ReconSample> = batch.iter().map(|&i| &train[i]).collect();
            let edges: Tensor<f32> = edge_batch(&items.iter().map(|s| &s.edges).collect::<Vec<_>>());
            let real: Tensor<f32> = target_batch(&items.iter().map(|s| &s.target).collect::<Vec<_>>());
            let nets = &mut model.nets;

            let mut g = Graph::new();
            let xe = g.constant(edges.clone());
            let fake = {
                let mut f = Fwd::new(&mut g, &nets.g_params, true, &mut rng);
                nets.generator.forward(&mut f, xe)
            };
            let fake_t = g.value(fake).clone();

            nets.discriminator.refresh_spectral(&mut nets.d_params);
            let (d_loss, d_grads) = nets.discriminator_step(&edges, &real, &fake_t, &w, &mut rng);
            let fail = |stage| CoreError::NonFiniteLoss {
                stage,
                step,
                batch: items.iter().map(|s| s.id.as_str()).collect::<Vec<_>>().join(","),
            };
            if !d_loss.is_finite() || !d_grads.all_finite() {
                return Err(fail("discriminator"));
            }
            adam_d.step(&mut nets.d_params, &d_grads);

            let cat = g.concat_channels(&[xe, fake]);
            let logits = {
                let mut f = Fwd::new(&mut g, &nets.d_params, false, &mut rng).frozen();
                nets.discriminator.forward(&mut f, cat)
            };
            let feats = extractor.as_ref().map(|ex| {
                let ff = {
                    let mut f = Fwd::new(&mut g, &nets.g_params, false, &mut rng).frozen();
                    ex.features(&mut f, fake)
                };
                let mut gr = Graph::new();
                let xr = gr.constant(real.clone());
                let fr = {
                    let mut f = Fwd::new(&mut gr, &nets.g_params, false, &mut rng).frozen();
                    ex.features(&mut f, xr)
                };
                (ff, gr.value(fr).clone())
            });
            let (root, g_loss) = generator_loss(&mut g, fake, &real, logits, feats.as_ref().map(|(v, t)| (*v, t)), &w);
            if !g_loss.is_finite() {
                return Err(fail("generator"));
            }
            let mut g_grads = ParamGrads::new(&nets.g_params);
            g.backward(root).collect_params(&g, &mut g_grads);
            if !g_grads.all_finite() {
                return Err(fail("generator"));
            }
            adam_g.step(&mut nets.g_params, &g_grads);

            g_sum.accumulate(&g_loss, 1.0 / batches as f64);
            d_sum.accumulate(&d_loss, 1.0 / batches as f64);
            step += 1;
        }
        let (val_l1_mean, val_l1_std) = if val.is_empty() {
            (None, None)
        } else {
            let (m, s) = mean_std(&validation_l1(&model, val)?);
            (Some(m), Some(s))
        };
        let entry = EpochLog {
            epoch,
            generator: g_sum,
            discriminator: d_sum,
            val_l1_mean,
            val_l1_std,
        };
        log::info!(
            "recon epoch {epoch}: G {:.4} (adv {:.4}, l1 {:.4}) D {:.4} (gp {:.4}) val L1 {:?}",
            g_sum.total,
            g_sum.adversarial,
            g_sum.l1,
            d_sum.total,
            d_sum.gp,
            val_l1_mean
        );
        on_epoch(&entry);
        model.log.push(entry);
    }
    Ok(model)
}
