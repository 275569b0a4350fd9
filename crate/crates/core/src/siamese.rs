//! Siamese patch encoder, similarity, pair sampling and contrastive training.

use std::path::Path;

use arepas_nn::layers::{BatchNorm, Conv2d, Fwd, Init, Linear};
use arepas_nn::optim::Adam;
use arepas_nn::{Float, Graph, ParamGrads, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{CoreError, Result};
use crate::image::{Grid, Image2D, Mask};
use crate::rng::seeded;

pub const EMBEDDING_DIM: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum PatchSource {
    Real,
    Rec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub pixels: Grid<f32>,
    pub origin: (usize, usize),
    pub source: PatchSource,
}

impl Patch {
    pub fn extract(img: &Image2D, origin: (usize, usize), s: usize, source: PatchSource) -> Result<Patch> {
        let (h, w) = img.shape();
        if origin.0 + s > h || origin.1 + s > w {
            return Err(CoreError::PatchTooLarge {
                patch: s,
                side: h.min(w),
            });
        }
        Ok(Patch {
            pixels: img.pixels.crop(origin.0 as isize, origin.1 as isize, s, s, 0.0),
            origin,
            source,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchPair {
    pub real: Patch,
    pub rec: Patch,
    /// 1 for identical origins, 0 otherwise.
    pub label: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SiameseSpec {
    pub patch_size: usize,
    pub conv_filters: Vec<usize>,
    pub kernel: usize,
    pub embedding_dim: usize,
}

impl Default for SiameseSpec {
    fn default() -> Self {
        SiameseSpec {
            patch_size: 16,
            conv_filters: vec![32, 64],
            kernel: 4,
            embedding_dim: EMBEDDING_DIM,
        }
    }
}

impl SiameseSpec {
    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim != EMBEDDING_DIM {
            return Err(CoreError::Config(format!("embedding_dim must be {EMBEDDING_DIM}")));
        }
        if self.conv_filters.is_empty() || self.kernel == 0 {
            return Err(CoreError::Config("scorer needs at least one convolution".into()));
        }
        if self.patch_size >> self.conv_filters.len() == 0 {
            return Err(CoreError::Config(format!(
                "patch size {} too small for {} pooling stages",
                self.patch_size,
                self.conv_filters.len()
            )));
        }
        Ok(())
    }

    fn flat_features(&self) -> usize {
        let side = self.patch_size >> self.conv_filters.len();
        self.conv_filters.last().unwrap() * side * side
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScorerTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub positives_per_image: usize,
    pub negatives_per_image: usize,
    /// Minimum foreground fraction of a sampled patch.
    pub min_foreground: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
}

impl Default for ScorerTrainConfig {
    fn default() -> Self {
        ScorerTrainConfig {
            epochs: 50,
            batch_size: 1024,
            positives_per_image: 64,
            negatives_per_image: 64,
            min_foreground: 0.5,
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            seed: 0,
        }
    }
}

impl ScorerTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(CoreError::Config("scorer batch_size and lr must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.min_foreground) {
            return Err(CoreError::Config("min_foreground must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// `a = 2·σ(−d)`: 1 at distance 0, decreasing towards 0.
#[inline]
pub fn similarity_from_distance(d: f64) -> f64 {
    2.0 / (1.0 + d.exp())
}

/// `da/dd`.
#[inline]
pub fn similarity_slope(d: f64) -> f64 {
    let s = 1.0 / (1.0 + d.exp());
    -2.0 * s * (1.0 - s)
}

/// Mean of `(1 − y)·a² + y·max(0, 1 − a)²`.
pub fn contrastive_loss(a: &[f64], y: &[u8]) -> Result<f64> {
    Ok(contrastive_loss_grad(a, y)?.0)
}

/// Loss value and its gradient with respect to each `a_k`.
pub fn contrastive_loss_grad(a: &[f64], y: &[u8]) -> Result<(f64, Vec<f64>)> {
    if a.is_empty() {
        return Err(CoreError::Empty("contrastive batch"));
    }
    if a.len() != y.len() {
        return Err(CoreError::shape(format!("{} scores vs {} labels", a.len(), y.len())));
    }
    let b = a.len() as f64;
    let mut total = 0.0;
    let grad = a
        .iter()
        .zip(y)
        .map(|(&ak, &yk)| {
            if yk == 1 {
                let m = (1.0 - ak).max(0.0);
                total += m * m;
                -2.0 * m / b
            } else {
                total += ak * ak;
                2.0 * ak / b
            }
        })
        .collect();
    Ok((total / b, grad))
}

/// Shared-weight encoder: input batch norm, convolution + tanh + 2x2 average
/// pooling stages, then batch norm and a dense tanh layer.
pub struct SiameseNet {
    pub spec: SiameseSpec,
    input_bn: BatchNorm,
    convs: Vec<Conv2d>,
    head_bn: BatchNorm,
    fc: Linear,
}

impl SiameseNet {
    pub fn build<T: Float>(spec: &SiameseSpec, ps: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let input_bn = BatchNorm::new(ps, "s.input_bn", 1);
        let mut cin = 1;
        let convs = spec
            .conv_filters
            .iter()
            .enumerate()
            .map(|(i, &f)| {
                let c = Conv2d::new(ps, &format!("s.conv{i}"), cin, f, spec.kernel, 1, Conv2d::same(spec.kernel), true, Init::GlorotUniform, rng);
                cin = f;
                c
            })
            .collect();
        let flat = spec.flat_features();
        let head_bn = BatchNorm::new(ps, "s.head_bn", flat);
        let fc = Linear::new(ps, "s.fc", flat, spec.embedding_dim, Init::GlorotUniform, rng);
        Ok(SiameseNet {
            spec: spec.clone(),
            input_bn,
            convs,
            head_bn,
            fc,
        })
    }

    /// `x`: `[N, 1, s, s]` → `[N, embedding_dim]`.
    pub fn forward<T: Float, R: Rng>(&self, f: &mut Fwd<'_, T, R>, x: Var) -> Var {
        let n = f.graph.value(x).shape()[0];
        let mut h = self.input_bn.forward(f, x);
        for c in &self.convs {
            h = c.forward(f, h);
            h = f.graph.tanh(h);
            h = f.graph.avg_pool2(h);
        }
        h = f.graph.reshape(h, &[n, self.spec.flat_features()]);
        h = self.head_bn.forward(f, h);
        h = self.fc.forward(f, h);
        f.graph.tanh(h)
    }
}

fn patch_batch<T: Float>(patches: &[&Grid<f32>], s: usize) -> Tensor<T> {
    let data = patches
        .iter()
        .flat_map(|p| p.data().iter().map(|&v| T::cst(v as f64)))
        .collect();
    Tensor::new(&[patches.len(), 1, s, s], data)
}

/// Per-pair Euclidean distances between the first and second half of an embedding batch.
fn pair_distances<T: Float>(emb: &Tensor<T>, n: usize) -> Vec<f64> {
    let d = emb.shape()[1];
    let e = emb.data();
    (0..n)
        .map(|k| {
            (0..d)
                .map(|j| {
                    let t = e[k * d + j].as_f64() - e[(n + k) * d + j].as_f64();
                    t * t
                })
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

/// Scores real/reconstructed patch pairs.
pub trait PatchScorer {
    fn patch_size(&self) -> usize;
    /// Similarity `a ∈ (0, 1]` for each pair.
    fn score(&self, real: &[&Grid<f32>], rec: &[&Grid<f32>]) -> Result<Vec<f64>>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScorerEpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub val_accuracy: f64,
}

/// Trained Siamese scorer; the parameters are those of the best validation epoch.
pub struct ScorerModel {
    pub spec: SiameseSpec,
    pub config: ScorerTrainConfig,
    pub net: SiameseNet,
    pub params: ParamStore<f32>,
    pub log: Vec<ScorerEpochLog>,
    pub best_epoch: usize,
}

#[derive(Serialize, Deserialize)]
struct ScorerHeader {
    kind: String,
    spec: SiameseSpec,
    config: ScorerTrainConfig,
    log: Vec<ScorerEpochLog>,
    best_epoch: usize,
}

const SCORER_KIND: &str = "scorer";
const EVAL_CHUNK: usize = 2048;

impl ScorerModel {
    fn header(&self) -> ScorerHeader {
        ScorerHeader {
            kind: SCORER_KIND.into(),
            spec: self.spec.clone(),
            config: self.config.clone(),
            log: self.log.clone(),
            best_epoch: self.best_epoch,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        checkpoint::encode(&self.header(), &[self.params.to_bytes()])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::write(path, &self.header(), &[self.params.to_bytes()])
    }

    fn from_parts(h: ScorerHeader, blobs: Vec<Vec<u8>>) -> Result<Self> {
        if h.kind != SCORER_KIND || blobs.len() != 1 {
            return Err(CoreError::Checkpoint(format!("expected a {SCORER_KIND} checkpoint, found {}", h.kind)));
        }
        let mut params = ParamStore::new();
        let net = SiameseNet::build(&h.spec, &mut params, &mut seeded(0))?;
        params.load_from(&ParamStore::from_bytes(&blobs[0])?)?;
        Ok(ScorerModel {
            spec: h.spec,
            config: h.config,
            net,
            params,
            log: h.log,
            best_epoch: h.best_epoch,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (h, b) = checkpoint::decode(bytes)?;
        Self::from_parts(h, b)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, b) = checkpoint::read(path)?;
        Self::from_parts(h, b)
    }

    /// Embeddings `[N, 10]` of a patch batch in evaluation mode.
    pub fn embed_batch(&self, patches: &[&Grid<f32>]) -> Result<Vec<[f32; EMBEDDING_DIM]>> {
        let s = self.spec.patch_size;
        if let Some(p) = patches.iter().find(|p| p.shape() != (s, s)) {
            return Err(CoreError::shape(format!("patch {:?} does not match scorer size {s}", p.shape())));
        }
        let mut out = Vec::with_capacity(patches.len());
        for chunk in patches.chunks(EVAL_CHUNK) {
            let mut g = Graph::<f32>::new();
            let x = g.constant(patch_batch(chunk, s));
            let mut rng = seeded(0);
            let y = {
                let mut f = Fwd::new(&mut g, &self.params, false, &mut rng).frozen();
                self.net.forward(&mut f, x)
            };
            out.extend(g.value(y).data().chunks(EMBEDDING_DIM).map(|c| <[f32; EMBEDDING_DIM]>::try_from(c).unwrap()));
        }
        Ok(out)
    }

    pub fn embed(&self, patch: &Patch) -> Result<[f32; EMBEDDING_DIM]> {
        Ok(self.embed_batch(&[&patch.pixels])?[0])
    }

    pub fn similarity(&self, a: &Patch, b: &Patch) -> Result<f64> {
        Ok(self.score(&[&a.pixels], &[&b.pixels])?[0])
    }
}

fn embedding_distance(a: &[f32; EMBEDDING_DIM], b: &[f32; EMBEDDING_DIM]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

impl PatchScorer for ScorerModel {
    fn patch_size(&self) -> usize {
        self.spec.patch_size
    }

    fn score(&self, real: &[&Grid<f32>], rec: &[&Grid<f32>]) -> Result<Vec<f64>> {
        if real.len() != rec.len() {
            return Err(CoreError::shape("unequal patch batch sizes"));
        }
        let mut all: Vec<&Grid<f32>> = real.to_vec();
        all.extend_from_slice(rec);
        let e = self.embed_batch(&all)?;
        let n = real.len();
        Ok((0..n)
            .map(|k| similarity_from_distance(embedding_distance(&e[k], &e[n + k])))
            .collect())
    }
}

/// Origins whose `s×s` patch has at least `min_fg` foreground fraction.
pub fn valid_origins(mask: &Mask, s: usize, min_fg: f64) -> Vec<(usize, usize)> {
    let (h, w) = mask.shape();
    if s > h || s > w {
        return Vec::new();
    }
    let mut integral = vec![0u32; (h + 1) * (w + 1)];
    for r in 0..h {
        for c in 0..w {
            integral[(r + 1) * (w + 1) + c + 1] = mask.get(r, c) as u32 + integral[r * (w + 1) + c + 1]
                + integral[(r + 1) * (w + 1) + c]
                - integral[r * (w + 1) + c];
        }
    }
    let need = min_fg * (s * s) as f64;
    let mut out = Vec::new();
    for r in 0..=h - s {
        for c in 0..=w - s {
            let sum = integral[(r + s) * (w + 1) + c + s] + integral[r * (w + 1) + c]
                - integral[r * (w + 1) + c + s]
                - integral[(r + s) * (w + 1) + c];
            if sum as f64 >= need {
                out.push((r, c));
            }
        }
    }
    out
}

fn linf(a: (usize, usize), b: (usize, usize)) -> usize {
    a.0.abs_diff(b.0).max(a.1.abs_diff(b.1))
}

/// Positive pairs at identical origins and negative pairs at origins at least
/// `s/2` apart (L∞), all restricted to patches with enough foreground.
pub fn sample_patch_pairs<R: Rng + ?Sized>(
    real: &Image2D,
    rec: &Image2D,
    s: usize,
    cfg: &ScorerTrainConfig,
    rng: &mut R,
) -> Result<Vec<PatchPair>> {
    real.pixels.ensure_same_shape(&rec.pixels, "real vs reconstruction")?;
    let (h, w) = real.shape();
    if s > h || s > w {
        return Err(CoreError::PatchTooLarge { patch: s, side: h.min(w) });
    }
    let origins = valid_origins(&real.region(), s, cfg.min_foreground);
    if origins.is_empty() {
        return Err(CoreError::NoForeground);
    }
    let sep = s.div_ceil(2);
    let mut pairs = Vec::with_capacity(cfg.positives_per_image + cfg.negatives_per_image);
    for _ in 0..cfg.positives_per_image {
        let o = origins[rng.random_range(0..origins.len())];
        pairs.push(PatchPair {
            real: Patch::extract(real, o, s, PatchSource::Real)?,
            rec: Patch::extract(rec, o, s, PatchSource::Rec)?,
            label: 1,
        });
    }
    let mut attempts = 0;
    let mut negatives = 0;
    while negatives < cfg.negatives_per_image && attempts < 100 * cfg.negatives_per_image.max(1) {
        attempts += 1;
        let a = origins[rng.random_range(0..origins.len())];
        let b = origins[rng.random_range(0..origins.len())];
        if linf(a, b) < sep {
            continue;
        }
        pairs.push(PatchPair {
            real: Patch::extract(real, a, s, PatchSource::Real)?,
            rec: Patch::extract(rec, b, s, PatchSource::Rec)?,
            label: 0,
        });
        negatives += 1;
    }
    Ok(pairs)
}

/// Loss and parameter gradients of one batch, with both branches in one forward pass.
pub fn scorer_batch_grad<T: Float, R: Rng>(
    net: &SiameseNet,
    params: &ParamStore<T>,
    pairs: &[&PatchPair],
    rng: &mut R,
) -> Result<(f64, ParamGrads<T>, Vec<(arepas_nn::ParamId, Tensor<T>)>)> {
    let s = net.spec.patch_size;
    let n = pairs.len();
    let mut all: Vec<&Grid<f32>> = pairs.iter().map(|p| &p.real.pixels).collect();
    all.extend(pairs.iter().map(|p| &p.rec.pixels));
    let mut g = Graph::new();
    let x = g.constant(patch_batch::<T>(&all, s));
    let (emb, updates) = {
        let mut f = Fwd::new(&mut g, params, true, rng);
        let e = net.forward(&mut f, x);
        (e, std::mem::take(&mut f.buffer_updates))
    };
    let et = g.value(emb).clone();
    let dists = pair_distances(&et, n);
    let a: Vec<f64> = dists.iter().map(|&d| similarity_from_distance(d)).collect();
    let y: Vec<u8> = pairs.iter().map(|p| p.label).collect();
    let (loss, dl_da) = contrastive_loss_grad(&a, &y)?;
    let dim = et.shape()[1];
    let mut ge = vec![T::zero(); et.len()];
    for k in 0..n {
        let d = dists[k];
        if d == 0.0 {
            continue;
        }
        let coef = dl_da[k] * similarity_slope(d) / d;
        for j in 0..dim {
            let diff = et.data()[k * dim + j].as_f64() - et.data()[(n + k) * dim + j].as_f64();
            ge[k * dim + j] = T::cst(coef * diff);
            ge[(n + k) * dim + j] = T::cst(-coef * diff);
        }
    }
    let root = g.external(&[emb], T::cst(loss), vec![Tensor::new(et.shape(), ge)]);
    let mut grads = ParamGrads::new(params);
    g.backward(root).collect_params(&g, &mut grads);
    Ok((loss, grads, updates))
}

/// Fraction of pairs classified correctly by `a > 0.5 ⟺ y = 1`.
pub fn pair_accuracy(model: &ScorerModel, pairs: &[PatchPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let real: Vec<&Grid<f32>> = pairs.iter().map(|p| &p.real.pixels).collect();
    let rec: Vec<&Grid<f32>> = pairs.iter().map(|p| &p.rec.pixels).collect();
    let a = model.score(&real, &rec)?;
    let correct = a
        .iter()
        .zip(pairs)
        .filter(|(&ak, p)| (ak > 0.5) == (p.label == 1))
        .count();
    Ok(correct as f64 / pairs.len() as f64)
}

/// Contrastive training with Adam; keeps the weights of the best validation epoch
/// (earliest on ties). Without validation pairs the last epoch is kept.
pub fn train_scorer(
    train: &[PatchPair],
    val: &[PatchPair],
    spec: &SiameseSpec,
    cfg: &ScorerTrainConfig,
    mut on_epoch: impl FnMut(&ScorerEpochLog),
) -> Result<ScorerModel> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(CoreError::Empty("scorer training pairs"));
    }
    let s = spec.patch_size;
    if let Some(p) = train.iter().chain(val).find(|p| p.real.pixels.shape() != (s, s) || p.rec.pixels.shape() != (s, s)) {
        return Err(CoreError::shape(format!("pair patch {:?} does not match size {s}", p.real.pixels.shape())));
    }
    let mut rng = seeded(cfg.seed);
    let mut params = ParamStore::<f32>::new();
    let net = SiameseNet::build(spec, &mut params, &mut rng)?;
    let mut model = ScorerModel {
        spec: spec.clone(),
        config: cfg.clone(),
        net,
        params,
        log: Vec::new(),
        best_epoch: 0,
    };
    let mut best: Option<(f64, ParamStore<f32>)> = None;
    let mut adam = Adam::<f32>::new(cfg.lr, cfg.beta1, cfg.beta2);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&PatchPair> = chunk.iter().map(|&i| &train[i]).collect();
            let (loss, grads, updates) = scorer_batch_grad(&model.net, &model.params, &batch, &mut rng)?;
            if !loss.is_finite() || !grads.all_finite() {
                return Err(CoreError::NonFiniteLoss {
                    stage: "scorer",
                    step,
                    batch: format!("epoch {epoch}, pairs {:?}", &chunk[..chunk.len().min(8)]),
                });
            }
            adam.step(&mut model.params, &grads);
            arepas_nn::layers::apply_buffer_updates(&mut model.params, updates);
            total += loss * chunk.len() as f64;
            step += 1;
        }
        let val_accuracy = if val.is_empty() { 0.0 } else { pair_accuracy(&model, val)? };
        let entry = ScorerEpochLog {
            epoch,
            loss: total / train.len() as f64,
            val_accuracy,
        };
        log::info!("scorer epoch {epoch}: loss {:.5} val acc {:.4}", entry.loss, entry.val_accuracy);
        on_epoch(&entry);
        model.log.push(entry);
        if val.is_empty() || best.as_ref().is_none_or(|(b, _)| val_accuracy > *b) {
            best = Some((val_accuracy, model.params.clone()));
            model.best_epoch = epoch;
        }
    }
    if let Some((_, p)) = best {
        model.params = p;
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn similarity_closed_forms() {
        assert_eq!(similarity_from_distance(0.0), 1.0);
        assert!((similarity_from_distance(3f64.ln()) - 0.5).abs() < 1e-15);
        assert!(similarity_from_distance(50.0) < 1e-20);
        let mut prev = 1.0;
        for i in 1..200 {
            let a = similarity_from_distance(i as f64 * 0.05);
            assert!(a < prev);
            prev = a;
        }
    }

    #[test]
    fn contrastive_hand_values() {
        assert_eq!(contrastive_loss(&[1.0], &[1]).unwrap(), 0.0);
        assert!((contrastive_loss(&[0.6], &[0]).unwrap() - 0.36).abs() < 1e-12);
        assert!((contrastive_loss(&[0.2, 0.5], &[1, 0]).unwrap() - 0.445).abs() < 1e-12);
        assert!(contrastive_loss(&[], &[]).is_err());
    }

    #[test]
    fn valid_origins_respect_foreground_fraction() {
        let mut m = Mask::filled(8, 8, false);
        for r in 0..8 {
            for c in 0..4 {
                m.set(r, c, true);
            }
        }
        let o = valid_origins(&m, 4, 0.5);
        assert!(o.iter().all(|&(_, c)| c <= 2));
        assert_eq!(o.len(), 5 * 3);
        assert_eq!(valid_origins(&m, 4, 0.0).len(), 25);
    }
}
