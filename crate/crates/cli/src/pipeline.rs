//! In-memory pipeline stages shared by the subcommands.

use arepas_core::augment::build_training_pairs;
use arepas_core::canny::canny_edges;
use arepas_core::infer::{final_map, heatmap, residual_map, AnomalyMap, FinalMap};
use arepas_core::manifest::{Manifest, ManifestRecord, Split};
use arepas_core::metrics::{evaluate, select_threshold, AblationMode, EvalResult};
use arepas_core::recon::{train_reconstructor, EpochLog, ReconModel, ReconSample};
use arepas_core::rng::stream;
use arepas_core::siamese::{sample_patch_pairs, train_scorer, PatchPair, ScorerEpochLog, ScorerModel, SiameseSpec};
use arepas_core::{Image2D, Mask, Modality};
use rand::Rng;

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

#[derive(Clone, Debug)]
pub struct Item {
    pub id: String,
    pub image: Image2D,
    pub gt: Option<Mask>,
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub train: Vec<Item>,
    pub val: Vec<Item>,
    pub test: Vec<Item>,
}

impl Dataset {
    pub fn load(manifest: &Manifest, modality: Modality, size: usize) -> CliResult<Self> {
        let mut ds = Dataset::default();
        for r in &manifest.records {
            let item = load_item(manifest, r, modality)?;
            if item.image.shape() != (size, size) {
                return Err(CliError::Manifest(format!(
                    "{} is {:?}, expected {size}x{size} (run preprocess first)",
                    r.image_id,
                    item.image.shape()
                )));
            }
            match r.split {
                Split::Train => ds.train.push(item),
                Split::Val => ds.val.push(item),
                Split::Test => ds.test.push(item),
            }
        }
        if ds.train.is_empty() {
            return Err(CliError::Manifest("manifest has no train records".into()));
        }
        Ok(ds)
    }

    pub fn split(&self, s: Split) -> &[Item] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

fn load_item(m: &Manifest, r: &ManifestRecord, modality: Modality) -> CliResult<Item> {
    Ok(Item {
        id: r.image_id.clone(),
        image: m.load_image(r, modality)?,
        gt: m.load_gt(r)?,
    })
}

/// Splits train items into (fit, holdout) by a seeded per-id key, independent of order.
pub fn holdout_split<'a>(items: &'a [Item], fraction: f64, seed: u64) -> (Vec<&'a Item>, Vec<&'a Item>) {
    let mut keyed: Vec<(u64, &Item)> = items
        .iter()
        .map(|it| (stream(seed, "holdout", &it.id).random::<u64>(), it))
        .collect();
    keyed.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.id.cmp(&b.1.id)));
    let n_hold = ((items.len() as f64 * fraction).round() as usize).min(items.len().saturating_sub(1));
    let hold: Vec<&Item> = keyed[..n_hold].iter().map(|k| k.1).collect();
    let mut fit: Vec<&Item> = keyed[n_hold..].iter().map(|k| k.1).collect();
    fit.sort_by(|a, b| a.id.cmp(&b.id));
    let mut hold = hold;
    hold.sort_by(|a, b| a.id.cmp(&b.id));
    (fit, hold)
}

/// Clean edge map of every item, plus augmented variants when `augment` is set.
pub fn recon_samples(items: &[&Item], cfg: &ExperimentConfig, augment: bool) -> CliResult<Vec<ReconSample>> {
    let mut out = Vec::new();
    for it in items {
        if augment {
            let mut rng = stream(cfg.seed, "augment", &it.id);
            let spec = arepas_core::augment::AugmentSpec {
                seed: cfg.seed,
                ..cfg.augment.clone()
            };
            for (k, (edges, target)) in build_training_pairs(&it.image, &spec, &cfg.canny, &mut rng)?
                .into_iter()
                .enumerate()
            {
                out.push(ReconSample {
                    id: format!("{}#{k}", it.id),
                    edges,
                    target,
                });
            }
        } else {
            out.push(ReconSample {
                id: it.id.clone(),
                edges: canny_edges(&it.image, &cfg.canny)?,
                target: it.image.clone(),
            });
        }
    }
    Ok(out)
}

pub fn fit_reconstructor(
    ds: &Dataset,
    cfg: &ExperimentConfig,
    augment: bool,
    on_epoch: impl FnMut(&EpochLog),
) -> CliResult<ReconModel> {
    let (fit, hold) = holdout_split(&ds.train, cfg.recon.holdout_fraction, cfg.seed);
    let train = recon_samples(&fit, cfg, augment)?;
    let val = recon_samples(&hold, cfg, false)?;
    log::info!("reconstructor: {} training pairs from {} images, {} held out", train.len(), fit.len(), val.len());
    let tc = arepas_core::recon::ReconTrainConfig {
        seed: cfg.seed,
        ..cfg.recon.train.clone()
    };
    Ok(train_reconstructor(&train, &val, &cfg.recon.generator, &cfg.recon.discriminator, &tc, on_epoch)?)
}

pub fn reconstruct_all(model: &ReconModel, items: &[&Item], cfg: &ExperimentConfig) -> CliResult<Vec<Image2D>> {
    items
        .iter()
        .map(|it| Ok(model.reconstruct(&it.image, &cfg.canny)?))
        .collect()
}

fn pairs_for(items: &[&Item], recs: &[Image2D], s: usize, cfg: &ExperimentConfig) -> CliResult<Vec<PatchPair>> {
    let mut out = Vec::new();
    for (it, rec) in items.iter().zip(recs) {
        let mut rng = stream(cfg.seed, &format!("pairs-s{s}"), &it.id);
        out.extend(sample_patch_pairs(&it.image, rec, s, &cfg.scorer, &mut rng)?);
    }
    Ok(out)
}

/// Trains the patch scorer on (real, reconstruction) pairs of the normal train split.
pub fn fit_scorer(
    ds: &Dataset,
    recon: &ReconModel,
    cfg: &ExperimentConfig,
    patch_size: usize,
    on_epoch: impl FnMut(&ScorerEpochLog),
) -> CliResult<ScorerModel> {
    let (fit, hold) = holdout_split(&ds.train, cfg.recon.holdout_fraction, cfg.seed);
    let fit_rec = reconstruct_all(recon, &fit, cfg)?;
    let hold_rec = reconstruct_all(recon, &hold, cfg)?;
    let train = pairs_for(&fit, &fit_rec, patch_size, cfg)?;
    let val = pairs_for(&hold, &hold_rec, patch_size, cfg)?;
    log::info!("scorer s={patch_size}: {} training pairs, {} validation pairs", train.len(), val.len());
    let spec = SiameseSpec {
        patch_size,
        ..cfg.siamese.clone()
    };
    let sc = arepas_core::siamese::ScorerTrainConfig {
        seed: cfg.seed,
        ..cfg.scorer.clone()
    };
    Ok(train_scorer(&train, &val, &spec, &sc, on_epoch)?)
}

/// Final map (and heat-map when a scorer is given) of one image.
pub fn score_image(
    item: &Item,
    recon: &ReconModel,
    scorer: Option<&ScorerModel>,
    cfg: &ExperimentConfig,
) -> CliResult<(Image2D, FinalMap, Option<AnomalyMap>)> {
    let rec = recon.reconstruct(&item.image, &cfg.canny)?;
    Ok(match scorer {
        Some(s) => {
            let a = heatmap(&item.image, &rec, s, cfg.inference.stride)?;
            let f = final_map(&item.image, &rec, &a)?;
            (rec, f, Some(a))
        }
        None => {
            let f = residual_map(&item.image, &rec)?;
            (rec, f, None)
        }
    })
}

pub fn final_maps(items: &[Item], recon: &ReconModel, scorer: Option<&ScorerModel>, cfg: &ExperimentConfig) -> CliResult<Vec<FinalMap>> {
    items
        .iter()
        .map(|it| score_image(it, recon, scorer, cfg).map(|t| t.1))
        .collect()
}

fn gts(items: &[Item]) -> CliResult<Vec<&Mask>> {
    items
        .iter()
        .map(|it| {
            it.gt
                .as_ref()
                .ok_or_else(|| CliError::Manifest(format!("{} has no ground truth", it.id)))
        })
        .collect()
}

/// Threshold on validation maps, metrics on test maps.
pub fn evaluate_maps(
    val: &[Item],
    val_maps: &[FinalMap],
    test: &[Item],
    test_maps: &[FinalMap],
    cfg: &ExperimentConfig,
) -> CliResult<EvalResult> {
    if val.is_empty() || test.is_empty() {
        return Err(CliError::Manifest("evaluation needs nonempty val and test splits".into()));
    }
    let t = select_threshold(&val_maps.iter().collect::<Vec<_>>(), &gts(val)?)?;
    let regions: Vec<Mask> = test.iter().map(|it| it.image.region()).collect();
    let region_refs: Vec<&Mask> = regions.iter().collect();
    let r = evaluate(
        &test_maps.iter().collect::<Vec<_>>(),
        &gts(test)?,
        cfg.auprc_foreground_only().then_some(&region_refs[..]),
        t,
    )?;
    Ok(r)
}

/// Scores val and test with the given models and evaluates.
pub fn run_mode(
    ds: &Dataset,
    mode: AblationMode,
    recon: &ReconModel,
    scorer: Option<&ScorerModel>,
    cfg: &ExperimentConfig,
) -> CliResult<EvalResult> {
    let scorer = if mode.uses_scorer() {
        Some(scorer.ok_or_else(|| CliError::Prerequisite("FULL mode needs a scorer checkpoint".into()))?)
    } else {
        None
    };
    let vm = final_maps(&ds.val, recon, scorer, cfg)?;
    let tm = final_maps(&ds.test, recon, scorer, cfg)?;
    evaluate_maps(&ds.val, &vm, &ds.test, &tm, cfg)
}
