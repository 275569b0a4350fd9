//! Subcommand implementations over a run directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use arepas_core::infer::FinalMap;
use arepas_core::io;
use arepas_core::manifest::{Manifest, ManifestRecord, Split};
use arepas_core::metrics::{bootstrap_mean_ci, AblationMode, EvalResult};
use arepas_core::preprocess::{align_mask, normalize_ct, normalize_mr, resize_image};
use arepas_core::recon::{EpochLog, ReconModel};
use arepas_core::rng::stream;
use arepas_core::siamese::{ScorerEpochLog, ScorerModel};
use arepas_core::synth::gen_dataset;
use arepas_core::{Image2D, Modality};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::pipeline::{evaluate_maps, fit_reconstructor, fit_scorer, score_image, Dataset, Item};
use crate::rundir::RunDir;

pub const RECON_FULL: &str = "recon/full.ckpt";
pub const RECON_NO_AUG: &str = "recon/no_aug.ckpt";
pub const ABLATION_CSV: &str = "eval/ablation.csv";
pub const SWEEP_CSV: &str = "eval/sweep.csv";
pub const RESULTS_HEADER: &str = "mode,patch_size,dice,dice_stderr,precision,recall,auprc,threshold";

pub struct Ctx {
    pub cfg: ExperimentConfig,
    pub run: RunDir,
    pub manifest: Option<PathBuf>,
}

impl Ctx {
    pub fn manifest(&self) -> CliResult<Manifest> {
        let p = self
            .manifest
            .as_ref()
            .ok_or_else(|| CliError::Usage("no manifest: pass --manifest or set paths.manifest".into()))?;
        Ok(Manifest::read(p)?)
    }

    pub fn dataset(&self) -> CliResult<(Manifest, Dataset)> {
        let m = self.manifest()?;
        let ds = Dataset::load(&m, self.cfg.modality, self.cfg.image_size)?;
        Ok((m, ds))
    }
}

pub fn recon_path(augment: bool) -> &'static str {
    if augment {
        RECON_FULL
    } else {
        RECON_NO_AUG
    }
}

pub fn scorer_path(s: usize) -> String {
    format!("scorer/s{s}.ckpt")
}

/// Directory-safe name of a pipeline variant.
pub fn tag(mode: AblationMode, s: usize) -> String {
    match mode {
        AblationMode::Full => format!("full_s{s}"),
        m => m.name().to_ascii_lowercase(),
    }
}

fn maps_index(tag: &str) -> String {
    format!("maps/{tag}/index.csv")
}

fn eval_path(tag: &str) -> String {
    format!("eval/{tag}.json")
}

/// Generates the synthetic dataset under `out` and returns its manifest path.
pub fn synth_generate(cfg: &ExperimentConfig, out: &Path) -> CliResult<PathBuf> {
    if cfg.modality != Modality::Synth {
        return Err(CliError::Config("synth-generate needs modality = \"SYNTH\"".into()));
    }
    let sc = arepas_core::synth::SynthConfig {
        seed: cfg.seed,
        image_size: cfg.image_size,
        ..cfg.synth.clone()
    };
    gen_dataset(&sc, out)?;
    Ok(out.join("manifest.csv"))
}

/// Normalizes and resizes every manifest image into `preprocessed/` with a new manifest.
pub fn preprocess(ctx: &Ctx) -> CliResult<PathBuf> {
    let m = ctx.manifest()?;
    let size = ctx.cfg.image_size;
    let out = ctx.run.claim("preprocessed/manifest.csv")?;
    let mut records = Vec::new();
    for r in &m.records {
        let raw = io::read_f32(&m.resolve(&r.image_path))?;
        let mask = r.mask_path.as_ref().map(|p| io::read_mask(&m.resolve(p))).transpose()?;
        let img = match ctx.cfg.modality {
            Modality::Ct => {
                let lung = mask
                    .as_ref()
                    .ok_or_else(|| CliError::Manifest(format!("{}: CT records need a lung mask", r.image_id)))?;
                normalize_ct(&raw, lung, size)?
            }
            Modality::Mri => resize_image(&normalize_mr(&raw)?, size)?,
            Modality::Synth => resize_image(&Image2D::new(raw, Modality::Synth, mask.clone())?, size)?,
        };
        img.validate()?;
        let id = &r.image_id;
        let image_path = format!("images/{id}.npy");
        ctx.run
            .produce("preprocess", &format!("preprocessed/{image_path}"), |p| Ok(io::write_f32(p, &img.pixels)?))?;
        let mask_path = match &img.mask {
            Some(fg) => {
                let rel = format!("masks/{id}.npy");
                ctx.run
                    .produce("preprocess", &format!("preprocessed/{rel}"), |p| Ok(io::write_mask(p, fg)?))?;
                Some(rel.into())
            }
            None => None,
        };
        let gt_path = match m.load_gt(r)? {
            Some(g) => {
                let g = align_mask(&g, ctx.cfg.modality, mask.as_ref(), size)?;
                let rel = format!("gt/{id}.npy");
                ctx.run
                    .produce("preprocess", &format!("preprocessed/{rel}"), |p| Ok(io::write_mask(p, &g)?))?;
                Some(rel.into())
            }
            None => None,
        };
        records.push(ManifestRecord {
            image_id: id.clone(),
            split: r.split,
            image_path: image_path.into(),
            mask_path,
            gt_path,
        });
    }
    let pm = Manifest::new(out.parent().unwrap_or(Path::new(".")), records)?;
    pm.write(&out)?;
    ctx.run.record("preprocess", "preprocessed/manifest.csv")?;
    Ok(out)
}

fn recon_log_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,g_adversarial,g_l1,g_perceptual,g_total,d_real,d_fake,d_gp,d_total,val_l1_mean,val_l1_std\n");
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for e in log {
        let (g, d) = (&e.generator, &e.discriminator);
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            e.epoch,
            g.adversarial,
            g.l1,
            g.perceptual,
            g.total,
            d.d_real,
            d.d_fake,
            d.gp,
            d.total,
            opt(e.val_l1_mean),
            opt(e.val_l1_std)
        );
    }
    s
}

pub fn train_recon(ctx: &Ctx, augment: bool) -> CliResult<PathBuf> {
    let rel = recon_path(augment);
    let target = ctx.run.claim(rel)?;
    let (_, ds) = ctx.dataset()?;
    let model = fit_reconstructor(&ds, &ctx.cfg, augment, |e| {
        log::info!(
            "recon epoch {}: G {:.4} (L1 {:.4}) D {:.4} val L1 {}",
            e.epoch,
            e.generator.total,
            e.generator.l1,
            e.discriminator.total,
            e.val_l1_mean.map_or("-".into(), |v| format!("{v:.4}"))
        )
    })?;
    model.save(&target)?;
    ctx.run.record("train-recon", rel)?;
    let log_rel = rel.replace(".ckpt", "_log.csv");
    ctx.run.write("train-recon", &log_rel, recon_log_csv(&model.log))?;
    Ok(target)
}

fn load_recon(ctx: &Ctx, augment: bool) -> CliResult<ReconModel> {
    let what = if augment { "reconstructor checkpoint (run train-recon)" } else { "no-augmentation reconstructor checkpoint (run train-recon --no-aug)" };
    let p = ctx.run.require(recon_path(augment), what)?;
    Ok(ReconModel::load(&p)?)
}

fn load_scorer(ctx: &Ctx, s: usize) -> CliResult<ScorerModel> {
    let p = ctx
        .run
        .require(&scorer_path(s), &format!("scorer checkpoint for patch size {s} (run train-scorer --patch-size {s})"))?;
    Ok(ScorerModel::load(&p)?)
}

pub fn train_scorer(ctx: &Ctx, s: usize) -> CliResult<PathBuf> {
    let recon = load_recon(ctx, true)?;
    let rel = scorer_path(s);
    let target = ctx.run.claim(&rel)?;
    let (_, ds) = ctx.dataset()?;
    let model = fit_scorer(&ds, &recon, &ctx.cfg, s, |e: &ScorerEpochLog| {
        log::info!("scorer s={s} epoch {}: loss {:.4} val acc {:.4}", e.epoch, e.loss, e.val_accuracy)
    })?;
    model.save(&target)?;
    ctx.run.record("train-scorer", &rel)?;
    let mut csv = String::from("epoch,loss,val_accuracy,best\n");
    for e in &model.log {
        let _ = writeln!(csv, "{},{},{},{}", e.epoch, e.loss, e.val_accuracy, (e.epoch == model.best_epoch) as u8);
    }
    ctx.run.write("train-scorer", &rel.replace(".ckpt", "_log.csv"), csv)?;
    Ok(target)
}

/// Writes reconstructions, final maps and (FULL only) heat-maps of the val and
/// test splits. With `reuse`, an already complete map set is kept.
pub fn infer(ctx: &Ctx, mode: AblationMode, s: usize, reuse: bool) -> CliResult<()> {
    let t = tag(mode, s);
    let index = maps_index(&t);
    if reuse && ctx.run.exists(&index) {
        return Ok(());
    }
    let recon = load_recon(ctx, mode.uses_augmentation())?;
    let scorer = if mode.uses_scorer() { Some(load_scorer(ctx, s)?) } else { None };
    ctx.run.claim(&index)?;
    let (_, ds) = ctx.dataset()?;
    let mut idx = String::from("image_id,split\n");
    for split in [Split::Val, Split::Test] {
        for it in ds.split(split) {
            let (rec, fm, heat) = score_image(it, &recon, scorer.as_ref(), &ctx.cfg)?;
            let base = format!("maps/{t}/{}", it.id);
            ctx.run
                .produce("infer", &format!("{base}_rec.npy"), |p| Ok(io::write_f32(p, &rec.pixels)?))?;
            ctx.run
                .produce("infer", &format!("{base}_final.npy"), |p| Ok(io::write_f64(p, &fm.pixels)?))?;
            if let Some(a) = heat {
                ctx.run
                    .produce("infer", &format!("{base}_heat.npy"), |p| Ok(io::write_f64(p, &a.pixels)?))?;
            }
            let _ = writeln!(idx, "{},{}", it.id, split_name(split));
        }
    }
    ctx.run.write("infer", &index, idx)?;
    log::info!("inference {t}: maps written");
    Ok(())
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    }
}

fn read_map(ctx: &Ctx, tag: &str, id: &str, kind: &str) -> CliResult<FinalMap> {
    let p = ctx.run.require(&format!("maps/{tag}/{id}_{kind}.npy"), &format!("{kind} map of {id}"))?;
    Ok(FinalMap {
        pixels: io::read_f64(&p)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub mode: AblationMode,
    /// Scorer patch size; absent for scorer-free variants.
    pub patch_size: Option<usize>,
    pub result: EvalResult,
    /// Test ids in the order of `result.per_image_dice`.
    pub test_ids: Vec<String>,
    /// Percentile bootstrap 95% interval of the per-image DICE mean.
    pub dice_ci95: [f64; 2],
}

impl EvalRecord {
    pub fn tag(&self) -> String {
        tag(self.mode, self.patch_size.unwrap_or(0))
    }

    pub fn csv_row(&self) -> String {
        let r = &self.result;
        format!(
            "{},{},{},{},{},{},{},{}",
            self.mode.name(),
            self.patch_size.map_or(String::new(), |s| s.to_string()),
            r.dice,
            r.dice_stderr,
            r.precision,
            r.recall,
            r.auprc,
            r.threshold
        )
    }
}

pub fn results_csv(records: &[EvalRecord]) -> String {
    let mut s = format!("{RESULTS_HEADER}\n");
    for r in records {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Threshold from validation maps, metrics on test maps; writes `eval/<tag>.json`.
pub fn evaluate(ctx: &Ctx, mode: AblationMode, s: usize, reuse: bool) -> CliResult<EvalRecord> {
    let t = tag(mode, s);
    let rel = eval_path(&t);
    if reuse && ctx.run.exists(&rel) {
        return read_eval(ctx, &rel);
    }
    ctx.run.require(&maps_index(&t), &format!("inference maps for {t} (run infer)"))?;
    ctx.run.claim(&rel)?;
    let (_, ds) = ctx.dataset()?;
    let load = |items: &[Item]| -> CliResult<Vec<FinalMap>> { items.iter().map(|it| read_map(ctx, &t, &it.id, "final")).collect() };
    let vm = load(&ds.val)?;
    let tm = load(&ds.test)?;
    let result = evaluate_maps(&ds.val, &vm, &ds.test, &tm, &ctx.cfg)?;
    let mut rng = stream(ctx.cfg.seed, "bootstrap", &t);
    let (lo, hi) = bootstrap_mean_ci(&result.per_image_dice, ctx.cfg.eval.bootstrap_resamples, 0.95, &mut rng);
    let rec = EvalRecord {
        mode,
        patch_size: mode.uses_scorer().then_some(s),
        result,
        test_ids: ds.test.iter().map(|it| it.id.clone()).collect(),
        dice_ci95: [lo, hi],
    };
    let json = serde_json::to_string_pretty(&rec).map_err(|e| CliError::Report(e.to_string()))?;
    ctx.run.write("evaluate", &rel, json)?;
    log::info!("{t}: DICE {:.4} AUPRC {:.4} at threshold {:.4}", rec.result.dice, rec.result.auprc, rec.result.threshold);
    Ok(rec)
}

fn read_eval(ctx: &Ctx, rel: &str) -> CliResult<EvalRecord> {
    serde_json::from_str(&ctx.run.read_to_string(rel)?).map_err(|e| CliError::Report(format!("{rel}: {e}")))
}

/// Every stored evaluation, ordered by mode then patch size.
pub fn all_evals(ctx: &Ctx) -> CliResult<Vec<EvalRecord>> {
    let dir = ctx.run.path("eval");
    let mut out = Vec::new();
    if let Ok(entries) = fs::read_dir(&dir) {
        let mut names: Vec<String> = entries
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n.ends_with(".json"))
            .collect();
        names.sort();
        for n in names {
            out.push(read_eval(ctx, &format!("eval/{n}"))?);
        }
    }
    let order = |m: AblationMode| AblationMode::ALL.iter().position(|&x| x == m);
    out.sort_by_key(|r| (order(r.mode), r.patch_size));
    Ok(out)
}

/// All three variants with the configured patch size; requires every checkpoint.
pub fn ablate(ctx: &Ctx) -> CliResult<Vec<EvalRecord>> {
    let s = ctx.cfg.siamese.patch_size;
    load_recon(ctx, true)?;
    load_recon(ctx, false)?;
    load_scorer(ctx, s)?;
    ctx.run.claim(ABLATION_CSV)?;
    let mut recs = Vec::new();
    for mode in AblationMode::ALL {
        infer(ctx, mode, s, true)?;
        recs.push(evaluate(ctx, mode, s, true)?);
    }
    ctx.run.write("ablate", ABLATION_CSV, results_csv(&recs))?;
    Ok(recs)
}

/// FULL pipeline at every configured patch size, training missing scorers.
pub fn sweep_patch_size(ctx: &Ctx) -> CliResult<Vec<EvalRecord>> {
    load_recon(ctx, true)?;
    ctx.run.claim(SWEEP_CSV)?;
    let mut recs = Vec::new();
    for &s in &ctx.cfg.eval.sweep_patch_sizes {
        if !ctx.run.exists(&scorer_path(s)) {
            train_scorer(ctx, s)?;
        }
        infer(ctx, AblationMode::Full, s, true)?;
        recs.push(evaluate(ctx, AblationMode::Full, s, true)?);
    }
    ctx.run.write("sweep-patch-size", SWEEP_CSV, results_csv(&recs))?;
    let pts: Vec<(f64, f64)> = recs.iter().map(|r| (r.patch_size.unwrap_or(0) as f64, r.result.dice)).collect();
    let svg = crate::report::line_plot_svg("DICE vs patch size", "patch size", "DICE", &[("FULL".into(), pts)])?;
    ctx.run.write("sweep-patch-size", "eval/sweep.svg", svg)?;
    Ok(recs)
}

pub fn test_maps(ctx: &Ctx, rec: &EvalRecord) -> CliResult<BTreeMap<String, FinalMap>> {
    let t = rec.tag();
    rec.test_ids
        .iter()
        .map(|id| Ok((id.clone(), read_map(ctx, &t, id, "final")?)))
        .collect()
}

pub fn heat_map(ctx: &Ctx, rec: &EvalRecord, id: &str) -> Option<FinalMap> {
    read_map(ctx, &rec.tag(), id, "heat").ok()
}
