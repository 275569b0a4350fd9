//! Report assembly: tables, PR curves, patch-size plot and overlays.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::BufWriter;

use arepas_core::infer::{apply_threshold, FinalMap};
use arepas_core::metrics::{pr_curve, AblationMode, PrPoint};
use arepas_core::{Grid, Image2D, Mask};
use plotters::prelude::*;

use crate::error::{CliError, CliResult};
use crate::pipeline::Item;
use crate::stages::{all_evals, heat_map, results_csv, test_maps, Ctx, EvalRecord};

fn plot_err(e: impl std::fmt::Display) -> CliError {
    CliError::Report(e.to_string())
}

/// Renders named `(x, y)` series as an SVG line chart.
pub fn line_plot_svg(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> CliResult<String> {
    let pts = series.iter().flat_map(|s| s.1.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64, 1.0f64);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1) = (0.0, 1.0);
    }
    if x1 - x0 < 1e-9 {
        (x0, x1) = (x0 - 1.0, x1 + 1.0);
    }
    let mut buf = String::new();
    {
        let root = SVGBackend::with_string(&mut buf, (640, 480)).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(40)
            .y_label_area_size(50)
            .build_cartesian_2d(x0..x1, y0..y1)
            .map_err(plot_err)?;
        chart
            .configure_mesh()
            .x_desc(x_label)
            .y_desc(y_label)
            .draw()
            .map_err(plot_err)?;
        for (i, (name, pts)) in series.iter().enumerate() {
            let color = Palette99::pick(i).to_rgba();
            chart
                .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))
                .map_err(plot_err)?
                .label(name.as_str())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
            chart
                .draw_series(pts.iter().map(|&p| Circle::new(p, 2, color.filled())))
                .map_err(plot_err)?;
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(plot_err)?;
        root.present().map_err(plot_err)?;
    }
    Ok(buf)
}

/// PR curve over pooled pixels with a closing point at threshold 0 (everything
/// predicted: recall 1, precision equal to prevalence).
pub fn pr_with_endpoint(scores: &[f64], labels: &[bool]) -> CliResult<Vec<PrPoint>> {
    let mut curve = pr_curve(scores, labels)?;
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    if min > 0.0 {
        let prevalence = labels.iter().filter(|&&l| l).count() as f64 / labels.len() as f64;
        curve.push(PrPoint {
            threshold: 0.0,
            precision: prevalence,
            recall: 1.0,
        });
    }
    Ok(curve)
}

/// Pooled (score, label) pixels of the test maps, restricted to each image's
/// foreground when `foreground_only` is set.
pub fn pooled_pixels(items: &[&Item], maps: &[&FinalMap], foreground_only: bool) -> CliResult<(Vec<f64>, Vec<bool>)> {
    let (mut s, mut l) = (Vec::new(), Vec::new());
    for (it, m) in items.iter().zip(maps) {
        let gt = it
            .gt
            .as_ref()
            .ok_or_else(|| CliError::Manifest(format!("{} has no ground truth", it.id)))?;
        m.pixels.ensure_same_shape(gt, "score map vs ground truth")?;
        let region = it.image.region();
        for i in 0..gt.len() {
            if !foreground_only || region.data()[i] {
                s.push(m.pixels.data()[i]);
                l.push(gt.data()[i]);
            }
        }
    }
    Ok((s, l))
}

fn gray(img: &Image2D) -> Grid<f32> {
    let (lo, hi) = img.modality.range();
    img.pixels.map(|v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0))
}

fn boundary(m: &Mask) -> Mask {
    Grid::from_fn(m.height(), m.width(), |r, c| {
        let (r, c) = (r as isize, c as isize);
        m.get(r as usize, c as usize)
            && [(-1, 0), (1, 0), (0, -1), (0, 1)]
                .iter()
                .any(|&(dr, dc)| !m.get_clamped(r + dr, c + dc))
    })
}

/// RGB overlay: grayscale image, map as red tint scaled by `scale`, ground-truth
/// outline in green and predicted outline in yellow.
pub fn overlay_rgb(img: &Image2D, map: &Grid<f64>, scale: f64, gt: Option<&Mask>, pred: Option<&Mask>) -> CliResult<Vec<u8>> {
    img.pixels.ensure_same_shape(map, "image vs map")?;
    let g = gray(img);
    let gt_b = gt.map(boundary);
    let pred_b = pred.map(boundary);
    let mut out = Vec::with_capacity(g.len() * 3);
    for i in 0..g.len() {
        let base = g.data()[i] as f64;
        let a = if scale > 0.0 { (map.data()[i] / scale).clamp(0.0, 1.0) } else { 0.0 };
        let mut px = [base * (1.0 - a) + a, base * (1.0 - a), base * (1.0 - a)];
        if pred_b.as_ref().is_some_and(|b| b.data()[i]) {
            px = [1.0, 1.0, 0.0];
        }
        if gt_b.as_ref().is_some_and(|b| b.data()[i]) {
            px = [0.0, 1.0, 0.0];
        }
        out.extend(px.iter().map(|v| (v * 255.0).round() as u8));
    }
    Ok(out)
}

pub fn png_bytes(width: usize, height: usize, rgb: &[u8]) -> CliResult<Vec<u8>> {
    let mut bytes = Vec::new();
    {
        let mut enc = png::Encoder::new(BufWriter::new(&mut bytes), width as u32, height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(plot_err)?;
        w.write_image_data(rgb).map_err(plot_err)?;
    }
    Ok(bytes)
}

fn fmt4(v: f64) -> String {
    format!("{v:.4}")
}

/// The FULL record at the configured patch size, else the first FULL, else the first.
fn primary<'a>(ctx: &Ctx, recs: &'a [EvalRecord]) -> &'a EvalRecord {
    let s = ctx.cfg.siamese.patch_size;
    recs.iter()
        .find(|r| r.mode == AblationMode::Full && r.patch_size == Some(s))
        .or_else(|| recs.iter().find(|r| r.mode == AblationMode::Full))
        .unwrap_or(&recs[0])
}

pub fn report(ctx: &Ctx) -> CliResult<std::path::PathBuf> {
    let recs = all_evals(ctx)?;
    if recs.is_empty() {
        return Err(CliError::Prerequisite("no evaluation results under eval/ (run evaluate, ablate or sweep-patch-size)".into()));
    }
    let (_, ds) = ctx.dataset()?;
    let by_id: BTreeMap<&str, &Item> = ds.test.iter().map(|it| (it.id.as_str(), it)).collect();
    let index_rel = "report/index.md";
    ctx.run.claim(index_rel)?;
    ctx.run.write("report", "report/metrics.csv", results_csv(&recs))?;

    let mut pr_csv = String::from("variant,threshold,precision,recall\n");
    let mut pr_series = Vec::new();
    let mut maps_by_tag = BTreeMap::new();
    for r in &recs {
        let maps = test_maps(ctx, r)?;
        let items: Vec<&Item> = r
            .test_ids
            .iter()
            .map(|id| {
                by_id
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| CliError::Manifest(format!("{id} evaluated but absent from the manifest test split")))
            })
            .collect::<CliResult<_>>()?;
        let ordered: Vec<&FinalMap> = r.test_ids.iter().map(|id| &maps[id]).collect();
        let (s, l) = pooled_pixels(&items, &ordered, ctx.cfg.auprc_foreground_only())?;
        let curve = pr_with_endpoint(&s, &l)?;
        for p in &curve {
            let _ = writeln!(pr_csv, "{},{},{},{}", r.tag(), p.threshold, p.precision, p.recall);
        }
        let mut pts: Vec<(f64, f64)> = vec![(0.0, curve[0].precision)];
        pts.extend(curve.iter().map(|p| (p.recall, p.precision)));
        pr_series.push((r.tag(), pts));
        maps_by_tag.insert(r.tag(), maps);
    }
    ctx.run.write("report", "report/pr_curve.csv", pr_csv)?;
    ctx.run.write(
        "report",
        "report/pr_curve.svg",
        line_plot_svg("Precision-recall (test pixels)", "recall", "precision", &pr_series)?,
    )?;

    let sweep: Vec<(f64, f64)> = recs
        .iter()
        .filter(|r| r.mode == AblationMode::Full)
        .filter_map(|r| r.patch_size.map(|s| (s as f64, r.result.dice)))
        .collect();
    let has_sweep = sweep.len() >= 2;
    if has_sweep {
        ctx.run.write(
            "report",
            "report/patch_size.svg",
            line_plot_svg("DICE vs patch size", "patch size", "DICE", &[("FULL".into(), sweep)])?,
        )?;
    }

    let main = primary(ctx, &recs);
    let main_maps = &maps_by_tag[&main.tag()];
    let n_over = match ctx.cfg.eval.max_overlays {
        0 => main.test_ids.len(),
        n => n.min(main.test_ids.len()),
    };
    let final_scale = main_maps.values().map(FinalMap::max).fold(0.0, f64::max);
    for id in &main.test_ids[..n_over] {
        let it = by_id[id.as_str()];
        let (h, w) = it.image.shape();
        let fm = &main_maps[id];
        let pred = apply_threshold(fm, main.result.threshold);
        let rgb = overlay_rgb(&it.image, &fm.pixels, final_scale, it.gt.as_ref(), Some(&pred))?;
        ctx.run
            .write("report", &format!("report/overlays/{id}_final.png"), png_bytes(w, h, &rgb)?)?;
        if let Some(a) = heat_map(ctx, main, id) {
            let rgb = overlay_rgb(&it.image, &a.pixels, 1.0, it.gt.as_ref(), None)?;
            ctx.run
                .write("report", &format!("report/overlays/{id}_heat.png"), png_bytes(w, h, &rgb)?)?;
        }
    }

    let md = index_markdown(&recs, main, n_over, has_sweep);
    let p = ctx.run.write("report", index_rel, md)?;
    Ok(p)
}

fn index_markdown(recs: &[EvalRecord], main: &EvalRecord, n_over: usize, has_sweep: bool) -> String {
    let mut md = String::from("# Anomaly segmentation report\n\n");
    md.push_str("Threshold chosen on validation maps; metrics on the test split. ");
    md.push_str("DICE is pooled over test pixels. Its uncertainty is given as the standard error of the per-image DICE ");
    md.push_str("and as a percentile bootstrap 95% interval of the per-image mean.\n\n");
    md.push_str("| variant | patch | DICE | per-image stderr | bootstrap 95% CI | precision | recall | AUPRC | threshold |\n");
    md.push_str("|---|---|---|---|---|---|---|---|---|\n");
    for r in recs {
        let res = &r.result;
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} | [{}, {}] | {} | {} | {} | {} |",
            r.mode.name(),
            r.patch_size.map_or("-".into(), |s| s.to_string()),
            fmt4(res.dice),
            fmt4(res.dice_stderr),
            fmt4(r.dice_ci95[0]),
            fmt4(r.dice_ci95[1]),
            fmt4(res.precision),
            fmt4(res.recall),
            fmt4(res.auprc),
            fmt4(res.threshold)
        );
    }
    md.push_str("\nFiles: [metrics.csv](metrics.csv), [pr_curve.csv](pr_curve.csv), ![PR curve](pr_curve.svg)\n");
    if has_sweep {
        md.push_str("\n![DICE vs patch size](patch_size.svg)\n");
    }
    let _ = writeln!(md, "\n## Per-image DICE\n\nOverlays use {}.\n", main.tag());
    md.push_str("| image |");
    for r in recs {
        let _ = write!(md, " {} |", r.tag());
    }
    md.push_str(" overlays |\n|---|");
    for _ in recs {
        md.push_str("---|");
    }
    md.push_str("---|\n");
    let lookup: Vec<BTreeMap<&str, f64>> = recs
        .iter()
        .map(|r| r.test_ids.iter().map(String::as_str).zip(r.result.per_image_dice.iter().copied()).collect())
        .collect();
    let mut ids: Vec<&str> = recs.iter().flat_map(|r| r.test_ids.iter().map(String::as_str)).collect();
    ids.sort_unstable();
    ids.dedup();
    let overlaid: std::collections::BTreeSet<&str> = main.test_ids[..n_over].iter().map(String::as_str).collect();
    for id in ids {
        let _ = write!(md, "| {id} |");
        for l in &lookup {
            let _ = write!(md, " {} |", l.get(id).map_or("-".into(), |v| fmt4(*v)));
        }
        if overlaid.contains(id) {
            let heat = if main.mode.uses_scorer() { format!(" [heat](overlays/{id}_heat.png)") } else { String::new() };
            let _ = writeln!(md, " [final](overlays/{id}_final.png){heat} |");
        } else {
            md.push_str(" - |\n");
        }
    }
    md
}
