//! Pixel-level segmentation metrics and validation threshold selection.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::image::{Grid, Mask};
use crate::infer::{apply_threshold, FinalMap};

/// Number of evenly spaced candidate thresholds in `[0, max score]`.
pub const THRESHOLD_GRID: usize = 256;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn merge(&mut self, o: &Confusion) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }

    /// `2tp / (2tp + fp + fn)`; 1 when both masks are empty.
    pub fn dice(&self) -> f64 {
        let den = 2 * self.tp + self.fp + self.fn_;
        if den == 0 {
            1.0
        } else {
            (2 * self.tp) as f64 / den as f64
        }
    }

    /// `tp / (tp + fp)`; with no predictions it is 1 if nothing was missed, else 0.
    pub fn precision(&self) -> f64 {
        match self.tp + self.fp {
            0 if self.fn_ == 0 => 1.0,
            0 => 0.0,
            d => self.tp as f64 / d as f64,
        }
    }

    /// `tp / (tp + fn)`; 1 when the ground truth is empty.
    pub fn recall(&self) -> f64 {
        match self.tp + self.fn_ {
            0 => 1.0,
            d => self.tp as f64 / d as f64,
        }
    }
}

pub fn confusion_counts(pred: &Mask, gt: &Mask) -> Result<Confusion> {
    pred.ensure_same_shape(gt, "prediction vs ground truth")?;
    let mut c = Confusion::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

pub fn dice(pred: &Mask, gt: &Mask) -> Result<f64> {
    Ok(confusion_counts(pred, gt)?.dice())
}

pub fn precision(pred: &Mask, gt: &Mask) -> Result<f64> {
    Ok(confusion_counts(pred, gt)?.precision())
}

pub fn recall(pred: &Mask, gt: &Mask) -> Result<f64> {
    Ok(confusion_counts(pred, gt)?.recall())
}

/// One point of a precision-recall curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Precision-recall curve over every distinct score, predicting `score >= t`,
/// ordered from the highest threshold down.
pub fn pr_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<PrPoint>> {
    if scores.len() != labels.len() {
        return Err(CoreError::shape(format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Err(CoreError::Empty("ground-truth positives"));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut out = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < idx.len() {
        let t = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == t {
            if labels[idx[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        out.push(PrPoint {
            threshold: t,
            precision: tp as f64 / (tp + fp) as f64,
            recall: tp as f64 / positives as f64,
        });
    }
    Ok(out)
}

/// Step-wise area `Σ (R_k − R_{k−1}) · P_k` under the precision-recall curve.
pub fn auprc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let curve = pr_curve(scores, labels)?;
    let mut prev = 0.0;
    let mut area = 0.0;
    for p in curve {
        area += (p.recall - prev) * p.precision;
        prev = p.recall;
    }
    Ok(area)
}

/// `auprc` of a single map against its mask.
pub fn auprc_map(fm: &FinalMap, gt: &Mask) -> Result<f64> {
    fm.pixels.ensure_same_shape(gt, "score map vs ground truth")?;
    auprc(fm.pixels.data(), gt.data())
}

/// Candidate thresholds `max · i / 255` for `i = 0..256`.
pub fn threshold_grid(max: f64) -> Vec<f64> {
    (0..THRESHOLD_GRID)
        .map(|i| max * i as f64 / (THRESHOLD_GRID - 1) as f64)
        .collect()
}

/// Pooled confusion counts of `map > t` over a set.
pub fn pooled_confusion(maps: &[&FinalMap], gts: &[&Mask], t: f64) -> Result<Confusion> {
    let mut c = Confusion::default();
    for (m, g) in maps.iter().zip(gts) {
        c.merge(&confusion_counts(&apply_threshold(m, t), g)?);
    }
    Ok(c)
}

/// Threshold maximizing pooled DICE over the validation grid; ties go to the lowest.
pub fn select_threshold(maps: &[&FinalMap], gts: &[&Mask]) -> Result<f64> {
    if maps.is_empty() {
        return Err(CoreError::Empty("validation set"));
    }
    if maps.len() != gts.len() {
        return Err(CoreError::shape("validation maps vs masks"));
    }
    let max = maps.iter().map(|m| m.max()).fold(0.0, f64::max);
    let mut best = (f64::NEG_INFINITY, 0.0);
    for t in threshold_grid(max) {
        let d = pooled_confusion(maps, gts, t)?.dice();
        if d > best.0 {
            best = (d, t);
        }
    }
    Ok(best.1)
}

/// Pipeline variant under evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AblationMode {
    Full,
    /// Final map is the absolute residual alone.
    NoPatchScoring,
    /// As above, with a reconstructor trained without edge augmentation.
    NoPatchScoringNoAug,
}

impl AblationMode {
    pub const ALL: [AblationMode; 3] = [AblationMode::Full, AblationMode::NoPatchScoring, AblationMode::NoPatchScoringNoAug];

    pub fn name(self) -> &'static str {
        match self {
            AblationMode::Full => "FULL",
            AblationMode::NoPatchScoring => "NO_PATCH_SCORING",
            AblationMode::NoPatchScoringNoAug => "NO_PATCH_SCORING_NO_AUG",
        }
    }

    pub fn uses_scorer(self) -> bool {
        self == AblationMode::Full
    }

    pub fn uses_augmentation(self) -> bool {
        self != AblationMode::NoPatchScoringNoAug
    }
}

impl std::str::FromStr for AblationMode {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        let up = s.to_ascii_uppercase().replace('-', "_");
        AblationMode::ALL
            .into_iter()
            .find(|m| m.name() == up)
            .ok_or_else(|| CoreError::Config(format!("unknown ablation mode {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub dice: f64,
    pub precision: f64,
    pub recall: f64,
    pub auprc: f64,
    pub threshold: f64,
    pub per_image_dice: Vec<f64>,
    /// Standard error of the per-image DICE mean.
    pub dice_stderr: f64,
}

pub fn mean_and_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let m = v.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    (m, (var / n as f64).sqrt())
}

/// Percentile bootstrap interval of the mean at `level` (e.g. 0.95).
pub fn bootstrap_mean_ci<R: rand::Rng + ?Sized>(v: &[f64], resamples: usize, level: f64, rng: &mut R) -> (f64, f64) {
    if v.is_empty() || resamples == 0 {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len();
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| v[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let q = |p: f64| means[((p * resamples as f64).floor() as usize).min(resamples - 1)];
    let tail = (1.0 - level) / 2.0;
    (q(tail), q(1.0 - tail))
}

/// Pooled metrics at threshold `t` over a test set. AUPRC pools every pixel
/// selected by `regions` (all pixels when `None`).
pub fn evaluate(maps: &[&FinalMap], gts: &[&Mask], regions: Option<&[&Mask]>, t: f64) -> Result<EvalResult> {
    if maps.is_empty() || maps.len() != gts.len() {
        return Err(CoreError::Empty("test set"));
    }
    let mut pooled = Confusion::default();
    let mut per_image = Vec::with_capacity(maps.len());
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (i, (m, g)) in maps.iter().zip(gts).enumerate() {
        let c = confusion_counts(&apply_threshold(m, t), g)?;
        pooled.merge(&c);
        per_image.push(c.dice());
        let region: Option<&Mask> = regions.map(|r| r[i]);
        for (k, (&s, &l)) in m.pixels.data().iter().zip(g.data()).enumerate() {
            if region.is_none_or(|r| r.data()[k]) {
                scores.push(s);
                labels.push(l);
            }
        }
    }
    let (_, dice_stderr) = mean_and_stderr(&per_image);
    Ok(EvalResult {
        dice: pooled.dice(),
        precision: pooled.precision(),
        recall: pooled.recall(),
        auprc: auprc(&scores, &labels)?,
        threshold: t,
        per_image_dice: per_image,
        dice_stderr,
    })
}

/// A `FinalMap` made from raw values; convenience for tests and tools.
pub fn map_from(h: usize, w: usize, v: Vec<f64>) -> Result<FinalMap> {
    Ok(FinalMap {
        pixels: Grid::new(h, w, v)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_dice_cases() {
        let all = Mask::filled(10, 10, true);
        let none = Mask::filled(10, 10, false);
        assert_eq!(confusion_counts(&all, &all).unwrap(), Confusion { tp: 100, fp: 0, fn_: 0, tn: 0 });
        assert_eq!(confusion_counts(&none, &all).unwrap(), Confusion { tp: 0, fp: 0, fn_: 100, tn: 0 });
        assert_eq!(dice(&all, &all).unwrap(), 1.0);
        assert_eq!(dice(&none, &none).unwrap(), 1.0);
        let half = Grid::from_fn(10, 10, |r, _| r < 5);
        assert!((dice(&half, &all).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let other = Grid::from_fn(10, 10, |r, _| r >= 5);
        assert_eq!(dice(&half, &other).unwrap(), 0.0);
    }

    #[test]
    fn auprc_special_cases() {
        let labels = [true, false, true, false, false];
        assert_eq!(auprc(&[0.9, 0.1, 0.8, 0.2, 0.3], &labels).unwrap(), 1.0);
        assert!((auprc(&[0.5; 5], &labels).unwrap() - 0.4).abs() < 1e-15);
        assert!(auprc(&[0.5; 2], &[false, false]).is_err());
    }

    #[test]
    fn threshold_degenerate_and_exact() {
        let zero = map_from(2, 2, vec![0.0; 4]).unwrap();
        let gt = Grid::new(2, 2, vec![true, false, false, false]).unwrap();
        assert_eq!(select_threshold(&[&zero], &[&gt]).unwrap(), 0.0);
        let exact = map_from(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(select_threshold(&[&exact], &[&gt]).unwrap(), 0.0);
    }
}
