use arepas_core::image::{Grid, Image2D, Mask, Modality};
use arepas_core::rng::seeded;
use arepas_core::siamese::{
    contrastive_loss, contrastive_loss_grad, sample_patch_pairs, scorer_batch_grad,
    similarity_from_distance, train_scorer, valid_origins, Patch, PatchPair, PatchScorer,
    PatchSource, ScorerModel, ScorerTrainConfig, SiameseNet, SiameseSpec,
};
use arepas_nn::ParamStore;
use proptest::prelude::*;
use rand::Rng;

fn noise_image(rng: &mut impl Rng, side: usize) -> Image2D {
    let raw = Grid::from_fn(side, side, |_, _| rng.random::<f64>());
    let smooth = arepas_core::canny::gaussian_blur(&raw, 1.5);
    let (lo, hi) = smooth
        .data()
        .iter()
        .fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    Image2D::new(smooth.map(|v| (2.0 * (v - lo) / (hi - lo) - 1.0) as f32), Modality::Synth, None).unwrap()
}

#[test]
fn contrastive_gradient_matches_finite_differences() {
    let mut rng = seeded(1);
    for _ in 0..200 {
        let n = rng.random_range(1..20);
        let y: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        // Stay away from the hinge at a = 1.
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..0.98)).collect();
        let (_, g) = contrastive_loss_grad(&a, &y).unwrap();
        for k in 0..n {
            let h = 1e-5;
            let mut p = a.clone();
            p[k] += h;
            let mut m = a.clone();
            m[k] -= h;
            let fd = (contrastive_loss(&p, &y).unwrap() - contrastive_loss(&m, &y).unwrap()) / (2.0 * h);
            let rel = (g[k] - fd).abs() / g[k].abs().max(1e-12);
            assert!(rel < 1e-6, "a={} y={} analytic {} fd {fd}", a[k], y[k], g[k]);
        }
    }
}

proptest! {
    #[test]
    fn contrastive_loss_in_unit_interval(pairs in prop::collection::vec((0.0f64..=1.0, 0u8..2), 1..50)) {
        let (a, y): (Vec<f64>, Vec<u8>) = pairs.into_iter().unzip();
        let l = contrastive_loss(&a, &y).unwrap();
        prop_assert!((0.0..=1.0).contains(&l));
    }

    #[test]
    fn similarity_is_monotone(d1 in 0.0f64..30.0, d2 in 0.0f64..30.0) {
        let (a1, a2) = (similarity_from_distance(d1), similarity_from_distance(d2));
        prop_assert!(a1 > 0.0 && a1 <= 1.0);
        if d1 < d2 { prop_assert!(a1 >= a2); }
    }
}

#[test]
fn batch_gradient_matches_finite_differences_in_f64() {
    let mut rng = seeded(2);
    let spec = SiameseSpec {
        patch_size: 8,
        conv_filters: vec![3, 4],
        ..Default::default()
    };
    let mut ps = ParamStore::<f64>::new();
    let net = SiameseNet::build(&spec, &mut ps, &mut rng).unwrap();
    let img = noise_image(&mut rng, 24);
    let rec = noise_image(&mut rng, 24);
    let cfg = ScorerTrainConfig {
        positives_per_image: 3,
        negatives_per_image: 3,
        ..Default::default()
    };
    let pairs = sample_patch_pairs(&img, &rec, 8, &cfg, &mut rng).unwrap();
    let refs: Vec<&PatchPair> = pairs.iter().collect();
    let (_, grads, _) = scorer_batch_grad(&net, &ps, &refs, &mut seeded(0)).unwrap();
    let h = 1e-6;
    for id in ps.ids().filter(|&i| ps.is_trainable(i)).collect::<Vec<_>>() {
        let k = ps.get(id).len() / 3;
        let orig = ps.get(id).data()[k];
        ps.get_mut(id).data_mut()[k] = orig + h;
        let up = scorer_batch_grad(&net, &ps, &refs, &mut seeded(0)).unwrap().0;
        ps.get_mut(id).data_mut()[k] = orig - h;
        let down = scorer_batch_grad(&net, &ps, &refs, &mut seeded(0)).unwrap().0;
        ps.get_mut(id).data_mut()[k] = orig;
        let fd = (up - down) / (2.0 * h);
        let a = grads.get(id).unwrap().data()[k];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-7);
        assert!(rel < 1e-4, "{}: analytic {a} fd {fd}", ps.name(id));
    }
}

#[test]
fn pair_sampling_contracts() {
    let mut rng = seeded(3);
    let img = noise_image(&mut rng, 32);
    let mut mask = Mask::filled(32, 32, false);
    for r in 4..28 {
        for c in 4..28 {
            mask.set(r, c, true);
        }
    }
    let img = Image2D::new(img.pixels.clone(), Modality::Synth, Some(mask.clone())).unwrap();
    let cfg = ScorerTrainConfig {
        positives_per_image: 50,
        negatives_per_image: 50,
        ..Default::default()
    };
    let s = 8;
    let pairs = sample_patch_pairs(&img, &img, s, &cfg, &mut rng).unwrap();
    assert_eq!(pairs.iter().filter(|p| p.label == 1).count(), 50);
    assert_eq!(pairs.iter().filter(|p| p.label == 0).count(), 50);
    for p in &pairs {
        let (a, b) = (p.real.origin, p.rec.origin);
        if p.label == 1 {
            assert_eq!(a, b);
        } else {
            assert!(a.0.abs_diff(b.0).max(a.1.abs_diff(b.1)) >= s / 2);
        }
        for o in [a, b] {
            let fg = mask.crop(o.0 as isize, o.1 as isize, s, s, false).count();
            assert!(fg * 2 >= s * s);
        }
    }
    let big = ScorerTrainConfig::default();
    assert!(sample_patch_pairs(&img, &img, 40, &big, &mut rng).is_err());
}

#[test]
fn origins_are_uniform_chi_square() {
    let mut rng = seeded(4);
    let img = noise_image(&mut rng, 32);
    let s = 8;
    let cfg = ScorerTrainConfig {
        positives_per_image: 10_000,
        negatives_per_image: 0,
        ..Default::default()
    };
    let pairs = sample_patch_pairs(&img, &img, s, &cfg, &mut rng).unwrap();
    let valid = valid_origins(&img.region(), s, cfg.min_foreground);
    let span = 32 - s + 1;
    let bin = |v: usize| v * 4 / span;
    let mut expected = [0.0f64; 16];
    for &(r, c) in &valid {
        expected[bin(r) * 4 + bin(c)] += 10_000.0 / valid.len() as f64;
    }
    let mut observed = [0.0f64; 16];
    for p in &pairs {
        observed[bin(p.real.origin.0) * 4 + bin(p.real.origin.1)] += 1.0;
    }
    let chi2: f64 = observed.iter().zip(&expected).map(|(o, e)| (o - e).powi(2) / e).sum();
    // Upper 0.001 quantile of chi-square with 15 degrees of freedom.
    assert!(chi2 < 37.697, "chi2 = {chi2}");
}

fn toy_pairs(seed: u64, n_img: usize, cfg: &ScorerTrainConfig, s: usize) -> Vec<PatchPair> {
    let mut rng = seeded(seed);
    (0..n_img)
        .flat_map(|_| {
            let img = noise_image(&mut rng, 32);
            sample_patch_pairs(&img, &img, s, cfg, &mut rng).unwrap()
        })
        .collect()
}

#[test]
fn toy_scorer_learns_and_is_deterministic() {
    let spec = SiameseSpec {
        patch_size: 8,
        ..Default::default()
    };
    let cfg = ScorerTrainConfig {
        epochs: 5,
        batch_size: 64,
        positives_per_image: 16,
        negatives_per_image: 16,
        lr: 1e-3,
        seed: 1,
        ..Default::default()
    };
    let train = toy_pairs(10, 24, &cfg, 8);
    let val = toy_pairs(11, 6, &cfg, 8);
    let m = train_scorer(&train, &val, &spec, &cfg, |_| {}).unwrap();
    let best = &m.log[m.best_epoch];
    assert!(best.val_accuracy > 0.9, "{:?}", m.log);
    assert!(best.loss <= m.log[0].loss);
    let again = train_scorer(&train, &val, &spec, &ScorerTrainConfig { epochs: 1, ..cfg.clone() }, |_| {}).unwrap();
    assert_eq!(again.log[0], m.log[0]);

    let bytes = m.to_bytes().unwrap();
    let back = ScorerModel::from_bytes(&bytes).unwrap();
    assert!(back.to_bytes().unwrap() == bytes);

    let p = &val[0].real;
    let mut q = p.clone();
    q.source = PatchSource::Rec;
    let e = back.embed(p).unwrap();
    assert_eq!(e.len(), 10);
    assert!(e.iter().all(|v| v.abs() < 1.0));
    assert_eq!(e, back.embed(&q).unwrap());
    assert_eq!(back.similarity(p, &q).unwrap(), 1.0);
    let r = &val[1].rec;
    assert_eq!(back.similarity(p, r).unwrap(), back.similarity(r, p).unwrap());
    assert_eq!(back.patch_size(), 8);
    let wrong = Patch {
        pixels: Grid::filled(4, 4, 0.0),
        origin: (0, 0),
        source: PatchSource::Real,
    };
    assert!(back.embed(&wrong).is_err());
}
