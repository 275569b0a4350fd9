use arepas_core::canny::{canny_edges, CannyParams};
use arepas_core::manifest::{Manifest, Split};
use arepas_core::rng::seeded;
use arepas_core::synth::{anomalous_by_id, gen_dataset, gen_normal, inject_blobs, normal_by_id, SynthConfig};
use arepas_core::CoreError;
use std::collections::HashSet;
use std::fs;

#[test]
fn normals_are_valid_deterministic_and_have_edges() {
    let cfg = SynthConfig::default();
    for seed in 0..20 {
        let a = gen_normal(&mut seeded(seed), &cfg).unwrap();
        a.validate().unwrap();
        assert_eq!(a.shape(), (64, 64));
        assert!(canny_edges(&a, &CannyParams::default()).unwrap().count() > 0);
        assert_eq!(a, gen_normal(&mut seeded(seed), &cfg).unwrap());
    }
}

#[test]
fn blobs_respect_area_foreground_and_shift() {
    let cfg = SynthConfig::default();
    let total = (cfg.image_size * cfg.image_size) as f64;
    for i in 0..100 {
        let img = normal_by_id(&cfg, &format!("n{i}")).unwrap();
        let fg = img.region();
        let k = 1 + i % 3;
        let (out, masks) = inject_blobs(&img, &mut seeded(i as u64), &cfg, k).unwrap();
        out.validate().unwrap();
        assert_eq!(masks.len(), k);
        for m in &masks {
            let frac = m.count() as f64 / total;
            assert!(frac >= cfg.anomaly_area_frac[0] && frac <= cfg.anomaly_area_frac[1], "blob fraction {frac}");
            assert!(m.data().iter().zip(fg.data()).all(|(&b, &f)| !b || f));
        }
        let union: Vec<usize> = (0..out.pixels.len()).filter(|&p| masks.iter().any(|m| m.data()[p])).collect();
        let before: f64 = union.iter().map(|&p| img.pixels.data()[p] as f64).sum::<f64>() / union.len() as f64;
        let after: f64 = union.iter().map(|&p| out.pixels.data()[p] as f64).sum::<f64>() / union.len() as f64;
        assert!(after - before >= 0.5 * cfg.anomaly_intensity_shift[0], "shift {}", after - before);
        for p in 0..out.pixels.len() {
            if !union.contains(&p) {
                assert_eq!(out.pixels.data()[p], img.pixels.data()[p]);
            }
        }
    }
}

/// Welch two-sample test on per-image means of foreground pixels outside the gt mask.
#[test]
fn background_texture_statistics_match() {
    let cfg = SynthConfig::default();
    let outside_mean = |img: &arepas_core::Image2D, gt: Option<&arepas_core::Mask>| {
        let fg = img.region();
        let v: Vec<f64> = (0..img.pixels.len())
            .filter(|&p| fg.data()[p] && !gt.is_some_and(|g| g.data()[p]))
            .map(|p| img.pixels.data()[p] as f64)
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let normal: Vec<f64> = (0..60).map(|i| outside_mean(&normal_by_id(&cfg, &format!("a{i}")).unwrap(), None)).collect();
    let anomalous: Vec<f64> = (0..60)
        .map(|i| {
            let (img, gt) = anomalous_by_id(&cfg, &format!("b{i}")).unwrap();
            outside_mean(&img, Some(&gt))
        })
        .collect();
    let stats = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64)
    };
    let ((m1, v1), (m2, v2)) = (stats(&normal), stats(&anomalous));
    let z = (m1 - m2) / (v1 / 60.0 + v2 / 60.0).sqrt();
    // |z| below the two-sided 0.001 critical value.
    assert!(z.abs() < 3.2905, "z = {z}");
}

#[test]
fn dataset_layout_counts_and_collisions() {
    let dir = std::env::temp_dir().join(format!("arepas-synth-{}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    let cfg = SynthConfig {
        n_normal: 6,
        n_anomalous: 5,
        seed: 3,
        ..Default::default()
    };
    let m = gen_dataset(&cfg, &dir.join("a")).unwrap();
    assert_eq!(m.split(Split::Train).count(), 6);
    assert_eq!(m.split(Split::Val).count(), 2);
    assert_eq!(m.split(Split::Test).count(), 3);
    assert!(m.split(Split::Train).all(|r| r.gt_path.is_none()));
    let ids: HashSet<_> = m.records.iter().map(|r| r.image_id.clone()).collect();
    assert_eq!(ids.len(), 11);

    let back = Manifest::read(&dir.join("a/manifest.csv")).unwrap();
    assert_eq!(back.records, m.records);
    for r in back.split(Split::Test) {
        let img = back.load_image(r, arepas_core::Modality::Synth).unwrap();
        let gt = back.load_gt(r).unwrap().unwrap();
        assert!(gt.count() > 0);
        assert!(gt.data().iter().zip(img.region().data()).all(|(&g, &f)| !g || f));
    }

    gen_dataset(&cfg, &dir.join("b")).unwrap();
    for r in &m.records {
        let a = fs::read(dir.join("a").join(&r.image_path)).unwrap();
        let b = fs::read(dir.join("b").join(&r.image_path)).unwrap();
        assert!(a == b, "{} differs between runs", r.image_id);
    }
    assert!(matches!(gen_dataset(&cfg, &dir.join("a")), Err(CoreError::Exists(_))));
    fs::remove_dir_all(&dir).unwrap();
}
