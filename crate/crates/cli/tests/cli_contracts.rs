use std::path::Path;
use std::process::{Command, Output};

use arepas_cli::config::ExperimentConfig;
use arepas_cli::pipeline::{evaluate_maps, Item};
use arepas_cli::report::{png_bytes, pr_with_endpoint};
use arepas_core::infer::FinalMap;
use arepas_core::{Grid, Image2D, Modality};

fn arepas(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_arepas"))
        .current_dir(dir)
        .env_remove("AREPAS_RUN_DIR")
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .unwrap()
}

fn stderr_line(o: &Output) -> String {
    let s = String::from_utf8_lossy(&o.stderr).into_owned();
    let lines: Vec<&str> = s.lines().filter(|l| l.starts_with("error[")).collect();
    assert_eq!(lines.len(), 1, "{s}");
    lines[0].to_string()
}

fn tiny_config(dir: &Path) -> String {
    let mut c = ExperimentConfig::desk();
    c.synth.n_normal = 12;
    c.synth.n_anomalous = 6;
    c.recon.train.epochs = 1;
    c.scorer.epochs = 2;
    c.scorer.positives_per_image = 4;
    c.scorer.negatives_per_image = 4;
    c.eval.sweep_patch_sizes = vec![8, 16];
    c.eval.bootstrap_resamples = 200;
    let p = dir.join("tiny.toml");
    std::fs::write(&p, c.to_toml().unwrap()).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn missing_prerequisite_is_a_one_line_error() {
    let d = tempfile::tempdir().unwrap();
    let o = arepas(d.path(), &["--run-dir", "run", "train-scorer"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr_line(&o).starts_with("error[E_PREREQ]"));

    let o = arepas(d.path(), &["--run-dir", "run", "--device", "accelerator", "report"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr_line(&o).starts_with("error[E_DEVICE]"));

    let o = arepas(d.path(), &["report"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr_line(&o).starts_with("error[E_USAGE]"));
}

#[test]
fn run_dir_env_and_config_conflicts() {
    let d = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_arepas"))
        .current_dir(d.path())
        .env("AREPAS_RUN_DIR", "from_env")
        .args(["report"])
        .output()
        .unwrap();
    assert!(stderr_line(&o).starts_with("error[E_PREREQ]"));
    assert!(d.path().join("from_env/config.toml").exists());

    let o = arepas(d.path(), &["--run-dir", "from_env", "--seed", "7", "report"]);
    assert!(stderr_line(&o).starts_with("error[E_CONFIG]"));

    std::fs::write(d.path().join("bad.toml"), "version = 1\nmodality = \"SYNTH\"\nimage_size = 64\nseed = 0\nwhat = 1\n").unwrap();
    let o = arepas(d.path(), &["--config", "bad.toml", "--run-dir", "x", "report"]);
    assert!(stderr_line(&o).starts_with("error[E_CONFIG]"));
}

#[test]
fn default_config_round_trips() {
    let d = tempfile::tempdir().unwrap();
    let o = arepas(d.path(), &["--seed", "42", "default-config"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    let c = ExperimentConfig::from_toml(&text).unwrap();
    assert_eq!(c.seed, 42);
    assert_eq!(c.to_toml().unwrap(), text);
}

fn item(id: &str, gt: Grid<bool>) -> Item {
    let (h, w) = gt.shape();
    Item {
        id: id.into(),
        image: Image2D::new(Grid::filled(h, w, 0.2), Modality::Synth, None).unwrap(),
        gt: Some(gt),
    }
}

#[test]
fn perfect_prediction_scores_one() {
    let gts: Vec<Grid<bool>> = (0..4)
        .map(|k| Grid::from_fn(16, 16, |r, c| r >= k && r < k + 5 && c >= 3 && c < 9 + k))
        .collect();
    let items: Vec<Item> = gts.iter().enumerate().map(|(i, g)| item(&format!("i{i}"), g.clone())).collect();
    let maps: Vec<FinalMap> = gts
        .iter()
        .map(|g| FinalMap {
            pixels: g.map(|b| if b { 0.8 } else { 0.0 }),
        })
        .collect();
    let cfg = ExperimentConfig::desk();
    let r = evaluate_maps(&items[..2], &maps[..2], &items[2..], &maps[2..], &cfg).unwrap();
    assert_eq!(r.dice, 1.0);
    assert_eq!(r.precision, 1.0);
    assert_eq!(r.recall, 1.0);
    assert!((r.auprc - 1.0).abs() < 1e-12);
    assert!(r.per_image_dice.iter().all(|&d| d == 1.0));
    assert_eq!(r.dice_stderr, 0.0);
}

#[test]
fn pr_curve_closes_at_full_recall() {
    let scores = [0.9, 0.4, 0.4, 0.2, 0.7, 0.1];
    let labels = [true, false, true, false, true, false];
    let c = pr_with_endpoint(&scores, &labels).unwrap();
    let last = c.last().unwrap();
    assert_eq!((last.threshold, last.recall, last.precision), (0.0, 1.0, 0.5));
    let with_zero = [0.9, 0.0, 0.5];
    let c = pr_with_endpoint(&with_zero, &[true, false, false]).unwrap();
    assert_eq!(c.last().unwrap().threshold, 0.0);
    assert_eq!(c.iter().filter(|p| p.threshold == 0.0).count(), 1);
    assert_eq!(c.last().unwrap().precision, 1.0 / 3.0);
}

#[test]
fn png_has_requested_size() {
    let bytes = png_bytes(5, 3, &[7u8; 45]).unwrap();
    let dec = png::Decoder::new(std::io::Cursor::new(bytes));
    let reader = dec.read_info().unwrap();
    assert_eq!((reader.info().width, reader.info().height), (5, 3));
}

fn read_png_size(p: &Path) -> (usize, usize) {
    let dec = png::Decoder::new(std::io::BufReader::new(std::fs::File::open(p).unwrap()));
    let r = dec.read_info().unwrap();
    (r.info().height as usize, r.info().width as usize)
}

#[test]
fn tiny_end_to_end_run_produces_a_complete_report() {
    let d = tempfile::tempdir().unwrap();
    let cfg = tiny_config(d.path());
    let run = |args: &[&str]| {
        let mut full = vec!["--config", cfg.as_str(), "--run-dir", "run"];
        full.extend_from_slice(args);
        let o = arepas(d.path(), &full);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        String::from_utf8(o.stdout).unwrap()
    };
    run(&["synth-generate"]);
    let o = arepas(d.path(), &["--config", cfg.as_str(), "--run-dir", "run", "synth-generate"]);
    assert!(stderr_line(&o).starts_with("error[E_EXISTS]"));
    run(&["preprocess"]);
    run(&["train-recon"]);
    let o = arepas(d.path(), &["--config", cfg.as_str(), "--run-dir", "run", "ablate"]);
    assert!(stderr_line(&o).starts_with("error[E_PREREQ]"));
    run(&["train-recon", "--no-aug"]);
    run(&["train-scorer"]);
    let table = run(&["ablate"]);
    assert_eq!(table.lines().count(), 4);
    let sweep = run(&["sweep-patch-size"]);
    assert_eq!(sweep.lines().count(), 3);
    run(&["report"]);

    let root = d.path().join("run");
    let metrics = std::fs::read_to_string(root.join("report/metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next(), Some("mode,patch_size,dice,dice_stderr,precision,recall,auprc,threshold"));
    assert_eq!(lines.count(), 4);
    let md = std::fs::read_to_string(root.join("report/index.md")).unwrap();
    let m = arepas_core::manifest::Manifest::read(&root.join("preprocessed/manifest.csv")).unwrap();
    for r in m.split(arepas_core::manifest::Split::Test) {
        assert_eq!(md.matches(&format!("| {} |", r.image_id)).count(), 1, "{}", r.image_id);
        let img = m.load_image(r, Modality::Synth).unwrap();
        for kind in ["final", "heat"] {
            let p = root.join(format!("report/overlays/{}_{kind}.png", r.image_id));
            assert_eq!(read_png_size(&p), img.shape());
        }
    }
    for f in ["pr_curve.csv", "pr_curve.svg", "patch_size.svg"] {
        assert!(root.join("report").join(f).exists(), "{f}");
    }
    let pr = std::fs::read_to_string(root.join("report/pr_curve.csv")).unwrap();
    assert!(pr.lines().any(|l| l.starts_with("full_s16,0,") && l.ends_with(",1")));
    let artifacts = std::fs::read_to_string(root.join("artifacts.csv")).unwrap();
    for rel in ["recon/full.ckpt", "scorer/s16.ckpt", "scorer/s8.ckpt", "eval/ablation.csv", "report/index.md"] {
        assert_eq!(artifacts.lines().filter(|l| l.ends_with(&format!(",{rel}"))).count(), 1, "{rel}");
    }
    for line in artifacts.lines() {
        let rel = line.split_once(',').unwrap().1;
        assert!(root.join(rel).exists(), "{rel}");
    }
}
