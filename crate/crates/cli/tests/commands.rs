//! End-to-end runs of the `ids` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ids_core::io::{load_png, save_png};
use ids_core::metrics::EvalReport;
use ids_core::net::{build_network, NetworkConfig, Preset};
use ids_core::tensor::{Shape, Tensor};
use ids_core::trainer::{Checkpoint, NamedTensor, Trainer, TrainConfig, Scheme};

fn ids(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ids")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = ids(args);
    assert!(
        out.status.success(),
        "ids {args:?} failed:\n{}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    v.sort();
    v
}

fn synth(out: &Path, count: usize, size: &str) {
    ok(&["synth", "--out", s(out), "--count", &count.to_string(), "--size", size, "--profile", "indoor", "--seed", "3"]);
}

#[test]
fn synth_splits_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    synth(&a, 10, "32,40");
    synth(&b, 10, "32,40");
    assert_eq!(files(&a.join("train")).len(), 16);
    assert_eq!(files(&a.join("val")).len(), 4);
    let params = fs::read_to_string(a.join("params.tsv")).unwrap();
    assert_eq!(params.lines().count(), 11);
    for line in params.lines().skip(1) {
        let beta: f64 = line.split('\t').nth(1).unwrap().parse().unwrap();
        assert!(beta > 0.6 && beta < 1.8, "{beta}");
    }
    for split in ["train", "val"] {
        for (x, y) in files(&a.join(split)).iter().zip(files(&b.join(split))) {
            assert_eq!(fs::read(x).unwrap(), fs::read(&y).unwrap(), "{}", x.display());
        }
    }
    assert_eq!(fs::read(a.join("params.tsv")).unwrap(), fs::read(b.join("params.tsv")).unwrap());
    assert!(fs::read_to_string(a.join("manifest.tsv")).unwrap().contains("command\tsynth"));
}

#[test]
fn synth_rejects_bad_size() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ids(&["synth", "--out", s(tmp.path()), "--count", "2", "--size", "32x32"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--size"));
}

#[test]
fn eval_reproduces_synthesis_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 10, "32,32");
    let out = tmp.path().join("eval");
    ok(&["eval", "--pred", s(&data.join("val")), "--gt", s(&data.join("val")), "--out", s(&out)]);
    let eval = EvalReport::parse(&fs::read_to_string(out.join("eval.tsv")).unwrap()).unwrap();
    let synth = EvalReport::parse(&fs::read_to_string(data.join("hazy_metrics.tsv")).unwrap()).unwrap();
    assert_eq!(eval.rows.len(), 2);
    for row in &eval.rows {
        let logged = synth.rows.iter().find(|r| r.image == format!("val/{}", row.image)).unwrap();
        assert_eq!(row.psnr_db, logged.psnr_db);
        assert_eq!(row.ssim, logged.ssim);
    }
    let mean = eval.rows.iter().map(|r| r.psnr_db).sum::<f64>() / eval.rows.len() as f64;
    assert!((eval.mean_psnr() - mean).abs() < 1e-12);
}

#[test]
fn eval_of_identical_sets_hits_the_cap() {
    let tmp = tempfile::tempdir().unwrap();
    let gt = tmp.path().join("gt");
    fs::create_dir_all(&gt).unwrap();
    for i in 0..3 {
        let img = Tensor::new(Shape::new(1, 3, 20, 20), (0..1200).map(|k| ((k * (i + 3)) % 256) as f32 / 255.0).collect()).unwrap();
        save_png(&img, &gt.join(format!("img{i}.png"))).unwrap();
    }
    ok(&["eval", "--pred", s(&gt), "--gt", s(&gt)]);
    let text = fs::read_to_string(gt.join("eval.tsv")).unwrap();
    assert!(text.starts_with("image\tpsnr_db\tssim\n"));
    let report = EvalReport::parse(&text).unwrap();
    assert_eq!(report.rows.len(), 3);
    assert!(report.rows.iter().all(|r| r.psnr_db == 100.0 && r.ssim == 1.0));
    assert!(text.trim_end().lines().last().unwrap().starts_with("MEAN\t"));
}

#[test]
fn eval_parallel_matches_serial() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 10, "32,32");
    let run = |threads: &str, out: &Path| {
        let o = Command::new(env!("CARGO_BIN_EXE_ids"))
            .args(["eval", "--pred", s(&data.join("train")), "--gt", s(&data.join("train")), "--out", s(out)])
            .env("IDS_THREADS", threads)
            .output()
            .unwrap();
        assert!(o.status.success());
        fs::read_to_string(out.join("eval.tsv")).unwrap()
    };
    assert_eq!(run("1", &tmp.path().join("e1")), run("3", &tmp.path().join("e3")));
}

#[test]
fn eval_reports_missing_counterpart() {
    let tmp = tempfile::tempdir().unwrap();
    let (pred, gt) = (tmp.path().join("pred"), tmp.path().join("gt"));
    fs::create_dir_all(&pred).unwrap();
    fs::create_dir_all(&gt).unwrap();
    save_png(&Tensor::zeros(Shape::new(1, 3, 16, 16)), &pred.join("lonely.png")).unwrap();
    let out = ids(&["eval", "--pred", s(&pred), "--gt", s(&gt)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("lonely.png"));
}

/// Desk-preset checkpoint with every parameter zero.
fn zero_checkpoint(path: &Path) {
    let model = build_network(&NetworkConfig::preset(Preset::Desk, ids_core::net::HandoffMode::Image), 0).unwrap();
    let ckpt = Checkpoint {
        params: model
            .named_params()
            .into_iter()
            .map(|(name, t)| NamedTensor {
                name,
                shape: t.shape(),
                data: vec![0.0; t.numel()],
            })
            .collect(),
        moments: Vec::new(),
        epoch: 0,
        rng: ids_core::trainer::RngState::capture(&rand_chacha_seeded()),
    };
    ckpt.save(path).unwrap();
}

fn rand_chacha_seeded() -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(0)
}

#[test]
fn zero_checkpoint_returns_input_at_any_size() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = tmp.path().join("zero.ckpt");
    zero_checkpoint(&ckpt);
    let input = tmp.path().join("in.png");
    let img = Tensor::new(Shape::new(1, 3, 50, 50), (0..7500).map(|k| ((k * 37) % 256) as f32 / 255.0).collect()).unwrap();
    save_png(&img, &input).unwrap();
    let out = tmp.path().join("out").join("dehazed.png");
    ok(&["dehaze", "--ckpt", s(&ckpt), "--in", s(&input), "--out", s(&out), "--method", "ids"]);
    let back = load_png(&out).unwrap();
    assert_eq!(back.shape(), Shape::new(1, 3, 50, 50));
    assert_eq!(fs::read(&out).unwrap(), fs::read(&input).unwrap());
}

#[test]
fn dcp_leaves_clear_images_nearly_unchanged() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 5, "48,48");
    let clear: Vec<PathBuf> = files(&data.join("train")).into_iter().filter(|p| s(p).ends_with("_clear.png")).collect();
    let out = tmp.path().join("out");
    fs::create_dir_all(&out).unwrap();
    for c in &clear {
        ok(&["dehaze", "--in", s(c), "--out", s(&out), "--method", "dcp"]);
        let a = load_png(c).unwrap().to_vec();
        let b = load_png(&out.join(c.file_name().unwrap())).unwrap().to_vec();
        let diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs() as f64).sum::<f64>() / a.len() as f64;
        assert!(diff < 0.1, "{}: {diff}", c.display());
    }
}

#[test]
fn dehaze_directory_keeps_names() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 5, "48,48");
    let out = tmp.path().join("dcp");
    ok(&["dehaze", "--in", s(&data.join("val")), "--out", s(&out), "--method", "dcp"]);
    let names = |d: &Path| -> Vec<_> {
        files(d).into_iter().filter(|p| s(p).ends_with(".png")).map(|p| p.file_name().unwrap().to_owned()).collect()
    };
    // Paired ground truth is skipped; only hazy inputs are dehazed.
    let hazy: Vec<_> = names(&data.join("val")).into_iter().filter(|n| n.to_str().unwrap().ends_with("_hazy.png")).collect();
    assert_eq!(names(&out), hazy);
    ok(&["eval", "--pred", s(&out), "--gt", s(&data.join("val"))]);
    let report = EvalReport::parse(&fs::read_to_string(out.join("eval.tsv")).unwrap()).unwrap();
    assert_eq!(report.rows.len(), 1);
    assert!(report.rows[0].image.ends_with("_hazy.png"));
}

#[test]
fn dehaze_ids_requires_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ids(&["dehaze", "--in", s(tmp.path()), "--out", s(tmp.path()), "--method", "ids"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--ckpt"));
}

#[test]
fn gradcheck_passes_and_catches_a_sign_flip() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(&["gradcheck", "--out", s(tmp.path())]);
    let report = String::from_utf8_lossy(&out.stdout).to_string();
    let rows: Vec<&str> = report.lines().skip(1).collect();
    for op in ["conv2d input", "mse_loss", "ssim_loss", "content_loss", "pixel_shuffle", "bilinear_resize"] {
        assert_eq!(rows.iter().filter(|r| r.split('\t').next() == Some(op)).count(), 1, "{op}");
    }
    assert!(rows.iter().all(|r| r.ends_with("\tpass")));

    let bad = ids(&["gradcheck", "--out", s(tmp.path()), "--inject-fault", "conv-sign"]);
    assert!(!bad.status.success());
    let text = String::from_utf8_lossy(&bad.stdout);
    assert!(text.lines().any(|l| l.starts_with("conv2d input\t") && l.ends_with("FAIL")));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("conv2d input"));
}

#[test]
fn train_log_has_one_line_per_epoch() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 10, "32,32");
    let out = tmp.path().join("run");
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, "# tiny run\nepochs = 5\nbatch_size = 2\npatch = 32\n").unwrap();
    ok(&["train", "--data", s(&data), "--scheme", "hard", "--preset", "desk", "--out", s(&out), "--config", s(&cfg), "--epochs", "3"]);
    let log = fs::read_to_string(out.join("train_log.tsv")).unwrap();
    assert_eq!(log.lines().count(), 4);
    assert!(log.starts_with("epoch\tlr\tloss_mse_branch"));
    assert!(out.join("final.ckpt").is_file() && out.join("best.ckpt").is_file());
    let manifest = fs::read_to_string(out.join("manifest.tsv")).unwrap();
    assert!(manifest.contains("config.epochs\t3"), "{manifest}");
    assert!(manifest.contains("config.batch_size\t2"));
    assert!(manifest.contains("seed\t0"));

    ok(&["dehaze", "--ckpt", s(&out.join("final.ckpt")), "--in", s(&data.join("val")), "--out", s(&out.join("pred"))]);
    ok(&["eval", "--pred", s(&out.join("pred")), "--gt", s(&data.join("val"))]);
}

#[test]
fn train_rejects_missing_data() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ids(&["train", "--data", s(&tmp.path().join("nope")), "--out", s(tmp.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("train/"));
}

#[test]
fn config_precedence() {
    use ids_cli::train::{parse_config_file, resolve, TrainArgs};
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.cfg");
    fs::write(&cfg, "preset = shadow\nscheme = hard\nlr0 = 0.001 # comment\nepochs = 7\n\nbatch_size=3\n").unwrap();
    let args = TrainArgs {
        config: Some(cfg.clone()),
        epochs: Some(9),
        ..Default::default()
    };
    let (preset, net, train) = resolve(&args).unwrap();
    assert_eq!(preset, "shadow");
    assert_eq!(net.preset, Some(Preset::Shadow));
    assert_eq!(train.scheme, Scheme::Hard);
    assert_eq!(train.epochs, 9);
    assert_eq!(train.lr0, 0.001);
    assert_eq!(train.batch_size, 3);
    assert_eq!(train.patch, TrainConfig::paper(Scheme::Hard).patch);

    let plain = resolve(&TrainArgs::default()).unwrap();
    assert_eq!(plain.0, "desk");
    assert_eq!(plain.2, TrainConfig::desk(Scheme::Soft));
    assert!(parse_config_file("no equals sign").is_err());
    let _ = Trainer::new(plain.2, plain.1).unwrap();
}
