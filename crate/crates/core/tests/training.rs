//! Trainer behaviour on a tiny synthetic set: checkpoints, resume, the
//! non-finite guard and short stable runs.

use ids_core::hazegen::{synthesize_pair, HazeProfile};
use ids_core::net::{Group, HandoffMode, NetworkConfig, Preset};
use ids_core::trainer::{Checkpoint, PairSet, Scheme, TrainConfig, TrainError, Trainer};

fn pairs(count: u64, base: u64) -> PairSet {
    let mut set = PairSet::default();
    for i in 0..count {
        let p = synthesize_pair(base + i, 32, 32, HazeProfile::Indoor).unwrap();
        set.push(format!("{i}"), p.hazy, p.clear);
    }
    set
}

fn config(scheme: Scheme, epochs: usize) -> TrainConfig {
    let mut cfg = TrainConfig::desk(scheme);
    cfg.epochs = epochs;
    cfg.batch_size = 2;
    cfg.patch = 32;
    cfg.seed = 11;
    cfg
}

fn trainer(scheme: Scheme, epochs: usize) -> Trainer {
    Trainer::new(config(scheme, epochs), NetworkConfig::preset(Preset::Desk, HandoffMode::Image)).unwrap()
}

#[test]
fn checkpoint_survives_disk_round_trip() {
    let mut t = trainer(Scheme::Hard, 1);
    t.fit(&pairs(4, 0), &PairSet::default(), None, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    let first = t.checkpoint();
    first.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.to_bytes(), first.to_bytes());
    let again = Trainer::resume(config(Scheme::Hard, 1), &loaded).unwrap().checkpoint();
    assert_eq!(again.to_bytes(), first.to_bytes());
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    for scheme in [Scheme::Hard, Scheme::Soft] {
        let train = pairs(4, 100);
        let mut whole = trainer(scheme, 3);
        whole.fit(&train, &PairSet::default(), None, |_| {}).unwrap();

        let mut first = trainer(scheme, 1);
        first.fit(&train, &PairSet::default(), None, |_| {}).unwrap();
        let saved = Checkpoint::from_bytes(&first.checkpoint().to_bytes()).unwrap();
        let mut rest = Trainer::resume(config(scheme, 3), &saved).unwrap();
        rest.fit(&train, &PairSet::default(), None, |_| {}).unwrap();

        assert_eq!(rest.epoch, 3);
        assert_eq!(rest.checkpoint().to_bytes(), whole.checkpoint().to_bytes(), "{scheme}");
    }
}

#[test]
fn resume_rejects_the_wrong_handoff() {
    let ckpt = trainer(Scheme::Hard, 1).checkpoint();
    assert!(matches!(Trainer::resume(config(Scheme::Soft, 1), &ckpt), Err(TrainError::Config(_))));
}

#[test]
fn non_finite_weights_name_the_module() {
    let train = pairs(2, 200);
    let mut t = trainer(Scheme::Hard, 1);
    let (_, w) = t.model.group_params(Group::BranchSsim).remove(0);
    w.update_data(|d| d[0] = f32::NAN).unwrap();
    match t.train_epoch(&train) {
        Err(TrainError::NonFinite { module, step, .. }) => {
            assert_eq!(module, Group::BranchSsim);
            assert_eq!(step, 1);
        }
        other => panic!("expected a non-finite error, got {other:?}"),
    }
}

#[test]
fn short_runs_stay_finite() {
    let train = pairs(8, 300);
    for scheme in [Scheme::Hard, Scheme::Soft] {
        let mut t = trainer(scheme, 25);
        t.fit(&train, &PairSet::default(), None, |_| {}).unwrap();
        assert_eq!(t.history.len(), 100);
        for l in &t.history {
            for v in [l.mse_branch, l.ssim_branch, l.content, l.gen, l.disc] {
                assert!(v.is_finite(), "{scheme}: {l:?}");
            }
        }
        let first: f64 = t.history[..10].iter().map(|l| l.mse_branch).sum();
        let last: f64 = t.history[90..].iter().map(|l| l.mse_branch).sum();
        assert!(last < first, "{scheme}: mse branch loss {first} -> {last}");

        // The two branches are trained on different objectives.
        let out = t.model.forward(&train.hazy[0]).unwrap();
        assert_ne!(out.mse.fine().to_vec(), out.ssim.fine().to_vec());

        let realness = |imgs: &[ids_core::tensor::Tensor]| -> f64 {
            let scores: Vec<f64> = imgs
                .iter()
                .flat_map(|img| t.model.discriminator.forward(img).unwrap().sigmoid().to_vec())
                .map(f64::from)
                .collect();
            scores.iter().sum::<f64>() / scores.len() as f64
        };
        let (clear, hazy) = (realness(&train.clear), realness(&train.hazy));
        assert!(clear > hazy, "{scheme}: discriminator clear {clear:.4} hazy {hazy:.4}");
    }
}
