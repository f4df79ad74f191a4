//! Hard and soft training schemes, schedules and the epoch loop.
//!
//! Hard training updates four modules in isolation per iteration, in the
//! order MSE branch, SSIM branch, discriminator, fusion net; scales hand
//! detached images to each other and the fusion net sees detached branch
//! outputs. Soft training back-propagates one global loss end to end
//! through penultimate-feature handoffs, then updates the discriminator.

mod adam;
mod checkpoint;
mod data;

use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use adam::{adam_step, AdamConfig, MomentState};
pub use checkpoint::{Checkpoint, CheckpointError, NamedTensor, RngState, MAGIC};
pub use data::{augment_and_crop, stack, Augment, PairSet};

use crate::io::ImageIoError;
use crate::metrics::{
    content_loss, discriminator_loss, generator_loss, mse_loss, psnr, ssim, ssim_loss, SsimConfig, DEFAULT_PSNR_CAP,
};
use crate::net::{build_network, pyramid, Group, HandoffMode, IdsModel, NetworkConfig, Preset};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite {what} in {module} at step {step}")]
    NonFinite {
        module: Group,
        step: u64,
        what: &'static str,
    },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("dataset: {0}")]
    Data(String),
    #[error(transparent)]
    Image(#[from] ImageIoError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scheme {
    Hard,
    Soft,
}

impl Scheme {
    pub fn handoff(self) -> HandoffMode {
        match self {
            Scheme::Hard => HandoffMode::Image,
            Scheme::Soft => HandoffMode::Feature,
        }
    }
}

impl FromStr for Scheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "hard" => Ok(Scheme::Hard),
            "soft" => Ok(Scheme::Soft),
            other => Err(format!("unknown scheme {other:?}")),
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::Hard => "hard",
            Scheme::Soft => "soft",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LrSchedule {
    /// Halve every `n` epochs.
    StepEvery(usize),
    /// Halve at each listed epoch.
    Milestones(Vec<usize>),
}

impl fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LrSchedule::StepEvery(n) => write!(f, "every:{n}"),
            LrSchedule::Milestones(m) => {
                let s: Vec<String> = m.iter().map(|v| v.to_string()).collect();
                write!(f, "milestones:{}", s.join(","))
            }
        }
    }
}

pub fn lr_schedule(schedule: &LrSchedule, epoch: usize, lr0: f64) -> f64 {
    let halvings = match schedule {
        LrSchedule::StepEvery(n) => epoch / (*n).max(1),
        LrSchedule::Milestones(m) => m.iter().filter(|&&e| epoch >= e).count(),
    };
    lr0 * 0.5f64.powi(halvings as i32)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub scheme: Scheme,
    pub batch_size: usize,
    pub patch: usize,
    pub lr0: f64,
    pub adam: AdamConfig,
    pub epochs: usize,
    pub schedule: LrSchedule,
    /// Weight of the generator adversarial loss.
    pub adv_weight: f64,
    pub seed: u64,
}

/// Training hyperparameter profile.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    Desk,
    Paper,
}

impl TrainConfig {
    pub fn new(profile: Profile, scheme: Scheme) -> Self {
        let (batch_size, patch, hard_every, hard_epochs) = match profile {
            Profile::Desk => (4, 48, 50, 200),
            Profile::Paper => (10, 180, 120, 700),
        };
        let (epochs, schedule) = match scheme {
            Scheme::Hard => (hard_epochs, LrSchedule::StepEvery(hard_every)),
            Scheme::Soft => (100, LrSchedule::Milestones(vec![60, 80, 90])),
        };
        Self {
            scheme,
            batch_size,
            patch,
            lr0: 1e-4,
            adam: AdamConfig::default(),
            epochs,
            schedule,
            adv_weight: 5e-3,
            seed: 0,
        }
    }

    pub fn desk(scheme: Scheme) -> Self {
        Self::new(Profile::Desk, scheme)
    }

    pub fn paper(scheme: Scheme) -> Self {
        Self::new(Profile::Paper, scheme)
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        lr_schedule(&self.schedule, epoch, self.lr0)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be ≥ 1".into()));
        }
        if self.patch < 32 || self.patch % 4 != 0 {
            return Err(TrainError::Config(format!("patch must be a multiple of 4 and ≥ 32, got {}", self.patch)));
        }
        if !(self.lr0 > 0.0) {
            return Err(TrainError::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        Ok(())
    }

    /// Sets one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), TrainError> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T, TrainError> {
            v.trim().parse().map_err(|_| TrainError::Config(format!("{key}: cannot parse {v:?}")))
        }
        match key {
            "scheme" => self.scheme = value.parse().map_err(TrainError::Config)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "patch" => self.patch = num(key, value)?,
            "lr0" => self.lr0 = num(key, value)?,
            "beta1" => self.adam.beta1 = num(key, value)?,
            "beta2" => self.adam.beta2 = num(key, value)?,
            "adam_eps" => self.adam.eps = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "decay_every" => self.schedule = LrSchedule::StepEvery(num(key, value)?),
            "milestones" => {
                let m = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| num(key, s))
                    .collect::<Result<Vec<usize>, _>>()?;
                self.schedule = LrSchedule::Milestones(m);
            }
            "adv_weight" => self.adv_weight = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            other => return Err(TrainError::Config(format!("unknown setting {other:?}"))),
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("scheme", self.scheme.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("patch", self.patch.to_string()),
            ("lr0", self.lr0.to_string()),
            ("beta1", self.adam.beta1.to_string()),
            ("beta2", self.adam.beta2.to_string()),
            ("adam_eps", self.adam.eps.to_string()),
            ("epochs", self.epochs.to_string()),
            ("schedule", self.schedule.to_string()),
            ("adv_weight", self.adv_weight.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }
}

/// Network and training defaults for a named preset. `paper` is the
/// medium network with the full-scale training profile (batch 10, patch
/// 180); every other preset but `desk` also trains with that profile.
pub fn resolve_preset(name: &str, scheme: Scheme) -> Result<(NetworkConfig, TrainConfig), TrainError> {
    let (preset, profile) = match name {
        "paper" => (Preset::Medium, Profile::Paper),
        "desk" => (Preset::Desk, Profile::Desk),
        other => (other.parse::<Preset>().map_err(TrainError::Config)?, Profile::Paper),
    };
    Ok((NetworkConfig::preset(preset, scheme.handoff()), TrainConfig::new(profile, scheme)))
}

/// Mean losses of one iteration (or one epoch). Branch losses are summed
/// over the three scales.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub mse_branch: f64,
    pub ssim_branch: f64,
    pub content: f64,
    pub gen: f64,
    pub disc: f64,
}

impl StepLosses {
    fn mean(items: &[StepLosses]) -> StepLosses {
        let n = items.len().max(1) as f64;
        let mut m = StepLosses::default();
        for s in items {
            m.mse_branch += s.mse_branch / n;
            m.ssim_branch += s.ssim_branch / n;
            m.content += s.content / n;
            m.gen += s.gen / n;
            m.disc += s.disc / n;
        }
        m
    }
}

/// Adam state for every parameter group.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub adam: AdamConfig,
    states: Vec<Vec<MomentState>>,
}

impl Optimizer {
    pub fn new(model: &IdsModel, adam: AdamConfig) -> Self {
        let states = Group::ALL
            .iter()
            .map(|&g| {
                model
                    .group_params(g)
                    .into_iter()
                    .map(|(n, t)| MomentState::fresh(n, t.numel()))
                    .collect()
            })
            .collect();
        Self { adam, states }
    }

    fn index(group: Group) -> usize {
        Group::ALL.iter().position(|&g| g == group).expect("known group")
    }

    pub fn step(&mut self, model: &IdsModel, group: Group, lr: f64, step: u64) -> Result<(), TrainError> {
        let params = model.group_params(group);
        adam_step(&params, &mut self.states[Self::index(group)], lr, &self.adam)?;
        if !params.iter().all(|(_, t)| t.all_finite()) {
            return Err(TrainError::NonFinite {
                module: group,
                step,
                what: "parameter",
            });
        }
        Ok(())
    }

    pub fn moments(&self) -> impl Iterator<Item = &MomentState> {
        self.states.iter().flatten()
    }

    /// Restores moments saved by [`moments`](Self::moments).
    pub fn load(&mut self, saved: &[MomentState]) -> Result<(), CheckpointError> {
        let mut it = saved.iter();
        for st in self.states.iter_mut().flatten() {
            let s = it.next().ok_or_else(|| CheckpointError::MissingTensor(format!("m:{}", st.name)))?;
            if s.name != st.name {
                return Err(CheckpointError::UnknownTensor(format!("m:{}", s.name)));
            }
            if s.m.len() != st.m.len() {
                return Err(CheckpointError::Malformed(format!("optimizer state size for {}", s.name)));
            }
            *st = s.clone();
        }
        if let Some(extra) = it.next() {
            return Err(CheckpointError::UnknownTensor(format!("m:{}", extra.name)));
        }
        Ok(())
    }
}

fn zero_group(model: &IdsModel, group: Group) {
    for (_, t) in model.group_params(group) {
        t.zero_grad();
    }
}

fn finite(loss: &Tensor, module: Group, step: u64) -> Result<f64, TrainError> {
    let v = loss.item() as f64;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(TrainError::NonFinite {
            module,
            step,
            what: "loss",
        })
    }
}

fn check_outputs(images: [&Tensor; 3], module: Group, step: u64) -> Result<(), TrainError> {
    if images.iter().all(|t| t.all_finite()) {
        Ok(())
    } else {
        Err(TrainError::NonFinite {
            module,
            step,
            what: "scale output",
        })
    }
}

fn scale_losses(
    images: [&Tensor; 3],
    targets: &[Tensor; 3],
    f: impl Fn(&Tensor, &Tensor) -> crate::tensor::Result<Tensor>,
) -> Result<Tensor, TrainError> {
    let mut total = f(images[0], &targets[0])?;
    for i in 1..3 {
        total = total.add(&f(images[i], &targets[i])?)?;
    }
    Ok(total)
}

fn ssim_at_scale(pred: &Tensor, target: &Tensor) -> crate::tensor::Result<Tensor> {
    let s = pred.shape();
    ssim_loss(pred, target, &SsimConfig::default().fitted(s.h, s.w))
}

/// One isolated-update iteration: MSE branch, SSIM branch,
/// discriminator, fusion net. Each update back-propagates only its own
/// loss; the fusion net consumes the branch outputs computed before the
/// branch updates, detached.
pub fn hard_ids_step(
    model: &IdsModel,
    opt: &mut Optimizer,
    hazy: &Tensor,
    clear: &Tensor,
    lr: f64,
    adv_weight: f64,
    step: u64,
) -> Result<StepLosses, TrainError> {
    if model.config.mode != HandoffMode::Image {
        return Err(TrainError::Config("hard training needs image handoff".into()));
    }
    let pyr = pyramid(hazy)?;
    let gt = pyramid(clear)?;

    let out_mse = model.branch_mse.forward_pyramid(&pyr)?;
    check_outputs(out_mse.images(), Group::BranchMse, step)?;
    let loss_mse = scale_losses(out_mse.images(), &gt, mse_loss)?;
    let mse_branch = finite(&loss_mse, Group::BranchMse, step)?;
    zero_group(model, Group::BranchMse);
    loss_mse.backward()?;
    opt.step(model, Group::BranchMse, lr, step)?;

    let out_ssim = model.branch_ssim.forward_pyramid(&pyr)?;
    check_outputs(out_ssim.images(), Group::BranchSsim, step)?;
    let loss_ssim = scale_losses(out_ssim.images(), &gt, ssim_at_scale)?;
    let ssim_branch = finite(&loss_ssim, Group::BranchSsim, step)?;
    zero_group(model, Group::BranchSsim);
    loss_ssim.backward()?;
    opt.step(model, Group::BranchSsim, lr, step)?;

    let fused = model.fusion.forward(hazy, &out_mse.handoff(), &out_ssim.handoff())?;

    let d = &model.discriminator;
    let loss_d = discriminator_loss(&d.forward(clear)?, &d.forward(&fused.detach())?)?;
    let disc = finite(&loss_d, Group::Discriminator, step)?;
    zero_group(model, Group::Discriminator);
    loss_d.backward()?;
    opt.step(model, Group::Discriminator, lr, step)?;

    let loss_c = content_loss(&fused, clear)?;
    let loss_g = generator_loss(&d.forward(&fused)?)?;
    let loss_f = loss_c.add(&loss_g.scale(adv_weight))?;
    finite(&loss_f, Group::Fusion, step)?;
    zero_group(model, Group::Fusion);
    loss_f.backward()?;
    opt.step(model, Group::Fusion, lr, step)?;

    Ok(StepLosses {
        mse_branch,
        ssim_branch,
        content: loss_c.item() as f64,
        gen: loss_g.item() as f64,
        disc,
    })
}

/// Global loss of a soft iteration, built on the tape. Returned with its
/// components.
pub fn soft_global_loss(
    model: &IdsModel,
    hazy: &Tensor,
    clear: &Tensor,
    adv_weight: f64,
    step: u64,
) -> Result<(Tensor, Tensor, StepLosses), TrainError> {
    let out = model.forward(hazy)?;
    check_outputs(out.mse.images(), Group::BranchMse, step)?;
    check_outputs(out.ssim.images(), Group::BranchSsim, step)?;
    let gt = pyramid(clear)?;
    let loss_mse = scale_losses(out.mse.images(), &gt, mse_loss)?;
    let loss_ssim = scale_losses(out.ssim.images(), &gt, ssim_at_scale)?;
    let loss_c = content_loss(&out.dehazed, clear)?;
    let loss_g = generator_loss(&model.discriminator.forward(&out.dehazed)?)?;
    let losses = StepLosses {
        mse_branch: finite(&loss_mse, Group::BranchMse, step)?,
        ssim_branch: finite(&loss_ssim, Group::BranchSsim, step)?,
        content: finite(&loss_c, Group::Fusion, step)?,
        gen: finite(&loss_g, Group::Fusion, step)?,
        disc: 0.0,
    };
    let global = loss_mse.add(&loss_ssim)?.add(&loss_c)?.add(&loss_g.scale(adv_weight))?;
    Ok((global, out.dehazed, losses))
}

/// One generator update on the summed global loss, then one
/// discriminator update.
pub fn soft_ids_step(
    model: &IdsModel,
    opt: &mut Optimizer,
    hazy: &Tensor,
    clear: &Tensor,
    lr: f64,
    adv_weight: f64,
    step: u64,
) -> Result<StepLosses, TrainError> {
    if model.config.mode != HandoffMode::Feature {
        return Err(TrainError::Config("soft training needs feature handoff".into()));
    }
    let (global, dehazed, mut losses) = soft_global_loss(model, hazy, clear, adv_weight, step)?;
    for g in [Group::BranchMse, Group::BranchSsim, Group::Fusion] {
        zero_group(model, g);
    }
    global.backward()?;
    for g in [Group::BranchMse, Group::BranchSsim, Group::Fusion] {
        opt.step(model, g, lr, step)?;
    }

    let d = &model.discriminator;
    let loss_d = discriminator_loss(&d.forward(clear)?, &d.forward(&dehazed.detach())?)?;
    losses.disc = finite(&loss_d, Group::Discriminator, step)?;
    zero_group(model, Group::Discriminator);
    loss_d.backward()?;
    opt.step(model, Group::Discriminator, lr, step)?;
    Ok(losses)
}

/// Mean PSNR and SSIM of `model` on a pair set.
pub fn evaluate(model: &IdsModel, set: &PairSet) -> Result<(f64, f64), TrainError> {
    let mut p = 0.0;
    let mut s = 0.0;
    for (hazy, clear) in set.hazy.iter().zip(&set.clear) {
        let out = model.dehaze_any(hazy)?;
        p += psnr(&out, clear, DEFAULT_PSNR_CAP)?;
        s += ssim(&out, clear, &SsimConfig::default())?;
    }
    let n = set.len().max(1) as f64;
    Ok((p / n, s / n))
}

/// Mean PSNR and SSIM of the hazy inputs themselves.
pub fn hazy_baseline(set: &PairSet) -> Result<(f64, f64), TrainError> {
    let mut p = 0.0;
    let mut s = 0.0;
    for (hazy, clear) in set.hazy.iter().zip(&set.clear) {
        p += psnr(hazy, clear, DEFAULT_PSNR_CAP)?;
        s += ssim(hazy, clear, &SsimConfig::default())?;
    }
    let n = set.len().max(1) as f64;
    Ok((p / n, s / n))
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    /// 1-based index of the finished epoch.
    pub epoch: usize,
    pub lr: f64,
    pub losses: StepLosses,
    pub val_psnr: f64,
    pub val_ssim: f64,
}

impl EpochLog {
    pub const HEADER: &'static str =
        "epoch\tlr\tloss_mse_branch\tloss_ssim_branch\tloss_content\tloss_G\tloss_D\tval_psnr\tval_ssim";

    pub fn line(&self) -> String {
        let l = &self.losses;
        format!(
            "{}\t{:e}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.4}\t{:.6}",
            self.epoch, self.lr, l.mse_branch, l.ssim_branch, l.content, l.gen, l.disc, self.val_psnr, self.val_ssim
        )
    }
}

pub const LOG_FILE: &str = "train_log.tsv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

/// Model, optimizer and data-order RNG of one training run.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: IdsModel,
    pub optimizer: Optimizer,
    rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: usize,
    /// Iterations run so far in this process.
    pub step: u64,
    /// Per-iteration losses recorded by this process.
    pub history: Vec<StepLosses>,
}

/// Stream of the data-order RNG, kept apart from weight initialisation.
const DATA_STREAM: u64 = 1;

impl Trainer {
    pub fn new(config: TrainConfig, mut net: NetworkConfig) -> Result<Self, TrainError> {
        config.validate()?;
        net.mode = config.scheme.handoff();
        let model = build_network(&net, config.seed)?;
        let optimizer = Optimizer::new(&model, config.adam);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(DATA_STREAM);
        Ok(Self {
            config,
            model,
            optimizer,
            rng,
            epoch: 0,
            step: 0,
            history: Vec::new(),
        })
    }

    /// Continues a run from a checkpoint. The architecture comes from the
    /// checkpoint; it must match the scheme's handoff mode.
    pub fn resume(config: TrainConfig, ckpt: &Checkpoint) -> Result<Self, TrainError> {
        config.validate()?;
        let net = IdsModel::infer_config(&ckpt.param_shapes())?;
        if net.mode != config.scheme.handoff() {
            return Err(TrainError::Config(format!(
                "checkpoint uses {} handoff, {} training needs {}",
                net.mode,
                config.scheme,
                config.scheme.handoff()
            )));
        }
        let model = build_network(&net, config.seed)?;
        load_params(&model, ckpt)?;
        let mut optimizer = Optimizer::new(&model, config.adam);
        optimizer.load(&ckpt.moments)?;
        Ok(Self {
            config,
            model,
            optimizer,
            rng: ckpt.rng.restore(),
            epoch: ckpt.epoch as usize,
            step: 0,
            history: Vec::new(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self
                .model
                .named_params()
                .into_iter()
                .map(|(name, t)| NamedTensor {
                    name,
                    shape: t.shape(),
                    data: t.to_vec(),
                })
                .collect(),
            moments: self.optimizer.moments().cloned().collect(),
            epoch: self.epoch as u64,
            rng: RngState::capture(&self.rng),
        }
    }

    /// Runs one epoch over `train` and returns the mean losses.
    pub fn train_epoch(&mut self, train: &PairSet) -> Result<StepLosses, TrainError> {
        if train.len() < 2 {
            return Err(TrainError::Data(format!("need at least 2 training pairs, found {}", train.len())));
        }
        let cfg = &self.config;
        let lr = cfg.lr_at(self.epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let mut epoch_losses = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            let mut hazy = Vec::with_capacity(chunk.len());
            let mut clear = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let (h, c, _) = augment_and_crop(&train.hazy[i], &train.clear[i], cfg.patch, &mut self.rng)?;
                hazy.push(h);
                clear.push(c);
            }
            let (hazy, clear) = (stack(&hazy), stack(&clear));
            self.step += 1;
            let step_fn = match cfg.scheme {
                Scheme::Hard => hard_ids_step,
                Scheme::Soft => soft_ids_step,
            };
            let losses = step_fn(&self.model, &mut self.optimizer, &hazy, &clear, lr, cfg.adv_weight, self.step)?;
            epoch_losses.push(losses);
        }
        self.history.extend_from_slice(&epoch_losses);
        self.epoch += 1;
        Ok(StepLosses::mean(&epoch_losses))
    }

    /// Trains until `config.epochs`, validating after every epoch. With an
    /// output directory, appends to the log and writes the final and
    /// best-validation checkpoints there.
    pub fn fit(
        &mut self,
        train: &PairSet,
        val: &PairSet,
        out_dir: Option<&Path>,
        mut on_epoch: impl FnMut(&EpochLog),
    ) -> Result<Vec<EpochLog>, TrainError> {
        let mut log_file = match out_dir {
            Some(dir) => Some(open_log(dir, self.epoch == 0)?),
            None => None,
        };
        let mut best = match out_dir {
            Some(dir) if self.epoch > 0 => best_logged_psnr(&dir.join(LOG_FILE)),
            _ => f64::NEG_INFINITY,
        };
        let mut logs = Vec::new();
        while self.epoch < self.config.epochs {
            let lr = self.config.lr_at(self.epoch);
            let losses = self.train_epoch(train)?;
            let (val_psnr, val_ssim) = if val.is_empty() {
                (f64::NAN, f64::NAN)
            } else {
                evaluate(&self.model, val)?
            };
            let entry = EpochLog {
                epoch: self.epoch,
                lr,
                losses,
                val_psnr,
                val_ssim,
            };
            if let (Some(dir), Some(f)) = (out_dir, log_file.as_mut()) {
                let path = dir.join(LOG_FILE);
                writeln!(f, "{}", entry.line()).map_err(|source| TrainError::Io { path, source })?;
                if val_psnr > best {
                    best = val_psnr;
                    self.checkpoint().save(&dir.join(BEST_CHECKPOINT))?;
                }
            }
            on_epoch(&entry);
            logs.push(entry);
        }
        if let Some(dir) = out_dir {
            self.checkpoint().save(&dir.join(FINAL_CHECKPOINT))?;
        }
        Ok(logs)
    }
}

fn open_log(dir: &Path, fresh: bool) -> Result<fs::File, TrainError> {
    let path = dir.join(LOG_FILE);
    let io = |source| TrainError::Io {
        path: path.clone(),
        source,
    };
    fs::create_dir_all(dir).map_err(io)?;
    if fresh || !path.exists() {
        let mut f = fs::File::create(&path).map_err(io)?;
        writeln!(f, "{}", EpochLog::HEADER).map_err(io)?;
        Ok(f)
    } else {
        OpenOptions::new().append(true).open(&path).map_err(io)
    }
}

fn best_logged_psnr(path: &Path) -> f64 {
    fs::read_to_string(path)
        .unwrap_or_default()
        .lines()
        .skip(1)
        .filter_map(|l| l.split('\t').nth(7)?.parse::<f64>().ok())
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Copies checkpoint parameters into `model`, matching by name.
pub fn load_params(model: &IdsModel, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let params = model.named_params();
    for p in &ckpt.params {
        if !params.iter().any(|(n, _)| n == &p.name) {
            return Err(CheckpointError::UnknownTensor(p.name.clone()));
        }
    }
    for (name, t) in &params {
        let saved = ckpt
            .params
            .iter()
            .find(|p| &p.name == name)
            .ok_or_else(|| CheckpointError::MissingTensor(name.clone()))?;
        if saved.shape != t.shape() {
            return Err(CheckpointError::ShapeMismatch {
                name: name.clone(),
                found: saved.shape,
                expected: t.shape(),
            });
        }
        t.update_data(|d| d.copy_from_slice(&saved.data)).expect("parameters are leaves");
    }
    Ok(())
}

/// Rebuilds a model from a checkpoint alone.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<IdsModel, TrainError> {
    let cfg = IdsModel::infer_config(&ckpt.param_shapes())?;
    let model = build_network(&cfg, 0)?;
    load_params(&model, ckpt)?;
    Ok(model)
}
