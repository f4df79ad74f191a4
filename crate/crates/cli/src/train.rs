use std::path::{Path, PathBuf};

use ids_core::net::NetworkConfig;
use ids_core::trainer::{
    resolve_preset, Checkpoint, PairSet, Scheme, TrainConfig, TrainError, Trainer, BEST_CHECKPOINT, FINAL_CHECKPOINT,
    LOG_FILE,
};

use crate::{io_err, CliError, RunManifest};

pub const DEFAULT_PRESET: &str = "desk";
pub const DEFAULT_SCHEME: Scheme = Scheme::Soft;

#[derive(Clone, Debug, Default)]
pub struct TrainArgs {
    pub data: PathBuf,
    pub scheme: Option<String>,
    pub preset: Option<String>,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub config: Option<PathBuf>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub patch: Option<usize>,
    pub lr: Option<f64>,
    pub resume: Option<PathBuf>,
}

/// Parses a flat `key = value` file. Blank lines and `#` comments are
/// ignored.
pub fn parse_config_file(text: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or_default().trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("config line {}: expected key = value, got {line:?}", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Resolves the run configuration: flags override the config file, which
/// overrides the preset defaults.
pub fn resolve(args: &TrainArgs) -> Result<(String, NetworkConfig, TrainConfig), CliError> {
    let file = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(io_err("config", path))?;
            parse_config_file(&text)?
        }
        None => Vec::new(),
    };
    let from_file = |key: &str| file.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v.clone());
    let scheme: Scheme = args
        .scheme
        .clone()
        .or_else(|| from_file("scheme"))
        .map(|s| s.parse().map_err(CliError::Usage))
        .transpose()?
        .unwrap_or(DEFAULT_SCHEME);
    let preset = args
        .preset
        .clone()
        .or_else(|| from_file("preset"))
        .unwrap_or_else(|| DEFAULT_PRESET.to_string());
    let (net, mut cfg) = resolve_preset(&preset, scheme)?;
    for (k, v) in &file {
        if k != "preset" {
            cfg.set(k, v)?;
        }
    }
    cfg.scheme = scheme;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(b) = args.batch_size {
        cfg.batch_size = b;
    }
    if let Some(p) = args.patch {
        cfg.patch = p;
    }
    if let Some(lr) = args.lr {
        cfg.lr0 = lr;
    }
    cfg.validate()?;
    Ok((preset, net, cfg))
}

fn load_split(data: &Path, split: &str) -> Result<PairSet, CliError> {
    let dir = data.join(split);
    if !dir.is_dir() {
        return Err(CliError::Usage(format!("dataset {} has no {split}/ directory", data.display())));
    }
    Ok(PairSet::load_dir(&dir)?)
}

pub fn run(args: TrainArgs) -> Result<(), CliError> {
    let mut manifest = RunManifest::start("train");
    let (preset, net, cfg) = resolve(&args)?;
    let train = load_split(&args.data, "train")?;
    let val = load_split(&args.data, "val")?;
    if train.len() < 2 {
        return Err(TrainError::Data(format!("need at least 2 training pairs, found {}", train.len())).into());
    }
    manifest.set("data", args.data.display());
    manifest.set("preset", &preset);
    for (k, v) in cfg.entries() {
        manifest.set(k, v);
    }
    manifest.seed = Some(cfg.seed);
    std::fs::create_dir_all(&args.out).map_err(io_err("train", &args.out))?;

    let mut trainer = match &args.resume {
        Some(path) => {
            manifest.set("resume", path.display());
            Trainer::resume(cfg, &Checkpoint::load(path)?)?
        }
        None => Trainer::new(cfg, net)?,
    };
    let m = &trainer.model.config;
    manifest.set("base_channels", m.base_channels);
    manifest.set("growth", m.growth);
    manifest.set("dense_layers", m.dense_layers);
    manifest.set("param_count", trainer.model.param_count());

    println!("{}", ids_core::trainer::EpochLog::HEADER);
    trainer.fit(&train, &val, Some(&args.out), |e| println!("{}", e.line()))?;

    for name in [LOG_FILE, FINAL_CHECKPOINT, BEST_CHECKPOINT] {
        let path = args.out.join(name);
        if path.exists() {
            manifest.artifact(path);
        }
    }
    manifest.write(&args.out)
}
