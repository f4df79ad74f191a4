use std::path::Path;

use ids_core::hazegen::{write_dataset, DatasetOptions, HazeProfile};
use ids_core::io::load_png;
use ids_core::metrics::{psnr, ssim, EvalReport, SsimConfig, DEFAULT_PSNR_CAP};

use crate::{CliError, RunManifest};

/// PSNR/SSIM of every written hazy image against its clear image.
pub const HAZY_METRICS_FILE: &str = "hazy_metrics.tsv";

pub fn parse_size(s: &str) -> Result<(usize, usize), CliError> {
    let bad = || CliError::Usage(format!("--size expects H,W with positive integers, got {s:?}"));
    let (h, w) = s.split_once(',').ok_or_else(bad)?;
    let h: usize = h.trim().parse().map_err(|_| bad())?;
    let w: usize = w.trim().parse().map_err(|_| bad())?;
    if h == 0 || w == 0 {
        return Err(bad());
    }
    Ok((h, w))
}

pub fn run(out: &Path, count: usize, size: &str, profile: &str, seed: u64) -> Result<(), CliError> {
    let mut manifest = RunManifest::start("synth");
    let (height, width) = parse_size(size)?;
    let profile: HazeProfile = profile.parse()?;
    if count == 0 {
        return Err(CliError::Usage("--count must be positive".into()));
    }
    manifest.set("count", count);
    manifest.set("size", format!("{height},{width}"));
    manifest.set("profile", profile);
    manifest.seed = Some(seed);

    let opts = DatasetOptions {
        count,
        height,
        width,
        profile,
        seed,
    };
    let records = write_dataset(out, &opts)?;

    // Metrics are taken from the PNGs so `eval` reproduces them exactly.
    let mut report = EvalReport::default();
    let cfg = SsimConfig::default();
    for r in &records {
        let hazy = load_png(&r.hazy_path)?;
        let clear = load_png(&r.clear_path)?;
        let name = r.hazy_path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let p = psnr(&hazy, &clear, DEFAULT_PSNR_CAP)?;
        let s = ssim(&hazy, &clear, &cfg)?;
        report.push(format!("{}/{name}", r.split.dir_name()), p, s);
    }
    let metrics = out.join(HAZY_METRICS_FILE);
    report.write(&metrics)?;

    manifest.artifact(out.join("train"));
    manifest.artifact(out.join("val"));
    manifest.artifact(out.join("params.tsv"));
    manifest.artifact(metrics);
    manifest.write(out)?;
    println!(
        "wrote {count} pairs to {} (hazy mean PSNR {:.3} dB, SSIM {:.4})",
        out.display(),
        report.mean_psnr(),
        report.mean_ssim()
    );
    Ok(())
}
