use std::path::{Path, PathBuf};

use ids_core::io::load_png;
use ids_core::metrics::{psnr, ssim, EvalReport, SsimConfig, DEFAULT_PSNR_CAP};

use crate::dehaze::{is_paired_clear, png_files};
use crate::{parallel_map, thread_count, CliError, RunManifest};

pub const REPORT_FILE: &str = "eval.tsv";

/// Ground-truth file for a prediction: the `_clear` counterpart of a
/// `_hazy` name when present, else the same file name.
pub fn counterpart(pred: &Path, gt_dir: &Path) -> Option<PathBuf> {
    let name = pred.file_name()?.to_str()?;
    if let Some(stem) = name.strip_suffix("_hazy.png") {
        let clear = gt_dir.join(format!("{stem}_clear.png"));
        if clear.is_file() {
            return Some(clear);
        }
    }
    let same = gt_dir.join(name);
    same.is_file().then_some(same)
}

/// Predictions in `dir`, leaving out ground truth of synthesized pairs.
fn predictions(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    Ok(png_files(dir)?.into_iter().filter(|p| !is_paired_clear(p)).collect())
}

pub fn run(pred: &Path, gt: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let mut manifest = RunManifest::start("eval");
    let out = out.unwrap_or(pred);
    let threads = thread_count();
    manifest.set("pred", pred.display());
    manifest.set("gt", gt.display());
    manifest.set("threads", threads);

    let preds = predictions(pred)?;
    if preds.is_empty() {
        return Err(CliError::Usage(format!("no PNG predictions in {}", pred.display())));
    }
    let mut pairs = Vec::with_capacity(preds.len());
    for p in preds {
        let g = counterpart(&p, gt)
            .ok_or_else(|| CliError::Usage(format!("{} has no counterpart in {}", p.display(), gt.display())))?;
        pairs.push((p, g));
    }

    let cfg = SsimConfig::default();
    let scores = parallel_map(&pairs, threads, |(p, g)| -> Result<(f64, f64), CliError> {
        let x = load_png(p)?;
        let y = load_png(g)?;
        Ok((psnr(&x, &y, DEFAULT_PSNR_CAP)?, ssim(&x, &y, &cfg)?))
    });
    let mut report = EvalReport::default();
    for ((p, _), score) in pairs.iter().zip(scores) {
        let (ps, ss) = score?;
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        report.push(name, ps, ss);
    }
    std::fs::create_dir_all(out).map_err(crate::io_err("eval", out))?;
    let path = out.join(REPORT_FILE);
    report.write(&path)?;
    manifest.artifact(&path);
    manifest.write(out)?;
    println!(
        "{} image(s): mean PSNR {:.3} dB, mean SSIM {:.4}",
        report.rows.len(),
        report.mean_psnr(),
        report.mean_ssim()
    );
    Ok(())
}
