use std::path::{Path, PathBuf};

use ids_core::dcp::{dcp_dehaze, DcpConfig};
use ids_core::io::{load_png, save_png};
use ids_core::net::IdsModel;
use ids_core::trainer::{model_from_checkpoint, Checkpoint};

use crate::{io_err, CliError, Method, RunManifest};

/// PNG files directly inside `dir`, sorted by name.
pub(crate) fn png_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io_err("list", dir))? {
        let path = entry.map_err(io_err("list", dir))?.path();
        if path.is_file() && path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// A `_clear` image next to its own `_hazy` image is the ground truth of
/// a synthesized pair rather than an input or a prediction.
pub(crate) fn is_paired_clear(path: &Path) -> bool {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    match (name.strip_suffix("_clear.png"), path.parent()) {
        (Some(stem), Some(dir)) => dir.join(format!("{stem}_hazy.png")).is_file(),
        _ => false,
    }
}

enum Dehazer {
    Ids(Box<IdsModel>),
    Dcp(DcpConfig),
}

impl Dehazer {
    fn apply(&self, path: &Path, out: &Path) -> Result<(), CliError> {
        let hazy = load_png(path)?;
        let clear = match self {
            Dehazer::Ids(model) => model.dehaze_any(&hazy)?,
            Dehazer::Dcp(cfg) => dcp_dehaze(&hazy, cfg)?,
        };
        save_png(&clear, out)?;
        Ok(())
    }
}

pub fn run(ckpt: Option<&Path>, input: &Path, out: &Path, method: Method) -> Result<(), CliError> {
    let mut manifest = RunManifest::start("dehaze");
    manifest.set("input", input.display());
    let dehazer = match method {
        Method::Ids => {
            let path = ckpt.ok_or_else(|| CliError::Usage("--method ids needs --ckpt".into()))?;
            manifest.set("method", "ids");
            manifest.set("ckpt", path.display());
            Dehazer::Ids(Box::new(model_from_checkpoint(&Checkpoint::load(path)?)?))
        }
        Method::Dcp => {
            let cfg = DcpConfig::default();
            manifest.set("method", "dcp");
            manifest.set("patch", cfg.patch);
            manifest.set("omega", cfg.omega);
            manifest.set("t_floor", cfg.t_floor);
            manifest.set("airlight_fraction", cfg.airlight_fraction);
            Dehazer::Dcp(cfg)
        }
    };

    let jobs: Vec<(PathBuf, PathBuf)> = if input.is_dir() {
        std::fs::create_dir_all(out).map_err(io_err("dehaze", out))?;
        png_files(input)?
            .into_iter()
            .filter(|p| !is_paired_clear(p))
            .map(|p| {
                let target = out.join(p.file_name().expect("listed files have names"));
                (p, target)
            })
            .collect()
    } else if out.is_dir() {
        let name = input
            .file_name()
            .ok_or_else(|| CliError::Usage(format!("{} is not a file", input.display())))?;
        vec![(input.to_path_buf(), out.join(name))]
    } else {
        if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(io_err("dehaze", parent))?;
        }
        vec![(input.to_path_buf(), out.to_path_buf())]
    };
    for (src, dst) in &jobs {
        dehazer.apply(src, dst)?;
        manifest.artifact(dst);
    }
    let manifest_dir = if input.is_dir() || out.is_dir() {
        out.to_path_buf()
    } else {
        out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new(".")).to_path_buf()
    };
    manifest.write(&manifest_dir)?;
    println!("dehazed {} image(s) into {}", jobs.len(), out.display());
    Ok(())
}
