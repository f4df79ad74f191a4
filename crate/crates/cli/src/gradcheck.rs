//! Finite-difference suite over every differentiable op and loss, run in
//! f64 so the comparison measures the backward pass rather than rounding.

use std::fmt::Write as _;
use std::path::Path;

use clap::ValueEnum;
use ids_core::metrics::{content_loss, discriminator_loss, generator_loss, mse_loss, ssim_loss, SsimConfig};
use ids_core::tensor::{
    conv2d_backward_raw, conv2d_forward_raw, finite_diff_check, ConvGeometry, GradCheckOptions, Result, Shape, Tensor,
};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{io_err, CliError, RunManifest};

/// Relative error above which a check fails.
pub const TOLERANCE: f64 = 1e-3;
pub const REPORT_FILE: &str = "gradcheck.tsv";

/// Deliberate backward-pass corruptions used to prove the suite can fail.
#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Fault {
    /// Negates the input gradient of conv2d.
    ConvSign,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckRow {
    pub name: &'static str,
    pub rel_err: f64,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.rel_err <= TOLERANCE
    }
}

type F64 = Tensor<f64>;

fn uniform(shape: Shape, lo: f64, hi: f64, seed: u64) -> F64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(shape, (0..shape.numel()).map(|_| rng.random_range(lo..hi)).collect()).expect("length matches")
}

/// Values with magnitude in [margin, 1), away from activation kinks.
fn off_zero(shape: Shape, margin: f64, seed: u64) -> F64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..shape.numel())
        .map(|_| {
            let v: f64 = rng.random_range(margin..1.0);
            if rng.random_bool(0.5) { v } else { -v }
        })
        .collect();
    Tensor::new(shape, data).expect("length matches")
}

/// Weighted sum with fixed random weights, so every output element
/// reaches the scalar.
fn project(y: &F64, seed: u64) -> Result<F64> {
    Ok(y.mul(&uniform(y.shape(), -1.0, 1.0, seed ^ 0x5eed))?.sum())
}

/// conv2d whose backward pass returns the negated input gradient.
fn faulty_conv(x: &F64, w: &F64, b: &F64, stride: usize, pad: usize) -> Result<F64> {
    let g = ConvGeometry::new(x.shape(), w.shape(), stride, pad)?;
    let out = conv2d_forward_raw(&x.data(), &w.data(), Some(&b.data()[..]), &g);
    Ok(Tensor::from_op("conv2d", g.output_shape(), out, vec![x.clone(), w.clone(), b.clone()], move |ctx| {
        let need = (true, ctx.inputs[1].requires_grad(), ctx.inputs[2].requires_grad());
        let grads = conv2d_backward_raw(&ctx.inputs[0].data(), &ctx.inputs[1].data(), ctx.grad_out, &g, need);
        let input = grads.input.map(|v| v.into_iter().map(|g| -g).collect());
        vec![input, grads.weight, grads.bias]
    }))
}

/// Runs every check and returns one row per op or loss.
pub fn suite(fault: Option<Fault>) -> Result<Vec<CheckRow>> {
    let opts = GradCheckOptions {
        eps: 1e-3,
        samples: 32,
        seed: 3,
    };
    let mut rows = Vec::new();
    let mut check = |name: &'static str, x: &F64, f: &dyn Fn(&F64) -> Result<F64>| -> Result<()> {
        let rel_err = finite_diff_check(f, x, &opts)?;
        rows.push(CheckRow { name, rel_err });
        Ok(())
    };

    let s = Shape::new(2, 2, 4, 4);
    let a = uniform(s, -1.0, 1.0, 1);
    let b = uniform(s, -1.0, 1.0, 2);
    let denom = off_zero(s, 0.3, 3);
    let kinked = off_zero(s, 0.01, 4);

    check("add", &a, &|x| project(&x.add(&b)?, 1))?;
    check("sub", &a, &|x| project(&b.sub(x)?, 2))?;
    check("mul", &a, &|x| project(&x.mul(&b)?, 3))?;
    check("div", &denom, &|x| project(&a.div(x)?.add(&x.div(&denom)?)?, 4))?;
    check("scale", &a, &|x| project(&x.scale(-1.7), 5))?;
    check("add_scalar", &a, &|x| project(&x.add_scalar(0.3).square(), 6))?;
    check("neg", &a, &|x| project(&x.neg(), 7))?;
    check("square", &a, &|x| project(&x.square(), 8))?;
    check("relu", &kinked, &|x| project(&x.relu(), 9))?;
    check("leaky_relu", &kinked, &|x| project(&x.leaky_relu(0.2), 10))?;
    check("sigmoid", &a, &|x| project(&x.sigmoid(), 11))?;
    check("softplus", &a, &|x| project(&x.softplus(), 12))?;
    check("concat_channels", &a, &|x| project(&Tensor::concat_channels(&[&b, x, &x.square()])?, 13))?;
    check("slice_channels", &a, &|x| project(&x.slice_channels(1, 1)?, 14))?;
    check("reshape", &a, &|x| project(&x.reshape(Shape::new(1, 4, 2, 8))?, 15))?;
    let wide = uniform(Shape::new(1, 8, 3, 3), -1.0, 1.0, 5);
    check("pixel_shuffle", &wide, &|x| project(&x.pixel_shuffle(2)?, 16))?;
    check("pixel_unshuffle", &a, &|x| project(&x.pixel_unshuffle(2)?, 17))?;
    check("bilinear_resize", &a, &|x| Ok(project(&x.bilinear_resize(3, 7)?, 18)?.add(&project(&x.bilinear_resize(8, 10)?, 23)?)?))?;
    check("mean", &a, &|x| Ok(x.square().mean()?))?;
    check("sum", &a, &|x| Ok(x.mul(&b)?.sum()))?;

    let x = uniform(Shape::new(2, 3, 7, 6), -1.0, 1.0, 6);
    let w = uniform(Shape::new(4, 3, 3, 3), -0.5, 0.5, 7);
    let bias = uniform(Shape::new(1, 4, 1, 1), -0.5, 0.5, 8);
    let conv = |x: &F64, w: &F64, b: &F64, stride: usize| -> Result<F64> {
        match fault {
            Some(Fault::ConvSign) => faulty_conv(x, w, b, stride, 1),
            None => x.conv2d(w, Some(b), stride, 1),
        }
    };
    check("conv2d input", &x, &|t| project(&conv(t, &w, &bias, 1)?, 19))?;
    check("conv2d weight", &w, &|t| project(&conv(&x, t, &bias, 1)?, 20))?;
    check("conv2d bias", &bias, &|t| project(&conv(&x, &w, t, 1)?, 21))?;
    check("conv2d stride 2", &x, &|t| project(&conv(t, &w, &bias, 2)?, 22))?;

    let img = Shape::new(1, 3, 16, 16);
    let target = uniform(img, 0.0, 1.0, 9);
    let pred = uniform(img, 0.0, 1.0, 10);
    let cfg = SsimConfig::default();
    check("mse_loss", &pred, &|p| mse_loss(p, &target))?;
    check("ssim_loss", &pred, &|p| ssim_loss(p, &target, &cfg))?;
    check("content_loss", &pred, &|p| content_loss(p, &target))?;
    let logits = Shape::new(2, 1, 3, 3);
    let real = uniform(logits, -1.0, 1.0, 11);
    let fake = uniform(logits, -1.0, 1.0, 12);
    check("discriminator_loss", &fake, &|f| discriminator_loss(&real, f))?;
    check("generator_loss", &fake, &|f| generator_loss(f))?;
    Ok(rows)
}

pub fn render(rows: &[CheckRow]) -> String {
    let mut s = String::from("check\trel_err\tstatus\n");
    for r in rows {
        let status = if r.passed() { "pass" } else { "FAIL" };
        writeln!(s, "{}\t{:.3e}\t{status}", r.name, r.rel_err).unwrap();
    }
    s
}

pub fn run(out: &Path, fault: Option<Fault>) -> Result<(), CliError> {
    let mut manifest = RunManifest::start("gradcheck");
    manifest.set("tolerance", TOLERANCE);
    if let Some(f) = fault {
        manifest.set("inject_fault", format!("{f:?}"));
    }
    let rows = suite(fault)?;
    let report = render(&rows);
    print!("{report}");
    std::fs::create_dir_all(out).map_err(io_err("gradcheck", out))?;
    let path = out.join(REPORT_FILE);
    std::fs::write(&path, &report).map_err(io_err("gradcheck", &path))?;
    manifest.artifact(path);
    manifest.write(out)?;
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed()).map(|r| r.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::GradCheck(failed.join(", ")))
    }
}
