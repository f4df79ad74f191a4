use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Real, Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Coordinates probed; all of them when the tensor is smaller.
    pub samples: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            samples: 24,
            seed: 0,
        }
    }
}

/// Worst relative error between the tape gradient of scalar `f` at `x` and
/// central differences `(f(x+εe) − f(x−εe)) / 2ε` over a random coordinate
/// subset. The denominator is `max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_check<T, F>(f: F, x: &Tensor<T>, opts: &GradCheckOptions) -> Result<f64>
where
    T: Real,
    F: Fn(&Tensor<T>) -> Result<Tensor<T>>,
{
    let shape = x.shape();
    let base = x.to_vec();
    let probe = Tensor::leaf(shape, base.clone(), true)?;
    let y = f(&probe)?;
    if y.numel() != 1 {
        return Err(TensorError::NotScalar(y.shape()));
    }
    y.backward()?;
    let analytic = probe.grad().expect("leaf requires grad");

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let coords: Vec<usize> = if base.len() <= opts.samples {
        (0..base.len()).collect()
    } else {
        index::sample(&mut rng, base.len(), opts.samples).into_vec()
    };

    let eps = T::lit(opts.eps);
    let mut worst = 0.0f64;
    for i in coords {
        let mut plus = base.clone();
        let mut minus = base.clone();
        plus[i] = base[i] + eps;
        minus[i] = base[i] - eps;
        // The representable step can differ slightly from 2ε.
        let step = (plus[i] - minus[i]).as_f64();
        let fp = f(&Tensor::new(shape, plus)?)?.item().as_f64();
        let fm = f(&Tensor::new(shape, minus)?)?.item().as_f64();
        let numeric = (fp - fm) / step;
        let a = analytic[i].as_f64();
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}
