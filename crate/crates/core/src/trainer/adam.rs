use crate::tensor::{Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentState {
    pub name: String,
    pub step: u64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

impl MomentState {
    pub fn fresh(name: impl Into<String>, len: usize) -> Self {
        Self {
            name: name.into(),
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// One bias-corrected Adam update of every parameter from its current
/// gradient. Parameters without a gradient buffer count as zero gradient.
pub fn adam_step(params: &[(String, Tensor)], states: &mut [MomentState], lr: f64, cfg: &AdamConfig) -> Result<()> {
    if params.len() != states.len() {
        return Err(TensorError::ShapeMismatch {
            op: "adam_step",
            dim: "param count",
            expected: states.len(),
            got: params.len(),
        });
    }
    for ((name, p), st) in params.iter().zip(states.iter_mut()) {
        if st.m.len() != p.numel() || &st.name != name {
            return Err(TensorError::InvalidArgument {
                op: "adam_step",
                reason: format!("state {} ({} values) does not match parameter {name} ({})", st.name, st.m.len(), p.numel()),
            });
        }
        st.step += 1;
        let t = st.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let step_size = lr / c1;
        let c2_sqrt = c2.sqrt();
        let grad = p.grad();
        p.update_data(|data| {
            for i in 0..data.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[i] as f64);
                let m = b1 * st.m[i] as f64 + (1.0 - b1) * g;
                let v = b2 * st.v[i] as f64 + (1.0 - b2) * g * g;
                st.m[i] = m as f32;
                st.v[i] = v as f32;
                data[i] -= (step_size * m / (v.sqrt() / c2_sqrt + cfg.eps)) as f32;
            }
        })?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn param(v: f32) -> Vec<(String, Tensor)> {
        vec![("p".into(), Tensor::param(Shape::new(1, 1, 1, 1), vec![v]))]
    }

    #[test]
    fn first_step_moves_by_lr() {
        let p = param(0.5);
        p[0].1.with_grad(|g| assert!(g.is_some()));
        p[0].1.scale(1.0).sum().backward().unwrap();
        let mut st = vec![MomentState::fresh("p", 1)];
        adam_step(&p, &mut st, 0.1, &AdamConfig::default()).unwrap();
        let delta = p[0].1.item() - 0.5;
        assert!((delta as f64 + 0.1 / (1.0 + 1e-8)).abs() < 1e-7, "{delta}");
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let p = param(0.25);
        let mut st = vec![MomentState::fresh("p", 1)];
        for _ in 0..3 {
            adam_step(&p, &mut st, 0.1, &AdamConfig::default()).unwrap();
        }
        assert_eq!(p[0].1.item(), 0.25);
    }

    #[test]
    fn rejects_mismatched_state() {
        let p = param(0.0);
        let mut st = vec![MomentState::fresh("p", 2)];
        assert!(adam_step(&p, &mut st, 0.1, &AdamConfig::default()).is_err());
    }
}
