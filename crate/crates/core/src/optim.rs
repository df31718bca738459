use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moments and the step count for one parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, rate: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || state.v.len() != state.m.len() {
        return Err(Error::Config(format!(
            "adam shapes disagree: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g;
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= rate * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
    Ok(())
}

/// `base · final_fraction^(progress)` for `progress = iteration / total` in `[0, 1]`.
pub fn exponential_decay(base: f64, final_fraction: f64, iteration: usize, total: usize) -> f64 {
    let progress = if total == 0 { 0.0 } else { (iteration as f64 / total as f64).min(1.0) };
    base * final_fraction.powf(progress)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut p = vec![1.0, -2.0];
        let mut s = AdamState::new(2);
        s.m = vec![0.5, -0.5];
        s.v = vec![0.25, 0.25];
        adam_step(&mut p, &[0.0, 0.0], &mut s, 0.1).unwrap();
        assert!((s.m[0] - 0.45).abs() < 1e-15);
        assert!((s.v[0] - 0.24975).abs() < 1e-15);
        let mut q = vec![1.0, -2.0];
        let mut fresh = AdamState::new(2);
        adam_step(&mut q, &[0.0, 0.0], &mut fresh, 0.1).unwrap();
        assert_eq!(q, vec![1.0, -2.0]);
        assert_eq!(fresh.m, vec![0.0, 0.0]);
    }

    #[test]
    fn first_step_is_rate_times_sign() {
        let mut p = vec![0.0, 0.0, 0.0];
        let mut s = AdamState::new(3);
        adam_step(&mut p, &[3.0, -0.02, 1e-3], &mut s, 0.01).unwrap();
        assert!((p[0] + 0.01).abs() < 1e-8);
        assert!((p[1] - 0.01).abs() < 1e-8);
        assert!((p[2] + 0.01).abs() < 1e-7);
    }

    #[test]
    fn converges_on_a_quadratic() {
        // f(x) = (x - 0.5)², minimizer 0.5.
        let mut x = vec![0.0];
        let mut s = AdamState::new(1);
        for i in 0..100 {
            let g = 2.0 * (x[0] - 0.5);
            adam_step(&mut x, &[g], &mut s, exponential_decay(0.2, 0.01, i, 100)).unwrap();
        }
        assert!((x[0] - 0.5).abs() < 1e-3, "x = {}", x[0]);
    }

    #[test]
    fn shape_mismatch_is_a_config_error() {
        let mut s = AdamState::new(2);
        assert!(matches!(adam_step(&mut [0.0], &[0.0], &mut s, 0.1), Err(Error::Config(_))));
    }

    #[test]
    fn decay_endpoints() {
        assert_eq!(exponential_decay(2e-3, 0.1, 0, 100), 2e-3);
        assert!((exponential_decay(2e-3, 0.1, 100, 100) - 2e-4).abs() < 1e-18);
    }
}
