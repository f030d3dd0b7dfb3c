//! Adam with global gradient-norm clipping.

use crate::error::{Error, Result};

/// Clip a set of gradients to a global L2 norm. Returns the pre-clip norm;
/// gradients are scaled in place only when the norm exceeds `max_norm`.
pub fn clip_grad_norm(grads: &mut [Vec<f32>], max_norm: f32) -> f32 {
    assert!(max_norm > 0.0, "max_norm must be positive");
    let sq: f64 = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&x| (x as f64) * (x as f64))
        .sum();
    let norm = sq.sqrt() as f32;
    if norm > max_norm {
        let factor = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.iter_mut() {
                *x *= factor;
            }
        }
    }
    norm
}

/// First/second moment estimates for one parameter set.
pub struct AdamState {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    step: u64,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
}

impl AdamState {
    /// Moments shaped after `sizes`, one entry per parameter tensor.
    pub fn new(sizes: &[usize]) -> AdamState {
        AdamState {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update over parallel parameter/gradient slices.
    pub fn step(&mut self, params: &mut [&mut [f32]], grads: &[Vec<f32>], lr: f32) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "adam: {} params, {} grads for {} states",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for ((p, g), (m, v)) in params
            .iter()
            .zip(grads)
            .zip(self.m.iter().zip(self.v.iter()))
        {
            if p.len() != m.len() || g.len() != m.len() {
                return Err(Error::Shape(format!(
                    "adam: param/grad length {}/{} vs moment length {}",
                    p.len(),
                    g.len(),
                    m.len()
                )));
            }
            let _ = v;
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let g = &grads[i];
            let p = &mut params[i];
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_below_threshold_unchanged() {
        let mut grads = vec![vec![0.3, 0.4]]; // norm 0.5
        let norm = clip_grad_norm(&mut grads, 1.0);
        assert!((norm - 0.5).abs() < 1e-6);
        assert_eq!(grads[0], vec![0.3, 0.4]);
    }

    #[test]
    fn clip_above_threshold_scales() {
        let mut grads = vec![vec![3.0, 4.0]]; // norm 5
        let norm = clip_grad_norm(&mut grads, 1.0);
        assert!((norm - 5.0).abs() < 1e-6);
        assert!((grads[0][0] - 0.6).abs() < 1e-6);
        assert!((grads[0][1] - 0.8).abs() < 1e-6);
        let post: f32 = grads[0].iter().map(|x| x * x).sum::<f32>().sqrt();
        assert!(post <= 1.0 + 1e-6);
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut state = AdamState::new(&[2]);
        let mut p = vec![1.0f32, -2.0];
        let grads = vec![vec![0.0, 0.0]];
        state.step(&mut [&mut p], &grads, 0.001).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn adam_first_step_closed_form() {
        // With g = 1: m_hat = 1, v_hat = 1, so the update is
        // -lr / (1 + eps) which is about -lr.
        let mut state = AdamState::new(&[1]);
        let mut p = vec![0.0f32];
        state.step(&mut [&mut p], &[vec![1.0]], 0.001).unwrap();
        assert!((p[0] + 0.001).abs() < 1e-6);
    }

    #[test]
    fn adam_matches_scalar_reference_two_steps() {
        // Independent scalar re-implementation.
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8f64, 0.001f64);
        let mut theta = 0.5f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        let gs = [0.3f64, -0.7];
        for (t, g) in gs.iter().enumerate() {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32 + 1));
            let vh = v / (1.0 - b2.powi(t as i32 + 1));
            theta -= lr * mh / (vh.sqrt() + eps);
        }

        let mut state = AdamState::new(&[1]);
        let mut p = vec![0.5f32];
        for g in gs {
            state.step(&mut [&mut p], &[vec![g as f32]], 0.001).unwrap();
        }
        assert!((p[0] as f64 - theta).abs() < 1e-7, "{} vs {}", p[0], theta);
    }

    #[test]
    fn adam_rejects_shape_mismatch() {
        let mut state = AdamState::new(&[2]);
        let mut p = vec![0.0f32; 3];
        assert!(state.step(&mut [&mut p], &[vec![0.0; 3]], 0.001).is_err());
    }
}
