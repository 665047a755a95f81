//! Adam with the inverse-square-root warmup schedule and global-norm clipping.

use crate::error::{Error, Result};
use crate::nn::{Module, ParamKind};
use crate::tensor::Tensor;

/// `factor · d_m^-0.5 · min(s^-0.5, s · warmup^-1.5)` at 1-based step `s`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarmupSchedule {
    pub factor: f64,
    pub d_model: usize,
    pub warmup: usize,
}

impl WarmupSchedule {
    pub fn lr(&self, step: u64) -> f64 {
        let s = step.max(1) as f64;
        let w = self.warmup as f64;
        self.factor * (self.d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5))
    }
}

/// First and second moment estimates, one vector per trainable tensor in
/// visiting order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub state: AdamState,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            state: AdamState::default(),
        }
    }
}

/// Gradients of every trainable tensor (zeros where none arrived).
pub fn collect_grads(model: &impl Module) -> Vec<Vec<f64>> {
    let mut grads = Vec::new();
    model.visit("", &mut |_, t, kind| {
        if kind == ParamKind::Trainable {
            grads.push(t.grad().unwrap_or_else(|| vec![0.0; t.numel()]));
        }
    });
    grads
}

impl Adam {
    /// Applies one update from the gradients accumulated on `model`'s
    /// parameters and returns the pre-clipping global gradient norm. The
    /// parameters are replaced by fresh leaves, so gradients start from zero
    /// on the next step.
    pub fn step(&mut self, model: &mut impl Module, lr: f64, clip_norm: f64) -> Result<f64> {
        let grads = collect_grads(model);
        let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::Numeric(format!("gradient norm is {norm}")));
        }
        let scale = if clip_norm > 0.0 && norm > clip_norm { clip_norm / norm } else { 1.0 };
        let st = &mut self.state;
        if st.m.is_empty() {
            st.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            st.v = st.m.clone();
        }
        if st.m.len() != grads.len() || st.m.iter().zip(&grads).any(|(m, g)| m.len() != g.len()) {
            return Err(Error::Contract("optimizer state does not match the model".into()));
        }
        st.t += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(st.t as i32);
        let c2 = 1.0 - b2.powi(st.t as i32);
        let mut i = 0;
        let mut failure = None;
        model.visit_mut("", &mut |_, t, kind| {
            if kind != ParamKind::Trainable {
                return;
            }
            let (m, v, g) = (&mut st.m[i], &mut st.v[i], &grads[i]);
            let mut data = t.to_vec();
            for j in 0..data.len() {
                let gj = g[j] * scale;
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                data[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
            }
            match Tensor::param(data, t.shape()) {
                Ok(p) => *t = p,
                Err(e) => failure = Some(e),
            }
            i += 1;
        });
        failure.map_or(Ok(norm), Err)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Linear;
    use crate::rng::Rng;

    #[test]
    fn schedule_peaks_at_warmup() {
        let s = WarmupSchedule {
            factor: 1.0,
            d_model: 256,
            warmup: 100,
        };
        assert!(s.lr(50) < s.lr(100));
        assert!(s.lr(200) < s.lr(100));
        assert!((s.lr(100) - 1.0 / 16.0 / 10.0).abs() < 1e-15);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // With bias correction the first Adam step is lr·sign(g).
        let mut rng = Rng::new(0);
        let mut lin = Linear::new(2, 1, &mut rng);
        let before = lin.weight.to_vec();
        let x = Tensor::new(vec![1.0, -2.0], &[1, 2]).unwrap();
        lin.forward(&x).unwrap().sum().backward().unwrap();
        Adam::default().step(&mut lin, 0.01, 0.0).unwrap();
        let after = lin.weight.to_vec();
        assert!((after[0] - (before[0] - 0.01)).abs() < 1e-9);
        assert!((after[1] - (before[1] + 0.01)).abs() < 1e-9);
        assert!(lin.weight.requires_grad() && lin.weight.grad().is_none());
    }
}
