//! Parameterised layers shared by the streams, the fusion block and the
//! Transformer.

use std::sync::Mutex;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{conv2d, no_grad, Conv2dGeometry, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// State carried in checkpoints but not trained (batch-norm statistics).
    Buffer,
}

/// Canonical-name traversal of every tensor a layer owns.
pub trait Module {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t, kind| {
            if kind == ParamKind::Trainable {
                n += t.numel();
            }
        });
        n
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Per-call state: training vs evaluation and the dropout stream.
#[derive(Debug, Clone)]
pub struct ForwardCtx {
    pub train: bool,
    rng: Rng,
}

impl ForwardCtx {
    pub fn train(seed: u64) -> Self {
        Self {
            train: true,
            rng: Rng::new(seed),
        }
    }

    pub fn eval() -> Self {
        Self {
            train: false,
            rng: Rng::new(0),
        }
    }

    /// Dropout in training mode, identity otherwise.
    pub fn dropout(&mut self, x: &Tensor, p: f64) -> Result<Tensor> {
        if self.train && p > 0.0 {
            x.dropout(p, &mut self.rng)
        } else {
            Ok(x.clone())
        }
    }
}

fn uniform_param(shape: &[usize], bound: f64, rng: &mut Rng) -> Tensor {
    Tensor::rand_uniform(shape, -bound, bound, rng).to_param()
}

/// `y = x·W + b` over the last axis of a 2-D input; `W` is `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Weights and bias uniform in `±1/sqrt(in)`.
    pub fn new(input: usize, output: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        Self {
            weight: uniform_param(&[input, output], bound, rng),
            bias: uniform_param(&[output], bound, rng),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.weight)?.add(&self.bias)
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[1]
    }
}

impl Module for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        f(&join(prefix, "weight"), &self.weight, ParamKind::Trainable);
        f(&join(prefix, "bias"), &self.bias, ParamKind::Trainable);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        f(&join(prefix, "weight"), &mut self.weight, ParamKind::Trainable);
        f(&join(prefix, "bias"), &mut self.bias, ParamKind::Trainable);
    }
}

/// Normalisation over the last axis with learned gain and offset.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Tensor::full(&[dim], 1.0).to_param(),
            beta: Tensor::zeros(&[dim]).to_param(),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let last = x.ndim() - 1;
        let mean = x.mean_axis(last, true)?;
        let centred = x.sub(&mean)?;
        let var = centred.sqr().mean_axis(last, true)?;
        centred
            .div(&var.add_scalar(self.eps).sqrt())?
            .mul(&self.gamma)?
            .add(&self.beta)
    }
}

impl Module for LayerNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        f(&join(prefix, "gamma"), &self.gamma, ParamKind::Trainable);
        f(&join(prefix, "beta"), &self.beta, ParamKind::Trainable);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        f(&join(prefix, "gamma"), &mut self.gamma, ParamKind::Trainable);
        f(&join(prefix, "beta"), &mut self.beta, ParamKind::Trainable);
    }
}

/// Per-channel normalisation of a batch of `[C, t_i, F]` maps.
///
/// Training mode normalises with the statistics of the whole batch (every
/// time step of every item, every frequency bin), so items may differ in
/// length. Running statistics follow `r ← (1 − m)·r + m·batch` with momentum
/// 0.1; the running variance uses the unbiased batch estimate.
#[derive(Debug)]
pub struct BatchNorm2d {
    pub gamma: Tensor,
    pub beta: Tensor,
    running_mean: Mutex<Tensor>,
    running_var: Mutex<Tensor>,
    pub momentum: f64,
    pub eps: f64,
}

impl Clone for BatchNorm2d {
    fn clone(&self) -> Self {
        Self {
            gamma: self.gamma.clone(),
            beta: self.beta.clone(),
            running_mean: Mutex::new(self.running_mean()),
            running_var: Mutex::new(self.running_var()),
            momentum: self.momentum,
            eps: self.eps,
        }
    }
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(&[channels, 1, 1], 1.0).to_param(),
            beta: Tensor::zeros(&[channels, 1, 1]).to_param(),
            running_mean: Mutex::new(Tensor::zeros(&[channels, 1, 1])),
            running_var: Mutex::new(Tensor::full(&[channels, 1, 1], 1.0)),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    pub fn running_mean(&self) -> Tensor {
        self.running_mean.lock().expect("bn lock").clone()
    }

    pub fn running_var(&self) -> Tensor {
        self.running_var.lock().expect("bn lock").clone()
    }

    pub fn set_running(&self, mean: Tensor, var: Tensor) {
        *self.running_mean.lock().expect("bn lock") = mean;
        *self.running_var.lock().expect("bn lock") = var;
    }

    pub fn forward(&self, xs: &[Tensor], ctx: &ForwardCtx) -> Result<Vec<Tensor>> {
        let c = self.channels();
        if let Some(bad) = xs.iter().find(|x| x.ndim() != 3 || x.shape()[0] != c) {
            return Err(Error::Dimension {
                op: "batchnorm2d",
                lhs: bad.shape().to_vec(),
                rhs: vec![c],
            });
        }
        if !ctx.train {
            let scale = self.gamma.div(&self.running_var().add_scalar(self.eps).sqrt())?;
            let shift = self.beta.sub(&self.running_mean().mul(&scale)?)?;
            return xs.iter().map(|x| x.mul(&scale)?.add(&shift)).collect();
        }
        if xs.len() < 2 {
            return Err(Error::Contract(
                "batch norm in training mode needs a batch of at least 2".into(),
            ));
        }
        let refs: Vec<&Tensor> = xs.iter().collect();
        let x = Tensor::concat(&refs, 1)?;
        let mean = x.mean_axis(2, true)?.mean_axis(1, true)?;
        let centred = x.sub(&mean)?;
        let var = centred.sqr().mean_axis(2, true)?.mean_axis(1, true)?;
        let y = centred
            .div(&var.add_scalar(self.eps).sqrt())?
            .mul(&self.gamma)?
            .add(&self.beta)?;

        let n = (x.numel() / c) as f64;
        let m = self.momentum;
        no_grad(|| -> Result<()> {
            let unbiased = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            let mut rm = self.running_mean.lock().expect("bn lock");
            *rm = rm.scale(1.0 - m).add(&mean.detach().scale(m))?;
            let mut rv = self.running_var.lock().expect("bn lock");
            *rv = rv.scale(1.0 - m).add(&var.detach().scale(m * unbiased))?;
            Ok(())
        })?;

        let mut start = 0;
        xs.iter()
            .map(|item| {
                let len = item.shape()[1];
                let part = y.slice(1, start, start + len);
                start += len;
                part
            })
            .collect()
    }
}

impl Module for BatchNorm2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        f(&join(prefix, "gamma"), &self.gamma, ParamKind::Trainable);
        f(&join(prefix, "beta"), &self.beta, ParamKind::Trainable);
        f(&join(prefix, "running_mean"), &self.running_mean(), ParamKind::Buffer);
        f(&join(prefix, "running_var"), &self.running_var(), ParamKind::Buffer);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        f(&join(prefix, "gamma"), &mut self.gamma, ParamKind::Trainable);
        f(&join(prefix, "beta"), &mut self.beta, ParamKind::Trainable);
        f(
            &join(prefix, "running_mean"),
            self.running_mean.get_mut().expect("bn lock"),
            ParamKind::Buffer,
        );
        f(
            &join(prefix, "running_var"),
            self.running_var.get_mut().expect("bn lock"),
            ParamKind::Buffer,
        );
    }
}

/// Convolution (no bias) followed by batch norm and an optional ReLU.
#[derive(Debug, Clone)]
pub struct ConvBn {
    pub weight: Tensor,
    pub geom: Conv2dGeometry,
    pub bn: BatchNorm2d,
    pub relu: bool,
}

impl ConvBn {
    /// Kaiming-uniform weights, `bound = sqrt(6 / fan_in)`.
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, geom: Conv2dGeometry, relu: bool, rng: &mut Rng) -> Self {
        let fan_in = (in_ch / geom.groups) * kernel * kernel;
        let bound = (6.0 / fan_in as f64).sqrt();
        Self {
            weight: uniform_param(&[out_ch, in_ch / geom.groups, kernel, kernel], bound, rng),
            geom,
            bn: BatchNorm2d::new(out_ch),
            relu,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1] * self.geom.groups
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn forward(&self, xs: &[Tensor], ctx: &ForwardCtx) -> Result<Vec<Tensor>> {
        let pre: Vec<Tensor> = xs
            .iter()
            .map(|x| conv2d(x, &self.weight, self.geom))
            .collect::<Result<_>>()?;
        let normed = self.bn.forward(&pre, ctx)?;
        Ok(if self.relu {
            normed.iter().map(Tensor::relu).collect()
        } else {
            normed
        })
    }
}

impl Module for ConvBn {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        f(&join(prefix, "weight"), &self.weight, ParamKind::Trainable);
        self.bn.visit(&join(prefix, "bn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        f(&join(prefix, "weight"), &mut self.weight, ParamKind::Trainable);
        self.bn.visit_mut(&join(prefix, "bn"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    #[test]
    fn batchnorm_train_statistics() {
        let mut rng = Rng::new(1);
        let bn = BatchNorm2d::new(3);
        let xs = vec![
            Tensor::randn(&[3, 4, 5], 2.0, &mut rng).add_scalar(1.5),
            Tensor::randn(&[3, 7, 5], 2.0, &mut rng).add_scalar(1.5),
        ];
        let ys = bn.forward(&xs, &ForwardCtx::train(0)).unwrap();
        assert_eq!(ys[0].shape(), &[3, 4, 5]);
        assert_eq!(ys[1].shape(), &[3, 7, 5]);
        let channel = |ts: &[Tensor], ch: usize| -> (f64, f64) {
            let vals: Vec<f64> = ts
                .iter()
                .flat_map(|y| y.data()[ch * y.numel() / 3..(ch + 1) * y.numel() / 3].to_vec())
                .collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            (mean, vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n)
        };
        for ch in 0..3 {
            let (_, raw_var) = channel(&xs, ch);
            let (mean, var) = channel(&ys, ch);
            assert!(mean.abs() < 1e-12);
            assert!((var - raw_var / (raw_var + 1e-5)).abs() < 1e-12, "{var}");
        }
        // Running stats moved 10% of the way from (0, 1).
        let rm = bn.running_mean();
        assert!(rm.data().iter().all(|&m| m > 0.0 && m < 0.3));
    }

    #[test]
    fn batchnorm_eval_identity() {
        let mut rng = Rng::new(2);
        let bn = BatchNorm2d::new(2);
        let x = Tensor::randn(&[2, 3, 3], 1.0, &mut rng);
        let y = bn.forward(std::slice::from_ref(&x), &ForwardCtx::eval()).unwrap();
        let s = 1.0 / (1.0f64 + 1e-5).sqrt();
        for (a, b) in y[0].data().iter().zip(x.data()) {
            assert!((a - b * s).abs() < 1e-15);
            assert!((a - b).abs() <= 1e-5 * b.abs() + 1e-15);
        }
    }

    #[test]
    fn batchnorm_rejects_single_item_in_training() {
        let bn = BatchNorm2d::new(1);
        let err = bn.forward(&[Tensor::zeros(&[1, 2, 2])], &ForwardCtx::train(0)).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn batchnorm_gradients() {
        let mut rng = Rng::new(3);
        let other = Tensor::randn(&[2, 2, 3], 1.0, &mut rng);
        let x = Tensor::randn(&[2, 3, 3], 1.0, &mut rng);
        let weights = Tensor::randn(&[2, 3, 3], 1.0, &mut rng);
        let r = grad_check(
            "batchnorm2d",
            |t| {
                let bn = BatchNorm2d::new(2);
                let ys = bn.forward(&[t.clone(), other.clone()], &ForwardCtx::train(0))?;
                ys[0].mul(&weights)?.sum().add(&ys[1].sum())
            },
            &x,
        )
        .unwrap();
        assert!(r.passed, "{r}");
    }

    #[test]
    fn layernorm_normalises_rows() {
        let mut rng = Rng::new(4);
        let ln = LayerNorm::new(8);
        let y = ln.forward(&Tensor::randn(&[3, 8], 3.0, &mut rng)).unwrap();
        for row in y.data().chunks(8) {
            let mean = row.iter().sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-12);
        }
    }

    #[test]
    fn visit_names_are_canonical() {
        let mut rng = Rng::new(5);
        let conv = ConvBn::new(2, 4, 3, Conv2dGeometry::default(), true, &mut rng);
        let mut names = Vec::new();
        conv.visit("stem", &mut |n, _, k| names.push((n.to_string(), k)));
        assert_eq!(names[0], ("stem.weight".to_string(), ParamKind::Trainable));
        assert_eq!(names[4], ("stem.bn.running_var".to_string(), ParamKind::Buffer));
        assert_eq!(conv.param_count(), 4 * 2 * 9 + 8);
    }
}
