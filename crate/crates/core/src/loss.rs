//! CTC, label-smoothed attention cross-entropy, and their interpolation.

use crate::error::{Error, Result};
use crate::tensor::{BackwardCtx, Tensor};

pub type TokenSequence = Vec<usize>;

/// Token-id conventions for a vocabulary of `size` CTC classes.
///
/// Id 0 is the CTC blank and `1..size` are real tokens. The attention decoder
/// additionally knows `sos = size` and `eos = size + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocab {
    pub size: usize,
}

impl Vocab {
    /// Vocabulary for `n_tokens` real tokens.
    pub fn with_tokens(n_tokens: usize) -> Self {
        Self { size: n_tokens + 1 }
    }

    pub const BLANK: usize = 0;

    pub fn ctc_classes(&self) -> usize {
        self.size
    }

    pub fn sos(&self) -> usize {
        self.size
    }

    pub fn eos(&self) -> usize {
        self.size + 1
    }

    pub fn decoder_classes(&self) -> usize {
        self.size + 2
    }

    pub fn is_token(&self, id: usize) -> bool {
        id >= 1 && id < self.size
    }
}

fn logsumexp(a: f64, b: f64) -> f64 {
    if a.is_nan() || b.is_nan() {
        return f64::NAN;
    }
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Number of adjacent equal pairs; each needs a separating blank frame.
pub fn repeats(target: &[usize]) -> usize {
    target.windows(2).filter(|w| w[0] == w[1]).count()
}

pub fn ctc_feasible(target: &[usize], frames: usize) -> bool {
    frames >= target.len() + repeats(target)
}

/// Whether the extended label at `s` may be entered from `s − 2`.
fn can_skip(ext: &[usize], s: usize, blank: usize) -> bool {
    s >= 2 && ext[s] != blank && ext[s] != ext[s - 2]
}

/// Negative log-likelihood of `target` under per-frame log-probabilities
/// `[T, C]`, summed over all alignments.
///
/// The gradient with respect to the log-probabilities is `−γ`, where
/// `γ[t, k]` is the posterior occupancy of class `k` at frame `t`.
pub fn ctc_loss(logprobs: &Tensor, target: &[usize], blank: usize) -> Result<Tensor> {
    if logprobs.ndim() != 2 {
        return Err(Error::Dimension {
            op: "ctc_loss",
            lhs: logprobs.shape().to_vec(),
            rhs: vec![target.len()],
        });
    }
    let (t_len, classes) = (logprobs.shape()[0], logprobs.shape()[1]);
    if blank >= classes {
        return Err(Error::Input(format!("blank {blank} outside {classes} classes")));
    }
    if let Some(&bad) = target.iter().find(|&&k| k == blank || k >= classes) {
        return Err(Error::Input(format!("target id {bad} is the blank or outside {classes} classes")));
    }
    if !ctc_feasible(target, t_len) {
        return Err(Error::Infeasible {
            target_len: target.len(),
            repeats: repeats(target),
            frames: t_len,
        });
    }

    let ext: Vec<usize> = std::iter::once(blank)
        .chain(target.iter().flat_map(|&k| [k, blank]))
        .collect();
    let s_len = ext.len();
    let lp = logprobs.data();
    let at = |t: usize, s: usize| lp[t * classes + ext[s]];
    let ninf = f64::NEG_INFINITY;

    let mut alpha = vec![ninf; t_len * s_len];
    alpha[0] = at(0, 0);
    if s_len > 1 {
        alpha[1] = at(0, 1);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut a = prev[s];
            if s >= 1 {
                a = logsumexp(a, prev[s - 1]);
            }
            if can_skip(&ext, s, blank) {
                a = logsumexp(a, prev[s - 2]);
            }
            alpha[t * s_len + s] = if a == ninf { ninf } else { a + at(t, s) };
        }
    }
    let last = (t_len - 1) * s_len;
    let log_p = if s_len > 1 {
        logsumexp(alpha[last + s_len - 1], alpha[last + s_len - 2])
    } else {
        alpha[last]
    };

    Ok(Tensor::from_op(
        "ctc_loss",
        vec![1],
        vec![-log_p],
        vec![logprobs.clone()],
        Box::new(move |ctx: &BackwardCtx<'_>| {
            let lp = ctx.parents[0].data();
            let at = |t: usize, s: usize| lp[t * classes + ext[s]];
            let mut beta = vec![ninf; t_len * s_len];
            beta[last + s_len - 1] = at(t_len - 1, s_len - 1);
            if s_len > 1 {
                beta[last + s_len - 2] = at(t_len - 1, s_len - 2);
            }
            for t in (0..t_len - 1).rev() {
                for s in 0..s_len {
                    let next = &beta[(t + 1) * s_len..(t + 2) * s_len];
                    let mut b = next[s];
                    if s + 1 < s_len {
                        b = logsumexp(b, next[s + 1]);
                    }
                    if s + 2 < s_len && can_skip(&ext, s + 2, blank) {
                        b = logsumexp(b, next[s + 2]);
                    }
                    beta[t * s_len + s] = if b == ninf { ninf } else { b + at(t, s) };
                }
            }
            let g = ctx.grad_out[0];
            let mut grad = vec![0.0; t_len * classes];
            for t in 0..t_len {
                for s in 0..s_len {
                    let (a, b) = (alpha[t * s_len + s], beta[t * s_len + s]);
                    if a == ninf || b == ninf {
                        continue;
                    }
                    let gamma = (a + b - at(t, s) - log_p).exp();
                    grad[t * classes + ext[s]] -= g * gamma;
                }
            }
            vec![Some(grad)]
        }),
    ))
}

/// Mean over positions of `−Σ_k q_k log softmax(z)_k`, where `q` puts
/// `1 − ε` on the target class and `ε / (K − 1)` on every other class.
pub fn attention_ce(logits: &Tensor, targets: &[usize], smoothing: f64) -> Result<Tensor> {
    if logits.ndim() != 2 || logits.shape()[0] != targets.len() {
        return Err(Error::Input(format!(
            "attention_ce: logits {:?} against {} targets",
            logits.shape(),
            targets.len()
        )));
    }
    let (len, k) = (logits.shape()[0], logits.shape()[1]);
    if k < 2 || !(0.0..1.0).contains(&smoothing) {
        return Err(Error::Input(format!("need ≥ 2 classes and smoothing in [0, 1), got {k}, {smoothing}")));
    }
    if let Some(&bad) = targets.iter().find(|&&y| y >= k) {
        return Err(Error::Input(format!("target {bad} outside {k} classes")));
    }
    let off = smoothing / (k - 1) as f64;
    let mut q = vec![off; len * k];
    for (i, &y) in targets.iter().enumerate() {
        q[i * k + y] = 1.0 - smoothing;
    }
    let q = Tensor::new(q, &[len, k])?;
    Ok(logits.log_softmax(1)?.mul(&q)?.sum().scale(-1.0 / len as f64))
}

/// Component losses and their interpolation weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub ctc: f64,
    pub att: f64,
    pub joint: f64,
    pub lambda: f64,
}

fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(Error::Config(format!("ctc weight {lambda} outside [0, 1]")))
    }
}

impl LossBreakdown {
    /// `joint = λ·ctc + (1 − λ)·att`
    pub fn new(ctc: f64, att: f64, lambda: f64) -> Result<Self> {
        check_lambda(lambda)?;
        Ok(Self {
            ctc,
            att,
            joint: lambda * ctc + (1.0 - lambda) * att,
            lambda,
        })
    }
}

/// Differentiable `λ·ctc + (1 − λ)·att`.
pub fn joint_loss(ctc: &Tensor, att: &Tensor, lambda: f64) -> Result<Tensor> {
    check_lambda(lambda)?;
    ctc.scale(lambda).add(&att.scale(1.0 - lambda))
}
