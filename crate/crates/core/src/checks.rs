//! Finite-difference checks of every differentiable building block, shared by
//! `tstrm grad-check` and the test suites.

use crate::backbone::{Bottleneck, BottleneckSpec, FeatureMap};
use crate::error::{Error, Result};
use crate::fusion::{bilinear_resize, fcf, FcfParams};
use crate::loss::{attention_ce, ctc_loss};
use crate::nn::{BatchNorm2d, ForwardCtx};
use crate::rng::Rng;
use crate::tensor::{conv2d, grad_check, Conv2dGeometry, GradCheckReport, Tensor};
use crate::transformer::{attention, causal_mask, DecoderLayer, EncoderLayer, TransformerConfig};

pub const GRAD_CHECK_OPS: &[&str] = &[
    "conv2d",
    "batchnorm",
    "bottleneck",
    "bilinear_resize",
    "fcf",
    "attention",
    "encoder_layer",
    "decoder_layer",
    "decoder_layer_memory",
    "ctc_loss",
    "attention_ce",
];

fn small_transformer() -> TransformerConfig {
    TransformerConfig {
        d_model: 8,
        n_heads: 2,
        d_ff: 12,
        n_encoder_layers: 1,
        n_decoder_layers: 1,
        dropout: 0.0,
    }
}

/// Projects `y` onto fixed random weights so the scalar depends on every
/// output coordinate (a plain sum would hide, e.g., normalisation gradients).
fn probe_sum(y: &Tensor, w: &Tensor) -> Result<Tensor> {
    Ok(y.mul(w)?.sum())
}

/// Checks the gradient of `op` on random inputs drawn from `seed`.
pub fn check_op(op: &str, seed: u64) -> Result<GradCheckReport> {
    let mut rng = Rng::new(seed);
    let mut randn = |shape: &[usize]| Tensor::randn(shape, 1.0, &mut rng);
    match op {
        "conv2d" => {
            let geom = Conv2dGeometry {
                stride: (2, 1),
                padding: (1, 1),
                groups: 2,
            };
            let x = randn(&[4, 5, 4]);
            let k = randn(&[6, 2, 3, 3]);
            let w = randn(&[6, 3, 4]);
            // Input and kernel gradients, via one tensor holding both.
            let both = Tensor::concat(&[&x.reshape(&[80])?, &k.reshape(&[108])?], 0)?;
            grad_check(
                op,
                |t| {
                    let x = t.slice(0, 0, 80)?.reshape(&[4, 5, 4])?;
                    let k = t.slice(0, 80, 188)?.reshape(&[6, 2, 3, 3])?;
                    probe_sum(&conv2d(&x, &k, geom)?, &w)
                },
                &both,
            )
        }
        "batchnorm" => {
            let other = randn(&[3, 2, 3]);
            let x = randn(&[3, 4, 3]);
            let (w0, w1) = (randn(&[3, 4, 3]), randn(&[3, 2, 3]));
            grad_check(
                op,
                |t| {
                    let ys = BatchNorm2d::new(3).forward(&[t.clone(), other.clone()], &ForwardCtx::train(0))?;
                    probe_sum(&ys[0], &w0)?.add(&probe_sum(&ys[1], &w1)?)
                },
                &x,
            )
        }
        "bottleneck" => {
            let block = Bottleneck::new(
                BottleneckSpec {
                    in_ch: 3,
                    out_ch: 3,
                    expansion: 2,
                    stride: 1,
                },
                &mut Rng::new(seed ^ 1),
            );
            let other = randn(&[3, 3, 4]);
            let x = randn(&[3, 4, 4]);
            let w = randn(&[3, 4, 4]);
            grad_check(
                op,
                |t| {
                    let ys = block.forward(&[t.clone(), other.clone()], &ForwardCtx::train(0))?;
                    probe_sum(&ys[0], &w)?.add(&ys[1].sum())
                },
                &x,
            )
        }
        "bilinear_resize" => {
            let x = randn(&[2, 3, 4]);
            let w = randn(&[2, 7, 3]);
            grad_check(op, |t| probe_sum(bilinear_resize(&FeatureMap::new(t.clone())?, 7, 3)?.tensor(), &w), &x)
        }
        "fcf" => {
            let (cs, cd) = (3, 2);
            let params = FcfParams::new(cs, cd, &mut Rng::new(seed ^ 2));
            let x = randn(&[cs + cd, 3, 2]);
            let w = randn(&[cs + cs, 3, 2]);
            grad_check(
                op,
                |t| {
                    let xs = FeatureMap::new(t.slice(0, 0, cs)?)?;
                    let xd = FeatureMap::new(t.slice(0, cs, cs + cd)?)?;
                    probe_sum(fcf(&xs, &xd, &params)?.tensor(), &w)
                },
                &x,
            )
        }
        "attention" => {
            let x = randn(&[4 + 5 + 5, 3]);
            let w = randn(&[4, 3]);
            let mask = causal_mask(5).slice(0, 0, 4)?;
            grad_check(
                op,
                |t| {
                    let (q, k, v) = (t.slice(0, 0, 4)?, t.slice(0, 4, 9)?, t.slice(0, 9, 14)?);
                    probe_sum(&attention(&q, &k, &v, Some(&mask))?, &w)
                },
                &x,
            )
        }
        "encoder_layer" => {
            let layer = EncoderLayer::new(&small_transformer(), &mut Rng::new(seed ^ 3));
            let x = randn(&[4, 8]);
            let w = randn(&[4, 8]);
            grad_check(op, |t| probe_sum(&layer.forward(t, &mut ForwardCtx::eval(), 0.0)?, &w), &x)
        }
        "decoder_layer" | "decoder_layer_memory" => {
            let layer = DecoderLayer::new(&small_transformer(), &mut Rng::new(seed ^ 4));
            let y = randn(&[3, 8]);
            let memory = randn(&[5, 8]);
            let w = randn(&[3, 8]);
            if op == "decoder_layer" {
                grad_check(op, |t| probe_sum(&layer.forward(t, &memory, &mut ForwardCtx::eval(), 0.0)?, &w), &y)
            } else {
                grad_check(op, |t| probe_sum(&layer.forward(&y, t, &mut ForwardCtx::eval(), 0.0)?, &w), &memory)
            }
        }
        "ctc_loss" => {
            let z = randn(&[7, 4]);
            let target = [1 + rng.below(3), 2, 2, 1 + rng.below(3)];
            grad_check(op, |t| ctc_loss(&t.log_softmax(1)?, &target, 0), &z)
        }
        "attention_ce" => {
            let z = randn(&[4, 5]);
            let targets: Vec<usize> = (0..4).map(|_| rng.below(5)).collect();
            grad_check(op, |t| attention_ce(t, &targets, 0.1), &z)
        }
        _ => Err(Error::Input(format!("unknown op '{op}' (one of {})", GRAD_CHECK_OPS.join(", ")))),
    }
}

/// Every entry of [`GRAD_CHECK_OPS`] at `seed`.
pub fn check_all(seed: u64) -> Result<Vec<GradCheckReport>> {
    GRAD_CHECK_OPS.iter().map(|op| check_op(op, seed)).collect()
}
