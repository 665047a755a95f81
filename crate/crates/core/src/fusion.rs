//! Combining the shallow and deep stream outputs.
//!
//! The deep map is first brought onto the shallow map's `(t, f)` grid by
//! bilinear resampling. Feature-correlation fusion then computes a `c × c`
//! channel affinity
//!
//! ```text
//! W   = softmax_rows( f1(Xs) · f2(Xd)ᵀ / sqrt(t·f) )
//! Xw  = W · f3(Xs) + f2(Xd)
//! out = concat(Xw, Xs)            // [2c, t, f]
//! ```
//!
//! with `f1`, `f2`, `f3` 1×1 convolutions (with bias) and each map flattened
//! to `[c, t·f]`.

use crate::backbone::FeatureMap;
use crate::error::{Error, Result};
use crate::nn::{join, Module, ParamKind};
use crate::rng::Rng;
use crate::tensor::{BackwardCtx, Tensor};

/// Source taps along one axis: `(lo, hi, weight_of_hi)` per output index,
/// half-pixel centres, clamped at the borders.
fn taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(n_in - 1);
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Bilinear resampling of `[C, t, f]` to `[C, t_out, f_out]`.
pub fn bilinear_resize(x: &FeatureMap, t_out: usize, f_out: usize) -> Result<FeatureMap> {
    let (c, t, f) = x.dims();
    if t_out == 0 || f_out == 0 {
        return Err(Error::Input(format!("cannot resize to {t_out}x{f_out}")));
    }
    if (t, f) == (t_out, f_out) {
        return Ok(x.clone());
    }
    let (tt, ft) = (taps(t, t_out), taps(f, f_out));
    let src = x.tensor().data();
    let mut out = vec![0.0; c * t_out * f_out];
    for ch in 0..c {
        let plane = &src[ch * t * f..(ch + 1) * t * f];
        for (i, &(r0, r1, a)) in tt.iter().enumerate() {
            for (j, &(c0, c1, b)) in ft.iter().enumerate() {
                out[(ch * t_out + i) * f_out + j] = (1.0 - a) * ((1.0 - b) * plane[r0 * f + c0] + b * plane[r0 * f + c1])
                    + a * ((1.0 - b) * plane[r1 * f + c0] + b * plane[r1 * f + c1]);
            }
        }
    }
    FeatureMap::new(Tensor::from_op(
        "bilinear_resize",
        vec![c, t_out, f_out],
        out,
        vec![x.tensor().clone()],
        Box::new(move |ctx: &BackwardCtx<'_>| {
            let mut g = vec![0.0; c * t * f];
            for ch in 0..c {
                let plane = &mut g[ch * t * f..(ch + 1) * t * f];
                for (i, &(r0, r1, a)) in tt.iter().enumerate() {
                    for (j, &(c0, c1, b)) in ft.iter().enumerate() {
                        let go = ctx.grad_out[(ch * t_out + i) * f_out + j];
                        plane[r0 * f + c0] += (1.0 - a) * (1.0 - b) * go;
                        plane[r0 * f + c1] += (1.0 - a) * b * go;
                        plane[r1 * f + c0] += a * (1.0 - b) * go;
                        plane[r1 * f + c1] += a * b * go;
                    }
                }
            }
            vec![Some(g)]
        }),
    ))
}

/// 1×1 convolution with bias, i.e. a per-position linear map over channels.
#[derive(Debug, Clone)]
pub struct Pointwise {
    /// `[out, in]`
    pub weight: Tensor,
    /// `[out, 1]`
    pub bias: Tensor,
}

impl Pointwise {
    pub fn new(input: usize, output: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        Self {
            weight: Tensor::rand_uniform(&[output, input], -bound, bound, rng).to_param(),
            bias: Tensor::rand_uniform(&[output, 1], -bound, bound, rng).to_param(),
        }
    }

    /// `[in, P] → [out, P]`
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        self.weight.matmul(x)?.add(&self.bias)
    }
}

impl Module for Pointwise {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        f(&join(prefix, "weight"), &self.weight, ParamKind::Trainable);
        f(&join(prefix, "bias"), &self.bias, ParamKind::Trainable);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        f(&join(prefix, "weight"), &mut self.weight, ParamKind::Trainable);
        f(&join(prefix, "bias"), &mut self.bias, ParamKind::Trainable);
    }
}

fn flat(x: &FeatureMap) -> Result<Tensor> {
    let (c, t, f) = x.dims();
    x.tensor().reshape(&[c, t * f])
}

/// Parameters of feature-correlation fusion: `f1, f3: c → c`, `f2: c_d → c`.
#[derive(Debug, Clone)]
pub struct FcfParams {
    pub f1: Pointwise,
    pub f2: Pointwise,
    pub f3: Pointwise,
}

impl FcfParams {
    pub fn new(c_shallow: usize, c_deep: usize, rng: &mut Rng) -> Self {
        Self {
            f1: Pointwise::new(c_shallow, c_shallow, rng),
            f2: Pointwise::new(c_deep, c_shallow, rng),
            f3: Pointwise::new(c_shallow, c_shallow, rng),
        }
    }
}

impl Module for FcfParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        self.f1.visit(&join(prefix, "f1"), f);
        self.f2.visit(&join(prefix, "f2"), f);
        self.f3.visit(&join(prefix, "f3"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        self.f1.visit_mut(&join(prefix, "f1"), f);
        self.f2.visit_mut(&join(prefix, "f2"), f);
        self.f3.visit_mut(&join(prefix, "f3"), f);
    }
}

fn aligned(xs: &FeatureMap, xd: &FeatureMap) -> Result<FeatureMap> {
    bilinear_resize(xd, xs.time(), xs.freq())
}

/// The `c × c` channel affinity `W` (rows sum to one).
pub fn fcf_weights(xs: &FeatureMap, xd: &FeatureMap, p: &FcfParams) -> Result<Tensor> {
    let (_, t, f) = xs.dims();
    let a = p.f1.apply(&flat(xs)?)?;
    let b = p.f2.apply(&flat(&aligned(xs, xd)?)?)?;
    a.matmul(&b.transpose(0, 1)?)?
        .scale(1.0 / ((t * f) as f64).sqrt())
        .softmax(1)
}

/// Feature-correlation fusion, `[2c, t, f]`.
pub fn fcf(xs: &FeatureMap, xd: &FeatureMap, p: &FcfParams) -> Result<FeatureMap> {
    let (c, t, f) = xs.dims();
    let xs_flat = flat(xs)?;
    let a = p.f1.apply(&xs_flat)?;
    let b = p.f2.apply(&flat(&aligned(xs, xd)?)?)?;
    let w = a
        .matmul(&b.transpose(0, 1)?)?
        .scale(1.0 / ((t * f) as f64).sqrt())
        .softmax(1)?;
    let xw = w.matmul(&p.f3.apply(&xs_flat)?)?.add(&b)?.reshape(&[c, t, f])?;
    FeatureMap::new(Tensor::concat(&[&xw, xs.tensor()], 0)?)
}

/// Channel concatenation of the shallow map and the resampled deep map.
pub fn fuse_concat(xs: &FeatureMap, xd: &FeatureMap) -> Result<FeatureMap> {
    FeatureMap::new(Tensor::concat(&[xs.tensor(), aligned(xs, xd)?.tensor()], 0)?)
}

/// Element-wise sum; the deep map must already have the shallow channel count.
pub fn fuse_add(xs: &FeatureMap, xd: &FeatureMap) -> Result<FeatureMap> {
    FeatureMap::new(xs.tensor().add(aligned(xs, xd)?.tensor())?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionKind {
    Fcf,
    Concat,
    Add,
}

impl std::str::FromStr for FusionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fcf" => Ok(Self::Fcf),
            "concat" => Ok(Self::Concat),
            "add" => Ok(Self::Add),
            _ => Err(Error::Config(format!("unknown fusion '{s}' (fcf, concat, add)"))),
        }
    }
}

impl std::fmt::Display for FusionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Fcf => "fcf",
            Self::Concat => "concat",
            Self::Add => "add",
        })
    }
}

/// A fusion strategy with whatever parameters it needs.
#[derive(Debug, Clone)]
pub enum Fusion {
    Fcf(FcfParams),
    Concat,
    /// The projection maps the deep channels onto the shallow ones.
    Add(Pointwise),
}

impl Fusion {
    pub fn new(kind: FusionKind, c_shallow: usize, c_deep: usize, rng: &mut Rng) -> Self {
        match kind {
            FusionKind::Fcf => Self::Fcf(FcfParams::new(c_shallow, c_deep, rng)),
            FusionKind::Concat => Self::Concat,
            FusionKind::Add => Self::Add(Pointwise::new(c_deep, c_shallow, rng)),
        }
    }

    pub fn out_channels(kind: FusionKind, c_shallow: usize, c_deep: usize) -> usize {
        match kind {
            FusionKind::Fcf => 2 * c_shallow,
            FusionKind::Concat => c_shallow + c_deep,
            FusionKind::Add => c_shallow,
        }
    }

    pub fn forward(&self, xs: &FeatureMap, xd: &FeatureMap) -> Result<FeatureMap> {
        match self {
            Self::Fcf(p) => fcf(xs, xd, p),
            Self::Concat => fuse_concat(xs, xd),
            Self::Add(proj) => {
                let (_, t, f) = xd.dims();
                let projected = proj.apply(&flat(xd)?)?.reshape(&[xs.channels(), t, f])?;
                fuse_add(xs, &FeatureMap::new(projected)?)
            }
        }
    }
}

impl Module for Fusion {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        match self {
            Self::Fcf(p) => p.visit(prefix, f),
            Self::Concat => {}
            Self::Add(p) => p.visit(&join(prefix, "proj"), f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        match self {
            Self::Fcf(p) => p.visit_mut(prefix, f),
            Self::Concat => {}
            Self::Add(p) => p.visit_mut(&join(prefix, "proj"), f),
        }
    }
}
