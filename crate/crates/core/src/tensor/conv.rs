use super::ops::{gemm, transpose2};
use super::{BackwardCtx, Tensor};
use crate::error::{Error, Result};

/// Stride, zero padding and channel grouping of a 2-D convolution. The kernel
/// extent comes from the weight shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub groups: usize,
}

impl Default for Conv2dGeometry {
    fn default() -> Self {
        Self {
            stride: (1, 1),
            padding: (0, 0),
            groups: 1,
        }
    }
}

impl Conv2dGeometry {
    /// `floor((n + 2·pad − kernel) / stride) + 1`
    pub fn out_extent(n: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
        (n + 2 * pad).checked_sub(kernel).map(|v| v / stride + 1)
    }
}

#[derive(Clone, Copy)]
struct Dims {
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    ho: usize,
    wo: usize,
}

/// Patch matrix `[cg·kh·kw, ho·wo]` for channels `c0..c0+cg`.
fn im2col(x: &[f64], c0: usize, cg: usize, d: Dims) -> Vec<f64> {
    let p = d.ho * d.wo;
    let mut col = vec![0.0; cg * d.kh * d.kw * p];
    for c in 0..cg {
        let plane = &x[(c0 + c) * d.h * d.w..(c0 + c + 1) * d.h * d.w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = &mut col[((c * d.kh + ki) * d.kw + kj) * p..][..p];
                for oh in 0..d.ho {
                    let ih = (oh * d.sh + ki) as isize - d.ph as isize;
                    if ih < 0 || ih >= d.h as isize {
                        continue;
                    }
                    let src = &plane[ih as usize * d.w..(ih as usize + 1) * d.w];
                    for ow in 0..d.wo {
                        let iw = (ow * d.sw + kj) as isize - d.pw as isize;
                        if iw >= 0 && iw < d.w as isize {
                            row[oh * d.wo + ow] = src[iw as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im(col: &[f64], dx: &mut [f64], c0: usize, cg: usize, d: Dims) {
    let p = d.ho * d.wo;
    for c in 0..cg {
        let plane = &mut dx[(c0 + c) * d.h * d.w..(c0 + c + 1) * d.h * d.w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = &col[((c * d.kh + ki) * d.kw + kj) * p..][..p];
                for oh in 0..d.ho {
                    let ih = (oh * d.sh + ki) as isize - d.ph as isize;
                    if ih < 0 || ih >= d.h as isize {
                        continue;
                    }
                    for ow in 0..d.wo {
                        let iw = (ow * d.sw + kj) as isize - d.pw as isize;
                        if iw >= 0 && iw < d.w as isize {
                            plane[ih as usize * d.w + iw as usize] += row[oh * d.wo + ow];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `x: [C, H, W]` with `weight: [O, C/groups, kh, kw]`,
/// giving `[O, H', W']`. No bias.
pub fn conv2d(x: &Tensor, weight: &Tensor, geom: Conv2dGeometry) -> Result<Tensor> {
    let (xs, ws) = (x.shape(), weight.shape());
    let g = geom.groups;
    let shape_ok = xs.len() == 3
        && ws.len() == 4
        && g >= 1
        && xs[0] % g == 0
        && ws[0] % g == 0
        && ws[1] * g == xs[0]
        && geom.stride.0 >= 1
        && geom.stride.1 >= 1;
    if !shape_ok {
        return Err(Error::Dimension {
            op: "conv2d",
            lhs: xs.to_vec(),
            rhs: ws.to_vec(),
        });
    }
    let (c, h, w) = (xs[0], xs[1], xs[2]);
    let (o, kh, kw) = (ws[0], ws[2], ws[3]);
    let (sh, sw) = geom.stride;
    let (ph, pw) = geom.padding;
    let (Some(ho), Some(wo)) = (
        Conv2dGeometry::out_extent(h, kh, sh, ph),
        Conv2dGeometry::out_extent(w, kw, sw, pw),
    ) else {
        return Err(Error::Input(format!(
            "conv2d: kernel {kh}x{kw} larger than padded input {h}x{w}"
        )));
    };
    let d = Dims {
        h,
        w,
        kh,
        kw,
        sh,
        sw,
        ph,
        pw,
        ho,
        wo,
    };
    let (cg, og, p, k) = (c / g, o / g, ho * wo, (c / g) * kh * kw);
    let mut out = Vec::with_capacity(o * p);
    for gi in 0..g {
        let wg = &weight.data()[gi * og * k..(gi + 1) * og * k];
        let col = im2col(x.data(), gi * cg, cg, d);
        out.extend(gemm(wg, &col, og, k, p));
    }
    Ok(Tensor::from_op(
        "conv2d",
        vec![o, ho, wo],
        out,
        vec![x.clone(), weight.clone()],
        Box::new(move |ctx: &BackwardCtx<'_>| {
            let (xd, wd) = (ctx.parents[0].data(), ctx.parents[1].data());
            let mut gx = ctx.needs[0].then(|| vec![0.0; c * h * w]);
            let mut gw = ctx.needs[1].then(|| Vec::with_capacity(o * k));
            for gi in 0..g {
                let gout = &ctx.grad_out[gi * og * p..(gi + 1) * og * p];
                let col = im2col(xd, gi * cg, cg, d);
                if let Some(gw) = gw.as_mut() {
                    gw.extend(gemm(gout, &transpose2(&col, k, p), og, p, k));
                }
                if let Some(gx) = gx.as_mut() {
                    let wg = &wd[gi * og * k..(gi + 1) * og * k];
                    let dcol = gemm(&transpose2(wg, og, k), gout, k, og, p);
                    col2im(&dcol, gx, gi * cg, cg, d);
                }
            }
            vec![gx, gw]
        }),
    ))
}
