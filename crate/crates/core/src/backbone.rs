//! The two convolutional streams.
//!
//! The *deep* stream runs over the low-resolution spectrogram: a strided 3×3
//! stem followed by groups of inverted-residual bottlenecks. The *shallow*
//! stream runs over the high-resolution spectrogram with three strided 3×3
//! convolutions. Both keep padding 1 throughout, so every layer shrinks each
//! axis by `out = floor((n + 2 − 3) / stride) + 1`.

use crate::error::{Error, Result};
use crate::frontend::Spectrogram;
use crate::nn::{join, ConvBn, ForwardCtx, Module, ParamKind};
use crate::rng::Rng;
use crate::tensor::{Conv2dGeometry, Tensor};

/// A `[C, t, f]` activation: channels × time × frequency.
#[derive(Debug, Clone)]
pub struct FeatureMap(Tensor);

impl FeatureMap {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.ndim() != 3 {
            return Err(Error::Dimension {
                op: "feature_map",
                lhs: t.shape().to_vec(),
                rhs: vec![0, 0, 0],
            });
        }
        Ok(Self(t))
    }

    pub fn from_spectrogram(s: &Spectrogram) -> Self {
        Self(s.to_tensor())
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn time(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn freq(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels(), self.time(), self.freq())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Operator {
    Conv3x3,
    Bottleneck,
}

/// One row of a stream table: `repeats` layers of `op` producing `channels`;
/// only the first layer of the row carries `stride`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamRow {
    pub op: Operator,
    pub channels: usize,
    pub repeats: usize,
    pub stride: usize,
}

impl StreamRow {
    pub const fn conv(channels: usize, stride: usize) -> Self {
        Self {
            op: Operator::Conv3x3,
            channels,
            repeats: 1,
            stride,
        }
    }

    pub const fn bottleneck(channels: usize, repeats: usize, stride: usize) -> Self {
        Self {
            op: Operator::Bottleneck,
            channels,
            repeats,
            stride,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamConfig {
    pub deep: Vec<StreamRow>,
    pub shallow: Vec<StreamRow>,
    /// Number of bottleneck groups kept in the deep stream; trailing groups
    /// are dropped.
    pub n_deep_groups: usize,
    pub expansion: usize,
}

impl StreamConfig {
    /// Full-size streams.
    pub fn standard() -> Self {
        Self {
            deep: vec![
                StreamRow::conv(32, 2),
                StreamRow::bottleneck(32, 1, 1),
                StreamRow::bottleneck(32, 1, 1),
                StreamRow::bottleneck(48, 3, 2),
                StreamRow::bottleneck(64, 3, 2),
                StreamRow::bottleneck(128, 2, 1),
                StreamRow::bottleneck(256, 2, 1),
            ],
            shallow: vec![StreamRow::conv(128, 2), StreamRow::conv(256, 2), StreamRow::conv(256, 1)],
            n_deep_groups: 6,
            expansion: 6,
        }
    }

    /// Same topology with far fewer channels, for CPU-sized experiments.
    pub fn tiny() -> Self {
        Self {
            deep: vec![
                StreamRow::conv(8, 2),
                StreamRow::bottleneck(8, 1, 1),
                StreamRow::bottleneck(8, 1, 1),
                StreamRow::bottleneck(12, 3, 2),
                StreamRow::bottleneck(16, 3, 2),
                StreamRow::bottleneck(24, 2, 1),
                StreamRow::bottleneck(32, 2, 1),
            ],
            shallow: vec![StreamRow::conv(16, 2), StreamRow::conv(32, 2), StreamRow::conv(32, 1)],
            n_deep_groups: 6,
            expansion: 6,
        }
    }

    pub fn n_bottleneck_groups(&self) -> usize {
        self.deep.iter().filter(|r| r.op == Operator::Bottleneck).count()
    }

    /// Deep rows after truncation to `n_deep_groups` bottleneck groups.
    pub fn active_deep_rows(&self) -> Vec<StreamRow> {
        let mut groups = 0;
        self.deep
            .iter()
            .copied()
            .filter(|r| {
                if r.op == Operator::Bottleneck {
                    groups += 1;
                    groups <= self.n_deep_groups
                } else {
                    true
                }
            })
            .collect()
    }

    pub fn deep_channels(&self) -> usize {
        self.active_deep_rows().last().map_or(1, |r| r.channels)
    }

    pub fn shallow_channels(&self) -> usize {
        self.shallow.last().map_or(1, |r| r.channels)
    }

    pub fn validate(&self) -> Result<()> {
        let groups = self.n_bottleneck_groups();
        if self.n_deep_groups == 0 || self.n_deep_groups > groups {
            return Err(Error::Config(format!(
                "n_deep_groups must be in 1..={groups}, got {}",
                self.n_deep_groups
            )));
        }
        if self.shallow.iter().any(|r| r.op != Operator::Conv3x3) {
            return Err(Error::Config("shallow stream takes only 3x3 convolutions".into()));
        }
        let all = self.deep.iter().chain(&self.shallow);
        if all.clone().any(|r| r.channels == 0 || r.repeats == 0 || r.stride == 0) || self.expansion == 0 {
            return Err(Error::Config("stream rows need positive channels, repeats and strides".into()));
        }
        Ok(())
    }
}

/// Shape of one 3×3 padding-1 convolution layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub stride: usize,
}

impl ConvSpec {
    pub fn geometry(&self) -> Conv2dGeometry {
        Conv2dGeometry {
            stride: (self.stride, self.stride),
            padding: (1, 1),
            groups: 1,
        }
    }
}

/// Shape of one inverted-residual block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BottleneckSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub expansion: usize,
    pub stride: usize,
}

impl BottleneckSpec {
    pub fn hidden(&self) -> usize {
        self.in_ch * self.expansion
    }

    pub fn has_residual(&self) -> bool {
        self.stride == 1 && self.in_ch == self.out_ch
    }
}

/// 1×1 expand → 3×3 depthwise (strided) → 1×1 linear projection, with a
/// residual connection when the shape is preserved.
#[derive(Debug, Clone)]
pub struct Bottleneck {
    pub spec: BottleneckSpec,
    pub expand: ConvBn,
    pub depthwise: ConvBn,
    pub project: ConvBn,
}

impl Bottleneck {
    pub fn new(spec: BottleneckSpec, rng: &mut Rng) -> Self {
        let h = spec.hidden();
        let pointwise = Conv2dGeometry::default();
        let depthwise = Conv2dGeometry {
            stride: (spec.stride, spec.stride),
            padding: (1, 1),
            groups: h,
        };
        Self {
            spec,
            expand: ConvBn::new(spec.in_ch, h, 1, pointwise, true, rng),
            depthwise: ConvBn::new(h, h, 3, depthwise, true, rng),
            project: ConvBn::new(h, spec.out_ch, 1, pointwise, false, rng),
        }
    }

    pub fn forward(&self, xs: &[Tensor], ctx: &ForwardCtx) -> Result<Vec<Tensor>> {
        let h = self.expand.forward(xs, ctx)?;
        let h = self.depthwise.forward(&h, ctx)?;
        let y = self.project.forward(&h, ctx)?;
        if self.spec.has_residual() {
            y.iter().zip(xs).map(|(y, x)| y.add(x)).collect()
        } else {
            Ok(y)
        }
    }
}

impl Module for Bottleneck {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        self.expand.visit(&join(prefix, "expand"), f);
        self.depthwise.visit(&join(prefix, "depthwise"), f);
        self.project.visit(&join(prefix, "project"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        self.expand.visit_mut(&join(prefix, "expand"), f);
        self.depthwise.visit_mut(&join(prefix, "depthwise"), f);
        self.project.visit_mut(&join(prefix, "project"), f);
    }
}

#[allow(clippy::large_enum_variant)] // a handful per stream
#[derive(Debug, Clone)]
pub enum Layer {
    Conv(ConvBn),
    Block(Bottleneck),
}

impl Layer {
    fn stride(&self) -> usize {
        match self {
            Layer::Conv(c) => c.geom.stride.0,
            Layer::Block(b) => b.spec.stride,
        }
    }

    fn out_channels(&self) -> usize {
        match self {
            Layer::Conv(c) => c.out_channels(),
            Layer::Block(b) => b.spec.out_ch,
        }
    }
}

/// A stack of convolution layers applied to a batch of feature maps.
#[derive(Debug, Clone)]
pub struct Stream {
    pub name: &'static str,
    pub layers: Vec<Layer>,
}

impl Stream {
    fn build(name: &'static str, rows: &[StreamRow], in_ch: usize, expansion: usize, rng: &mut Rng) -> Self {
        let mut layers = Vec::new();
        let mut c = in_ch;
        for row in rows {
            for r in 0..row.repeats {
                let stride = if r == 0 { row.stride } else { 1 };
                layers.push(match row.op {
                    Operator::Conv3x3 => {
                        let spec = ConvSpec {
                            in_ch: c,
                            out_ch: row.channels,
                            stride,
                        };
                        Layer::Conv(ConvBn::new(c, row.channels, 3, spec.geometry(), true, rng))
                    }
                    Operator::Bottleneck => Layer::Block(Bottleneck::new(
                        BottleneckSpec {
                            in_ch: c,
                            out_ch: row.channels,
                            expansion,
                            stride,
                        },
                        rng,
                    )),
                });
                c = row.channels;
            }
        }
        Self { name, layers }
    }

    pub fn deep(cfg: &StreamConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        Ok(Self::build("deep", &cfg.active_deep_rows(), 1, cfg.expansion, rng))
    }

    pub fn shallow(cfg: &StreamConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        Ok(Self::build("shallow", &cfg.shallow, 1, cfg.expansion, rng))
    }

    /// Product of the strides: the shortest input (on either axis) accepted.
    pub fn min_input_len(&self) -> usize {
        self.layers.iter().map(Layer::stride).product()
    }

    /// Output extent along one axis for an input extent `n`.
    pub fn output_extent(&self, n: usize) -> usize {
        self.layers
            .iter()
            .fold(n, |n, l| (n + 2 - 3) / l.stride() + 1)
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map_or(1, Layer::out_channels)
    }

    pub fn forward(&self, xs: &[FeatureMap], ctx: &ForwardCtx) -> Result<Vec<FeatureMap>> {
        let min = self.min_input_len();
        for x in xs {
            if x.time() < min || x.freq() < min {
                return Err(Error::Input(format!(
                    "{} stream needs at least {min} frames and bins, got {}x{}",
                    self.name,
                    x.time(),
                    x.freq()
                )));
            }
        }
        let mut h: Vec<Tensor> = xs.iter().map(|x| x.tensor().clone()).collect();
        for layer in &self.layers {
            h = match layer {
                Layer::Conv(c) => c.forward(&h, ctx)?,
                Layer::Block(b) => b.forward(&h, ctx)?,
            };
        }
        h.into_iter().map(FeatureMap::new).collect()
    }
}

impl Module for Stream {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        for (i, l) in self.layers.iter().enumerate() {
            let p = join(prefix, &i.to_string());
            match l {
                Layer::Conv(c) => c.visit(&p, f),
                Layer::Block(b) => b.visit(&p, f),
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            let p = join(prefix, &i.to_string());
            match l {
                Layer::Conv(c) => c.visit_mut(&p, f),
                Layer::Block(b) => b.visit_mut(&p, f),
            }
        }
    }
}
