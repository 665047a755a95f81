//! Pre-norm Transformer encoder and decoder.

use crate::backbone::FeatureMap;
use crate::error::{Error, Result};
use crate::nn::{join, ForwardCtx, LayerNorm, Linear, Module, ParamKind};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub dropout: f64,
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_ff == 0 || !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("d_ff must be positive and dropout in [0, 1)".into()));
        }
        Ok(())
    }
}

/// `PE[p, 2i] = sin(p / 10000^(2i/d))`, `PE[p, 2i+1] = cos(p / 10000^(2i/d))`.
pub fn positional_encoding(len: usize, d_model: usize) -> Tensor {
    let mut pe = vec![0.0; len * d_model];
    for p in 0..len {
        for i in (0..d_model).step_by(2) {
            let angle = p as f64 / 10000f64.powf(i as f64 / d_model as f64);
            pe[p * d_model + i] = angle.sin();
            if i + 1 < d_model {
                pe[p * d_model + i + 1] = angle.cos();
            }
        }
    }
    Tensor::new(pe, &[len, d_model]).expect("non-empty")
}

/// Additive mask: `0` on and below the diagonal, `−∞` above.
pub fn causal_mask(len: usize) -> Tensor {
    let data = (0..len * len)
        .map(|k| if k % len > k / len { f64::NEG_INFINITY } else { 0.0 })
        .collect();
    Tensor::new(data, &[len, len]).expect("non-empty")
}

/// `softmax(q·kᵀ/sqrt(d_k) + mask) · v` for `[.., tq, d_k]` inputs, 2-D or
/// batched over a leading head axis. A row with every key masked is a
/// contract violation rather than a silent NaN.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    attention_weights(q, k, mask)?.matmul(v)
}

pub fn attention_weights(q: &Tensor, k: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    let nd = q.ndim();
    if nd < 2 || k.ndim() != nd || q.shape()[nd - 1] != k.shape()[nd - 1] {
        return Err(Error::Dimension {
            op: "attention",
            lhs: q.shape().to_vec(),
            rhs: k.shape().to_vec(),
        });
    }
    let dk = q.shape()[nd - 1] as f64;
    let mut scores = q.matmul(&k.transpose(nd - 2, nd - 1)?)?.scale(1.0 / dk.sqrt());
    if let Some(m) = mask {
        let tk = k.shape()[nd - 2];
        if m.data().chunks(tk).any(|row| row.iter().all(|&v| v == f64::NEG_INFINITY)) {
            return Err(Error::Contract("attention mask hides every key of some query".into()));
        }
        scores = scores.add(m)?;
    }
    scores.softmax(nd - 1)
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub n_heads: usize,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
}

impl MultiHeadAttention {
    pub fn new(d_model: usize, n_heads: usize, rng: &mut Rng) -> Self {
        Self {
            n_heads,
            wq: Linear::new(d_model, d_model, rng),
            wk: Linear::new(d_model, d_model, rng),
            wv: Linear::new(d_model, d_model, rng),
            wo: Linear::new(d_model, d_model, rng),
        }
    }

    /// `[t, d] → [h, t, d/h]`
    fn split(&self, x: &Tensor) -> Result<Tensor> {
        let (t, d) = (x.shape()[0], x.shape()[1]);
        x.reshape(&[t, self.n_heads, d / self.n_heads])?.permute(&[1, 0, 2])
    }

    pub fn forward(&self, query: &Tensor, memory: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let q = self.split(&self.wq.forward(query)?)?;
        let k = self.split(&self.wk.forward(memory)?)?;
        let v = self.split(&self.wv.forward(memory)?)?;
        let heads = attention(&q, &k, &v, mask)?;
        let (t, d) = (query.shape()[0], query.shape()[1]);
        self.wo.forward(&heads.permute(&[1, 0, 2])?.reshape(&[t, d])?)
    }
}

impl Module for MultiHeadAttention {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        self.wq.visit(&join(prefix, "wq"), f);
        self.wk.visit(&join(prefix, "wk"), f);
        self.wv.visit(&join(prefix, "wv"), f);
        self.wo.visit(&join(prefix, "wo"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        self.wq.visit_mut(&join(prefix, "wq"), f);
        self.wk.visit_mut(&join(prefix, "wk"), f);
        self.wv.visit_mut(&join(prefix, "wv"), f);
        self.wo.visit_mut(&join(prefix, "wo"), f);
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub w1: Linear,
    pub w2: Linear,
}

impl FeedForward {
    pub fn new(d_model: usize, d_ff: usize, rng: &mut Rng) -> Self {
        Self {
            w1: Linear::new(d_model, d_ff, rng),
            w2: Linear::new(d_ff, d_model, rng),
        }
    }

    pub fn forward(&self, x: &Tensor, ctx: &mut ForwardCtx, dropout: f64) -> Result<Tensor> {
        let h = ctx.dropout(&self.w1.forward(x)?.relu(), dropout)?;
        self.w2.forward(&h)
    }
}

impl Module for FeedForward {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        self.w1.visit(&join(prefix, "w1"), f);
        self.w2.visit(&join(prefix, "w2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        self.w1.visit_mut(&join(prefix, "w1"), f);
        self.w2.visit_mut(&join(prefix, "w2"), f);
    }
}

#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ff: FeedForward,
}

impl EncoderLayer {
    pub fn new(cfg: &TransformerConfig, rng: &mut Rng) -> Self {
        Self {
            norm1: LayerNorm::new(cfg.d_model),
            attn: MultiHeadAttention::new(cfg.d_model, cfg.n_heads, rng),
            norm2: LayerNorm::new(cfg.d_model),
            ff: FeedForward::new(cfg.d_model, cfg.d_ff, rng),
        }
    }

    pub fn forward(&self, x: &Tensor, ctx: &mut ForwardCtx, dropout: f64) -> Result<Tensor> {
        let h = self.norm1.forward(x)?;
        let x = x.add(&ctx.dropout(&self.attn.forward(&h, &h, None)?, dropout)?)?;
        let h = self.norm2.forward(&x)?;
        let ff = self.ff.forward(&h, ctx, dropout)?;
        x.add(&ctx.dropout(&ff, dropout)?)
    }
}

impl Module for EncoderLayer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.attn.visit(&join(prefix, "attn"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
        self.ff.visit(&join(prefix, "ff"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
        self.ff.visit_mut(&join(prefix, "ff"), f);
    }
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub norm1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm3: LayerNorm,
    pub ff: FeedForward,
}

impl DecoderLayer {
    pub fn new(cfg: &TransformerConfig, rng: &mut Rng) -> Self {
        Self {
            norm1: LayerNorm::new(cfg.d_model),
            self_attn: MultiHeadAttention::new(cfg.d_model, cfg.n_heads, rng),
            norm2: LayerNorm::new(cfg.d_model),
            cross_attn: MultiHeadAttention::new(cfg.d_model, cfg.n_heads, rng),
            norm3: LayerNorm::new(cfg.d_model),
            ff: FeedForward::new(cfg.d_model, cfg.d_ff, rng),
        }
    }

    pub fn forward(&self, y: &Tensor, memory: &Tensor, ctx: &mut ForwardCtx, dropout: f64) -> Result<Tensor> {
        let mask = causal_mask(y.shape()[0]);
        let h = self.norm1.forward(y)?;
        let y = y.add(&ctx.dropout(&self.self_attn.forward(&h, &h, Some(&mask))?, dropout)?)?;
        let h = self.norm2.forward(&y)?;
        let y = y.add(&ctx.dropout(&self.cross_attn.forward(&h, memory, None)?, dropout)?)?;
        let h = self.norm3.forward(&y)?;
        let ff = self.ff.forward(&h, ctx, dropout)?;
        y.add(&ctx.dropout(&ff, dropout)?)
    }
}

impl Module for DecoderLayer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.self_attn.visit(&join(prefix, "self_attn"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
        self.cross_attn.visit(&join(prefix, "cross_attn"), f);
        self.norm3.visit(&join(prefix, "norm3"), f);
        self.ff.visit(&join(prefix, "ff"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.self_attn.visit_mut(&join(prefix, "self_attn"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
        self.cross_attn.visit_mut(&join(prefix, "cross_attn"), f);
        self.norm3.visit_mut(&join(prefix, "norm3"), f);
        self.ff.visit_mut(&join(prefix, "ff"), f);
    }
}

/// Flattens each time step of a `[C, t, f]` map to `C·f` values and projects
/// it to `d_model`.
#[derive(Debug, Clone)]
pub struct InputProjection {
    pub linear: Linear,
}

impl InputProjection {
    pub fn new(channels: usize, freq: usize, d_model: usize, rng: &mut Rng) -> Self {
        Self {
            linear: Linear::new(channels * freq, d_model, rng),
        }
    }

    pub fn forward(&self, x: &FeatureMap) -> Result<Tensor> {
        let (c, t, f) = x.dims();
        if c * f != self.linear.in_features() {
            return Err(Error::Dimension {
                op: "input_projection",
                lhs: vec![c, t, f],
                rhs: vec![self.linear.in_features()],
            });
        }
        let rows = x.tensor().permute(&[1, 0, 2])?.reshape(&[t, c * f])?;
        self.linear.forward(&rows)
    }
}

impl Module for InputProjection {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        self.linear.visit(&join(prefix, "linear"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        self.linear.visit_mut(&join(prefix, "linear"), f);
    }
}

/// Encoder stack. Positional encodings are added on entry; the final layer
/// norm belongs to the caller.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub layers: Vec<EncoderLayer>,
    pub dropout: f64,
}

impl Encoder {
    pub fn new(cfg: &TransformerConfig, rng: &mut Rng) -> Self {
        Self {
            layers: (0..cfg.n_encoder_layers).map(|_| EncoderLayer::new(cfg, rng)).collect(),
            dropout: cfg.dropout,
        }
    }

    pub fn forward(&self, x: &Tensor, ctx: &mut ForwardCtx) -> Result<Tensor> {
        let (t, d) = (x.shape()[0], x.shape()[1]);
        let mut h = ctx.dropout(&x.add(&positional_encoding(t, d))?, self.dropout)?;
        for layer in &self.layers {
            h = layer.forward(&h, ctx, self.dropout)?;
        }
        Ok(h)
    }
}

impl Module for Encoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

/// Autoregressive decoder: token embedding scaled by `sqrt(d_model)`,
/// positional encoding, layers, final norm and output projection.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub embed: Tensor,
    pub layers: Vec<DecoderLayer>,
    pub norm: LayerNorm,
    pub out: Linear,
    pub dropout: f64,
}

impl Decoder {
    pub fn new(cfg: &TransformerConfig, n_classes: usize, rng: &mut Rng) -> Self {
        let std = (cfg.d_model as f64).powf(-0.5);
        Self {
            embed: Tensor::randn(&[n_classes, cfg.d_model], std, rng).to_param(),
            layers: (0..cfg.n_decoder_layers).map(|_| DecoderLayer::new(cfg, rng)).collect(),
            norm: LayerNorm::new(cfg.d_model),
            out: Linear::new(cfg.d_model, n_classes, rng),
            dropout: cfg.dropout,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.embed.shape()[0]
    }

    /// Logits `[len(tokens), n_classes]` for next-token prediction.
    pub fn forward(&self, tokens: &[usize], memory: &Tensor, ctx: &mut ForwardCtx) -> Result<Tensor> {
        if tokens.is_empty() {
            return Err(Error::Input("decoder needs at least one input token".into()));
        }
        let d = self.embed.shape()[1];
        let x = self.embed.gather_rows(tokens)?.scale((d as f64).sqrt());
        let mut h = ctx.dropout(&x.add(&positional_encoding(tokens.len(), d))?, self.dropout)?;
        for layer in &self.layers {
            h = layer.forward(&h, memory, ctx, self.dropout)?;
        }
        self.out.forward(&self.norm.forward(&h)?)
    }
}

impl Module for Decoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        f(&join(prefix, "embed"), &self.embed, ParamKind::Trainable);
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &i.to_string()), f);
        }
        self.norm.visit(&join(prefix, "norm"), f);
        self.out.visit(&join(prefix, "out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        f(&join(prefix, "embed"), &mut self.embed, ParamKind::Trainable);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &i.to_string()), f);
        }
        self.norm.visit_mut(&join(prefix, "norm"), f);
        self.out.visit_mut(&join(prefix, "out"), f);
    }
}
