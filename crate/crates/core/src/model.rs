//! The full recogniser: two streams → fusion → Transformer, trained with
//! the joint CTC/attention objective.

use crate::backbone::{FeatureMap, Stream, StreamConfig, StreamRow};
use crate::decode::{beam_decode, greedy_decode, Hypothesis};
use crate::error::{Error, Result};
use crate::frontend::{downsample_time, Spectrogram};
use crate::fusion::{bilinear_resize, Fusion, FusionKind};
use crate::loss::{attention_ce, ctc_loss, joint_loss, LossBreakdown, Vocab};
use crate::nn::{join, ForwardCtx, LayerNorm, Linear, Module, ParamKind};
use crate::rng::Rng;
use crate::tensor::{no_grad, Tensor};
use crate::transformer::{Decoder, Encoder, InputProjection, TransformerConfig};

/// Which streams feed the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamMode {
    Both,
    /// The shallow map goes straight to the encoder.
    ShallowOnly,
    /// The deep map, resampled onto the shallow grid, goes to the encoder.
    DeepOnly,
}

impl std::str::FromStr for StreamMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(Self::Both),
            "shallow" => Ok(Self::ShallowOnly),
            "deep" => Ok(Self::DeepOnly),
            _ => Err(Error::Config(format!("unknown stream mode '{s}' (both, shallow, deep)"))),
        }
    }
}

impl std::fmt::Display for StreamMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Both => "both",
            Self::ShallowOnly => "shallow",
            Self::DeepOnly => "deep",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Feature dimension `D` of the input spectrogram.
    pub feat_dim: usize,
    /// Number of real tokens; ids `1..=n_tokens`.
    pub n_tokens: usize,
    pub resolution_ratio: usize,
    pub streams: StreamConfig,
    pub stream_mode: StreamMode,
    pub fusion: FusionKind,
    pub transformer: TransformerConfig,
    pub ctc_weight: f64,
    pub label_smoothing: f64,
}

/// Output extent of a run of padding-1 3×3 layers (only the first layer of
/// each row strides).
pub fn rows_extent(rows: &[StreamRow], n: usize) -> usize {
    rows.iter().fold(n, |n, r| (n - 1) / r.stride + 1)
}

impl ModelConfig {
    /// Full-size model: standard streams, d_m 256, 4/2 layers, 4 heads.
    pub fn standard(feat_dim: usize, n_tokens: usize) -> Self {
        Self {
            feat_dim,
            n_tokens,
            resolution_ratio: 4,
            streams: StreamConfig::standard(),
            stream_mode: StreamMode::Both,
            fusion: FusionKind::Fcf,
            transformer: TransformerConfig {
                d_model: 256,
                n_heads: 4,
                d_ff: 1024,
                n_encoder_layers: 4,
                n_decoder_layers: 2,
                dropout: 0.1,
            },
            ctc_weight: 0.3,
            label_smoothing: 0.1,
        }
    }

    /// Narrow streams and a small Transformer; trains in minutes on one core.
    pub fn tiny(feat_dim: usize, n_tokens: usize) -> Self {
        Self {
            streams: StreamConfig::tiny(),
            transformer: TransformerConfig {
                d_model: 64,
                n_heads: 4,
                d_ff: 256,
                n_encoder_layers: 2,
                n_decoder_layers: 1,
                dropout: 0.1,
            },
            ..Self::standard(feat_dim, n_tokens)
        }
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::with_tokens(self.n_tokens)
    }

    pub fn validate(&self) -> Result<()> {
        self.streams.validate()?;
        self.transformer.validate()?;
        if self.n_tokens == 0 || self.resolution_ratio == 0 {
            return Err(Error::Config("n_tokens and resolution_ratio must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.ctc_weight) || !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config("ctc_weight must be in [0, 1] and label_smoothing in [0, 1)".into()));
        }
        let min = self.min_freq();
        if self.feat_dim < min {
            return Err(Error::Config(format!("feat_dim {} below the stream minimum {min}", self.feat_dim)));
        }
        Ok(())
    }

    fn stride_product(rows: &[StreamRow]) -> usize {
        rows.iter().map(|r| r.stride).product()
    }

    fn min_freq(&self) -> usize {
        Self::stride_product(&self.streams.shallow).max(Self::stride_product(&self.streams.active_deep_rows()))
    }

    /// Shortest high-resolution input the configured streams accept.
    pub fn min_frames(&self) -> usize {
        let shallow = Self::stride_product(&self.streams.shallow);
        let deep = Self::stride_product(&self.streams.active_deep_rows());
        match self.stream_mode {
            StreamMode::ShallowOnly => shallow,
            _ => shallow.max((deep - 1) * self.resolution_ratio + 1),
        }
    }

    /// `(t, f)` grid of the encoder input for `frames` high-resolution frames.
    pub fn grid(&self, frames: usize) -> (usize, usize) {
        (
            rows_extent(&self.streams.shallow, frames),
            rows_extent(&self.streams.shallow, self.feat_dim),
        )
    }

    /// Channel count of the map handed to the input projection.
    pub fn fused_channels(&self) -> usize {
        let (cs, cd) = (self.streams.shallow_channels(), self.streams.deep_channels());
        match self.stream_mode {
            StreamMode::Both => Fusion::out_channels(self.fusion, cs, cd),
            StreamMode::ShallowOnly => cs,
            StreamMode::DeepOnly => cd,
        }
    }
}

/// One training or evaluation item.
#[derive(Debug, Clone)]
pub struct Example {
    pub id: String,
    pub features: Spectrogram,
    pub tokens: Vec<usize>,
}

/// Stream outputs for a batch, present for the active streams only.
#[derive(Debug, Clone, Default)]
pub struct StreamOutputs {
    pub shallow: Option<Vec<FeatureMap>>,
    pub deep: Option<Vec<FeatureMap>>,
}

#[derive(Debug, Clone)]
pub struct Tstrm {
    pub cfg: ModelConfig,
    pub shallow: Option<Stream>,
    pub deep: Option<Stream>,
    pub fusion: Option<Fusion>,
    pub proj: InputProjection,
    pub encoder: Encoder,
    pub enc_norm: LayerNorm,
    pub ctc_head: Linear,
    pub decoder: Decoder,
}

impl Tstrm {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(seed);
        let uses_shallow = cfg.stream_mode != StreamMode::DeepOnly;
        let uses_deep = cfg.stream_mode != StreamMode::ShallowOnly;
        let shallow = uses_shallow.then(|| Stream::shallow(&cfg.streams, &mut rng)).transpose()?;
        let deep = uses_deep.then(|| Stream::deep(&cfg.streams, &mut rng)).transpose()?;
        let fusion = (cfg.stream_mode == StreamMode::Both).then(|| {
            Fusion::new(
                cfg.fusion,
                cfg.streams.shallow_channels(),
                cfg.streams.deep_channels(),
                &mut rng,
            )
        });
        let (_, f) = cfg.grid(cfg.min_frames());
        let t = &cfg.transformer;
        let vocab = cfg.vocab();
        Ok(Self {
            proj: InputProjection::new(cfg.fused_channels(), f, t.d_model, &mut rng),
            encoder: Encoder::new(t, &mut rng),
            enc_norm: LayerNorm::new(t.d_model),
            ctc_head: Linear::new(t.d_model, vocab.ctc_classes(), &mut rng),
            decoder: Decoder::new(t, vocab.decoder_classes(), &mut rng),
            shallow,
            deep,
            fusion,
            cfg,
        })
    }

    fn check_input(&self, s: &Spectrogram) -> Result<()> {
        if s.dims() != self.cfg.feat_dim {
            return Err(Error::Config(format!(
                "features have {} dims, model expects {}",
                s.dims(),
                self.cfg.feat_dim
            )));
        }
        let min = self.cfg.min_frames();
        if s.n_frames() < min {
            return Err(Error::Input(format!(
                "utterance of {} frames is shorter than the minimum {min}",
                s.n_frames()
            )));
        }
        Ok(())
    }

    pub fn streams(&self, feats: &[&Spectrogram], ctx: &ForwardCtx) -> Result<StreamOutputs> {
        for s in feats {
            self.check_input(s)?;
        }
        let shallow = match &self.shallow {
            Some(stream) => {
                let xs: Vec<FeatureMap> = feats.iter().map(|s| FeatureMap::from_spectrogram(s)).collect();
                Some(stream.forward(&xs, ctx)?)
            }
            None => None,
        };
        let deep = match &self.deep {
            Some(stream) => {
                let xs = feats
                    .iter()
                    .map(|s| Ok(FeatureMap::from_spectrogram(&downsample_time(s, self.cfg.resolution_ratio)?)))
                    .collect::<Result<Vec<_>>>()?;
                Some(stream.forward(&xs, ctx)?)
            }
            None => None,
        };
        Ok(StreamOutputs { shallow, deep })
    }

    /// Encoder memory `[t, d_m]` per utterance (after the final layer norm).
    pub fn encode(&self, feats: &[&Spectrogram], ctx: &mut ForwardCtx) -> Result<Vec<Tensor>> {
        let out = self.streams(feats, ctx)?;
        let fused: Vec<FeatureMap> = match (out.shallow, out.deep) {
            (Some(s), Some(d)) => {
                let fusion = self.fusion.as_ref().expect("both streams imply fusion");
                s.iter().zip(&d).map(|(s, d)| fusion.forward(s, d)).collect::<Result<_>>()?
            }
            (Some(s), None) => s,
            (None, Some(d)) => feats
                .iter()
                .zip(&d)
                .map(|(spec, d)| {
                    let (t, f) = self.cfg.grid(spec.n_frames());
                    bilinear_resize(d, t, f)
                })
                .collect::<Result<_>>()?,
            (None, None) => unreachable!("at least one stream is active"),
        };
        fused
            .iter()
            .map(|x| {
                let h = self.encoder.forward(&self.proj.forward(x)?, ctx)?;
                self.enc_norm.forward(&h)
            })
            .collect()
    }

    /// CTC log-probabilities `[t, |V|]` from encoder memory.
    pub fn ctc_log_probs(&self, memory: &Tensor) -> Result<Tensor> {
        self.ctc_head.forward(memory)?.log_softmax(1)
    }

    /// Mean joint loss over a batch, with its components.
    pub fn loss(&self, batch: &[Example], ctx: &mut ForwardCtx) -> Result<(Tensor, LossBreakdown)> {
        if batch.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let vocab = self.cfg.vocab();
        if let Some(bad) = batch.iter().find(|ex| ex.tokens.iter().any(|&k| !vocab.is_token(k))) {
            return Err(Error::Config(format!(
                "utterance {} has a token outside 1..={}",
                bad.id, self.cfg.n_tokens
            )));
        }
        let feats: Vec<&Spectrogram> = batch.iter().map(|ex| &ex.features).collect();
        let memories = self.encode(&feats, ctx)?;
        let mut ctc_terms = Vec::with_capacity(batch.len());
        let mut att_terms = Vec::with_capacity(batch.len());
        for (ex, memory) in batch.iter().zip(&memories) {
            ctc_terms.push(ctc_loss(&self.ctc_log_probs(memory)?, &ex.tokens, Vocab::BLANK).map_err(|e| match e {
                Error::Infeasible { .. } => Error::Input(format!("utterance {}: {e}", ex.id)),
                other => other,
            })?);
            let mut input = vec![vocab.sos()];
            input.extend(&ex.tokens);
            let mut target = ex.tokens.clone();
            target.push(vocab.eos());
            let logits = self.decoder.forward(&input, memory, ctx)?;
            att_terms.push(attention_ce(&logits, &target, self.cfg.label_smoothing)?);
        }
        let mean = |terms: Vec<Tensor>| -> Result<Tensor> {
            let refs: Vec<&Tensor> = terms.iter().collect();
            Ok(Tensor::concat(&refs, 0)?.mean())
        };
        let ctc = mean(ctc_terms)?;
        let att = mean(att_terms)?;
        let joint = joint_loss(&ctc, &att, self.cfg.ctc_weight)?;
        let breakdown = LossBreakdown::new(ctc.item(), att.item(), self.cfg.ctc_weight)?;
        Ok((joint, breakdown))
    }

    fn scorer<'a>(&'a self, memory: &'a Tensor) -> impl Fn(&[usize]) -> Result<Vec<f64>> + 'a {
        let sos = self.cfg.vocab().sos();
        move |prefix: &[usize]| {
            let mut input = vec![sos];
            input.extend_from_slice(prefix);
            let logits = self.decoder.forward(&input, memory, &mut ForwardCtx::eval())?;
            let last = logits.slice(0, input.len() - 1, input.len())?;
            Ok(last.log_softmax(1)?.to_vec())
        }
    }

    fn eval_memory(&self, features: &Spectrogram) -> Result<Tensor> {
        no_grad(|| Ok(self.encode(&[features], &mut ForwardCtx::eval())?.remove(0)))
    }

    pub fn greedy(&self, features: &Spectrogram, max_len: usize) -> Result<Hypothesis> {
        let memory = self.eval_memory(features)?;
        no_grad(|| greedy_decode(&self.scorer(&memory), self.cfg.vocab().eos(), max_len))
    }

    pub fn beam(&self, features: &Spectrogram, beam: usize, max_len: usize) -> Result<Vec<Hypothesis>> {
        let memory = self.eval_memory(features)?;
        no_grad(|| beam_decode(&self.scorer(&memory), self.cfg.vocab().eos(), beam, max_len))
    }

    /// Utterance embedding: the chosen stream's output averaged over time and
    /// frequency, one value per channel.
    pub fn embedding(&self, features: &Spectrogram, deep: bool) -> Result<Vec<f64>> {
        let out = no_grad(|| self.streams(&[features], &ForwardCtx::eval()))?;
        let maps = if deep { out.deep } else { out.shallow };
        let map = maps
            .ok_or_else(|| {
                Error::Config(format!(
                    "stream mode '{}' has no {} stream",
                    self.cfg.stream_mode,
                    if deep { "deep" } else { "shallow" }
                ))
            })?
            .remove(0);
        let (c, t, f) = map.dims();
        let n = (t * f) as f64;
        Ok(map.tensor().data().chunks(t * f).take(c).map(|ch| ch.iter().sum::<f64>() / n).collect())
    }
}

impl Module for Tstrm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        if let Some(s) = &self.shallow {
            s.visit(&join(prefix, "shallow"), f);
        }
        if let Some(d) = &self.deep {
            d.visit(&join(prefix, "deep"), f);
        }
        if let Some(fu) = &self.fusion {
            fu.visit(&join(prefix, "fusion"), f);
        }
        self.proj.visit(&join(prefix, "proj"), f);
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.enc_norm.visit(&join(prefix, "enc_norm"), f);
        self.ctc_head.visit(&join(prefix, "ctc_head"), f);
        self.decoder.visit(&join(prefix, "decoder"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        if let Some(s) = &mut self.shallow {
            s.visit_mut(&join(prefix, "shallow"), f);
        }
        if let Some(d) = &mut self.deep {
            d.visit_mut(&join(prefix, "deep"), f);
        }
        if let Some(fu) = &mut self.fusion {
            fu.visit_mut(&join(prefix, "fusion"), f);
        }
        self.proj.visit_mut(&join(prefix, "proj"), f);
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.enc_norm.visit_mut(&join(prefix, "enc_norm"), f);
        self.ctc_head.visit_mut(&join(prefix, "ctc_head"), f);
        self.decoder.visit_mut(&join(prefix, "decoder"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::Resolution;

    fn spec(t: usize, d: usize, rng: &mut Rng) -> Spectrogram {
        Spectrogram::new((0..t * d).map(|_| rng.normal()).collect(), t, d, 10.0, Resolution::High).unwrap()
    }

    #[test]
    fn tiny_model_runs_all_modes() {
        let mut rng = Rng::new(0);
        let batch: Vec<Example> = [40, 52]
            .iter()
            .enumerate()
            .map(|(i, &t)| Example {
                id: format!("u{i}"),
                features: spec(t, 40, &mut rng),
                tokens: vec![1, 2, 3],
            })
            .collect();
        for mode in [StreamMode::Both, StreamMode::ShallowOnly, StreamMode::DeepOnly] {
            let mut cfg = ModelConfig::tiny(40, 5);
            cfg.stream_mode = mode;
            let model = Tstrm::new(cfg, 1).unwrap();
            let (loss, parts) = model.loss(&batch, &mut ForwardCtx::train(0)).unwrap();
            assert!(loss.item().is_finite());
            assert!((parts.joint - loss.item()).abs() < 1e-9);
            loss.backward().unwrap();
            let h = model.greedy(&batch[0].features, 6).unwrap();
            assert!(h.tokens.len() <= 6);
        }
    }

    #[test]
    fn minimum_length() {
        let cfg = ModelConfig::tiny(40, 5);
        assert_eq!(cfg.min_frames(), 29);
        let model = Tstrm::new(cfg, 0).unwrap();
        let mut rng = Rng::new(1);
        assert!(matches!(
            model.encode(&[&spec(28, 40, &mut rng)], &mut ForwardCtx::eval()),
            Err(Error::Input(_))
        ));
        assert!(model.encode(&[&spec(29, 40, &mut rng)], &mut ForwardCtx::eval()).is_ok());
    }
}
