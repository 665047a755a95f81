//! Run configuration: line-oriented `key = value` with dotted keys and `#`
//! comments. Paths are resolved against the directory of the config file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::synth::SynthSpec;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// Raw `key = value` pairs in file order, with their line numbers.
#[derive(Debug, Clone, Default)]
pub struct KeyValues {
    entries: BTreeMap<String, (String, usize)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected 'key = value'", n + 1)));
            };
            let key = k.trim();
            if key.is_empty() || key.contains(char::is_whitespace) {
                return Err(Error::Config(format!("line {}: bad key '{key}'", n + 1)));
            }
            if entries.insert(key.to_string(), (v.trim().to_string(), n + 1)).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key '{key}'", n + 1)));
            }
        }
        Ok(Self { entries })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(v, _)| v.as_str())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    fn parse_into<T: FromStr>(&self, key: &str, slot: &mut T) -> Result<()> {
        if let Some((v, line)) = self.entries.get(key) {
            *slot = v
                .parse()
                .map_err(|_| Error::Config(format!("line {line}: cannot parse '{v}' for {key}")))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Multiplier of the warmup schedule `d_m^-0.5 · min(s^-0.5, s·w^-1.5)`.
    pub lr_factor: f64,
    pub warmup_steps: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
    pub max_decode_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            lr_factor: 0.3,
            warmup_steps: 300,
            clip_norm: 5.0,
            seed: 1,
            max_decode_len: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum Preset {
    #[default]
    Tiny,
    Standard,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Self::Tiny),
            "standard" => Ok(Self::Standard),
            _ => Err(Error::Config(format!("unknown preset '{s}' (tiny, standard)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train_manifest: Option<PathBuf>,
    pub dev_manifest: Option<PathBuf>,
    pub preset: Preset,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthSpec,
}

const KEYS: &[&str] = &[
    "data.train",
    "data.dev",
    "model.preset",
    "model.feat_dim",
    "model.n_tokens",
    "model.resolution_ratio",
    "model.streams",
    "model.fusion",
    "model.n_deep_groups",
    "model.expansion",
    "model.d_m",
    "model.n_heads",
    "model.d_ff",
    "model.enc_layers",
    "model.dec_layers",
    "model.dropout",
    "model.ctc_weight",
    "model.label_smoothing",
    "train.epochs",
    "train.batch_size",
    "train.lr_factor",
    "train.warmup_steps",
    "train.clip_norm",
    "train.seed",
    "train.max_decode_len",
    "synth.n_speakers",
    "synth.n_tokens",
    "synth.utts_per_speaker",
    "synth.min_len",
    "synth.max_len",
    "synth.min_frames_per_token",
    "synth.max_frames_per_token",
    "synth.pad_frames",
    "synth.n_mels",
    "synth.bump_height",
    "synth.bump_width",
    "synth.tilt_scale",
    "synth.noise_sigma",
    "synth.dev_per_speaker",
    "synth.seed",
];

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthSpec::default();
        Self {
            train_manifest: None,
            dev_manifest: None,
            preset: Preset::Tiny,
            model: ModelConfig::tiny(synth.n_mels, synth.n_tokens),
            train: TrainConfig::default(),
            synth,
        }
    }
}

impl RunConfig {
    /// Builds a configuration from parsed pairs; relative paths are joined
    /// onto `base`. Unknown keys are rejected.
    pub fn from_pairs(kv: &KeyValues, base: &Path) -> Result<Self> {
        if let Some(k) = kv.keys().find(|k| !KEYS.contains(k)) {
            return Err(Error::Config(format!("unknown key '{k}'")));
        }
        let mut cfg = Self::default();
        kv.parse_into("model.preset", &mut cfg.preset)?;

        let s = &mut cfg.synth;
        kv.parse_into("synth.n_speakers", &mut s.n_speakers)?;
        kv.parse_into("synth.n_tokens", &mut s.n_tokens)?;
        kv.parse_into("synth.utts_per_speaker", &mut s.utts_per_speaker)?;
        kv.parse_into("synth.min_len", &mut s.min_len)?;
        kv.parse_into("synth.max_len", &mut s.max_len)?;
        kv.parse_into("synth.min_frames_per_token", &mut s.min_frames_per_token)?;
        kv.parse_into("synth.max_frames_per_token", &mut s.max_frames_per_token)?;
        kv.parse_into("synth.pad_frames", &mut s.pad_frames)?;
        kv.parse_into("synth.n_mels", &mut s.n_mels)?;
        kv.parse_into("synth.bump_height", &mut s.bump_height)?;
        kv.parse_into("synth.bump_width", &mut s.bump_width)?;
        kv.parse_into("synth.tilt_scale", &mut s.tilt_scale)?;
        kv.parse_into("synth.noise_sigma", &mut s.noise_sigma)?;
        kv.parse_into("synth.dev_per_speaker", &mut s.dev_per_speaker)?;
        kv.parse_into("synth.seed", &mut s.seed)?;

        let (mut feat_dim, mut n_tokens) = (cfg.synth.n_mels, cfg.synth.n_tokens);
        kv.parse_into("model.feat_dim", &mut feat_dim)?;
        kv.parse_into("model.n_tokens", &mut n_tokens)?;
        let m = &mut cfg.model;
        *m = match cfg.preset {
            Preset::Tiny => ModelConfig::tiny(feat_dim, n_tokens),
            Preset::Standard => ModelConfig::standard(feat_dim, n_tokens),
        };
        kv.parse_into("model.resolution_ratio", &mut m.resolution_ratio)?;
        kv.parse_into("model.streams", &mut m.stream_mode)?;
        kv.parse_into("model.fusion", &mut m.fusion)?;
        kv.parse_into("model.n_deep_groups", &mut m.streams.n_deep_groups)?;
        kv.parse_into("model.expansion", &mut m.streams.expansion)?;
        kv.parse_into("model.d_m", &mut m.transformer.d_model)?;
        kv.parse_into("model.n_heads", &mut m.transformer.n_heads)?;
        kv.parse_into("model.d_ff", &mut m.transformer.d_ff)?;
        kv.parse_into("model.enc_layers", &mut m.transformer.n_encoder_layers)?;
        kv.parse_into("model.dec_layers", &mut m.transformer.n_decoder_layers)?;
        kv.parse_into("model.dropout", &mut m.transformer.dropout)?;
        kv.parse_into("model.ctc_weight", &mut m.ctc_weight)?;
        kv.parse_into("model.label_smoothing", &mut m.label_smoothing)?;

        let t = &mut cfg.train;
        kv.parse_into("train.epochs", &mut t.epochs)?;
        kv.parse_into("train.batch_size", &mut t.batch_size)?;
        kv.parse_into("train.lr_factor", &mut t.lr_factor)?;
        kv.parse_into("train.warmup_steps", &mut t.warmup_steps)?;
        kv.parse_into("train.clip_norm", &mut t.clip_norm)?;
        kv.parse_into("train.seed", &mut t.seed)?;
        kv.parse_into("train.max_decode_len", &mut t.max_decode_len)?;

        cfg.train_manifest = kv.get("data.train").map(|p| base.join(p));
        cfg.dev_manifest = kv.get("data.dev").map(|p| base.join(p));
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        Self::from_pairs(&KeyValues::parse(text)?, base)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.synth.validate()?;
        let t = &self.train;
        if t.epochs == 0 || t.batch_size < 2 || t.warmup_steps == 0 || t.max_decode_len == 0 {
            return Err(Error::Config(
                "train.epochs, train.warmup_steps and train.max_decode_len must be positive; train.batch_size at least 2"
                    .into(),
            ));
        }
        // Negated so that NaN is rejected too.
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(t.lr_factor > 0.0) || !(t.clip_norm >= 0.0) {
            return Err(Error::Config("train.lr_factor must be positive and train.clip_norm non-negative".into()));
        }
        Ok(())
    }

    /// Every key with its effective value; parsing the result reproduces the
    /// configuration (paths are written as given, absolute or relative to
    /// `base`).
    pub fn to_text(&self, base: &Path) -> String {
        let m = &self.model;
        let t = &self.train;
        let s = &self.synth;
        let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).display().to_string();
        let mut lines = Vec::new();
        if let Some(p) = &self.train_manifest {
            lines.push(format!("data.train = {}", rel(p)));
        }
        if let Some(p) = &self.dev_manifest {
            lines.push(format!("data.dev = {}", rel(p)));
        }
        let preset = match self.preset {
            Preset::Tiny => "tiny",
            Preset::Standard => "standard",
        };
        lines.extend([
            format!("model.preset = {preset}"),
            format!("model.feat_dim = {}", m.feat_dim),
            format!("model.n_tokens = {}", m.n_tokens),
            format!("model.resolution_ratio = {}", m.resolution_ratio),
            format!("model.streams = {}", m.stream_mode),
            format!("model.fusion = {}", m.fusion),
            format!("model.n_deep_groups = {}", m.streams.n_deep_groups),
            format!("model.expansion = {}", m.streams.expansion),
            format!("model.d_m = {}", m.transformer.d_model),
            format!("model.n_heads = {}", m.transformer.n_heads),
            format!("model.d_ff = {}", m.transformer.d_ff),
            format!("model.enc_layers = {}", m.transformer.n_encoder_layers),
            format!("model.dec_layers = {}", m.transformer.n_decoder_layers),
            format!("model.dropout = {:?}", m.transformer.dropout),
            format!("model.ctc_weight = {:?}", m.ctc_weight),
            format!("model.label_smoothing = {:?}", m.label_smoothing),
            format!("train.epochs = {}", t.epochs),
            format!("train.batch_size = {}", t.batch_size),
            format!("train.lr_factor = {:?}", t.lr_factor),
            format!("train.warmup_steps = {}", t.warmup_steps),
            format!("train.clip_norm = {:?}", t.clip_norm),
            format!("train.seed = {}", t.seed),
            format!("train.max_decode_len = {}", t.max_decode_len),
            format!("synth.n_speakers = {}", s.n_speakers),
            format!("synth.n_tokens = {}", s.n_tokens),
            format!("synth.utts_per_speaker = {}", s.utts_per_speaker),
            format!("synth.min_len = {}", s.min_len),
            format!("synth.max_len = {}", s.max_len),
            format!("synth.min_frames_per_token = {}", s.min_frames_per_token),
            format!("synth.max_frames_per_token = {}", s.max_frames_per_token),
            format!("synth.pad_frames = {}", s.pad_frames),
            format!("synth.n_mels = {}", s.n_mels),
            format!("synth.bump_height = {:?}", s.bump_height),
            format!("synth.bump_width = {:?}", s.bump_width),
            format!("synth.tilt_scale = {:?}", s.tilt_scale),
            format!("synth.noise_sigma = {:?}", s.noise_sigma),
            format!("synth.dev_per_speaker = {}", s.dev_per_speaker),
            format!("synth.seed = {}", s.seed),
        ]);
        let mut out = lines.join("\n");
        out.push('\n');
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_overrides_and_paths() {
        let text = "# corpus\ndata.train = corpus/train.tsv  # relative\nmodel.d_m = 32\nmodel.n_heads = 2\nmodel.fusion = concat\n";
        let cfg = RunConfig::parse(text, Path::new("/runs")).unwrap();
        assert_eq!(cfg.train_manifest.as_deref(), Some(Path::new("/runs/corpus/train.tsv")));
        assert_eq!(cfg.model.transformer.d_model, 32);
        assert_eq!(cfg.model.fusion, crate::fusion::FusionKind::Concat);
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.train.lr_factor = 0.1 + 0.2;
        cfg.model.stream_mode = crate::model::StreamMode::DeepOnly;
        let again = RunConfig::parse(&cfg.to_text(Path::new("/")), Path::new("/")).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn errors_name_the_line() {
        let err = RunConfig::parse("model.d_m = 64\nmodel.d_m = x\n", Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("line 2"));
        assert!(RunConfig::parse("bogus.key = 1\n", Path::new(".")).is_err());
        assert!(RunConfig::parse("no equals sign\n", Path::new(".")).is_err());
        assert!(RunConfig::parse("model.n_heads = 3\n", Path::new(".")).is_err());
    }
}
