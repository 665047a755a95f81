//! Synthetic corpus with controllable speaker character.
//!
//! Each token `k ∈ 1..=n_tokens` is a Gaussian bump over mel bins centred at
//! bin `⌊(k − 1)·n_mels / n_tokens⌋`, held for a random number of frames.
//! Every speaker adds a fixed per-bin tilt and an energy offset (both drawn
//! with standard deviation `tilt_scale`) to every frame of every utterance,
//! and each value receives independent Gaussian noise of standard deviation
//! `noise_sigma`. Everything is a function of the seed.

use std::fs;
use std::path::{Path, PathBuf};

use crate::data::config::RunConfig;
use crate::data::format::write_features;
use crate::data::manifest::{Manifest, Utterance};
use crate::error::{Error, Result};
use crate::frontend::{Resolution, Spectrogram};
use crate::model::ModelConfig;
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n_speakers: usize,
    pub n_tokens: usize,
    pub utts_per_speaker: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub min_frames_per_token: usize,
    pub max_frames_per_token: usize,
    /// Token-free frames before and after the transcript.
    pub pad_frames: usize,
    pub n_mels: usize,
    pub bump_height: f64,
    /// Standard deviation of the bump, in bins.
    pub bump_width: f64,
    pub tilt_scale: f64,
    pub noise_sigma: f64,
    /// Utterances per speaker held out for the dev set.
    pub dev_per_speaker: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_speakers: 8,
            n_tokens: 16,
            utts_per_speaker: 40,
            min_len: 4,
            max_len: 7,
            min_frames_per_token: 8,
            max_frames_per_token: 12,
            pad_frames: 3,
            n_mels: 40,
            bump_height: 4.0,
            bump_width: 1.0,
            tilt_scale: 1.0,
            noise_sigma: 0.5,
            dev_per_speaker: 8,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.n_speakers,
            self.n_tokens,
            self.utts_per_speaker,
            self.min_len,
            self.min_frames_per_token,
            self.n_mels,
        ];
        if positive.contains(&0) {
            return Err(Error::Config("synth counts must be positive".into()));
        }
        if self.min_len > self.max_len || self.min_frames_per_token > self.max_frames_per_token {
            return Err(Error::Config("synth minimums must not exceed maximums".into()));
        }
        if self.n_tokens < 2 && self.min_len > 1 {
            return Err(Error::Config("need at least 2 tokens to avoid adjacent repeats".into()));
        }
        if self.dev_per_speaker >= self.utts_per_speaker {
            return Err(Error::Config("dev_per_speaker must leave training utterances".into()));
        }
        if !(self.tilt_scale >= 0.0 && self.noise_sigma >= 0.0 && self.bump_width > 0.0) {
            return Err(Error::Config("tilt_scale and noise_sigma must be ≥ 0, bump_width > 0".into()));
        }
        Ok(())
    }

    /// Mel bin carrying token `k`.
    pub fn token_bin(&self, k: usize) -> usize {
        (k - 1) * self.n_mels / self.n_tokens
    }
}

/// The fixed colouring one speaker applies to every frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerStyle {
    pub tilt: Vec<f64>,
    pub offset: f64,
}

impl SpeakerStyle {
    pub fn draw(spec: &SynthSpec, rng: &mut Rng) -> Self {
        let tilt = (0..spec.n_mels).map(|_| spec.tilt_scale * rng.normal()).collect();
        Self {
            tilt,
            offset: spec.tilt_scale * rng.normal(),
        }
    }
}

/// Random transcript without adjacent repeats.
pub fn draw_transcript(spec: &SynthSpec, rng: &mut Rng) -> Vec<usize> {
    let len = spec.min_len + rng.below(spec.max_len - spec.min_len + 1);
    let mut out: Vec<usize> = Vec::with_capacity(len);
    while out.len() < len {
        let k = 1 + rng.below(spec.n_tokens);
        if out.last() != Some(&k) {
            out.push(k);
        }
    }
    out
}

pub fn draw_durations(spec: &SynthSpec, len: usize, rng: &mut Rng) -> Vec<usize> {
    let span = spec.max_frames_per_token - spec.min_frames_per_token + 1;
    (0..len).map(|_| spec.min_frames_per_token + rng.below(span)).collect()
}

/// Renders one utterance as a `[T, n_mels]` spectrogram.
pub fn render(
    spec: &SynthSpec,
    tokens: &[usize],
    durations: &[usize],
    style: &SpeakerStyle,
    rng: &mut Rng,
) -> Result<Spectrogram> {
    if tokens.len() != durations.len() {
        return Err(Error::Input("one duration per token required".into()));
    }
    let mut active: Vec<Option<usize>> = vec![None; spec.pad_frames];
    for (&k, &d) in tokens.iter().zip(durations) {
        active.extend(std::iter::repeat_n(Some(k), d));
    }
    active.extend(std::iter::repeat_n(None, spec.pad_frames));
    let d = spec.n_mels;
    let mut frames = Vec::with_capacity(active.len() * d);
    for token in &active {
        let centre = token.map(|k| spec.token_bin(k) as f64);
        for m in 0..d {
            let bump = centre.map_or(0.0, |c| {
                let z = (m as f64 - c) / spec.bump_width;
                spec.bump_height * (-0.5 * z * z).exp()
            });
            frames.push(style.offset + style.tilt[m] + bump + spec.noise_sigma * rng.normal());
        }
    }
    Spectrogram::new(frames, active.len(), d, 10.0, Resolution::High)
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub train: Manifest,
    pub dev: Manifest,
    /// Configuration pointing at the written manifests.
    pub config_path: PathBuf,
}

fn prepare_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let occupied = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some();
        if occupied && !force {
            return Err(Error::Exists(dir.to_path_buf()));
        }
    }
    fs::create_dir_all(dir.join("feats")).map_err(|e| Error::io(dir, e))
}

/// Writes `feats/*.tstf`, `train.tsv`, `dev.tsv`, `all.tsv` and a
/// `corpus.conf` ready for training into `dir`. An existing non-empty
/// directory is refused unless `force` is set.
pub fn generate(spec: &SynthSpec, dir: &Path, force: bool) -> Result<Corpus> {
    spec.validate()?;
    prepare_dir(dir, force)?;
    let mut rng = Rng::new(spec.seed);
    let styles: Vec<SpeakerStyle> = (0..spec.n_speakers).map(|_| SpeakerStyle::draw(spec, &mut rng)).collect();
    let (mut train, mut dev) = (Manifest::default(), Manifest::default());
    for (s, style) in styles.iter().enumerate() {
        for u in 0..spec.utts_per_speaker {
            let tokens = draw_transcript(spec, &mut rng);
            let durations = draw_durations(spec, tokens.len(), &mut rng);
            let feats = render(spec, &tokens, &durations, style, &mut rng)?;
            let id = format!("s{s:02}u{u:03}");
            let path = dir.join("feats").join(format!("{id}.tstf"));
            write_features(&path, &feats)?;
            let utt = Utterance {
                id,
                path,
                transcript: tokens,
                speaker: s,
                gender: (s % 2) as u8,
            };
            if u >= spec.utts_per_speaker - spec.dev_per_speaker {
                dev.utterances.push(utt);
            } else {
                train.utterances.push(utt);
            }
        }
    }
    train.write(&dir.join("train.tsv"))?;
    dev.write(&dir.join("dev.tsv"))?;
    let mut all = train.clone();
    all.utterances.extend(dev.utterances.iter().cloned());
    all.write(&dir.join("all.tsv"))?;

    let config = RunConfig {
        train_manifest: Some(dir.join("train.tsv")),
        dev_manifest: Some(dir.join("dev.tsv")),
        model: ModelConfig::tiny(spec.n_mels, spec.n_tokens),
        synth: spec.clone(),
        ..RunConfig::default()
    };
    let config_path = dir.join("corpus.conf");
    fs::write(&config_path, config.to_text(dir)).map_err(|e| Error::io(&config_path, e))?;
    Ok(Corpus { train, dev, config_path })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transcripts_have_no_adjacent_repeats() {
        let spec = SynthSpec::default();
        let mut rng = Rng::new(3);
        for _ in 0..200 {
            let t = draw_transcript(&spec, &mut rng);
            assert!((spec.min_len..=spec.max_len).contains(&t.len()));
            assert!(t.windows(2).all(|w| w[0] != w[1]));
            assert!(t.iter().all(|&k| (1..=spec.n_tokens).contains(&k)));
        }
    }

    #[test]
    fn clean_render_peaks_at_token_bin() {
        let spec = SynthSpec {
            tilt_scale: 0.0,
            noise_sigma: 0.0,
            ..SynthSpec::default()
        };
        let mut rng = Rng::new(0);
        let style = SpeakerStyle::draw(&spec, &mut rng);
        let tokens = [1, 16, 5];
        let s = render(&spec, &tokens, &[2, 3, 2], &style, &mut rng).unwrap();
        let mut t = spec.pad_frames;
        for (&k, d) in tokens.iter().zip([2, 3, 2]) {
            for f in t..t + d {
                let row = s.frame(f);
                let argmax = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
                assert_eq!(argmax, (k - 1) * 40 / 16);
            }
            t += d;
        }
    }
}
