//! Audio to paired high/low-resolution log-mel spectrograms.
//!
//! The high-resolution spectrogram uses a 25 ms Hann window every 10 ms; each
//! frame holds `n_mels` log-mel energies, `n_pitch` pitch-slot columns and,
//! when enabled, their first and second regression deltas. The low-resolution
//! spectrogram is the high-resolution one mean-pooled over non-overlapping
//! groups of `resolution_ratio` frames, so both share the feature dimension.
//!
//! The pitch slots are placeholders: column 0 carries the frame log-energy and
//! the remaining columns are zero. They keep the feature layout of a
//! filterbank-plus-pitch recipe without a pitch tracker.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor applied to energies before the logarithm.
pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate_hz: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        if sample_rate_hz == 0 {
            return Err(Error::Input("sample rate must be positive".into()));
        }
        Ok(Self {
            samples,
            sample_rate_hz,
        })
    }

    /// Mono 16-bit PCM WAV, scaled to [-1, 1).
    pub fn from_wav(path: &Path) -> Result<Self> {
        let reader = hound::WavReader::open(path)?;
        let spec = reader.spec();
        if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
            return Err(Error::Input(format!(
                "{}: expected mono 16-bit PCM, got {} channel(s), {} bits, {:?}",
                path.display(),
                spec.channels,
                spec.bits_per_sample,
                spec.sample_format
            )));
        }
        let samples = reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Self::new(samples, spec.sample_rate)
    }

    pub fn write_wav(&self, path: &Path) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate_hz,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path, spec)?;
        for &s in &self.samples {
            w.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16)?;
        }
        w.finalize()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resolution {
    High,
    Low,
}

/// `n_frames × dims` row-major feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    frames: Vec<f64>,
    n_frames: usize,
    dims: usize,
    pub frame_shift_ms: f64,
    pub resolution: Resolution,
}

impl Spectrogram {
    pub fn new(frames: Vec<f64>, n_frames: usize, dims: usize, frame_shift_ms: f64, resolution: Resolution) -> Result<Self> {
        if n_frames == 0 || dims == 0 || frames.len() != n_frames * dims {
            return Err(Error::Input(format!(
                "spectrogram of {} values cannot be {n_frames}x{dims}",
                frames.len()
            )));
        }
        Ok(Self {
            frames,
            n_frames,
            dims,
            frame_shift_ms,
            resolution,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.frames[t * self.dims..(t + 1) * self.dims]
    }

    pub fn get(&self, t: usize, d: usize) -> f64 {
        self.frames[t * self.dims + d]
    }

    /// `[1, T, D]` single-channel map for the convolutional streams.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.frames.clone(), &[1, self.n_frames, self.dims]).expect("shape checked at construction")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrontendConfig {
    pub n_mels: usize,
    pub window_ms: f64,
    pub shift_ms: f64,
    pub n_pitch: usize,
    pub use_deltas: bool,
    pub delta_width: usize,
    pub resolution_ratio: usize,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            n_mels: 40,
            window_ms: 25.0,
            shift_ms: 10.0,
            n_pitch: 3,
            use_deltas: true,
            delta_width: 2,
            resolution_ratio: 4,
        }
    }
}

impl FrontendConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_mels == 0 || self.resolution_ratio == 0 || self.delta_width == 0 {
            return Err(Error::Config(
                "n_mels, resolution_ratio and delta_width must be at least 1".into(),
            ));
        }
        if !(self.window_ms > 0.0 && self.shift_ms > 0.0) {
            return Err(Error::Config("window and shift must be positive".into()));
        }
        Ok(())
    }

    /// Feature columns per frame.
    pub fn feature_dim(&self) -> usize {
        let static_dim = self.n_mels + self.n_pitch;
        if self.use_deltas {
            3 * static_dim
        } else {
            static_dim
        }
    }

    fn samples(&self, ms: f64, sr: u32) -> usize {
        (ms * sr as f64 / 1000.0).round() as usize
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Centre frequencies of `n_mels` triangles spaced evenly on the mel scale
/// over `[0, sample_rate/2]`.
pub fn mel_centers_hz(n_mels: usize, sample_rate_hz: u32) -> Vec<f64> {
    let top = hz_to_mel(sample_rate_hz as f64 / 2.0);
    (1..=n_mels).map(|m| mel_to_hz(top * m as f64 / (n_mels + 1) as f64)).collect()
}

/// Triangular filters (peak 1) sampled at the `n_fft/2 + 1` FFT bin
/// frequencies. Row `m` is filter `m`.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate_hz: u32) -> Vec<Vec<f64>> {
    let top = hz_to_mel(sample_rate_hz as f64 / 2.0);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bins = n_fft / 2 + 1;
    (0..n_mels)
        .map(|m| {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..bins)
                .map(|k| {
                    let f = k as f64 * sample_rate_hz as f64 / n_fft as f64;
                    if f <= lo || f >= hi {
                        0.0
                    } else if f <= mid {
                        (f - lo) / (mid - lo)
                    } else {
                        (hi - f) / (hi - mid)
                    }
                })
                .collect()
        })
        .collect()
}

/// In-place iterative radix-2 FFT. `re.len()` must be a power of two.
pub fn fft(re: &mut [f64], im: &mut [f64]) {
    let n = re.len();
    assert!(n.is_power_of_two() && im.len() == n, "fft length {n}");
    let mut j = 0;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let ang = -std::f64::consts::TAU / len as f64;
        for start in (0..n).step_by(len) {
            for k in 0..len / 2 {
                let (s, c) = (ang * k as f64).sin_cos();
                let (a, b) = (start + k, start + k + len / 2);
                let tr = re[b] * c - im[b] * s;
                let ti = re[b] * s + im[b] * c;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
            }
        }
        len <<= 1;
    }
}

/// Number of full windows: `1 + floor((N − window) / hop)`.
pub fn frame_count(n_samples: usize, window: usize, hop: usize) -> Option<usize> {
    n_samples.checked_sub(window).map(|r| 1 + r / hop)
}

/// High-resolution log-mel spectrogram with pitch slots and optional deltas.
pub fn stft_logmel(w: &Waveform, cfg: &FrontendConfig) -> Result<Spectrogram> {
    cfg.validate()?;
    let sr = w.sample_rate_hz;
    let win = cfg.samples(cfg.window_ms, sr);
    let hop = cfg.samples(cfg.shift_ms, sr).max(1);
    let Some(n_frames) = frame_count(w.samples.len(), win, hop).filter(|_| win > 0) else {
        return Err(Error::Input(format!(
            "waveform of {} samples is shorter than one {win}-sample window",
            w.samples.len()
        )));
    };
    let n_fft = win.next_power_of_two();
    let hann: Vec<f64> = (0..win)
        .map(|i| 0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / win as f64).cos())
        .collect();
    let bank = mel_filterbank(cfg.n_mels, n_fft, sr);
    let static_dim = cfg.n_mels + cfg.n_pitch;

    let mut stat = Vec::with_capacity(n_frames * static_dim);
    let (mut re, mut im) = (vec![0.0; n_fft], vec![0.0; n_fft]);
    for t in 0..n_frames {
        let frame = &w.samples[t * hop..t * hop + win];
        re.iter_mut().for_each(|v| *v = 0.0);
        im.iter_mut().for_each(|v| *v = 0.0);
        for (i, (&s, &h)) in frame.iter().zip(&hann).enumerate() {
            re[i] = s * h;
        }
        fft(&mut re, &mut im);
        let power: Vec<f64> = (0..=n_fft / 2).map(|k| re[k] * re[k] + im[k] * im[k]).collect();
        for filt in &bank {
            let e: f64 = filt.iter().zip(&power).map(|(a, b)| a * b).sum();
            stat.push(e.max(LOG_FLOOR).ln());
        }
        if cfg.n_pitch > 0 {
            let energy: f64 = frame.iter().map(|s| s * s).sum();
            stat.push(energy.max(LOG_FLOOR).ln());
            stat.extend(std::iter::repeat_n(0.0, cfg.n_pitch - 1));
        }
    }

    let frames = if cfg.use_deltas {
        let d1 = compute_deltas(&stat, n_frames, static_dim, cfg.delta_width);
        let d2 = compute_deltas(&d1, n_frames, static_dim, cfg.delta_width);
        let mut out = Vec::with_capacity(3 * stat.len());
        for t in 0..n_frames {
            let row = t * static_dim..(t + 1) * static_dim;
            out.extend_from_slice(&stat[row.clone()]);
            out.extend_from_slice(&d1[row.clone()]);
            out.extend_from_slice(&d2[row]);
        }
        out
    } else {
        stat
    };
    Spectrogram::new(frames, n_frames, cfg.feature_dim(), cfg.shift_ms, Resolution::High)
}

/// Regression deltas over a `t × d` row-major matrix with edge frames
/// replicated: `d_t = Σ_{n=1..W} n (x_{t+n} − x_{t−n}) / (2 Σ n²)`.
pub fn compute_deltas(x: &[f64], t: usize, d: usize, width: usize) -> Vec<f64> {
    assert_eq!(x.len(), t * d, "compute_deltas shape");
    let denom = 2.0 * (1..=width).map(|n| (n * n) as f64).sum::<f64>();
    let mut out = vec![0.0; x.len()];
    for i in 0..t {
        for n in 1..=width {
            let ahead = (i + n).min(t - 1);
            let behind = i.saturating_sub(n);
            for k in 0..d {
                out[i * d + k] += n as f64 * (x[ahead * d + k] - x[behind * d + k]);
            }
        }
        out[i * d..(i + 1) * d].iter_mut().for_each(|v| *v /= denom);
    }
    out
}

/// Mean pooling over non-overlapping windows of `ratio` frames; a final
/// partial window averages over the frames it has.
pub fn downsample_time(s: &Spectrogram, ratio: usize) -> Result<Spectrogram> {
    if ratio == 0 {
        return Err(Error::Config("resolution ratio must be at least 1".into()));
    }
    let (t, d) = (s.n_frames, s.dims);
    let t_low = t.div_ceil(ratio);
    let mut out = vec![0.0; t_low * d];
    for j in 0..t_low {
        let frames = j * ratio..((j + 1) * ratio).min(t);
        let n = frames.len() as f64;
        let row = &mut out[j * d..(j + 1) * d];
        for i in frames {
            for (acc, &v) in row.iter_mut().zip(s.frame(i)) {
                *acc += v;
            }
        }
        row.iter_mut().for_each(|v| *v /= n);
    }
    Spectrogram::new(out, t_low, d, s.frame_shift_ms * ratio as f64, Resolution::Low)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn sine(freq: f64, secs: f64, sr: u32, amp: f64) -> Waveform {
        let n = (secs * sr as f64) as usize;
        let samples = (0..n)
            .map(|i| amp * (std::f64::consts::TAU * freq * i as f64 / sr as f64).sin())
            .collect();
        Waveform::new(samples, sr).unwrap()
    }

    #[test]
    fn one_second_gives_98_frames() {
        let s = stft_logmel(&sine(440.0, 1.0, 16000, 0.5), &FrontendConfig::default()).unwrap();
        assert_eq!(s.n_frames(), 98);
        assert_eq!(s.dims(), 129);
        assert_eq!(frame_count(16000, 400, 160), Some(98));
    }

    #[test]
    fn sine_lands_in_nearest_mel_bin() {
        let cfg = FrontendConfig {
            use_deltas: false,
            ..Default::default()
        };
        let s = stft_logmel(&sine(1000.0, 1.0, 16000, 0.5), &cfg).unwrap();
        // Adjacent triangles cross halfway between their centres, so the
        // filter whose centre is nearest 1 kHz responds most.
        let expected = mel_centers_hz(40, 16000)
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - 1000.0).abs().total_cmp(&(b.1 - 1000.0).abs()))
            .unwrap()
            .0;
        for t in 0..s.n_frames() {
            let mel = &s.frame(t)[..40];
            let arg = mel.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            assert_eq!(arg, expected, "frame {t}");
        }
    }

    #[test]
    fn silence_hits_the_floor() {
        let w = Waveform::new(vec![0.0; 8000], 16000).unwrap();
        let s = stft_logmel(&w, &FrontendConfig::default()).unwrap();
        for t in 0..s.n_frames() {
            let f = s.frame(t);
            assert!(f[..40].iter().all(|&v| v == LOG_FLOOR.ln()));
            assert!(f[43..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn short_waveform_is_rejected() {
        let w = Waveform::new(vec![0.0; 399], 16000).unwrap();
        assert!(matches!(stft_logmel(&w, &FrontendConfig::default()), Err(Error::Input(_))));
    }

    #[test]
    fn louder_is_never_quieter() {
        let mut rng = Rng::new(8);
        let samples: Vec<f64> = (0..4000).map(|_| 0.3 * rng.normal()).collect();
        let cfg = FrontendConfig {
            use_deltas: false,
            ..Default::default()
        };
        let quiet = stft_logmel(&Waveform::new(samples.clone(), 16000).unwrap(), &cfg).unwrap();
        let loud = stft_logmel(&Waveform::new(samples.iter().map(|s| s * 1.7).collect(), 16000).unwrap(), &cfg).unwrap();
        for (a, b) in quiet.values().iter().zip(loud.values()) {
            assert!(b >= a);
        }
        let again = stft_logmel(&Waveform::new(samples, 16000).unwrap(), &cfg).unwrap();
        assert_eq!(quiet, again);
    }

    #[test]
    fn fft_matches_dft() {
        let mut rng = Rng::new(3);
        let x: Vec<f64> = (0..16).map(|_| rng.normal()).collect();
        let (mut re, mut im) = (x.clone(), vec![0.0; 16]);
        fft(&mut re, &mut im);
        for k in 0..16 {
            let (mut sr, mut si) = (0.0, 0.0);
            for (n, &v) in x.iter().enumerate() {
                let a = -std::f64::consts::TAU * (k * n) as f64 / 16.0;
                sr += v * a.cos();
                si += v * a.sin();
            }
            assert!((sr - re[k]).abs() < 1e-12 && (si - im[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn deltas_of_constant_and_ramp() {
        let c = vec![2.5; 10 * 3];
        assert!(compute_deltas(&c, 10, 3, 2).iter().all(|&v| v == 0.0));
        let ramp: Vec<f64> = (0..10).map(|t| t as f64).collect();
        let d = compute_deltas(&ramp, 10, 1, 2);
        for &v in &d[2..8] {
            assert!((v - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn delta_twice_equals_squared_operator() {
        // Build the delta operator as an explicit T×T matrix and apply it twice.
        let (t, w) = (9, 2);
        let mut op = vec![vec![0.0; t]; t];
        for (i, row) in op.iter_mut().enumerate() {
            for n in 1..=w {
                row[(i + n).min(t - 1)] += n as f64 / 10.0;
                row[i.saturating_sub(n)] -= n as f64 / 10.0;
            }
        }
        let mut rng = Rng::new(17);
        let x: Vec<f64> = (0..t).map(|_| rng.normal()).collect();
        let apply = |v: &[f64]| -> Vec<f64> { op.iter().map(|r| r.iter().zip(v).map(|(a, b)| a * b).sum()).collect() };
        let oracle = apply(&apply(&x));
        let got = compute_deltas(&compute_deltas(&x, t, 1, w), t, 1, w);
        for (a, b) in got.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn spec(t: usize, d: usize, f: impl Fn(usize, usize) -> f64) -> Spectrogram {
        let v = (0..t * d).map(|i| f(i / d, i % d)).collect();
        Spectrogram::new(v, t, d, 10.0, Resolution::High).unwrap()
    }

    #[test]
    fn downsample_examples() {
        let s = spec(5, 2, |t, d| (t * 10 + d) as f64);
        assert_eq!(downsample_time(&s, 1).unwrap().values(), s.values());
        let c = downsample_time(&spec(8, 3, |_, _| 1.25), 4).unwrap();
        assert_eq!(c.n_frames(), 2);
        assert!(c.values().iter().all(|&v| v == 1.25));
        let p = downsample_time(&s, 4).unwrap();
        assert_eq!(p.n_frames(), 2);
        assert_eq!(p.frame(1), s.frame(4));
        assert_eq!(p.frame(0), &[15.0, 16.0]);
        assert_eq!(p.frame_shift_ms, 40.0);
        assert_eq!(p.resolution, Resolution::Low);
    }

    #[test]
    fn low_frame_count_exhaustive() {
        for t in 1..=200 {
            for ratio in [1, 2, 4, 8] {
                let s = spec(t, 1, |i, _| i as f64);
                assert_eq!(downsample_time(&s, ratio).unwrap().n_frames(), t.div_ceil(ratio));
            }
        }
    }

    proptest! {
        #[test]
        fn downsample_is_affine_equivariant(t in 1usize..40, ratio in 1usize..9, a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u64..1000) {
            let mut rng = Rng::new(seed);
            let noise: Vec<f64> = (0..t * 3).map(|_| rng.normal()).collect();
            let s = spec(t, 3, |i, j| noise[i * 3 + j]);
            let scaled = Spectrogram::new(s.values().iter().map(|v| a * v + b).collect(), t, 3, 10.0, Resolution::High).unwrap();
            let lhs = downsample_time(&scaled, ratio).unwrap();
            let rhs = downsample_time(&s, ratio).unwrap();
            for (x, y) in lhs.values().iter().zip(rhs.values()) {
                prop_assert!((x - (a * y + b)).abs() < 1e-12);
            }
        }
    }
}
