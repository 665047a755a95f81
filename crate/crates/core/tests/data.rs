mod common;

use std::fs;
use std::path::Path;

use common::{all_paths, collapse, small_corpus};
use tstrm::data::checkpoint::Checkpoint;
use tstrm::data::config::RunConfig;
use tstrm::data::format::{read_features, write_features};
use tstrm::data::manifest::Manifest;
use tstrm::data::synth::{generate, render, SpeakerStyle, SynthSpec};
use tstrm::frontend::{Resolution, Spectrogram};
use tstrm::model::{Example, Tstrm};
use tstrm::nn::ForwardCtx;
use tstrm::rng::Rng;
use tstrm::train::{load_checkpoint, load_examples, train_examples, TrainOptions, METRICS_HEADER};
use tstrm::Error;

fn quick_config(corpus_conf: &Path, epochs: usize) -> RunConfig {
    let mut cfg = RunConfig::load(corpus_conf).unwrap();
    cfg.train.epochs = epochs;
    cfg.train.batch_size = 4;
    cfg
}

fn examples(cfg: &RunConfig) -> (Vec<Example>, Vec<Example>) {
    let read = |p: &Option<std::path::PathBuf>| Manifest::read(p.as_ref().unwrap()).unwrap();
    (
        load_examples(&read(&cfg.train_manifest), &cfg.model).unwrap(),
        load_examples(&read(&cfg.dev_manifest), &cfg.model).unwrap(),
    )
}

#[test]
fn synthesis_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        n_speakers: 2,
        utts_per_speaker: 3,
        dev_per_speaker: 1,
        ..SynthSpec::default()
    };
    let a = generate(&spec, &dir.path().join("a"), false).unwrap();
    let b = generate(&spec, &dir.path().join("b"), false).unwrap();
    for (ua, ub) in a.train.utterances.iter().zip(&b.train.utterances) {
        assert_eq!(fs::read(&ua.path).unwrap(), fs::read(&ub.path).unwrap());
    }
    assert!(matches!(generate(&spec, &dir.path().join("a"), false), Err(Error::Exists(_))));
    assert!(generate(&spec, &dir.path().join("a"), true).is_ok());
}

#[test]
fn clean_speakers_render_identically() {
    let spec = SynthSpec {
        tilt_scale: 0.0,
        noise_sigma: 0.0,
        ..SynthSpec::default()
    };
    let mut rng = Rng::new(1);
    let (s1, s2) = (SpeakerStyle::draw(&spec, &mut rng), SpeakerStyle::draw(&spec, &mut rng));
    let tokens = [3, 9, 1, 16];
    let durations = [8, 11, 9, 12];
    let a = render(&spec, &tokens, &durations, &s1, &mut rng).unwrap();
    let b = render(&spec, &tokens, &durations, &s2, &mut rng).unwrap();
    assert_eq!(a.values(), b.values());
}

#[test]
fn feature_files_store_f32() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.tstf");
    let values = vec![0.1, -2.5, 1e-3, 7.0, 0.0, 3.25];
    let s = Spectrogram::new(values.clone(), 2, 3, 10.0, Resolution::High).unwrap();
    write_features(&path, &s).unwrap();
    let back = read_features(&path).unwrap();
    assert_eq!((back.n_frames(), back.dims()), (2, 3));
    for (a, b) in back.values().iter().zip(&values) {
        assert_eq!(*a, *b as f32 as f64);
    }
    fs::write(&path, b"TSTX").unwrap();
    assert!(matches!(read_features(&path), Err(Error::Format { .. })));
}

#[test]
fn manifest_and_config_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(&dir.path().join("c"), 2, 3);
    let text = fs::read_to_string(dir.path().join("c/train.tsv")).unwrap();
    let parsed = Manifest::parse(&text, &dir.path().join("c"), Path::new("train.tsv")).unwrap();
    assert_eq!(parsed, corpus.train);
    let cfg = RunConfig::load(&corpus.config_path).unwrap();
    let again = RunConfig::parse(&cfg.to_text(&dir.path().join("c")), &dir.path().join("c")).unwrap();
    assert_eq!(again, cfg);
    assert!(matches!(
        RunConfig::parse("model.bogus = 1\n", dir.path()),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        RunConfig::parse("model.ctc_weight = 1.5\n", dir.path()),
        Err(Error::Config(_))
    ));
    let dup = "a\tx.tstf\t1\t0\t0\na\ty.tstf\t2\t0\t1\n";
    assert!(matches!(Manifest::parse(dup, dir.path(), Path::new("m")), Err(Error::Format { .. })));
}

#[test]
fn training_writes_metrics_and_round_trippable_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(&dir.path().join("c"), 2, 6);
    let cfg = quick_config(&corpus.config_path, 2);
    let (train, dev) = examples(&cfg);
    let opts = TrainOptions {
        out: dir.path().join("run"),
        force: false,
        deterministic: true,
    };
    let outcome = train_examples(&cfg, &train, &dev, &opts).unwrap();
    let metrics = fs::read_to_string(opts.out.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines.len(), cfg.train.epochs + 1);
    assert_eq!(lines[0], METRICS_HEADER);
    assert!(!metrics.contains('\r'));
    let mut reader = csv::Reader::from_reader(metrics.as_bytes());
    for row in reader.records() {
        let row = row.unwrap();
        assert_eq!(row.len(), 6);
        for field in row.iter() {
            field.parse::<f64>().unwrap();
        }
    }
    assert_eq!(outcome.history.len(), 2);

    let path = opts.out.join("last.ckpt");
    let bytes = fs::read(&path).unwrap();
    let ckpt = Checkpoint::load(&path).unwrap();
    assert_eq!(ckpt.to_bytes(), bytes);
    assert_eq!(ckpt.step, outcome.history[1].step);
    let (_, model) = load_checkpoint(&path).unwrap();
    let again = Checkpoint::capture(&model, ckpt.config.clone(), ckpt.step, ckpt.adam.clone());
    assert_eq!(again.to_bytes(), bytes);

    // Refuses to reuse a non-empty output directory.
    assert!(matches!(train_examples(&cfg, &train, &dev, &opts), Err(Error::Exists(_))));
}

#[test]
fn restored_model_decodes_identically() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(&dir.path().join("c"), 2, 4);
    let cfg = quick_config(&corpus.config_path, 1);
    let (train, dev) = examples(&cfg);
    let opts = TrainOptions {
        out: dir.path().join("run"),
        force: false,
        deterministic: false,
    };
    let outcome = train_examples(&cfg, &train, &dev, &opts).unwrap();
    let (_, restored) = load_checkpoint(&opts.out.join("best.ckpt")).unwrap();
    let a = outcome.best.beam(&dev[0].features, 3, 8).unwrap();
    let b = restored.beam(&dev[0].features, 3, 8).unwrap();
    assert_eq!(a, b);
}

/// Paths of length `t` over blank plus tokens that collapse to a target of
/// `l` tokens without adjacent repeats: place `2l + 1` runs (tokens ≥ 1
/// frame, blanks ≥ 0) in `t` frames, i.e. `C(t + l, 2l)`.
fn alignments(t: usize, l: usize) -> f64 {
    let (n, k) = (t + l, 2 * l);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

#[test]
fn alignment_count_formula() {
    for (t, target) in [(5, vec![1, 2]), (6, vec![2, 1, 3]), (4, vec![3])] {
        let brute = all_paths(t, 4).iter().filter(|p| collapse(p, 0) == target).count();
        assert_eq!(alignments(t, target.len()), brute as f64);
    }
}

#[test]
fn untrained_loss_is_near_uniform_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(&dir.path().join("c"), 2, 4);
    let cfg = quick_config(&corpus.config_path, 1);
    let (train, _) = examples(&cfg);
    let model = Tstrm::new(cfg.model.clone(), cfg.train.seed).unwrap();
    let (_, parts) = model.loss(&train, &mut ForwardCtx::eval()).unwrap();
    let vocab = cfg.model.vocab();
    let lambda = cfg.model.ctc_weight;
    let c = vocab.ctc_classes() as f64;
    let k = vocab.decoder_classes() as f64;
    let expected = train
        .iter()
        .map(|ex| {
            let t = cfg.model.grid(ex.features.n_frames()).0;
            let ctc = t as f64 * c.ln() - alignments(t, ex.tokens.len()).ln();
            lambda * ctc + (1.0 - lambda) * k.ln()
        })
        .sum::<f64>()
        / train.len() as f64;
    let rel = (parts.joint - expected).abs() / expected;
    assert!(rel < 0.2, "step-0 loss {} vs uniform {expected}", parts.joint);
}

#[test]
fn non_finite_loss_names_the_batch() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(&dir.path().join("c"), 2, 4);
    let cfg = quick_config(&corpus.config_path, 1);
    let (mut train, dev) = examples(&cfg);
    let bad = &mut train[0];
    let (t, d) = (bad.features.n_frames(), bad.features.dims());
    bad.features = Spectrogram::new(vec![f64::NAN; t * d], t, d, 10.0, Resolution::High).unwrap();
    let opts = TrainOptions {
        out: dir.path().join("run"),
        force: false,
        deterministic: true,
    };
    match train_examples(&cfg, &train, &dev, &opts) {
        Err(Error::Numeric(msg)) => assert!(msg.contains("batch") && msg.contains(&train[0].id), "{msg}"),
        other => panic!("expected a numeric failure, got {other:?}"),
    }
}

#[test]
fn vocabulary_mismatch_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(&dir.path().join("c"), 2, 3);
    let mut cfg = RunConfig::load(&corpus.config_path).unwrap();
    cfg.model.n_tokens = 4;
    assert!(matches!(load_examples(&corpus.train, &cfg.model), Err(Error::Config(_))));
}

