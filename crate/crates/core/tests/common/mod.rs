//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use tstrm::data::synth::{generate, Corpus, SynthSpec};
use tstrm::rng::Rng;

/// Collapses a frame path: merge runs, then drop blanks.
pub fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if Some(k) != prev && k != blank {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

/// Every length-`t` path over `c` classes, in lexicographic order.
pub fn all_paths(t: usize, c: usize) -> Vec<Vec<usize>> {
    let mut paths = vec![Vec::new()];
    for _ in 0..t {
        paths = paths
            .into_iter()
            .flat_map(|p| {
                (0..c).map(move |k| {
                    let mut q = p.clone();
                    q.push(k);
                    q
                })
            })
            .collect();
    }
    paths
}

/// `−ln Σ_paths Π_t p(path_t)` over paths collapsing to `target`.
pub fn brute_ctc(logprobs: &[f64], t: usize, c: usize, target: &[usize], blank: usize) -> f64 {
    let total: f64 = all_paths(t, c)
        .iter()
        .filter(|p| collapse(p, blank) == target)
        .map(|p| p.iter().enumerate().map(|(i, &k)| logprobs[i * c + k]).sum::<f64>().exp())
        .sum();
    -total.ln()
}

/// Number of length-`t` frame paths collapsing to `target`, by enumeration.
pub fn count_alignments(t: usize, c: usize, target: &[usize], blank: usize) -> usize {
    all_paths(t, c).iter().filter(|p| collapse(p, blank) == target).count()
}

/// Textbook recursive Levenshtein distance.
pub fn brute_levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    match (a.split_first(), b.split_first()) {
        (None, _) => b.len(),
        (_, None) => a.len(),
        (Some((x, ra)), Some((y, rb))) => {
            let sub = brute_levenshtein(ra, rb) + usize::from(x != y);
            sub.min(brute_levenshtein(ra, b) + 1).min(brute_levenshtein(a, rb) + 1)
        }
    }
}

/// A 1×1 convolution given as row-major `[out, in]` weights and `[out]` bias.
pub struct Dense {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub out: usize,
    pub inp: usize,
}

impl Dense {
    /// `[out, n]` result of applying to a `[inp, n]` matrix.
    pub fn apply(&self, x: &[f64], n: usize) -> Vec<f64> {
        let mut y = vec![0.0; self.out * n];
        for o in 0..self.out {
            for p in 0..n {
                let mut acc = self.b[o];
                for i in 0..self.inp {
                    acc += self.w[o * self.inp + i] * x[i * n + p];
                }
                y[o * n + p] = acc;
            }
        }
        y
    }
}

/// Direct evaluation of feature-correlation fusion on flattened `[c, n]`
/// maps: `W = softmax_rows(f1(Xs)·f2(Xd)ᵀ/√n)`, `Xw = W·f3(Xs) + f2(Xd)`,
/// output `[Xw; Xs]`.
pub fn fcf_oracle(xs: &[f64], xd: &[f64], c: usize, n: usize, f1: &Dense, f2: &Dense, f3: &Dense) -> (Vec<f64>, Vec<f64>) {
    let a = f1.apply(xs, n);
    let b = f2.apply(xd, n);
    let v = f3.apply(xs, n);
    let mut w = vec![0.0; c * c];
    for i in 0..c {
        let logits: Vec<f64> = (0..c)
            .map(|j| (0..n).map(|p| a[i * n + p] * b[j * n + p]).sum::<f64>() / (n as f64).sqrt())
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        for j in 0..c {
            w[i * c + j] = (logits[j] - m).exp() / z;
        }
    }
    let mut out = vec![0.0; 2 * c * n];
    for i in 0..c {
        for p in 0..n {
            out[i * n + p] = b[i * n + p] + (0..c).map(|j| w[i * c + j] * v[j * n + p]).sum::<f64>();
        }
    }
    out[c * n..].copy_from_slice(xs);
    (out, w)
}

pub fn random_vec(n: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| rng.normal()).collect()
}

/// A small synthetic corpus for quick end-to-end checks.
pub fn small_corpus(dir: &std::path::Path, speakers: usize, utts: usize) -> Corpus {
    let spec = SynthSpec {
        n_speakers: speakers,
        utts_per_speaker: utts,
        dev_per_speaker: 1,
        ..SynthSpec::default()
    };
    generate(&spec, dir, false).unwrap()
}
