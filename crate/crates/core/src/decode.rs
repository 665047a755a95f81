//! Autoregressive search and error-rate scoring.

use crate::error::{Error, Result};

/// Next-token log-probabilities given the tokens emitted so far (the start
/// symbol is implicit and not part of `prefix`).
pub trait StepScorer {
    fn next_log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>>;
}

impl<F> StepScorer for F
where
    F: Fn(&[usize]) -> Result<Vec<f64>>,
{
    fn next_log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        self(prefix)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Emitted tokens, ending in `eos` when `finished`.
    pub tokens: Vec<usize>,
    /// Sum of token log-probabilities.
    pub score: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Tokens without the terminating `eos`.
    pub fn transcript(&self) -> &[usize] {
        if self.finished {
            &self.tokens[..self.tokens.len() - 1]
        } else {
            &self.tokens
        }
    }

    /// Score divided by the number of emitted tokens (including `eos`).
    pub fn normalized_score(&self) -> f64 {
        self.score / self.tokens.len().max(1) as f64
    }
}

/// Index of the first maximum.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn check(lp: &[f64]) -> Result<()> {
    if lp.is_empty() {
        return Err(Error::Contract("scorer returned no classes".into()));
    }
    if lp.iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("scorer returned NaN".into()));
    }
    Ok(())
}

/// Picks the most probable token at every step until `eos` or `max_len`
/// tokens. Ties go to the lowest id.
pub fn greedy_decode(scorer: &impl StepScorer, eos: usize, max_len: usize) -> Result<Hypothesis> {
    let mut hyp = Hypothesis {
        tokens: Vec::new(),
        score: 0.0,
        finished: false,
    };
    while hyp.tokens.len() < max_len {
        let lp = scorer.next_log_probs(&hyp.tokens)?;
        check(&lp)?;
        let k = argmax(&lp);
        hyp.tokens.push(k);
        hyp.score += lp[k];
        if k == eos {
            hyp.finished = true;
            break;
        }
    }
    Ok(hyp)
}

/// Beam search keeping the `beam` best partial hypotheses by total score.
/// A candidate ending in `eos` leaves the beam as a finished hypothesis;
/// search stops once `beam` hypotheses have finished, no partial hypothesis
/// remains, or `max_len` tokens have been emitted. Results are ordered by
/// length-normalised score, best first; ties keep the lower-id path first,
/// so `beam = 1` reproduces [`greedy_decode`].
pub fn beam_decode(scorer: &impl StepScorer, eos: usize, beam: usize, max_len: usize) -> Result<Vec<Hypothesis>> {
    if beam == 0 {
        return Err(Error::Input("beam width must be at least 1".into()));
    }
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        score: 0.0,
        finished: false,
    }];
    let mut done: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_len {
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        let mut dists = Vec::with_capacity(live.len());
        for (h, hyp) in live.iter().enumerate() {
            let lp = scorer.next_log_probs(&hyp.tokens)?;
            check(&lp)?;
            cands.extend(lp.iter().enumerate().map(|(k, &v)| (hyp.score + v, h, k)));
            dists.push(lp);
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut next = Vec::new();
        for &(score, h, k) in cands.iter().take(beam) {
            let mut tokens = live[h].tokens.clone();
            tokens.push(k);
            let hyp = Hypothesis {
                tokens,
                score,
                finished: k == eos,
            };
            if hyp.finished {
                done.push(hyp);
            } else {
                next.push(hyp);
            }
        }
        live = next;
        if live.is_empty() || done.len() >= beam {
            break;
        }
    }
    done.extend(live);
    done.sort_by(|a, b| b.normalized_score().total_cmp(&a.normalized_score()));
    done.truncate(beam);
    Ok(done)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ErrorCounts {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub reference_len: usize,
}

impl ErrorCounts {
    pub fn distance(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    /// `(S + I + D) / N`; an error when the reference is empty.
    pub fn rate(&self) -> Result<f64> {
        if self.reference_len == 0 {
            return Err(Error::Input("error rate of an empty reference".into()));
        }
        Ok(self.distance() as f64 / self.reference_len as f64)
    }

    pub fn merge(&mut self, other: ErrorCounts) {
        self.substitutions += other.substitutions;
        self.insertions += other.insertions;
        self.deletions += other.deletions;
        self.reference_len += other.reference_len;
    }
}

/// Levenshtein alignment of `hyp` against `reference`, with the minimum
/// distance split into substitutions, insertions and deletions.
pub fn align<T: PartialEq>(hyp: &[T], reference: &[T]) -> ErrorCounts {
    let (n, m) = (reference.len(), hyp.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for (j, cell) in d[..w].iter_mut().enumerate() {
        *cell = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            d[i * w + j] = sub.min(d[(i - 1) * w + j] + 1).min(d[i * w + j - 1] + 1);
        }
    }
    let mut c = ErrorCounts {
        reference_len: n,
        ..Default::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 && here == d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hyp[j - 1]) {
            if reference[i - 1] != hyp[j - 1] {
                c.substitutions += 1;
            }
            i -= 1;
            j -= 1;
        } else if i > 0 && here == d[(i - 1) * w + j] + 1 {
            c.deletions += 1;
            i -= 1;
        } else {
            c.insertions += 1;
            j -= 1;
        }
    }
    c
}

/// Edit distance divided by the reference length.
pub fn edit_distance_rate<T: PartialEq>(hyp: &[T], reference: &[T]) -> Result<f64> {
    align(hyp, reference).rate()
}
