//! Utterance embeddings and the linear speaker probe.

use std::path::Path;

use crate::data::manifest::Manifest;
use crate::error::{Error, Result};
use crate::model::Tstrm;
use crate::rng::Rng;
use crate::train::{csv_error, load_examples};

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub id: String,
    pub speaker: usize,
    pub values: Vec<f64>,
}

/// Mean-pooled output of the chosen stream for every utterance.
pub fn embed_manifest(model: &Tstrm, manifest: &Manifest, deep: bool) -> Result<Vec<Embedding>> {
    let examples = load_examples(manifest, &model.cfg)?;
    examples
        .iter()
        .zip(&manifest.utterances)
        .map(|(ex, u)| {
            Ok(Embedding {
                id: ex.id.clone(),
                speaker: u.speaker,
                values: model.embedding(&ex.features, deep)?,
            })
        })
        .collect()
}

/// `utt_id,speaker_id,v1..vc`
pub fn write_embeddings(path: &Path, embeddings: &[Embedding]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let c = embeddings.first().map_or(0, |e| e.values.len());
    let mut write = || -> csv::Result<()> {
        let mut header = vec!["utt_id".to_string(), "speaker_id".to_string()];
        header.extend((1..=c).map(|i| format!("v{i}")));
        w.write_record(&header)?;
        for e in embeddings {
            let mut rec = vec![e.id.clone(), e.speaker.to_string()];
            rec.extend(e.values.iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    };
    write().map_err(|e| csv_error(path, e))
}

pub fn read_embeddings(path: &Path) -> Result<Vec<Embedding>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let bad = |what: &str| Error::format(path, format!("row {}: {what}", i + 2));
        if rec.len() < 3 {
            return Err(bad("expected utt_id, speaker_id and at least one value"));
        }
        let speaker = rec[1].parse().map_err(|_| bad("bad speaker id"))?;
        let values = rec
            .iter()
            .skip(2)
            .map(|v| v.parse::<f64>().map_err(|_| bad("bad value")))
            .collect::<Result<Vec<_>>>()?;
        out.push(Embedding {
            id: rec[0].to_string(),
            speaker,
            values,
        });
    }
    Ok(out)
}

pub const PROBE_STEPS: usize = 500;
const PROBE_LR: f64 = 0.5;

/// Held-out accuracy of a multinomial logistic regression predicting the
/// speaker from the embedding.
///
/// Each speaker's utterances are shuffled with `seed` and split in half
/// (train gets the smaller half when odd); features are standardised with
/// training statistics and the weights start at zero, so the result is a
/// function of the data and the seed. Fewer than two speakers, or fewer than
/// four utterances for any speaker, is an input error.
pub fn speaker_probe(embeddings: &[Embedding], seed: u64) -> Result<f64> {
    let dim = embeddings.first().map_or(0, |e| e.values.len());
    if dim == 0 || embeddings.iter().any(|e| e.values.len() != dim) {
        return Err(Error::Input("embeddings must be non-empty and of equal length".into()));
    }
    let mut speakers: Vec<usize> = embeddings.iter().map(|e| e.speaker).collect();
    speakers.sort_unstable();
    speakers.dedup();
    let k = speakers.len();
    if k < 2 {
        return Err(Error::Input(format!("probe needs at least 2 speakers, got {k}")));
    }
    let mut rng = Rng::new(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (class, &s) in speakers.iter().enumerate() {
        let mut mine: Vec<usize> = (0..embeddings.len()).filter(|&i| embeddings[i].speaker == s).collect();
        if mine.len() < 4 {
            return Err(Error::Input(format!("speaker {s} has {} utterances, probe needs 4", mine.len())));
        }
        rng.shuffle(&mut mine);
        let half = mine.len() / 2;
        train.extend(mine[..half].iter().map(|&i| (i, class)));
        test.extend(mine[half..].iter().map(|&i| (i, class)));
    }

    let n = train.len() as f64;
    let mut mean = vec![0.0; dim];
    for &(i, _) in &train {
        for (m, v) in mean.iter_mut().zip(&embeddings[i].values) {
            *m += v / n;
        }
    }
    let mut sd = vec![0.0; dim];
    for &(i, _) in &train {
        for j in 0..dim {
            sd[j] += (embeddings[i].values[j] - mean[j]).powi(2) / n;
        }
    }
    let sd: Vec<f64> = sd.iter().map(|v| if *v > 1e-24 { v.sqrt() } else { 1.0 }).collect();
    let standardise = |i: usize| -> Vec<f64> {
        (0..dim).map(|j| (embeddings[i].values[j] - mean[j]) / sd[j]).collect()
    };
    let xs: Vec<(Vec<f64>, usize)> = train.iter().map(|&(i, c)| (standardise(i), c)).collect();

    // Weights `[k, dim + 1]`, bias last.
    let w_len = dim + 1;
    let mut w = vec![0.0; k * w_len];
    let logits = |w: &[f64], x: &[f64]| -> Vec<f64> {
        (0..k)
            .map(|c| {
                let row = &w[c * w_len..(c + 1) * w_len];
                row[dim] + row[..dim].iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    };
    for _ in 0..PROBE_STEPS {
        let mut grad = vec![0.0; k * w_len];
        for (x, y) in &xs {
            let z = logits(&w, x);
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            for c in 0..k {
                let d = e[c] / s - f64::from(c == *y);
                let g = &mut grad[c * w_len..(c + 1) * w_len];
                for j in 0..dim {
                    g[j] += d * x[j];
                }
                g[dim] += d;
            }
        }
        for (wi, gi) in w.iter_mut().zip(&grad) {
            *wi -= PROBE_LR * gi / n;
        }
    }
    let correct = test
        .iter()
        .filter(|&&(i, c)| {
            let z = logits(&w, &standardise(i));
            let mut best = 0;
            for j in 1..k {
                if z[j] > z[best] {
                    best = j;
                }
            }
            best == c
        })
        .count();
    Ok(correct as f64 / test.len() as f64)
}
