mod common;

use common::{all_paths, brute_levenshtein};
use proptest::prelude::*;
use tstrm::decode::{align, beam_decode, edit_distance_rate, greedy_decode};
use tstrm::rng::Rng;
use tstrm::Result;

/// Next-token distributions that depend on the whole prefix, drawn from a
/// hash of it so that the scorer is deterministic.
fn table_scorer(seed: u64, classes: usize) -> impl Fn(&[usize]) -> Result<Vec<f64>> {
    move |prefix: &[usize]| {
        let key = prefix.iter().fold(seed, |h, &k| h.wrapping_mul(31).wrapping_add(k as u64 + 1));
        let mut rng = Rng::new(key);
        let z: Vec<f64> = (0..classes).map(|_| 2.0 * rng.normal()).collect();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        Ok(z.iter().map(|v| v - lse).collect())
    }
}

#[test]
fn beam_of_one_is_greedy() {
    for seed in 0..20 {
        let scorer = table_scorer(seed, 5);
        let g = greedy_decode(&scorer, 4, 6).unwrap();
        let b = beam_decode(&scorer, 4, 1, 6).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].tokens, g.tokens, "seed {seed}");
        assert!((b[0].score - g.score).abs() < 1e-12);
    }
}

#[test]
fn beam_two_finds_exhaustive_top_two() {
    // Toy model: eos (id 2) is only available after two tokens, so every
    // hypothesis has exactly three tokens and length normalisation is moot.
    let scorer = |p: &[usize]| -> Result<Vec<f64>> {
        Ok(match p {
            [] => vec![0.6f64.ln(), 0.4f64.ln(), f64::NEG_INFINITY],
            [a] => {
                if *a == 0 {
                    vec![0.3f64.ln(), 0.7f64.ln(), f64::NEG_INFINITY]
                } else {
                    vec![0.9f64.ln(), 0.1f64.ln(), f64::NEG_INFINITY]
                }
            }
            _ => vec![f64::NEG_INFINITY, f64::NEG_INFINITY, 0.0],
        })
    };
    let mut exhaustive: Vec<(Vec<usize>, f64)> = all_paths(2, 2)
        .into_iter()
        .map(|p| {
            let s = scorer(&[]).unwrap()[p[0]] + scorer(&p[..1]).unwrap()[p[1]];
            (p, s)
        })
        .collect();
    exhaustive.sort_by(|a, b| b.1.total_cmp(&a.1));
    let beams = beam_decode(&scorer, 2, 2, 5).unwrap();
    assert_eq!(beams.len(), 2);
    for (h, (p, s)) in beams.iter().zip(&exhaustive) {
        assert!(h.finished);
        assert_eq!(h.transcript(), &p[..]);
        assert!((h.score - s).abs() < 1e-12);
    }
}

#[test]
fn levenshtein_matches_recursion() {
    let mut rng = Rng::new(10);
    for _ in 0..200 {
        let a: Vec<usize> = (0..rng.below(7)).map(|_| rng.below(4)).collect();
        let b: Vec<usize> = (0..rng.below(7)).map(|_| rng.below(4)).collect();
        assert_eq!(align(&a, &b).distance(), brute_levenshtein(&a, &b), "{a:?} vs {b:?}");
    }
}

#[test]
fn rate_can_exceed_one() {
    let r = edit_distance_rate(&[1, 2, 3, 4], &[5]).unwrap();
    assert_eq!(r, 4.0);
}

proptest! {
    #[test]
    fn distance_is_a_metric(
        a in proptest::collection::vec(0u8..4, 0..7),
        b in proptest::collection::vec(0u8..4, 0..7),
        c in proptest::collection::vec(0u8..4, 0..7),
    ) {
        let d = |x: &[u8], y: &[u8]| align(x, y).distance();
        prop_assert_eq!(d(&a, &a), 0);
        prop_assert_eq!(d(&a, &b), d(&b, &a));
        prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c));
        let counts = align(&a, &b);
        prop_assert_eq!(counts.reference_len, b.len());
        prop_assert_eq!(counts.insertions + b.len(), a.len() + counts.deletions);
    }
}
