use tstrm::nn::ForwardCtx;
use tstrm::rng::Rng;
use tstrm::tensor::Tensor;
use tstrm::transformer::{attention_weights, causal_mask, positional_encoding, Decoder, Encoder, TransformerConfig};
use tstrm::Error;

fn cfg() -> TransformerConfig {
    TransformerConfig {
        d_model: 16,
        n_heads: 4,
        d_ff: 32,
        n_encoder_layers: 2,
        n_decoder_layers: 2,
        dropout: 0.0,
    }
}

#[test]
fn attention_rows_sum_to_one() {
    let mut rng = Rng::new(1);
    for _ in 0..20 {
        let (tq, tk) = (1 + rng.below(6), 1 + rng.below(6));
        let q = Tensor::randn(&[tq, 8], 3.0, &mut rng);
        let k = Tensor::randn(&[tk, 8], 3.0, &mut rng);
        let mask = (tq == tk).then(|| causal_mask(tq));
        let w = attention_weights(&q, &k, mask.as_ref()).unwrap();
        for row in w.data().chunks(tk) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
}

#[test]
fn fully_masked_row_is_rejected() {
    let q = Tensor::zeros(&[1, 2]);
    let mask = Tensor::full(&[1, 1], f64::NEG_INFINITY);
    assert!(matches!(attention_weights(&q, &q, Some(&mask)), Err(Error::Contract(_))));
}

#[test]
fn decoder_is_causal() {
    let mut rng = Rng::new(7);
    let dec = Decoder::new(&cfg(), 9, &mut rng);
    for _ in 0..20 {
        let len = 2 + rng.below(5);
        let tokens: Vec<usize> = (0..len).map(|_| rng.below(9)).collect();
        let memory = Tensor::randn(&[1 + rng.below(6), 16], 1.0, &mut rng);
        let base = dec.forward(&tokens, &memory, &mut ForwardCtx::eval()).unwrap();
        let j = rng.below(len);
        let mut changed = tokens.clone();
        changed[j] = (tokens[j] + 1 + rng.below(8)) % 9;
        let other = dec.forward(&changed, &memory, &mut ForwardCtx::eval()).unwrap();
        let k = 9;
        assert_eq!(&base.data()[..j * k], &other.data()[..j * k], "positions before {j} moved");
        assert_ne!(&base.data()[j * k..(j + 1) * k], &other.data()[j * k..(j + 1) * k]);
    }
}

#[test]
fn encoder_preserves_length_and_width() {
    let mut rng = Rng::new(2);
    let enc = Encoder::new(&cfg(), &mut rng);
    let x = Tensor::randn(&[11, 16], 1.0, &mut rng);
    assert_eq!(enc.forward(&x, &mut ForwardCtx::eval()).unwrap().shape(), &[11, 16]);
}

#[test]
fn positional_encoding_formula() {
    let (len, d) = (7, 10);
    let pe = positional_encoding(len, d);
    for p in 0..len {
        for j in 0..d {
            let rate = 10000f64.powf((j - j % 2) as f64 / d as f64);
            let want = if j % 2 == 0 { (p as f64 / rate).sin() } else { (p as f64 / rate).cos() };
            assert!((pe.data()[p * d + j] - want).abs() < 1e-15);
        }
    }
}
