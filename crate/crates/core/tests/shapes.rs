use tstrm::backbone::{Stream, StreamConfig};
use tstrm::frontend::{Resolution, Spectrogram};
use tstrm::model::{ModelConfig, Tstrm};
use tstrm::nn::{ForwardCtx, Module};
use tstrm::rng::Rng;
use tstrm::tensor::no_grad;

/// Output extent of a 3×3, padding-1 convolution.
fn conv_out(n: usize, stride: usize) -> usize {
    (n + 2 - 3) / stride + 1
}

fn conv_params(cin: usize, cout: usize) -> usize {
    9 * cin * cout + 2 * cout
}

fn bottleneck_params(cin: usize, cout: usize, expansion: usize) -> usize {
    let h = cin * expansion;
    (cin * h + 2 * h) + (9 * h + 2 * h) + (h * cout + 2 * cout)
}

#[test]
fn standard_parameter_counts() {
    let cfg = StreamConfig::standard();
    let deep = Stream::deep(&cfg, &mut Rng::new(0)).unwrap();
    let shallow = Stream::shallow(&cfg, &mut Rng::new(0)).unwrap();

    let mut want = conv_params(1, 32);
    let mut cin = 32;
    for (cout, repeats) in [(32, 1), (32, 1), (48, 3), (64, 3), (128, 2), (256, 2)] {
        for _ in 0..repeats {
            want += bottleneck_params(cin, cout, 6);
            cin = cout;
        }
    }
    assert_eq!(want, 1_653_792);
    assert_eq!(deep.param_count(), want);
    let shallow_want = conv_params(1, 128) + conv_params(128, 256) + conv_params(256, 256);
    assert_eq!(shallow.param_count(), shallow_want);
}

#[test]
fn full_pipeline_shape_law() {
    let d = 129;
    let cfg = ModelConfig::standard(d, 10);
    assert_eq!(cfg.fused_channels(), 512);
    let model = Tstrm::new(cfg, 0).unwrap();
    let mut rng = Rng::new(1);
    for t in [64, 128, 256] {
        let spec = Spectrogram::new((0..t * d).map(|_| rng.normal()).collect(), t, d, 10.0, Resolution::High).unwrap();
        let (s_t, s_f) = (conv_out(conv_out(conv_out(t, 2), 2), 1), conv_out(conv_out(conv_out(d, 2), 2), 1));
        let low_t = t.div_ceil(4);
        let deep_strides = [2, 1, 1, 2, 2, 1, 1];
        let d_t = deep_strides.iter().fold(low_t, |n, &s| conv_out(n, s));
        let d_f = deep_strides.iter().fold(d, |n, &s| conv_out(n, s));
        assert_eq!((s_t, d_t), (t / 4, low_t / 8));

        let out = no_grad(|| model.streams(&[&spec], &ForwardCtx::eval())).unwrap();
        assert_eq!(out.shallow.unwrap()[0].dims(), (256, s_t, s_f));
        assert_eq!(out.deep.unwrap()[0].dims(), (256, d_t, d_f));
        let memory = no_grad(|| model.encode(&[&spec], &mut ForwardCtx::eval())).unwrap();
        assert_eq!(memory[0].shape(), &[s_t, 256]);
    }
}
