use candle_core::{DType, Device, Tensor};
use enlighten::discriminator::{Critic, CriticConfig};
use enlighten::generator::{upsample_conv, ConvBlock};
use enlighten::losses::{sfp_distance, sfp_loss, ExtractorConfig, FeatureExtractor, Tap};
use enlighten::nn::{Conv2d, ConvSpec, Init, Mode, ParamStore};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

fn randn(dims: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = dims.iter().product();
    let v: Vec<f32> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    Tensor::from_vec(v, dims, &Device::Cpu).unwrap()
}

fn values(t: &Tensor) -> Vec<f32> {
    t.flatten_all().unwrap().to_vec1::<f32>().unwrap()
}

fn zero_all_params(store: &ParamStore) {
    for (name, var) in store.params() {
        let fill = if name.ends_with(".gamma") { 1.0 } else { 0.0 };
        store.assign(name, &(var.ones_like().unwrap() * fill).unwrap()).unwrap();
    }
}

#[test]
fn zeroed_conv_block_outputs_zero() {
    let mut store = ParamStore::new(DType::F32, &Device::Cpu);
    let block = ConvBlock::new(&mut store, &mut Init::new(1), "b", 3, 5).unwrap();
    zero_all_params(&store);
    let y = block.forward(&randn(&[2, 3, 6, 7], 2), Mode::Eval).unwrap();
    assert_eq!(y.dims(), &[2, 5, 6, 7]);
    assert!(values(&y).iter().all(|&v| v == 0.0));
}

#[test]
fn conv_block_accepts_one_pixel_inputs() {
    let mut store = ParamStore::new(DType::F32, &Device::Cpu);
    let block = ConvBlock::new(&mut store, &mut Init::new(1), "b", 3, 4).unwrap();
    let y = block.forward(&randn(&[1, 3, 1, 1], 3), Mode::Eval).unwrap();
    assert_eq!(y.dims(), &[1, 4, 1, 1]);
}

#[test]
fn unit_kernel_sums_the_receptive_field() {
    let mut store = ParamStore::new(DType::F32, &Device::Cpu);
    let conv = Conv2d::new(&mut store, &mut Init::new(0), "c", ConvSpec::same3x3(1, 1), 0.02).unwrap();
    store.assign("c.weight", &Tensor::ones((1, 1, 3, 3), DType::F32, &Device::Cpu).unwrap()).unwrap();
    let x = Tensor::from_vec((1..=9).map(|v| v as f32).collect::<Vec<_>>(), (1, 1, 3, 3), &Device::Cpu).unwrap();
    let y = values(&conv.forward(&x).unwrap());
    assert_eq!(y[4], 45.0);
    // corner sees 1, 2, 4, 5
    assert_eq!(y[0], 12.0);
}

#[test]
fn upsample_shapes_and_constants() {
    let mut store = ParamStore::new(DType::F32, &Device::Cpu);
    let conv = Conv2d::new(&mut store, &mut Init::new(4), "up", ConvSpec::same3x3(4, 2), 0.02).unwrap();
    let y = upsample_conv(&randn(&[1, 4, 2, 2], 5), &conv).unwrap();
    assert_eq!(y.dims(), &[1, 2, 4, 4]);

    // an identity 3x3 kernel exposes the upsampled map itself
    let mut id = vec![0f32; 4 * 4 * 9];
    for c in 0..4 {
        id[(c * 4 + c) * 9 + 4] = 1.0;
    }
    let mut store = ParamStore::new(DType::F32, &Device::Cpu);
    let conv = Conv2d::new(&mut store, &mut Init::new(4), "up", ConvSpec::same3x3(4, 4), 0.02).unwrap();
    store.assign("up.weight", &Tensor::from_vec(id, (4, 4, 3, 3), &Device::Cpu).unwrap()).unwrap();
    let x = (Tensor::ones((1, 4, 3, 5), DType::F32, &Device::Cpu).unwrap() * 0.7).unwrap();
    let y = upsample_conv(&x, &conv).unwrap();
    assert_eq!(y.dims(), &[1, 4, 6, 10]);
    assert!(values(&y).iter().all(|&v| (v - 0.7).abs() < 1e-6));
}

/// Stride-2 transposed convolution (kernel 3, padding 1, output padding 1)
/// written out as a scatter, with the same weight layout as `Conv2d`.
fn transposed_conv_oracle(x: &[f32], cin: usize, h: usize, w: usize, weight: &[f32], cout: usize) -> Vec<f32> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0f32; cout * oh * ow];
    for ci in 0..cin {
        for y in 0..h {
            for xx in 0..w {
                let v = x[(ci * h + y) * w + xx];
                for co in 0..cout {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let oy = (2 * y + ky) as isize - 1;
                            let ox = (2 * xx + kx) as isize - 1;
                            if oy >= 0 && ox >= 0 && (oy as usize) < oh && (ox as usize) < ow {
                                let wv = weight[((co * cin + ci) * 3 + ky) * 3 + kx];
                                out[(co * oh + oy as usize) * ow + ox as usize] += v * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Fraction of non-DC spectral energy in the upper half of the frequency
/// band along either axis, averaged over channels.
fn high_frequency_share(data: &[f32], channels: usize, h: usize, w: usize) -> f64 {
    let mut planner = FftPlanner::<f64>::new();
    let (row_fft, col_fft) = (planner.plan_fft_forward(w), planner.plan_fft_forward(h));
    let mut share = 0.0;
    for c in 0..channels {
        let mut buf: Vec<Complex<f64>> =
            data[c * h * w..(c + 1) * h * w].iter().map(|&v| Complex::new(v as f64, 0.0)).collect();
        for row in buf.chunks_mut(w) {
            row_fft.process(row);
        }
        for x in 0..w {
            let mut col: Vec<Complex<f64>> = (0..h).map(|y| buf[y * w + x]).collect();
            col_fft.process(&mut col);
            for y in 0..h {
                buf[y * w + x] = col[y];
            }
        }
        let (mut high, mut total) = (0.0, 0.0);
        for y in 0..h {
            for x in 0..w {
                if x == 0 && y == 0 {
                    continue;
                }
                let e = buf[y * w + x].norm_sqr();
                let fy = y.min(h - y) as f64 / h as f64;
                let fx = x.min(w - x) as f64 / w as f64;
                total += e;
                if fy > 0.25 || fx > 0.25 {
                    high += e;
                }
            }
        }
        share += high / total;
    }
    share / channels as f64
}

#[test]
fn bilinear_upsampling_has_less_checkerboard_energy_than_transposed_conv() {
    let (cin, cout, h, w) = (4, 3, 16, 16);
    for seed in 0..5 {
        let mut store = ParamStore::new(DType::F32, &Device::Cpu);
        let conv = Conv2d::new(&mut store, &mut Init::new(seed), "up", ConvSpec::same3x3(cin, cout), 0.5).unwrap();
        let weight = values(conv.weight().as_tensor());
        // a smooth input isolates the artifacts introduced by upsampling
        let x: Vec<f32> = (0..cin * h * w)
            .map(|i| {
                let (c, y, xx) = (i / (h * w), (i / w) % h, i % w);
                ((y as f32 * 0.3 + c as f32).sin() + (xx as f32 * 0.2 - seed as f32).cos()) * 0.5
            })
            .collect();
        let xt = Tensor::from_vec(x.clone(), (1, cin, h, w), &Device::Cpu).unwrap();
        let ours = values(&upsample_conv(&xt, &conv).unwrap());
        let reference = transposed_conv_oracle(&x, cin, h, w, &weight, cout);
        let a = high_frequency_share(&ours, cout, 2 * h, 2 * w);
        let b = high_frequency_share(&reference, cout, 2 * h, 2 * w);
        assert!(a <= b, "seed {seed}: upsample {a:.4} vs transposed {b:.4}");
    }
}

#[test]
fn oracle_matches_conv_adjoint() {
    // <T x, y> = <x, C y> where C is the stride-2 conv with the same weights
    let (cin, cout, h, w) = (2, 3, 4, 5);
    let mut store = ParamStore::new(DType::F32, &Device::Cpu);
    let spec = ConvSpec {
        in_channels: cout,
        out_channels: cin,
        kernel: 3,
        stride: 2,
        padding: 1,
    };
    let conv = Conv2d::new(&mut store, &mut Init::new(9), "c", spec, 0.5).unwrap();
    let wt = values(conv.weight().as_tensor());
    // transpose (cin_of_conv=cout, cout_of_conv=cin) -> oracle layout (co=cout, ci=cin)
    let mut oracle_w = vec![0f32; cout * cin * 9];
    for co in 0..cout {
        for ci in 0..cin {
            for k in 0..9 {
                oracle_w[(co * cin + ci) * 9 + k] = wt[(ci * cout + co) * 9 + k];
            }
        }
    }
    let x = values(&randn(&[1, cin, h, w], 1));
    let y = randn(&[1, cout, 2 * h, 2 * w], 2);
    let tx = transposed_conv_oracle(&x, cin, h, w, &oracle_w, cout);
    let lhs: f64 = tx.iter().zip(values(&y)).map(|(a, b)| (*a as f64) * b as f64).sum();
    // bias starts at zero, so the conv is linear here
    let cy = values(&conv.forward(&y).unwrap());
    let rhs: f64 = x.iter().zip(&cy).map(|(a, b)| (*a as f64) * *b as f64).sum();
    assert!((lhs - rhs).abs() < 1e-3 * lhs.abs().max(1.0), "{lhs} {rhs}");
}

#[test]
fn zeroed_critic_scores_zero() {
    let critic = Critic::new(CriticConfig { base_channels: 8, downsample_layers: 3 }, DType::F32, &Device::Cpu, 0).unwrap();
    zero_all_params(critic.store());
    let y = critic.forward(&randn(&[2, 3, 64, 64], 1), Mode::Eval).unwrap();
    assert!(values(&y).iter().all(|&v| v == 0.0));
}

#[test]
fn critic_map_size_for_256() {
    let critic = Critic::new(CriticConfig { base_channels: 4, downsample_layers: 3 }, DType::F32, &Device::Cpu, 0).unwrap();
    let y = critic.forward(&randn(&[1, 3, 256, 256], 1), Mode::Eval).unwrap();
    assert_eq!(y.dims(), &[1, 1, 30, 30]);
}

#[test]
fn critic_is_translation_covariant() {
    let critic = Critic::new(CriticConfig { base_channels: 8, downsample_layers: 3 }, DType::F32, &Device::Cpu, 3).unwrap();
    let stride = critic.config().total_stride();
    assert_eq!(stride, 8);
    let wide = randn(&[1, 3, 160, 160 + stride], 4);
    let a = critic.forward(&wide.narrow(3, 0, 160).unwrap(), Mode::Eval).unwrap();
    let b = critic.forward(&wide.narrow(3, stride, 160).unwrap(), Mode::Eval).unwrap();
    let (_, _, oh, ow) = a.dims4().unwrap();
    let (a, b) = (values(&a), values(&b));
    // columns whose receptive field avoids the zero padding in both inputs
    for y in 3..oh - 3 {
        for x in 3..ow - 4 {
            let (p, q) = (a[y * ow + x + 1], b[y * ow + x]);
            assert!((p - q).abs() <= 1e-5 * p.abs().max(1.0), "({y},{x}) {p} {q}");
        }
    }
}

fn extractor(tap: Tap) -> FeatureExtractor {
    FeatureExtractor::load(&ExtractorConfig::seeded(3, 8, tap), DType::F32, &Device::Cpu).unwrap()
}

#[test]
fn conv5_1_features_of_224_are_14x14() {
    let e = extractor(Tap::default());
    let f = e.forward(&randn(&[1, 3, 224, 224], 1).tanh().unwrap()).unwrap();
    assert_eq!(&f.dims()[2..], &[14, 14]);
    let zeros = e.forward(&Tensor::zeros((1, 3, 32, 32), DType::F32, &Device::Cpu).unwrap()).unwrap();
    let ones = e.forward(&Tensor::ones((1, 3, 32, 32), DType::F32, &Device::Cpu).unwrap()).unwrap();
    assert_ne!(values(&zeros), values(&ones));
}

#[test]
fn sfp_distance_on_a_hand_built_pair() {
    let a = Tensor::from_vec(vec![1f32, 2., 3., 4., 0., 0., 0., 2.], (1, 2, 2, 2), &Device::Cpu).unwrap();
    let b = Tensor::from_vec(vec![4f32, 3., 2., 1., 0., 0., 0., 2.], (1, 2, 2, 2), &Device::Cpu).unwrap();
    // channel 0 normalizes to exact negatives: mean of (2 n)^2 = 4 var / (var + eps) with var = 1.25;
    // channel 1 is identical; average over the two channels
    let expected = 0.5 * 4.0 * 1.25 / (1.25 + 1e-5);
    let got = sfp_distance(&a, &b).unwrap().to_scalar::<f32>().unwrap() as f64;
    assert!((got - expected).abs() < 1e-6, "{got} {expected}");
    let back = sfp_distance(&b, &a).unwrap().to_scalar::<f32>().unwrap() as f64;
    assert_eq!(got, back);
}

#[test]
fn sfp_loss_is_symmetric_and_zero_on_identity() {
    let e = extractor(Tap { block: 3, conv: 1 });
    let x = randn(&[2, 3, 32, 32], 7).tanh().unwrap();
    let y = randn(&[2, 3, 32, 32], 8).tanh().unwrap();
    let xy = sfp_loss(&e, &x, &y).unwrap().to_scalar::<f32>().unwrap();
    let yx = sfp_loss(&e, &y, &x).unwrap().to_scalar::<f32>().unwrap();
    assert!((xy - yx).abs() <= 1e-6 * xy.abs().max(1.0));
    assert!(xy > 0.0);
    assert_eq!(sfp_loss(&e, &x, &x).unwrap().to_scalar::<f32>().unwrap(), 0.0);
}
