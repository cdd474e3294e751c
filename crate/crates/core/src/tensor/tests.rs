use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::bilinear_profile;
use super::*;

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(7)
}

fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn at(t: &Tensor<f64>, idx: [usize; 4]) -> f64 {
    let [_, c, h, w] = t.dims4().unwrap();
    t.data()[((idx[0] * c + idx[1]) * h + idx[2]) * w + idx[3]]
}

/// Direct per-output-element sum over the kernel support.
fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let [n, ci, h, wd] = x.dims4().unwrap();
    let [co, _, k, _] = w.dims4().unwrap();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(&[n, co, oh, ow]);
    let mut i = 0;
    for b_ in 0..n {
        for o in 0..co {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut s = b.data()[o];
                    for c in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xx * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    s += at(x, [b_, c, iy as usize, ix as usize]) * at(w, [o, c, ky, kx]);
                                }
                            }
                        }
                    }
                    out.data_mut()[i] = s;
                    i += 1;
                }
            }
        }
    }
    out
}

#[test]
fn conv_all_ones_center_is_nine() {
    let x = Tensor::<f64>::full(&[1, 1, 3, 3], 1.0);
    let w = Tensor::full(&[1, 1, 3, 3], 1.0);
    let b = Tensor::zeros(&[1]);
    let y = conv2d(&x, &w, &b, 1, 1).unwrap();
    assert_eq!(y.shape(), &[1, 1, 3, 3]);
    assert_eq!(y.data()[4], 9.0);
    assert_eq!(y.data()[0], 4.0);
}

#[test]
fn conv_identity_kernel_copies_input() {
    let mut r = rng();
    let x = random(&[1, 1, 5, 7], &mut r);
    let mut w = Tensor::zeros(&[1, 1, 3, 3]);
    w.data_mut()[4] = 1.0;
    let y = conv2d(&x, &w, &Tensor::zeros(&[1]), 1, 1).unwrap();
    assert_eq!(y.data(), x.data());
}

#[test]
fn conv_matches_sliding_window_oracle() {
    let mut r = rng();
    let x = random(&[2, 4, 8, 8], &mut r);
    let w = random(&[6, 4, 3, 3], &mut r);
    let b = random(&[6], &mut r);
    for (stride, pad) in [(1, 1), (1, 0), (2, 1), (3, 2)] {
        let got = conv2d(&x, &w, &b, stride, pad).unwrap();
        let want = conv_oracle(&x, &w, &b, stride, pad);
        assert_eq!(got.shape(), want.shape());
        for (g, e) in got.data().iter().zip(want.data()) {
            assert!((g - e).abs() < 1e-12, "stride {stride} pad {pad}: {g} vs {e}");
        }
    }
}

#[test]
fn conv_rejects_channel_mismatch() {
    let x = Tensor::<f64>::zeros(&[1, 3, 4, 4]);
    let w = Tensor::zeros(&[2, 4, 3, 3]);
    assert!(matches!(
        conv2d(&x, &w, &Tensor::zeros(&[2]), 1, 1),
        Err(Error::InvalidShape(_))
    ));
}

#[test]
fn maxpool_basic_and_ties() {
    let x = Tensor::new(&[1, 1, 2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
    let (y, arg) = maxpool2x2(&x).unwrap();
    assert_eq!(y.data(), &[4.0]);
    assert_eq!(arg, vec![3]);

    let x = Tensor::<f64>::full(&[1, 1, 4, 4], 2.5);
    let (y, arg) = maxpool2x2(&x).unwrap();
    assert!(y.data().iter().all(|v| *v == 2.5));
    // first element of each window in row-major order
    assert_eq!(arg, vec![0, 2, 8, 10]);
}

#[test]
fn maxpool_matches_window_scan() {
    let mut r = rng();
    let x = random(&[1, 3, 8, 8], &mut r);
    let (y, _) = maxpool2x2(&x).unwrap();
    for c in 0..3 {
        for oy in 0..4 {
            for ox in 0..4 {
                let m = [(0, 0), (0, 1), (1, 0), (1, 1)]
                    .iter()
                    .map(|(dy, dx)| at(&x, [0, c, 2 * oy + dy, 2 * ox + dx]))
                    .fold(f64::NEG_INFINITY, f64::max);
                assert_eq!(at(&y, [0, c, oy, ox]), m);
            }
        }
    }
}

#[test]
fn maxpool_rejects_odd() {
    let x = Tensor::<f64>::zeros(&[1, 1, 3, 4]);
    assert!(matches!(maxpool2x2(&x), Err(Error::InvalidShape(_))));
}

#[test]
fn maxpool_gradient_hits_one_element_per_window() {
    let mut r = rng();
    let mut g = Graph::<f64>::new();
    let x = g.param("x", &random(&[1, 2, 6, 6], &mut r));
    let y = g.maxpool2x2(x).unwrap();
    let l = g.sum(y).unwrap();
    g.forward().unwrap();
    g.backward(l).unwrap();
    let gx = g.grad(x).unwrap();
    for c in 0..2 {
        for oy in 0..3 {
            for ox in 0..3 {
                let nz = [(0, 0), (0, 1), (1, 0), (1, 1)]
                    .iter()
                    .filter(|(dy, dx)| gx[(c * 6 + 2 * oy + dy) * 6 + 2 * ox + dx] != 0.0)
                    .count();
                assert_eq!(nz, 1);
            }
        }
    }
}

fn bilinear_weights(channels: usize, factor: usize) -> Tensor<f64> {
    let p = bilinear_profile(factor);
    let k = 2 * factor;
    let mut w = Tensor::zeros(&[channels, channels, k, k]);
    for c in 0..channels {
        for ky in 0..k {
            for kx in 0..k {
                w.data_mut()[((c * channels + c) * k + ky) * k + kx] = p[ky] * p[kx];
            }
        }
    }
    w
}

/// Dense matrix of the strided convolution whose adjoint is the transposed
/// convolution; `deconv(x) = Aᵀ x`.
fn deconv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, factor: usize) -> Tensor<f64> {
    let [n, ci, h, wd] = x.dims4().unwrap();
    let [_, co, k, _] = w.dims4().unwrap();
    let pad = factor / 2;
    let (oh, ow) = (h * factor, wd * factor);
    let rows = ci * h * wd;
    let cols = co * oh * ow;
    let mut a = vec![0.0; rows * cols];
    for c in 0..ci {
        for iy in 0..h {
            for ix in 0..wd {
                let r = (c * h + iy) * wd + ix;
                for o in 0..co {
                    for ky in 0..k {
                        for kx in 0..k {
                            let oy = (iy * factor + ky) as isize - pad as isize;
                            let ox = (ix * factor + kx) as isize - pad as isize;
                            if oy >= 0 && ox >= 0 && (oy as usize) < oh && (ox as usize) < ow {
                                let col = (o * oh + oy as usize) * ow + ox as usize;
                                a[r * cols + col] += at(w, [c, o, ky, kx]);
                            }
                        }
                    }
                }
            }
        }
    }
    let mut out = Tensor::zeros(&[n, co, oh, ow]);
    for b in 0..n {
        for col in 0..cols {
            let mut s = 0.0;
            for r in 0..rows {
                s += a[r * cols + col] * x.data()[b * rows + r];
            }
            out.data_mut()[b * cols + col] = s;
        }
    }
    out
}

#[test]
fn deconv_impulse_response_is_bilinear_stencil() {
    let mut x = Tensor::zeros(&[1, 1, 4, 4]);
    x.data_mut()[5] = 1.0; // (1, 1)
    let w = bilinear_weights(1, 2);
    let y = deconv2d(&x, &w, 2).unwrap();
    let p = bilinear_profile(2);
    // input pixel 1 maps to output rows/cols 2-1 ..= 2-1+3
    for oy in 0..8 {
        for ox in 0..8 {
            let ky = oy as isize - 1;
            let kx = ox as isize - 1;
            let want = if (0..4).contains(&ky) && (0..4).contains(&kx) {
                p[ky as usize] * p[kx as usize]
            } else {
                0.0
            };
            assert!((at(&y, [0, 0, oy, ox]) - want).abs() < 1e-15);
        }
    }
}

#[test]
fn deconv_constant_input_gives_constant_interior() {
    for factor in [2, 8] {
        let x = Tensor::full(&[1, 1, 4, 4], 3.0);
        let w = bilinear_weights(1, factor);
        let y = deconv2d(&x, &w, factor).unwrap();
        let want = deconv_oracle(&x, &w, factor);
        let n = 4 * factor;
        for oy in factor..n - factor {
            for ox in factor..n - factor {
                assert!((at(&y, [0, 0, oy, ox]) - 3.0).abs() < 1e-12);
                assert!((at(&y, [0, 0, oy, ox]) - at(&want, [0, 0, oy, ox])).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn deconv_matches_matrix_transpose_oracle() {
    let mut r = rng();
    let x = random(&[1, 2, 4, 4], &mut r);
    for factor in [2, 8] {
        let w = random(&[2, 3, 2 * factor, 2 * factor], &mut r);
        let got = deconv2d(&x, &w, factor).unwrap();
        assert_eq!(got.shape(), &[1, 3, 4 * factor, 4 * factor]);
        let want = deconv_oracle(&x, &w, factor);
        for (g, e) in got.data().iter().zip(want.data()) {
            assert!((g - e).abs() < 1e-12);
        }
    }
}

#[test]
fn deconv_rejects_unsupported_factor() {
    let x = Tensor::<f64>::zeros(&[1, 1, 4, 4]);
    let w = Tensor::zeros(&[1, 1, 8, 8]);
    assert!(matches!(deconv2d(&x, &w, 4), Err(Error::InvalidConfig(_))));
}

#[test]
fn elementwise_examples() {
    let x = Tensor::new(&[3], vec![-1.0f64, 0.0, 2.0]).unwrap();
    assert_eq!(elementwise(Elementwise::Relu, &[&x]).unwrap().data(), &[0.0, 0.0, 2.0]);
    let z = Tensor::new(&[1], vec![0.0f64]).unwrap();
    assert_eq!(elementwise(Elementwise::Sigmoid, &[&z]).unwrap().data(), &[0.5]);
    let a = Tensor::new(&[2], vec![2.0f64, 4.0]).unwrap();
    let b = Tensor::new(&[2], vec![2.0f64, 2.0]).unwrap();
    assert_eq!(elementwise(Elementwise::Div, &[&a, &b]).unwrap().data(), &[1.0, 2.0]);
    let zero = Tensor::new(&[2], vec![1.0f64, 0.0]).unwrap();
    assert!(matches!(
        elementwise(Elementwise::Div, &[&a, &zero]),
        Err(Error::DivisionByZero { index: 1 })
    ));
}

#[test]
fn graph_div_by_zero_fails_forward() {
    let mut g = Graph::<f64>::new();
    let a = g.input(&[2]);
    let b = g.input(&[2]);
    let q = g.div(a, b).unwrap();
    let _ = q;
    g.set_value(a, &[1.0, 1.0]).unwrap();
    g.set_value(b, &[1.0, 0.0]).unwrap();
    assert!(matches!(g.forward(), Err(Error::DivisionByZero { .. })));
}

#[test]
fn concat_then_slice_round_trips() {
    let mut r = rng();
    let a = random(&[1, 2, 2, 2], &mut r);
    let b = random(&[1, 3, 2, 2], &mut r);
    let c = concat_channels(&a, &b).unwrap();
    assert_eq!(c.shape(), &[1, 5, 2, 2]);
    assert_eq!(slice_channels(&c, 0, 2).unwrap().data(), a.data());
    assert_eq!(slice_channels(&c, 2, 3).unwrap().data(), b.data());
    let bad = Tensor::<f64>::zeros(&[1, 1, 3, 2]);
    assert!(matches!(concat_channels(&a, &bad), Err(Error::InvalidShape(_))));
}

fn ce_oracle(logits: &Tensor<f64>, labels: &[u8], ignore: &[bool]) -> f64 {
    let [_, c, h, w] = logits.dims4().unwrap();
    let mut total = 0.0;
    let mut count = 0;
    for p in 0..h * w {
        if ignore[p] {
            continue;
        }
        let z: f64 = (0..c).map(|k| logits.data()[k * h * w + p].exp()).sum();
        let pt = logits.data()[labels[p] as usize * h * w + p].exp() / z;
        total += -pt.ln();
        count += 1;
    }
    total / count as f64
}

#[test]
fn softmax_ce_uniform_and_limit() {
    let logits = Tensor::<f64>::zeros(&[1, 4, 2, 2]);
    let (loss, _) = softmax_cross_entropy(&logits, &[0, 1, 2, 3], &[false; 4]).unwrap();
    assert!((loss - 4f64.ln()).abs() < 1e-12);

    let mut prev = f64::INFINITY;
    for margin in [1.0, 5.0, 20.0, 60.0] {
        let mut l = Tensor::<f64>::zeros(&[1, 2, 1, 1]);
        l.data_mut()[0] = margin;
        let (loss, _) = softmax_cross_entropy(&l, &[0], &[false]).unwrap();
        assert!(loss < prev);
        prev = loss;
    }
    assert!(prev < 1e-20);
}

#[test]
fn softmax_ce_matches_direct_oracle() {
    let mut r = rng();
    let logits = random(&[1, 3, 2, 2], &mut r);
    let labels = [0u8, 2, 1, 1];
    let ignore = [false, false, true, false];
    let (loss, grad) = softmax_cross_entropy(&logits, &labels, &ignore).unwrap();
    assert!((loss - ce_oracle(&logits, &labels, &ignore)).abs() < 1e-12);
    // masked pixel receives no gradient
    for c in 0..3 {
        assert_eq!(grad.data()[c * 4 + 2], 0.0);
    }
    assert!(matches!(
        softmax_cross_entropy(&logits, &[0, 3, 0, 0], &[false; 4]),
        Err(Error::InvalidLabel { label: 3, classes: 3 })
    ));
}

#[test]
fn backward_of_sum_is_ones_and_relu_masks() {
    let mut g = Graph::<f64>::new();
    let x = g.param("x", &Tensor::new(&[4], vec![-1.0, 2.0, -3.0, 4.0]).unwrap());
    let s = g.sum(x).unwrap();
    let r = g.relu(x).unwrap();
    let sr = g.sum(r).unwrap();
    g.forward().unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0; 4]);
    g.backward(sr).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[0.0, 1.0, 0.0, 1.0]);
}

#[test]
fn backward_before_forward_is_a_state_error() {
    let mut g = Graph::<f64>::new();
    let x = g.param("x", &Tensor::zeros(&[2]));
    let s = g.sum(x).unwrap();
    assert!(matches!(g.backward(s), Err(Error::State(_))));
}

#[test]
fn repeated_operand_gradients_accumulate() {
    let mut g = Graph::<f64>::new();
    let x = g.param("x", &Tensor::new(&[2], vec![3.0, -2.0]).unwrap());
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq).unwrap();
    g.forward().unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[6.0, -4.0]);
}

#[test]
fn gradient_of_concat_sum_splits_exactly() {
    let mut r = rng();
    let mut g = Graph::<f64>::new();
    let a = g.param("a", &random(&[1, 2, 3, 3], &mut r));
    let b = g.param("b", &random(&[1, 1, 3, 3], &mut r));
    let c = g.concat_channels(a, b).unwrap();
    let sq = g.mul(c, c).unwrap();
    let l = g.sum(sq).unwrap();
    for p in [a, b] {
        let err = grad_check(&mut g, l, p, 1e-5, 50, &mut r).unwrap();
        assert!(err < 1e-8, "{err}");
    }
}

#[test]
fn grad_check_linear_graph_is_exact() {
    let mut r = rng();
    let mut g = Graph::<f64>::new();
    let x = g.param("x", &random(&[1, 2, 4, 4], &mut r));
    let s = g.scale(x, 3.5).unwrap();
    let l = g.sum(s).unwrap();
    let err = grad_check(&mut g, l, x, 1e-5, 32, &mut r).unwrap();
    assert!(err < 1e-10, "{err}");
}

#[test]
fn forward_is_bitwise_deterministic() {
    let mut r = rng();
    let x = random(&[1, 3, 8, 8], &mut r).cast::<f32>();
    let w = random(&[4, 3, 3, 3], &mut r).cast::<f32>();
    let b = random(&[4], &mut r).cast::<f32>();
    let build = || {
        let mut g = Graph::<f32>::new();
        let xi = g.param("x", &x);
        let wi = g.param("w", &w);
        let bi = g.param("b", &b);
        let c = g.conv2d(xi, wi, bi, 1, 1).unwrap();
        let rl = g.relu(c).unwrap();
        let p = g.maxpool2x2(rl).unwrap();
        let l = g.sum(p).unwrap();
        g.forward().unwrap();
        g.backward(l).unwrap();
        (g.value(l).to_vec(), g.grad(wi).unwrap().to_vec())
    };
    assert_eq!(build(), build());
}

#[test]
fn checkpoint_rejects_garbage_and_round_trips() {
    let mut set = ParamSet::new();
    set.insert("conv1.w", Tensor::from_fn(&[2, 1, 3, 3], |i| i as f32 * 0.5));
    set.insert("conv1.b", Tensor::from_fn(&[2], |i| -(i as f32)));
    let bytes = set.to_bytes();
    assert_eq!(&bytes[..4], b"SMCK");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    let back = ParamSet::from_bytes(&bytes, std::path::Path::new("x")).unwrap();
    assert_eq!(back, set);
    assert!(ParamSet::from_bytes(&bytes[..bytes.len() - 1], std::path::Path::new("x")).is_err());
    assert!(ParamSet::from_bytes(b"NOPE\x01\0\0\0\0\0\0\0", std::path::Path::new("x")).is_err());
}
