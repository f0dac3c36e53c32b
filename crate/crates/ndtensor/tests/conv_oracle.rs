//! Convolution and transposed convolution checked against independent
//! quadruple-loop oracles on randomized shapes, plus the hand-computable
//! cases.

use ndtensor::conv::{
    conv2d_forward, deconv2d_forward, ConvSpec, DeconvSpec, PadMode,
};
use ndtensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn randt(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| (rng.gen::<f64>() - 0.5) * 2.0 * scale)
}

/// Direct-definition convolution: no im2col, no GEMM.
fn naive_conv2d(x: &Tensor, w: &Tensor, b: Option<&Tensor>, spec: &ConvSpec) -> Tensor {
    let [n, c, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let (oh, ow) = spec.out_extent((h, wd)).unwrap();
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (dh, dw) = spec.dilation;
    let (ph, pw) = spec.padding;
    let oc = spec.out_channels;
    let fetch = |ni: usize, ci: usize, i: isize, j: isize| -> f64 {
        match spec.pad_mode {
            PadMode::Zero => {
                if i < 0 || j < 0 || i >= h as isize || j >= wd as isize {
                    0.0
                } else {
                    x.at(&[ni, ci, i as usize, j as usize])
                }
            }
            PadMode::Replicate => {
                let i = i.clamp(0, h as isize - 1) as usize;
                let j = j.clamp(0, wd as isize - 1) as usize;
                x.at(&[ni, ci, i, j])
            }
        }
    };
    Tensor::from_fn(&[n, oc, oh, ow], |idx| {
        let (ni, oci, oi, oj) = (idx[0], idx[1], idx[2], idx[3]);
        let mut acc = b.map_or(0.0, |b| b.data()[oci]);
        for ci in 0..c {
            for ki in 0..kh {
                for kj in 0..kw {
                    let i = (oi * sh + ki * dh) as isize - ph as isize;
                    let j = (oj * sw + kj * dw) as isize - pw as isize;
                    acc += w.at(&[oci, ci, ki, kj]) * fetch(ni, ci, i, j);
                }
            }
        }
        acc
    })
}

/// Direct-definition transposed convolution (scatter form).
fn naive_deconv2d(x: &Tensor, w: &Tensor, b: Option<&Tensor>, spec: &DeconvSpec) -> Tensor {
    let [n, c, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let (oh, ow) = spec.out_extent((h, wd)).unwrap();
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let oc = spec.out_channels;
    let mut out = Tensor::from_fn(&[n, oc, oh, ow], |idx| b.map_or(0.0, |b| b.data()[idx[1]]));
    for ni in 0..n {
        for ci in 0..c {
            for ii in 0..h {
                for jj in 0..wd {
                    let xv = x.at(&[ni, ci, ii, jj]);
                    for oci in 0..oc {
                        let wv_base = [ci, oci];
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let oi = (ii * sh + ki) as isize - ph as isize;
                                let oj = (jj * sw + kj) as isize - pw as isize;
                                if oi < 0 || oj < 0 || oi >= oh as isize || oj >= ow as isize {
                                    continue;
                                }
                                let prev = out.at(&[ni, oci, oi as usize, oj as usize]);
                                out.set(
                                    &[ni, oci, oi as usize, oj as usize],
                                    prev + xv * w.at(&[wv_base[0], wv_base[1], ki, kj]),
                                );
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[test]
fn identity_1x1_kernel() {
    let x = Tensor::from_fn(&[1, 1, 3, 3], |i| (i[2] * 3 + i[3]) as f64);
    let w = Tensor::new(&[1, 1, 1, 1], vec![1.0]).unwrap();
    let b = Tensor::new(&[1], vec![0.0]).unwrap();
    let spec = ConvSpec::simple((1, 1), 1, 1);
    let y = conv2d_forward(&x, &w, Some(&b), &spec).unwrap();
    assert_eq!(x, y);
}

#[test]
fn two_by_two_all_ones_dot_product() {
    let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let w = Tensor::full(&[1, 1, 2, 2], 1.0);
    let spec = ConvSpec::simple((2, 2), 1, 1);
    let y = conv2d_forward(&x, &w, None, &spec).unwrap();
    assert_eq!(y.shape(), &[1, 1, 1, 1]);
    assert_eq!(y.data()[0], 10.0);
}

#[test]
fn strided_5x5_shape() {
    let x = Tensor::zeros(&[1, 1, 160, 160]);
    let spec = ConvSpec::simple((5, 5), 1, 7).with_stride((5, 5));
    let w = Tensor::zeros(&[7, 1, 5, 5]);
    let y = conv2d_forward(&x, &w, None, &spec).unwrap();
    assert_eq!(y.shape(), &[1, 7, 32, 32]);
}

#[test]
fn deconv_k2_s2_ones_block_replicates() {
    let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let w = Tensor::full(&[1, 1, 2, 2], 1.0);
    let spec = DeconvSpec {
        kernel: (2, 2),
        stride: (2, 2),
        padding: (0, 0),
        in_channels: 1,
        out_channels: 1,
    };
    let y = deconv2d_forward(&x, &w, None, &spec).unwrap();
    let oracle = naive_deconv2d(&x, &w, None, &spec);
    assert_eq!(y.shape(), &[1, 1, 4, 4]);
    assert_eq!(y, oracle);
    let expect = vec![
        1.0, 1.0, 2.0, 2.0, //
        1.0, 1.0, 2.0, 2.0, //
        3.0, 3.0, 4.0, 4.0, //
        3.0, 3.0, 4.0, 4.0,
    ];
    assert_eq!(y.data(), expect.as_slice());
}

#[test]
fn conv_matches_naive_oracle_on_random_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x0c0a57);
    for trial in 0..40 {
        let n = rng.gen_range(1..=2);
        let c = rng.gen_range(1..=3);
        let oc = rng.gen_range(1..=3);
        let kh = rng.gen_range(1..=3);
        let kw = rng.gen_range(1..=4);
        let sh = rng.gen_range(1..=2);
        let sw = rng.gen_range(1..=2);
        let dh = rng.gen_range(1..=2);
        let dw = rng.gen_range(1..=2);
        let ph = rng.gen_range(0..=2);
        let pw = rng.gen_range(0..=2);
        let mode = if rng.gen_bool(0.5) { PadMode::Zero } else { PadMode::Replicate };
        let h = rng.gen_range(4..=8).max(dh * (kh - 1) + 1);
        let w = rng.gen_range(4..=8).max(dw * (kw - 1) + 1);
        let spec = ConvSpec {
            kernel: (kh, kw),
            stride: (sh, sw),
            dilation: (dh, dw),
            padding: (ph, pw),
            pad_mode: mode,
            in_channels: c,
            out_channels: oc,
        };
        let x = randt(&mut rng, &[n, c, h, w], 1.0);
        let wt = randt(&mut rng, &spec.weight_shape(), 1.0);
        let b = randt(&mut rng, &[oc], 1.0);
        let fast = conv2d_forward(&x, &wt, Some(&b), &spec).unwrap();
        let slow = naive_conv2d(&x, &wt, Some(&b), &spec);
        assert!(
            fast.max_abs_diff(&slow) <= 1e-12,
            "trial {trial}: conv mismatch {:e} for {spec:?}",
            fast.max_abs_diff(&slow)
        );
    }
}

#[test]
fn deconv_matches_naive_oracle_on_random_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xdec0);
    for trial in 0..40 {
        let n = rng.gen_range(1..=2);
        let c = rng.gen_range(1..=3);
        let oc = rng.gen_range(1..=3);
        let kh = rng.gen_range(1..=3);
        let kw = rng.gen_range(1..=3);
        let sh = rng.gen_range(1..=3);
        let sw = rng.gen_range(1..=3);
        let spec = DeconvSpec {
            kernel: (kh, kw),
            stride: (sh, sw),
            padding: (rng.gen_range(0..=1).min(kh.saturating_sub(1)), 0),
            in_channels: c,
            out_channels: oc,
        };
        let h = rng.gen_range(2..=5);
        let w = rng.gen_range(2..=5);
        if spec.out_extent((h, w)).is_err() {
            continue;
        }
        let x = randt(&mut rng, &[n, c, h, w], 1.0);
        let wt = randt(&mut rng, &spec.weight_shape(), 1.0);
        let b = randt(&mut rng, &[oc], 1.0);
        let fast = deconv2d_forward(&x, &wt, Some(&b), &spec).unwrap();
        let slow = naive_deconv2d(&x, &wt, Some(&b), &spec);
        assert!(
            fast.max_abs_diff(&slow) <= 1e-12,
            "trial {trial}: deconv mismatch for {spec:?}"
        );
    }
}

#[test]
fn deconv_output_extent_formula() {
    // (in-1)*s + k - 2p
    let spec = DeconvSpec {
        kernel: (3, 3),
        stride: (2, 2),
        padding: (1, 1),
        in_channels: 1,
        out_channels: 1,
    };
    assert_eq!(spec.out_extent((5, 7)).unwrap(), (9, 13));
}

#[test]
fn conv_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let spec = ConvSpec::simple((3, 3), 2, 4).with_padding((1, 1));
    let x = randt(&mut rng, &[2, 2, 6, 6], 1.0);
    let w = randt(&mut rng, &spec.weight_shape(), 1.0);
    let b = randt(&mut rng, &[4], 1.0);
    let y1 = conv2d_forward(&x, &w, Some(&b), &spec).unwrap();
    let y2 = conv2d_forward(&x, &w, Some(&b), &spec).unwrap();
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&y1), bits(&y2));
}

#[test]
fn shape_errors_are_reported() {
    let x = Tensor::zeros(&[1, 2, 4, 4]);
    let w = Tensor::zeros(&[3, 1, 3, 3]); // wrong in_channels
    let spec = ConvSpec::simple((3, 3), 2, 3);
    assert!(conv2d_forward(&x, &w, None, &spec).is_err());
    let w2 = Tensor::zeros(&[3, 2, 3, 3]);
    let b_bad = Tensor::zeros(&[4]);
    assert!(conv2d_forward(&x, &w2, Some(&b_bad), &spec).is_err());
}
