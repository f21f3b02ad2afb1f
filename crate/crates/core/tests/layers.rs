use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparse_depth::layers::*;
use sparse_depth::tensor::{Mask, Shape4, Tensor4};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_tensor(r: &mut ChaCha8Rng, shape: Shape4) -> Tensor4 {
    Tensor4::from_fn(shape, |_, _, _, _| r.gen_range(-1.0..1.0))
}

fn random_mask(r: &mut ChaCha8Rng, n: usize, h: usize, w: usize, density: f64) -> Mask {
    Mask::from_fn(n, h, w, |_, _, _| r.gen_bool(density))
}

fn random_params(r: &mut ChaCha8Rng, oc: usize, ic: usize, k: usize) -> ConvParams {
    let ks = 2 * k + 1;
    let w = random_tensor(r, Shape4::new(oc, ic, ks, ks));
    let b = (0..oc).map(|_| r.gen_range(-1.0..1.0)).collect();
    ConvParams::new(w, b).unwrap()
}

/// Reads `t` at a signed position, returning `None` outside the image.
fn at(t: &Tensor4, n: usize, c: usize, y: isize, x: isize) -> Option<f64> {
    let s = t.shape();
    if y < 0 || x < 0 || y >= s.h as isize || x >= s.w as isize {
        None
    } else {
        Some(t.get(n, c, y as usize, x as usize))
    }
}

/// Direct per-pixel evaluation of the standard convolution.
fn naive_conv(x: &Tensor4, p: &ConvParams) -> Tensor4 {
    let s = x.shape();
    let k = p.k() as isize;
    Tensor4::from_fn(Shape4::new(s.n, p.out_channels(), s.h, s.w), |n, o, y, xx| {
        let mut acc = 0.0;
        for c in 0..s.c {
            for i in -k..=k {
                for j in -k..=k {
                    if let Some(v) = at(x, n, c, y as isize + i, xx as isize + j) {
                        acc += v * p.weights().get(o, c, (i + k) as usize, (j + k) as usize);
                    }
                }
            }
        }
        acc + p.bias()[o]
    })
}

/// Direct per-pixel evaluation of the normalized sparse convolution and its
/// window-max mask.
fn naive_sparse(x: &Tensor4, o: &Mask, p: &ConvParams, eps: f64) -> (Tensor4, Tensor4) {
    let s = x.shape();
    let k = p.k() as isize;
    let m = o.as_tensor();
    let out = Tensor4::from_fn(Shape4::new(s.n, p.out_channels(), s.h, s.w), |n, oc, y, xx| {
        let (mut num, mut den) = (0.0, 0.0);
        for i in -k..=k {
            for j in -k..=k {
                let (yy, xj) = (y as isize + i, xx as isize + j);
                let Some(ov) = at(m, n, 0, yy, xj) else { continue };
                den += ov;
                for c in 0..s.c {
                    let w = p.weights().get(oc, c, (i + k) as usize, (j + k) as usize);
                    num += ov * at(x, n, c, yy, xj).unwrap() * w;
                }
            }
        }
        num / (den + eps) + p.bias()[oc]
    });
    let mask = Tensor4::from_fn(Shape4::new(s.n, 1, s.h, s.w), |n, _, y, xx| {
        let mut best: f64 = 0.0;
        for i in -k..=k {
            for j in -k..=k {
                if let Some(v) = at(m, n, 0, y as isize + i, xx as isize + j) {
                    best = best.max(v);
                }
            }
        }
        best
    });
    (out, mask)
}

/// Relative comparison; `floor` bounds the scale from below so outputs that
/// cancel to nearly zero (from O(1) terms) are compared at O(1) precision.
fn assert_close(a: &Tensor4, b: &Tensor4, rel: f64, floor: f64) {
    assert_eq!(a.shape(), b.shape());
    for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
        let scale = x.abs().max(y.abs()).max(floor);
        assert!((x - y).abs() <= rel * scale, "element {i}: {x} vs {y}");
    }
}

#[test]
fn conv_averaging_kernel_on_constant_input() {
    let x = Tensor4::ones(Shape4::new(1, 1, 3, 3));
    let p = ConvParams::new(Tensor4::full(Shape4::new(1, 1, 3, 3), 1.0 / 9.0), vec![0.0]).unwrap();
    let y = conv2d_forward(&x, &p).unwrap();
    assert!((y.get(0, 0, 1, 1) - 1.0).abs() < 1e-15);
}

#[test]
fn conv_zero_weights_gives_bias() {
    let mut r = rng(1);
    let x = random_tensor(&mut r, Shape4::new(2, 3, 5, 4));
    let mut p = ConvParams::zeros(2, 3, 1);
    p.bias_mut().fill(2.5);
    let y = conv2d_forward(&x, &p).unwrap();
    assert!(y.data().iter().all(|&v| v == 2.5));
}

#[test]
fn conv_matches_naive_oracle() {
    for seed in 0..10 {
        let mut r = rng(seed);
        let (ic, oc, k) = (r.gen_range(1..4), r.gen_range(1..10), r.gen_range(0..4));
        let x = random_tensor(&mut r, Shape4::new(2, ic, 7, 9));
        let p = random_params(&mut r, oc, ic, k);
        assert_close(&conv2d_forward(&x, &p).unwrap(), &naive_conv(&x, &p), 1e-12, 1.0);
    }
}

#[test]
fn conv_center_pixel_is_a_nine_term_dot_product() {
    let mut r = rng(2);
    let x = random_tensor(&mut r, Shape4::new(1, 1, 5, 5));
    let p = random_params(&mut r, 1, 1, 1);
    let mut dot = p.bias()[0];
    for i in 0..3 {
        for j in 0..3 {
            dot += x.get(0, 0, 1 + i, 1 + j) * p.weights().get(0, 0, i, j);
        }
    }
    let y = conv2d_forward(&x, &p).unwrap();
    assert!((y.get(0, 0, 2, 2) - dot).abs() <= 1e-14 * dot.abs().max(1.0));
}

#[test]
fn conv_rejects_channel_mismatch() {
    let x = Tensor4::zeros(Shape4::new(1, 2, 3, 3));
    let p = ConvParams::zeros(1, 3, 1);
    assert!(matches!(conv2d_forward(&x, &p), Err(sparse_depth::Error::Shape { .. })));
}

#[test]
fn conv_params_reject_even_or_non_square_kernels() {
    assert!(ConvParams::new(Tensor4::zeros(Shape4::new(1, 1, 2, 2)), vec![0.0]).is_err());
    assert!(ConvParams::new(Tensor4::zeros(Shape4::new(1, 1, 3, 5)), vec![0.0]).is_err());
    assert!(ConvParams::new(Tensor4::zeros(Shape4::new(2, 1, 3, 3)), vec![0.0]).is_err());
}

#[test]
fn sparse_conv_dense_constant_case() {
    let (x0, w0) = (3.0, 0.5);
    let x = Tensor4::full(Shape4::new(1, 1, 5, 5), x0);
    let p = ConvParams::new(Tensor4::full(Shape4::new(1, 1, 3, 3), w0), vec![0.0]).unwrap();
    let cfg = SparseConvConfig::new(&p, DEFAULT_EPSILON).unwrap();
    let (y, m) = sparse_conv2d_forward(&x, &Mask::ones(1, 5, 5), &cfg).unwrap();
    let expected = 9.0 * x0 * w0 / (9.0 + DEFAULT_EPSILON);
    assert!((y.get(0, 0, 2, 2) - expected).abs() <= 1e-15 * expected);
    assert_eq!(m.count(), 25);
}

#[test]
fn sparse_conv_single_observation() {
    let mut x = Tensor4::zeros(Shape4::new(1, 1, 5, 5));
    x.set(0, 0, 2, 2, 4.0);
    let o = Mask::from_fn(1, 5, 5, |_, y, x| (y, x) == (2, 2));
    let mut p = ConvParams::zeros(1, 1, 1);
    p.weights_mut()[4] = 0.75;
    p.bias_mut()[0] = 0.25;
    let cfg = SparseConvConfig::new(&p, DEFAULT_EPSILON).unwrap();
    let (y, m) = sparse_conv2d_forward(&x, &o, &cfg).unwrap();
    assert_eq!(y.get(0, 0, 2, 2), 4.0 * 0.75 / (1.0 + DEFAULT_EPSILON) + 0.25);
    assert!(m.is_observed(0, 2, 2));
    // Far from the observation: bias only, unobserved.
    assert_eq!(y.get(0, 0, 0, 4), 0.25);
    assert!(!m.is_observed(0, 0, 4));
}

#[test]
fn sparse_conv_matches_naive_oracle() {
    let mut r = rng(3);
    let x = random_tensor(&mut r, Shape4::new(1, 1, 8, 8));
    let o = random_mask(&mut r, 1, 8, 8, 0.3);
    let p = random_params(&mut r, 1, 1, 2);
    let cfg = SparseConvConfig::new(&p, DEFAULT_EPSILON).unwrap();
    let (y, m) = sparse_conv2d_forward(&x, &o, &cfg).unwrap();
    let (ey, em) = naive_sparse(&x, &o, &p, DEFAULT_EPSILON);
    assert_close(&y, &ey, 1e-12, 1e-300);
    assert_eq!(m.as_tensor(), &em);
}

#[test]
fn sparse_conv_matches_naive_oracle_multichannel() {
    for seed in 0..10 {
        let mut r = rng(100 + seed);
        let (ic, oc, k) = (r.gen_range(1..5), r.gen_range(1..12), r.gen_range(0..4));
        let x = random_tensor(&mut r, Shape4::new(2, ic, 9, 7));
        let density = r.gen_range(0.05..0.9);
        let o = random_mask(&mut r, 2, 9, 7, density);
        let p = random_params(&mut r, oc, ic, k);
        let cfg = SparseConvConfig::new(&p, 1e-3).unwrap();
        let (y, m) = sparse_conv2d_forward(&x, &o, &cfg).unwrap();
        let (ey, em) = naive_sparse(&x, &o, &p, 1e-3);
        assert_close(&y, &ey, 1e-12, 1.0);
        assert_eq!(m.as_tensor(), &em);
    }
}

#[test]
fn sparse_conv_rejects_bad_epsilon_and_misaligned_mask() {
    let p = ConvParams::zeros(1, 1, 1);
    assert!(SparseConvConfig::new(&p, 0.0).is_err());
    assert!(SparseConvConfig::new(&p, -1e-8).is_err());
    let cfg = SparseConvConfig::new(&p, DEFAULT_EPSILON).unwrap();
    let x = Tensor4::zeros(Shape4::new(1, 1, 4, 4));
    assert!(sparse_conv2d_forward(&x, &Mask::ones(1, 4, 5), &cfg).is_err());
}

#[test]
fn backward_of_zero_upstream_is_zero() {
    let mut r = rng(4);
    let x = random_tensor(&mut r, Shape4::new(1, 2, 6, 6));
    let o = random_mask(&mut r, 1, 6, 6, 0.5);
    let p = random_params(&mut r, 3, 2, 1);
    let g0 = Tensor4::zeros(Shape4::new(1, 3, 6, 6));
    let cfg = SparseConvConfig::new(&p, DEFAULT_EPSILON).unwrap();
    for g in [
        sparse_conv2d_backward(&x, &o, &cfg, &g0).unwrap(),
        conv2d_backward(&x, &p, &g0).unwrap(),
    ] {
        assert!(g.d_weights.data().iter().all(|&v| v == 0.0));
        assert!(g.d_bias.iter().all(|&v| v == 0.0));
        assert!(g.d_input.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn sparse_bias_gradient_is_upstream_sum() {
    let mut r = rng(5);
    let x = Tensor4::full(Shape4::new(1, 1, 6, 6), 2.0);
    let p = random_params(&mut r, 2, 1, 1);
    let up = random_tensor(&mut r, Shape4::new(1, 2, 6, 6));
    let cfg = SparseConvConfig::new(&p, DEFAULT_EPSILON).unwrap();
    let g = sparse_conv2d_backward(&x, &Mask::ones(1, 6, 6), &cfg, &up).unwrap();
    for o in 0..2 {
        let sum: f64 = up.plane(0, o).iter().sum();
        assert!((g.d_bias[o] - sum).abs() <= 1e-12 * sum.abs().max(1.0));
    }
}

#[test]
fn conv_weight_gradient_of_center_impulse_is_input_window() {
    let mut r = rng(6);
    let x = random_tensor(&mut r, Shape4::new(1, 1, 5, 5));
    let p = random_params(&mut r, 1, 1, 1);
    let mut up = Tensor4::zeros(Shape4::new(1, 1, 5, 5));
    up.set(0, 0, 2, 2, 1.0);
    let g = conv2d_backward(&x, &p, &up).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            assert_eq!(g.d_weights.get(0, 0, i, j), x.get(0, 0, 1 + i, 1 + j));
        }
    }
}

#[test]
fn layer_gradients_match_finite_differences() {
    use sparse_depth::gradcheck::{self, GradCheckOptions, DEFAULT_TOLERANCE};
    let opts = GradCheckOptions::default();
    for report in [
        gradcheck::check_conv(&opts).unwrap(),
        gradcheck::check_sparse_conv(&opts).unwrap(),
    ] {
        assert!(report.passed(DEFAULT_TOLERANCE), "{report:?}");
    }
    let relu = gradcheck::check_relu(&opts).unwrap();
    assert!(relu.passed(1e-6), "{relu:?}");
}

#[test]
fn corrupted_gradient_is_detected() {
    use sparse_depth::gradcheck::{self, GradCheckOptions, DEFAULT_TOLERANCE};
    let opts = GradCheckOptions {
        trials: 2,
        corrupt: true,
        ..GradCheckOptions::default()
    };
    assert!(!gradcheck::check_sparse_conv(&opts).unwrap().passed(DEFAULT_TOLERANCE));
    assert!(!gradcheck::check_conv(&opts).unwrap().passed(DEFAULT_TOLERANCE));
}

#[test]
fn maxpool_examples() {
    assert_eq!(mask_maxpool(&Mask::zeros(1, 5, 5), 1).count(), 0);
    let o = Mask::from_fn(1, 6, 6, |_, y, x| (y, x) == (2, 3));
    let d = mask_maxpool(&o, 1);
    for y in 0..6 {
        for x in 0..6 {
            let inside = (1..=3).contains(&y) && (2..=4).contains(&x);
            assert_eq!(d.is_observed(0, y, x), inside);
        }
    }
}

#[test]
fn relu_examples() {
    let x = Tensor4::from_vec(Shape4::new(1, 1, 1, 3), vec![-1.0, 0.0, 2.0]).unwrap();
    assert_eq!(relu_forward(&x).data(), &[0.0, 0.0, 2.0]);
    let x = Tensor4::from_vec(Shape4::new(1, 1, 1, 2), vec![-1.0, 2.0]).unwrap();
    let up = Tensor4::full(Shape4::new(1, 1, 1, 2), 5.0);
    assert_eq!(relu_backward(&x, &up).unwrap().data(), &[0.0, 5.0]);
    let at_zero = Tensor4::zeros(Shape4::new(1, 1, 1, 1));
    assert_eq!(relu_backward(&at_zero, &Tensor4::ones(at_zero.shape())).unwrap().data(), &[0.0]);
}

#[test]
fn concat_examples() {
    let mut r = rng(7);
    let a = random_tensor(&mut r, Shape4::new(2, 1, 2, 2));
    let b = random_tensor(&mut r, Shape4::new(2, 3, 2, 2));
    let c = concat_channels(&a, &b).unwrap();
    assert_eq!(c.shape(), Shape4::new(2, 4, 2, 2));
    assert_eq!(c.slice_channels(0, 1).unwrap(), a);
    assert_eq!(c.slice_channels(1, 4).unwrap(), b);
    let one = concat_channels(&a, &Tensor4::ones(Shape4::new(2, 1, 2, 2))).unwrap();
    assert_eq!(one.shape().c, 2);
    assert!(concat_channels(&a, &Tensor4::zeros(Shape4::new(2, 1, 3, 2))).is_err());
}

#[test]
fn skip_sum_examples() {
    let s = Shape4::new(1, 1, 1, 1);
    let two = Tensor4::full(s, 2.0);
    let four = Tensor4::full(s, 4.0);
    let seven = Tensor4::full(s, 7.0);
    let (on, off) = (Mask::ones(1, 1, 1), Mask::zeros(1, 1, 1));

    let (y, m) = normalized_skip_sum(&[(&two, &on), (&four, &on)]).unwrap();
    assert_eq!((y.data()[0], m.count()), (3.0, 1));
    let (y, m) = normalized_skip_sum(&[(&seven, &on), (&four, &off)]).unwrap();
    assert_eq!((y.data()[0], m.count()), (7.0, 1));
    let (y, m) = normalized_skip_sum(&[(&seven, &off), (&four, &off)]).unwrap();
    assert_eq!((y.data()[0], m.count()), (0.0, 0));

    assert!(normalized_skip_sum(&[]).is_err());
    let big = Tensor4::zeros(Shape4::new(1, 1, 2, 1));
    assert!(normalized_skip_sum(&[(&two, &on), (&big, &on)]).is_err());
}

#[test]
fn skip_sum_of_dense_inputs_is_their_mean() {
    let mut r = rng(8);
    let s = Shape4::new(2, 3, 4, 4);
    let xs: Vec<Tensor4> = (0..3).map(|_| random_tensor(&mut r, s)).collect();
    let on = Mask::ones(2, 4, 4);
    let inputs: Vec<(&Tensor4, &Mask)> = xs.iter().map(|x| (x, &on)).collect();
    let (y, _) = normalized_skip_sum(&inputs).unwrap();
    let mean = xs[0].add(&xs[1]).unwrap().add(&xs[2]).unwrap().scale(1.0 / 3.0);
    assert_close(&y, &mean, 1e-14, 1.0);
}

/// Dense-case reference: standard convolution with weights scaled by
/// `1/((2k+1)² + ε)`, valid on pixels whose window lies inside the image.
fn dense_equivalence_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (ic, oc, k) = (r.gen_range(1..4), r.gen_range(1..6), r.gen_range(0..4));
    let (h, w) = (r.gen_range(2 * k + 1..12), r.gen_range(2 * k + 1..12));
    let x = random_tensor(&mut r, Shape4::new(1, ic, h, w));
    let p = random_params(&mut r, oc, ic, k);
    let ks = (2 * k + 1) as f64;
    let scaled = ConvParams::new(p.weights().scale(1.0 / (ks * ks + DEFAULT_EPSILON)), p.bias().to_vec()).unwrap();
    let cfg = SparseConvConfig::new(&p, DEFAULT_EPSILON).unwrap();
    let (ys, _) = sparse_conv2d_forward(&x, &Mask::ones(1, h, w), &cfg).unwrap();
    let yd = conv2d_forward(&x, &scaled).unwrap();
    let mut worst: f64 = 0.0;
    for o in 0..oc {
        for y in k..h - k {
            for xx in k..w - k {
                let (a, b) = (ys.get(0, o, y, xx), yd.get(0, o, y, xx));
                worst = worst.max((a - b).abs() / a.abs().max(b.abs()).max(1e-300));
            }
        }
    }
    worst
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dense_equivalence(seed in any::<u64>()) {
        prop_assert!(dense_equivalence_error(seed) <= 1e-12);
    }

    #[test]
    fn unobserved_values_never_matter(seed in any::<u64>(), garbage in -1e9f64..1e9) {
        let mut r = rng(seed);
        let x = random_tensor(&mut r, Shape4::new(1, 2, 7, 7));
        let o = random_mask(&mut r, 1, 7, 7, 0.4);
        let k = r.gen_range(0..3);
        let p = random_params(&mut r, 3, 2, k);
        let mut dirty = x.clone();
        for c in 0..2 {
            for y in 0..7 {
                for xx in 0..7 {
                    if !o.is_observed(0, y, xx) {
                        dirty.set(0, c, y, xx, garbage * r.gen_range(-1.0..1.0));
                    }
                }
            }
        }
        let cfg = SparseConvConfig::new(&p, DEFAULT_EPSILON).unwrap();
        let a = sparse_conv2d_forward(&x, &o, &cfg).unwrap();
        let b = sparse_conv2d_forward(&dirty, &o, &cfg).unwrap();
        prop_assert_eq!(a.0.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                        b.0.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        prop_assert_eq!(a.1, b.1);
    }

    #[test]
    fn translation_equivariance(seed in any::<u64>(), dy in 0usize..3, dx in 0usize..3) {
        let mut r = rng(seed);
        let (h, w) = (10, 10);
        let k = r.gen_range(0..3);
        let p = random_params(&mut r, 2, 1, k);
        let x = random_tensor(&mut r, Shape4::new(1, 1, h, w));
        let o = random_mask(&mut r, 1, h, w, 0.3);
        // Shift content by (dy, dx): shifted(y, x) = original(y - dy, x - dx).
        let xs = Tensor4::from_fn(x.shape(), |_, _, y, xx| {
            if y >= dy && xx >= dx { x.get(0, 0, y - dy, xx - dx) } else { 0.0 }
        });
        let os = Mask::from_fn(1, h, w, |_, y, xx| y >= dy && xx >= dx && o.is_observed(0, y - dy, xx - dx));
        let cfg = SparseConvConfig::new(&p, DEFAULT_EPSILON).unwrap();
        let (y0, m0) = sparse_conv2d_forward(&x, &o, &cfg).unwrap();
        let (y1, m1) = sparse_conv2d_forward(&xs, &os, &cfg).unwrap();
        // Pixels whose windows are unaffected by both image borders.
        for y in (dy + k)..(h - k) {
            for xx in (dx + k)..(w - k) {
                if y - dy + k >= h || xx - dx + k >= w { continue; }
                prop_assert_eq!(m1.is_observed(0, y, xx), m0.is_observed(0, y - dy, xx - dx));
                for c in 0..2 {
                    let (a, b) = (y1.get(0, c, y, xx), y0.get(0, c, y - dy, xx - dx));
                    prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0));
                }
            }
        }
    }

    #[test]
    fn adding_observations_never_shrinks_the_mask(seed in any::<u64>(), k in 0usize..4) {
        let mut r = rng(seed);
        let o = random_mask(&mut r, 1, 9, 9, 0.2);
        let more = Mask::from_fn(1, 9, 9, |_, y, x| o.is_observed(0, y, x) || r.gen_bool(0.2));
        let (a, b) = (mask_maxpool(&o, k), mask_maxpool(&more, k));
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!(x <= y);
        }
    }

    #[test]
    fn maxpool_equals_sparse_conv_mask(seed in any::<u64>(), k in 0usize..4) {
        let mut r = rng(seed);
        let o = random_mask(&mut r, 2, 8, 11, 0.15);
        let x = random_tensor(&mut r, Shape4::new(2, 1, 8, 11));
        let p = random_params(&mut r, 1, 1, k);
        let (_, m) = sparse_conv2d_forward(&x, &o, &SparseConvConfig::new(&p, DEFAULT_EPSILON).unwrap()).unwrap();
        prop_assert_eq!(mask_maxpool(&o, k), m.clone());
        let (_, em) = naive_sparse(&x, &o, &p, DEFAULT_EPSILON);
        prop_assert_eq!(m.as_tensor(), &em);
    }
}
