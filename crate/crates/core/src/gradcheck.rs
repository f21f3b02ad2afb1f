//! Central finite-difference checks of every analytic gradient.
//!
//! Each check builds a random instance, defines the scalar objective
//! `L = Σ r ⊙ f(θ)` with a random probe tensor `r`, and compares the analytic
//! gradient (obtained by backpropagating `r`) against
//! `(L(θ + h) − L(θ − h)) / 2h` for every parameter and input element. The
//! numeric side only ever calls forward passes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::layers::{self, ConvParams, SparseConvConfig};
use crate::network::{self, NetworkSpec, Variant};
use crate::optim::{self, LossKind};
use crate::tensor::{Mask, Shape4, Tensor4};

pub const DEFAULT_STEP: f64 = 1e-6;
pub const DEFAULT_TOLERANCE: f64 = 1e-5;

/// Denominator floor of [`relative_error`]. Central differences at `h = 1e-6`
/// carry about `1e-16·|L| / h ≈ 1e-9` of rounding noise for the objectives
/// used here, so gradients below this magnitude are effectively compared
/// absolutely (to `tolerance · 1e-3`).
pub const RELATIVE_FLOOR: f64 = 1e-3;

/// Network instances with any ReLU input closer than this to 0 are redrawn:
/// a finite-difference step could cross the kink there.
const KINK_MARGIN: f64 = 1e-4;
const MAX_REDRAWS: usize = 1000;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub trials: usize,
    pub seed: u64,
    pub step: f64,
    /// Network kernel sizes for the composed check.
    pub kernel_sizes: Vec<usize>,
    pub channels: usize,
    pub size: usize,
    /// Zero every network weight before checking.
    pub zero_weights: bool,
    /// Negative control: perturb the analytic gradient so the check must fail.
    pub corrupt: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            trials: 20,
            seed: 0,
            step: DEFAULT_STEP,
            kernel_sizes: vec![11, 7, 5, 3, 3],
            channels: 4,
            size: 12,
            zero_weights: false,
            corrupt: false,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub name: String,
    pub trials: usize,
    pub compared: usize,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
    (analytic - numeric).abs() / denom
}

struct Tally {
    compared: usize,
    max: f64,
}

impl Tally {
    fn new() -> Self {
        Self { compared: 0, max: 0.0 }
    }

    /// Compares `analytic[i]` against the central difference of `objective`
    /// with respect to `values[i]`, for every `i`.
    fn compare(
        &mut self,
        analytic: &[f64],
        values: &mut [f64],
        step: f64,
        mut objective: impl FnMut(&[f64]) -> Result<f64>,
    ) -> Result<()> {
        assert_eq!(analytic.len(), values.len());
        for i in 0..values.len() {
            let orig = values[i];
            values[i] = orig + step;
            let up = objective(values)?;
            values[i] = orig - step;
            let down = objective(values)?;
            values[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            self.max = self.max.max(relative_error(analytic[i], numeric));
            self.compared += 1;
        }
        Ok(())
    }

    fn report(self, name: &str, trials: usize) -> GradCheckReport {
        GradCheckReport {
            name: name.to_string(),
            trials,
            compared: self.compared,
            max_rel_error: self.max,
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: Shape4, lo: f64, hi: f64) -> Tensor4 {
    Tensor4::from_fn(shape, |_, _, _, _| rng.gen_range(lo..hi))
}

fn random_params(rng: &mut ChaCha8Rng, oc: usize, ic: usize, k: usize) -> Result<ConvParams> {
    let ks = 2 * k + 1;
    let w = uniform(rng, Shape4::new(oc, ic, ks, ks), -1.0, 1.0);
    let b = (0..oc).map(|_| rng.gen_range(-1.0..1.0)).collect();
    ConvParams::new(w, b)
}

fn random_mask(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize, density: f64) -> Mask {
    Mask::from_fn(n, h, w, |_, _, _| rng.gen_bool(density))
}

fn dot(a: &Tensor4, b: &Tensor4) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn corrupt(v: &mut [f64], enabled: bool) {
    if enabled {
        if let Some(first) = v.first_mut() {
            *first = *first * 1.01 + 1e-3;
        }
    }
}

fn rebuild(p: &ConvParams, weights: Option<&[f64]>, bias: Option<&[f64]>) -> Result<ConvParams> {
    let w = match weights {
        Some(w) => Tensor4::from_vec(p.weights().shape(), w.to_vec())?,
        None => p.weights().clone(),
    };
    ConvParams::new(w, bias.map_or_else(|| p.bias().to_vec(), <[f64]>::to_vec))
}

/// Standard convolution on `(1, 2, 6, 6)` inputs with a 3×3 kernel.
pub fn check_conv(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut tally = Tally::new();
    for _ in 0..opts.trials {
        let x = uniform(&mut rng, Shape4::new(1, 2, 6, 6), -1.0, 1.0);
        let p = random_params(&mut rng, 3, 2, 1)?;
        let r = uniform(&mut rng, Shape4::new(1, 3, 6, 6), -1.0, 1.0);
        let mut g = layers::conv2d_backward(&x, &p, &r)?;
        corrupt(g.d_weights.data_mut(), opts.corrupt);

        let mut w = p.weights().data().to_vec();
        tally.compare(g.d_weights.data(), &mut w, opts.step, |w| {
            Ok(dot(&layers::conv2d_forward(&x, &rebuild(&p, Some(w), None)?)?, &r))
        })?;
        let mut b = p.bias().to_vec();
        tally.compare(&g.d_bias, &mut b, opts.step, |b| {
            Ok(dot(&layers::conv2d_forward(&x, &rebuild(&p, None, Some(b))?)?, &r))
        })?;
        let mut xv = x.data().to_vec();
        tally.compare(g.d_input.data(), &mut xv, opts.step, |xv| {
            Ok(dot(&layers::conv2d_forward(&Tensor4::from_vec(x.shape(), xv.to_vec())?, &p)?, &r))
        })?;
    }
    Ok(tally.report("conv2d", opts.trials))
}

/// Sparse convolution on `(1, 2, 6, 6)` inputs at 50% density with a 3×3 kernel.
pub fn check_sparse_conv(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed);
    let mut tally = Tally::new();
    let eps = layers::DEFAULT_EPSILON;
    for _ in 0..opts.trials {
        let x = uniform(&mut rng, Shape4::new(1, 2, 6, 6), -1.0, 1.0);
        let o = random_mask(&mut rng, 1, 6, 6, 0.5);
        let p = random_params(&mut rng, 3, 2, 1)?;
        let r = uniform(&mut rng, Shape4::new(1, 3, 6, 6), -1.0, 1.0);
        let mut g = layers::sparse_conv2d_backward(&x, &o, &SparseConvConfig::new(&p, eps)?, &r)?;
        corrupt(g.d_weights.data_mut(), opts.corrupt);

        let eval = |x: &Tensor4, p: &ConvParams| -> Result<f64> {
            let (y, _) = layers::sparse_conv2d_forward(x, &o, &SparseConvConfig::new(p, eps)?)?;
            Ok(dot(&y, &r))
        };
        let mut w = p.weights().data().to_vec();
        tally.compare(g.d_weights.data(), &mut w, opts.step, |w| {
            eval(&x, &rebuild(&p, Some(w), None)?)
        })?;
        let mut b = p.bias().to_vec();
        tally.compare(&g.d_bias, &mut b, opts.step, |b| eval(&x, &rebuild(&p, None, Some(b))?))?;
        let mut xv = x.data().to_vec();
        tally.compare(g.d_input.data(), &mut xv, opts.step, |xv| {
            eval(&Tensor4::from_vec(x.shape(), xv.to_vec())?, &p)
        })?;
    }
    Ok(tally.report("sparse_conv2d", opts.trials))
}

/// ReLU on inputs bounded away from the kink at 0.
pub fn check_relu(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x7e1);
    let mut tally = Tally::new();
    let shape = Shape4::new(1, 2, 5, 5);
    for _ in 0..opts.trials {
        let x = Tensor4::from_fn(shape, |_, _, _, _| {
            let m = rng.gen_range(0.1..2.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        });
        let r = uniform(&mut rng, shape, -1.0, 1.0);
        let mut g = layers::relu_backward(&x, &r)?;
        corrupt(g.data_mut(), opts.corrupt);
        let mut xv = x.data().to_vec();
        tally.compare(g.data(), &mut xv, opts.step, |xv| {
            Ok(dot(&layers::relu_forward(&Tensor4::from_vec(shape, xv.to_vec())?), &r))
        })?;
    }
    Ok(tally.report("relu", opts.trials))
}

/// Masked L2 and L1 losses with respect to the prediction.
pub fn check_loss(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x1055);
    let mut tally = Tally::new();
    let shape = Shape4::new(2, 1, 4, 4);
    for trial in 0..opts.trials {
        let kind = if trial % 2 == 0 { LossKind::L2 } else { LossKind::L1 };
        let target = uniform(&mut rng, shape, 1.0, 10.0);
        // Keep |pred - target| ≥ 0.1 so L1 stays differentiable under the step.
        let pred = Tensor4::from_fn(shape, |n, c, y, x| {
            let d = rng.gen_range(0.1..3.0);
            target.get(n, c, y, x) + if rng.gen_bool(0.5) { d } else { -d }
        });
        let mut valid = random_mask(&mut rng, 2, 4, 4, 0.7);
        if valid.count() == 0 {
            valid = Mask::ones(2, 4, 4);
        }
        let (_, mut g) = optim::masked_loss(&pred, &target, &valid, kind)?;
        corrupt(g.data_mut(), opts.corrupt);
        let mut pv = pred.data().to_vec();
        tally.compare(g.data(), &mut pv, opts.step, |pv| {
            Ok(optim::masked_loss(&Tensor4::from_vec(shape, pv.to_vec())?, &target, &valid, kind)?.0)
        })?;
    }
    Ok(tally.report("masked_loss", opts.trials))
}

/// Every parameter of a composed network of the given variant.
pub fn check_network(opts: &GradCheckOptions, variant: Variant) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ (0xa11 + variant.tag() as u64));
    let spec = NetworkSpec {
        variant,
        kernel_sizes: opts.kernel_sizes.clone(),
        channels: opts.channels,
        ..NetworkSpec::default()
    };
    let s = opts.size;
    let mut tally = Tally::new();
    for _ in 0..opts.trials {
        let (model, depth, mask, r, cache) = (0..MAX_REDRAWS)
            .map(|_| -> Result<_> {
                let mut model = network::build(&spec, rng.gen())?;
                if opts.zero_weights {
                    for p in &mut model.layers {
                        p.weights_mut().iter_mut().for_each(|v| *v = 0.0);
                    }
                }
                // Small random biases move pre-activations off the ReLU kink.
                for p in &mut model.layers {
                    p.bias_mut().iter_mut().for_each(|b| *b = rng.gen_range(-0.1..0.1));
                }
                let mask = random_mask(&mut rng, 1, s, s, 0.3);
                let depth = Tensor4::from_fn(Shape4::new(1, 1, s, s), |_, _, y, x| {
                    if mask.is_observed(0, y, x) {
                        rng.gen_range(0.5..2.0)
                    } else {
                        0.0
                    }
                });
                let r = uniform(&mut rng, Shape4::new(1, spec.out_channels, s, s), -1.0, 1.0);
                let (_, _, cache) = network::forward(&model, &depth, &mask)?;
                Ok((model, depth, mask, r, cache))
            })
            .find(|inst| inst.as_ref().map_or(true, |i| i.4.min_abs_preactivation() >= KINK_MARGIN))
            .ok_or_else(|| Error::invalid("no kink-free network instance found"))??;
        let mut grads = network::backward(&model, &cache, &r)?;
        if let Some(g) = grads.layers.first_mut() {
            corrupt(g.d_weights.data_mut(), opts.corrupt);
        }

        for li in 0..model.layers.len() {
            let base = model.layers[li].clone();
            let mut w = base.weights().data().to_vec();
            tally.compare(grads.layers[li].d_weights.data(), &mut w, opts.step, |w| {
                let mut m = model.clone();
                m.layers[li] = rebuild(&base, Some(w), None)?;
                Ok(dot(&network::forward(&m, &depth, &mask)?.0, &r))
            })?;
            let mut b = base.bias().to_vec();
            tally.compare(&grads.layers[li].d_bias, &mut b, opts.step, |b| {
                let mut m = model.clone();
                m.layers[li] = rebuild(&base, None, Some(b))?;
                Ok(dot(&network::forward(&m, &depth, &mask)?.0, &r))
            })?;
        }
    }
    Ok(tally.report(&format!("network:{variant}"), opts.trials))
}

/// Runs every layer check plus the composed network check for all variants.
pub fn run_all(opts: &GradCheckOptions) -> Result<Vec<GradCheckReport>> {
    let mut reports = vec![
        check_conv(opts)?,
        check_sparse_conv(opts)?,
        check_relu(opts)?,
        check_loss(opts)?,
    ];
    for v in Variant::ALL {
        reports.push(check_network(opts, v)?);
    }
    Ok(reports)
}
