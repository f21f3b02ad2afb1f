//! Forward and backward passes for every layer type used by the networks:
//! standard convolution, sparsity-normalized convolution with mask
//! propagation, ReLU, channel concatenation and the mask-weighted skip sum.
//!
//! All convolutions are stride 1 with "same" output size. Dense convolution
//! pads values with 0; sparse convolution pads the mask with 0, so the image
//! border is simply unobserved.

use crate::error::{Error, Result};
use crate::kernels::{self, PackedWeights};
use crate::tensor::{Axis, Mask, Shape4, Tensor4};

/// Default denominator guard of the sparse convolution.
pub const DEFAULT_EPSILON: f64 = 1e-8;

/// Weights `(out_channels, in_channels, 2k+1, 2k+1)` and one bias per output
/// channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    weights: Tensor4,
    bias: Vec<f64>,
    k: usize,
}

impl ConvParams {
    pub fn new(weights: Tensor4, bias: Vec<f64>) -> Result<Self> {
        let s = weights.shape();
        if s.h != s.w || s.h % 2 == 0 {
            return Err(Error::invalid(format!(
                "kernel must be square with odd size, got {}x{}",
                s.h, s.w
            )));
        }
        if bias.len() != s.n {
            return Err(Error::invalid(format!(
                "bias has {} entries for {} output channels",
                bias.len(),
                s.n
            )));
        }
        if let Some(index) = weights.data().iter().chain(&bias).position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self {
            k: s.h / 2,
            weights,
            bias,
        })
    }

    pub fn zeros(out_channels: usize, in_channels: usize, k: usize) -> Self {
        let ks = 2 * k + 1;
        Self {
            weights: Tensor4::zeros(Shape4::new(out_channels, in_channels, ks, ks)),
            bias: vec![0.0; out_channels],
            k,
        }
    }

    /// Kernel half-width; the kernel is `2k+1` pixels wide.
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn kernel_size(&self) -> usize {
        2 * self.k + 1
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape().c
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape().n
    }

    pub fn weights(&self) -> &Tensor4 {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        self.weights.data_mut()
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    pub fn num_params(&self) -> usize {
        self.weights.shape().len() + self.bias.len()
    }

    fn pack(&self) -> PackedWeights {
        PackedWeights::pack(
            self.weights.data(),
            self.out_channels(),
            self.in_channels(),
            self.kernel_size(),
        )
    }

    fn pack_adjoint(&self) -> PackedWeights {
        PackedWeights::pack_adjoint(
            self.weights.data(),
            self.out_channels(),
            self.in_channels(),
            self.kernel_size(),
        )
    }

    fn check_input(&self, x: &Tensor4, op: &'static str) -> Result<()> {
        x.check_dim(Axis::Channel, self.in_channels(), op)
    }
}

/// Sparse convolution parameters together with the denominator guard `epsilon`.
#[derive(Clone, Copy, Debug)]
pub struct SparseConvConfig<'a> {
    pub params: &'a ConvParams,
    pub epsilon: f64,
}

impl<'a> SparseConvConfig<'a> {
    pub fn new(params: &'a ConvParams, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::invalid(format!("epsilon must be positive, got {epsilon}")));
        }
        Ok(Self { params, epsilon })
    }
}

/// Gradients of a convolution layer with respect to its weights, bias and
/// input features.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrads {
    pub d_weights: Tensor4,
    pub d_bias: Vec<f64>,
    pub d_input: Tensor4,
}

/// Parameter gradients of one layer, without the input gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    pub d_weights: Tensor4,
    pub d_bias: Vec<f64>,
}

impl ParamGrads {
    pub fn zeros_like(p: &ConvParams) -> Self {
        Self {
            d_weights: Tensor4::zeros(p.weights().shape()),
            d_bias: vec![0.0; p.out_channels()],
        }
    }
}

/// Standard convolution: `Σ x·w + b` over the `(2k+1)²` window, zero padded.
pub fn conv2d_forward(x: &Tensor4, p: &ConvParams) -> Result<Tensor4> {
    p.check_input(x, "conv2d_forward")?;
    let s = x.shape();
    let oc = p.out_channels();
    let packed = p.pack();
    let plane = s.plane();
    let mut out = vec![0.0; s.n * oc * plane];
    for (n, dst) in out.chunks_exact_mut(oc * plane).enumerate() {
        let xp = kernels::pad_item(x.item(n), s.c, s.h, s.w, p.k);
        kernels::correlate(&xp, s.h, s.w, &packed, dst);
        for (o, chan) in dst.chunks_exact_mut(plane).enumerate() {
            let b = p.bias[o];
            chan.iter_mut().for_each(|v| *v += b);
        }
    }
    Ok(Tensor4::from_raw(Shape4::new(s.n, oc, s.h, s.w), out))
}

pub fn conv2d_backward(x: &Tensor4, p: &ConvParams, upstream: &Tensor4) -> Result<LayerGrads> {
    let (grads, d_input) = conv2d_backward_impl(x, p, upstream, true)?;
    Ok(LayerGrads {
        d_weights: grads.d_weights,
        d_bias: grads.d_bias,
        d_input: d_input.expect("input gradient requested"),
    })
}

pub(crate) fn conv2d_backward_impl(
    x: &Tensor4,
    p: &ConvParams,
    upstream: &Tensor4,
    need_input: bool,
) -> Result<(ParamGrads, Option<Tensor4>)> {
    p.check_input(x, "conv2d_backward")?;
    check_upstream(x, p, upstream, "conv2d_backward")?;
    let s = x.shape();
    conv_backward_core(x, None, p, upstream, need_input, |_, g| g.to_vec(), s)
}

/// Sparse convolution: the window sum `Σ o·x·w` is divided by the number of
/// observed inputs `Σ o + ε` before adding the bias. The returned mask is 1
/// wherever the window saw at least one observation.
///
/// Where a window is fully unobserved the feature output is exactly `b` and
/// the mask is 0.
pub fn sparse_conv2d_forward(x: &Tensor4, o: &Mask, cfg: &SparseConvConfig<'_>) -> Result<(Tensor4, Mask)> {
    let p = cfg.params;
    p.check_input(x, "sparse_conv2d_forward")?;
    o.check_aligned(x, "sparse_conv2d_forward")?;
    let s = x.shape();
    let oc = p.out_channels();
    let packed = p.pack();
    let plane = s.plane();
    let mut out = vec![0.0; s.n * oc * plane];
    let mut mask = vec![0.0; s.n * plane];
    for (n, dst) in out.chunks_exact_mut(oc * plane).enumerate() {
        let m = o.as_tensor().item(n);
        let xm = mask_features(x.item(n), m, s.c);
        let xp = kernels::pad_item(&xm, s.c, s.h, s.w, p.k);
        kernels::correlate(&xp, s.h, s.w, &packed, dst);
        let count = kernels::box_sum(m, s.h, s.w, p.k);
        for (ch, chan) in dst.chunks_exact_mut(plane).enumerate() {
            let b = p.bias[ch];
            for (v, &c) in chan.iter_mut().zip(&count) {
                *v = *v / (c + cfg.epsilon) + b;
            }
        }
        for (dm, &c) in mask[n * plane..(n + 1) * plane].iter_mut().zip(&count) {
            *dm = if c > 0.0 { 1.0 } else { 0.0 };
        }
    }
    Ok((
        Tensor4::from_raw(Shape4::new(s.n, oc, s.h, s.w), out),
        Mask::from_raw(Tensor4::from_raw(Shape4::new(s.n, 1, s.h, s.w), mask)),
    ))
}

/// Analytic gradients of [`sparse_conv2d_forward`]. The mask is data: no
/// gradient flows into it or through the normalizer.
pub fn sparse_conv2d_backward(
    x: &Tensor4,
    o: &Mask,
    cfg: &SparseConvConfig<'_>,
    upstream: &Tensor4,
) -> Result<LayerGrads> {
    let (grads, d_input) = sparse_conv2d_backward_impl(x, o, cfg, upstream, true)?;
    Ok(LayerGrads {
        d_weights: grads.d_weights,
        d_bias: grads.d_bias,
        d_input: d_input.expect("input gradient requested"),
    })
}

pub(crate) fn sparse_conv2d_backward_impl(
    x: &Tensor4,
    o: &Mask,
    cfg: &SparseConvConfig<'_>,
    upstream: &Tensor4,
    need_input: bool,
) -> Result<(ParamGrads, Option<Tensor4>)> {
    let p = cfg.params;
    p.check_input(x, "sparse_conv2d_backward")?;
    o.check_aligned(x, "sparse_conv2d_backward")?;
    check_upstream(x, p, upstream, "sparse_conv2d_backward")?;
    let s = x.shape();
    let eps = cfg.epsilon;
    let (k, plane, oc) = (p.k, s.plane(), p.out_channels());
    conv_backward_core(
        x,
        Some(o),
        p,
        upstream,
        need_input,
        |m, g| {
            let count = kernels::box_sum(m.expect("sparse path carries a mask"), s.h, s.w, k);
            let mut scaled = g.to_vec();
            for ch in 0..oc {
                for (v, &c) in scaled[ch * plane..(ch + 1) * plane].iter_mut().zip(&count) {
                    *v /= c + eps;
                }
            }
            scaled
        },
        s,
    )
}

/// Shared backward pass. `scale_upstream` maps the per-item upstream gradient
/// to the gradient of the un-normalized window sum.
fn conv_backward_core(
    x: &Tensor4,
    o: Option<&Mask>,
    p: &ConvParams,
    upstream: &Tensor4,
    need_input: bool,
    scale_upstream: impl Fn(Option<&[f64]>, &[f64]) -> Vec<f64>,
    s: Shape4,
) -> Result<(ParamGrads, Option<Tensor4>)> {
    let (ic, oc, ks, k) = (s.c, p.out_channels(), p.kernel_size(), p.k);
    let plane = s.plane();
    let mut d_weights = vec![0.0; oc * ic * ks * ks];
    let mut d_bias = vec![0.0; oc];
    let adjoint = need_input.then(|| p.pack_adjoint());
    let mut d_input = if need_input { vec![0.0; s.len()] } else { Vec::new() };

    for n in 0..s.n {
        let m = o.map(|o| o.as_tensor().item(n));
        let g = upstream.item(n);
        for (ch, db) in d_bias.iter_mut().enumerate() {
            *db += g[ch * plane..(ch + 1) * plane].iter().sum::<f64>();
        }
        let gs = scale_upstream(m, g);
        let xin = match m {
            Some(m) => mask_features(x.item(n), m, ic),
            None => x.item(n).to_vec(),
        };
        let xp = kernels::pad_item(&xin, ic, s.h, s.w, k);
        kernels::weight_grad(&xp, &gs, oc, ic, s.h, s.w, ks, &mut d_weights);

        if let Some(adj) = &adjoint {
            debug_assert_eq!(adj.out_channels(), ic);
            let gp = kernels::pad_item(&gs, oc, s.h, s.w, k);
            let dst = &mut d_input[n * ic * plane..(n + 1) * ic * plane];
            kernels::correlate(&gp, s.h, s.w, adj, dst);
            if let Some(m) = m {
                for chan in dst.chunks_exact_mut(plane) {
                    chan.iter_mut().zip(m).for_each(|(v, &mv)| *v *= mv);
                }
            }
        }
    }
    let grads = ParamGrads {
        d_weights: Tensor4::from_raw(p.weights().shape(), d_weights),
        d_bias,
    };
    Ok((grads, need_input.then(|| Tensor4::from_raw(s, d_input))))
}

fn check_upstream(x: &Tensor4, p: &ConvParams, upstream: &Tensor4, op: &'static str) -> Result<()> {
    let s = x.shape();
    let want = Shape4::new(s.n, p.out_channels(), s.h, s.w);
    if upstream.shape() != want {
        return Err(Error::shape(op, upstream.shape(), want));
    }
    Ok(())
}

/// `x ⊙ o` with the single-channel mask shared across all channels.
/// `o ⊙ x`, writing an exact +0.0 at unobserved pixels so their stored
/// values (including their sign) cannot reach any sum.
fn mask_features(x: &[f64], m: &[f64], channels: usize) -> Vec<f64> {
    let plane = m.len();
    let mut out = x.to_vec();
    for c in 0..channels {
        for (v, &mv) in out[c * plane..(c + 1) * plane].iter_mut().zip(m) {
            if mv == 0.0 {
                *v = 0.0;
            }
        }
    }
    out
}

/// Window max of the mask, i.e. dilation by a `(2k+1)²` square with the
/// border treated as unobserved.
pub fn mask_maxpool(o: &Mask, k: usize) -> Mask {
    let s = o.shape();
    let plane = s.plane();
    let mut out = Vec::with_capacity(s.len());
    for n in 0..s.n {
        let count = kernels::box_sum(o.as_tensor().item(n), s.h, s.w, k);
        out.extend(count.iter().map(|&c| if c > 0.0 { 1.0 } else { 0.0 }));
    }
    debug_assert_eq!(out.len(), s.n * plane);
    Mask::from_raw(Tensor4::from_raw(s, out))
}

pub fn relu_forward(x: &Tensor4) -> Tensor4 {
    Tensor4::from_raw(x.shape(), x.data().iter().map(|&v| v.max(0.0)).collect())
}

/// Passes `upstream` where `x > 0`; the subgradient at 0 is 0.
pub fn relu_backward(x: &Tensor4, upstream: &Tensor4) -> Result<Tensor4> {
    if x.shape() != upstream.shape() {
        return Err(Error::shape("relu_backward", x.shape(), upstream.shape()));
    }
    let data = x
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Ok(Tensor4::from_raw(x.shape(), data))
}

/// Stacks `b`'s channels after `a`'s.
pub fn concat_channels(a: &Tensor4, b: &Tensor4) -> Result<Tensor4> {
    let (sa, sb) = (a.shape(), b.shape());
    if (sa.n, sa.h, sa.w) != (sb.n, sb.h, sb.w) {
        return Err(Error::shape("concat_channels", sa, sb));
    }
    let out_shape = Shape4::new(sa.n, sa.c + sb.c, sa.h, sa.w);
    let mut data = Vec::with_capacity(out_shape.len());
    for n in 0..sa.n {
        data.extend_from_slice(a.item(n));
        data.extend_from_slice(b.item(n));
    }
    Ok(Tensor4::from_raw(out_shape, data))
}

/// Mask-weighted mean of several feature streams: `Σ oˡxˡ / Σ oˡ` per pixel
/// and channel. The output mask is the union of the input masks; pixels no
/// input observes get value 0 and mask 0.
pub fn normalized_skip_sum(inputs: &[(&Tensor4, &Mask)]) -> Result<(Tensor4, Mask)> {
    let (first, _) = inputs
        .first()
        .ok_or_else(|| Error::invalid("normalized_skip_sum needs at least one input"))?;
    let s = first.shape();
    for (x, m) in inputs {
        if x.shape() != s {
            return Err(Error::shape("normalized_skip_sum", s, x.shape()));
        }
        m.check_aligned(x, "normalized_skip_sum")?;
    }
    let plane = s.plane();
    let mut count = vec![0.0; s.n * plane];
    for (_, m) in inputs {
        count.iter_mut().zip(m.data()).for_each(|(c, &v)| *c += v);
    }
    let mut out = vec![0.0; s.len()];
    for (x, m) in inputs {
        for n in 0..s.n {
            let mv = &m.data()[n * plane..(n + 1) * plane];
            for c in 0..s.c {
                let base = s.index(n, c, 0, 0);
                for i in 0..plane {
                    out[base + i] += mv[i] * x.data()[base + i];
                }
            }
        }
    }
    for n in 0..s.n {
        for c in 0..s.c {
            let base = s.index(n, c, 0, 0);
            for i in 0..plane {
                let total = count[n * plane + i];
                out[base + i] = if total > 0.0 { out[base + i] / total } else { 0.0 };
            }
        }
    }
    let mask = count.iter().map(|&c| if c > 0.0 { 1.0 } else { 0.0 }).collect();
    Ok((
        Tensor4::from_raw(s, out),
        Mask::from_raw(Tensor4::from_raw(Shape4::new(s.n, 1, s.h, s.w), mask)),
    ))
}
