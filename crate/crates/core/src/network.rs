//! The three fully convolutional depth-completion networks: plain
//! convolutions on sparse depth, plain convolutions on depth plus the
//! concatenated validity mask, and sparse convolutions with mask propagation.
//!
//! Every variant is a stack of `kernel_sizes.len()` convolutions with
//! `channels` outputs each, followed by ReLU, and a linear 1×1 head projecting
//! to `out_channels`.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{self, ConvParams, ParamGrads, SparseConvConfig, DEFAULT_EPSILON};
use crate::tensor::{Axis, Mask, Shape4, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Sparse convolutions on `(depth, mask)`.
    SparseConvNet,
    /// Plain convolutions on depth only.
    ConvNet,
    /// Plain convolutions on depth with the mask concatenated as a channel.
    ConvNetPlusMask,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::SparseConvNet, Variant::ConvNet, Variant::ConvNetPlusMask];

    pub fn tag(self) -> u8 {
        match self {
            Variant::SparseConvNet => 0,
            Variant::ConvNet => 1,
            Variant::ConvNetPlusMask => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.tag() == tag)
    }

    pub fn input_channels(self) -> usize {
        match self {
            Variant::ConvNetPlusMask => 2,
            _ => 1,
        }
    }

    pub fn is_sparse(self) -> bool {
        self == Variant::SparseConvNet
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::SparseConvNet => "sparse",
            Variant::ConvNet => "conv",
            Variant::ConvNetPlusMask => "conv-mask",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sparse" | "SparseConvNet" => Ok(Variant::SparseConvNet),
            "conv" | "ConvNet" => Ok(Variant::ConvNet),
            "conv-mask" | "ConvNetPlusMask" => Ok(Variant::ConvNetPlusMask),
            _ => Err(Error::invalid(format!(
                "unknown variant {s:?} (expected sparse, conv or conv-mask)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub variant: Variant,
    pub kernel_sizes: Vec<usize>,
    pub channels: usize,
    pub out_channels: usize,
    pub epsilon: f64,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            variant: Variant::SparseConvNet,
            kernel_sizes: vec![11, 7, 5, 3, 3],
            channels: 16,
            out_channels: 1,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl NetworkSpec {
    pub fn with_variant(variant: Variant) -> Self {
        Self {
            variant,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(&ks) = self.kernel_sizes.iter().find(|&&ks| ks % 2 == 0) {
            return Err(Error::invalid(format!("kernel size {ks} is not odd")));
        }
        if self.channels == 0 || self.out_channels == 0 {
            return Err(Error::invalid("channel counts must be at least 1"));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        Ok(())
    }

    /// `(in_channels, out_channels, kernel_size)` of every layer including the head.
    fn layer_shapes(&self) -> Vec<(usize, usize, usize)> {
        let mut shapes = Vec::with_capacity(self.kernel_sizes.len() + 1);
        let mut inc = self.variant.input_channels();
        for &ks in &self.kernel_sizes {
            shapes.push((inc, self.channels, ks));
            inc = self.channels;
        }
        shapes.push((inc, self.out_channels, 1));
        shapes
    }
}

/// Parameters of a built network. Layers chain: each layer's input channels
/// equal the previous layer's output channels.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub variant: Variant,
    pub epsilon: f64,
    pub layers: Vec<ConvParams>,
    /// Initialization seed; `None` for models restored from a checkpoint.
    pub seed: Option<u64>,
}

/// Builds a network with weights drawn uniformly from `±√(6 / fan_in)` and
/// zero biases. Deterministic in `seed`.
pub fn build(spec: &NetworkSpec, seed: u64) -> Result<ModelState> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = spec
        .layer_shapes()
        .into_iter()
        .map(|(inc, outc, ks)| {
            let bound = (6.0 / (inc * ks * ks) as f64).sqrt();
            let shape = Shape4::new(outc, inc, ks, ks);
            let w: Vec<f64> = (0..shape.len()).map(|_| rng.gen_range(-bound..bound)).collect();
            ConvParams::new(Tensor4::from_raw(shape, w), vec![0.0; outc])
        })
        .collect::<Result<_>>()?;
    Ok(ModelState {
        variant: spec.variant,
        epsilon: spec.epsilon,
        layers,
        seed: Some(seed),
    })
}

impl ModelState {
    pub fn num_params(&self) -> usize {
        self.layers.iter().map(ConvParams::num_params).sum()
    }

    pub fn kernel_sizes(&self) -> Vec<usize> {
        self.layers.iter().map(ConvParams::kernel_size).collect()
    }

    /// Errors if this model's variant or layer shapes differ from what `spec` builds.
    pub fn check_spec(&self, spec: &NetworkSpec) -> Result<()> {
        spec.validate()?;
        let want = spec.layer_shapes();
        if want.len() != self.layers.len() {
            return Err(Error::invalid(format!(
                "model has {} layers, spec expects {}",
                self.layers.len(),
                want.len()
            )));
        }
        for (p, (inc, outc, ks)) in self.layers.iter().zip(want) {
            let expected = Shape4::new(outc, inc, ks, ks);
            if p.weights().shape() != expected {
                return Err(Error::shape("check_spec", p.weights().shape(), expected));
            }
        }
        if self.variant != spec.variant {
            return Err(Error::invalid(format!(
                "model variant {} does not match spec variant {}",
                self.variant, spec.variant
            )));
        }
        Ok(())
    }

    pub fn zero_grads(&self) -> ModelGrads {
        ModelGrads {
            layers: self.layers.iter().map(ParamGrads::zeros_like).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads {
    pub layers: Vec<ParamGrads>,
}

impl ModelGrads {
    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.layers {
            g.d_weights.data_mut().iter_mut().for_each(|v| *v *= factor);
            g.d_bias.iter_mut().for_each(|v| *v *= factor);
        }
    }
}

struct LayerCache {
    input: Tensor4,
    /// Input mask of a sparse layer.
    mask: Option<Mask>,
    /// Pre-ReLU output; `None` for the linear head.
    pre_activation: Option<Tensor4>,
}

/// Activations retained by [`forward`] for [`backward`].
pub struct ForwardCache {
    layers: Vec<LayerCache>,
    input_shape: Shape4,
}

impl ForwardCache {
    /// Smallest absolute ReLU input anywhere in the network (infinite when
    /// there is no ReLU).
    pub fn min_abs_preactivation(&self) -> f64 {
        self.layers
            .iter()
            .filter_map(|l| l.pre_activation.as_ref())
            .flat_map(|t| t.data().iter())
            .fold(f64::INFINITY, |m, v| m.min(v.abs()))
    }
}

/// Runs the network on a single-channel depth batch and its observation mask.
///
/// Returns the prediction, its validity mask (all ones for the dense
/// variants) and the activation cache.
pub fn forward(model: &ModelState, depth: &Tensor4, mask: &Mask) -> Result<(Tensor4, Mask, ForwardCache)> {
    depth.check_dim(Axis::Channel, 1, "network forward")?;
    mask.check_aligned(depth, "network forward")?;
    let s = depth.shape();
    let last = model.layers.len() - 1;
    let mut caches = Vec::with_capacity(model.layers.len());

    if model.variant.is_sparse() {
        let mut x = depth.clone();
        let mut o = mask.clone();
        for (i, p) in model.layers.iter().enumerate() {
            let cfg = SparseConvConfig::new(p, model.epsilon)?;
            let (y, o_next) = layers::sparse_conv2d_forward(&x, &o, &cfg)?;
            if i == last {
                caches.push(LayerCache {
                    input: x,
                    mask: Some(o),
                    pre_activation: None,
                });
                return Ok((
                    y,
                    o_next,
                    ForwardCache {
                        layers: caches,
                        input_shape: s,
                    },
                ));
            }
            let next = layers::relu_forward(&y);
            caches.push(LayerCache {
                input: std::mem::replace(&mut x, next),
                mask: Some(std::mem::replace(&mut o, o_next)),
                pre_activation: Some(y),
            });
        }
        unreachable!("network has at least the head layer");
    }

    let mut x = match model.variant {
        Variant::ConvNetPlusMask => layers::concat_channels(depth, mask.as_tensor())?,
        _ => depth.clone(),
    };
    for (i, p) in model.layers.iter().enumerate() {
        let y = layers::conv2d_forward(&x, p)?;
        if i == last {
            caches.push(LayerCache {
                input: x,
                mask: None,
                pre_activation: None,
            });
            return Ok((
                y,
                Mask::ones(s.n, s.h, s.w),
                ForwardCache {
                    layers: caches,
                    input_shape: s,
                },
            ));
        }
        let next = layers::relu_forward(&y);
        caches.push(LayerCache {
            input: std::mem::replace(&mut x, next),
            mask: None,
            pre_activation: Some(y),
        });
    }
    unreachable!("network has at least the head layer");
}

/// Backpropagates `d_prediction` through the cached forward pass.
pub fn backward(model: &ModelState, cache: &ForwardCache, d_prediction: &Tensor4) -> Result<ModelGrads> {
    if cache.layers.len() != model.layers.len() {
        return Err(Error::invalid(format!(
            "cache holds {} layers, model has {}",
            cache.layers.len(),
            model.layers.len()
        )));
    }
    let s = cache.input_shape;
    let head = model.layers.last().expect("network has a head");
    let want = Shape4::new(s.n, head.out_channels(), s.h, s.w);
    if d_prediction.shape() != want {
        return Err(Error::shape("network backward", d_prediction.shape(), want));
    }

    let mut grads = Vec::with_capacity(model.layers.len());
    let mut upstream = d_prediction.clone();
    for (i, (p, c)) in model.layers.iter().zip(&cache.layers).enumerate().rev() {
        if let Some(pre) = &c.pre_activation {
            upstream = layers::relu_backward(pre, &upstream)?;
        }
        let need_input = i > 0;
        let (g, d_input) = match &c.mask {
            Some(o) => {
                let cfg = SparseConvConfig::new(p, model.epsilon)?;
                layers::sparse_conv2d_backward_impl(&c.input, o, &cfg, &upstream, need_input)?
            }
            None => layers::conv2d_backward_impl(&c.input, p, &upstream, need_input)?,
        };
        grads.push(g);
        if let Some(d) = d_input {
            upstream = d;
        }
    }
    grads.reverse();
    Ok(ModelGrads { layers: grads })
}

const MAGIC: &[u8; 4] = b"SCNN";
const VERSION: u8 = 1;

/// Serializes `model` as: `SCNN`, version byte, variant tag byte, `u32` layer
/// count, a `(k, in_ch, out_ch)` `u32` triple per layer, then every layer's
/// weights followed by its biases as `f64`. All little-endian.
pub fn to_bytes(model: &ModelState) -> Vec<u8> {
    let mut out = Vec::with_capacity(10 + 12 * model.layers.len() + 8 * model.num_params());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(model.variant.tag());
    out.extend_from_slice(&(model.layers.len() as u32).to_le_bytes());
    for p in &model.layers {
        for v in [p.k(), p.in_channels(), p.out_channels()] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
    }
    for p in &model.layers {
        for &v in p.weights().data().iter().chain(p.bias()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelState> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::BadMagic {
            expected: "SCNN",
            found: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let version = r.take(1)?[0];
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let tag = r.take(1)?[0];
    let variant = Variant::from_tag(tag).ok_or_else(|| Error::Format(format!("unknown variant tag {tag}")))?;
    let count = r.u32()? as usize;
    if count == 0 {
        return Err(Error::Format("checkpoint has no layers".into()));
    }
    let mut table = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        table.push((r.u32()? as usize, r.u32()? as usize, r.u32()? as usize));
    }
    if table[0].1 != variant.input_channels() {
        return Err(Error::Format(format!(
            "first layer takes {} channels, variant {variant} expects {}",
            table[0].1,
            variant.input_channels()
        )));
    }
    for w in table.windows(2) {
        if w[1].1 != w[0].2 {
            return Err(Error::Format(format!(
                "shape table inconsistent: layer outputs {} channels, next layer takes {}",
                w[0].2, w[1].1
            )));
        }
    }
    let payload: usize = table
        .iter()
        .map(|&(k, inc, outc)| outc * inc * (2 * k + 1) * (2 * k + 1) + outc)
        .sum::<usize>()
        * 8;
    let remaining = bytes.len() - r.pos;
    if remaining < payload {
        return Err(Error::Truncated {
            expected: r.pos + payload,
            found: bytes.len(),
        });
    }
    if remaining > payload {
        return Err(Error::Format(format!(
            "shape table inconsistent with payload: {} trailing bytes",
            remaining - payload
        )));
    }
    let mut layers = Vec::with_capacity(count);
    for (k, inc, outc) in table {
        let ks = 2 * k + 1;
        let shape = Shape4::new(outc, inc, ks, ks);
        let w = (0..shape.len()).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let b = (0..outc).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        layers.push(ConvParams::new(Tensor4::from_vec(shape, w)?, b)?);
    }
    Ok(ModelState {
        variant,
        epsilon: DEFAULT_EPSILON,
        layers,
        seed: None,
    })
}

pub fn save(model: &ModelState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint. The denominator guard is not stored; the default is used.
pub fn load(path: impl AsRef<Path>) -> Result<ModelState> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Loads a checkpoint and checks it against `spec`, adopting the spec's epsilon.
pub fn load_for_spec(path: impl AsRef<Path>, spec: &NetworkSpec) -> Result<ModelState> {
    let mut model = load(path)?;
    model.check_spec(spec)?;
    model.epsilon = spec.epsilon;
    Ok(model)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Truncated {
                expected: end,
                found: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
