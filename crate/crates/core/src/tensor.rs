//! Dense 4-D tensors in `(batch, channel, height, width)` row-major layout and
//! binary observation masks aligned with their spatial grid.
//!
//! Only the arithmetic needed by the layers lives here. There is no
//! broadcasting beyond scalar scaling and no strided views.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub const fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of elements in one `(h, w)` plane.
    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Number of elements in one batch item.
    pub const fn item(&self) -> usize {
        self.c * self.h * self.w
    }

    #[inline]
    pub const fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }

    fn dim(&self, axis: Axis) -> usize {
        match axis {
            Axis::Batch => self.n,
            Axis::Channel => self.c,
            Axis::Height => self.h,
            Axis::Width => self.w,
        }
    }
}

impl fmt::Display for Shape4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Batch,
    Channel,
    Height,
    Width,
}

impl Axis {
    pub const SPATIAL: [Axis; 2] = [Axis::Height, Axis::Width];
    pub const ALL: [Axis; 4] = [Axis::Batch, Axis::Channel, Axis::Height, Axis::Width];
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4 {
    shape: Shape4,
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn full(shape: Shape4, value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn zeros(shape: Shape4) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: Shape4) -> Self {
        Self::full(shape, 1.0)
    }

    /// Wraps `data` after checking its length and that every element is finite.
    pub fn from_vec(shape: Shape4, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::invalid(format!(
                "data length {} does not match shape {shape} ({} elements)",
                data.len(),
                shape.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { shape, data })
    }

    pub fn from_fn(shape: Shape4, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Self { shape, data }
    }

    // Crate-internal constructor for kernels that already guarantee the length.
    pub(crate) fn from_raw(shape: Shape4, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), shape.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.shape.index(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, value: f64) {
        let i = self.shape.index(n, c, y, x);
        self.data[i] = value;
    }

    /// The `(h, w)` plane of batch item `n`, channel `c`.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn item(&self, n: usize) -> &[f64] {
        let len = self.shape.item();
        &self.data[n * len..(n + 1) * len]
    }

    fn zip_with(
        &self,
        other: &Tensor4,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor4> {
        if self.shape != other.shape {
            return Err(Error::shape(op, self.shape, other.shape));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor4::from_raw(self.shape, data))
    }

    pub fn add(&self, other: &Tensor4) -> Result<Tensor4> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor4) -> Result<Tensor4> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor4) -> Result<Tensor4> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, factor: f64) -> Tensor4 {
        Tensor4::from_raw(self.shape, self.data.iter().map(|v| v * factor).collect())
    }

    /// Sums over `axes`, keeping reduced dimensions with size 1.
    ///
    /// Summation runs in increasing flat-index order, so results are
    /// reproducible bit for bit.
    pub fn reduce_sum(&self, axes: &[Axis]) -> Tensor4 {
        let s = self.shape;
        let keep = |a: Axis| !axes.contains(&a);
        let out_shape = Shape4::new(
            if keep(Axis::Batch) { s.n } else { 1 },
            if keep(Axis::Channel) { s.c } else { 1 },
            if keep(Axis::Height) { s.h } else { 1 },
            if keep(Axis::Width) { s.w } else { 1 },
        );
        let mut out = vec![0.0; out_shape.len()];
        let pick = |a: Axis, i: usize| if keep(a) { i } else { 0 };
        let mut flat = 0;
        for n in 0..s.n {
            for c in 0..s.c {
                for y in 0..s.h {
                    for x in 0..s.w {
                        let o = out_shape.index(
                            pick(Axis::Batch, n),
                            pick(Axis::Channel, c),
                            pick(Axis::Height, y),
                            pick(Axis::Width, x),
                        );
                        out[o] += self.data[flat];
                        flat += 1;
                    }
                }
            }
        }
        Tensor4::from_raw(out_shape, out)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Pads both spatial dimensions by `k` on each side with `fill`.
    pub fn pad_spatial(&self, k: usize, fill: f64) -> Tensor4 {
        if k == 0 {
            return self.clone();
        }
        let s = self.shape;
        let out_shape = Shape4::new(s.n, s.c, s.h + 2 * k, s.w + 2 * k);
        let mut out = vec![fill; out_shape.len()];
        for n in 0..s.n {
            for c in 0..s.c {
                for y in 0..s.h {
                    let src = s.index(n, c, y, 0);
                    let dst = out_shape.index(n, c, y + k, k);
                    out[dst..dst + s.w].copy_from_slice(&self.data[src..src + s.w]);
                }
            }
        }
        Tensor4::from_raw(out_shape, out)
    }

    /// Removes `k` pixels from every spatial border; inverse of [`Tensor4::pad_spatial`].
    pub fn crop_spatial(&self, k: usize) -> Result<Tensor4> {
        let s = self.shape;
        if s.h <= 2 * k || s.w <= 2 * k {
            return Err(Error::invalid(format!(
                "cannot crop {k} from each side of {s}"
            )));
        }
        let out_shape = Shape4::new(s.n, s.c, s.h - 2 * k, s.w - 2 * k);
        let mut out = Vec::with_capacity(out_shape.len());
        for n in 0..s.n {
            for c in 0..s.c {
                for y in k..s.h - k {
                    let src = s.index(n, c, y, k);
                    out.extend_from_slice(&self.data[src..src + out_shape.w]);
                }
            }
        }
        Ok(Tensor4::from_raw(out_shape, out))
    }

    /// Copies channels `[start, end)` into a new tensor.
    pub fn slice_channels(&self, start: usize, end: usize) -> Result<Tensor4> {
        let s = self.shape;
        if start > end || end > s.c {
            return Err(Error::invalid(format!(
                "channel range {start}..{end} out of bounds for {s}"
            )));
        }
        let out_shape = Shape4::new(s.n, end - start, s.h, s.w);
        let mut out = Vec::with_capacity(out_shape.len());
        for n in 0..s.n {
            let a = s.index(n, start, 0, 0);
            let b = s.index(n, end, 0, 0);
            out.extend_from_slice(&self.data[a..b]);
        }
        Ok(Tensor4::from_raw(out_shape, out))
    }

    /// Copies batch items `[start, end)` into a new tensor.
    pub fn slice_batch(&self, start: usize, end: usize) -> Result<Tensor4> {
        let s = self.shape;
        if start > end || end > s.n {
            return Err(Error::invalid(format!(
                "batch range {start}..{end} out of bounds for {s}"
            )));
        }
        let len = s.item();
        Ok(Tensor4::from_raw(
            Shape4::new(end - start, s.c, s.h, s.w),
            self.data[start * len..end * len].to_vec(),
        ))
    }

    /// Stacks equally shaped tensors along the batch axis.
    pub fn stack_batch(items: &[Tensor4]) -> Result<Tensor4> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("cannot stack an empty list"))?
            .shape;
        let mut data = Vec::with_capacity(first.len() * items.len());
        let mut n = 0;
        for t in items {
            if (t.shape.c, t.shape.h, t.shape.w) != (first.c, first.h, first.w) {
                return Err(Error::shape("stack_batch", first, t.shape));
            }
            data.extend_from_slice(&t.data);
            n += t.shape.n;
        }
        Ok(Tensor4::from_raw(
            Shape4::new(n, first.c, first.h, first.w),
            data,
        ))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub(crate) fn check_dim(&self, axis: Axis, expected: usize, op: &'static str) -> Result<()> {
        if self.shape.dim(axis) != expected {
            let mut want = self.shape;
            match axis {
                Axis::Batch => want.n = expected,
                Axis::Channel => want.c = expected,
                Axis::Height => want.h = expected,
                Axis::Width => want.w = expected,
            }
            return Err(Error::shape(op, self.shape, want));
        }
        Ok(())
    }
}

/// Binary observation indicator with shape `(n, 1, h, w)`.
///
/// Stored as a real tensor so mask arithmetic reuses the tensor kernels; every
/// element is exactly 0.0 or 1.0.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask(Tensor4);

impl Mask {
    pub fn from_tensor(t: Tensor4) -> Result<Self> {
        t.check_dim(Axis::Channel, 1, "mask")?;
        if let Some(i) = t.data.iter().position(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::invalid(format!(
                "mask element {i} is {}, expected 0 or 1",
                t.data[i]
            )));
        }
        Ok(Mask(t))
    }

    pub fn from_fn(
        n: usize,
        h: usize,
        w: usize,
        mut f: impl FnMut(usize, usize, usize) -> bool,
    ) -> Self {
        Mask(Tensor4::from_fn(Shape4::new(n, 1, h, w), |n, _, y, x| {
            if f(n, y, x) {
                1.0
            } else {
                0.0
            }
        }))
    }

    /// Observed wherever `t` is non-zero; `t` must be single-channel.
    pub fn nonzero(t: &Tensor4) -> Result<Self> {
        t.check_dim(Axis::Channel, 1, "mask")?;
        let data = t
            .data
            .iter()
            .map(|&v| if v != 0.0 { 1.0 } else { 0.0 })
            .collect();
        Ok(Mask(Tensor4::from_raw(t.shape, data)))
    }

    pub fn ones(n: usize, h: usize, w: usize) -> Self {
        Mask(Tensor4::ones(Shape4::new(n, 1, h, w)))
    }

    pub fn zeros(n: usize, h: usize, w: usize) -> Self {
        Mask(Tensor4::zeros(Shape4::new(n, 1, h, w)))
    }

    pub(crate) fn from_raw(t: Tensor4) -> Self {
        debug_assert!(t.data.iter().all(|&v| v == 0.0 || v == 1.0));
        Mask(t)
    }

    pub fn as_tensor(&self) -> &Tensor4 {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor4 {
        self.0
    }

    pub fn shape(&self) -> Shape4 {
        self.0.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    #[inline]
    pub fn is_observed(&self, n: usize, y: usize, x: usize) -> bool {
        self.0.get(n, 0, y, x) != 0.0
    }

    pub fn count(&self) -> usize {
        self.0.data.iter().filter(|&&v| v != 0.0).count()
    }

    /// Fraction of observed pixels.
    pub fn density(&self) -> f64 {
        self.count() as f64 / self.0.data.len() as f64
    }

    /// Errors unless this mask has the batch and spatial dims of `t`.
    pub fn check_aligned(&self, t: &Tensor4, op: &'static str) -> Result<()> {
        let (m, s) = (self.shape(), t.shape());
        if (m.n, m.h, m.w) != (s.n, s.h, s.w) {
            return Err(Error::shape(op, s, m));
        }
        Ok(())
    }
}
