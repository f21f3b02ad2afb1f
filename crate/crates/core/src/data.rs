//! Depth maps, procedural scenes, random dropout and 16-bit PGM I/O.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Mask, Shape4, Tensor4};

/// Stored sample = round(depth · 256).
pub const PGM_SCALE: f64 = 256.0;
pub const PGM_MAXVAL: u32 = 65535;

/// Derives an independent stream seed from a base seed and two indices
/// (splitmix64 finalizer over a simple combination).
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ index.wrapping_mul(0xd1b5_4a32_d192_ed03).rotate_left(17);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Single-channel depth image in meters; 0 marks a missing measurement.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    height: usize,
    width: usize,
    depth: Vec<f64>,
}

impl DepthMap {
    pub fn new(height: usize, width: usize, depth: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("depth map dimensions must be positive"));
        }
        if depth.len() != height * width {
            return Err(Error::invalid(format!(
                "depth map {height}x{width} needs {} values, got {}",
                height * width,
                depth.len()
            )));
        }
        for (i, &d) in depth.iter().enumerate() {
            if !d.is_finite() {
                return Err(Error::NonFinite { index: i });
            }
            if d < 0.0 {
                return Err(Error::NonPositiveDepth {
                    row: i / width,
                    col: i % width,
                    value: d,
                });
            }
        }
        Ok(Self { height, width, depth })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            depth: vec![0.0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn depth(&self) -> &[f64] {
        &self.depth
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.depth
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.depth[row * self.width + col]
    }

    pub fn is_observed(&self, row: usize, col: usize) -> bool {
        self.get(row, col) > 0.0
    }

    pub fn observed_count(&self) -> usize {
        self.depth.iter().filter(|&&d| d > 0.0).count()
    }

    pub fn density(&self) -> f64 {
        self.observed_count() as f64 / self.depth.len() as f64
    }

    pub fn same_size(&self, other: &DepthMap) -> bool {
        (self.height, self.width) == (other.height, other.width)
    }

    pub(crate) fn check_same_size(&self, other: &DepthMap, op: &'static str) -> Result<()> {
        if !self.same_size(other) {
            return Err(Error::shape(op, self.shape(), other.shape()));
        }
        Ok(())
    }

    /// `(1, 1, height, width)`.
    pub fn shape(&self) -> Shape4 {
        Shape4::new(1, 1, self.height, self.width)
    }

    pub fn mask(&self) -> Mask {
        Mask::from_fn(1, self.height, self.width, |_, y, x| self.is_observed(y, x))
    }

    pub fn to_tensor(&self) -> Tensor4 {
        Tensor4::from_raw(self.shape(), self.depth.clone())
    }

    /// Reads item `n`, channel 0 of `t`. Negative values become 0 (unobserved).
    pub fn from_tensor(t: &Tensor4, n: usize) -> Result<Self> {
        let s = t.shape();
        if n >= s.n {
            return Err(Error::invalid(format!("batch index {n} out of range for {s}")));
        }
        let depth = t.plane(n, 0).iter().map(|&v| v.max(0.0)).collect();
        DepthMap::new(s.h, s.w, depth)
    }

    /// Stacks equally sized maps into a `(n, 1, h, w)` batch with its mask.
    pub fn stack(maps: &[&DepthMap]) -> Result<(Tensor4, Mask)> {
        let first = maps.first().ok_or_else(|| Error::invalid("cannot stack an empty list"))?;
        let shape = Shape4::new(maps.len(), 1, first.height, first.width);
        let mut data = Vec::with_capacity(shape.len());
        for m in maps {
            first.check_same_size(m, "stack")?;
            data.extend_from_slice(&m.depth);
        }
        let t = Tensor4::from_raw(shape, data);
        let mask = Mask::nonzero(&t)?;
        Ok((t, mask))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub min_depth: f64,
    pub max_depth: f64,
    pub boxes: usize,
    /// Horizon row as a fraction of the image height; rows at or above it
    /// see `max_depth`.
    pub horizon: f64,
    /// Ground depth at the bottom image row.
    pub ground_near: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            min_depth: 2.0,
            max_depth: 80.0,
            boxes: 4,
            horizon: 0.4,
            ground_near: 4.0,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 2 || self.width < 2 {
            return Err(Error::invalid("scene must be at least 2x2"));
        }
        if !(self.min_depth > 0.0 && self.min_depth < self.max_depth && self.max_depth.is_finite()) {
            return Err(Error::invalid(format!(
                "invalid depth range [{}, {}]",
                self.min_depth, self.max_depth
            )));
        }
        if !(0.0..1.0).contains(&self.horizon) {
            return Err(Error::invalid("horizon must lie in [0, 1)"));
        }
        if !(self.ground_near >= self.min_depth && self.ground_near <= self.max_depth) {
            return Err(Error::invalid("ground_near must lie inside the depth range"));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

/// Axis-aligned rectangle whose depth varies linearly along x.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneBox {
    pub top: usize,
    pub left: usize,
    /// Exclusive.
    pub bottom: usize,
    /// Exclusive.
    pub right: usize,
    pub depth: f64,
    /// Depth change per pixel to the right of `left`.
    pub slope: f64,
}

impl SceneBox {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.top..self.bottom).contains(&row) && (self.left..self.right).contains(&col)
    }

    /// Depth at `col`, measured from the box's own left edge.
    pub fn depth_at(&self, col: usize) -> f64 {
        self.depth + self.slope * (col as f64 - self.left as f64)
    }
}

/// Ground plane plus occluding boxes.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneLayout {
    pub config: SceneConfig,
    pub boxes: Vec<SceneBox>,
}

impl SceneLayout {
    pub fn sample(cfg: &SceneConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (h, w) = (cfg.height, cfg.width);
        let far = cfg.min_depth + 0.5 * (cfg.max_depth - cfg.min_depth);
        let mut boxes = Vec::with_capacity(cfg.boxes);
        for _ in 0..cfg.boxes {
            let bh = rng.gen_range((h / 8).max(1)..=(h / 2).max(1));
            let bw = rng.gen_range((w / 8).max(1)..=(w / 2).max(1));
            let top = rng.gen_range(0..=h - bh);
            let left = rng.gen_range(0..=w - bw);
            let near = rng.gen_range(cfg.min_depth..far);
            let far_end = if rng.gen_bool(0.5) {
                near
            } else {
                rng.gen_range(cfg.min_depth..far)
            };
            let slope = if bw > 1 { (far_end - near) / (bw - 1) as f64 } else { 0.0 };
            boxes.push(SceneBox {
                top,
                left,
                bottom: top + bh,
                right: left + bw,
                depth: near,
                slope,
            });
        }
        Ok(Self {
            config: cfg.clone(),
            boxes,
        })
    }

    /// Ground-plane depth at `row`, ignoring boxes.
    pub fn ground(&self, row: usize) -> f64 {
        let cfg = &self.config;
        let horizon = cfg.horizon * (cfg.height - 1) as f64;
        let below = row as f64 - horizon;
        if below <= 0.0 {
            return cfg.max_depth;
        }
        let span = (cfg.height - 1) as f64 - horizon;
        (cfg.ground_near * span / below).clamp(cfg.min_depth, cfg.max_depth)
    }

    pub fn render(&self) -> DepthMap {
        let (h, w) = (self.config.height, self.config.width);
        let mut depth = Vec::with_capacity(h * w);
        for y in 0..h {
            let g = self.ground(y);
            for x in 0..w {
                let d = self
                    .boxes
                    .iter()
                    .filter(|b| b.contains(y, x))
                    .map(|b| b.depth_at(x))
                    .fold(g, f64::min);
                depth.push(d.clamp(self.config.min_depth, self.config.max_depth));
            }
        }
        DepthMap {
            height: h,
            width: w,
            depth,
        }
    }
}

/// Dense synthetic depth map: a ground plane receding towards the horizon,
/// occluded by random constant or slanted boxes (pointwise minimum).
pub fn generate_scene(cfg: &SceneConfig) -> Result<DepthMap> {
    Ok(SceneLayout::sample(cfg)?.render())
}

/// Keeps each observed pixel independently with probability `keep_prob`.
///
/// One uniform draw is made per pixel in row-major order whether or not the
/// pixel is observed, so the kept set for a given seed does not depend on
/// the input's mask.
pub fn sparsify(d: &DepthMap, keep_prob: f64, seed: u64) -> Result<DepthMap> {
    if !(keep_prob > 0.0 && keep_prob <= 1.0) {
        return Err(Error::invalid(format!("keep probability must lie in (0, 1], got {keep_prob}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let depth = d
        .depth
        .iter()
        .map(|&v| if rng.gen::<f64>() < keep_prob { v } else { 0.0 })
        .collect();
    Ok(DepthMap {
        height: d.height,
        width: d.width,
        depth,
    })
}

pub fn encode_depth_pgm(d: &DepthMap) -> Result<Vec<u8>> {
    let mut out = format!("P5\n{} {}\n{}\n", d.width, d.height, PGM_MAXVAL).into_bytes();
    out.reserve(2 * d.depth.len());
    for (i, &v) in d.depth.iter().enumerate() {
        let q = if v > 0.0 { (v * PGM_SCALE).round().max(1.0) } else { 0.0 };
        if q > PGM_MAXVAL as f64 {
            return Err(Error::invalid(format!(
                "depth {v} at pixel ({}, {}) exceeds the representable maximum",
                i / d.width,
                i % d.width
            )));
        }
        out.extend_from_slice(&(q as u16).to_be_bytes());
    }
    Ok(out)
}

pub fn decode_depth_pgm(bytes: &[u8]) -> Result<DepthMap> {
    let mut pos = 0;
    let magic = next_token(bytes, &mut pos)?;
    if magic != b"P5" {
        return Err(Error::BadMagic {
            expected: "P5",
            found: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let width = parse_header_number(next_token(bytes, &mut pos)?, "width")?;
    let height = parse_header_number(next_token(bytes, &mut pos)?, "height")?;
    let maxval = parse_header_number(next_token(bytes, &mut pos)?, "maxval")?;
    if maxval != PGM_MAXVAL as usize {
        return Err(Error::WrongMaxval(u32::try_from(maxval).unwrap_or(u32::MAX)));
    }
    if width == 0 || height == 0 {
        return Err(Error::Header(format!("zero image size {width}x{height}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::Header("missing whitespace after maxval".into())),
    }
    let expected = 2 * width * height;
    let payload = &bytes[pos..];
    if payload.len() < expected {
        return Err(Error::Truncated {
            expected,
            found: payload.len(),
        });
    }
    let depth = payload[..expected]
        .chunks_exact(2)
        .map(|b| u16::from_be_bytes([b[0], b[1]]) as f64 / PGM_SCALE)
        .collect();
    Ok(DepthMap { height, width, depth })
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => return Err(Error::Header("unexpected end of header".into())),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(|b| !b.is_ascii_whitespace()) {
        *pos += 1;
    }
    Ok(&bytes[start..*pos])
}

fn parse_header_number(tok: &[u8], what: &str) -> Result<usize> {
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Header(format!("bad {what} {:?}", String::from_utf8_lossy(tok))))
}

pub fn write_depth_pgm(d: &DepthMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_depth_pgm(d)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_depth_pgm(path: impl AsRef<Path>) -> Result<DepthMap> {
    let path = path.as_ref();
    decode_depth_pgm(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// One training batch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub depth: Tensor4,
    pub mask: Mask,
    pub target: Tensor4,
    pub target_valid: Mask,
}

impl Batch {
    pub fn from_pairs(pairs: &[(DepthMap, DepthMap)]) -> Result<Self> {
        let inputs: Vec<&DepthMap> = pairs.iter().map(|p| &p.0).collect();
        let targets: Vec<&DepthMap> = pairs.iter().map(|p| &p.1).collect();
        let (depth, mask) = DepthMap::stack(&inputs)?;
        let (target, target_valid) = DepthMap::stack(&targets)?;
        if depth.shape() != target.shape() {
            return Err(Error::shape("batch", depth.shape(), target.shape()));
        }
        Ok(Self {
            depth,
            mask,
            target,
            target_valid,
        })
    }
}

/// Deterministic supplier of training batches; batch `iteration` must depend
/// only on the source's configuration and `iteration`.
pub trait DataSource {
    fn batch(&mut self, iteration: usize, batch_size: usize) -> Result<Batch>;
}

/// Fresh procedural scenes for every sample, sparsified at `density`.
#[derive(Clone, Debug)]
pub struct SyntheticSource {
    pub scene: SceneConfig,
    pub density: f64,
    pub seed: u64,
}

impl SyntheticSource {
    pub fn new(scene: SceneConfig, density: f64, seed: u64) -> Result<Self> {
        scene.validate()?;
        if !(density > 0.0 && density <= 1.0) {
            return Err(Error::invalid(format!("density must lie in (0, 1], got {density}")));
        }
        Ok(Self { scene, density, seed })
    }

    pub fn sample(&self, index: u64) -> Result<(DepthMap, DepthMap)> {
        let dense = generate_scene(&self.scene.with_seed(derive_seed(self.seed, 1, index)))?;
        let sparse = sparsify(&dense, self.density, derive_seed(self.seed, 2, index))?;
        Ok((sparse, dense))
    }
}

impl DataSource for SyntheticSource {
    fn batch(&mut self, iteration: usize, batch_size: usize) -> Result<Batch> {
        let base = (iteration * batch_size) as u64;
        let pairs = (0..batch_size as u64)
            .map(|i| self.sample(base + i))
            .collect::<Result<Vec<_>>>()?;
        Batch::from_pairs(&pairs)
    }
}

/// Fixed set of dense maps, visited in a seeded random order per epoch. When
/// `density` is set every draw is re-sparsified with a fresh seed; otherwise
/// the stored sparse inputs are used.
#[derive(Clone, Debug)]
pub struct DatasetSource {
    pairs: Vec<(DepthMap, DepthMap)>,
    density: Option<f64>,
    seed: u64,
}

impl DatasetSource {
    pub fn new(pairs: Vec<(DepthMap, DepthMap)>, density: Option<f64>, seed: u64) -> Result<Self> {
        let first = pairs.first().ok_or_else(|| Error::invalid("dataset is empty"))?;
        for (s, d) in &pairs {
            first.0.check_same_size(s, "dataset")?;
            first.0.check_same_size(d, "dataset")?;
        }
        if let Some(p) = density {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::invalid(format!("density must lie in (0, 1], got {p}")));
            }
        }
        Ok(Self { pairs, density, seed })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    fn order(&self, epoch: u64) -> Vec<usize> {
        use rand::seq::SliceRandom;
        let mut idx: Vec<usize> = (0..self.pairs.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(self.seed, 3, epoch)));
        idx
    }
}

impl DataSource for DatasetSource {
    fn batch(&mut self, iteration: usize, batch_size: usize) -> Result<Batch> {
        let n = self.pairs.len();
        let mut pairs = Vec::with_capacity(batch_size);
        let mut cached: Option<(u64, Vec<usize>)> = None;
        for i in 0..batch_size {
            let draw = (iteration * batch_size + i) as u64;
            let epoch = draw / n as u64;
            if cached.as_ref().map(|c| c.0) != Some(epoch) {
                cached = Some((epoch, self.order(epoch)));
            }
            let order = &cached.as_ref().expect("order cached").1;
            let (sparse, dense) = &self.pairs[order[(draw % n as u64) as usize]];
            let input = match self.density {
                Some(p) => sparsify(dense, p, derive_seed(self.seed, 4, draw))?,
                None => sparse.clone(),
            };
            pairs.push((input, dense.clone()));
        }
        Batch::from_pairs(&pairs)
    }
}

/// `<dir>/<index>_sparse.pgm` for a dataset split directory.
pub fn sparse_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("{index:05}_sparse.pgm"))
}

pub fn dense_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("{index:05}_dense.pgm"))
}

/// Loads every `<index>_sparse.pgm` / `<index>_dense.pgm` pair in `dir`,
/// sorted by index.
pub fn load_split(dir: impl AsRef<Path>) -> Result<Vec<(DepthMap, DepthMap)>> {
    let dir = dir.as_ref();
    let mut indices = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        if let Some(idx) = name.to_str().and_then(|n| n.strip_suffix("_dense.pgm")) {
            if let Ok(i) = idx.parse::<usize>() {
                indices.push(i);
            }
        }
    }
    indices.sort_unstable();
    if indices.is_empty() {
        return Err(Error::invalid(format!("no *_dense.pgm files in {}", dir.display())));
    }
    indices
        .into_iter()
        .map(|i| Ok((read_depth_pgm(sparse_path(dir, i))?, read_depth_pgm(dense_path(dir, i))?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_map(seed: u64, h: usize, w: usize, density: f64) -> DepthMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let depth = (0..h * w)
            .map(|_| if rng.gen_bool(density) { rng.gen_range(0.01..255.0) } else { 0.0 })
            .collect();
        DepthMap::new(h, w, depth).unwrap()
    }

    #[test]
    fn ground_plane_is_monotone_up_each_column() {
        let cfg = SceneConfig {
            boxes: 0,
            ..SceneConfig::default()
        };
        let d = generate_scene(&cfg).unwrap();
        for x in 0..d.width() {
            for y in 1..d.height() {
                assert!(d.get(y - 1, x) >= d.get(y, x), "column {x} row {y}");
            }
        }
        assert_eq!(d.get(d.height() - 1, 0), cfg.ground_near);
        assert_eq!(d.get(0, 0), cfg.max_depth);
    }

    #[test]
    fn box_occludes_by_minimum() {
        let cfg = SceneConfig {
            boxes: 0,
            horizon: 0.0,
            ground_near: 20.0,
            ..SceneConfig::default()
        };
        let mut layout = SceneLayout::sample(&cfg).unwrap();
        layout.boxes.push(SceneBox {
            top: 10,
            left: 10,
            bottom: 20,
            right: 20,
            depth: 5.0,
            slope: 0.0,
        });
        let d = layout.render();
        assert_eq!(d.get(15, 15), 5.0);
        assert!(d.get(30, 30) >= 20.0);
    }

    #[test]
    fn scenes_are_deterministic_and_in_range() {
        let cfg = SceneConfig::default().with_seed(9);
        let a = generate_scene(&cfg).unwrap();
        assert_eq!(a, generate_scene(&cfg).unwrap());
        assert_ne!(a, generate_scene(&cfg.with_seed(10)).unwrap());
        assert!(a.depth().iter().all(|&d| (cfg.min_depth..=cfg.max_depth).contains(&d)));
        assert_eq!(a.density(), 1.0);
    }

    #[test]
    fn sparsify_keep_all_is_identity() {
        let d = generate_scene(&SceneConfig::default()).unwrap();
        assert_eq!(sparsify(&d, 1.0, 3).unwrap(), d);
    }

    #[test]
    fn sparsify_rejects_bad_probability() {
        let d = DepthMap::zeros(2, 2);
        for p in [0.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(sparsify(&d, p, 0), Err(Error::InvalidArgument(_))));
        }
    }

    #[test]
    fn sparsify_density_matches_keep_probability() {
        // 100 scenes of 4096 pixels: binomial sd of the pooled density is
        // about 0.0007 at p = 0.5, far inside the 1% band.
        for p in [0.05, 0.1, 0.5] {
            let mut kept = 0;
            let mut total = 0;
            for i in 0..100 {
                let d = generate_scene(&SceneConfig::default().with_seed(i)).unwrap();
                let s = sparsify(&d, p, 1000 + i).unwrap();
                kept += s.observed_count();
                total += d.depth().len();
            }
            let density = kept as f64 / total as f64;
            assert!((density - p).abs() <= 0.01, "p={p} density={density}");
        }
    }

    #[test]
    fn different_seeds_keep_same_values() {
        let d = generate_scene(&SceneConfig::default()).unwrap();
        let a = sparsify(&d, 0.3, 1).unwrap();
        let b = sparsify(&d, 0.3, 2).unwrap();
        assert_ne!(a.mask(), b.mask());
        for i in 0..d.depth().len() {
            if a.depth()[i] > 0.0 && b.depth()[i] > 0.0 {
                assert_eq!(a.depth()[i], b.depth()[i]);
            }
        }
    }

    #[test]
    fn pgm_scale() {
        let d = DepthMap::new(1, 2, vec![1.0, 0.0]).unwrap();
        let bytes = encode_depth_pgm(&d).unwrap();
        let payload = &bytes[bytes.len() - 4..];
        assert_eq!(payload, &[1, 0, 0, 0]);
        let back = decode_depth_pgm(&bytes).unwrap();
        assert_eq!(back.depth(), &[1.0, 0.0]);
        assert!(!back.is_observed(0, 1));
    }

    #[test]
    fn pgm_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        for seed in 0..10 {
            let d = random_map(seed, 17, 23, 0.6);
            let path = dir.path().join(format!("{seed}.pgm"));
            write_depth_pgm(&d, &path).unwrap();
            let back = read_depth_pgm(&path).unwrap();
            assert_eq!(back.mask(), d.mask());
            for (a, b) in d.depth().iter().zip(back.depth()) {
                if *a > 1.0 / 256.0 {
                    assert!((a - b).abs() <= 1.0 / 512.0, "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn pgm_errors_are_distinct() {
        let d = DepthMap::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let good = encode_depth_pgm(&d).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[1] = b'2';
        assert!(matches!(decode_depth_pgm(&bad_magic), Err(Error::BadMagic { .. })));

        let wrong_max = b"P5\n2 2\n255\n\0\0\0\0".to_vec();
        assert!(matches!(decode_depth_pgm(&wrong_max), Err(Error::WrongMaxval(255))));

        let truncated = &good[..good.len() - 1];
        assert!(matches!(
            decode_depth_pgm(truncated),
            Err(Error::Truncated { expected: 8, found: 7 })
        ));

        assert!(matches!(decode_depth_pgm(b"P5\n2"), Err(Error::Header(_))));
        assert!(matches!(read_depth_pgm("/nonexistent/x.pgm"), Err(Error::Io { .. })));
    }

    #[test]
    fn pgm_header_comments_are_skipped() {
        let mut bytes = b"P5\n# comment\n1 1\n65535\n".to_vec();
        bytes.extend_from_slice(&512u16.to_be_bytes());
        assert_eq!(decode_depth_pgm(&bytes).unwrap().depth(), &[2.0]);
    }

    #[test]
    fn oversized_depth_is_rejected() {
        let d = DepthMap::new(1, 1, vec![300.0]).unwrap();
        assert!(encode_depth_pgm(&d).is_err());
    }

    #[test]
    fn depth_map_validation() {
        assert!(matches!(
            DepthMap::new(1, 2, vec![1.0, -1.0]),
            Err(Error::NonPositiveDepth { row: 0, col: 1, .. })
        ));
        assert!(matches!(DepthMap::new(1, 1, vec![f64::NAN]), Err(Error::NonFinite { index: 0 })));
        assert!(DepthMap::new(2, 2, vec![1.0]).is_err());
    }

    #[test]
    fn synthetic_batches_are_deterministic() {
        let mut a = SyntheticSource::new(SceneConfig::default(), 0.1, 5).unwrap();
        let mut b = a.clone();
        let x = a.batch(3, 2).unwrap();
        let y = b.batch(3, 2).unwrap();
        assert_eq!(x.depth, y.depth);
        assert_eq!(x.target, y.target);
        assert_eq!(x.depth.shape(), Shape4::new(2, 1, 64, 64));
        assert_ne!(a.batch(4, 2).unwrap().target, x.target);
    }

    #[test]
    fn dataset_source_visits_every_item_each_epoch() {
        let pairs: Vec<_> = (0..5)
            .map(|i| {
                let d = DepthMap::new(1, 1, vec![i as f64 + 1.0]).unwrap();
                (d.clone(), d)
            })
            .collect();
        let mut src = DatasetSource::new(pairs, None, 0).unwrap();
        let b = src.batch(0, 5).unwrap();
        let mut seen: Vec<f64> = b.target.data().to_vec();
        seen.sort_by(f64::total_cmp);
        assert_eq!(seen, vec![1.0, 2.0, 3.0, 4.0, 5.0]);
    }

    proptest! {
        #[test]
        fn sparsify_never_invents_observations(seed in 0u64..1000, p in 0.01f64..=1.0) {
            let d = random_map(seed, 8, 8, 0.5);
            let s = sparsify(&d, p, seed ^ 77).unwrap();
            for (a, b) in d.depth().iter().zip(s.depth()) {
                prop_assert!(*b == 0.0 || a == b);
            }
        }

        #[test]
        fn scenes_stay_in_range(seed in 0u64..10_000, boxes in 0usize..8) {
            let cfg = SceneConfig { boxes, height: 24, width: 20, ..SceneConfig::default() }.with_seed(seed);
            let d = generate_scene(&cfg).unwrap();
            prop_assert!(d.depth().iter().all(|&v| v >= cfg.min_depth && v <= cfg.max_depth));
        }
    }
}
