//! Multi-scan accumulation and consistency cleaning against a reference
//! depth, plus a synthetic scene generator with moving-object ghosts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{derive_seed, DepthMap, SceneConfig, SceneLayout};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricsReport, Unit};

/// Focal length times stereo baseline (pixel·meters) of a KITTI-like rig,
/// used to express fused depths as disparities for evaluation.
pub const DEFAULT_FOCAL_BASELINE: f64 = 389.3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub n_scans: usize,
    /// Relative depth error above which an accumulated point is rejected.
    pub tau: f64,
    pub focal_baseline: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            n_scans: 11,
            tau: 0.05,
            focal_baseline: DEFAULT_FOCAL_BASELINE,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_scans == 0 {
            return Err(Error::invalid("n_scans must be at least 1"));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::invalid(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.focal_baseline > 0.0 && self.focal_baseline.is_finite()) {
            return Err(Error::invalid("focal_baseline must be positive"));
        }
        Ok(())
    }
}

/// Per-pixel minimum over the scans that observe it.
pub fn accumulate(scans: &[DepthMap]) -> Result<DepthMap> {
    let first = scans.first().ok_or_else(|| Error::invalid("accumulate needs at least one scan"))?;
    let mut out = first.depth().to_vec();
    for s in &scans[1..] {
        first.check_same_size(s, "accumulate")?;
        for (o, &v) in out.iter_mut().zip(s.depth()) {
            if v > 0.0 && (*o == 0.0 || v < *o) {
                *o = v;
            }
        }
    }
    DepthMap::new(first.height(), first.width(), out)
}

/// Drops accumulated points whose relative error against an observed
/// reference is at least `tau`; points without a reference are kept.
pub fn clean(acc: &DepthMap, reference: &DepthMap, cfg: &FusionConfig) -> Result<DepthMap> {
    cfg.validate()?;
    acc.check_same_size(reference, "clean")?;
    let out = acc
        .depth()
        .iter()
        .zip(reference.depth())
        .map(|(&a, &r)| {
            if a > 0.0 && r > 0.0 && (a - r).abs() / r >= cfg.tau {
                0.0
            } else {
                a
            }
        })
        .collect();
    DepthMap::new(acc.height(), acc.width(), out)
}

/// Depth to disparity (`fb / d`), keeping 0 as unobserved.
pub fn to_disparity(d: &DepthMap, focal_baseline: f64) -> DepthMap {
    let out = d
        .depth()
        .iter()
        .map(|&v| if v > 0.0 { focal_baseline / v } else { 0.0 })
        .collect();
    DepthMap::new(d.height(), d.width(), out).expect("positive disparities")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionReport {
    pub raw: MetricsReport,
    pub accumulated: MetricsReport,
    pub cleaned: MetricsReport,
}

impl FusionReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("stage,{}\n", metrics::CSV_HEADER);
        for (name, r) in [("raw", &self.raw), ("accumulated", &self.accumulated), ("cleaned", &self.cleaned)] {
            out.push_str(&format!("{name},{}\n", r.to_csv_row()));
        }
        out
    }
}

/// Accumulates `scans`, cleans against `reference`, and scores the first
/// scan, the accumulation and the cleaned map against `truth` in disparity
/// space over the pixels each map observes.
pub fn fuse_pipeline(
    scans: &[DepthMap],
    reference: &DepthMap,
    truth: &DepthMap,
    cfg: &FusionConfig,
) -> Result<(DepthMap, FusionReport)> {
    let acc = accumulate(scans)?;
    let cleaned = clean(&acc, reference, cfg)?;
    let truth_disp = to_disparity(truth, cfg.focal_baseline);
    let score = |m: &DepthMap| metrics::evaluate_sparse(&to_disparity(m, cfg.focal_baseline), &truth_disp, Unit::DisparityPx);
    let report = FusionReport {
        raw: score(&scans[0])?,
        accumulated: score(&acc)?,
        cleaned: score(&cleaned)?,
    };
    Ok((cleaned, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GhostConfig {
    /// Probability that a scan observes a given pixel.
    pub scan_density: f64,
    /// Boxes (taken from the front of the layout) that move between scans.
    pub moving_boxes: usize,
    /// Horizontal shift per scan, in pixels.
    pub shift_per_scan: isize,
    /// Reference coverage; 1.0 gives a dense reference.
    pub reference_density: f64,
}

impl Default for GhostConfig {
    fn default() -> Self {
        Self {
            scan_density: 0.05,
            moving_boxes: 2,
            shift_per_scan: 1,
            reference_density: 1.0,
        }
    }
}

/// Synthetic fusion instance with the ground-truth origin of every
/// accumulated point.
#[derive(Clone, Debug)]
pub struct GhostScene {
    pub truth: DepthMap,
    pub scans: Vec<DepthMap>,
    pub reference: DepthMap,
    /// Accumulated pixels whose value comes from a ghost observation.
    pub outliers: Vec<usize>,
    /// Accumulated pixels whose value is a noisy true measurement.
    pub inliers: Vec<usize>,
}

/// Builds scans of one scene where the first `moving_boxes` boxes leave a
/// shifted copy ("ghost") in every scan after the first.
///
/// True measurements carry relative noise below `tau / 2`, the reference
/// relative noise below `tau / 4`. A ghost sample is only emitted where its
/// relative error against the truth is at least `2 tau`; weaker ghost samples
/// are dropped so every injected outlier is unambiguous.
pub fn simulate_ghost_scene(
    scene: &SceneConfig,
    fusion: &FusionConfig,
    ghost: &GhostConfig,
    seed: u64,
) -> Result<GhostScene> {
    fusion.validate()?;
    if !(ghost.scan_density > 0.0 && ghost.scan_density <= 1.0) {
        return Err(Error::invalid("scan_density must lie in (0, 1]"));
    }
    if !(ghost.reference_density > 0.0 && ghost.reference_density <= 1.0) {
        return Err(Error::invalid("reference_density must lie in (0, 1]"));
    }
    let layout = SceneLayout::sample(&scene.with_seed(derive_seed(seed, 10, 0)))?;
    let truth = layout.render();
    let (h, w) = (truth.height(), truth.width());
    let tau = fusion.tau;
    let movers = &layout.boxes[..ghost.moving_boxes.min(layout.boxes.len())];

    // Best (minimum) value seen per pixel and whether it is a ghost.
    let mut best: Vec<Option<(f64, bool)>> = vec![None; h * w];
    let mut scans = Vec::with_capacity(fusion.n_scans);
    for s in 0..fusion.n_scans {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 11, s as u64));
        let shift = ghost.shift_per_scan * s as isize;
        let mut data = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let observe = rng.gen::<f64>() < ghost.scan_density;
                let noise = rng.gen_range(-0.4 * tau..0.4 * tau);
                if !observe {
                    continue;
                }
                let t = truth.get(y, x);
                let ghost_depth = if s == 0 {
                    None
                } else {
                    movers.iter().find_map(|b| {
                        let sx = x as isize - shift;
                        (sx >= 0 && b.contains(y, sx as usize)).then(|| b.depth_at(sx as usize))
                    })
                };
                let (value, is_ghost) = match ghost_depth {
                    Some(g) if (g - t).abs() / t >= 2.0 * tau => (g, true),
                    Some(_) => continue,
                    None => (t * (1.0 + noise), false),
                };
                data[y * w + x] = value;
                let slot = &mut best[y * w + x];
                if slot.map_or(true, |(v, _)| value < v) {
                    *slot = Some((value, is_ghost));
                }
            }
        }
        scans.push(DepthMap::new(h, w, data)?);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 12, 0));
    let reference: Vec<f64> = truth
        .depth()
        .iter()
        .map(|&t| {
            let keep = rng.gen::<f64>() < ghost.reference_density;
            let noise = rng.gen_range(-0.2 * tau..0.2 * tau);
            if keep {
                t * (1.0 + noise)
            } else {
                0.0
            }
        })
        .collect();

    let mut outliers = Vec::new();
    let mut inliers = Vec::new();
    for (i, b) in best.iter().enumerate() {
        match b {
            Some((_, true)) => outliers.push(i),
            Some((_, false)) => inliers.push(i),
            None => {}
        }
    }
    Ok(GhostScene {
        truth,
        scans,
        reference: DepthMap::new(h, w, reference)?,
        outliers,
        inliers,
    })
}
