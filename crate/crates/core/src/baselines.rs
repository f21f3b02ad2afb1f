//! Depth-only interpolation baselines.

use serde::{Deserialize, Serialize};

use crate::data::DepthMap;
use crate::error::{Error, Result};

/// Gaussian kernel regression settings. Observations farther than `radius`
/// (Euclidean, in pixels) are ignored.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NWConfig {
    pub bandwidth: f64,
    pub radius: f64,
}

impl NWConfig {
    /// Radius defaults to three bandwidths.
    pub fn new(bandwidth: f64) -> Result<Self> {
        Self::with_radius(bandwidth, 3.0 * bandwidth)
    }

    pub fn with_radius(bandwidth: f64, radius: f64) -> Result<Self> {
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(Error::invalid(format!("bandwidth must be positive, got {bandwidth}")));
        }
        if !(radius >= 1.0 && radius.is_finite()) {
            return Err(Error::invalid(format!("radius must be at least 1, got {radius}")));
        }
        Ok(Self { bandwidth, radius })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolConfig {
    pub radius: usize,
}

impl PoolConfig {
    pub fn new(radius: usize) -> Result<Self> {
        if radius == 0 {
            return Err(Error::invalid("pool radius must be at least 1"));
        }
        Ok(Self { radius })
    }
}

/// Nadaraya-Watson estimate with kernel `exp(-|Δ|² / 2h²)`. Pixels with no
/// observation within the radius stay 0.
pub fn nadaraya_watson(d: &DepthMap, cfg: &NWConfig) -> Result<DepthMap> {
    if d.observed_count() == 0 {
        return Err(Error::invalid("nadaraya_watson needs at least one observed pixel"));
    }
    let (h, w) = (d.height(), d.width());
    let reach = cfg.radius.floor() as usize;
    let r2 = cfg.radius * cfg.radius;
    let inv = 1.0 / (2.0 * cfg.bandwidth * cfg.bandwidth);
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (mut num, mut den) = (0.0, 0.0);
            for v in y.saturating_sub(reach)..(y + reach + 1).min(h) {
                for u in x.saturating_sub(reach)..(x + reach + 1).min(w) {
                    let dv = d.get(v, u);
                    if dv <= 0.0 {
                        continue;
                    }
                    let dist2 = ((v as f64 - y as f64).powi(2)) + ((u as f64 - x as f64).powi(2));
                    if dist2 > r2 {
                        continue;
                    }
                    let k = (-dist2 * inv).exp();
                    num += k * dv;
                    den += k;
                }
            }
            if den > 0.0 {
                out[y * w + x] = num / den;
            }
        }
    }
    DepthMap::new(h, w, out)
}

/// Fills each unobserved pixel with the smallest observed depth in the
/// `(2r+1)²` window around it; observed pixels pass through unchanged.
pub fn closest_depth_pool(d: &DepthMap, cfg: &PoolConfig) -> Result<DepthMap> {
    let (h, w) = (d.height(), d.width());
    let r = cfg.radius;
    let mut out = d.depth().to_vec();
    for y in 0..h {
        for x in 0..w {
            if d.is_observed(y, x) {
                continue;
            }
            let mut best = f64::INFINITY;
            for v in y.saturating_sub(r)..(y + r + 1).min(h) {
                for u in x.saturating_sub(r)..(x + r + 1).min(w) {
                    let dv = d.get(v, u);
                    if dv > 0.0 && dv < best {
                        best = dv;
                    }
                }
            }
            if best.is_finite() {
                out[y * w + x] = best;
            }
        }
    }
    DepthMap::new(h, w, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(h: usize, w: usize, y: usize, x: usize, v: f64) -> DepthMap {
        let mut data = vec![0.0; h * w];
        data[y * w + x] = v;
        DepthMap::new(h, w, data).unwrap()
    }

    #[test]
    fn nw_single_observation_spreads_its_value() {
        let d = single(9, 9, 4, 4, 7.5);
        let out = nadaraya_watson(&d, &NWConfig::new(1.0).unwrap()).unwrap();
        for y in 0..9 {
            for x in 0..9 {
                let dist2 = (y as f64 - 4.0).powi(2) + (x as f64 - 4.0).powi(2);
                let expected = if dist2 <= 9.0 { 7.5 } else { 0.0 };
                assert!((out.get(y, x) - expected).abs() <= 1e-12 * expected, "({y}, {x})");
            }
        }
    }

    #[test]
    fn nw_small_bandwidth_recovers_observation() {
        let d = DepthMap::new(1, 3, vec![2.0, 0.0, 9.0]).unwrap();
        let out = nadaraya_watson(&d, &NWConfig::with_radius(0.05, 2.0).unwrap()).unwrap();
        assert!((out.get(0, 0) - 2.0).abs() < 1e-12);
        assert!((out.get(0, 2) - 9.0).abs() < 1e-12);
    }

    #[test]
    fn nw_rejects_empty_input() {
        assert!(nadaraya_watson(&DepthMap::zeros(3, 3), &NWConfig::new(1.0).unwrap()).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(NWConfig::new(0.0).is_err());
        assert!(NWConfig::with_radius(1.0, 0.5).is_err());
        assert_eq!(NWConfig::new(2.0).unwrap().radius, 6.0);
        assert!(PoolConfig::new(0).is_err());
    }

    #[test]
    fn pool_takes_the_nearest_depth() {
        let d = DepthMap::new(1, 4, vec![7.0, 0.0, 3.0, 12.0]).unwrap();
        let out = closest_depth_pool(&d, &PoolConfig::new(1).unwrap()).unwrap();
        assert_eq!(out.depth(), &[7.0, 3.0, 3.0, 12.0]);
    }

    #[test]
    fn pool_leaves_empty_windows_unobserved() {
        let d = single(1, 5, 0, 0, 4.0);
        let out = closest_depth_pool(&d, &PoolConfig::new(1).unwrap()).unwrap();
        assert_eq!(out.depth(), &[4.0, 4.0, 0.0, 0.0, 0.0]);
    }
}
