//! Depth-completion error measures over ground-truth-valid pixels.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::DepthMap;
use crate::error::{Error, Result};
use crate::tensor::{Mask, Tensor4};

pub const CSV_HEADER: &str = "mae,rmse,delta1,delta2,delta3,kitti_outlier_rate,density,n_valid";

/// Threshold base for the δ inlier rates.
pub const DELTA_BASE: f64 = 1.25;
pub const KITTI_ABS_THRESHOLD: f64 = 3.0;
pub const KITTI_REL_THRESHOLD: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Unit {
    Meters,
    DisparityPx,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mae: f64,
    pub rmse: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    /// Only reported for disparity-valued inputs.
    pub kitti_outlier_rate: Option<f64>,
    /// Input density, when an input mask was supplied.
    pub density: Option<f64>,
    pub n_valid: usize,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::invalid(format!("bad metrics JSON: {e}")))
    }

    /// One row matching [`CSV_HEADER`]; absent optional fields are empty.
    pub fn to_csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.mae,
            self.rmse,
            self.delta1,
            self.delta2,
            self.delta3,
            opt(self.kitti_outlier_rate),
            opt(self.density),
            self.n_valid
        )
    }

    pub fn from_csv_row(row: &str) -> Result<Self> {
        let cells: Vec<&str> = row.trim_end().split(',').collect();
        if cells.len() != 8 {
            return Err(Error::invalid(format!("expected 8 CSV cells, got {}", cells.len())));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::invalid(format!("bad number {s:?}")))
        };
        let opt = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                num(s).map(Some)
            }
        };
        Ok(Self {
            mae: num(cells[0])?,
            rmse: num(cells[1])?,
            delta1: num(cells[2])?,
            delta2: num(cells[3])?,
            delta3: num(cells[4])?,
            kitti_outlier_rate: opt(cells[5])?,
            density: opt(cells[6])?,
            n_valid: cells[7]
                .parse()
                .map_err(|_| Error::invalid(format!("bad count {:?}", cells[7])))?,
        })
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "MAE {:.4}  RMSE {:.4}  d1 {:.4}  d2 {:.4}  d3 {:.4}",
            self.mae, self.rmse, self.delta1, self.delta2, self.delta3
        )?;
        if let Some(k) = self.kitti_outlier_rate {
            write!(f, "  outliers {k:.4}")?;
        }
        if let Some(d) = self.density {
            write!(f, "  density {d:.4}")?;
        }
        write!(f, "  n {}", self.n_valid)
    }
}

/// Running sums for metrics pooled over several images.
#[derive(Clone, Debug)]
pub struct MetricsAccumulator {
    unit: Unit,
    n: usize,
    abs_sum: f64,
    sq_sum: f64,
    inliers: [usize; 3],
    outliers: usize,
    observed: usize,
    pixels: usize,
    has_mask: bool,
}

impl MetricsAccumulator {
    pub fn new(unit: Unit) -> Self {
        Self {
            unit,
            n: 0,
            abs_sum: 0.0,
            sq_sum: 0.0,
            inliers: [0; 3],
            outliers: 0,
            observed: 0,
            pixels: 0,
            has_mask: false,
        }
    }

    /// Adds one image; `pred` is its flat prediction in row-major order.
    pub fn add(&mut self, pred: &[f64], gt: &DepthMap, input_mask: Option<&[f64]>) -> Result<()> {
        if pred.len() != gt.depth().len() {
            return Err(Error::invalid(format!(
                "prediction has {} pixels, ground truth {}",
                pred.len(),
                gt.depth().len()
            )));
        }
        if let Some(m) = input_mask {
            if m.len() != pred.len() {
                return Err(Error::invalid("input mask size differs from prediction"));
            }
            self.has_mask = true;
            self.observed += m.iter().filter(|&&v| v != 0.0).count();
            self.pixels += m.len();
        }
        let thresholds = [DELTA_BASE, DELTA_BASE.powi(2), DELTA_BASE.powi(3)];
        for (i, (&p, &g)) in pred.iter().zip(gt.depth()).enumerate() {
            if g <= 0.0 {
                continue;
            }
            if !p.is_finite() {
                return Err(Error::NonFinite { index: i });
            }
            let e = p - g;
            self.n += 1;
            self.abs_sum += e.abs();
            self.sq_sum += e * e;
            // A non-positive prediction has no finite ratio and is never an inlier.
            if p > 0.0 {
                let ratio = (p / g).max(g / p);
                for (count, t) in self.inliers.iter_mut().zip(thresholds) {
                    if ratio < t {
                        *count += 1;
                    }
                }
            }
            if e.abs() >= KITTI_ABS_THRESHOLD && e.abs() / g >= KITTI_REL_THRESHOLD {
                self.outliers += 1;
            }
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<MetricsReport> {
        if self.n == 0 {
            return Err(Error::NoValidPixels);
        }
        let n = self.n as f64;
        Ok(MetricsReport {
            mae: self.abs_sum / n,
            rmse: (self.sq_sum / n).sqrt(),
            delta1: self.inliers[0] as f64 / n,
            delta2: self.inliers[1] as f64 / n,
            delta3: self.inliers[2] as f64 / n,
            kitti_outlier_rate: match self.unit {
                Unit::DisparityPx => Some(self.outliers as f64 / n),
                Unit::Meters => None,
            },
            density: self.has_mask.then(|| self.observed as f64 / self.pixels as f64),
            n_valid: self.n,
        })
    }
}

/// Metrics of a single-image prediction `(1, 1, h, w)` over pixels where
/// `gt > 0`. `input_mask`, when given, only sets the reported density.
pub fn evaluate(pred: &Tensor4, gt: &DepthMap, unit: Unit, input_mask: Option<&Mask>) -> Result<MetricsReport> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape("evaluate", pred.shape(), gt.shape()));
    }
    if let Some(m) = input_mask {
        m.check_aligned(pred, "evaluate")?;
    }
    let mut acc = MetricsAccumulator::new(unit);
    acc.add(pred.data(), gt, input_mask.map(Mask::data))?;
    acc.finish()
}

/// Metrics of a sparse depth map against the truth, over pixels observed in
/// both. Density is that of `map`.
pub fn evaluate_sparse(map: &DepthMap, truth: &DepthMap, unit: Unit) -> Result<MetricsReport> {
    truth.check_same_size(map, "evaluate_sparse")?;
    let gt: Vec<f64> = map
        .depth()
        .iter()
        .zip(truth.depth())
        .map(|(&m, &t)| if m > 0.0 { t } else { 0.0 })
        .collect();
    let gt = DepthMap::new(truth.height(), truth.width(), gt)?;
    let mask = map.mask();
    evaluate(&map.to_tensor(), &gt, unit, Some(&mask))
}
