//! Held-out evaluation of trained models across input densities.

use crate::data::{derive_seed, generate_scene, sparsify, DepthMap, SceneConfig};
use crate::error::{Error, Result};
use crate::metrics::{MetricsAccumulator, MetricsReport, Unit};
use crate::network::{self, ModelState};

/// Forward passes are batched in chunks of this many images.
const EVAL_CHUNK: usize = 8;

/// Sparse inputs paired with dense ground truth.
#[derive(Clone, Debug)]
pub struct EvalSet {
    pub inputs: Vec<DepthMap>,
    pub truths: Vec<DepthMap>,
}

impl EvalSet {
    pub fn new(inputs: Vec<DepthMap>, truths: Vec<DepthMap>) -> Result<Self> {
        if inputs.is_empty() || inputs.len() != truths.len() {
            return Err(Error::invalid(format!(
                "eval set needs equal, non-zero input/truth counts ({} vs {})",
                inputs.len(),
                truths.len()
            )));
        }
        for (i, t) in inputs.iter().zip(&truths) {
            inputs[0].check_same_size(i, "eval set")?;
            inputs[0].check_same_size(t, "eval set")?;
        }
        Ok(Self { inputs, truths })
    }

    /// Sparsifies each truth at `density`; image `i` uses a seed derived from
    /// `(seed, i)` only, so different densities share scenes.
    pub fn from_truths(truths: Vec<DepthMap>, density: f64, seed: u64) -> Result<Self> {
        let inputs = truths
            .iter()
            .enumerate()
            .map(|(i, t)| sparsify(t, density, derive_seed(seed, 20, i as u64)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(inputs, truths)
    }

    /// `count` procedural scenes drawn from a seed stream disjoint from the
    /// training sources.
    pub fn synthetic_truths(scene: &SceneConfig, count: usize, seed: u64) -> Result<Vec<DepthMap>> {
        (0..count as u64)
            .map(|i| generate_scene(&scene.with_seed(derive_seed(seed, 21, i))))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Predictions of `model` for every input of `set`, in order.
pub fn predict(model: &ModelState, inputs: &[DepthMap]) -> Result<Vec<DepthMap>> {
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(EVAL_CHUNK) {
        let refs: Vec<&DepthMap> = chunk.iter().collect();
        let (depth, mask) = DepthMap::stack(&refs)?;
        let (pred, _, _) = network::forward(model, &depth, &mask)?;
        for n in 0..chunk.len() {
            out.push(DepthMap::from_tensor(&pred, n)?);
        }
    }
    Ok(out)
}

/// Metrics pooled over every ground-truth-valid pixel of the set. The raw
/// network output is scored (negative values included).
pub fn evaluate_model(model: &ModelState, set: &EvalSet) -> Result<MetricsReport> {
    let mut acc = MetricsAccumulator::new(Unit::Meters);
    for (inputs, truths) in set.inputs.chunks(EVAL_CHUNK).zip(set.truths.chunks(EVAL_CHUNK)) {
        let refs: Vec<&DepthMap> = inputs.iter().collect();
        let (depth, mask) = DepthMap::stack(&refs)?;
        let (pred, _, _) = network::forward(model, &depth, &mask)?;
        for (n, gt) in truths.iter().enumerate() {
            acc.add(pred.plane(n, 0), gt, Some(mask.as_tensor().plane(n, 0)))?;
        }
    }
    acc.finish()
}

/// Pooled metrics of a per-image completion function over `set`.
pub fn evaluate_maps(
    set: &EvalSet,
    mut complete: impl FnMut(&DepthMap) -> Result<DepthMap>,
) -> Result<MetricsReport> {
    let mut acc = MetricsAccumulator::new(Unit::Meters);
    for (input, gt) in set.inputs.iter().zip(&set.truths) {
        let pred = complete(input)?;
        acc.add(pred.depth(), gt, Some(input.mask().data()))?;
    }
    acc.finish()
}

/// Evaluates `model` on `truths` sparsified at each density.
pub fn density_sweep(
    model: &ModelState,
    truths: &[DepthMap],
    densities: &[f64],
    seed: u64,
) -> Result<Vec<(f64, MetricsReport)>> {
    densities
        .iter()
        .map(|&p| {
            let set = EvalSet::from_truths(truths.to_vec(), p, seed)?;
            Ok((p, evaluate_model(model, &set)?))
        })
        .collect()
}
