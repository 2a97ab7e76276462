//! Mask construction: global and layer-local magnitude pruning, random masks,
//! SNIP saliency at initialisation, and mask distances.
//!
//! Prune counts are floored. Ties are broken by position: entries are ordered
//! by `(layer index, flat index)`, and the earlier entry is pruned first by the
//! magnitude strategies and kept first by SNIP.

mod mask;

use std::cmp::Ordering;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::params::ParameterSet;
use crate::snn::network::{bind, check_input, trace_logits, Grads, NetworkSpec};

pub use mask::{BinaryMask, MaskLayer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PruneScope {
    #[default]
    Global,
    Local,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PruneStrategy {
    #[default]
    Magnitude,
    Random,
    Snip,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PruneConfig {
    /// Fraction of surviving weights removed per round.
    pub rate: f64,
    pub rounds: usize,
    pub scope: PruneScope,
    pub strategy: PruneStrategy,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            rate: 0.25,
            rounds: 15,
            scope: PruneScope::Global,
            strategy: PruneStrategy::Magnitude,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        check_rate(self.rate)?;
        if self.rounds == 0 {
            return Err(Error::Config("prune rounds must be at least 1".into()));
        }
        Ok(())
    }

    /// Expected sparsity after `round` rounds: `1 - (1 - rate)^round`.
    pub fn sparsity_after(&self, round: usize) -> f64 {
        1.0 - (1.0 - self.rate).powi(round as i32)
    }

    /// One magnitude pruning round in the configured scope.
    pub fn magnitude_step(&self, params: &ParameterSet, mask: &BinaryMask) -> Result<BinaryMask> {
        match self.scope {
            PruneScope::Global => magnitude_mask_global(params, mask, self.rate),
            PruneScope::Local => magnitude_mask_local(params, mask, self.rate).map(|r| r.mask),
        }
    }
}

fn check_rate(p: f64) -> Result<()> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Config(format!("pruning rate must be in (0, 1), got {p}")));
    }
    Ok(())
}

/// Survivor count to prune at rate `p`.
fn prune_count(p: f64, surviving: usize) -> usize {
    (p * surviving as f64).floor() as usize
}

/// Removes the `floor(p * s)` smallest-magnitude weights among the `s`
/// survivors of `current`, ranked jointly across all layers.
pub fn magnitude_mask_global(params: &ParameterSet, current: &BinaryMask, p: f64) -> Result<BinaryMask> {
    check_rate(p)?;
    current.check_congruent(params)?;
    let mut survivors: Vec<(f32, usize, usize)> = Vec::with_capacity(current.surviving());
    for (li, (param, layer)) in params.prunable().zip(current.layers()).enumerate() {
        for (i, (&v, &k)) in param.value.data().iter().zip(layer.keep()).enumerate() {
            if k {
                survivors.push((v.abs(), li, i));
            }
        }
    }
    if survivors.is_empty() {
        return Err(Error::EmptySupport);
    }
    let count = prune_count(p, survivors.len());
    let mut next = current.clone();
    if count == 0 {
        return Ok(next);
    }
    let by_magnitude = |a: &(f32, usize, usize), b: &(f32, usize, usize)| {
        a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
    };
    survivors.select_nth_unstable_by(count - 1, by_magnitude);
    for &(_, li, i) in &survivors[..count] {
        next.layers_mut()[li].keep_mut()[i] = false;
    }
    Ok(next)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalPrune {
    pub mask: BinaryMask,
    /// Layers with no surviving weights, left untouched.
    pub skipped: Vec<String>,
}

/// Like [`magnitude_mask_global`] but each layer loses `floor(p * s_layer)`
/// of its own survivors.
pub fn magnitude_mask_local(params: &ParameterSet, current: &BinaryMask, p: f64) -> Result<LocalPrune> {
    check_rate(p)?;
    current.check_congruent(params)?;
    if current.surviving() == 0 {
        return Err(Error::EmptySupport);
    }
    let mut next = current.clone();
    let mut skipped = Vec::new();
    for (param, layer) in params.prunable().zip(next.layers_mut()) {
        let mut survivors: Vec<(f32, usize)> = param
            .value
            .data()
            .iter()
            .zip(layer.keep())
            .enumerate()
            .filter(|(_, (_, &k))| k)
            .map(|(i, (&v, _))| (v.abs(), i))
            .collect();
        if survivors.is_empty() {
            log::warn!("layer {} has no surviving weights; skipped", layer.name);
            skipped.push(layer.name.clone());
            continue;
        }
        let count = prune_count(p, survivors.len());
        if count == 0 {
            continue;
        }
        survivors.select_nth_unstable_by(count - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, i) in &survivors[..count] {
            layer.keep_mut()[i] = false;
        }
    }
    Ok(LocalPrune { mask: next, skipped })
}

/// Exactly `round(s * n)` zeros placed uniformly at random over all prunable
/// positions. `s` is clamped to `[0, 1]`.
pub fn random_mask(params: &ParameterSet, sparsity: f64, seed: u64) -> BinaryMask {
    let mut mask = BinaryMask::ones_for(params);
    let n = mask.total();
    let zeros = (sparsity.clamp(0.0, 1.0) * n as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut offsets: Vec<usize> = Vec::with_capacity(mask.layers().len());
    let mut acc = 0;
    for l in mask.layers() {
        offsets.push(acc);
        acc += l.len();
    }
    for flat in rand::seq::index::sample(&mut rng, n, zeros) {
        let li = offsets.partition_point(|&o| o <= flat) - 1;
        mask.layers_mut()[li].keep_mut()[flat - offsets[li]] = false;
    }
    mask
}

/// Per-layer SNIP scores `|g ⊙ θ|`, in prunable-layer order.
#[derive(Clone, Debug, PartialEq)]
pub struct Saliency {
    pub layers: Vec<(String, Vec<f32>)>,
}

impl Saliency {
    pub fn total(&self) -> usize {
        self.layers.iter().map(|(_, s)| s.len()).sum()
    }
}

/// Connection sensitivity at initialisation: `|∂loss/∂θ · θ|` from one forward
/// and backward pass on `batch` (surrogate gradients in LIF mode).
pub fn snip_saliency(
    spec: &NetworkSpec,
    params: &ParameterSet,
    batch: &Dataset,
    timesteps: usize,
) -> Result<Saliency> {
    if batch.is_empty() {
        return Err(Error::Data("SNIP needs a non-empty batch".into()));
    }
    spec.check_params(params)?;
    check_input(spec, &batch.images)?;
    let plan = spec.plan()?;
    let mut tape = Tape::new();
    let bound = bind(&mut tape, params, None, Grads::PrunableOnly)?;
    let x = tape.constant(batch.images.clone());
    let (logits, _) = trace_logits(&mut tape, spec, &plan, &bound, x, timesteps)?;
    let loss = tape.softmax_cross_entropy(logits, &batch.labels)?;
    tape.backward(loss)?;
    let layers = params
        .iter()
        .zip(&bound.leaves)
        .filter(|(p, _)| p.prunable)
        .map(|(p, &leaf)| {
            let scores = match tape.grad(leaf) {
                Some(g) => g
                    .iter()
                    .zip(p.value.data())
                    .map(|(gi, th)| (gi * th).abs())
                    .collect(),
                None => vec![0.0; p.value.len()],
            };
            (p.name.clone(), scores)
        })
        .collect();
    Ok(Saliency { layers })
}

/// Keeps the highest-scoring weights network-wide, pruning `floor(s * n)`.
pub fn snip_mask(params: &ParameterSet, scores: &Saliency, sparsity: f64) -> Result<BinaryMask> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(Error::Config(format!("SNIP sparsity must be in [0, 1), got {sparsity}")));
    }
    let mut mask = BinaryMask::ones_for(params);
    if mask.layers().len() != scores.layers.len()
        || mask
            .layers()
            .iter()
            .zip(&scores.layers)
            .any(|(m, (name, s))| &m.name != name || m.len() != s.len())
    {
        return Err(Error::Dimension {
            lhs: mask.layers().iter().map(|l| l.len()).collect(),
            rhs: scores.layers.iter().map(|(_, s)| s.len()).collect(),
            context: "saliency vs prunable layers",
        });
    }
    let mut ranked: Vec<(f32, usize, usize)> = scores
        .layers
        .iter()
        .enumerate()
        .flat_map(|(li, (_, s))| s.iter().enumerate().map(move |(i, &v)| (v, li, i)))
        .collect();
    let prune = (sparsity * ranked.len() as f64).floor() as usize;
    if prune == 0 {
        return Ok(mask);
    }
    // lowest score first; among equal scores the later index is pruned first
    let order = |a: &(f32, usize, usize), b: &(f32, usize, usize)| -> Ordering {
        a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)).then(b.2.cmp(&a.2))
    };
    ranked.select_nth_unstable_by(prune - 1, order);
    for &(_, li, i) in &ranked[..prune] {
        mask.layers_mut()[li].keep_mut()[i] = false;
    }
    Ok(mask)
}

/// Normalised Hamming distance between two masks.
pub fn mask_distance(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.check_same_layout(b)?;
    let total = a.total();
    if total == 0 {
        return Ok(0.0);
    }
    let diff = a.iter_flat().zip(b.iter_flat()).filter(|(x, y)| x != y).count();
    Ok(diff as f64 / total as f64)
}
