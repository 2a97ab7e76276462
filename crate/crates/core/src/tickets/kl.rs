//! Divergence between prefix-accumulated predictions and timestep selection.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::params::ParameterSet;
use crate::pruner::BinaryMask;
use crate::snn::network::{forward_snn, NetworkSpec, TimestepPrediction};

/// Lower clamp applied to `Q` entries.
pub const KL_EPSILON: f64 = 1e-12;

const SUM_TOLERANCE: f64 = 1e-5;

fn check_distribution(p: &[f64], which: &str) -> Result<()> {
    if let Some(v) = p.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::Data(format!("{which} has a negative or NaN entry {v}")));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > SUM_TOLERANCE {
        return Err(Error::Data(format!("{which} sums to {sum}, not 1")));
    }
    Ok(())
}

/// `sum_x P(x) ln(P(x) / Q(x))` with `0 ln 0 = 0` and `Q` clamped below by [`KL_EPSILON`].
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Dimension {
            lhs: vec![p.len()],
            rhs: vec![q.len()],
            context: "KL operands",
        });
    }
    check_distribution(p, "P")?;
    check_distribution(q, "Q")?;
    Ok(p
        .iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi.max(KL_EPSILON)).ln())
        .sum::<f64>()
        .max(0.0))
}

/// Mean `D(P_t || P_T)` per timestep `t` in `2..T`, and the same values divided by `D(P_2 || P_T)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlProfile {
    pub timesteps: usize,
    /// `raw[i]` belongs to `t = i + 2`.
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
}

impl KlProfile {
    pub fn from_raw(raw: Vec<f64>, timesteps: usize) -> Result<Self> {
        if timesteps < 3 {
            return Err(Error::NoSearchSpace { timesteps });
        }
        if raw.len() != timesteps - 2 {
            return Err(Error::Dimension {
                lhs: vec![raw.len()],
                rhs: vec![timesteps - 2],
                context: "KL profile entries vs timesteps 2..T-1",
            });
        }
        if let Some(v) = raw.iter().find(|v| !(**v >= 0.0)) {
            return Err(Error::Data(format!("KL profile has invalid entry {v}")));
        }
        let base = raw[0];
        let normalized = raw
            .iter()
            .enumerate()
            .map(|(i, &d)| match (i, base > 0.0) {
                (0, _) => 1.0,
                (_, true) => d / base,
                (_, false) => 0.0,
            })
            .collect();
        Ok(Self {
            timesteps,
            raw,
            normalized,
        })
    }

    /// Averages the per-example divergences of each `P_t` from `P_T`.
    pub fn from_predictions<'a>(predictions: impl IntoIterator<Item = &'a TimestepPrediction>) -> Result<Self> {
        let mut sums: Vec<f64> = Vec::new();
        let mut count = 0usize;
        let mut timesteps = None;
        for pred in predictions {
            let t_max = pred.timesteps;
            if *timesteps.get_or_insert(t_max) != t_max {
                return Err(Error::Contract("predictions disagree on timesteps".into()));
            }
            if t_max < 3 {
                return Err(Error::NoSearchSpace { timesteps: t_max });
            }
            sums.resize(t_max - 2, 0.0);
            let classes = pred.num_classes();
            let last = pred.at(t_max).expect("t_max >= 2");
            for (i, sum) in sums.iter_mut().enumerate() {
                let pt = pred.at(i + 2).expect("t in range");
                for (p_row, q_row) in pt.data().chunks(classes).zip(last.data().chunks(classes)) {
                    *sum += kl_divergence(&renormalized(p_row), &renormalized(q_row))?;
                }
            }
            count += pred.batch_size();
        }
        let timesteps = timesteps.ok_or_else(|| Error::Data("no predictions to profile".into()))?;
        Self::from_raw(sums.into_iter().map(|s| s / count as f64).collect(), timesteps)
    }

    /// Smallest `t` in `2..T` with normalized divergence below `lambda`, else `T - 1`.
    pub fn select(&self, lambda: f64) -> usize {
        select_timestep(&self.normalized, self.timesteps, lambda)
    }
}

/// f32 softmax rows widened to f64 and rescaled to sum to one.
fn renormalized(row: &[f32]) -> Vec<f64> {
    let wide: Vec<f64> = row.iter().map(|&v| v as f64).collect();
    let sum: f64 = wide.iter().sum();
    wide.into_iter().map(|v| v / sum).collect()
}

/// First `t` (starting at 2) whose normalized divergence is below `lambda`;
/// `normalized[i]` belongs to `t = i + 2`. Falls back to `T - 1`.
pub fn select_timestep(normalized: &[f64], timesteps: usize, lambda: f64) -> usize {
    normalized
        .iter()
        .position(|&d| d < lambda)
        .map(|i| i + 2)
        .unwrap_or(timesteps.saturating_sub(1))
}

const PROFILE_BATCH: usize = 250;

/// Profile over `data` at `timesteps`, evaluated in batches.
pub fn kl_profile(
    spec: &NetworkSpec,
    params: &ParameterSet,
    mask: Option<&BinaryMask>,
    data: &Dataset,
    timesteps: usize,
) -> Result<KlProfile> {
    if timesteps < 3 {
        return Err(Error::NoSearchSpace { timesteps });
    }
    if data.is_empty() {
        return Err(Error::Data("cannot profile an empty dataset".into()));
    }
    let mut predictions = Vec::new();
    let mut start = 0;
    while start < data.len() {
        let end = (start + PROFILE_BATCH).min(data.len());
        let out = forward_snn(spec, params, mask, &data.images.slice_outer(start, end), timesteps)?;
        predictions.push(out.prediction);
        start = end;
    }
    KlProfile::from_predictions(&predictions)
}
