//! Spike counts and per-layer sparsity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParameterSet;
use crate::pruner::BinaryMask;
use crate::snn::network::{forward_snn, NetworkSpec, NeuronMode};
use crate::tensor::NumArray;

/// Total spike events per spiking layer over all timesteps, summed over the batch.
pub fn spike_tallies(
    spec: &NetworkSpec,
    params: &ParameterSet,
    mask: Option<&BinaryMask>,
    batch: &NumArray,
    timesteps: usize,
) -> Result<Vec<f64>> {
    if spec.neuron != NeuronMode::Lif {
        return Err(Error::Mode("spike counts need LIF neurons".into()));
    }
    Ok(forward_snn(spec, params, mask, batch, timesteps)?.spikes_per_layer)
}

/// Mean spike events per image across all layers and timesteps.
pub fn count_spikes(
    spec: &NetworkSpec,
    params: &ParameterSet,
    mask: Option<&BinaryMask>,
    batch: &NumArray,
    timesteps: usize,
) -> Result<f64> {
    let tallies = spike_tallies(spec, params, mask, batch, timesteps)?;
    Ok(tallies.iter().sum::<f64>() / batch.shape()[0] as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSparsity {
    pub name: String,
    pub total: usize,
    pub surviving: usize,
    pub sparsity: f64,
}

pub fn layer_sparsity(mask: &BinaryMask) -> Vec<LayerSparsity> {
    mask.layers()
        .iter()
        .map(|l| LayerSparsity {
            name: l.name.clone(),
            total: l.len(),
            surviving: l.surviving(),
            sparsity: l.sparsity(),
        })
        .collect()
}
