//! Leaky integrate-and-fire dynamics.

use serde::{Deserialize, Serialize};

use crate::autograd::triangle_surrogate;
use crate::error::{Error, Result};
use crate::tensor::NumArray;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ResetMode {
    #[default]
    HardZero,
    SubtractThreshold,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LifParams {
    pub threshold: f32,
    /// Multiplicative decay applied to the membrane each step, in (0, 1].
    pub leak: f32,
    pub reset_mode: ResetMode,
    /// Half-width of the triangular surrogate's support.
    pub surrogate_width: f32,
}

impl Default for LifParams {
    fn default() -> Self {
        Self {
            threshold: 1.0,
            leak: 0.5,
            reset_mode: ResetMode::HardZero,
            surrogate_width: 1.0,
        }
    }
}

impl LifParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.leak > 0.0 && self.leak <= 1.0) {
            return Err(Error::Config(format!("leak must be in (0, 1], got {}", self.leak)));
        }
        if !(self.threshold > 0.0) {
            return Err(Error::Config(format!(
                "threshold must be positive, got {}",
                self.threshold
            )));
        }
        if !(self.surrogate_width > 0.0) {
            return Err(Error::Config(format!(
                "surrogate width must be positive, got {}",
                self.surrogate_width
            )));
        }
        Ok(())
    }
}

/// Membrane potentials of one spiking layer during a single input presentation.
#[derive(Clone, Debug, PartialEq)]
pub struct SpikingState {
    pub layer: usize,
    pub membrane: NumArray,
    /// Number of steps taken so far.
    pub timestep: usize,
}

impl SpikingState {
    /// Fresh state: zero membrane at the start of a presentation.
    pub fn new(layer: usize, shape: &[usize]) -> Self {
        Self {
            layer,
            membrane: NumArray::zeros(shape),
            timestep: 0,
        }
    }
}

/// One LIF update: integrate with leak, fire where the threshold is reached,
/// then reset the neurons that fired.
pub fn lif_step(
    input_current: &NumArray,
    state: &SpikingState,
    params: &LifParams,
) -> Result<(NumArray, SpikingState)> {
    if input_current.shape() != state.membrane.shape() {
        return Err(Error::Dimension {
            lhs: input_current.shape().to_vec(),
            rhs: state.membrane.shape().to_vec(),
            context: "LIF input current vs membrane",
        });
    }
    let timestep = state.timestep + 1;
    let mut spikes = Vec::with_capacity(input_current.len());
    let mut membrane = Vec::with_capacity(input_current.len());
    for (&u, &i) in state.membrane.data().iter().zip(input_current.data()) {
        let v = params.leak * u + i;
        if v.is_nan() {
            return Err(Error::NumericFault {
                layer: state.layer,
                timestep,
            });
        }
        let fired = v >= params.threshold;
        spikes.push(if fired { 1.0 } else { 0.0 });
        membrane.push(match (fired, params.reset_mode) {
            (false, _) => v,
            (true, ResetMode::HardZero) => 0.0,
            (true, ResetMode::SubtractThreshold) => v - params.threshold,
        });
    }
    let shape = input_current.shape().to_vec();
    Ok((
        NumArray::new(shape.clone(), spikes)?,
        SpikingState {
            layer: state.layer,
            membrane: NumArray::new(shape, membrane)?,
            timestep,
        },
    ))
}

/// Backward rule for the spike nonlinearity at `v = membrane - threshold`.
pub fn surrogate_derivative(v: f32, params: &LifParams) -> f32 {
    triangle_surrogate(v, params.surrogate_width)
}
