//! Spiking network engine: LIF neurons, surrogate gradients and the
//! timestep-unrolled forward pass, plus a ReLU mode sharing the same layout.

pub mod lif;
pub mod network;

pub use lif::{lif_step, surrogate_derivative, LifParams, ResetMode, SpikingState};
pub use network::{
    forward_ann, forward_snn, loss_gradients, LayerSpec, NetworkSpec, NeuronMode, SnnOutput, TimestepPrediction,
};
