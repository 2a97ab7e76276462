//! Training spiking neural networks with surrogate-gradient BPTT and searching
//! for sparse winning-ticket subnetworks: iterative magnitude pruning with late
//! rewinding, Early-Bird mask detection, Early-Time timestep reduction, ticket
//! transfer from ReLU networks, and pruning at initialisation.

pub mod autograd;
pub mod data;
pub mod error;
pub mod io;
pub mod metrics;
pub mod params;
pub mod pruner;
pub mod record;
pub mod reference;
pub mod report;
pub mod snn;
pub mod suite;
pub mod tensor;
pub mod tickets;
pub mod trainer;

pub use error::{Error, Result};
pub use params::{ParamKind, Parameter, ParameterSet};
pub use pruner::BinaryMask;
pub use tensor::NumArray;
