//! Ticket search: iterative magnitude pruning with late rewinding, Early-Bird
//! mask detection, Early-Time timestep reduction, ANN-to-SNN transfer, and
//! retraining of discovered tickets.

mod clock;
mod eb;
mod et;
mod imp;
pub mod kl;

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::error::{Error, Result};
use crate::metrics::layer_sparsity;
use crate::params::ParameterSet;
use crate::pruner::BinaryMask;
use crate::record::ExperimentRecord;
use crate::snn::network::{NetworkSpec, NeuronMode};
use crate::trainer::{evaluate, train_from, Checkpoint, Flow, TrainConfig};

pub use clock::{process_cpu_seconds, SearchClock};
pub use eb::{eb_search, EbConfig, EbDetector, EbOutcome};
pub use et::{et_search, et_select_timestep, EtConfig, EtOutcome, EtSelection, SearchKind};
pub use imp::{imp_search, ImpOutcome, SearchFault};
pub use kl::{kl_divergence, kl_profile, select_timestep, KlProfile};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TicketMethod {
    Dense,
    Imp,
    Eb,
    ImpEt,
    EbEt,
    Tt,
    Snip,
    Random,
}

impl TicketMethod {
    pub fn label(self) -> &'static str {
        match self {
            TicketMethod::Dense => "dense",
            TicketMethod::Imp => "imp",
            TicketMethod::Eb => "eb",
            TicketMethod::ImpEt => "imp-et",
            TicketMethod::EbEt => "eb-et",
            TicketMethod::Tt => "tt",
            TicketMethod::Snip => "snip",
            TicketMethod::Random => "random",
        }
    }
}

impl std::fmt::Display for TicketMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for TicketMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase()))
            .map_err(|_| Error::Config(format!("unknown method `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TicketMetadata {
    pub method: TicketMethod,
    /// Neuron mode the ticket was found in.
    pub neuron: NeuronMode,
    pub search_timesteps: usize,
    pub achieved_sparsity: f64,
    #[serde(default)]
    pub target_sparsity: Option<f64>,
    pub search_wall_seconds: f64,
    #[serde(default)]
    pub search_cpu_seconds: Option<f64>,
    /// Epoch the rewind weights were taken from; retraining resumes there.
    pub rewind_epoch: usize,
    pub seed: u64,
    #[serde(default)]
    pub round: Option<usize>,
    #[serde(default)]
    pub discovery_epoch: Option<usize>,
    /// Early-Bird only: whether the mask stabilised before the epoch budget ran out.
    #[serde(default)]
    pub converged: Option<bool>,
    #[serde(default)]
    pub t_early: Option<usize>,
    #[serde(default)]
    pub kl_profile: Option<KlProfile>,
}

impl TicketMetadata {
    pub fn new(method: TicketMethod, neuron: NeuronMode, search_timesteps: usize, seed: u64) -> Self {
        Self {
            method,
            neuron,
            search_timesteps,
            achieved_sparsity: 0.0,
            target_sparsity: None,
            search_wall_seconds: 0.0,
            search_cpu_seconds: None,
            rewind_epoch: 0,
            seed,
            round: None,
            discovery_epoch: None,
            converged: None,
            t_early: None,
            kl_profile: None,
        }
    }
}

/// A mask together with the weights retraining starts from.
#[derive(Clone, Debug, PartialEq)]
pub struct Ticket {
    pub mask: BinaryMask,
    /// Already multiplied by the mask.
    pub rewind_params: ParameterSet,
    pub metadata: TicketMetadata,
}

impl Ticket {
    /// Applies `mask` to `rewind_params` and records the achieved sparsity.
    pub fn new(mask: BinaryMask, rewind_params: &ParameterSet, mut metadata: TicketMetadata) -> Result<Self> {
        mask.check_congruent(rewind_params)?;
        metadata.achieved_sparsity = mask.sparsity();
        Ok(Self {
            rewind_params: mask.applied(rewind_params),
            mask,
            metadata,
        })
    }

    /// Checks the stored sparsity and layout against the mask itself.
    pub fn validate(&self) -> Result<()> {
        self.mask.check_congruent(&self.rewind_params)?;
        let actual = self.mask.sparsity();
        if actual != self.metadata.achieved_sparsity {
            return Err(Error::Contract(format!(
                "ticket claims sparsity {} but its mask has {actual}",
                self.metadata.achieved_sparsity
            )));
        }
        Ok(())
    }

    pub fn sparsity(&self) -> f64 {
        self.mask.sparsity()
    }
}

/// Retags a ReLU-found ticket for training under `spec`, usually the LIF
/// version of the same architecture. Mask and weights are copied unchanged.
pub fn transfer_ticket(ann_ticket: &Ticket, spec: &NetworkSpec) -> Result<Ticket> {
    if ann_ticket.metadata.neuron != NeuronMode::Relu {
        return Err(Error::Mode(format!(
            "transfer expects a ticket found with ReLU neurons, got {:?}",
            ann_ticket.metadata.neuron
        )));
    }
    spec.check_params(&ann_ticket.rewind_params)?;
    ann_ticket.mask.check_congruent(&ann_ticket.rewind_params)?;
    let mut metadata = ann_ticket.metadata.clone();
    metadata.method = TicketMethod::Tt;
    metadata.neuron = spec.neuron;
    Ok(Ticket {
        mask: ann_ticket.mask.clone(),
        rewind_params: ann_ticket.rewind_params.clone(),
        metadata,
    })
}

/// Retrains `ticket` from its rewind point to `train.epochs` at `timesteps`
/// and records accuracy, sparsity, spike counts and timing.
pub fn evaluate_ticket(
    ticket: &Ticket,
    spec: &NetworkSpec,
    data: &Split,
    train: &TrainConfig,
    timesteps: usize,
) -> Result<ExperimentRecord> {
    ticket.validate()?;
    spec.check_params(&ticket.rewind_params)?;
    let cfg = TrainConfig {
        timesteps,
        ..train.clone()
    };
    cfg.validate()?;
    if ticket.metadata.rewind_epoch > cfg.epochs {
        return Err(Error::Config(format!(
            "ticket rewinds to epoch {} beyond the {}-epoch budget",
            ticket.metadata.rewind_epoch, cfg.epochs
        )));
    }
    let started = Instant::now();
    let start = Checkpoint::rewound(
        ticket.metadata.rewind_epoch,
        ticket.mask.applied(&ticket.rewind_params),
        cfg.seed,
    );
    let outcome = train_from(spec, start, &ticket.mask, data, &cfg, cfg.epochs, |_, _| Ok(Flow::Continue))?;
    let retrain_wall_seconds = started.elapsed().as_secs_f64();

    let eval_set = if data.test.is_empty() { &data.train } else { &data.test };
    let final_eval = evaluate(spec, &outcome.params, Some(&ticket.mask), eval_set, timesteps)?;
    let mean_spikes_per_image = (spec.neuron == NeuronMode::Lif).then_some(final_eval.spikes_per_example);
    let meta = &ticket.metadata;

    Ok(ExperimentRecord {
        config: serde_json::json!({
            "network": spec,
            "train": cfg,
            "timesteps": timesteps,
        }),
        method: meta.method,
        seed: cfg.seed,
        target_sparsity: meta.target_sparsity,
        achieved_sparsity: ticket.mask.sparsity(),
        layer_sparsity: layer_sparsity(&ticket.mask),
        trajectory: outcome.trajectory,
        final_test_accuracy: final_eval.accuracy,
        mean_spikes_per_image,
        timesteps,
        search_timesteps: meta.search_timesteps,
        t_early: meta.t_early,
        discovery_epoch: meta.discovery_epoch,
        eb_converged: meta.converged,
        kl_profile: meta.kl_profile.clone(),
        rewind_epoch: meta.rewind_epoch,
        round: meta.round,
        search_wall_seconds: meta.search_wall_seconds,
        search_cpu_seconds: meta.search_cpu_seconds,
        retrain_wall_seconds,
        end_to_end_seconds: meta.search_wall_seconds + retrain_wall_seconds,
        ..ExperimentRecord::default()
    })
}

/// The unpruned network as a ticket: all-ones mask, initial weights.
pub fn dense_ticket(spec: &NetworkSpec, init: &ParameterSet, seed: u64) -> Result<Ticket> {
    spec.check_params(init)?;
    Ticket::new(
        BinaryMask::ones_for(init),
        init,
        TicketMetadata::new(TicketMethod::Dense, spec.neuron, spec.timesteps, seed),
    )
}
