use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::error::{Error, Result};
use crate::params::ParameterSet;
use crate::pruner::{BinaryMask, PruneConfig, PruneStrategy};
use crate::snn::network::NetworkSpec;
use crate::trainer::{train_from, Checkpoint, Checkpoints, EpochStats, Flow, TrainConfig};

use super::clock::SearchClock;
use super::kl::KlProfile;
use super::{Ticket, TicketMetadata, TicketMethod};

/// A training failure that ended a search early.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchFault {
    pub round: usize,
    pub message: String,
}

#[derive(Clone, Debug)]
pub struct ImpOutcome {
    /// One ticket per completed round, sparsest last.
    pub tickets: Vec<Ticket>,
    /// Per-round training trajectories; the first is the unpruned run.
    pub rounds: Vec<Vec<EpochStats>>,
    pub fault: Option<SearchFault>,
}

/// Metadata carried into tickets found at a reduced timestep count.
#[derive(Clone, Debug)]
pub(crate) struct EarlyTime {
    pub t_early: usize,
    pub profile: KlProfile,
}

/// Iterative magnitude pruning with late rewinding: train, prune `rate` of
/// the survivors, rewind survivors to the `rewind_epoch` checkpoint, repeat
/// for `rounds` rounds.
pub fn imp_search(
    spec: &NetworkSpec,
    init: &ParameterSet,
    data: &Split,
    prune: &PruneConfig,
    train: &TrainConfig,
    search_timesteps: usize,
) -> Result<ImpOutcome> {
    let clock = SearchClock::start();
    imp_from(
        spec,
        Checkpoint::initial(init.clone(), train.seed),
        &Checkpoints::default(),
        data,
        prune,
        train,
        search_timesteps,
        &clock,
        TicketMethod::Imp,
        None,
    )
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn imp_from(
    spec: &NetworkSpec,
    start: Checkpoint,
    prior: &Checkpoints,
    data: &Split,
    prune: &PruneConfig,
    train: &TrainConfig,
    search_timesteps: usize,
    clock: &SearchClock,
    method: TicketMethod,
    early: Option<&EarlyTime>,
) -> Result<ImpOutcome> {
    prune.validate()?;
    if prune.strategy != PruneStrategy::Magnitude {
        return Err(Error::Config(format!(
            "iterative pruning ranks by magnitude, not {:?}",
            prune.strategy
        )));
    }
    let cfg = TrainConfig {
        timesteps: search_timesteps,
        ..train.clone()
    };
    cfg.validate()?;
    spec.check_params(&start.params)?;
    let r = cfg.rewind_epoch;
    let seed = cfg.seed;
    let mut rewind_point = match (r < start.epoch, prior.get(r)) {
        (true, None) => return Err(Error::Lookup(format!("no checkpoint at rewind epoch {r}"))),
        (_, found) => found.map(|c| c.params.clone()),
    };

    let mut mask = BinaryMask::ones_for(&start.params);
    let mut next_start = start;
    let mut tickets = Vec::with_capacity(prune.rounds);
    let mut rounds = Vec::with_capacity(prune.rounds);
    for round in 1..=prune.rounds {
        let from = next_start.epoch;
        let outcome = match train_from(spec, next_start, &mask, data, &cfg, cfg.epochs, |ckpt, _| {
            if ckpt.epoch == r && rewind_point.is_none() {
                rewind_point = Some(ckpt.params.clone());
            }
            Ok(Flow::Continue)
        }) {
            Ok(o) => o,
            Err(e @ Error::TrainingFault { .. }) => {
                log::warn!("search stopped in round {round}: {e}");
                return Ok(ImpOutcome {
                    tickets,
                    rounds,
                    fault: Some(SearchFault {
                        round,
                        message: e.to_string(),
                    }),
                });
            }
            Err(e) => return Err(e),
        };
        if from == r && rewind_point.is_none() {
            rewind_point = outcome.checkpoints.get(r).map(|c| c.params.clone());
        }
        let theta_r = rewind_point
            .as_ref()
            .ok_or_else(|| Error::Lookup(format!("no checkpoint at rewind epoch {r}")))?;

        mask = prune.magnitude_step(&outcome.params, &mask)?;
        let mut meta = TicketMetadata::new(method, spec.neuron, search_timesteps, seed);
        meta.round = Some(round);
        meta.rewind_epoch = r;
        meta.target_sparsity = Some(prune.sparsity_after(round));
        meta.search_wall_seconds = clock.wall_seconds();
        meta.search_cpu_seconds = clock.cpu_seconds();
        if let Some(et) = early {
            meta.t_early = Some(et.t_early);
            meta.kl_profile = Some(et.profile.clone());
        }
        let ticket = Ticket::new(mask.clone(), theta_r, meta)?;
        log::info!(
            "round {round}: sparsity {:.4}, final train acc {:.3}",
            ticket.sparsity(),
            outcome.trajectory.last().map_or(f64::NAN, |s| s.train_accuracy)
        );
        next_start = Checkpoint::rewound(r, ticket.rewind_params.clone(), seed);
        tickets.push(ticket);
        rounds.push(outcome.trajectory);
    }
    Ok(ImpOutcome {
        tickets,
        rounds,
        fault: None,
    })
}
