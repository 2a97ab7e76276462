use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::params::ParameterSet;
use crate::pruner::{BinaryMask, PruneConfig};
use crate::snn::network::{NetworkSpec, NeuronMode};
use crate::trainer::{train_from, Checkpoint, EpochStats, Flow, TrainConfig, TrainOutcome};

use super::clock::SearchClock;
use super::eb::{eb_from, EbConfig};
use super::imp::{imp_from, EarlyTime, SearchFault};
use super::kl::{kl_profile, KlProfile};
use super::{Ticket, TicketMethod};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EtConfig {
    /// Threshold on the normalized divergence, `lambda`.
    pub lambda: f64,
    pub warmup_epochs: usize,
    /// Fraction of the training set the profile is averaged over.
    pub kl_subsample: f64,
    /// Skips selection and searches at this timestep count.
    pub fixed_t_early: Option<usize>,
}

impl Default for EtConfig {
    fn default() -> Self {
        Self {
            lambda: 0.6,
            warmup_epochs: 2,
            kl_subsample: 1.0,
            fixed_t_early: None,
        }
    }
}

impl EtConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(Error::Config(format!("lambda must be in (0, 1], got {}", self.lambda)));
        }
        if !(self.kl_subsample > 0.0 && self.kl_subsample <= 1.0) {
            return Err(Error::Config(format!(
                "kl_subsample must be in (0, 1], got {}",
                self.kl_subsample
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SearchKind {
    Imp,
    Eb,
}

#[derive(Clone, Debug)]
pub struct EtSelection {
    pub t_early: usize,
    pub profile: KlProfile,
    /// State after the warmup epochs at the full timestep count.
    pub warmup: TrainOutcome,
}

/// Evenly strided rows covering `fraction` of `data`.
fn strided(data: &Dataset, fraction: f64) -> Dataset {
    let n = data.len();
    let k = ((n as f64 * fraction).ceil() as usize).clamp(1, n);
    if k == n {
        return data.clone();
    }
    let rows: Vec<usize> = (0..k).map(|i| i * n / k).collect();
    data.subset(&rows)
}

fn check_t_early(t: usize, timesteps: usize) -> Result<()> {
    if t < 2 || t >= timesteps {
        return Err(Error::Contract(format!(
            "T_early must lie in 2..={} for T = {timesteps}, got {t}",
            timesteps - 1
        )));
    }
    Ok(())
}

/// Warms the dense network up for `warmup_epochs` at `train.timesteps`,
/// profiles the divergence of each prefix prediction from the full one over
/// the training set, and picks the reduced timestep count.
pub fn et_select_timestep(
    spec: &NetworkSpec,
    init: &ParameterSet,
    data: &Split,
    et: &EtConfig,
    train: &TrainConfig,
) -> Result<EtSelection> {
    et.validate()?;
    let timesteps = train.timesteps;
    if timesteps < 3 {
        return Err(Error::NoSearchSpace { timesteps });
    }
    if spec.neuron != NeuronMode::Lif {
        return Err(Error::Mode("timestep selection needs LIF neurons".into()));
    }
    if let Some(t) = et.fixed_t_early {
        check_t_early(t, timesteps)?;
    }
    if et.warmup_epochs > train.epochs {
        return Err(Error::Config(format!(
            "{} warmup epochs exceed the {}-epoch budget",
            et.warmup_epochs, train.epochs
        )));
    }
    let ones = BinaryMask::ones_for(init);
    let warmup = train_from(
        spec,
        Checkpoint::initial(init.clone(), train.seed),
        &ones,
        data,
        train,
        et.warmup_epochs,
        |_, _| Ok(Flow::Continue),
    )?;
    let sample = strided(&data.train, et.kl_subsample);
    let profile = kl_profile(spec, &warmup.params, None, &sample, timesteps)?;
    let t_early = et.fixed_t_early.unwrap_or_else(|| profile.select(et.lambda));
    check_t_early(t_early, timesteps)?;
    log::info!(
        "normalized KL profile {:?}, T_early = {t_early}",
        profile.normalized
    );
    Ok(EtSelection {
        t_early,
        profile,
        warmup,
    })
}

#[derive(Clone, Debug)]
pub struct EtOutcome {
    pub t_early: usize,
    pub profile: KlProfile,
    pub warmup: Vec<EpochStats>,
    pub tickets: Vec<Ticket>,
    /// Inner-search trajectories: one per IMP round, or the single EB run.
    pub rounds: Vec<Vec<EpochStats>>,
    pub fault: Option<SearchFault>,
}

/// Selects `T_early`, then continues from the warmed-up network and runs the
/// inner search at `T_early`. Ticket timings include warmup and profiling.
#[allow(clippy::too_many_arguments)]
pub fn et_search(
    kind: SearchKind,
    spec: &NetworkSpec,
    init: &ParameterSet,
    data: &Split,
    et: &EtConfig,
    train: &TrainConfig,
    prune: &PruneConfig,
    eb: &EbConfig,
) -> Result<EtOutcome> {
    let clock = SearchClock::start();
    let selection = et_select_timestep(spec, init, data, et, train)?;
    let early = EarlyTime {
        t_early: selection.t_early,
        profile: selection.profile.clone(),
    };
    let start = selection.warmup.last.clone();
    let prior = &selection.warmup.checkpoints;
    let (tickets, rounds, fault) = match kind {
        SearchKind::Imp => {
            let out = imp_from(
                spec,
                start,
                prior,
                data,
                prune,
                train,
                selection.t_early,
                &clock,
                TicketMethod::ImpEt,
                Some(&early),
            )?;
            (out.tickets, out.rounds, out.fault)
        }
        SearchKind::Eb => {
            let out = eb_from(
                spec,
                start,
                prior,
                data,
                eb,
                train,
                selection.t_early,
                &clock,
                TicketMethod::EbEt,
                Some(&early),
            )?;
            (out.tickets, vec![out.trajectory], None)
        }
    };
    Ok(EtOutcome {
        t_early: selection.t_early,
        profile: selection.profile,
        warmup: selection.warmup.trajectory,
        tickets,
        rounds,
        fault,
    })
}
