use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::error::{Error, Result};
use crate::params::ParameterSet;
use crate::pruner::{magnitude_mask_global, mask_distance, BinaryMask};
use crate::snn::network::NetworkSpec;
use crate::trainer::{train_from, Checkpoint, Checkpoints, EpochStats, Flow, TrainConfig};

use super::clock::SearchClock;
use super::imp::EarlyTime;
use super::{Ticket, TicketMetadata, TicketMethod};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EbConfig {
    /// Number of previous epoch masks compared against, `q`.
    pub window: usize,
    /// Detection threshold on the largest distance in the window, `tau`.
    /// Zero demands identical masks.
    pub threshold: f64,
    pub targets: Vec<f64>,
    /// Defaults to the training budget.
    pub max_epochs: Option<usize>,
    pub rewind_epoch: usize,
}

impl Default for EbConfig {
    fn default() -> Self {
        Self {
            window: 5,
            threshold: 0.02,
            targets: vec![0.5, 0.7, 0.9],
            max_epochs: None,
            rewind_epoch: 0,
        }
    }
}

impl EbConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::Config("EB window must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.threshold) {
            return Err(Error::Config(format!(
                "EB threshold must be in [0, 1), got {}",
                self.threshold
            )));
        }
        if self.targets.is_empty() {
            return Err(Error::Config("EB needs at least one target sparsity".into()));
        }
        if let Some(t) = self.targets.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
            return Err(Error::Config(format!("target sparsity must be in (0, 1), got {t}")));
        }
        Ok(())
    }
}

/// Sliding-window mask stability test.
#[derive(Clone, Debug)]
pub struct EbDetector {
    window: usize,
    threshold: f64,
    history: VecDeque<BinaryMask>,
    detected: Option<usize>,
}

impl EbDetector {
    pub fn new(window: usize, threshold: f64) -> Self {
        Self {
            window,
            threshold,
            history: VecDeque::with_capacity(window + 1),
            detected: None,
        }
    }

    /// Records the mask for `epoch` and returns the largest distance to the
    /// previous `window` masks, once that many have been seen.
    pub fn observe(&mut self, epoch: usize, mask: BinaryMask) -> Result<Option<f64>> {
        let max = if self.history.len() == self.window {
            let mut max = 0.0f64;
            for prev in &self.history {
                max = max.max(mask_distance(&mask, prev)?);
            }
            Some(max)
        } else {
            None
        };
        if let (Some(d), None) = (max, self.detected) {
            if d < self.threshold || d == 0.0 {
                self.detected = Some(epoch);
            }
        }
        self.history.push_back(mask);
        if self.history.len() > self.window {
            self.history.pop_front();
        }
        Ok(max)
    }

    pub fn detected(&self) -> Option<usize> {
        self.detected
    }

    pub fn latest(&self) -> Option<&BinaryMask> {
        self.history.back()
    }
}

#[derive(Clone, Debug)]
pub struct EbOutcome {
    /// One ticket per target, in the configured order.
    pub tickets: Vec<Ticket>,
    pub trajectory: Vec<EpochStats>,
    /// Per target: `(epoch, largest window distance)` for each epoch with a full window.
    pub distances: Vec<Vec<(usize, f64)>>,
}

/// Early-Bird search: trains densely, derives a global magnitude mask at each
/// target sparsity after every epoch, and stops a target once its masks
/// stay within `threshold` of the previous `window` masks.
pub fn eb_search(
    spec: &NetworkSpec,
    init: &ParameterSet,
    data: &Split,
    eb: &EbConfig,
    train: &TrainConfig,
    search_timesteps: usize,
) -> Result<EbOutcome> {
    let clock = SearchClock::start();
    eb_from(
        spec,
        Checkpoint::initial(init.clone(), train.seed),
        &Checkpoints::default(),
        data,
        eb,
        train,
        search_timesteps,
        &clock,
        TicketMethod::Eb,
        None,
    )
}

struct Target {
    sparsity: f64,
    detector: EbDetector,
    distances: Vec<(usize, f64)>,
    found: Option<(usize, f64, Option<f64>)>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn eb_from(
    spec: &NetworkSpec,
    start: Checkpoint,
    prior: &Checkpoints,
    data: &Split,
    eb: &EbConfig,
    train: &TrainConfig,
    search_timesteps: usize,
    clock: &SearchClock,
    method: TicketMethod,
    early: Option<&EarlyTime>,
) -> Result<EbOutcome> {
    eb.validate()?;
    let cfg = TrainConfig {
        timesteps: search_timesteps,
        ..train.clone()
    };
    cfg.validate()?;
    spec.check_params(&start.params)?;
    let max_epochs = eb.max_epochs.unwrap_or(cfg.epochs);
    if max_epochs <= start.epoch {
        return Err(Error::Config(format!(
            "EB budget of {max_epochs} epochs leaves nothing to search after epoch {}",
            start.epoch
        )));
    }
    let r = eb.rewind_epoch;
    let mut rewind_point = if r == start.epoch {
        Some(start.params.clone())
    } else if r < start.epoch {
        Some(
            prior
                .get(r)
                .ok_or_else(|| Error::Lookup(format!("no checkpoint at rewind epoch {r}")))?
                .params
                .clone(),
        )
    } else {
        None
    };

    let ones = BinaryMask::ones_for(&start.params);
    let mut targets: Vec<Target> = eb
        .targets
        .iter()
        .map(|&sparsity| Target {
            sparsity,
            detector: EbDetector::new(eb.window, eb.threshold),
            distances: Vec::new(),
            found: None,
        })
        .collect();

    let outcome = train_from(spec, start, &ones, data, &cfg, max_epochs, |ckpt, _| {
        if ckpt.epoch == r && rewind_point.is_none() {
            rewind_point = Some(ckpt.params.clone());
        }
        for t in targets.iter_mut().filter(|t| t.found.is_none()) {
            let mask = magnitude_mask_global(&ckpt.params, &ones, t.sparsity)?;
            if let Some(d) = t.detector.observe(ckpt.epoch, mask)? {
                t.distances.push((ckpt.epoch, d));
            }
            if let Some(e) = t.detector.detected() {
                log::info!("early bird at sparsity {} found at epoch {e}", t.sparsity);
                t.found = Some((e, clock.wall_seconds(), clock.cpu_seconds()));
            }
        }
        Ok(if targets.iter().all(|t| t.found.is_some()) {
            Flow::Stop
        } else {
            Flow::Continue
        })
    })?;

    let rewind_params = rewind_point.ok_or_else(|| {
        Error::Lookup(format!("EB search ended before rewind epoch {r}"))
    })?;
    let mut tickets = Vec::with_capacity(targets.len());
    let mut distances = Vec::with_capacity(targets.len());
    for t in targets {
        let mut meta = TicketMetadata::new(method, spec.neuron, search_timesteps, cfg.seed);
        meta.target_sparsity = Some(t.sparsity);
        meta.rewind_epoch = r;
        if let Some(et) = early {
            meta.t_early = Some(et.t_early);
            meta.kl_profile = Some(et.profile.clone());
        }
        let mask = match t.found {
            Some((epoch, wall, cpu)) => {
                meta.discovery_epoch = Some(epoch);
                meta.converged = Some(true);
                meta.search_wall_seconds = wall;
                meta.search_cpu_seconds = cpu;
                t.detector.latest().cloned()
            }
            None => {
                meta.converged = Some(false);
                meta.search_wall_seconds = clock.wall_seconds();
                meta.search_cpu_seconds = clock.cpu_seconds();
                t.detector.latest().cloned()
            }
        };
        let mask = match mask {
            Some(m) => m,
            None => magnitude_mask_global(&outcome.params, &ones, t.sparsity)?,
        };
        tickets.push(Ticket::new(mask, &rewind_params, meta)?);
        distances.push(t.distances);
    }
    Ok(EbOutcome {
        tickets,
        trajectory: outcome.trajectory,
        distances,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pruner::MaskLayer;

    fn mask(bits: &[bool]) -> BinaryMask {
        BinaryMask::new(vec![MaskLayer::new("w", vec![bits.len()], bits.to_vec()).unwrap()])
    }

    #[test]
    fn constant_masks_detect_right_after_window_fills() {
        let mut d = EbDetector::new(5, 0.02);
        for epoch in 1..=10 {
            d.observe(epoch, mask(&[true, false, true, false])).unwrap();
        }
        assert_eq!(d.detected(), Some(6));
    }

    #[test]
    fn zero_threshold_needs_identical_masks() {
        let mut d = EbDetector::new(2, 0.0);
        let a = mask(&[true, false, true, false]);
        let b = mask(&[true, true, false, false]);
        for (e, m) in [a.clone(), b.clone(), a.clone(), b, a.clone(), a.clone(), a].into_iter().enumerate() {
            d.observe(e + 1, m).unwrap();
        }
        assert_eq!(d.detected(), Some(7));
    }

    #[test]
    fn config_bounds() {
        assert!(EbConfig::default().validate().is_ok());
        assert!(EbConfig { window: 0, ..EbConfig::default() }.validate().is_err());
        assert!(EbConfig { threshold: 1.0, ..EbConfig::default() }.validate().is_err());
        assert!(EbConfig { targets: vec![1.0], ..EbConfig::default() }.validate().is_err());
    }
}
