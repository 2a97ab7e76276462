//! Experiment configuration files and the resumable method × sparsity × seed suite.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{load_dataset, DatasetSource, Split};
use crate::error::{Error, Result};
use crate::io::save_ticket;
use crate::params::ParameterSet;
use crate::pruner::{random_mask, snip_mask, snip_saliency, PruneConfig};
use crate::record::{config_hash, ExperimentRecord, RecordStore};
use crate::snn::network::{NetworkSpec, NeuronMode};
use crate::tickets::{
    dense_ticket, eb_search, et_search, evaluate_ticket, imp_search, transfer_ticket, EbConfig, EtConfig, SearchClock,
    SearchKind, Ticket, TicketMetadata, TicketMethod,
};
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitConfig {
    /// Multiplier on the Kaiming-normal standard deviation.
    pub gain: f32,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self { gain: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SnipConfig {
    /// Training examples in the saliency batch, taken at an even stride.
    pub batch: usize,
}

impl Default for SnipConfig {
    fn default() -> Self {
        Self { batch: 256 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuiteSpec {
    pub methods: Vec<TicketMethod>,
    pub sparsities: Vec<f64>,
    pub seeds: Vec<u64>,
}

/// Everything one experiment needs; the TOML config file mirrors this layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub data: DatasetSource,
    pub network: NetworkSpec,
    #[serde(default)]
    pub init: InitConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub prune: PruneConfig,
    #[serde(default)]
    pub eb: EbConfig,
    #[serde(default)]
    pub et: EtConfig,
    #[serde(default)]
    pub snip: SnipConfig,
    #[serde(default)]
    pub suite: SuiteSpec,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.train.validate()?;
        self.prune.validate()?;
        self.eb.validate()?;
        self.et.validate()?;
        if self.train.timesteps != self.network.timesteps {
            return Err(Error::Config(format!(
                "train.timesteps {} differs from network.timesteps {}",
                self.train.timesteps, self.network.timesteps
            )));
        }
        if self.data.image_shape != self.network.input_shape && self.data.path.is_none() {
            return Err(Error::Config(format!(
                "data image shape {:?} differs from network input {:?}",
                self.data.image_shape, self.network.input_shape
            )));
        }
        if self.data.classes != self.network.num_classes {
            return Err(Error::Config(format!(
                "data has {} classes, network has {}",
                self.data.classes, self.network.num_classes
            )));
        }
        if let Some(s) = self.suite.sparsities.iter().find(|s| !(**s > 0.0 && **s < 1.0)) {
            return Err(Error::Config(format!("suite sparsity must be in (0, 1), got {s}")));
        }
        Ok(())
    }

    pub fn timesteps(&self) -> usize {
        self.network.timesteps
    }

    /// Training config with the run seed, which also fixes the data order.
    pub fn train_for_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.train.clone()
        }
    }

    pub fn init_params(&self, seed: u64) -> Result<ParameterSet> {
        self.network.init_params(seed, self.init.gain)
    }

    /// Hashable description of one suite cell: the config without the suite
    /// section, plus method, sparsity and seed.
    pub fn cell(&self, method: TicketMethod, sparsity: Option<f64>, seed: u64) -> serde_json::Value {
        let mut base = self.clone();
        base.suite = SuiteSpec::default();
        serde_json::json!({
            "experiment": base,
            "method": method,
            "sparsity": sparsity,
            "seed": seed,
        })
    }
}

/// Fewest rounds at `rate` whose cumulative sparsity reaches `target` (to within 1e-3).
pub fn rounds_for(rate: f64, target: f64) -> usize {
    let mut k = 1;
    while 1.0 - (1.0 - rate).powi(k as i32) < target - 1e-3 {
        k += 1;
    }
    k
}

fn strided_rows(n: usize, k: usize) -> Vec<usize> {
    let k = k.clamp(1, n);
    (0..k).map(|i| i * n / k).collect()
}

/// Runs `method` once for one seed and returns a ticket per entry of `sparsities`
/// (a single ticket for the dense baseline).
pub fn find_tickets(
    cfg: &ExperimentConfig,
    method: TicketMethod,
    sparsities: &[f64],
    seed: u64,
    data: &Split,
) -> Result<Vec<Ticket>> {
    let spec = &cfg.network;
    let init = cfg.init_params(seed)?;
    let train = cfg.train_for_seed(seed);
    let t = cfg.timesteps();
    let imp_prune = || PruneConfig {
        rounds: sparsities.iter().map(|&s| rounds_for(cfg.prune.rate, s)).max().unwrap_or(1),
        ..cfg.prune.clone()
    };
    let pick_rounds = |tickets: Vec<Ticket>| -> Result<Vec<Ticket>> {
        sparsities
            .iter()
            .map(|&s| {
                let k = rounds_for(cfg.prune.rate, s);
                tickets
                    .get(k - 1)
                    .cloned()
                    .map(|mut tk| {
                        tk.metadata.target_sparsity = Some(s);
                        tk
                    })
                    .ok_or_else(|| Error::TrainingFault {
                        epoch: 0,
                        reason: format!("search stopped before round {k}"),
                    })
            })
            .collect()
    };
    let eb_cfg = EbConfig {
        targets: sparsities.to_vec(),
        ..cfg.eb.clone()
    };
    match method {
        TicketMethod::Dense => Ok(vec![dense_ticket(spec, &init, seed)?]),
        TicketMethod::Random => sparsities
            .iter()
            .map(|&s| {
                let mut meta = TicketMetadata::new(TicketMethod::Random, spec.neuron, t, seed);
                meta.target_sparsity = Some(s);
                Ticket::new(random_mask(&init, s, seed), &init, meta)
            })
            .collect(),
        TicketMethod::Snip => {
            let clock = SearchClock::start();
            let batch = data.train.subset(&strided_rows(data.train.len(), cfg.snip.batch));
            let scores = snip_saliency(spec, &init, &batch, t)?;
            sparsities
                .iter()
                .map(|&s| {
                    let mut meta = TicketMetadata::new(TicketMethod::Snip, spec.neuron, t, seed);
                    meta.target_sparsity = Some(s);
                    meta.search_wall_seconds = clock.wall_seconds();
                    meta.search_cpu_seconds = clock.cpu_seconds();
                    Ticket::new(snip_mask(&init, &scores, s)?, &init, meta)
                })
                .collect()
        }
        TicketMethod::Imp => {
            let out = imp_search(spec, &init, data, &imp_prune(), &train, t)?;
            pick_rounds(out.tickets)
        }
        TicketMethod::ImpEt => {
            let out = et_search(SearchKind::Imp, spec, &init, data, &cfg.et, &train, &imp_prune(), &cfg.eb)?;
            pick_rounds(out.tickets)
        }
        TicketMethod::Eb => Ok(eb_search(spec, &init, data, &eb_cfg, &train, t)?.tickets),
        TicketMethod::EbEt => {
            Ok(et_search(SearchKind::Eb, spec, &init, data, &cfg.et, &train, &cfg.prune, &eb_cfg)?.tickets)
        }
        TicketMethod::Tt => {
            let ann = spec.with_neuron(NeuronMode::Relu);
            let ann_train = TrainConfig {
                timesteps: 1,
                ..train.clone()
            };
            let out = imp_search(&ann, &init, data, &imp_prune(), &ann_train, 1)?;
            pick_rounds(out.tickets)?
                .iter()
                .map(|tk| transfer_ticket(tk, spec))
                .collect()
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct SuiteOutcome {
    /// One record per cell, in suite order.
    pub records: Vec<ExperimentRecord>,
    /// Cells trained in this run.
    pub computed: usize,
    /// Cells already present in the store.
    pub skipped: usize,
    pub failed: usize,
}

struct Cell {
    sparsity: Option<f64>,
    key: String,
    config: serde_json::Value,
}

/// Executes every missing cell of the suite and stores its record. A failing
/// (method, seed) group yields failure records and the suite moves on.
pub fn run_suite(cfg: &ExperimentConfig, store: &RecordStore) -> Result<SuiteOutcome> {
    cfg.validate()?;
    let mut outcome = SuiteOutcome::default();
    let mut data: Option<Split> = None;
    for &method in &cfg.suite.methods {
        for &seed in &cfg.suite.seeds {
            let sparsities: Vec<Option<f64>> = if method == TicketMethod::Dense {
                vec![None]
            } else {
                cfg.suite.sparsities.iter().map(|&s| Some(s)).collect()
            };
            let cells: Vec<Cell> = sparsities
                .into_iter()
                .map(|sparsity| {
                    let config = cfg.cell(method, sparsity, seed);
                    Cell {
                        sparsity,
                        key: config_hash(&config),
                        config,
                    }
                })
                .collect();
            let mut missing = Vec::new();
            for cell in cells {
                match store.get(&cell.key)? {
                    Some(r) => {
                        outcome.skipped += 1;
                        outcome.records.push(r);
                    }
                    None => missing.push(cell),
                }
            }
            if missing.is_empty() {
                continue;
            }
            let split = match &data {
                Some(d) => d,
                None => data.insert(load_dataset(&cfg.data)?),
            };
            let targets: Vec<f64> = missing.iter().filter_map(|c| c.sparsity).collect();
            log::info!("suite: {method} seed {seed}, {} cell(s)", missing.len());
            let result = find_tickets(cfg, method, &targets, seed, split).and_then(|tickets| {
                missing
                    .iter()
                    .zip(tickets)
                    .map(|(cell, ticket)| evaluate_cell(cfg, store, cell, &ticket, seed, split))
                    .collect::<Result<Vec<_>>>()
            });
            match result {
                Ok(records) => {
                    outcome.computed += records.len();
                    outcome.records.extend(records);
                }
                Err(e) => {
                    log::warn!("suite cell group {method}/seed {seed} failed: {e}");
                    for cell in missing {
                        let mut r = ExperimentRecord::failed(Some(cell.key), cell.config, method, seed, e.to_string());
                        r.target_sparsity = cell.sparsity;
                        store.put_failure(&r)?;
                        outcome.failed += 1;
                        outcome.records.push(r);
                    }
                }
            }
        }
    }
    Ok(outcome)
}

fn evaluate_cell(
    cfg: &ExperimentConfig,
    store: &RecordStore,
    cell: &Cell,
    ticket: &Ticket,
    seed: u64,
    data: &Split,
) -> Result<ExperimentRecord> {
    let started = Instant::now();
    let mut record = evaluate_ticket(ticket, &cfg.network, data, &cfg.train_for_seed(seed), cfg.timesteps())?;
    let ticket_dir: PathBuf = store.root().join("tickets").join(&cell.key);
    save_ticket(&ticket_dir, ticket)?;
    record.key = Some(cell.key.clone());
    record.config = cell.config.clone();
    record.target_sparsity = cell.sparsity;
    record.artifacts.push(ticket_dir);
    log::info!(
        "{} sparsity {:.4}: accuracy {:.4} ({:.1}s)",
        record.method,
        record.achieved_sparsity,
        record.final_test_accuracy,
        started.elapsed().as_secs_f64()
    );
    store.put(&record)?;
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounds_for_levels() {
        assert_eq!(rounds_for(0.25, 0.68), 4);
        assert_eq!(rounds_for(0.25, 0.6836), 4);
        assert_eq!(rounds_for(0.25, 0.9), 8);
        assert_eq!(rounds_for(0.25, 0.95), 11);
        assert_eq!(rounds_for(0.25, 0.98), 14);
        assert_eq!(rounds_for(0.25, 0.1), 1);
    }

    #[test]
    fn strided_rows_cover_range() {
        assert_eq!(strided_rows(10, 5), vec![0, 2, 4, 6, 8]);
        assert_eq!(strided_rows(3, 10), vec![0, 1, 2]);
    }
}
