//! `snn-lottery`: train spiking networks, search for winning tickets, run
//! suites and emit report tables.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 training fault.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};

use snn_lottery::data::load_dataset;
use snn_lottery::error::ErrorClass;
use snn_lottery::io::{load_ticket, save_checkpoint, save_ticket};
use snn_lottery::metrics::layer_sparsity;
use snn_lottery::pruner::{snip_mask, snip_saliency, BinaryMask};
use snn_lottery::record::{RecordStore, STORE_ENV};
use snn_lottery::reference::REFERENCE_TOML;
use snn_lottery::report::{emit_report, ReportKind};
use snn_lottery::snn::NeuronMode;
use snn_lottery::suite::{run_suite, ExperimentConfig};
use snn_lottery::tickets::{
    eb_search, et_search, evaluate_ticket, imp_search, transfer_ticket, SearchClock, SearchKind, Ticket,
    TicketMetadata, TicketMethod,
};
use snn_lottery::trainer::train_epochs;

#[derive(Parser, Debug)]
#[command(name = "snn-lottery", version, about = "Lottery-ticket search for spiking neural networks")]
struct Cli {
    /// Record-store root.
    #[arg(long, global = true, env = STORE_ENV, default_value = "snn-lottery-store")]
    store: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// Experiment config (TOML). Defaults to the built-in reference config.
    #[arg(long, short)]
    config: Option<PathBuf>,

    /// Override a config key, e.g. `--set train.epochs=10`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Kind {
    Imp,
    Eb,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the dense network and save its final checkpoint.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Iterative magnitude pruning; writes one ticket bundle per round.
    Imp {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Search in ReLU mode (for transfer).
        #[arg(long)]
        ann: bool,
    },
    /// Early-Bird search; writes one ticket bundle per target sparsity.
    Eb {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Early-Time search wrapping IMP or EB.
    Et {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum, default_value = "imp")]
        kind: Kind,
        #[arg(long)]
        out: PathBuf,
    },
    /// SNIP pruning at initialization.
    Snip {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        sparsity: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retag a ReLU-found ticket for LIF training.
    Transfer {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        ticket: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrain a ticket at full T and store the experiment record.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        ticket: PathBuf,
        /// Timesteps for retraining; defaults to the network's.
        #[arg(long)]
        timesteps: Option<usize>,
    },
    /// Run every missing method x sparsity x seed cell of the config's suite.
    Suite {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Emit a report table (`<out>.tsv` and `<out>.json`) from stored records.
    Report {
        #[arg(long)]
        kind: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a ticket bundle's metadata and layer sparsity.
    InspectTicket { ticket: PathBuf },
    /// Print the built-in reference config.
    ReferenceConfig,
}

fn set_path(root: &mut toml::Table, key: &str, value: toml::Value) -> anyhow::Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).context("empty override key")?;
    let mut table = root;
    for part in parts {
        table = table
            .entry(part)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .with_context(|| format!("`{part}` in `{key}` is not a section"))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn load_config(args: &ConfigArgs) -> anyhow::Result<ExperimentConfig> {
    let text = match &args.config {
        Some(path) => std::fs::read_to_string(path).map_err(|e| snn_lottery::Error::io(path, e))?,
        None => REFERENCE_TOML.to_string(),
    };
    let mut table: toml::Table = toml::from_str(&text).map_err(|e| snn_lottery::Error::Config(e.to_string()))?;
    for o in &args.overrides {
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| snn_lottery::Error::Config(format!("override `{o}` is not KEY=VALUE")))?;
        set_path(&mut table, key.trim(), parse_value(raw.trim()))
            .map_err(|e| snn_lottery::Error::Config(e.to_string()))?;
    }
    let text = toml::to_string(&table).map_err(|e| snn_lottery::Error::Config(e.to_string()))?;
    Ok(ExperimentConfig::from_toml(&text)?)
}

fn write_tickets(out: &Path, tickets: &[Ticket], name: impl Fn(&Ticket) -> String) -> anyhow::Result<()> {
    std::fs::create_dir_all(out).map_err(|e| snn_lottery::Error::io(out, e))?;
    for t in tickets {
        let dir = out.join(name(t));
        save_ticket(&dir, t)?;
        println!(
            "{}\tsparsity {:.4}\tsearch {:.2}s",
            dir.display(),
            t.metadata.achieved_sparsity,
            t.metadata.search_wall_seconds
        );
    }
    Ok(())
}

fn round_name(t: &Ticket) -> String {
    format!("round-{:02}", t.metadata.round.unwrap_or(0))
}

fn target_name(t: &Ticket) -> String {
    format!("sparsity-{:.4}", t.metadata.target_sparsity.unwrap_or(t.metadata.achieved_sparsity))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let store = RecordStore::new(&cli.store);
    match cli.command {
        Command::Train { cfg, out } => {
            let c = load_config(&cfg)?;
            let data = load_dataset(&c.data)?;
            let init = c.init_params(cfg.seed)?;
            let mask = BinaryMask::ones_for(&init);
            let outcome = train_epochs(&c.network, init, &mask, &data, &c.train_for_seed(cfg.seed))?;
            save_checkpoint(&out.join("final"), &outcome.last)?;
            if let Some(r) = outcome.checkpoints.get(c.train.rewind_epoch) {
                save_checkpoint(&out.join(format!("epoch-{:03}", r.epoch)), r)?;
            }
            println!("{}", serde_json::to_string_pretty(&outcome.trajectory)?);
        }
        Command::Imp { cfg, out, ann } => {
            let c = load_config(&cfg)?;
            let data = load_dataset(&c.data)?;
            let (spec, t) = if ann {
                (c.network.with_neuron(NeuronMode::Relu), 1)
            } else {
                (c.network.clone(), c.timesteps())
            };
            let mut train = c.train_for_seed(cfg.seed);
            train.timesteps = t;
            let outcome = imp_search(&spec, &c.init_params(cfg.seed)?, &data, &c.prune, &train, t)?;
            write_tickets(&out, &outcome.tickets, round_name)?;
            if let Some(f) = outcome.fault {
                anyhow::bail!(snn_lottery::Error::TrainingFault {
                    epoch: 0,
                    reason: format!("round {}: {}", f.round, f.message),
                });
            }
        }
        Command::Eb { cfg, out } => {
            let c = load_config(&cfg)?;
            let data = load_dataset(&c.data)?;
            let outcome = eb_search(
                &c.network,
                &c.init_params(cfg.seed)?,
                &data,
                &c.eb,
                &c.train_for_seed(cfg.seed),
                c.timesteps(),
            )?;
            write_tickets(&out, &outcome.tickets, target_name)?;
        }
        Command::Et { cfg, kind, out } => {
            let c = load_config(&cfg)?;
            let data = load_dataset(&c.data)?;
            let kind = match kind {
                Kind::Imp => SearchKind::Imp,
                Kind::Eb => SearchKind::Eb,
            };
            let outcome = et_search(
                kind,
                &c.network,
                &c.init_params(cfg.seed)?,
                &data,
                &c.et,
                &c.train_for_seed(cfg.seed),
                &c.prune,
                &c.eb,
            )?;
            println!("T_early = {}, normalized KL {:?}", outcome.t_early, outcome.profile.normalized);
            let namer = match kind {
                SearchKind::Imp => round_name,
                SearchKind::Eb => target_name,
            };
            write_tickets(&out, &outcome.tickets, namer)?;
        }
        Command::Snip { cfg, sparsity, out } => {
            let c = load_config(&cfg)?;
            let data = load_dataset(&c.data)?;
            let init = c.init_params(cfg.seed)?;
            let clock = SearchClock::start();
            let batch = data.train.head(c.snip.batch.min(data.train.len()));
            let scores = snip_saliency(&c.network, &init, &batch, c.timesteps())?;
            let mut meta = TicketMetadata::new(TicketMethod::Snip, c.network.neuron, c.timesteps(), cfg.seed);
            meta.target_sparsity = Some(sparsity);
            meta.search_wall_seconds = clock.wall_seconds();
            meta.search_cpu_seconds = clock.cpu_seconds();
            let ticket = Ticket::new(snip_mask(&init, &scores, sparsity)?, &init, meta)?;
            write_tickets(&out, &[ticket], target_name)?;
        }
        Command::Transfer { cfg, ticket, out } => {
            let c = load_config(&cfg)?;
            let tt = transfer_ticket(&load_ticket(&ticket)?, &c.network)?;
            save_ticket(&out, &tt)?;
            println!("{}", out.display());
        }
        Command::Evaluate { cfg, ticket, timesteps } => {
            let c = load_config(&cfg)?;
            let data = load_dataset(&c.data)?;
            let t = load_ticket(&ticket)?;
            let mut record = evaluate_ticket(
                &t,
                &c.network,
                &data,
                &c.train_for_seed(cfg.seed),
                timesteps.unwrap_or(c.timesteps()),
            )?;
            record.artifacts.push(ticket);
            let key = store.put(&record)?;
            println!(
                "{key}\taccuracy {:.4}\tsparsity {:.4}",
                record.final_test_accuracy, record.achieved_sparsity
            );
        }
        Command::Suite { cfg } => {
            let c = load_config(&cfg)?;
            let outcome = run_suite(&c, &store)?;
            println!(
                "{} records: {} computed, {} already present, {} failed",
                outcome.records.len(),
                outcome.computed,
                outcome.skipped,
                outcome.failed
            );
        }
        Command::Report { kind, out } => {
            let kind: ReportKind = kind.parse()?;
            let records = store.list()?;
            let (tsv, json) = emit_report(&records, kind, &out)?;
            println!("{}\n{}", tsv.display(), json.display());
        }
        Command::InspectTicket { ticket } => {
            let t = load_ticket(&ticket)?;
            let summary = serde_json::json!({
                "metadata": t.metadata,
                "layers": layer_sparsity(&t.mask),
                "surviving": t.mask.surviving(),
                "total": t.mask.total(),
            });
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::ReferenceConfig => print!("{REFERENCE_TOML}"),
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<snn_lottery::Error>().map(|e| e.class()) {
        Some(ErrorClass::Config) => 2,
        Some(ErrorClass::Data) => 3,
        Some(ErrorClass::Training) => 4,
        Some(ErrorClass::Other) | None => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
