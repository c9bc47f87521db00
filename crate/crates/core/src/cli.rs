//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on runtime errors.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, CommandFactory, Parser, Subcommand};

use crate::checkpoint::{adapter_from_json, adapter_to_json, base_from_json, base_to_json, write_atomic, Checkpoint};
use crate::config::{load_config, FileConfig};
use crate::datagen::{generate_world, pretrain_base, WorldBundle};
use crate::eval::{evaluate, EvalReport, ReportLabel};
use crate::experiment::{flagged_forget_sets, run_experiment};
use crate::model::{AdapterParams, BaseWeights};
use crate::orchestrator::{retrain_baseline, Federation, RoundRecord, RunConfig, UnlearnRequest};
use crate::report::{build_table, reports_to_csv};
use crate::server::Algorithm;
use crate::unlearning::UnlearnMethod;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "fedunlearn", version, about = "Federated LoRA fine-tuning and unlearning simulator")]
pub struct Cli {
    #[command(flatten)]
    global: GlobalOpts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct GlobalOpts {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory, depending on the subcommand.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Rounds between checkpoints during `train` (0 disables).
    #[arg(long, global = true)]
    checkpoint_every: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic world (shards, evaluation splits, base corpus).
    GenWorld,
    /// Fit the frozen base model on the world's public corpus.
    Pretrain {
        #[arg(long)]
        world: PathBuf,
    },
    /// Federated fine-tuning with the configured unlearning requests.
    Train {
        #[arg(long)]
        world: PathBuf,
        #[arg(long)]
        base: PathBuf,
        /// Continue from a checkpoint written by an earlier `train`.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this round (for interrupt testing).
        #[arg(long, hide = true)]
        stop_after: Option<u64>,
    },
    /// Fine-tune from scratch with forgotten pairs excluded from the start.
    Retrain {
        #[arg(long)]
        world: PathBuf,
        #[arg(long)]
        base: PathBuf,
        /// Ledger of honored requests from `train`; defaults to every
        /// forget-flagged pair of the world.
        #[arg(long)]
        ledger: Option<PathBuf>,
    },
    /// Evaluate an adapter on the world's evaluation splits.
    Eval {
        #[arg(long)]
        world: PathBuf,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        adapter: PathBuf,
        /// Retrained adapter used as the forget-quality reference.
        #[arg(long)]
        retrain: Option<PathBuf>,
        #[arg(long, default_value = "FedAvg")]
        algorithm: String,
        #[arg(long, default_value = "Finetune")]
        method: String,
    },
    /// Merge evaluation reports into a comparison table.
    Report {
        /// EvalReport JSON files.
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
    /// Re-run training and check every round against a recorded history.
    Replay {
        #[arg(long)]
        world: PathBuf,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        history: PathBuf,
    },
    /// Fine-tune, unlearn with every method, retrain, evaluate and tabulate.
    Experiment {
        #[arg(long)]
        world: PathBuf,
        #[arg(long)]
        base: PathBuf,
        /// Comma-separated algorithms, or `all`; defaults to the configured one.
        #[arg(long)]
        algorithms: Option<String>,
    },
}

/// Parses `argv` and runs the selected subcommand.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n");
            eprintln!("{}", Cli::command().render_usage());
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            EXIT_RUNTIME
        }
    }
}

enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn require<'a, T>(opt: &'a Option<T>, flag: &str) -> CliResult<&'a T> {
    opt.as_ref().ok_or_else(|| Failure::Usage(format!("`{flag}` is required for this subcommand")))
}

fn config(g: &GlobalOpts) -> CliResult<FileConfig> {
    let path = require(&g.config, "--config")?;
    let mut cfg = load_config(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(seed) = g.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(n) = g.checkpoint_every {
        cfg.checkpoint_every = n;
    }
    Ok(cfg)
}

fn read(path: &Path) -> anyhow::Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_world(path: &Path) -> anyhow::Result<WorldBundle> {
    Ok(WorldBundle::from_json(&read(path)?).with_context(|| format!("loading world {}", path.display()))?)
}

fn load_base(path: &Path) -> anyhow::Result<BaseWeights> {
    Ok(base_from_json(&read(path)?).with_context(|| format!("loading base {}", path.display()))?)
}

fn load_adapter(path: &Path) -> anyhow::Result<AdapterParams> {
    Ok(adapter_from_json(&read(path)?).with_context(|| format!("loading adapter {}", path.display()))?)
}

fn write_file(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn check_world(cfg: &RunConfig, world: &WorldBundle) -> anyhow::Result<()> {
    if world.shards.len() != cfg.num_clients {
        bail!(
            "config has {} clients but the world has {} shards",
            cfg.num_clients,
            world.shards.len()
        );
    }
    Ok(())
}

fn dispatch(cli: Cli) -> CliResult<()> {
    let g = &cli.global;
    match &cli.command {
        Command::GenWorld => {
            let cfg = config(g)?;
            let out = require(&g.out, "--out")?;
            let world = generate_world(&cfg.world)?;
            write_file(out, &world.to_json()?)?;
            println!(
                "world: {} clients, {} forget / {} retain pairs, V = {}",
                world.shards.len(),
                world.eval_bundle.forget.len(),
                world.eval_bundle.retain.len(),
                world.vocab.size()
            );
        }
        Command::Pretrain { world } => {
            let cfg = config(g)?;
            let out = require(&g.out, "--out")?;
            let world = load_world(world)?;
            let base = pretrain_base(&world.base_pretrain_corpus, world.vocab.size(), &cfg.pretrain)?;
            write_file(out, &base_to_json(&base)?)?;
        }
        Command::Train { world, base, resume, stop_after } => {
            let cfg = config(g)?;
            let out = require(&g.out, "--out")?;
            train(&cfg, &load_world(world)?, &load_base(base)?, out, resume.as_deref(), *stop_after)?;
        }
        Command::Retrain { world, base, ledger } => {
            let cfg = config(g)?;
            let out = require(&g.out, "--out")?;
            let world = load_world(world)?;
            check_world(&cfg.run, &world)?;
            let forget = match ledger {
                Some(p) => {
                    let reqs: Vec<UnlearnRequest> = serde_json::from_str(&read(p)?)?;
                    reqs.into_iter().map(|r| (r.client_id, r.forget_indices)).collect()
                }
                None => flagged_forget_sets(&world),
            };
            let h = retrain_baseline(&cfg.run, &load_base(base)?, &world, &forget)?;
            fs::create_dir_all(out)?;
            write_file(&out.join("history.jsonl"), &h.to_jsonl()?)?;
            write_file(&out.join("adapter.json"), &adapter_to_json(&h.final_adapter)?)?;
        }
        Command::Eval { world, base, adapter, retrain, algorithm, method } => {
            let out = require(&g.out, "--out")?;
            let world = load_world(world)?;
            let retrain = retrain.as_deref().map(load_adapter).transpose()?;
            let mut report = evaluate(&load_base(base)?, &load_adapter(adapter)?, retrain.as_ref(), &world.eval_bundle)?;
            report.label = ReportLabel {
                algorithm: algorithm.clone(),
                method: method.clone(),
            };
            write_file(out, &serde_json::to_string_pretty(&report)?)?;
        }
        Command::Report { reports } => {
            let out = require(&g.out, "--out")?;
            let reports = reports
                .iter()
                .map(|p| Ok(serde_json::from_str::<EvalReport>(&read(p)?).with_context(|| format!("parsing {}", p.display()))?))
                .collect::<anyhow::Result<Vec<_>>>()?;
            write_report(out, &reports)?;
        }
        Command::Replay { world, base, history } => {
            let cfg = config(g)?;
            let world = load_world(world)?;
            check_world(&cfg.run, &world)?;
            let recorded: Vec<RoundRecord> = read(history)?
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(serde_json::from_str)
                .collect::<Result<_, _>>()?;
            let base = load_base(base)?;
            let mut fed = Federation::new(&cfg.run, &world)?;
            for rec in &recorded {
                let got = fed.step(&cfg.run, &base, &world)?;
                if got != rec {
                    return Err(Failure::Runtime(anyhow::anyhow!(
                        "round {} diverges from the recorded history (checksum {} vs {})",
                        rec.round,
                        got.global_checksum,
                        rec.global_checksum
                    )));
                }
            }
            println!("replayed {} rounds; all match", recorded.len());
        }
        Command::Experiment { world, base, algorithms } => {
            let cfg = config(g)?;
            let out = require(&g.out, "--out")?;
            let world = load_world(world)?;
            check_world(&cfg.run, &world)?;
            let base = load_base(base)?;
            let algs: Vec<Algorithm> = match algorithms.as_deref() {
                None => vec![cfg.run.algorithm],
                Some("all") => Algorithm::ALL.to_vec(),
                Some(list) => list.split(',').map(|s| s.trim().parse()).collect::<Result<_, _>>()?,
            };
            let mut reports = Vec::new();
            for alg in algs {
                let run = RunConfig {
                    algorithm: alg,
                    ..cfg.run.clone()
                };
                reports.extend(run_experiment(&run, &base, &world, &UnlearnMethod::ALL)?.reports());
            }
            fs::create_dir_all(out)?;
            for r in &reports {
                let name = format!("eval_{}_{}.json", r.label.algorithm, r.label.method);
                write_file(&out.join(name), &serde_json::to_string_pretty(r)?)?;
            }
            write_report(out, &reports)?;
        }
    }
    Ok(())
}

fn write_report(out: &Path, reports: &[EvalReport]) -> anyhow::Result<()> {
    let table = build_table(reports)?;
    fs::create_dir_all(out)?;
    write_file(&out.join("table.txt"), &table.to_text())?;
    write_file(&out.join("table.json"), &table.to_json()?)?;
    write_file(&out.join("reports.csv"), &reports_to_csv(reports))?;
    print!("{}", table.to_text());
    Ok(())
}

/// Runs (or resumes) training, appending one JSON line per round to
/// `history.jsonl` and checkpointing every `checkpoint_every` rounds.
fn train(cfg: &FileConfig, world: &WorldBundle, base: &BaseWeights, out: &Path, resume: Option<&Path>, stop_after: Option<u64>) -> anyhow::Result<()> {
    check_world(&cfg.run, world)?;
    fs::create_dir_all(out)?;
    let run = &cfg.run;
    let mut fed = match resume {
        Some(p) => Checkpoint::load(p)?.restore(run)?,
        None => Federation::new(run, world)?,
    };
    let log_path = out.join("history.jsonl");
    let mut prefix = String::new();
    for r in &fed.records {
        prefix.push_str(&serde_json::to_string(r)?);
        prefix.push('\n');
    }
    fs::write(&log_path, prefix)?;
    let mut log = fs::OpenOptions::new().append(true).open(&log_path)?;
    let last = stop_after.unwrap_or(run.global_rounds).min(run.global_rounds);
    while fed.round < last {
        let rec = fed.step(run, base, world)?;
        writeln!(log, "{}", serde_json::to_string(rec)?)?;
        log.flush()?;
        if cfg.checkpoint_every > 0 && fed.round % cfg.checkpoint_every == 0 {
            Checkpoint::capture(&fed, run)?.save(&out.join("checkpoint.json"))?;
        }
    }
    let timing: Vec<(u64, f64)> = fed
        .records
        .iter()
        .rev()
        .zip(fed.wall_clock_secs.iter().rev())
        .map(|(r, s)| (r.round, *s))
        .rev()
        .collect();
    write_file(&out.join("timing.json"), &serde_json::to_string(&timing)?)?;
    if fed.round == run.global_rounds {
        write_file(&out.join("adapter.json"), &adapter_to_json(&fed.global)?)?;
        write_file(&out.join("ledger.json"), &serde_json::to_string_pretty(&fed.ledger)?)?;
        println!(
            "trained {} rounds, {} unlearning request(s) honored",
            fed.round,
            fed.ledger.len()
        );
    } else {
        println!("stopped after round {}", fed.round);
    }
    Ok(())
}
