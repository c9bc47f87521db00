//! TOML run configuration.
//!
//! Every key is optional; absent keys take the defaults below. Unknown keys
//! are rejected with a suggestion for the closest valid one.
//!
//! ```toml
//! seed = 0
//!
//! [federation]
//! num_clients = 30
//! participation_rate = 0.1
//! global_rounds = 10
//! algorithm = "FedAvg"        # FedAvg FedAvgM FedProx FedAdagrad FedAdam FedYogi
//! uniform_weights = false
//!
//! [server]
//! server_lr = 1.0
//! beta1 = 0.9                 # also the FedAvgM momentum factor
//! beta2 = 0.99
//! tau = 0.001
//! mu = 0.01                   # FedProx proximal strength
//! regularization = 0.001      # stored, unused
//!
//! [local]
//! learning_rate = 0.01
//! weight_decay = 0.01
//! batch_size = 32
//! local_epochs = 5
//! warmup = true
//! optimizer = "sgd"           # sgd | adamw
//!
//! [lora]
//! rank = 32
//! alpha = 64.0
//! dropout = 0.05              # recorded, not applied
//! scaling = true
//!
//! [unlearn]
//! method = "GradAscent"       # GradAscent GradDiff NPO SimNPO
//! gamma = 1.0
//! alpha = 1.0
//! beta = 0.1
//! delta = 0.0
//! steps = 5
//! learning_rate = 0.01
//! batch_size = 32
//!
//! [requests]
//! policy = "none"             # none | every_round_random | scheduled
//! # [[requests.scheduled]]
//! # round = 3
//! # client = 1
//! # indices = [0, 2]
//!
//! [world]
//! # vocab_size = 2000         # omit to size the vocabulary automatically
//! facts_per_client = 8
//! answer_len_min = 2
//! answer_len_max = 4
//! num_wrong_answers = 3
//! world_facts_count = 20
//! real_authors_count = 20
//! forget_fraction = 0.1
//! entity_size = 4
//! partition = "uniform"       # uniform | dirichlet
//! dirichlet_alpha = 1.0
//!
//! [pretrain]
//! learning_rate = 2.0
//! max_iters = 5000
//! target_nll = 0.05
//!
//! [output]
//! checkpoint_every = 0        # rounds between checkpoints, 0 disables
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::client::{ClientOptimizer, LocalTrainConfig};
use crate::datagen::{PartitionScheme, PretrainConfig, WorldConfig};
use crate::error::{Error, Result};
use crate::model::LoraConfig;
use crate::orchestrator::{RequestPolicy, RunConfig, UnlearnRequest};
use crate::server::ServerHyper;
use crate::unlearning::{UnlearnConfig, UnlearnMethod};

const SCHEMA: &[(&str, &[&str])] = &[
    ("", &["seed", "federation", "server", "local", "lora", "unlearn", "requests", "world", "pretrain", "output"]),
    ("federation", &["num_clients", "participation_rate", "global_rounds", "algorithm", "uniform_weights"]),
    ("server", &["server_lr", "beta1", "beta2", "tau", "mu", "regularization"]),
    ("local", &["learning_rate", "weight_decay", "batch_size", "local_epochs", "warmup", "optimizer"]),
    ("lora", &["rank", "alpha", "dropout", "scaling"]),
    ("unlearn", &["method", "gamma", "alpha", "beta", "delta", "steps", "learning_rate", "batch_size"]),
    ("requests", &["policy", "scheduled"]),
    ("requests.scheduled", &["round", "client", "indices"]),
    (
        "world",
        &[
            "vocab_size",
            "facts_per_client",
            "answer_len_min",
            "answer_len_max",
            "num_wrong_answers",
            "world_facts_count",
            "real_authors_count",
            "forget_fraction",
            "entity_size",
            "partition",
            "dirichlet_alpha",
        ],
    ),
    ("pretrain", &["learning_rate", "max_iters", "target_nll"]),
    ("output", &["checkpoint_every"]),
];

/// Everything a config file describes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileConfig {
    pub run: RunConfig,
    pub world: WorldConfig,
    pub pretrain: PretrainConfig,
    pub checkpoint_every: u64,
}

impl Default for FileConfig {
    fn default() -> Self {
        let run = RunConfig::default();
        FileConfig {
            world: WorldConfig {
                num_clients: run.num_clients,
                ..Default::default()
            },
            run,
            pretrain: PretrainConfig::default(),
            checkpoint_every: 0,
        }
    }
}

impl FileConfig {
    pub fn validate(&self) -> Result<()> {
        self.run.validate()?;
        self.world.validate()?;
        if !(self.pretrain.learning_rate > 0.0) || !(self.pretrain.target_nll > 0.0) {
            return Err(Error::Config("pretrain learning_rate and target_nll must be > 0".into()));
        }
        Ok(())
    }

    /// Sets the master and world seeds together.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.run.master_seed = seed;
        self.world.seed = seed;
        self
    }

    /// Hex SHA-256 of the canonical JSON form of the run configuration.
    pub fn run_hash(&self) -> String {
        run_config_hash(&self.run)
    }
}

pub fn run_config_hash(run: &RunConfig) -> String {
    let json = serde_json::to_vec(run).expect("config serializes");
    Sha256::digest(json).iter().map(|b| format!("{b:02x}")).collect()
}

fn nearest<'a>(key: &str, valid: &[&'a str]) -> Option<&'a str> {
    valid
        .iter()
        .map(|v| (strsim::levenshtein(key, v), *v))
        .min()
        .filter(|(d, _)| *d <= 3.max(key.len() / 2))
        .map(|(_, v)| v)
}

fn check_keys(section: &str, table: &toml::Table) -> Result<()> {
    let valid = SCHEMA
        .iter()
        .find(|(s, _)| *s == section)
        .map(|(_, k)| *k)
        .expect("schema section");
    for (key, value) in table {
        let path = if section.is_empty() { key.clone() } else { format!("{section}.{key}") };
        if !valid.contains(&key.as_str()) {
            let hint = nearest(key, valid).map(|n| format!("; did you mean `{n}`?")).unwrap_or_default();
            return Err(Error::Config(format!("unknown key `{path}`{hint}")));
        }
        let nested = SCHEMA.iter().any(|(s, _)| *s == path);
        match value {
            toml::Value::Table(t) if nested => check_keys(&path, t)?,
            toml::Value::Array(items) if nested => {
                for item in items {
                    match item {
                        toml::Value::Table(t) => check_keys(&path, t)?,
                        _ => return Err(Error::Config(format!("`{path}` entries must be tables"))),
                    }
                }
            }
            _ if nested => return Err(Error::Config(format!("`{path}` must be a table"))),
            _ => {}
        }
    }
    Ok(())
}

#[derive(Deserialize, Default)]
#[serde(default)]
struct Raw {
    seed: Option<u64>,
    federation: RawFederation,
    server: ServerHyper,
    local: RawLocal,
    lora: LoraConfig,
    unlearn: RawUnlearn,
    requests: RawRequests,
    world: RawWorld,
    pretrain: PretrainConfig,
    output: RawOutput,
}

#[derive(Deserialize)]
#[serde(default)]
struct RawFederation {
    num_clients: usize,
    participation_rate: f64,
    global_rounds: u64,
    algorithm: String,
    uniform_weights: bool,
}

impl Default for RawFederation {
    fn default() -> Self {
        let d = RunConfig::default();
        RawFederation {
            num_clients: d.num_clients,
            participation_rate: d.participation_rate,
            global_rounds: d.global_rounds,
            algorithm: d.algorithm.name().into(),
            uniform_weights: d.uniform_weights,
        }
    }
}

#[derive(Deserialize)]
#[serde(default)]
struct RawLocal {
    learning_rate: f64,
    weight_decay: f64,
    batch_size: usize,
    local_epochs: usize,
    warmup: bool,
    optimizer: String,
}

impl Default for RawLocal {
    fn default() -> Self {
        let d = LocalTrainConfig::default();
        RawLocal {
            learning_rate: d.learning_rate,
            weight_decay: d.weight_decay,
            batch_size: d.batch_size,
            local_epochs: d.local_epochs,
            warmup: d.warmup,
            optimizer: "sgd".into(),
        }
    }
}

#[derive(Deserialize)]
#[serde(default)]
struct RawUnlearn {
    method: String,
    gamma: f64,
    alpha: f64,
    beta: f64,
    delta: f64,
    steps: usize,
    learning_rate: f64,
    batch_size: usize,
}

impl Default for RawUnlearn {
    fn default() -> Self {
        let d = UnlearnConfig::default();
        RawUnlearn {
            method: d.method.name().into(),
            gamma: d.gamma,
            alpha: d.alpha,
            beta: d.beta,
            delta: d.delta,
            steps: d.steps,
            learning_rate: d.learning_rate,
            batch_size: d.batch_size,
        }
    }
}

#[derive(Deserialize)]
#[serde(default)]
struct RawRequests {
    policy: String,
    scheduled: Vec<RawScheduled>,
}

impl Default for RawRequests {
    fn default() -> Self {
        RawRequests {
            policy: "none".into(),
            scheduled: Vec::new(),
        }
    }
}

#[derive(Deserialize)]
struct RawScheduled {
    round: u64,
    client: usize,
    indices: Vec<usize>,
}

#[derive(Deserialize)]
#[serde(default)]
struct RawWorld {
    vocab_size: Option<usize>,
    facts_per_client: usize,
    answer_len_min: usize,
    answer_len_max: usize,
    num_wrong_answers: usize,
    world_facts_count: usize,
    real_authors_count: usize,
    forget_fraction: f64,
    entity_size: usize,
    partition: String,
    dirichlet_alpha: f64,
}

impl Default for RawWorld {
    fn default() -> Self {
        let d = WorldConfig::default();
        RawWorld {
            vocab_size: d.vocab_size,
            facts_per_client: d.facts_per_client,
            answer_len_min: d.answer_len_min,
            answer_len_max: d.answer_len_max,
            num_wrong_answers: d.num_wrong_answers,
            world_facts_count: d.world_facts_count,
            real_authors_count: d.real_authors_count,
            forget_fraction: d.forget_fraction,
            entity_size: d.entity_size,
            partition: "uniform".into(),
            dirichlet_alpha: 1.0,
        }
    }
}

#[derive(Deserialize, Default)]
#[serde(default)]
struct RawOutput {
    checkpoint_every: u64,
}

fn parse_optimizer(s: &str) -> Result<ClientOptimizer> {
    match s.to_ascii_lowercase().as_str() {
        "sgd" => Ok(ClientOptimizer::Sgd),
        "adamw" => Ok(ClientOptimizer::AdamW),
        _ => Err(Error::Config(format!("unknown optimizer `{s}` (expected sgd or adamw)"))),
    }
}

pub fn parse_config(text: &str) -> Result<FileConfig> {
    let table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::Config(format!("parse error: {e}")))?;
    check_keys("", &table)?;
    let raw: Raw = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    let seed = raw.seed.unwrap_or(0);
    let has_schedule = !raw.requests.scheduled.is_empty();

    let policy = match raw.requests.policy.to_ascii_lowercase().as_str() {
        "none" => RequestPolicy::None,
        "every_round_random" => RequestPolicy::EveryRoundRandom,
        "scheduled" => RequestPolicy::Scheduled(
            raw.requests
                .scheduled
                .into_iter()
                .map(|s| UnlearnRequest {
                    client_id: s.client,
                    forget_indices: s.indices,
                    round_issued: s.round,
                })
                .collect(),
        ),
        other => {
            return Err(Error::Config(format!(
                "unknown request policy `{other}` (expected none, every_round_random or scheduled)"
            )))
        }
    };
    if !matches!(policy, RequestPolicy::Scheduled(_)) && has_schedule {
        return Err(Error::Config("requests.scheduled is set but policy is not `scheduled`".into()));
    }

    let f = raw.federation;
    let l = raw.local;
    let u = raw.unlearn;
    let w = raw.world;
    let run = RunConfig {
        num_clients: f.num_clients,
        participation_rate: f.participation_rate,
        global_rounds: f.global_rounds,
        algorithm: f.algorithm.parse()?,
        server: raw.server,
        uniform_weights: f.uniform_weights,
        local: LocalTrainConfig {
            learning_rate: l.learning_rate,
            weight_decay: l.weight_decay,
            batch_size: l.batch_size,
            local_epochs: l.local_epochs,
            mu: raw.server.mu,
            warmup: l.warmup,
            optimizer: parse_optimizer(&l.optimizer)?,
            rng_seed: 0,
        },
        lora: raw.lora,
        unlearn: UnlearnConfig {
            method: u.method.parse::<UnlearnMethod>()?,
            gamma: u.gamma,
            alpha: u.alpha,
            beta: u.beta,
            delta: u.delta,
            steps: u.steps,
            learning_rate: u.learning_rate,
            batch_size: u.batch_size,
            rng_seed: 0,
        },
        request_policy: policy,
        master_seed: seed,
    };
    let partition = match w.partition.to_ascii_lowercase().as_str() {
        "uniform" => PartitionScheme::Uniform,
        "dirichlet" => PartitionScheme::Dirichlet { alpha: w.dirichlet_alpha },
        other => return Err(Error::Config(format!("unknown partition `{other}` (expected uniform or dirichlet)"))),
    };
    let cfg = FileConfig {
        world: WorldConfig {
            vocab_size: w.vocab_size,
            num_clients: run.num_clients,
            facts_per_client: w.facts_per_client,
            answer_len_min: w.answer_len_min,
            answer_len_max: w.answer_len_max,
            num_wrong_answers: w.num_wrong_answers,
            world_facts_count: w.world_facts_count,
            real_authors_count: w.real_authors_count,
            forget_fraction: w.forget_fraction,
            entity_size: w.entity_size,
            partition,
            seed,
        },
        run,
        pretrain: raw.pretrain,
        checkpoint_every: raw.output.checkpoint_every,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<FileConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    parse_config(&text)
}
