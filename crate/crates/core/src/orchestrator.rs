//! Round loop for federated fine-tuning with interleaved unlearning requests.
//!
//! Each round first consults the request policy. At most one request is
//! honored per round: the unlearning operator runs on the current global
//! adapter, its output replaces the global adapter, and the requested pairs
//! are excluded from every later local training call. The regular
//! sample / local-train / aggregate step then follows.

use std::collections::VecDeque;
use std::time::Instant;

use rand::seq::{IndexedRandom, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::client::{local_train_traced, ClientShard, LocalTrainConfig};
use crate::datagen::WorldBundle;
use crate::error::{Error, Result};
use crate::eval::adapter_checksum;
use crate::model::{AdapterParams, BaseWeights, LoraConfig, QaPair};
use crate::rng::{derive_seed, seeded_rng, stream};
use crate::server::{aggregate, Algorithm, ClientUpdate, ServerHyper, ServerOptState};
use crate::unlearning::{run_unlearning, UnlearnConfig};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnlearnRequest {
    pub client_id: usize,
    pub forget_indices: Vec<usize>,
    pub round_issued: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "requests", rename_all = "snake_case")]
pub enum RequestPolicy {
    #[default]
    None,
    /// Every round, a seeded-random client with outstanding forget-flagged
    /// pairs asks for all of them to be removed.
    EveryRoundRandom,
    Scheduled(Vec<UnlearnRequest>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub num_clients: usize,
    pub participation_rate: f64,
    pub global_rounds: u64,
    pub algorithm: Algorithm,
    pub server: ServerHyper,
    pub uniform_weights: bool,
    pub local: LocalTrainConfig,
    pub lora: LoraConfig,
    pub unlearn: UnlearnConfig,
    pub request_policy: RequestPolicy,
    pub master_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            num_clients: 30,
            participation_rate: 0.1,
            global_rounds: 10,
            algorithm: Algorithm::FedAvg,
            server: ServerHyper::default(),
            uniform_weights: false,
            local: LocalTrainConfig::default(),
            lora: LoraConfig::default(),
            unlearn: UnlearnConfig::default(),
            request_policy: RequestPolicy::None,
            master_seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::Config("num_clients must be >= 1".into()));
        }
        if !(self.participation_rate > 0.0 && self.participation_rate <= 1.0) {
            return Err(Error::Config(format!(
                "participation_rate must lie in (0, 1], got {}",
                self.participation_rate
            )));
        }
        if self.global_rounds == 0 {
            return Err(Error::Config("global_rounds must be >= 1".into()));
        }
        if self.lora.rank == 0 {
            return Err(Error::Config("lora rank must be >= 1".into()));
        }
        if !(self.lora.alpha > 0.0) {
            return Err(Error::Config(format!("lora alpha must be > 0, got {}", self.lora.alpha)));
        }
        if !(self.server.mu >= 0.0) {
            return Err(Error::Config(format!("mu must be >= 0, got {}", self.server.mu)));
        }
        self.local.validate()?;
        self.unlearn.validate()
    }

    /// Local config actually handed to client `k`: its own shuffle seed, and
    /// the proximal term only under FedProx.
    pub fn client_config(&self, client: usize) -> LocalTrainConfig {
        LocalTrainConfig {
            mu: if self.algorithm == Algorithm::FedProx { self.server.mu } else { 0.0 },
            rng_seed: derive_seed(self.master_seed, &[stream::LOCAL_TRAIN, client as u64]),
            ..self.local.clone()
        }
    }
}

/// `ceil(C * K)` distinct client ids, seeded per round, ascending.
pub fn sample_clients(round: u64, k: usize, c: f64, master_seed: u64) -> Vec<usize> {
    let n = ((c * k as f64).ceil() as usize).clamp(1, k);
    let mut ids: Vec<usize> = (0..k).collect();
    if n < k {
        let mut rng = seeded_rng(derive_seed(master_seed, &[stream::SAMPLE_CLIENTS, round]));
        ids.shuffle(&mut rng);
        ids.truncate(n);
        ids.sort_unstable();
    }
    ids
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientLoss {
    pub client_id: usize,
    pub num_examples: usize,
    /// Local objective after the final epoch.
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RejectedRequest {
    pub request: UnlearnRequest,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u64,
    pub participants: Vec<usize>,
    pub indicator: u8,
    pub request: Option<UnlearnRequest>,
    pub rejected: Vec<RejectedRequest>,
    pub client_losses: Vec<ClientLoss>,
    pub warnings: Vec<String>,
    pub global_checksum: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub records: Vec<RoundRecord>,
    pub ledger: Vec<UnlearnRequest>,
    pub final_adapter: AdapterParams,
}

impl RunHistory {
    pub fn indicators(&self) -> Vec<u8> {
        self.records.iter().map(|r| r.indicator).collect()
    }

    /// One JSON object per round.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Mutable federation state. Everything needed to continue a run lives here,
/// so a serialized copy resumes bit-exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Federation {
    pub global: AdapterParams,
    pub server: ServerOptState,
    /// Per client, per pair: excluded from local training.
    pub excluded: Vec<Vec<bool>>,
    pub ledger: Vec<UnlearnRequest>,
    pub pending: VecDeque<UnlearnRequest>,
    pub round: u64,
    pub records: Vec<RoundRecord>,
    /// Number of times the unlearning operator has run.
    pub unlearn_executions: u64,
    #[serde(skip)]
    pub wall_clock_secs: Vec<f64>,
}

impl Federation {
    pub fn new(cfg: &RunConfig, world: &WorldBundle) -> Result<Self> {
        cfg.validate()?;
        if world.shards.len() != cfg.num_clients {
            return Err(Error::Config(format!(
                "config has {} clients but the world has {} shards",
                cfg.num_clients,
                world.shards.len()
            )));
        }
        let mut rng = seeded_rng(derive_seed(cfg.master_seed, &[stream::ADAPTER_INIT]));
        let global = AdapterParams::init_random(world.vocab.size(), &cfg.lora, &mut rng)?;
        let mut server = ServerOptState::new(cfg.algorithm, cfg.server, global.num_params());
        server.uniform_weights = cfg.uniform_weights;
        Ok(Federation {
            global,
            server,
            excluded: world.shards.iter().map(|s| vec![false; s.len()]).collect(),
            ledger: Vec::new(),
            pending: VecDeque::new(),
            round: 0,
            records: Vec::new(),
            unlearn_executions: 0,
            wall_clock_secs: Vec::new(),
        })
    }

    /// Fresh federation whose clients never see `forget` pairs.
    pub fn with_exclusions(cfg: &RunConfig, world: &WorldBundle, forget: &[(usize, Vec<usize>)]) -> Result<Self> {
        let mut fed = Federation::new(cfg, world)?;
        for (client, idx) in forget {
            let mask = fed
                .excluded
                .get_mut(*client)
                .ok_or_else(|| Error::Argument(format!("no client {client}")))?;
            for &i in idx {
                *mask
                    .get_mut(i)
                    .ok_or_else(|| Error::Argument(format!("client {client} has no pair {i}")))? = true;
            }
        }
        Ok(fed)
    }

    /// The shard as local training sees it: excluded pairs carry the flag.
    pub fn working_shard(&self, world: &WorldBundle, client: usize) -> ClientShard {
        let s = &world.shards[client];
        ClientShard {
            client_id: s.client_id,
            pairs: s.pairs.clone(),
            forget_flags: self.excluded[client].clone(),
        }
    }

    fn check_request(&self, cfg: &RunConfig, world: &WorldBundle, req: &UnlearnRequest) -> std::result::Result<(), String> {
        let Some(mask) = self.excluded.get(req.client_id) else {
            return Err(format!("unknown client {}", req.client_id));
        };
        if req.forget_indices.is_empty() {
            return Err("empty forget index list".into());
        }
        let mut seen = vec![false; mask.len()];
        for &i in &req.forget_indices {
            if i >= mask.len() {
                return Err(format!("index {i} out of range for client {} ({} pairs)", req.client_id, mask.len()));
            }
            if seen[i] {
                return Err(format!("duplicate index {i}"));
            }
            if mask[i] {
                return Err(format!("pair {i} of client {} was already forgotten", req.client_id));
            }
            seen[i] = true;
        }
        let retained = (0..mask.len()).filter(|&i| !mask[i] && !seen[i]).count();
        if retained == 0 && cfg.unlearn.method.uses_retain() && cfg.unlearn.alpha != 0.0 {
            return Err(format!("{} needs retain data but client {} would keep none", cfg.unlearn.method, req.client_id));
        }
        debug_assert_eq!(world.shards[req.client_id].len(), mask.len());
        Ok(())
    }

    fn next_request(&mut self, cfg: &RunConfig, world: &WorldBundle, t: u64) -> (Option<UnlearnRequest>, Vec<RejectedRequest>) {
        match &cfg.request_policy {
            RequestPolicy::None => {}
            RequestPolicy::Scheduled(list) => {
                self.pending.extend(list.iter().filter(|r| r.round_issued == t).cloned());
            }
            RequestPolicy::EveryRoundRandom => {
                let candidates: Vec<(usize, Vec<usize>)> = world
                    .shards
                    .iter()
                    .enumerate()
                    .filter_map(|(c, s)| {
                        let idx: Vec<usize> = s
                            .forget_indices()
                            .into_iter()
                            .filter(|&i| !self.excluded[c][i])
                            .collect();
                        (!idx.is_empty()).then_some((c, idx))
                    })
                    .collect();
                let mut rng = seeded_rng(derive_seed(cfg.master_seed, &[stream::REQUESTS, t]));
                if let Some((c, idx)) = candidates.choose(&mut rng) {
                    self.pending.push_back(UnlearnRequest {
                        client_id: *c,
                        forget_indices: idx.clone(),
                        round_issued: t,
                    });
                }
            }
        }
        let mut rejected = Vec::new();
        while let Some(req) = self.pending.pop_front() {
            match self.check_request(cfg, world, &req) {
                Ok(()) => return (Some(req), rejected),
                Err(reason) => rejected.push(RejectedRequest { request: req, reason }),
            }
        }
        (None, rejected)
    }

    fn honor(&mut self, cfg: &RunConfig, base: &BaseWeights, world: &WorldBundle, req: &UnlearnRequest, t: u64) -> Result<()> {
        let shard = &world.shards[req.client_id];
        let mask = &self.excluded[req.client_id];
        let forget: Vec<&QaPair> = req.forget_indices.iter().map(|&i| &shard.pairs[i]).collect();
        let retain: Vec<&QaPair> = (0..shard.len())
            .filter(|i| !mask[*i] && !req.forget_indices.contains(i))
            .map(|i| &shard.pairs[i])
            .collect();
        let ucfg = UnlearnConfig {
            rng_seed: derive_seed(cfg.master_seed, &[stream::UNLEARN, t]),
            ..cfg.unlearn.clone()
        };
        self.unlearn_executions += 1;
        self.global = run_unlearning(base, &self.global, &ucfg, &forget, &retain)?;
        for &i in &req.forget_indices {
            self.excluded[req.client_id][i] = true;
        }
        self.ledger.push(req.clone());
        Ok(())
    }

    /// One sample / local-train / aggregate pass at round `t`.
    pub fn run_round(&mut self, cfg: &RunConfig, base: &BaseWeights, world: &WorldBundle, t: u64) -> Result<(Vec<usize>, Vec<ClientLoss>, Vec<String>)> {
        let participants = sample_clients(t, cfg.num_clients, cfg.participation_rate, cfg.master_seed);
        let mut warnings = Vec::new();
        let active: Vec<usize> = participants
            .iter()
            .copied()
            .filter(|&c| {
                let ok = self.excluded[c].iter().any(|&e| !e);
                if !ok {
                    warnings.push(format!("client {c} has no retained pairs; skipped"));
                }
                ok
            })
            .collect();
        let global = &self.global;
        let outputs = active
            .par_iter()
            .map(|&c| {
                let shard = self.working_shard(world, c);
                local_train_traced(base, global, &shard, &cfg.client_config(c), t, false, true)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut losses = Vec::with_capacity(outputs.len());
        let mut updates: Vec<ClientUpdate> = Vec::with_capacity(outputs.len());
        for o in outputs {
            losses.push(ClientLoss {
                client_id: o.update.client_id,
                num_examples: o.update.num_examples,
                loss: o.epoch_objectives.last().copied().unwrap_or(f64::NAN),
            });
            updates.push(o.update);
        }
        updates.sort_by_key(|u| u.client_id);
        losses.sort_by_key(|l| l.client_id);
        if updates.is_empty() {
            warnings.push("no client produced an update; global adapter unchanged".into());
        } else {
            let (phi, next) = aggregate(&self.server, self.global.flat(), &updates)?;
            self.global = self.global.with_params(phi)?;
            self.server = next;
        }
        Ok((participants, losses, warnings))
    }

    /// Advances one full round: request check, optional unlearning, then
    /// the regular aggregation round.
    pub fn step(&mut self, cfg: &RunConfig, base: &BaseWeights, world: &WorldBundle) -> Result<&RoundRecord> {
        let start = Instant::now();
        let t = self.round + 1;
        let (request, rejected) = self.next_request(cfg, world, t);
        let mut rejected = rejected;
        let mut honored = None;
        if let Some(req) = request {
            match self.honor(cfg, base, world, &req, t) {
                Ok(()) => honored = Some(req),
                Err(e) => rejected.push(RejectedRequest {
                    request: req,
                    reason: e.to_string(),
                }),
            }
        }
        let (participants, client_losses, warnings) = self.run_round(cfg, base, world, t)?;
        self.round = t;
        self.records.push(RoundRecord {
            round: t,
            participants,
            indicator: u8::from(honored.is_some()),
            request: honored,
            rejected,
            client_losses,
            warnings,
            global_checksum: adapter_checksum(&self.global),
        });
        self.wall_clock_secs.push(start.elapsed().as_secs_f64());
        Ok(self.records.last().expect("just pushed"))
    }

    pub fn run_until(&mut self, cfg: &RunConfig, base: &BaseWeights, world: &WorldBundle, last_round: u64) -> Result<()> {
        while self.round < last_round {
            self.step(cfg, base, world)?;
        }
        Ok(())
    }

    pub fn history(&self) -> RunHistory {
        RunHistory {
            records: self.records.clone(),
            ledger: self.ledger.clone(),
            final_adapter: self.global.clone(),
        }
    }

    /// Every honored forget set so far, as `(client, indices)`.
    pub fn forgotten(&self) -> Vec<(usize, Vec<usize>)> {
        self.ledger
            .iter()
            .map(|r| (r.client_id, r.forget_indices.clone()))
            .collect()
    }
}

pub fn run_training(cfg: &RunConfig, base: &BaseWeights, world: &WorldBundle) -> Result<RunHistory> {
    let mut fed = Federation::new(cfg, world)?;
    fed.run_until(cfg, base, world, cfg.global_rounds)?;
    Ok(fed.history())
}

/// Full `T`-round fine-tuning from a fresh adapter with every pair in
/// `forget` excluded from the start and no requests.
pub fn retrain_baseline(cfg: &RunConfig, base: &BaseWeights, world: &WorldBundle, forget: &[(usize, Vec<usize>)]) -> Result<RunHistory> {
    let cfg = RunConfig {
        request_policy: RequestPolicy::None,
        ..cfg.clone()
    };
    let mut fed = Federation::with_exclusions(&cfg, world, forget)?;
    fed.run_until(&cfg, base, world, cfg.global_rounds)?;
    Ok(fed.history())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_world, pretrain_base, PretrainConfig, WorldConfig};

    fn setup(k: usize) -> (RunConfig, BaseWeights, WorldBundle) {
        let world = generate_world(&WorldConfig {
            num_clients: k,
            facts_per_client: 8,
            world_facts_count: 6,
            real_authors_count: 6,
            forget_fraction: 0.1,
            ..Default::default()
        })
        .unwrap();
        let base = pretrain_base(&world.base_pretrain_corpus, world.vocab.size(), &PretrainConfig::default()).unwrap();
        let cfg = RunConfig {
            num_clients: k,
            participation_rate: 1.0,
            global_rounds: 3,
            lora: LoraConfig { rank: 4, alpha: 8.0, ..Default::default() },
            local: LocalTrainConfig {
                learning_rate: 0.5,
                local_epochs: 2,
                batch_size: 4,
                ..Default::default()
            },
            ..Default::default()
        };
        (cfg, base, world)
    }

    #[test]
    fn sample_clients_examples() {
        assert_eq!(sample_clients(1, 5, 1.0, 0), vec![0, 1, 2, 3, 4]);
        let s = sample_clients(4, 30, 0.1, 7);
        assert_eq!(s.len(), 3);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(s, sample_clients(4, 30, 0.1, 7));
    }

    #[test]
    fn single_client_collapse() {
        let (mut cfg, base, world) = setup(1);
        cfg.global_rounds = 1;
        let fed = Federation::new(&cfg, &world).unwrap();
        let local = crate::client::local_train(&base, &fed.global, &fed.working_shard(&world, 0), &cfg.client_config(0), 1, false).unwrap();
        let h = run_training(&cfg, &base, &world).unwrap();
        assert_eq!(h.final_adapter.flat(), &local.params);
    }

    #[test]
    fn zero_lr_keeps_global() {
        let (mut cfg, base, world) = setup(3);
        cfg.local.learning_rate = 0.0;
        cfg.global_rounds = 2;
        let init = Federation::new(&cfg, &world).unwrap().global;
        let h = run_training(&cfg, &base, &world).unwrap();
        // Weighted mean of identical vectors, equal up to rounding.
        for (a, b) in h.final_adapter.flat().iter().zip(init.flat().iter()) {
            assert!((a - b).abs() <= 1e-15 * b.abs().max(1e-300), "{a} vs {b}");
        }
    }

    #[test]
    fn scheduled_indicator_and_counter() {
        let (mut cfg, base, world) = setup(3);
        let h = run_training(&cfg, &base, &world).unwrap();
        assert_eq!(h.indicators(), vec![0, 0, 0]);
        let mut fed = Federation::new(&cfg, &world).unwrap();
        fed.run_until(&cfg, &base, &world, 3).unwrap();
        assert_eq!(fed.unlearn_executions, 0);

        cfg.global_rounds = 4;
        cfg.request_policy = RequestPolicy::Scheduled(vec![
            UnlearnRequest { client_id: 1, forget_indices: vec![0, 1], round_issued: 3 },
            UnlearnRequest { client_id: 9, forget_indices: vec![0], round_issued: 2 },
        ]);
        let h = run_training(&cfg, &base, &world).unwrap();
        assert_eq!(h.indicators(), vec![0, 0, 1, 0]);
        assert_eq!(h.records[1].rejected.len(), 1);
        assert_eq!(h.ledger.len(), 1);
    }

    #[test]
    fn one_request_per_round() {
        let (mut cfg, base, world) = setup(3);
        cfg.request_policy = RequestPolicy::Scheduled(vec![
            UnlearnRequest { client_id: 0, forget_indices: vec![0], round_issued: 1 },
            UnlearnRequest { client_id: 1, forget_indices: vec![0], round_issued: 1 },
        ]);
        let h = run_training(&cfg, &base, &world).unwrap();
        assert_eq!(h.indicators(), vec![1, 1, 0]);
        assert_eq!(h.records[1].request.as_ref().unwrap().client_id, 1);
    }

    #[test]
    fn every_round_random_is_deterministic() {
        let (mut cfg, base, world) = setup(4);
        cfg.request_policy = RequestPolicy::EveryRoundRandom;
        let a = run_training(&cfg, &base, &world).unwrap();
        let b = run_training(&cfg, &base, &world).unwrap();
        assert_eq!(a.to_jsonl().unwrap(), b.to_jsonl().unwrap());
        assert!(a.indicators().iter().any(|&i| i == 1));
    }

    #[test]
    fn empty_retrain_matches_plain_run() {
        let (cfg, base, world) = setup(3);
        let plain = run_training(&cfg, &base, &world).unwrap();
        let retrain = retrain_baseline(&cfg, &base, &world, &[]).unwrap();
        assert_eq!(plain, retrain);
    }
}
