//! Simulated client: local mini-batch training of the broadcast adapter.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::model::{nll_loss, nll_loss_and_gradient, AdapterParams, BaseWeights, QaPair};
use crate::params::FlatParams;
use crate::rng::{derive_seed, seeded_rng, stream};
use crate::server::ClientUpdate;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientShard {
    pub client_id: usize,
    pub pairs: Vec<QaPair>,
    pub forget_flags: Vec<bool>,
}

impl ClientShard {
    pub fn new(client_id: usize, pairs: Vec<QaPair>, forget_flags: Vec<bool>) -> Result<Self> {
        let shard = ClientShard {
            client_id,
            pairs,
            forget_flags,
        };
        shard.validate()?;
        Ok(shard)
    }

    pub fn validate(&self) -> Result<()> {
        if self.pairs.is_empty() {
            return Err(Error::Data(format!("client {} has an empty shard", self.client_id)));
        }
        if self.pairs.len() != self.forget_flags.len() {
            return Err(Error::Data(format!(
                "client {}: {} pairs but {} forget flags",
                self.client_id,
                self.pairs.len(),
                self.forget_flags.len()
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn forget_indices(&self) -> Vec<usize> {
        self.forget_flags
            .iter()
            .enumerate()
            .filter_map(|(i, &f)| f.then_some(i))
            .collect()
    }

    pub fn retain_indices(&self) -> Vec<usize> {
        self.forget_flags
            .iter()
            .enumerate()
            .filter_map(|(i, &f)| (!f).then_some(i))
            .collect()
    }

    pub fn forget_pairs(&self) -> Vec<&QaPair> {
        self.forget_indices().into_iter().map(|i| &self.pairs[i]).collect()
    }

    pub fn retain_pairs(&self) -> Vec<&QaPair> {
        self.retain_indices().into_iter().map(|i| &self.pairs[i]).collect()
    }

    /// Indices used for training.
    pub fn training_indices(&self, include_forget: bool) -> Vec<usize> {
        if include_forget {
            (0..self.pairs.len()).collect()
        } else {
            self.retain_indices()
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClientOptimizer {
    #[default]
    Sgd,
    AdamW,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalTrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub mu: f64,
    /// Linear ramp of the learning rate over the first local epoch of round 1.
    pub warmup: bool,
    pub optimizer: ClientOptimizer,
    pub rng_seed: u64,
}

impl Default for LocalTrainConfig {
    fn default() -> Self {
        LocalTrainConfig {
            learning_rate: 1e-2,
            weight_decay: 0.01,
            batch_size: 32,
            local_epochs: 5,
            mu: 0.01,
            warmup: true,
            optimizer: ClientOptimizer::Sgd,
            rng_seed: 0,
        }
    }
}

impl LocalTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning_rate must be >= 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.local_epochs == 0 {
            return Err(Error::Config("local_epochs must be >= 1".into()));
        }
        if !(self.mu >= 0.0) {
            return Err(Error::Config(format!("mu must be >= 0, got {}", self.mu)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        Ok(())
    }
}

/// `(mu / 2) * ||local - global_ref||^2`.
pub fn proximal_penalty(local: &FlatParams, global_ref: &FlatParams, mu: f64) -> Result<f64> {
    if !(mu >= 0.0) {
        return arg_err(format!("mu must be >= 0, got {mu}"));
    }
    Ok(0.5 * mu * local.squared_distance(global_ref)?)
}

/// `grad nll + mu * (adapter - global_ref)`.
pub fn gradient_with_prox(
    base: &BaseWeights,
    adapter: &AdapterParams,
    batch: &[&QaPair],
    global_ref: &FlatParams,
    mu: f64,
) -> Result<FlatParams> {
    adapter.flat().check_len(global_ref)?;
    let (_, mut g) = nll_loss_and_gradient(base, adapter, batch)?;
    if mu != 0.0 {
        for ((gi, &w), &r) in g.iter_mut().zip(adapter.flat().iter()).zip(global_ref.iter()) {
            *gi += mu * (w - r);
        }
    }
    Ok(g)
}

/// Shard objective `nll + prox` evaluated on the pairs used for training.
pub fn local_objective(
    base: &BaseWeights,
    adapter: &AdapterParams,
    batch: &[&QaPair],
    global_ref: &FlatParams,
    mu: f64,
) -> Result<f64> {
    Ok(nll_loss(base, adapter, batch)? + proximal_penalty(adapter.flat(), global_ref, mu)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalTrainOutput {
    pub update: ClientUpdate,
    /// Objective after each epoch, filled only when tracing is requested.
    pub epoch_objectives: Vec<f64>,
}

struct AdamWState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

const ADAMW_BETA1: f64 = 0.9;
const ADAMW_BETA2: f64 = 0.999;
const ADAMW_EPS: f64 = 1e-8;

pub fn local_train(
    base: &BaseWeights,
    global_adapter: &AdapterParams,
    shard: &ClientShard,
    cfg: &LocalTrainConfig,
    round: u64,
    include_forget: bool,
) -> Result<ClientUpdate> {
    local_train_traced(base, global_adapter, shard, cfg, round, include_forget, false).map(|o| o.update)
}

/// Runs `local_epochs` of seeded-shuffled mini-batch descent starting from the
/// global adapter. Forget-flagged pairs are never read when `include_forget`
/// is false.
pub fn local_train_traced(
    base: &BaseWeights,
    global_adapter: &AdapterParams,
    shard: &ClientShard,
    cfg: &LocalTrainConfig,
    round: u64,
    include_forget: bool,
    trace: bool,
) -> Result<LocalTrainOutput> {
    cfg.validate()?;
    shard.validate()?;
    let mut order = shard.training_indices(include_forget);
    if order.is_empty() {
        return Err(Error::Data(format!(
            "client {} has no pairs left to train on",
            shard.client_id
        )));
    }
    let global_ref = global_adapter.flat().clone();
    let mut adapter = global_adapter.clone();
    let dim = adapter.num_params();
    let mut adam = (cfg.optimizer == ClientOptimizer::AdamW).then(|| AdamWState {
        m: vec![0.0; dim],
        v: vec![0.0; dim],
        t: 0,
    });
    let steps_per_epoch = order.len().div_ceil(cfg.batch_size);
    let mut epoch_objectives = Vec::new();
    let used: Vec<&QaPair> = if trace {
        order.iter().map(|&i| &shard.pairs[i]).collect()
    } else {
        Vec::new()
    };

    for epoch in 0..cfg.local_epochs {
        let mut rng = seeded_rng(derive_seed(cfg.rng_seed, &[stream::SHUFFLE, round, epoch as u64]));
        order.shuffle(&mut rng);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let lr = if cfg.warmup && round == 1 && epoch == 0 {
                cfg.learning_rate * (step + 1) as f64 / steps_per_epoch as f64
            } else {
                cfg.learning_rate
            };
            if lr == 0.0 {
                continue;
            }
            let batch: Vec<&QaPair> = chunk.iter().map(|&i| &shard.pairs[i]).collect();
            let grad = gradient_with_prox(base, &adapter, &batch, &global_ref, cfg.mu)?;
            let params = adapter.params_mut();
            match adam.as_mut() {
                None => {
                    for (w, g) in params.iter_mut().zip(grad.iter()) {
                        *w -= lr * g;
                    }
                }
                Some(st) => {
                    st.t += 1;
                    let bc1 = 1.0 - ADAMW_BETA1.powi(st.t);
                    let bc2 = 1.0 - ADAMW_BETA2.powi(st.t);
                    for (((w, &g), m), v) in params.iter_mut().zip(grad.iter()).zip(st.m.iter_mut()).zip(st.v.iter_mut()) {
                        *m = ADAMW_BETA1 * *m + (1.0 - ADAMW_BETA1) * g;
                        *v = ADAMW_BETA2 * *v + (1.0 - ADAMW_BETA2) * g * g;
                        *w -= lr * (*m / bc1) / ((*v / bc2).sqrt() + ADAMW_EPS);
                    }
                }
            }
            if cfg.weight_decay != 0.0 {
                let shrink = lr * cfg.weight_decay;
                for w in params.iter_mut() {
                    *w -= shrink * *w;
                }
            }
        }
        if trace {
            epoch_objectives.push(local_objective(base, &adapter, &used, &global_ref, cfg.mu)?);
        }
    }
    if !adapter.flat().is_finite() {
        return Err(Error::Data(format!(
            "client {} diverged during local training",
            shard.client_id
        )));
    }
    Ok(LocalTrainOutput {
        update: ClientUpdate {
            client_id: shard.client_id,
            params: adapter.into_flat(),
            num_examples: order.len(),
        },
        epoch_objectives,
    })
}
