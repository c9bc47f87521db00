//! Forgetting objectives and the loop that applies them to a global adapter.
//!
//! With `lp(y|x)` the total answer log-probability, `NLL` the batch-mean
//! negative log-likelihood, and `n` the number of forget pairs:
//!
//! ```text
//! GradAscent  L = -gamma * NLL(forget)
//! GradDiff    L = -gamma * NLL(forget) + alpha * NLL(retain)
//! NPO         L = -(2/beta) * mean log sigmoid(-beta * (lp_unl - lp_target)) + alpha * NLL(retain)
//! SimNPO      L = -(2/beta) * mean log sigmoid(-(beta/|y|) * lp_unl - delta) + alpha * NLL(retain)
//! ```
//!
//! Every loss is differentiable in the per-pair log-probabilities, so the
//! gradient is `sum_i (dL/dlp_i) * grad lp_i`, with `grad lp_i` from the same
//! row-wise backprop used by local training.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::model::{log_prob_and_grad, nll_loss, sequence_log_prob, AdapterParams, BaseWeights, QaPair, Scratch};
use crate::params::FlatParams;
use crate::rng::{derive_seed, seeded_rng, stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum UnlearnMethod {
    GradAscent,
    GradDiff,
    Npo,
    SimNpo,
}

impl UnlearnMethod {
    pub const ALL: [UnlearnMethod; 4] = [
        UnlearnMethod::GradAscent,
        UnlearnMethod::GradDiff,
        UnlearnMethod::Npo,
        UnlearnMethod::SimNpo,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            UnlearnMethod::GradAscent => "GradAscent",
            UnlearnMethod::GradDiff => "GradDiff",
            UnlearnMethod::Npo => "NPO",
            UnlearnMethod::SimNpo => "SimNPO",
        }
    }

    /// Whether the loss carries an `alpha * NLL(retain)` term.
    pub fn uses_retain(&self) -> bool {
        !matches!(self, UnlearnMethod::GradAscent)
    }
}

impl fmt::Display for UnlearnMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for UnlearnMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        UnlearnMethod::ALL
            .into_iter()
            .find(|m| m.name().to_ascii_lowercase() == key)
            .ok_or_else(|| Error::Config(format!("unknown unlearning method `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnlearnConfig {
    pub method: UnlearnMethod,
    pub gamma: f64,
    pub alpha: f64,
    pub beta: f64,
    pub delta: f64,
    pub steps: usize,
    pub learning_rate: f64,
    /// Retain mini-batch size for the alpha term.
    pub batch_size: usize,
    pub rng_seed: u64,
}

impl Default for UnlearnConfig {
    fn default() -> Self {
        UnlearnConfig {
            method: UnlearnMethod::GradAscent,
            gamma: 1.0,
            alpha: 1.0,
            beta: 0.1,
            delta: 0.0,
            steps: 5,
            learning_rate: 1e-2,
            batch_size: 32,
            rng_seed: 0,
        }
    }
}

impl UnlearnConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) {
            return Err(Error::Config(format!("gamma must be > 0, got {}", self.gamma)));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if matches!(self.method, UnlearnMethod::Npo | UnlearnMethod::SimNpo) && !(self.beta > 0.0) {
            return Err(Error::Config(format!("beta must be > 0, got {}", self.beta)));
        }
        if self.steps == 0 {
            return Err(Error::Config("unlearning steps must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(Error::Config("unlearning learning_rate must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("unlearning batch_size must be >= 1".into()));
        }
        Ok(())
    }

    fn needs_retain(&self) -> bool {
        self.method.uses_retain() && self.alpha != 0.0
    }
}

/// Frozen copy of the adapter at the start of an unlearning episode.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetSnapshot {
    pub adapter: AdapterParams,
}

impl TargetSnapshot {
    pub fn new(adapter: &AdapterParams) -> Self {
        TargetSnapshot {
            adapter: adapter.clone(),
        }
    }

    fn log_probs(&self, base: &BaseWeights, forget: &[&QaPair]) -> Result<Vec<f64>> {
        forget
            .iter()
            .map(|p| sequence_log_prob(base, &self.adapter, &p.question, &p.answer))
            .collect()
    }
}

/// `log sigmoid(z)` without overflow.
pub(crate) fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn require_forget(forget: &[&QaPair]) -> Result<()> {
    if forget.is_empty() {
        return arg_err("empty forget batch");
    }
    Ok(())
}

fn require_beta(beta: f64) -> Result<()> {
    if !(beta > 0.0) {
        return arg_err(format!("beta must be > 0, got {beta}"));
    }
    Ok(())
}

fn retain_term(base: &BaseWeights, adapter: &AdapterParams, retain: &[&QaPair], alpha: f64) -> Result<f64> {
    if alpha == 0.0 && retain.is_empty() {
        return Ok(0.0);
    }
    Ok(alpha * nll_loss(base, adapter, retain)?)
}

pub fn grad_ascent_loss(base: &BaseWeights, adapter: &AdapterParams, forget: &[&QaPair], gamma: f64) -> Result<f64> {
    require_forget(forget)?;
    Ok(-gamma * nll_loss(base, adapter, forget)?)
}

pub fn grad_diff_loss(
    base: &BaseWeights,
    adapter: &AdapterParams,
    forget: &[&QaPair],
    retain: &[&QaPair],
    gamma: f64,
    alpha: f64,
) -> Result<f64> {
    require_forget(forget)?;
    if retain.is_empty() {
        return arg_err("empty retain batch");
    }
    Ok(-gamma * nll_loss(base, adapter, forget)? + alpha * nll_loss(base, adapter, retain)?)
}

/// NPO forget term only (no retain regularizer).
pub fn npo_forget_term(
    base: &BaseWeights,
    adapter: &AdapterParams,
    target: &TargetSnapshot,
    forget: &[&QaPair],
    beta: f64,
) -> Result<f64> {
    require_forget(forget)?;
    require_beta(beta)?;
    let target_lp = target.log_probs(base, forget)?;
    let mut acc = 0.0;
    for (p, lpt) in forget.iter().zip(&target_lp) {
        let lp = sequence_log_prob(base, adapter, &p.question, &p.answer)?;
        acc += log_sigmoid(-beta * (lp - lpt));
    }
    Ok(-(2.0 / beta) * acc / forget.len() as f64)
}

pub fn npo_loss(
    base: &BaseWeights,
    adapter: &AdapterParams,
    target: &TargetSnapshot,
    forget: &[&QaPair],
    retain: &[&QaPair],
    beta: f64,
    alpha: f64,
) -> Result<f64> {
    Ok(npo_forget_term(base, adapter, target, forget, beta)? + retain_term(base, adapter, retain, alpha)?)
}

pub fn simnpo_forget_term(base: &BaseWeights, adapter: &AdapterParams, forget: &[&QaPair], beta: f64, delta: f64) -> Result<f64> {
    require_forget(forget)?;
    require_beta(beta)?;
    let mut acc = 0.0;
    for p in forget {
        let lp = sequence_log_prob(base, adapter, &p.question, &p.answer)?;
        acc += log_sigmoid(-(beta / p.answer.len() as f64) * lp - delta);
    }
    Ok(-(2.0 / beta) * acc / forget.len() as f64)
}

pub fn simnpo_loss(
    base: &BaseWeights,
    adapter: &AdapterParams,
    forget: &[&QaPair],
    retain: &[&QaPair],
    beta: f64,
    delta: f64,
    alpha: f64,
) -> Result<f64> {
    Ok(simnpo_forget_term(base, adapter, forget, beta, delta)? + retain_term(base, adapter, retain, alpha)?)
}

/// Loss value for the configured method.
pub fn unlearning_loss(
    base: &BaseWeights,
    adapter: &AdapterParams,
    cfg: &UnlearnConfig,
    target: &TargetSnapshot,
    forget: &[&QaPair],
    retain: &[&QaPair],
) -> Result<f64> {
    match cfg.method {
        UnlearnMethod::GradAscent => grad_ascent_loss(base, adapter, forget, cfg.gamma),
        UnlearnMethod::GradDiff => grad_diff_loss(base, adapter, forget, retain, cfg.gamma, cfg.alpha),
        UnlearnMethod::Npo => npo_loss(base, adapter, target, forget, retain, cfg.beta, cfg.alpha),
        UnlearnMethod::SimNpo => simnpo_loss(base, adapter, forget, retain, cfg.beta, cfg.delta, cfg.alpha),
    }
}

/// Analytic gradient of [`unlearning_loss`]. `target_lp` holds the snapshot
/// log-probabilities of the forget pairs (NPO only).
pub fn unlearning_gradient(
    base: &BaseWeights,
    adapter: &AdapterParams,
    cfg: &UnlearnConfig,
    target_lp: Option<&[f64]>,
    forget: &[&QaPair],
    retain: &[&QaPair],
) -> Result<FlatParams> {
    require_forget(forget)?;
    let with_retain = cfg.method.uses_retain() && !(cfg.alpha == 0.0 && retain.is_empty());
    if with_retain && retain.is_empty() {
        return arg_err("empty retain batch");
    }
    for p in forget.iter().chain(retain.iter()) {
        if p.answer.is_empty() {
            return arg_err("empty answer");
        }
    }
    let mut scratch = Scratch::new(base.vocab(), adapter.rank());
    let mut grad = FlatParams::zeros(adapter.num_params());
    let n = forget.len() as f64;

    for (i, p) in forget.iter().enumerate() {
        let coef = match cfg.method {
            UnlearnMethod::GradAscent | UnlearnMethod::GradDiff => cfg.gamma / n,
            UnlearnMethod::Npo => {
                require_beta(cfg.beta)?;
                let lpt = target_lp
                    .and_then(|t| t.get(i).copied())
                    .ok_or_else(|| Error::Argument("missing target log-probabilities".into()))?;
                let lp = log_prob_and_grad(base, adapter, p.question.tokens(), p.answer.tokens(), 0.0, None, &mut scratch);
                2.0 * sigmoid(cfg.beta * (lp - lpt)) / n
            }
            UnlearnMethod::SimNpo => {
                require_beta(cfg.beta)?;
                let len = p.answer.len() as f64;
                let lp = log_prob_and_grad(base, adapter, p.question.tokens(), p.answer.tokens(), 0.0, None, &mut scratch);
                let z = -(cfg.beta / len) * lp - cfg.delta;
                2.0 * sigmoid(-z) / (n * len)
            }
        };
        log_prob_and_grad(base, adapter, p.question.tokens(), p.answer.tokens(), coef, Some(&mut grad), &mut scratch);
    }
    if with_retain && cfg.alpha != 0.0 {
        let coef = -cfg.alpha / retain.len() as f64;
        for p in retain {
            log_prob_and_grad(base, adapter, p.question.tokens(), p.answer.tokens(), coef, Some(&mut grad), &mut scratch);
        }
    }
    Ok(grad)
}

/// Applies `cfg.steps` descent steps of the configured objective starting
/// from `global_adapter`. Each step uses the full forget set and the next
/// retain mini-batch from a seeded reshuffle of `retain`.
pub fn run_unlearning(
    base: &BaseWeights,
    global_adapter: &AdapterParams,
    cfg: &UnlearnConfig,
    forget: &[&QaPair],
    retain: &[&QaPair],
) -> Result<AdapterParams> {
    cfg.validate()?;
    require_forget(forget)?;
    if cfg.needs_retain() && retain.is_empty() {
        return Err(Error::Data(format!("{} needs a non-empty retain set", cfg.method)));
    }
    let snapshot = TargetSnapshot::new(global_adapter);
    let target_lp = match cfg.method {
        UnlearnMethod::Npo => Some(snapshot.log_probs(base, forget)?),
        _ => None,
    };
    let mut adapter = global_adapter.clone();
    if cfg.learning_rate == 0.0 {
        return Ok(adapter);
    }
    let use_retain = cfg.needs_retain();
    let mut order: Vec<usize> = (0..retain.len()).collect();
    let mut cursor = order.len();
    let mut pass = 0u64;

    for _ in 0..cfg.steps {
        let batch: Vec<&QaPair> = if use_retain {
            if cursor >= order.len() {
                let mut rng = seeded_rng(derive_seed(cfg.rng_seed, &[stream::UNLEARN, pass]));
                order.sort_unstable();
                order.shuffle(&mut rng);
                pass += 1;
                cursor = 0;
            }
            let end = (cursor + cfg.batch_size).min(order.len());
            let b = order[cursor..end].iter().map(|&i| retain[i]).collect();
            cursor = end;
            b
        } else {
            Vec::new()
        };
        let grad = unlearning_gradient(base, &adapter, cfg, target_lp.as_deref(), forget, &batch)?;
        for (w, g) in adapter.params_mut().iter_mut().zip(grad.iter()) {
            *w -= cfg.learning_rate * g;
        }
    }
    if !adapter.flat().is_finite() {
        return Err(Error::Data(format!("{} diverged", cfg.method)));
    }
    Ok(adapter)
}
