//! Server-side aggregation rules.
//!
//! All six rules operate on flattened adapter parameters. Each round the
//! server forms the weighted pseudo-gradient
//!
//! ```text
//! delta_t = sum_k w_k (phi_k - phi_{t-1}),    w_k = N_k / sum_j N_j
//! ```
//!
//! and then applies one of:
//!
//! | rule       | update                                                        |
//! |------------|---------------------------------------------------------------|
//! | FedAvg     | `phi_t = sum_k w_k phi_k`                                     |
//! | FedProx    | same as FedAvg (the proximal term lives on the client)        |
//! | FedAvgM    | `m_t = beta1 m + delta`, `phi_t = phi + m_t`                  |
//! | FedAdagrad | `v_t = v + delta^2`, `phi_t = phi + eps delta / (sqrt v + tau)` |
//! | FedAdam    | `m_t = beta1 m + (1-beta1) delta`, `v_t = beta2 v + (1-beta2) delta^2` |
//! | FedYogi    | `v_t = v - (1-beta2) delta^2 sign(v - delta^2)`               |
//!
//! On the first step (`t = 0`) every momentum buffer is initialized to
//! `delta` directly. No bias correction is applied.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::params::FlatParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Algorithm {
    FedAvg,
    FedAvgM,
    FedProx,
    FedAdagrad,
    FedAdam,
    FedYogi,
}

impl Algorithm {
    pub const ALL: [Algorithm; 6] = [
        Algorithm::FedAvg,
        Algorithm::FedAvgM,
        Algorithm::FedProx,
        Algorithm::FedAdagrad,
        Algorithm::FedAdam,
        Algorithm::FedYogi,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::FedAvg => "FedAvg",
            Algorithm::FedAvgM => "FedAvgM",
            Algorithm::FedProx => "FedProx",
            Algorithm::FedAdagrad => "FedAdagrad",
            Algorithm::FedAdam => "FedAdam",
            Algorithm::FedYogi => "FedYogi",
        }
    }

    pub fn uses_momentum(&self) -> bool {
        matches!(self, Algorithm::FedAvgM | Algorithm::FedAdam | Algorithm::FedYogi)
    }

    pub fn uses_second_moment(&self) -> bool {
        matches!(self, Algorithm::FedAdagrad | Algorithm::FedAdam | Algorithm::FedYogi)
    }

    pub fn adaptive_variant(&self) -> Option<AdaptiveVariant> {
        match self {
            Algorithm::FedAdagrad => Some(AdaptiveVariant::Adagrad),
            Algorithm::FedAdam => Some(AdaptiveVariant::Adam),
            Algorithm::FedYogi => Some(AdaptiveVariant::Yogi),
            _ => None,
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name().to_ascii_lowercase() == lower)
            .ok_or_else(|| Error::Config(format!("unknown federated algorithm `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AdaptiveVariant {
    Adagrad,
    Adam,
    Yogi,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServerHyper {
    pub server_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub tau: f64,
    /// Client-side proximal strength (FedProx only).
    pub mu: f64,
    /// Parsed and stored; no update rule consumes it.
    pub regularization: f64,
}

impl Default for ServerHyper {
    fn default() -> Self {
        ServerHyper {
            server_lr: 1.0,
            beta1: 0.9,
            beta2: 0.99,
            tau: 1e-3,
            mu: 0.01,
            regularization: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub params: FlatParams,
    pub num_examples: usize,
}

/// Persistent server optimizer state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServerOptState {
    pub algorithm: Algorithm,
    pub m: Option<FlatParams>,
    pub v: Option<FlatParams>,
    pub round_index: u64,
    pub hyper: ServerHyper,
    /// Aggregate with equal weights instead of `N_k`-proportional ones.
    pub uniform_weights: bool,
}

impl ServerOptState {
    pub fn new(algorithm: Algorithm, hyper: ServerHyper, dim: usize) -> Self {
        ServerOptState {
            algorithm,
            m: algorithm.uses_momentum().then(|| FlatParams::zeros(dim)),
            v: algorithm.uses_second_moment().then(|| FlatParams::zeros(dim)),
            round_index: 0,
            hyper,
            uniform_weights: false,
        }
    }

    /// Checks buffer presence against the algorithm tag.
    pub fn validate(&self) -> Result<()> {
        if self.m.is_some() != self.algorithm.uses_momentum() {
            return Err(Error::Contract(format!("{} momentum buffer presence", self.algorithm)));
        }
        if self.v.is_some() != self.algorithm.uses_second_moment() {
            return Err(Error::Contract(format!("{} second-moment buffer presence", self.algorithm)));
        }
        Ok(())
    }
}

/// `w_k = N_k / sum_j N_j`.
pub fn compute_weights(updates: &[ClientUpdate]) -> Result<Vec<f64>> {
    if updates.is_empty() {
        return arg_err("no client updates");
    }
    if updates.iter().any(|u| u.num_examples == 0) {
        return arg_err("client update with zero examples");
    }
    let total: usize = updates.iter().map(|u| u.num_examples).sum();
    Ok(updates
        .iter()
        .map(|u| u.num_examples as f64 / total as f64)
        .collect())
}

pub fn uniform_weights(updates: &[ClientUpdate]) -> Result<Vec<f64>> {
    if updates.is_empty() {
        return arg_err("no client updates");
    }
    Ok(vec![1.0 / updates.len() as f64; updates.len()])
}

fn check_inputs(dim: usize, updates: &[ClientUpdate], weights: &[f64]) -> Result<()> {
    if updates.is_empty() {
        return arg_err("no client updates");
    }
    if weights.len() != updates.len() {
        return Err(Error::Dimension(format!(
            "{} weights for {} updates",
            weights.len(),
            updates.len()
        )));
    }
    if let Some(u) = updates.iter().find(|u| u.params.len() != dim) {
        return Err(Error::Dimension(format!(
            "client {} sent {} parameters, expected {dim}",
            u.client_id,
            u.params.len()
        )));
    }
    Ok(())
}

/// `sum_k w_k phi_k`.
pub fn fedavg_aggregate(updates: &[ClientUpdate], weights: &[f64]) -> Result<FlatParams> {
    let dim = updates.first().map(|u| u.params.len()).unwrap_or(0);
    check_inputs(dim, updates, weights)?;
    let mut out = FlatParams::zeros(dim);
    for (u, &w) in updates.iter().zip(weights) {
        for (o, &x) in out.iter_mut().zip(u.params.iter()) {
            *o += w * x;
        }
    }
    Ok(out)
}

/// `delta_t = sum_k w_k (phi_k - phi_{t-1})`.
pub fn pseudo_gradient(prev_global: &FlatParams, updates: &[ClientUpdate], weights: &[f64]) -> Result<FlatParams> {
    check_inputs(prev_global.len(), updates, weights)?;
    let mut delta = FlatParams::zeros(prev_global.len());
    for (u, &w) in updates.iter().zip(weights) {
        for ((d, &x), &p) in delta.iter_mut().zip(u.params.iter()).zip(prev_global.iter()) {
            *d += w * (x - p);
        }
    }
    Ok(delta)
}

fn expect_tag(state: &ServerOptState, allowed: &[Algorithm]) -> Result<()> {
    if !allowed.contains(&state.algorithm) {
        return Err(Error::Contract(format!(
            "step for {:?} called on {} state",
            allowed, state.algorithm
        )));
    }
    Ok(())
}

fn buffer<'a>(slot: &'a Option<FlatParams>, what: &str) -> Result<&'a FlatParams> {
    slot.as_ref()
        .ok_or_else(|| Error::Contract(format!("missing {what} buffer")))
}

pub fn fedavgm_step(
    state: &ServerOptState,
    prev_global: &FlatParams,
    updates: &[ClientUpdate],
    weights: &[f64],
) -> Result<(FlatParams, ServerOptState)> {
    expect_tag(state, &[Algorithm::FedAvgM])?;
    let delta = pseudo_gradient(prev_global, updates, weights)?;
    let m_prev = buffer(&state.m, "momentum")?;
    m_prev.check_len(prev_global)?;
    let beta1 = state.hyper.beta1;
    let first = state.round_index == 0;
    let m: FlatParams = if first {
        delta
    } else {
        m_prev.iter().zip(delta.iter()).map(|(m, d)| beta1 * m + d).collect::<Vec<_>>().into()
    };
    // phi_{t-1} + m_t rewritten as sum_k w_k phi_k + beta1 m_{t-1}, so that
    // beta1 = 0 reproduces the weighted mean bit for bit.
    let mut phi = fedavg_aggregate(updates, weights)?;
    if !first {
        for (p, m) in phi.iter_mut().zip(m_prev.iter()) {
            *p += beta1 * m;
        }
    }
    let mut next = state.clone();
    next.m = Some(m);
    next.round_index += 1;
    Ok((phi, next))
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn adaptive_step(
    variant: AdaptiveVariant,
    state: &ServerOptState,
    prev_global: &FlatParams,
    updates: &[ClientUpdate],
    weights: &[f64],
) -> Result<(FlatParams, ServerOptState)> {
    let tag = match variant {
        AdaptiveVariant::Adagrad => Algorithm::FedAdagrad,
        AdaptiveVariant::Adam => Algorithm::FedAdam,
        AdaptiveVariant::Yogi => Algorithm::FedYogi,
    };
    expect_tag(state, &[tag])?;
    let h = state.hyper;
    if !(h.tau > 0.0) {
        return arg_err(format!("tau must be positive, got {}", h.tau));
    }
    let delta = pseudo_gradient(prev_global, updates, weights)?;
    let v_prev = buffer(&state.v, "second-moment")?;
    v_prev.check_len(prev_global)?;
    let first = state.round_index == 0;

    let m: Option<FlatParams> = match variant {
        AdaptiveVariant::Adagrad => None,
        AdaptiveVariant::Adam | AdaptiveVariant::Yogi => {
            let m_prev = buffer(&state.m, "momentum")?;
            m_prev.check_len(prev_global)?;
            Some(if first {
                delta.clone()
            } else {
                m_prev
                    .iter()
                    .zip(delta.iter())
                    .map(|(m, d)| h.beta1 * m + (1.0 - h.beta1) * d)
                    .collect::<Vec<_>>()
                    .into()
            })
        }
    };
    let v: FlatParams = v_prev
        .iter()
        .zip(delta.iter())
        .map(|(&v, &d)| {
            let d2 = d * d;
            match variant {
                AdaptiveVariant::Adagrad => v + d2,
                AdaptiveVariant::Adam => h.beta2 * v + (1.0 - h.beta2) * d2,
                AdaptiveVariant::Yogi => v - (1.0 - h.beta2) * d2 * sign(v - d2),
            }
        })
        .collect::<Vec<_>>()
        .into();
    let direction = m.as_ref().unwrap_or(&delta);
    let phi: FlatParams = prev_global
        .iter()
        .zip(direction.iter())
        .zip(v.iter())
        .map(|((p, d), v)| p + h.server_lr * d / (v.sqrt() + h.tau))
        .collect::<Vec<_>>()
        .into();
    let mut next = state.clone();
    if m.is_some() {
        next.m = m;
    }
    next.v = Some(v);
    next.round_index += 1;
    Ok((phi, next))
}

/// One server step dispatched on the state's algorithm tag.
pub fn aggregate(
    state: &ServerOptState,
    prev_global: &FlatParams,
    updates: &[ClientUpdate],
) -> Result<(FlatParams, ServerOptState)> {
    let weights = if state.uniform_weights {
        uniform_weights(updates)?
    } else {
        compute_weights(updates)?
    };
    match state.algorithm {
        Algorithm::FedAvg | Algorithm::FedProx => {
            check_inputs(prev_global.len(), updates, &weights)?;
            let phi = fedavg_aggregate(updates, &weights)?;
            let mut next = state.clone();
            next.round_index += 1;
            Ok((phi, next))
        }
        Algorithm::FedAvgM => fedavgm_step(state, prev_global, updates, &weights),
        alg => adaptive_step(
            alg.adaptive_variant().expect("adaptive algorithm"),
            state,
            prev_global,
            updates,
            &weights,
        ),
    }
}
