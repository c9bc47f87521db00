//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use fedunlearn::client::{ClientOptimizer, LocalTrainConfig};
use fedunlearn::datagen::{generate_world, pretrain_base, PretrainConfig, WorldBundle, WorldConfig};
use fedunlearn::model::{AdapterParams, BaseWeights, LoraConfig, QaPair, TokenSeq};
use fedunlearn::orchestrator::RunConfig;
use fedunlearn::unlearning::UnlearnConfig;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- instances

pub fn random_base(rng: &mut ChaCha8Rng, v: usize) -> BaseWeights {
    BaseWeights::new(v, (0..v * v).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

pub fn random_adapter(rng: &mut ChaCha8Rng, v: usize, r: usize) -> AdapterParams {
    let alpha = rng.random_range(0.5..4.0);
    let a = (0..v * r).map(|_| rng.random_range(-0.8..0.8)).collect();
    let b = (0..v * r).map(|_| rng.random_range(-0.8..0.8)).collect();
    AdapterParams::from_parts(v, r, alpha, a, b).unwrap()
}

fn random_seq(rng: &mut ChaCha8Rng, v: usize, len: usize) -> TokenSeq {
    TokenSeq::from((0..len).map(|_| rng.random_range(0..v as u32)).collect::<Vec<_>>())
}

/// A structurally valid pair over a vocabulary of size `v`.
pub fn random_pair(rng: &mut ChaCha8Rng, v: usize) -> QaPair {
    let qlen = rng.random_range(1..=3);
    let alen = rng.random_range(1..=4);
    let answer = random_seq(rng, v, alen);
    let mut wrong = Vec::new();
    for _ in 0..rng.random_range(1..=3) {
        let mut w = answer.clone();
        while w == answer {
            let len = rng.random_range(1..=4);
            w = random_seq(rng, v, len);
        }
        wrong.push(w);
    }
    QaPair {
        question: random_seq(rng, v, qlen),
        answer,
        paraphrased_question: random_seq(rng, v, qlen),
        wrong_answers: wrong,
    }
}

pub fn random_pairs(rng: &mut ChaCha8Rng, v: usize, n: usize) -> Vec<QaPair> {
    (0..n).map(|_| random_pair(rng, v)).collect()
}

// ---------------------------------------------------------- finite differences

/// Central differences of `f` at `x` with step `h`.
pub fn central_difference(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `max_i |g_i - fd_i| / max(max_i |g_i|, 1)`.
pub fn gradient_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic.iter().fold(1.0f64, |m, x| m.max(x.abs()));
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max)
        / scale
}

// ------------------------------------------------------------------ metrics

/// Longest common subsequence by enumerating the subsequences of `a` from
/// longest to shortest and testing each against `b`.
pub fn lcs_brute_force(a: &[u32], b: &[u32]) -> usize {
    let n = a.len();
    let mut masks: Vec<u32> = (0..1u32 << n).collect();
    masks.sort_by_key(|m| std::cmp::Reverse(m.count_ones()));
    for m in masks {
        let sub: Vec<u32> = (0..n).filter(|i| m >> i & 1 == 1).map(|i| a[i]).collect();
        if is_subsequence(&sub, b) {
            return sub.len();
        }
    }
    0
}

pub fn is_subsequence(sub: &[u32], of: &[u32]) -> bool {
    let mut it = of.iter();
    sub.iter().all(|x| it.any(|y| y == x))
}

/// Largest gap between the two empirical CDFs, checked at every sample point.
pub fn ks_brute_force(u: &[f64], r: &[f64]) -> f64 {
    let cdf = |s: &[f64], x: f64| s.iter().filter(|&&y| y <= x).count() as f64 / s.len() as f64;
    u.iter()
        .chain(r)
        .map(|&x| (cdf(u, x) - cdf(r, x)).abs())
        .fold(0.0, f64::max)
}

// ------------------------------------------------------------ server rules

/// Aggregation weights `N_k / sum N_j`.
pub fn oracle_weights(counts: &[usize]) -> Vec<f64> {
    let total: usize = counts.iter().sum();
    counts.iter().map(|&n| n as f64 / total as f64).collect()
}

pub fn oracle_fedavg(clients: &[Vec<f64>], w: &[f64]) -> Vec<f64> {
    let dim = clients[0].len();
    let mut out = vec![0.0; dim];
    for i in 0..dim {
        for k in 0..clients.len() {
            out[i] += w[k] * clients[k][i];
        }
    }
    out
}

pub fn oracle_delta(prev: &[f64], clients: &[Vec<f64>], w: &[f64]) -> Vec<f64> {
    let mut d = vec![0.0; prev.len()];
    for i in 0..prev.len() {
        for k in 0..clients.len() {
            d[i] += w[k] * (clients[k][i] - prev[i]);
        }
    }
    d
}

/// Server state carried by the straight-line optimizers.
#[derive(Clone, Debug)]
pub struct OracleState {
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl OracleState {
    pub fn new(dim: usize) -> Self {
        OracleState {
            t: 0,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
        }
    }
}

pub fn oracle_fedavgm(st: &mut OracleState, prev: &[f64], clients: &[Vec<f64>], w: &[f64], beta1: f64) -> Vec<f64> {
    let d = oracle_delta(prev, clients, w);
    for i in 0..d.len() {
        st.m[i] = if st.t == 0 { d[i] } else { beta1 * st.m[i] + d[i] };
    }
    st.t += 1;
    (0..d.len()).map(|i| prev[i] + st.m[i]).collect()
}

pub struct OracleHyper {
    pub eta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub tau: f64,
}

pub fn oracle_adagrad(st: &mut OracleState, prev: &[f64], clients: &[Vec<f64>], w: &[f64], h: &OracleHyper) -> Vec<f64> {
    let d = oracle_delta(prev, clients, w);
    let mut out = Vec::with_capacity(d.len());
    for i in 0..d.len() {
        st.v[i] += d[i] * d[i];
        out.push(prev[i] + h.eta * d[i] / (st.v[i].sqrt() + h.tau));
    }
    st.t += 1;
    out
}

pub fn oracle_adam(st: &mut OracleState, prev: &[f64], clients: &[Vec<f64>], w: &[f64], h: &OracleHyper) -> Vec<f64> {
    let d = oracle_delta(prev, clients, w);
    let mut out = Vec::with_capacity(d.len());
    for i in 0..d.len() {
        st.m[i] = if st.t == 0 { d[i] } else { h.beta1 * st.m[i] + (1.0 - h.beta1) * d[i] };
        st.v[i] = h.beta2 * st.v[i] + (1.0 - h.beta2) * d[i] * d[i];
        out.push(prev[i] + h.eta * st.m[i] / (st.v[i].sqrt() + h.tau));
    }
    st.t += 1;
    out
}

pub fn oracle_yogi(st: &mut OracleState, prev: &[f64], clients: &[Vec<f64>], w: &[f64], h: &OracleHyper) -> Vec<f64> {
    let d = oracle_delta(prev, clients, w);
    let mut out = Vec::with_capacity(d.len());
    for i in 0..d.len() {
        st.m[i] = if st.t == 0 { d[i] } else { h.beta1 * st.m[i] + (1.0 - h.beta1) * d[i] };
        let d2 = d[i] * d[i];
        let diff = st.v[i] - d2;
        let sign = if diff > 0.0 {
            1.0
        } else if diff < 0.0 {
            -1.0
        } else {
            0.0
        };
        st.v[i] -= (1.0 - h.beta2) * d2 * sign;
        out.push(prev[i] + h.eta * st.m[i] / (st.v[i].sqrt() + h.tau));
    }
    st.t += 1;
    out
}

// ---------------------------------------------------------------- worlds

/// The K=6, 20 facts per client, 10% forget world used by the directional checks.
pub fn small_world(seed: u64) -> (WorldBundle, BaseWeights) {
    let world = generate_world(&WorldConfig {
        num_clients: 6,
        facts_per_client: 20,
        forget_fraction: 0.1,
        seed,
        ..Default::default()
    })
    .unwrap();
    let base = pretrain_base(&world.base_pretrain_corpus, world.vocab.size(), &PretrainConfig::default()).unwrap();
    (world, base)
}

/// Hyperparameters scaled for the bigram model: full participation and
/// AdamW clients so ten rounds memorize every fact.
pub fn small_run_config(seed: u64) -> RunConfig {
    RunConfig {
        num_clients: 6,
        participation_rate: 1.0,
        global_rounds: 10,
        master_seed: seed,
        lora: LoraConfig {
            rank: 32,
            alpha: 64.0,
            ..Default::default()
        },
        local: LocalTrainConfig {
            learning_rate: 0.03,
            local_epochs: 5,
            batch_size: 4,
            weight_decay: 0.01,
            optimizer: ClientOptimizer::AdamW,
            ..Default::default()
        },
        unlearn: UnlearnConfig {
            steps: 20,
            learning_rate: 0.2,
            batch_size: 8,
            alpha: 1.0,
            ..Default::default()
        },
        ..Default::default()
    }
}

/// A much smaller world and schedule for tests that run many federations.
pub fn tiny_world(seed: u64, clients: usize) -> (WorldBundle, BaseWeights) {
    let world = generate_world(&WorldConfig {
        num_clients: clients,
        facts_per_client: 6,
        forget_fraction: 0.34,
        entity_size: 2,
        world_facts_count: 4,
        real_authors_count: 4,
        seed,
        ..Default::default()
    })
    .unwrap();
    let base = pretrain_base(&world.base_pretrain_corpus, world.vocab.size(), &PretrainConfig::default()).unwrap();
    (world, base)
}

pub fn tiny_run_config(seed: u64, clients: usize) -> RunConfig {
    RunConfig {
        num_clients: clients,
        participation_rate: 1.0,
        global_rounds: 4,
        master_seed: seed,
        lora: LoraConfig {
            rank: 4,
            alpha: 8.0,
            ..Default::default()
        },
        local: LocalTrainConfig {
            learning_rate: 0.05,
            local_epochs: 2,
            batch_size: 2,
            optimizer: ClientOptimizer::AdamW,
            ..Default::default()
        },
        unlearn: UnlearnConfig {
            steps: 3,
            learning_rate: 0.1,
            batch_size: 2,
            ..Default::default()
        },
        ..Default::default()
    }
}

// ------------------------------------------------------------ forward model

/// `log P(target | context)` computed from scratch: logits for previous
/// token `i` are `W[i] + s * sum_k A[i,k] B[k,:]` with `params = A ++ B`.
pub fn oracle_log_prob(base: &BaseWeights, r: usize, s: f64, params: &[f64], context: &[u32], target: &[u32]) -> f64 {
    let v = base.vocab();
    let (a, b) = params.split_at(v * r);
    let mut prev = *context.last().unwrap() as usize;
    let mut total = 0.0;
    for &next in target {
        let z: Vec<f64> = (0..v)
            .map(|j| base.get(prev, j) + s * (0..r).map(|k| a[prev * r + k] * b[k * v + j]).sum::<f64>())
            .collect();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        total += z[next as usize] - lse;
        prev = next as usize;
    }
    total
}

pub fn oracle_nll(base: &BaseWeights, r: usize, s: f64, params: &[f64], batch: &[QaPair]) -> f64 {
    -batch
        .iter()
        .map(|p| oracle_log_prob(base, r, s, params, p.question.tokens(), p.answer.tokens()))
        .sum::<f64>()
        / batch.len() as f64
}

pub fn log_sigmoid(z: f64) -> f64 {
    -(1.0 + (-z).exp()).ln()
}
