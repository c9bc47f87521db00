//! End-to-end comparison pipeline: fine-tune, unlearn with each method,
//! retrain without the forget data, and evaluate everything against the
//! retrained reference.

use serde::{Deserialize, Serialize};

use crate::client::ClientShard;
use crate::datagen::WorldBundle;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport, ReportLabel};
use crate::model::{AdapterParams, BaseWeights};
use crate::orchestrator::{retrain_baseline, Federation, RequestPolicy, RunConfig, RunHistory, UnlearnRequest};
use crate::unlearning::UnlearnMethod;

pub const FINETUNE_LABEL: &str = "Finetune";
pub const RETRAIN_LABEL: &str = "Retrain";

/// One request per client holding forget-flagged pairs, issued on
/// consecutive rounds starting at `first_round`.
pub fn forget_schedule(world: &WorldBundle, first_round: u64) -> Vec<UnlearnRequest> {
    world
        .shards
        .iter()
        .filter(|s| s.forget_flags.iter().any(|&f| f))
        .enumerate()
        .map(|(i, s)| UnlearnRequest {
            client_id: s.client_id,
            forget_indices: s.forget_indices(),
            round_issued: first_round + i as u64,
        })
        .collect()
}

/// Every forget-flagged pair as `(client, indices)`.
pub fn flagged_forget_sets(world: &WorldBundle) -> Vec<(usize, Vec<usize>)> {
    world
        .shards
        .iter()
        .map(|s| (s.client_id, s.forget_indices()))
        .filter(|(_, idx)| !idx.is_empty())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodOutcome {
    pub method: UnlearnMethod,
    pub adapter: AdapterParams,
    pub history: RunHistory,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub base_report: EvalReport,
    pub finetune_adapter: AdapterParams,
    pub finetune_history: RunHistory,
    pub finetune_report: EvalReport,
    pub retrain_adapter: AdapterParams,
    pub retrain_report: EvalReport,
    pub methods: Vec<MethodOutcome>,
}

impl ExperimentResult {
    /// Reports in table row order: Finetune, each method, Retrain.
    pub fn reports(&self) -> Vec<EvalReport> {
        let mut out = vec![self.finetune_report.clone()];
        out.extend(self.methods.iter().map(|m| m.report.clone()));
        out.push(self.retrain_report.clone());
        out
    }

    pub fn method(&self, m: UnlearnMethod) -> Option<&MethodOutcome> {
        self.methods.iter().find(|o| o.method == m)
    }
}

pub fn labeled(mut report: EvalReport, cfg: &RunConfig, row: &str) -> EvalReport {
    report.label = ReportLabel {
        algorithm: cfg.algorithm.name().to_string(),
        method: row.to_string(),
    };
    report
}

/// Fine-tunes for `T` rounds, then for each method continues the same
/// federation with the forget schedule (one request per round, each followed
/// by a regular round). The retrained reference excludes every flagged pair
/// from the start.
pub fn run_experiment(cfg: &RunConfig, base: &BaseWeights, world: &WorldBundle, methods: &[UnlearnMethod]) -> Result<ExperimentResult> {
    let plain = RunConfig {
        request_policy: RequestPolicy::None,
        ..cfg.clone()
    };
    let bundle = &world.eval_bundle;
    let mut fed = Federation::new(&plain, world)?;
    let base_report = labeled(evaluate(base, &fed.global, None, bundle)?, cfg, "Base");
    fed.run_until(&plain, base, world, plain.global_rounds)?;

    let retrain = retrain_baseline(&plain, base, world, &flagged_forget_sets(world))?;
    let retrain_adapter = retrain.final_adapter;
    let reference = Some(&retrain_adapter);
    let finetune_report = labeled(evaluate(base, &fed.global, reference, bundle)?, cfg, FINETUNE_LABEL);
    let retrain_report = labeled(evaluate(base, &retrain_adapter, reference, bundle)?, cfg, RETRAIN_LABEL);

    let schedule = forget_schedule(world, plain.global_rounds + 1);
    let last = plain.global_rounds + schedule.len() as u64;
    let mut outcomes = Vec::with_capacity(methods.len());
    for &method in methods {
        let mcfg = RunConfig {
            request_policy: RequestPolicy::Scheduled(schedule.clone()),
            unlearn: crate::unlearning::UnlearnConfig {
                method,
                ..cfg.unlearn.clone()
            },
            ..plain.clone()
        };
        let mut f = fed.clone();
        f.run_until(&mcfg, base, world, last)?;
        let report = labeled(evaluate(base, &f.global, reference, bundle)?, cfg, method.name());
        outcomes.push(MethodOutcome {
            method,
            adapter: f.global.clone(),
            history: f.history(),
            report,
        });
    }
    Ok(ExperimentResult {
        base_report,
        finetune_adapter: fed.global.clone(),
        finetune_history: fed.history(),
        finetune_report,
        retrain_adapter,
        retrain_report,
        methods: outcomes,
    })
}

/// The world as seen by client `client` training alone.
pub fn single_client_world(world: &WorldBundle, client: usize) -> Result<WorldBundle> {
    let shard = world
        .shards
        .get(client)
        .ok_or_else(|| Error::Argument(format!("no client {client}")))?;
    Ok(WorldBundle {
        shards: vec![ClientShard {
            client_id: 0,
            ..shard.clone()
        }],
        ..world.clone()
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalBaseline {
    /// Clients holding forget data; each trained alone.
    pub clients: Vec<usize>,
    /// Per method, post-unlearning model utility averaged over `clients`.
    pub mean_utility: Vec<(UnlearnMethod, f64)>,
}

/// Each client with forget data fine-tunes alone for `T` rounds on its own
/// shard, then unlearns its forget pairs. Utility is measured on the full
/// evaluation bundle.
pub fn run_local_baseline(cfg: &RunConfig, base: &BaseWeights, world: &WorldBundle, methods: &[UnlearnMethod]) -> Result<LocalBaseline> {
    let clients: Vec<usize> = world.forget_clients();
    let mut sums = vec![0.0; methods.len()];
    for &c in &clients {
        let local_world = single_client_world(world, c)?;
        let local_cfg = RunConfig {
            num_clients: 1,
            participation_rate: 1.0,
            request_policy: RequestPolicy::None,
            ..cfg.clone()
        };
        let mut fed = Federation::new(&local_cfg, &local_world)?;
        fed.run_until(&local_cfg, base, &local_world, local_cfg.global_rounds)?;
        let schedule = forget_schedule(&local_world, local_cfg.global_rounds + 1);
        for (i, &method) in methods.iter().enumerate() {
            let mcfg = RunConfig {
                request_policy: RequestPolicy::Scheduled(schedule.clone()),
                unlearn: crate::unlearning::UnlearnConfig {
                    method,
                    ..cfg.unlearn.clone()
                },
                ..local_cfg.clone()
            };
            let mut f = fed.clone();
            f.run_until(&mcfg, base, &local_world, local_cfg.global_rounds + schedule.len() as u64)?;
            let report = evaluate(base, &f.global, None, &world.eval_bundle)?;
            sums[i] += report.model_utility.unwrap_or(0.0);
        }
    }
    let n = clients.len().max(1) as f64;
    Ok(LocalBaseline {
        clients,
        mean_utility: methods.iter().zip(sums).map(|(&m, s)| (m, s / n)).collect(),
    })
}
