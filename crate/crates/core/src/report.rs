//! Comparison table over evaluation reports: one row per model (fine-tuned,
//! each unlearning method, retrained) and an (MU, FTR) column pair per
//! federated algorithm.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::EvalReport;
use crate::server::Algorithm;

pub const ROW_ORDER: [&str; 6] = ["Finetune", "GradAscent", "GradDiff", "NPO", "SimNPO", "Retrain"];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub mu: Option<f64>,
    pub ftr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub method: String,
    /// Aligned with `ReportTable::algorithms`.
    pub cells: Vec<Option<Cell>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub algorithms: Vec<String>,
    pub rows: Vec<TableRow>,
}

fn rank_of(order: &[&str], name: &str) -> usize {
    order.iter().position(|o| *o == name).unwrap_or(order.len())
}

pub fn build_table(reports: &[EvalReport]) -> Result<ReportTable> {
    let alg_order: Vec<&str> = Algorithm::ALL.iter().map(|a| a.name()).collect();
    let mut algorithms: Vec<String> = Vec::new();
    let mut methods: Vec<String> = Vec::new();
    for r in reports {
        if !algorithms.contains(&r.label.algorithm) {
            algorithms.push(r.label.algorithm.clone());
        }
        if !methods.contains(&r.label.method) {
            methods.push(r.label.method.clone());
        }
    }
    algorithms.sort_by(|a, b| rank_of(&alg_order, a).cmp(&rank_of(&alg_order, b)).then(a.cmp(b)));
    methods.sort_by(|a, b| rank_of(&ROW_ORDER, a).cmp(&rank_of(&ROW_ORDER, b)).then(a.cmp(b)));

    let mut rows: Vec<TableRow> = methods
        .iter()
        .map(|m| TableRow {
            method: m.clone(),
            cells: vec![None; algorithms.len()],
        })
        .collect();
    for r in reports {
        let i = methods.iter().position(|m| *m == r.label.method).expect("collected");
        let j = algorithms.iter().position(|a| *a == r.label.algorithm).expect("collected");
        let cell = &mut rows[i].cells[j];
        if cell.is_some() {
            return Err(Error::Data(format!(
                "two reports for ({}, {})",
                r.label.algorithm, r.label.method
            )));
        }
        *cell = Some(Cell {
            mu: r.model_utility,
            ftr: r.forget_truth_ratio,
        });
    }
    Ok(ReportTable { algorithms, rows })
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into())
}

impl ReportTable {
    /// Fixed-width plain-text rendering.
    pub fn to_text(&self) -> String {
        let w0 = self
            .rows
            .iter()
            .map(|r| r.method.len())
            .chain(["Method".len()])
            .max()
            .unwrap_or(6);
        let cw = self.algorithms.iter().map(|a| a.len()).max().unwrap_or(0).max(15);
        let mut out = String::new();
        let _ = write!(out, "{:<w0$}", "Method");
        for a in &self.algorithms {
            let _ = write!(out, " | {a:^cw$}");
        }
        out.push('\n');
        let _ = write!(out, "{:<w0$}", "");
        for _ in &self.algorithms {
            let _ = write!(out, " | {:^cw$}", format!("{:>7} {:>7}", "MU", "FTR"));
        }
        out.push('\n');
        let _ = writeln!(out, "{}", "-".repeat(w0 + self.algorithms.len() * (cw + 3)));
        for row in &self.rows {
            let _ = write!(out, "{:<w0$}", row.method);
            for c in &row.cells {
                let (mu, ftr) = c.map(|c| (fmt_opt(c.mu), fmt_opt(c.ftr))).unwrap_or(("-".into(), "-".into()));
                let _ = write!(out, " | {:^cw$}", format!("{mu:>7} {ftr:>7}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn csv_opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// Long-format CSV, one line per report, for external plotting.
pub fn reports_to_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from(
        "algorithm,method,model_utility,forget_truth_ratio,forget_quality,forget_rouge,forget_probability,retain_rouge,retain_probability,no_verbatim_mem,no_knowledge_mem,utility_preserved\n",
    );
    for r in reports {
        let fields = [
            r.label.algorithm.clone(),
            r.label.method.clone(),
            csv_opt(r.model_utility),
            csv_opt(r.forget_truth_ratio),
            csv_opt(r.forget_quality.map(|k| k.p_value)),
            csv_opt(r.forget.map(|m| m.rouge)),
            csv_opt(r.forget.map(|m| m.probability)),
            csv_opt(r.retain.map(|m| m.rouge)),
            csv_opt(r.retain.map(|m| m.probability)),
            csv_opt(r.no_verbatim_mem),
            csv_opt(r.no_knowledge_mem),
            csv_opt(r.utility_preserved),
        ];
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}
