//! Memorization, privacy and utility metrics, and the report assembler.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{arg_err, Result};
use crate::model::{generate_greedy, sequence_log_prob, AdapterParams, BaseWeights, QaPair, TokenSeq};

/// Floor applied to each utility component before the harmonic mean.
pub const METRIC_FLOOR: f64 = 1e-12;

/// A QA pair offered as a multiple-choice question; `choices[0]` is correct.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McItem {
    pub pair: QaPair,
    pub choices: Vec<TokenSeq>,
}

impl McItem {
    /// Choices are the correct answer followed by the wrong answers.
    pub fn from_pair(pair: QaPair) -> Self {
        let mut choices = vec![pair.answer.clone()];
        choices.extend(pair.wrong_answers.iter().cloned());
        McItem { pair, choices }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalBundle {
    pub forget: Vec<QaPair>,
    pub retain: Vec<QaPair>,
    pub real_authors: Vec<McItem>,
    pub world_facts: Vec<McItem>,
}

/// `P(target | context)^(1/|target|)`.
pub fn normalized_probability(base: &BaseWeights, adapter: &AdapterParams, context: &TokenSeq, target: &TokenSeq) -> Result<f64> {
    Ok(normalized_log_prob(base, adapter, context, target)?.exp())
}

fn normalized_log_prob(base: &BaseWeights, adapter: &AdapterParams, context: &TokenSeq, target: &TokenSeq) -> Result<f64> {
    let lp = sequence_log_prob(base, adapter, context, target)?;
    Ok(lp / target.len() as f64)
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn answer_probability(base: &BaseWeights, adapter: &AdapterParams, pair: &QaPair) -> Result<f64> {
    normalized_probability(base, adapter, &pair.question, &pair.answer)
}

/// Length-normalized probability of `choices[0]` relative to all choices.
pub fn mc_probability(base: &BaseWeights, adapter: &AdapterParams, question: &TokenSeq, choices: &[TokenSeq]) -> Result<f64> {
    if choices.len() < 2 {
        return arg_err(format!("need at least 2 choices, got {}", choices.len()));
    }
    // Ratios are formed in log space so tiny probabilities cannot give 0/0.
    let logs = choices
        .iter()
        .map(|c| normalized_log_prob(base, adapter, question, c))
        .collect::<Result<Vec<_>>>()?;
    Ok((logs[0] - log_sum_exp(&logs)).exp())
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `LCS(reference, candidate) / |reference|`.
pub fn rouge_l_recall(reference: &TokenSeq, candidate: &TokenSeq) -> Result<f64> {
    if reference.is_empty() {
        return arg_err("empty reference");
    }
    Ok(lcs_len(reference.tokens(), candidate.tokens()) as f64 / reference.len() as f64)
}

/// Greedy answer to `prompt` (at most `|reference|` tokens) scored against `reference`.
pub fn generation_rouge(base: &BaseWeights, adapter: &AdapterParams, prompt: &TokenSeq, reference: &TokenSeq) -> Result<f64> {
    if reference.is_empty() {
        return arg_err("empty reference");
    }
    let generated = generate_greedy(base, adapter, prompt, reference.len())?;
    rouge_l_recall(reference, &generated)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthRatio {
    pub raw: f64,
    /// `max(0, 1 - R)`, higher means the correct answer is preferred.
    pub adjusted: f64,
    /// `max(0, 1 - 1/R)`, higher means the correct answer lost its edge.
    pub forget_score: f64,
}

impl TruthRatio {
    pub fn from_raw(raw: f64) -> Self {
        TruthRatio {
            raw,
            adjusted: (1.0 - raw).max(0.0),
            forget_score: (1.0 - 1.0 / raw).max(0.0),
        }
    }
}

/// Mean normalized wrong-answer probability given the question, over the
/// normalized correct-answer probability given the paraphrased question.
pub fn truth_ratio(base: &BaseWeights, adapter: &AdapterParams, pair: &QaPair) -> Result<TruthRatio> {
    if pair.wrong_answers.is_empty() {
        return arg_err("truth ratio needs at least one wrong answer");
    }
    if pair.paraphrased_question.is_empty() {
        return arg_err("truth ratio needs a paraphrased question");
    }
    let wrong = pair
        .wrong_answers
        .iter()
        .map(|w| normalized_log_prob(base, adapter, &pair.question, w))
        .collect::<Result<Vec<_>>>()?;
    let log_wrong = log_sum_exp(&wrong) - (wrong.len() as f64).ln();
    let log_right = normalized_log_prob(base, adapter, &pair.paraphrased_question, &pair.answer)?;
    Ok(TruthRatio::from_raw((log_wrong - log_right).exp()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Two-sample Kolmogorov–Smirnov statistic with the asymptotic p-value
/// `min(1, 2 exp(-2 D^2 nm / (n + m)))`.
pub fn ks_two_sample(sample_u: &[f64], sample_r: &[f64]) -> Result<KsResult> {
    if sample_u.is_empty() || sample_r.is_empty() {
        return arg_err("KS test needs two non-empty samples");
    }
    if sample_u.iter().chain(sample_r).any(|x| x.is_nan()) {
        return arg_err("KS samples contain NaN");
    }
    let mut u = sample_u.to_vec();
    let mut r = sample_r.to_vec();
    u.sort_by(f64::total_cmp);
    r.sort_by(f64::total_cmp);
    let (n, m) = (u.len(), r.len());
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < n && j < m {
        let x = if u[i] <= r[j] { u[i] } else { r[j] };
        while i < n && u[i] <= x {
            i += 1;
        }
        while j < m && r[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    // One sample exhausted: the remaining gap is attained at its last point.
    d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    Ok(KsResult {
        statistic: d,
        p_value: ks_p_value(d, n, m),
    })
}

pub fn ks_p_value(d: f64, n: usize, m: usize) -> f64 {
    let (n, m) = (n as f64, m as f64);
    (2.0 * (-2.0 * d * d * n * m / (n + m)).exp()).clamp(0.0, 1.0)
}

/// Harmonic mean of exactly nine components, each clamped to `[1e-12, 1]`.
pub fn model_utility(components: &[f64]) -> Result<f64> {
    if components.len() != 9 {
        return arg_err(format!("model utility needs 9 components, got {}", components.len()));
    }
    if components.iter().any(|x| x.is_nan()) {
        return arg_err("NaN utility component");
    }
    let inv: f64 = components
        .iter()
        .map(|&x| 1.0 / x.clamp(METRIC_FLOOR, 1.0))
        .sum();
    Ok(9.0 / inv)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub count: usize,
    pub probability: f64,
    pub rouge: f64,
    pub truth_ratio: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportLabel {
    pub algorithm: String,
    pub method: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: ReportLabel,
    pub model_checksum: String,
    pub forget: Option<SplitMetrics>,
    pub retain: Option<SplitMetrics>,
    pub real_authors: Option<SplitMetrics>,
    pub world_facts: Option<SplitMetrics>,
    /// Order: (probability, rouge, truth ratio) for retain, real authors, world facts.
    pub utility_components: Option<Vec<f64>>,
    pub model_utility: Option<f64>,
    pub forget_truth_ratio: Option<f64>,
    pub forget_quality: Option<KsResult>,
    pub forget_probability: Option<f64>,
    pub no_verbatim_mem: Option<f64>,
    pub no_knowledge_mem: Option<f64>,
    pub utility_preserved: Option<f64>,
    pub warnings: Vec<String>,
}

/// Hex SHA-256 over the little-endian adapter parameters.
pub fn adapter_checksum(adapter: &AdapterParams) -> String {
    let digest = Sha256::digest(adapter.flat().to_le_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Mean over `items` of `f`, summed in input order.
fn mean_of<T>(items: &[T], mut f: impl FnMut(&T) -> Result<f64>) -> Result<f64> {
    let vals = items.iter().map(&mut f).collect::<Result<Vec<_>>>()?;
    Ok(mean(&vals))
}

fn qa_split(base: &BaseWeights, adapter: &AdapterParams, pairs: &[QaPair], forget: bool) -> Result<SplitMetrics> {
    Ok(SplitMetrics {
        count: pairs.len(),
        probability: mean_of(pairs, |p| answer_probability(base, adapter, p))?,
        rouge: mean_of(pairs, |p| generation_rouge(base, adapter, &p.question, &p.answer))?,
        truth_ratio: mean_of(pairs, |p| {
            let tr = truth_ratio(base, adapter, p)?;
            Ok(if forget { tr.forget_score } else { tr.adjusted })
        })?,
    })
}

fn mc_split(base: &BaseWeights, adapter: &AdapterParams, items: &[McItem]) -> Result<SplitMetrics> {
    Ok(SplitMetrics {
        count: items.len(),
        probability: mean_of(items, |it| mc_probability(base, adapter, &it.pair.question, &it.choices))?,
        rouge: mean_of(items, |it| generation_rouge(base, adapter, &it.pair.question, &it.pair.answer))?,
        truth_ratio: mean_of(items, |it| Ok(truth_ratio(base, adapter, &it.pair)?.adjusted))?,
    })
}

/// Raw truth ratios over a list of pairs, in input order.
pub fn raw_truth_ratios(base: &BaseWeights, adapter: &AdapterParams, pairs: &[QaPair]) -> Result<Vec<f64>> {
    pairs.iter().map(|p| Ok(truth_ratio(base, adapter, p)?.raw)).collect()
}

/// Continuation of the first half of each answer scored against the second
/// half. Answers shorter than two tokens are skipped.
pub fn verbatim_rouge(base: &BaseWeights, adapter: &AdapterParams, pairs: &[QaPair]) -> Result<Option<f64>> {
    let mut scores = Vec::new();
    for p in pairs {
        let a = p.answer.tokens();
        if a.len() < 2 {
            continue;
        }
        let half = a.len() / 2;
        let prompt = p.question.concat(&TokenSeq::from(a[..half].to_vec()));
        let rest = TokenSeq::from(a[half..].to_vec());
        scores.push(generation_rouge(base, adapter, &prompt, &rest)?);
    }
    Ok((!scores.is_empty()).then(|| mean(&scores)))
}

pub fn evaluate(
    base: &BaseWeights,
    adapter: &AdapterParams,
    retrain: Option<&AdapterParams>,
    bundle: &EvalBundle,
) -> Result<EvalReport> {
    let mut report = EvalReport {
        model_checksum: adapter_checksum(adapter),
        ..Default::default()
    };
    let skip = |name: &str, warnings: &mut Vec<String>| warnings.push(format!("split `{name}` is empty; skipped"));

    if bundle.forget.is_empty() {
        skip("forget", &mut report.warnings);
    } else {
        let m = qa_split(base, adapter, &bundle.forget, true)?;
        report.forget_truth_ratio = Some(m.truth_ratio);
        report.forget_probability = Some(m.probability);
        report.no_knowledge_mem = Some(m.rouge);
        report.forget = Some(m);
        report.no_verbatim_mem = verbatim_rouge(base, adapter, &bundle.forget)?;
        if report.no_verbatim_mem.is_none() {
            report.warnings.push("no forget answer long enough for verbatim scoring".into());
        }
        if let Some(rt) = retrain {
            let u = raw_truth_ratios(base, adapter, &bundle.forget)?;
            let r = raw_truth_ratios(base, rt, &bundle.forget)?;
            report.forget_quality = Some(ks_two_sample(&u, &r)?);
        }
    }
    if bundle.retain.is_empty() {
        skip("retain", &mut report.warnings);
    } else {
        let m = qa_split(base, adapter, &bundle.retain, false)?;
        report.utility_preserved = Some(m.rouge);
        report.retain = Some(m);
    }
    if bundle.real_authors.is_empty() {
        skip("real_authors", &mut report.warnings);
    } else {
        report.real_authors = Some(mc_split(base, adapter, &bundle.real_authors)?);
    }
    if bundle.world_facts.is_empty() {
        skip("world_facts", &mut report.warnings);
    } else {
        report.world_facts = Some(mc_split(base, adapter, &bundle.world_facts)?);
    }
    if let (Some(r), Some(a), Some(w)) = (&report.retain, &report.real_authors, &report.world_facts) {
        let comps = vec![
            r.probability,
            r.rouge,
            r.truth_ratio,
            a.probability,
            a.rouge,
            a.truth_ratio,
            w.probability,
            w.rouge,
            w.truth_ratio,
        ];
        report.model_utility = Some(model_utility(&comps)?);
        report.utility_components = Some(comps);
    } else {
        report.warnings.push("model utility unavailable: a utility split is missing".into());
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(v: &[u32]) -> TokenSeq {
        TokenSeq::from(v.to_vec())
    }

    #[test]
    fn uniform_answer_probability() {
        let base = BaseWeights::zeros(4);
        let ad = AdapterParams::zeros(4, 1, 1.0).unwrap();
        for len in 1..4 {
            let p = QaPair {
                question: seq(&[0, 3]),
                answer: seq(&vec![2; len]),
                paraphrased_question: seq(&[3]),
                wrong_answers: vec![],
            };
            assert!((answer_probability(&base, &ad, &p).unwrap() - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn normalized_probability_takes_root() {
        // Row 3 puts 0.5 on token 2, row 2 puts 0.5 on token 1: P = 0.25 over two tokens.
        let v = 4;
        let mut rows = vec![vec![0.0; v]; v];
        let peak = (3.0f64).ln(); // e^peak / (e^peak + 3) = 0.5
        rows[3][2] = peak;
        rows[2][1] = peak;
        let base = BaseWeights::from_rows(&rows).unwrap();
        let ad = AdapterParams::zeros(v, 1, 1.0).unwrap();
        let p = normalized_probability(&base, &ad, &seq(&[3]), &seq(&[2, 1])).unwrap();
        assert!((p - 0.5).abs() < 1e-15);
    }

    #[test]
    fn mc_probability_examples() {
        let base = BaseWeights::zeros(6);
        let ad = AdapterParams::zeros(6, 1, 1.0).unwrap();
        let choices = vec![seq(&[1]), seq(&[2]), seq(&[3])];
        assert!((mc_probability(&base, &ad, &seq(&[5]), &choices).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(mc_probability(&base, &ad, &seq(&[5]), &choices[..1]).is_err());

        // Correct choice with twice the probability of each of three others.
        let mut rows = vec![vec![0.0; 6]; 6];
        rows[5][1] = 2f64.ln();
        let base = BaseWeights::from_rows(&rows).unwrap();
        let choices = vec![seq(&[1]), seq(&[2]), seq(&[3]), seq(&[4])];
        assert!((mc_probability(&base, &ad, &seq(&[5]), &choices).unwrap() - 0.4).abs() < 1e-15);
    }

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge_l_recall(&seq(&[1, 2, 3]), &seq(&[1, 2, 3])).unwrap(), 1.0);
        assert_eq!(rouge_l_recall(&seq(&[1, 2]), &seq(&[3, 4, 5])).unwrap(), 0.0);
        assert_eq!(rouge_l_recall(&seq(&[1, 2, 3, 4]), &seq(&[1, 9, 3])).unwrap(), 0.5);
        assert!(rouge_l_recall(&seq(&[]), &seq(&[1])).is_err());
    }

    #[test]
    fn truth_ratio_mapping() {
        let eq = TruthRatio::from_raw(1.0);
        assert_eq!((eq.adjusted, eq.forget_score), (0.0, 0.0));
        let strong = TruthRatio::from_raw(0.2);
        assert!((strong.adjusted - 0.8).abs() < 1e-15);
        assert_eq!(strong.forget_score, 0.0);
        let weak = TruthRatio::from_raw(4.0);
        assert_eq!(weak.adjusted, 0.0);
        assert_eq!(weak.forget_score, 0.75);
    }

    #[test]
    fn truth_ratio_uniform_model_is_one() {
        let base = BaseWeights::zeros(8);
        let ad = AdapterParams::zeros(8, 1, 1.0).unwrap();
        let p = QaPair {
            question: seq(&[0, 3]),
            answer: seq(&[4, 5]),
            paraphrased_question: seq(&[0, 6]),
            wrong_answers: vec![seq(&[7]), seq(&[5, 4, 7])],
        };
        let tr = truth_ratio(&base, &ad, &p).unwrap();
        assert!((tr.raw - 1.0).abs() < 1e-12);
        let mut bad = p.clone();
        bad.wrong_answers.clear();
        assert!(truth_ratio(&base, &ad, &bad).is_err());
    }

    #[test]
    fn ks_examples() {
        let same = ks_two_sample(&[0.3, 0.1, 0.2], &[0.2, 0.3, 0.1]).unwrap();
        assert_eq!(same.statistic, 0.0);
        assert_eq!(same.p_value, 1.0);
        let apart = ks_two_sample(&[0.1, 0.2], &[0.5, 0.6, 0.7]).unwrap();
        assert_eq!(apart.statistic, 1.0);
        assert!(ks_two_sample(&[], &[1.0]).is_err());
    }

    #[test]
    fn ks_hand_case() {
        // Pooled points 0.1,0.2,0.3,0.4,0.9:
        // F_U = 1/2,1/2,1/2,1,1 ; F_R = 0,1/3,2/3,2/3,1 -> D = 1/2 at 0.1.
        let r = ks_two_sample(&[0.1, 0.4], &[0.2, 0.3, 0.9]).unwrap();
        assert!((r.statistic - 0.5).abs() < 1e-15);
        let expected = (2.0 * (-2.0 * 0.25 * 6.0 / 5.0f64).exp()).min(1.0);
        assert!((r.p_value - expected).abs() < 1e-15);
    }

    #[test]
    fn utility_examples() {
        assert_eq!(model_utility(&[1.0; 9]).unwrap(), 1.0);
        assert!((model_utility(&[0.5; 9]).unwrap() - 0.5).abs() < 1e-15);
        let mut c = [1.0; 9];
        c[4] = 1e-12;
        let mu = model_utility(&c).unwrap();
        assert!((mu - 9.0 / (8.0 + 1e12)).abs() < 1e-24);
        assert!((mu - 9e-12).abs() < 1e-21);
        c[4] = 0.0;
        assert_eq!(model_utility(&c).unwrap(), mu);
        assert!(model_utility(&[1.0; 8]).is_err());
    }

    #[test]
    fn empty_split_is_skipped_with_warning() {
        let base = BaseWeights::zeros(8);
        let ad = AdapterParams::zeros(8, 1, 1.0).unwrap();
        let p = QaPair {
            question: seq(&[0, 3]),
            answer: seq(&[4, 5]),
            paraphrased_question: seq(&[0, 6]),
            wrong_answers: vec![seq(&[7])],
        };
        let bundle = EvalBundle {
            forget: vec![],
            retain: vec![p.clone()],
            real_authors: vec![],
            world_facts: vec![McItem::from_pair(p)],
        };
        let r = evaluate(&base, &ad, None, &bundle).unwrap();
        assert!(r.forget.is_none());
        assert!(r.model_utility.is_none());
        assert!(r.warnings.len() >= 2);
    }
}
