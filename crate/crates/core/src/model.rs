//! Reference language model: a frozen bigram logit matrix plus a trainable
//! low-rank adapter.
//!
//! The effective next-token logits for previous token `i` are
//!
//! ```text
//! z_i = W[i, :] + s * A[i, :] * B,     s = alpha / rank
//! ```
//!
//! where `W` is `V x V`, `A` is `V x r` and `B` is `r x V`. Probabilities are
//! a softmax over `z_i`. A question acts purely as context: only its final
//! token conditions the first answer token.
//!
//! Every quantity here is computed row by row; the full effective matrix is
//! only built by [`lora_materialize`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, dim_err, Error, Result};
use crate::params::FlatParams;

pub type TokenId = u32;

pub const BOS: TokenId = 0;
pub const EOS: TokenId = 1;
pub const PAD: TokenId = 2;

/// Smallest vocabulary accepted by [`Vocab::new`].
pub const MIN_VOCAB: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    size: usize,
}

impl Vocab {
    pub fn new(size: usize) -> Result<Self> {
        if size < MIN_VOCAB {
            return arg_err(format!("vocabulary size {size} below minimum {MIN_VOCAB}"));
        }
        Ok(Vocab { size })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn contains(&self, token: TokenId) -> bool {
        (token as usize) < self.size
    }

    /// First id available for non-reserved tokens.
    pub fn first_free(&self) -> TokenId {
        PAD + 1
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSeq(pub Vec<TokenId>);

impl TokenSeq {
    pub fn new(tokens: Vec<TokenId>) -> Self {
        TokenSeq(tokens)
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn last(&self) -> Option<TokenId> {
        self.0.last().copied()
    }

    pub fn concat(&self, other: &TokenSeq) -> TokenSeq {
        let mut v = self.0.clone();
        v.extend_from_slice(&other.0);
        TokenSeq(v)
    }
}

impl From<Vec<TokenId>> for TokenSeq {
    fn from(v: Vec<TokenId>) -> Self {
        TokenSeq(v)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaPair {
    pub question: TokenSeq,
    pub answer: TokenSeq,
    pub paraphrased_question: TokenSeq,
    pub wrong_answers: Vec<TokenSeq>,
}

impl QaPair {
    /// Checks the structural invariants of a pair against a vocabulary size.
    pub fn validate(&self, vocab: usize) -> Result<()> {
        if self.question.is_empty() || self.paraphrased_question.is_empty() {
            return Err(Error::Data("empty question".into()));
        }
        if self.answer.is_empty() {
            return Err(Error::Data("empty answer".into()));
        }
        for w in &self.wrong_answers {
            if w.is_empty() {
                return Err(Error::Data("empty wrong answer".into()));
            }
            if w == &self.answer {
                return Err(Error::Data("wrong answer equals the answer".into()));
            }
        }
        let all = [&self.question, &self.answer, &self.paraphrased_question]
            .into_iter()
            .chain(self.wrong_answers.iter());
        for seq in all {
            check_tokens(seq.tokens(), vocab)?;
        }
        Ok(())
    }
}

/// Frozen `V x V` logit matrix (row = previous token, column = next token).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseWeights {
    vocab: usize,
    data: Vec<f64>,
}

impl BaseWeights {
    pub fn new(vocab: usize, data: Vec<f64>) -> Result<Self> {
        if vocab == 0 {
            return arg_err("empty vocabulary");
        }
        if data.len() != vocab * vocab {
            return dim_err(format!(
                "base weights need {} entries, got {}",
                vocab * vocab,
                data.len()
            ));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return arg_err("base weights contain non-finite entries");
        }
        Ok(BaseWeights { vocab, data })
    }

    pub fn zeros(vocab: usize) -> Self {
        BaseWeights {
            vocab,
            data: vec![0.0; vocab * vocab],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let v = rows.len();
        if rows.iter().any(|r| r.len() != v) {
            return dim_err("base weights must be square");
        }
        Self::new(v, rows.concat())
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.vocab..(i + 1) * self.vocab]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.vocab + j]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.vocab).map(|r| r.to_vec()).collect()
    }
}

/// LoRA hyperparameters shared by every adapter of a run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    /// Recorded for fidelity; the reference model applies no dropout.
    pub dropout: f64,
    /// When false the adapter product is added unscaled (`s = 1`).
    pub scaling: bool,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 32,
            alpha: 64.0,
            dropout: 0.05,
            scaling: true,
        }
    }
}

/// Trainable low-rank factor pair `(A, B)` stored as one flat vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterParams {
    vocab: usize,
    rank: usize,
    alpha: f64,
    scaling: bool,
    params: FlatParams,
}

impl AdapterParams {
    pub fn zeros(vocab: usize, rank: usize, alpha: f64) -> Result<Self> {
        Self::from_flat(vocab, rank, alpha, true, FlatParams::zeros(2 * vocab * rank))
    }

    /// `A` is `vocab x rank` row-major, `B` is `rank x vocab` row-major.
    pub fn from_parts(vocab: usize, rank: usize, alpha: f64, a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        if a.len() != vocab * rank || b.len() != rank * vocab {
            return dim_err(format!(
                "adapter factors {}+{} do not match V={vocab}, r={rank}",
                a.len(),
                b.len()
            ));
        }
        let mut flat = a;
        flat.extend(b);
        Self::from_flat(vocab, rank, alpha, true, FlatParams(flat))
    }

    pub fn from_flat(vocab: usize, rank: usize, alpha: f64, scaling: bool, params: FlatParams) -> Result<Self> {
        if rank == 0 || rank > vocab {
            return arg_err(format!("rank {rank} must lie in [1, {vocab}]"));
        }
        if params.len() != 2 * vocab * rank {
            return dim_err(format!(
                "adapter needs {} parameters, got {}",
                2 * vocab * rank,
                params.len()
            ));
        }
        if !params.is_finite() {
            return arg_err("adapter contains non-finite entries");
        }
        Ok(AdapterParams {
            vocab,
            rank,
            alpha,
            scaling,
            params,
        })
    }

    /// `A ~ U(-0.01, 0.01)`, `B = 0`: the initial effective model is exactly the base.
    pub fn init_random<R: Rng>(vocab: usize, lora: &LoraConfig, rng: &mut R) -> Result<Self> {
        let n = vocab * lora.rank;
        let mut flat = Vec::with_capacity(2 * n);
        for _ in 0..n {
            flat.push(rng.random_range(-0.01..0.01));
        }
        flat.extend(std::iter::repeat_n(0.0, n));
        Self::from_flat(vocab, lora.rank, lora.alpha, lora.scaling, FlatParams(flat))
    }

    pub fn with_config(vocab: usize, lora: &LoraConfig, params: FlatParams) -> Result<Self> {
        Self::from_flat(vocab, lora.rank, lora.alpha, lora.scaling, params)
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn scaling(&self) -> bool {
        self.scaling
    }

    pub fn set_scaling(&mut self, on: bool) {
        self.scaling = on;
    }

    pub fn scale(&self) -> f64 {
        if self.scaling {
            self.alpha / self.rank as f64
        } else {
            1.0
        }
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn a(&self) -> &[f64] {
        &self.params[..self.vocab * self.rank]
    }

    pub fn b(&self) -> &[f64] {
        &self.params[self.vocab * self.rank..]
    }

    pub fn flat(&self) -> &FlatParams {
        &self.params
    }

    pub fn into_flat(self) -> FlatParams {
        self.params
    }

    /// Same geometry, new values.
    pub fn with_params(&self, params: FlatParams) -> Result<Self> {
        Self::from_flat(self.vocab, self.rank, self.alpha, self.scaling, params)
    }

    pub(crate) fn params_mut(&mut self) -> &mut FlatParams {
        &mut self.params
    }
}

pub(crate) fn check_tokens(tokens: &[TokenId], vocab: usize) -> Result<()> {
    if let Some(t) = tokens.iter().find(|&&t| t as usize >= vocab) {
        return arg_err(format!("token {t} outside vocabulary of size {vocab}"));
    }
    Ok(())
}

fn check_geometry(base: &BaseWeights, adapter: &AdapterParams) -> Result<()> {
    if base.vocab() != adapter.vocab() {
        return dim_err(format!(
            "base vocabulary {} vs adapter vocabulary {}",
            base.vocab(),
            adapter.vocab()
        ));
    }
    Ok(())
}

/// Returns `W + s * A * B` as a new matrix; the base is untouched.
pub fn lora_materialize(base: &BaseWeights, adapter: &AdapterParams) -> Result<BaseWeights> {
    check_geometry(base, adapter)?;
    let v = base.vocab();
    let mut data = Vec::with_capacity(v * v);
    let mut row = vec![0.0; v];
    for i in 0..v {
        row_logits(base, adapter, i, &mut row);
        data.extend_from_slice(&row);
    }
    BaseWeights::new(v, data)
}

/// Effective logits for previous token `prev`.
pub(crate) fn row_logits(base: &BaseWeights, adapter: &AdapterParams, prev: usize, out: &mut [f64]) {
    let v = base.vocab();
    let r = adapter.rank();
    out.copy_from_slice(base.row(prev));
    let s = adapter.scale();
    let a_row = &adapter.a()[prev * r..(prev + 1) * r];
    let b = adapter.b();
    for (k, &a) in a_row.iter().enumerate() {
        let c = s * a;
        if c == 0.0 {
            continue;
        }
        for (o, &bk) in out.iter_mut().zip(&b[k * v..(k + 1) * v]) {
            *o += c * bk;
        }
    }
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// In-place softmax; returns the log-normalizer.
fn softmax_in_place(z: &mut [f64]) -> f64 {
    let lse = log_sum_exp(z);
    for x in z.iter_mut() {
        *x = (*x - lse).exp();
    }
    lse
}

/// (previous token, next token) for each scored position of `target` given `context`.
fn transitions<'a>(context: &'a [TokenId], target: &'a [TokenId]) -> impl Iterator<Item = (usize, usize)> + 'a {
    let first_prev = context.last().copied();
    target.iter().enumerate().filter_map(move |(j, &next)| {
        let prev = if j == 0 { first_prev? } else { target[j - 1] };
        Some((prev as usize, next as usize))
    })
}

/// Reusable buffers for row-wise forward/backward passes.
pub(crate) struct Scratch {
    logits: Vec<f64>,
    proj: Vec<f64>,
}

impl Scratch {
    pub(crate) fn new(vocab: usize, rank: usize) -> Self {
        Scratch {
            logits: vec![0.0; vocab],
            proj: vec![0.0; rank],
        }
    }
}

fn check_scored(base: &BaseWeights, adapter: &AdapterParams, context: &TokenSeq, target: &TokenSeq) -> Result<()> {
    check_geometry(base, adapter)?;
    if target.is_empty() {
        return arg_err("empty target sequence");
    }
    if context.is_empty() {
        return arg_err("empty context sequence");
    }
    check_tokens(context.tokens(), base.vocab())?;
    check_tokens(target.tokens(), base.vocab())
}

/// `log P(target | context)` and, when `coef != 0`, adds `coef * grad log P`
/// into `grad` (same layout as the flat adapter).
pub(crate) fn log_prob_and_grad(
    base: &BaseWeights,
    adapter: &AdapterParams,
    context: &[TokenId],
    target: &[TokenId],
    coef: f64,
    grad: Option<&mut [f64]>,
    scratch: &mut Scratch,
) -> f64 {
    let v = base.vocab();
    let r = adapter.rank();
    let s = adapter.scale();
    let mut total = 0.0;
    let mut grad = grad;
    for (prev, next) in transitions(context, target) {
        row_logits(base, adapter, prev, &mut scratch.logits);
        let z_next = scratch.logits[next];
        let lse = softmax_in_place(&mut scratch.logits);
        total += z_next - lse;

        let Some(g) = grad.as_deref_mut() else { continue };
        if coef == 0.0 {
            continue;
        }
        // d log p / d z = onehot(next) - p
        let probs = &mut scratch.logits;
        for p in probs.iter_mut() {
            *p = -*p;
        }
        probs[next] += 1.0;

        let b = adapter.b();
        let a_row = &adapter.a()[prev * r..(prev + 1) * r];
        for k in 0..r {
            let brow = &b[k * v..(k + 1) * v];
            scratch.proj[k] = brow.iter().zip(probs.iter()).map(|(x, y)| x * y).sum();
        }
        let (ga, gb) = g.split_at_mut(v * r);
        for k in 0..r {
            ga[prev * r + k] += coef * s * scratch.proj[k];
        }
        for (k, &a) in a_row.iter().enumerate() {
            let c = coef * s * a;
            if c == 0.0 {
                continue;
            }
            for (gbj, &dz) in gb[k * v..(k + 1) * v].iter_mut().zip(probs.iter()) {
                *gbj += c * dz;
            }
        }
    }
    total
}

/// Total log-probability `sum_j log p(target_j | preceding token)`.
pub fn sequence_log_prob(base: &BaseWeights, adapter: &AdapterParams, context: &TokenSeq, target: &TokenSeq) -> Result<f64> {
    check_scored(base, adapter, context, target)?;
    let mut scratch = Scratch::new(base.vocab(), adapter.rank());
    Ok(log_prob_and_grad(
        base,
        adapter,
        context.tokens(),
        target.tokens(),
        0.0,
        None,
        &mut scratch,
    ))
}

fn check_batch(base: &BaseWeights, adapter: &AdapterParams, batch: &[&QaPair]) -> Result<()> {
    if batch.is_empty() {
        return arg_err("empty batch");
    }
    for pair in batch {
        check_scored(base, adapter, &pair.question, &pair.answer)?;
    }
    Ok(())
}

/// Mean over pairs of the summed answer-token negative log-likelihood.
pub fn nll_loss(base: &BaseWeights, adapter: &AdapterParams, batch: &[&QaPair]) -> Result<f64> {
    check_batch(base, adapter, batch)?;
    let mut scratch = Scratch::new(base.vocab(), adapter.rank());
    let total: f64 = batch
        .iter()
        .map(|p| -log_prob_and_grad(base, adapter, p.question.tokens(), p.answer.tokens(), 0.0, None, &mut scratch))
        .sum();
    Ok(total / batch.len() as f64)
}

/// Loss and analytic gradient of [`nll_loss`] with respect to the flat adapter.
pub fn nll_loss_and_gradient(base: &BaseWeights, adapter: &AdapterParams, batch: &[&QaPair]) -> Result<(f64, FlatParams)> {
    check_batch(base, adapter, batch)?;
    let mut scratch = Scratch::new(base.vocab(), adapter.rank());
    let mut grad = FlatParams::zeros(adapter.num_params());
    let coef = -1.0 / batch.len() as f64;
    let mut total = 0.0;
    for p in batch {
        total += log_prob_and_grad(
            base,
            adapter,
            p.question.tokens(),
            p.answer.tokens(),
            coef,
            Some(&mut grad),
            &mut scratch,
        );
    }
    Ok((-total / batch.len() as f64, grad))
}

pub fn nll_gradient(base: &BaseWeights, adapter: &AdapterParams, batch: &[&QaPair]) -> Result<FlatParams> {
    nll_loss_and_gradient(base, adapter, batch).map(|(_, g)| g)
}

/// Greedy decoding: appends the argmax token (lowest id on ties) until EOS or
/// `max_len` tokens. EOS is not included in the output.
pub fn generate_greedy(base: &BaseWeights, adapter: &AdapterParams, prompt: &TokenSeq, max_len: usize) -> Result<TokenSeq> {
    check_geometry(base, adapter)?;
    if prompt.is_empty() {
        return arg_err("empty prompt");
    }
    if max_len == 0 {
        return arg_err("max_len must be positive");
    }
    check_tokens(prompt.tokens(), base.vocab())?;
    let mut logits = vec![0.0; base.vocab()];
    let mut prev = prompt.last().expect("non-empty prompt") as usize;
    let mut out = Vec::with_capacity(max_len);
    while out.len() < max_len {
        row_logits(base, adapter, prev, &mut logits);
        let next = argmax_lowest(&logits);
        if next as TokenId == EOS {
            break;
        }
        out.push(next as TokenId);
        prev = next;
    }
    Ok(TokenSeq(out))
}

fn argmax_lowest(z: &[f64]) -> usize {
    let mut best = 0;
    for (j, &x) in z.iter().enumerate().skip(1) {
        if x > z[best] {
            best = j;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(q: Vec<TokenId>, a: Vec<TokenId>) -> QaPair {
        QaPair {
            question: q.clone().into(),
            answer: a.into(),
            paraphrased_question: q.into(),
            wrong_answers: vec![],
        }
    }

    #[test]
    fn zero_adapter_is_identity() {
        let base = BaseWeights::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap();
        let ad = AdapterParams::zeros(2, 1, 1.0).unwrap();
        assert_eq!(lora_materialize(&base, &ad).unwrap(), base);
    }

    #[test]
    fn rank_one_outer_product() {
        let base = BaseWeights::zeros(2);
        let ad = AdapterParams::from_parts(2, 1, 1.0, vec![1.0, 2.0], vec![3.0, 4.0]).unwrap();
        let m = lora_materialize(&base, &ad).unwrap();
        assert_eq!(m.to_rows(), vec![vec![3.0, 4.0], vec![6.0, 8.0]]);
    }

    #[test]
    fn alpha_doubles_contribution() {
        let base = BaseWeights::zeros(3);
        let a = vec![0.1, -0.2, 0.3];
        let b = vec![1.0, 2.0, -1.0];
        let one = AdapterParams::from_parts(3, 1, 1.0, a.clone(), b.clone()).unwrap();
        let two = AdapterParams::from_parts(3, 1, 2.0, a, b).unwrap();
        let m1 = lora_materialize(&base, &one).unwrap();
        let m2 = lora_materialize(&base, &two).unwrap();
        for (x, y) in m1.data().iter().zip(m2.data()) {
            assert_eq!(2.0 * x, *y);
        }
    }

    #[test]
    fn scaling_flag_disables_alpha() {
        let base = BaseWeights::zeros(2);
        let mut ad = AdapterParams::from_parts(2, 1, 5.0, vec![1.0, 2.0], vec![3.0, 4.0]).unwrap();
        ad.set_scaling(false);
        assert_eq!(lora_materialize(&base, &ad).unwrap().to_rows(), vec![vec![3.0, 4.0], vec![6.0, 8.0]]);
    }

    #[test]
    fn materialize_rejects_mismatch() {
        let base = BaseWeights::zeros(3);
        let ad = AdapterParams::zeros(2, 1, 1.0).unwrap();
        assert!(matches!(lora_materialize(&base, &ad), Err(Error::Dimension(_))));
    }

    #[test]
    fn uniform_loss_is_ln_v() {
        let base = BaseWeights::zeros(4);
        let ad = AdapterParams::zeros(4, 1, 1.0).unwrap();
        let p = pair(vec![3], vec![2]);
        let l = nll_loss(&base, &ad, &[&p]).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-15);
        let p2 = pair(vec![3], vec![2, 1]);
        let l2 = nll_loss(&base, &ad, &[&p2]).unwrap();
        assert!((l2 - 2.0 * 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn peaked_row_loss() {
        let mut rows = vec![vec![0.0; 4]; 4];
        rows[3][2] = 10.0;
        let base = BaseWeights::from_rows(&rows).unwrap();
        let ad = AdapterParams::zeros(4, 1, 1.0).unwrap();
        let l = nll_loss(&base, &ad, &[&pair(vec![3], vec![2])]).unwrap();
        let expected = -(10f64.exp() / (10f64.exp() + 3.0)).ln();
        assert!((l - expected).abs() < 1e-15);
        assert!((l - 1.3619e-4).abs() < 1e-7);
    }

    #[test]
    fn empty_batch_errors() {
        let base = BaseWeights::zeros(4);
        let ad = AdapterParams::zeros(4, 1, 1.0).unwrap();
        assert!(matches!(nll_loss(&base, &ad, &[]), Err(Error::Argument(_))));
        assert!(matches!(nll_gradient(&base, &ad, &[]), Err(Error::Argument(_))));
    }

    #[test]
    fn gradient_of_a_vanishes_when_b_is_zero() {
        let base = BaseWeights::zeros(4);
        let a = vec![0.3, -0.1, 0.2, 0.5];
        let ad = AdapterParams::from_parts(4, 1, 1.0, a, vec![0.0; 4]).unwrap();
        let g = nll_gradient(&base, &ad, &[&pair(vec![3], vec![2, 1])]).unwrap();
        assert!(g[..4].iter().all(|&x| x == 0.0));
        assert!(g[4..].iter().any(|&x| x != 0.0));
    }

    #[test]
    fn uniform_sequence_log_prob() {
        let base = BaseWeights::zeros(4);
        let ad = AdapterParams::zeros(4, 2, 2.0).unwrap();
        let lp = sequence_log_prob(&base, &ad, &vec![0].into(), &vec![1, 2, 3].into()).unwrap();
        assert!((lp + 3.0 * 4f64.ln()).abs() < 1e-14);
        assert!(sequence_log_prob(&base, &ad, &vec![0].into(), &TokenSeq::default()).is_err());
    }

    #[test]
    fn dominated_rows_give_near_certain_sequence() {
        let mut rows = vec![vec![0.0; 4]; 4];
        rows[0][3] = 20.0;
        rows[3][2] = 20.0;
        let base = BaseWeights::from_rows(&rows).unwrap();
        let ad = AdapterParams::zeros(4, 1, 1.0).unwrap();
        let lp = sequence_log_prob(&base, &ad, &vec![0].into(), &vec![3, 2].into()).unwrap();
        assert!(lp.abs() < 1e-7);
        let again = sequence_log_prob(&base, &ad, &vec![0].into(), &vec![3, 2].into()).unwrap();
        assert_eq!(lp.to_bits(), again.to_bits());
    }

    #[test]
    fn greedy_follows_memorized_chain() {
        let mut rows = vec![vec![0.0; 8]; 8];
        rows[5][6] = 9.0;
        rows[6][EOS as usize] = 9.0;
        let base = BaseWeights::from_rows(&rows).unwrap();
        let ad = AdapterParams::zeros(8, 2, 2.0).unwrap();
        let out = generate_greedy(&base, &ad, &vec![BOS, 5].into(), 10).unwrap();
        assert_eq!(out.tokens(), &[6]);
    }

    #[test]
    fn greedy_ties_pick_lowest_id() {
        let base = BaseWeights::zeros(5);
        let ad = AdapterParams::zeros(5, 1, 1.0).unwrap();
        let out = generate_greedy(&base, &ad, &vec![4].into(), 3).unwrap();
        assert_eq!(out.tokens(), &[0, 0, 0]);
        assert!(generate_greedy(&base, &ad, &vec![4].into(), 0).is_err());
        assert!(generate_greedy(&base, &ad, &TokenSeq::default(), 3).is_err());
    }

    #[test]
    fn vocab_minimum() {
        assert!(Vocab::new(7).is_err());
        assert_eq!(Vocab::new(8).unwrap().size(), 8);
    }

    #[test]
    fn adapter_rank_bounds() {
        assert!(AdapterParams::zeros(4, 0, 1.0).is_err());
        assert!(AdapterParams::zeros(4, 5, 1.0).is_err());
        assert_eq!(AdapterParams::zeros(4, 3, 1.0).unwrap().num_params(), 24);
    }

    #[test]
    fn out_of_vocab_token_rejected() {
        let base = BaseWeights::zeros(4);
        let ad = AdapterParams::zeros(4, 1, 1.0).unwrap();
        assert!(nll_loss(&base, &ad, &[&pair(vec![9], vec![1])]).is_err());
    }
}
