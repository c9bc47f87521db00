//! Deterministic synthetic world: public facts baked into the frozen base,
//! private per-client facts, paraphrases, wrong answers and forget flags.
//!
//! Every fact owns a unique query token, a unique paraphrase token and
//! `L` unique value tokens, so each bigram transition inside a fact is
//! unambiguous and the reference model can memorize it exactly. Wrong answers
//! reuse other facts' value sequences. Client facts are grouped into
//! contiguous "entities" and forgetting is assigned entity by entity.

use std::collections::{BTreeMap, HashSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::client::ClientShard;
use crate::error::{Error, Result};
use crate::eval::{EvalBundle, McItem};
use crate::model::{BaseWeights, QaPair, TokenId, TokenSeq, Vocab, BOS, MIN_VOCAB};
use crate::rng::{derive_seed, seeded_rng, stream};

pub const WORLD_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PartitionScheme {
    Uniform,
    Dirichlet { alpha: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    /// `None` sizes the vocabulary to exactly what the facts need.
    pub vocab_size: Option<usize>,
    pub num_clients: usize,
    pub facts_per_client: usize,
    pub answer_len_min: usize,
    pub answer_len_max: usize,
    pub num_wrong_answers: usize,
    pub world_facts_count: usize,
    pub real_authors_count: usize,
    pub forget_fraction: f64,
    pub entity_size: usize,
    pub partition: PartitionScheme,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            vocab_size: None,
            num_clients: 30,
            facts_per_client: 8,
            answer_len_min: 2,
            answer_len_max: 4,
            num_wrong_answers: 3,
            world_facts_count: 20,
            real_authors_count: 20,
            forget_fraction: 0.10,
            entity_size: 4,
            partition: PartitionScheme::Uniform,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_clients == 0 {
            return bad("num_clients must be >= 1".into());
        }
        if self.facts_per_client == 0 {
            return bad("facts_per_client must be >= 1".into());
        }
        if self.answer_len_min == 0 || self.answer_len_min > self.answer_len_max {
            return bad(format!(
                "answer length range [{}, {}] is invalid",
                self.answer_len_min, self.answer_len_max
            ));
        }
        if self.num_wrong_answers < 3 {
            return bad(format!("num_wrong_answers must be >= 3, got {}", self.num_wrong_answers));
        }
        for (name, n) in [("world_facts_count", self.world_facts_count), ("real_authors_count", self.real_authors_count)] {
            if n > 0 && n <= self.num_wrong_answers {
                return bad(format!("{name} must exceed num_wrong_answers ({})", self.num_wrong_answers));
            }
        }
        if self.num_clients * self.facts_per_client <= self.num_wrong_answers {
            return bad("too few client facts to draw wrong answers from".into());
        }
        if !(0.0..1.0).contains(&self.forget_fraction) {
            return bad(format!("forget_fraction must lie in [0, 1), got {}", self.forget_fraction));
        }
        if self.entity_size == 0 {
            return bad("entity_size must be >= 1".into());
        }
        if let PartitionScheme::Dirichlet { alpha } = self.partition {
            if !(alpha > 0.0) {
                return bad(format!("dirichlet alpha must be > 0, got {alpha}"));
            }
        }
        Ok(())
    }

    pub fn num_client_facts(&self) -> usize {
        self.num_clients * self.facts_per_client
    }

    pub fn num_entities(&self) -> usize {
        self.num_client_facts().div_ceil(self.entity_size)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldBundle {
    pub format_version: u32,
    pub config: WorldConfig,
    pub vocab: Vocab,
    pub base_pretrain_corpus: Vec<QaPair>,
    pub shards: Vec<ClientShard>,
    pub eval_bundle: EvalBundle,
}

impl WorldBundle {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let w: WorldBundle = serde_json::from_str(s)?;
        if w.format_version != WORLD_FORMAT_VERSION {
            return Err(Error::Incompatible(format!(
                "world format version {} (expected {WORLD_FORMAT_VERSION})",
                w.format_version
            )));
        }
        Ok(w)
    }

    /// All forget-flagged pairs, client by client.
    pub fn forget_pairs(&self) -> Vec<QaPair> {
        self.shards
            .iter()
            .flat_map(|s| s.forget_pairs().into_iter().cloned())
            .collect()
    }

    /// Clients holding at least one forget-flagged pair.
    pub fn forget_clients(&self) -> Vec<usize> {
        self.shards
            .iter()
            .filter(|s| s.forget_flags.iter().any(|&f| f))
            .map(|s| s.client_id)
            .collect()
    }
}

#[derive(Clone, Debug)]
struct Fact {
    query: TokenId,
    paraphrase: TokenId,
    values: Vec<TokenId>,
}

fn build_pairs<R: Rng>(facts: &[Fact], num_wrong: usize, rng: &mut R) -> Vec<QaPair> {
    let ids: Vec<usize> = (0..facts.len()).collect();
    facts
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let others: Vec<usize> = ids.iter().copied().filter(|&j| j != i).collect();
            let wrong = others
                .choose_multiple(rng, num_wrong)
                .map(|&j| TokenSeq::from(facts[j].values.clone()))
                .collect();
            QaPair {
                question: vec![BOS, f.query].into(),
                answer: f.values.clone().into(),
                paraphrased_question: vec![BOS, f.paraphrase].into(),
                wrong_answers: wrong,
            }
        })
        .collect()
}

/// Splits `num_entities` entities across `k` clients. Every client gets at
/// least one entity; shards are entity-disjoint and listed in ascending
/// entity order.
pub fn partition_clients(num_entities: usize, k: usize, scheme: PartitionScheme, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k == 0 {
        return Err(Error::Config("need at least one client".into()));
    }
    if k > num_entities {
        return Err(Error::Config(format!(
            "{k} clients but only {num_entities} entities to distribute"
        )));
    }
    let mut rng = seeded_rng(derive_seed(seed, &[stream::PARTITION]));
    let counts: Vec<usize> = match scheme {
        PartitionScheme::Uniform => (0..k)
            .map(|c| num_entities / k + usize::from(c < num_entities % k))
            .collect(),
        PartitionScheme::Dirichlet { alpha } => {
            let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::Config(format!("dirichlet alpha: {e}")))?;
            let draws: Vec<f64> = (0..k).map(|_| gamma.sample(&mut rng)).collect();
            let total: f64 = draws.iter().sum();
            let spare = num_entities - k;
            let raw: Vec<f64> = draws.iter().map(|d| d / total * spare as f64).collect();
            let mut counts: Vec<usize> = raw.iter().map(|x| 1 + x.floor() as usize).collect();
            let mut left = num_entities - counts.iter().sum::<usize>();
            let mut order: Vec<usize> = (0..k).collect();
            order.sort_by(|&a, &b| {
                let fa = raw[a] - raw[a].floor();
                let fb = raw[b] - raw[b].floor();
                fb.total_cmp(&fa).then(a.cmp(&b))
            });
            for &c in order.iter().cycle() {
                if left == 0 {
                    break;
                }
                counts[c] += 1;
                left -= 1;
            }
            counts
        }
    };
    let mut entities: Vec<usize> = (0..num_entities).collect();
    entities.shuffle(&mut rng);
    let mut out = Vec::with_capacity(k);
    let mut start = 0;
    for c in counts {
        let mut chunk = entities[start..start + c].to_vec();
        chunk.sort_unstable();
        out.push(chunk);
        start += c;
    }
    Ok(out)
}

pub fn generate_world(cfg: &WorldConfig) -> Result<WorldBundle> {
    cfg.validate()?;
    let mut rng = seeded_rng(derive_seed(cfg.seed, &[stream::WORLD]));
    let n_public = cfg.world_facts_count + cfg.real_authors_count;
    let n_client = cfg.num_client_facts();
    let lengths: Vec<usize> = (0..n_public + n_client)
        .map(|_| rng.random_range(cfg.answer_len_min..=cfg.answer_len_max))
        .collect();
    let first_free = 3usize;
    let required = (first_free + lengths.iter().map(|l| l + 2).sum::<usize>()).max(MIN_VOCAB);
    let vocab_size = cfg.vocab_size.unwrap_or(required);
    if vocab_size < required {
        return Err(Error::Config(format!(
            "vocab_size {vocab_size} is too small: this world needs at least V = {required}"
        )));
    }
    let vocab = Vocab::new(vocab_size)?;

    let mut next = first_free as TokenId;
    let mut take = || {
        let t = next;
        next += 1;
        t
    };
    let facts: Vec<Fact> = lengths
        .iter()
        .map(|&len| Fact {
            query: take(),
            paraphrase: take(),
            values: (0..len).map(|_| take()).collect(),
        })
        .collect();
    let (world_facts, rest) = facts.split_at(cfg.world_facts_count);
    let (real_authors, client_facts) = rest.split_at(cfg.real_authors_count);

    let world_pairs = build_pairs(world_facts, cfg.num_wrong_answers, &mut rng);
    let author_pairs = build_pairs(real_authors, cfg.num_wrong_answers, &mut rng);
    let client_pairs = build_pairs(client_facts, cfg.num_wrong_answers, &mut rng);

    // Public knowledge is seen under both phrasings during pretraining.
    let mut corpus = Vec::with_capacity(2 * n_public);
    for p in world_pairs.iter().chain(&author_pairs) {
        corpus.push(p.clone());
        corpus.push(QaPair {
            question: p.paraphrased_question.clone(),
            ..p.clone()
        });
    }

    let entity_of = |fact: usize| fact / cfg.entity_size;
    let n_entities = cfg.num_entities();
    let mut entity_facts: Vec<Vec<usize>> = vec![Vec::new(); n_entities];
    for f in 0..n_client {
        entity_facts[entity_of(f)].push(f);
    }
    let assignment = partition_clients(n_entities, cfg.num_clients, cfg.partition, cfg.seed)?;
    let client_fact_lists: Vec<Vec<usize>> = assignment
        .iter()
        .map(|ents| ents.iter().flat_map(|&e| entity_facts[e].iter().copied()).collect())
        .collect();

    // Forget designation: walk clients in a seeded order, flagging whole
    // entities until the quota is met; each client keeps at least one pair.
    let quota = (cfg.forget_fraction * n_client as f64).round() as usize;
    let mut forget: HashSet<usize> = HashSet::new();
    let mut frng = seeded_rng(derive_seed(cfg.seed, &[stream::FORGET]));
    let mut client_order: Vec<usize> = (0..cfg.num_clients).collect();
    client_order.shuffle(&mut frng);
    'outer: for &c in &client_order {
        let mut ents = assignment[c].clone();
        ents.shuffle(&mut frng);
        let cap = client_fact_lists[c].len().saturating_sub(1);
        let mut flagged_here = 0;
        for e in ents {
            for &f in &entity_facts[e] {
                if forget.len() == quota {
                    break 'outer;
                }
                if flagged_here == cap {
                    continue 'outer;
                }
                forget.insert(f);
                flagged_here += 1;
            }
        }
    }

    let shards = client_fact_lists
        .iter()
        .enumerate()
        .map(|(c, facts)| {
            ClientShard::new(
                c,
                facts.iter().map(|&f| client_pairs[f].clone()).collect(),
                facts.iter().map(|f| forget.contains(f)).collect(),
            )
        })
        .collect::<Result<Vec<_>>>()?;

    let mut eval_bundle = EvalBundle {
        real_authors: author_pairs.into_iter().map(McItem::from_pair).collect(),
        world_facts: world_pairs.into_iter().map(McItem::from_pair).collect(),
        ..Default::default()
    };
    for s in &shards {
        for (p, &f) in s.pairs.iter().zip(&s.forget_flags) {
            if f {
                eval_bundle.forget.push(p.clone());
            } else {
                eval_bundle.retain.push(p.clone());
            }
        }
    }

    Ok(WorldBundle {
        format_version: WORLD_FORMAT_VERSION,
        config: cfg.clone(),
        vocab,
        base_pretrain_corpus: corpus,
        shards,
        eval_bundle,
    })
}

/// Structural audit of a generated world.
pub fn audit_world(world: &WorldBundle) -> Result<()> {
    let v = world.vocab.size();
    let fail = |m: String| Err(Error::Data(m));
    let mut queries: BTreeMap<TokenId, usize> = BTreeMap::new();
    let shard_pairs = world.shards.iter().flat_map(|s| s.pairs.iter());
    let public = world
        .eval_bundle
        .real_authors
        .iter()
        .chain(&world.eval_bundle.world_facts)
        .map(|m| &m.pair);
    for p in shard_pairs.clone().chain(public.clone()) {
        p.validate(v)?;
        for q in [&p.question, &p.paraphrased_question] {
            *queries.entry(q.last().expect("validated")).or_default() += 1;
        }
    }
    if let Some((t, n)) = queries.iter().find(|(_, &n)| n != 1) {
        return fail(format!("query token {t} used by {n} facts"));
    }
    let public_queries: HashSet<TokenId> = public.map(|p| p.question.last().expect("validated")).collect();
    if shard_pairs.clone().any(|p| public_queries.contains(&p.question.last().unwrap())) {
        return fail("a public fact leaked into a client shard".into());
    }
    let forget: Vec<&QaPair> = world.shards.iter().flat_map(|s| s.forget_pairs()).collect();
    let retain: Vec<&QaPair> = world.shards.iter().flat_map(|s| s.retain_pairs()).collect();
    if forget.len() != world.eval_bundle.forget.len()
        || forget.iter().zip(&world.eval_bundle.forget).any(|(a, b)| *a != b)
    {
        return fail("eval forget split disagrees with shard flags".into());
    }
    if retain.len() != world.eval_bundle.retain.len()
        || retain.iter().zip(&world.eval_bundle.retain).any(|(a, b)| *a != b)
    {
        return fail("eval retain split disagrees with shard flags".into());
    }
    let retain_values: HashSet<TokenId> = retain.iter().flat_map(|p| p.answer.tokens().iter().copied()).collect();
    if forget.iter().any(|p| p.answer.tokens().iter().any(|t| retain_values.contains(t))) {
        return fail("forget values overlap retain values".into());
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    /// Step size on the summed (not averaged) corpus loss.
    pub learning_rate: f64,
    pub max_iters: usize,
    pub target_nll: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            learning_rate: 2.0,
            max_iters: 5000,
            target_nll: 0.05,
        }
    }
}

/// Mean NLL above which an exhausted pretraining run is reported as failed.
pub const PRETRAIN_FAIL_NLL: f64 = 0.5;

/// Fits the full `V x V` base matrix by full-batch gradient descent on the
/// corpus NLL until it drops below `target_nll` or `max_iters` is reached.
pub fn pretrain_base(corpus: &[QaPair], vocab: usize, cfg: &PretrainConfig) -> Result<BaseWeights> {
    if corpus.is_empty() {
        return Err(Error::Argument("empty pretraining corpus".into()));
    }
    // Rows are independent: gather target counts per previous token.
    let mut rows: BTreeMap<usize, BTreeMap<usize, f64>> = BTreeMap::new();
    for p in corpus {
        p.validate(vocab)?;
        let mut prev = p.question.last().expect("validated") as usize;
        for &t in p.answer.tokens() {
            *rows.entry(prev).or_default().entry(t as usize).or_default() += 1.0;
            prev = t as usize;
        }
    }
    let n = corpus.len() as f64;
    let mut w = BaseWeights::zeros(vocab);
    let mut probs = vec![0.0; vocab];
    let mut nll = f64::INFINITY;
    for _ in 0..=cfg.max_iters {
        let mut total = 0.0;
        let mut grads: Vec<(usize, Vec<f64>)> = Vec::with_capacity(rows.len());
        for (&prev, targets) in &rows {
            probs.copy_from_slice(w.row(prev));
            let m = probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + probs.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            let count: f64 = targets.values().sum();
            let mut g: Vec<f64> = probs.iter().map(|z| count * (z - lse).exp()).collect();
            for (&t, &c) in targets {
                total += c * (lse - w.get(prev, t));
                g[t] -= c;
            }
            grads.push((prev, g));
        }
        nll = total / n;
        if nll < cfg.target_nll {
            return Ok(w);
        }
        let data = w.data_mut();
        for (prev, g) in grads {
            for (x, gj) in data[prev * vocab..(prev + 1) * vocab].iter_mut().zip(g) {
                *x -= cfg.learning_rate * gj;
            }
        }
    }
    if nll >= PRETRAIN_FAIL_NLL {
        return Err(Error::Pretrain(format!(
            "mean NLL {nll:.4} after {} iterations",
            cfg.max_iters
        )));
    }
    Ok(w)
}
