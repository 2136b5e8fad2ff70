//! Filtered ranking evaluation.
//!
//! Each test triplet `(h, r, t)` yields the queries `(h, r, ?)` and
//! `(t, r⁻¹, ?)`. Answers are ranked by predictor probability among the
//! candidates reached by the query's rules; entities with zero probability
//! share the remaining positions and receive the expected rank of that block.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::{self, Write as _};

use rayon::prelude::*;

use crate::em::{fit_predictor, group_by_relation};
use crate::error::{Error, Result};
use crate::generator::GeneratorModel;
use crate::grounding::{ground_rule_set, GroundingConfig};
use crate::kg::{augment_inverse, Dataset, EntityId, GraphView, RelationId, Triplet, Vocabularies};
use crate::predictor::{PathMode, Predictor, PredictorConfig, Query};
use crate::rule::RuleMultiset;

/// Rank of `answer` among `n` entities, given probabilities over the
/// candidate set and the other known answers to filter out.
///
/// Entities missing from `probs` have probability zero.
pub fn rank_answer(probs: &[(EntityId, f64)], answer: EntityId, filter: &HashSet<EntityId>, n: usize) -> Result<f64> {
    if filter.contains(&answer) {
        return Err(Error::InvalidArgument(format!(
            "answer {answer} is in its own filter set"
        )));
    }
    if filter.len() >= n {
        return Err(Error::InvalidArgument(format!(
            "filter of {} entities leaves nothing to rank among {n}",
            filter.len()
        )));
    }
    let kept = || probs.iter().filter(|(e, _)| !filter.contains(e));
    let p_answer = kept().find(|(e, _)| *e == answer).map_or(0.0, |&(_, p)| p);
    let n_kept = (n - filter.len()) as f64;
    let rank = if p_answer > 0.0 {
        let (mut above, mut tied) = (0usize, 0usize);
        for &(e, p) in kept() {
            if p > p_answer {
                above += 1;
            } else if p == p_answer && e != answer {
                tied += 1;
            }
        }
        1.0 + above as f64 + tied as f64 / 2.0
    } else {
        let m = kept().filter(|(_, p)| *p > 0.0).count() as f64;
        m + (n_kept - m) / 2.0
    };
    Ok(rank.clamp(1.0, n_kept))
}

/// Running sums behind the aggregate metrics.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RankAccumulator {
    count: usize,
    sum_rank: f64,
    sum_reciprocal: f64,
    hits: [usize; 3],
}

const HITS_AT: [f64; 3] = [1.0, 3.0, 10.0];

impl RankAccumulator {
    pub fn push(&mut self, rank: f64) {
        self.count += 1;
        self.sum_rank += rank;
        self.sum_reciprocal += 1.0 / rank;
        for (h, k) in self.hits.iter_mut().zip(HITS_AT) {
            *h += usize::from(rank <= k);
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn metrics(&self) -> Metrics {
        let n = self.count.max(1) as f64;
        Metrics {
            queries: self.count,
            mr: self.sum_rank / n,
            mrr: self.sum_reciprocal / n,
            hits1: self.hits[0] as f64 / n,
            hits3: self.hits[1] as f64 / n,
            hits10: self.hits[2] as f64 / n,
        }
    }
}

/// Aggregate metrics; hits are fractions in `[0, 1]`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Metrics {
    pub queries: usize,
    pub mr: f64,
    pub mrr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
}

impl Metrics {
    pub const HEADER: &'static str = "      MR     MRR    H@1    H@3   H@10";

    /// One aligned row; hits shown as percentages.
    pub fn row(&self) -> String {
        format!(
            "{:>8.2} {:>7.4} {:>6.1} {:>6.1} {:>6.1}",
            self.mr,
            self.mrr,
            100.0 * self.hits1,
            100.0 * self.hits3,
            100.0 * self.hits10
        )
    }

    pub fn table(&self) -> String {
        format!("{}\n{}\n", Self::HEADER, self.row())
    }

    /// `key=value` record.
    pub fn record(&self) -> String {
        format!(
            "queries={} mr={:.6} mrr={:.6} hits1={:.6} hits3={:.6} hits10={:.6}",
            self.queries, self.mr, self.mrr, self.hits1, self.hits3, self.hits10
        )
    }
}

impl fmt::Display for Metrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.record())
    }
}

/// Rank of one query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueryRank {
    pub query: Triplet,
    pub rank: f64,
    pub candidates: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankingResult {
    pub ranks: Vec<QueryRank>,
    pub metrics: Metrics,
}

impl RankingResult {
    pub fn new(ranks: Vec<QueryRank>) -> Self {
        let mut acc = RankAccumulator::default();
        for r in &ranks {
            acc.push(r.rank);
        }
        Self {
            metrics: acc.metrics(),
            ranks,
        }
    }

    /// `head<TAB>relation<TAB>answer<TAB>rank<TAB>candidates` lines.
    pub fn dump(&self, vocab: &Vocabularies) -> String {
        let mut out = String::new();
        for q in &self.ranks {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}",
                vocab.entities.name(q.query.head),
                vocab.relation_name(q.query.relation),
                vocab.entities.name(q.query.tail),
                q.rank,
                q.candidates
            );
        }
        out
    }
}

/// Known answers for every `(head, relation)` over a set of augmented triplets.
#[derive(Debug, Clone, Default)]
pub struct FilterIndex {
    known: HashMap<(EntityId, RelationId), Vec<EntityId>>,
}

impl FilterIndex {
    pub fn new(augmented: impl IntoIterator<Item = Triplet>) -> Self {
        let mut known: HashMap<(EntityId, RelationId), Vec<EntityId>> = HashMap::new();
        for t in augmented {
            known.entry((t.head, t.relation)).or_default().push(t.tail);
        }
        for v in known.values_mut() {
            v.sort_unstable();
            v.dedup();
        }
        Self { known }
    }

    /// Index over train, valid and test of `dataset`, with inverses.
    pub fn from_dataset(dataset: &Dataset) -> Self {
        let raw = dataset.vocab.raw_relation_count();
        let all: Vec<Triplet> = dataset
            .train
            .iter()
            .chain(&dataset.valid)
            .chain(&dataset.test)
            .copied()
            .collect();
        Self::new(augment_inverse(&all, raw))
    }

    /// Known answers to `query` other than its own tail.
    pub fn filter_for(&self, query: Triplet) -> HashSet<EntityId> {
        self.known
            .get(&(query.head, query.relation))
            .map(|v| v.iter().copied().filter(|&e| e != query.tail).collect())
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    /// Rules per query relation from beam search (`I`).
    pub rules_per_query: usize,
    /// Beam width; `0` means `rules_per_query`.
    pub beam_width: usize,
    /// Predictor passes over the training instances before ranking.
    pub predictor_passes: usize,
    pub init_sample: usize,
    pub grounding: GroundingConfig,
    /// Rank against every entity without removing known answers.
    pub raw: bool,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            rules_per_query: 100,
            beam_width: 0,
            predictor_passes: 3,
            init_sample: 256,
            grounding: GroundingConfig::default(),
            raw: false,
            seed: 0,
        }
    }
}

/// Both query directions of every test triplet.
pub fn test_queries(test: &[Triplet], raw_relation_count: u32) -> Vec<Triplet> {
    test.iter()
        .flat_map(|&t| [t, t.inverse(raw_relation_count)])
        .collect()
}

/// Top-`I` beam-search rules for every relation, one copy each.
pub fn beam_rules(generator: &GeneratorModel, config: &EvalConfig) -> Result<BTreeMap<RelationId, RuleMultiset>> {
    let width = if config.beam_width == 0 {
        config.rules_per_query
    } else {
        config.beam_width
    };
    let relations = generator.config().num_relations as RelationId;
    let sets: Vec<(RelationId, RuleMultiset)> = (0..relations)
        .into_par_iter()
        .map(|r| -> Result<_> {
            let mut set = RuleMultiset::new();
            for (rule, _) in generator.beam_search(r, config.rules_per_query, width)? {
                set.insert(rule);
            }
            Ok((r, set))
        })
        .collect::<Result<_>>()?;
    Ok(sets.into_iter().collect())
}

/// Fits `predictor` on the training graph with `rule_sets` and ranks `queries`.
pub fn rank_with_rules(
    predictor: &mut Predictor,
    dataset: &Dataset,
    rule_sets: &BTreeMap<RelationId, RuleMultiset>,
    queries: &[Triplet],
    config: &EvalConfig,
) -> Result<RankingResult> {
    let training = dataset.training_triplets();
    let groups = group_by_relation(&training);
    let (sets, _) = fit_predictor(
        predictor,
        &dataset.graph,
        &groups,
        rule_sets,
        config.predictor_passes,
        config.init_sample,
        &config.grounding,
        config.seed,
    )?;
    let filter = if config.raw {
        FilterIndex::default()
    } else {
        FilterIndex::from_dataset(dataset)
    };
    let n = dataset.graph.num_entities();
    let view = GraphView::full(&dataset.graph);
    let empty_ids = Vec::new();
    let empty_rules = RuleMultiset::new();
    let predictor = &*predictor;
    let ranks = queries
        .par_iter()
        .map(|&q| -> Result<QueryRank> {
            let (rules, ids) = sets
                .get(&q.relation)
                .map_or((&empty_rules, &empty_ids), |s| (&s.rules, &s.ids));
            let grounding = ground_rule_set(&view, q.head, rules, &config.grounding);
            let query = Query {
                start: q.head,
                answer: q.tail,
                rule_ids: ids,
                grounding: &grounding,
            };
            let probs: Vec<(EntityId, f64)> = match predictor.distribution(&query) {
                Some(p) => grounding.candidates.iter().copied().zip(p).collect(),
                None => Vec::new(),
            };
            let rank = rank_answer(&probs, q.tail, &filter.filter_for(q), n)?;
            Ok(QueryRank {
                query: q,
                rank,
                candidates: grounding.candidates.len(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RankingResult::new(ranks))
}

/// Ranks both directions of `test` after fitting rule weights for the
/// generator's top rules. Weights start fresh since training weights were fit
/// to sampled multiplicities; trained embeddings are kept.
pub fn evaluate(generator: &GeneratorModel, predictor: &Predictor, dataset: &Dataset, test: &[Triplet], config: &EvalConfig) -> Result<RankingResult> {
    let rules = beam_rules(generator, config)?;
    let mut fresh = Predictor::new(
        predictor.config().clone(),
        dataset.graph.num_entities(),
        dataset.vocab.raw_relation_count() as usize,
    )?;
    if let Some(e) = predictor.embeddings() {
        fresh.import_embeddings(e.clone());
    }
    let mut predictor = fresh;
    let queries = test_queries(test, dataset.vocab.raw_relation_count());
    rank_with_rules(&mut predictor, dataset, &rules, &queries, config)
}

/// Metrics at one rule budget.
#[derive(Debug, Clone, PartialEq)]
pub struct BudgetRow {
    pub rules_per_query: usize,
    pub metrics: Metrics,
}

/// For each budget `I`, trains a fresh constant-path predictor on the top-`I`
/// rules per relation and ranks the test queries.
pub fn rule_budget_eval(
    generator: &GeneratorModel,
    predictor_config: &PredictorConfig,
    dataset: &Dataset,
    test: &[Triplet],
    budgets: &[usize],
    config: &EvalConfig,
) -> Result<Vec<BudgetRow>> {
    let queries = test_queries(test, dataset.vocab.raw_relation_count());
    let pconfig = PredictorConfig {
        path_mode: PathMode::Constant,
        ..predictor_config.clone()
    };
    budgets
        .iter()
        .map(|&budget| {
            let config = EvalConfig {
                rules_per_query: budget,
                ..config.clone()
            };
            let rules = beam_rules(generator, &config)?;
            let mut predictor = Predictor::new(
                pconfig.clone(),
                dataset.graph.num_entities(),
                dataset.vocab.raw_relation_count() as usize,
            )?;
            let result = rank_with_rules(&mut predictor, dataset, &rules, &queries, &config)?;
            Ok(BudgetRow {
                rules_per_query: budget,
                metrics: result.metrics,
            })
        })
        .collect()
}

/// Aligned table of budget rows.
pub fn budget_table(rows: &[BudgetRow]) -> String {
    let mut out = format!("{:>6} {}\n", "I", Metrics::HEADER);
    for row in rows {
        let _ = writeln!(out, "{:>6} {}", row.rules_per_query, row.metrics.row());
    }
    out
}

#[cfg(test)]
mod tests;
