//! EM training of the generator and predictor.
//!
//! One iteration samples `N` rules per query relation from the generator,
//! fits the predictor on them, scores every sampled rule per training
//! instance with `H(rule) = [score(t|rule) − mean_{e∈𝒜} score(e|rule)] + log
//! RNN(rule|head)`, selects `K` rules per instance, and refits the generator
//! on the union of the selections.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};
use std::fmt;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::generator::GeneratorModel;
use crate::grounding::{ground_rule_set, GroundingConfig, GroundingResult};
use crate::kg::{make_instance, KnowledgeGraph, RelationId, Triplet};
use crate::predictor::{Predictor, Query};
use crate::rule::{Rule, RuleMultiset};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionMode {
    /// The `K` distinct rules with the highest `H`.
    TopK,
    /// The multiset maximizing `Σ H + γ`.
    Map,
    /// `K` draws from `softmax(H)`.
    Posterior,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmConfig {
    /// Rules sampled per query relation and iteration (`N`).
    pub rules_per_relation: usize,
    /// Rules selected per training instance (`K`).
    pub selected_per_instance: usize,
    pub iterations: usize,
    pub selection: SelectionMode,
    /// Passes over the training instances when fitting the predictor.
    pub predictor_passes: usize,
    /// Generator steps on the selected rules per iteration.
    pub generator_steps: usize,
    /// Instances per relation used to initialize new rule weights.
    pub init_sample: usize,
    pub grounding: GroundingConfig,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            rules_per_relation: 2000,
            selected_per_instance: 1000,
            iterations: 10,
            selection: SelectionMode::TopK,
            predictor_passes: 5,
            generator_steps: 20,
            init_sample: 256,
            grounding: GroundingConfig::default(),
            seed: 0,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.selected_per_instance == 0 {
            problems.push("K must be >= 1".to_string());
        }
        if self.selected_per_instance > self.rules_per_relation {
            problems.push(format!(
                "K ({}) must not exceed N ({})",
                self.selected_per_instance, self.rules_per_relation
            ));
        }
        if self.grounding.path_cap == 0 {
            problems.push("path cap must be >= 1".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems.join("; ")))
        }
    }
}

/// Quality of one rule for one instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HScore {
    pub predictor: f64,
    pub prior: f64,
    pub value: f64,
}

impl HScore {
    pub fn new(predictor: f64, prior: f64) -> Self {
        Self {
            predictor,
            prior,
            value: predictor + prior,
        }
    }
}

/// H for every distinct rule of the query's grounding. `priors[i]` is
/// `log RNN(rule_i | head)`. An answer outside 𝒜 gets `score(t|rule) = 0`.
pub fn h_scores(predictor: &Predictor, query: &Query<'_>, priors: &[f64]) -> Result<Vec<HScore>> {
    let size = query.grounding.candidates.len();
    if size == 0 {
        return Err(Error::Precondition("H is undefined without candidates".into()));
    }
    Ok(predictor
        .per_rule_scores(query)
        .iter()
        .zip(priors)
        .map(|(per, &prior)| {
            let truth = per
                .binary_search_by_key(&query.answer, |&(e, _)| e)
                .map_or(0.0, |i| per[i].1);
            let mean = per.iter().map(|p| p.1).sum::<f64>() / size as f64;
            HScore::new(truth - mean, prior)
        })
        .collect())
}

/// `log RNN(rule | head)` for each distinct rule.
pub fn rule_priors(generator: &GeneratorModel, rules: &RuleMultiset) -> Result<Vec<f64>> {
    rules.rules().map(|r| generator.rule_log_prob(r)).collect()
}

/// Selected multiplicities, indexed like the scored rules.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selection {
    pub counts: Vec<u32>,
    /// Fewer than `K` distinct rules were available.
    pub short: bool,
}

impl Selection {
    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&n| u64::from(n)).sum()
    }
}

/// `log(K! / Π n!)` for multiplicities `counts` with `K = Σ counts`.
pub fn gamma(counts: &[u32]) -> f64 {
    let ln_fact = |n: u32| (2..=n).map(|k| f64::from(k).ln()).sum::<f64>();
    let k: u32 = counts.iter().sum();
    ln_fact(k) - counts.iter().map(|&n| ln_fact(n)).sum::<f64>()
}

struct Slot<'a> {
    gain: f64,
    prior: f64,
    rule: &'a Rule,
    index: usize,
}

impl Slot<'_> {
    /// Higher gain first, then higher prior, then the lexicographically
    /// smaller rule.
    fn rank(&self, other: &Self) -> Ordering {
        self.gain
            .total_cmp(&other.gain)
            .then(self.prior.total_cmp(&other.prior))
            .then_with(|| other.rule.cmp(self.rule))
    }
}

impl PartialEq for Slot<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.rank(other) == Ordering::Equal
    }
}

impl Eq for Slot<'_> {}

impl PartialOrd for Slot<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Slot<'_> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.rank(other)
    }
}

/// The `k` distinct rules with the highest `H`, one copy each. Ties go to the
/// higher prior, then the lexicographically smaller rule.
pub fn select_top_k(h: &[HScore], rules: &[&Rule], k: usize) -> Result<Selection> {
    if h.is_empty() {
        return Err(Error::Precondition("no scored rules to select from".into()));
    }
    assert_eq!(h.len(), rules.len());
    let mut order: Vec<usize> = (0..h.len()).collect();
    order.sort_by(|&a, &b| {
        h[b].value
            .total_cmp(&h[a].value)
            .then(h[b].prior.total_cmp(&h[a].prior))
            .then_with(|| rules[a].cmp(rules[b]))
    });
    let mut counts = vec![0u32; h.len()];
    for &i in order.iter().take(k) {
        counts[i] = 1;
    }
    Ok(Selection {
        counts,
        short: h.len() < k,
    })
}

/// The size-`k` multiset maximizing `Σ H + γ`. Adding the `j`-th copy of a
/// rule changes the objective by `H − log j`, which decreases in `j`, so
/// taking the `k` largest marginal gains is optimal.
pub fn select_map(h: &[HScore], rules: &[&Rule], k: usize) -> Result<Selection> {
    if h.is_empty() {
        return Err(Error::Precondition("no scored rules to select from".into()));
    }
    assert_eq!(h.len(), rules.len());
    let mut counts = vec![0u32; h.len()];
    let mut heap: BinaryHeap<Slot<'_>> = h
        .iter()
        .zip(rules)
        .enumerate()
        .map(|(index, (s, rule))| Slot {
            gain: s.value,
            prior: s.prior,
            rule,
            index,
        })
        .collect();
    for _ in 0..k {
        let mut slot = heap.pop().expect("heap never empties");
        counts[slot.index] += 1;
        slot.gain = h[slot.index].value - f64::from(counts[slot.index] + 1).ln();
        heap.push(slot);
    }
    Ok(Selection {
        counts,
        short: h.len() < k,
    })
}

/// `k` independent draws from `softmax(H)`.
pub fn sample_posterior<R: Rng + ?Sized>(h: &[HScore], k: usize, rng: &mut R) -> Result<Selection> {
    if h.is_empty() {
        return Err(Error::Precondition("no scored rules to sample from".into()));
    }
    let max = h.iter().map(|s| s.value).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = h.iter().map(|s| (s.value - max).exp()).collect();
    let dist = WeightedIndex::new(&weights).map_err(|e| Error::Numeric(format!("posterior weights: {e}")))?;
    let mut counts = vec![0u32; h.len()];
    for _ in 0..k {
        counts[dist.sample(rng)] += 1;
    }
    Ok(Selection {
        counts,
        short: h.len() < k,
    })
}

fn log_sum_exp(xs: impl IntoIterator<Item = f64>) -> f64 {
    let xs: Vec<f64> = xs.into_iter().collect();
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// `log Σ exp(score) − (mean score + log |𝒜|)`, always in `[0, s²]`.
pub fn log_sum_exp_gap(scores: &[f64]) -> f64 {
    let n = scores.len() as f64;
    log_sum_exp(scores.iter().copied()) - (scores.iter().sum::<f64>() / n + n.ln())
}

/// A single instance reduced to what the posterior needs: per-copy scores
/// `score(e | rule)` over the candidates, the answer's candidate index, and
/// the rules' log-priors.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorToy {
    pub scores: Vec<Vec<f64>>,
    pub answer: usize,
    pub log_prior: Vec<f64>,
    pub k: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorBoundReport {
    /// `max_{z, e} |score_z(e)|`.
    pub s: f64,
    pub deviation: f64,
    /// `s² + s⁴`.
    pub bound: f64,
    pub multisets: usize,
}

impl PosteriorBoundReport {
    pub fn holds(&self) -> bool {
        self.deviation <= self.bound
    }
}

/// All multiplicity vectors of length `rules` summing to `k`.
fn multisets(rules: usize, k: usize) -> Vec<Vec<u32>> {
    fn rec(i: usize, left: u32, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if i + 1 == cur.len() {
            cur[i] = left;
            out.push(cur.clone());
            return;
        }
        for n in 0..=left {
            cur[i] = n;
            rec(i + 1, left - n, cur, out);
        }
    }
    let mut out = Vec::new();
    if rules > 0 {
        rec(0, k as u32, &mut vec![0; rules], &mut out);
    }
    out
}

impl PosteriorToy {
    fn candidates(&self) -> usize {
        self.scores.first().map_or(0, Vec::len)
    }

    fn multiset_scores(&self, counts: &[u32]) -> Vec<f64> {
        let mut s = vec![0.0; self.candidates()];
        for (row, &n) in self.scores.iter().zip(counts) {
            for (x, v) in s.iter_mut().zip(row) {
                *x += f64::from(n) * v;
            }
        }
        s
    }

    /// `max |score_z(e)|` over all size-`k` multisets.
    pub fn s(&self) -> f64 {
        multisets(self.scores.len(), self.k)
            .iter()
            .flat_map(|z| self.multiset_scores(z))
            .fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn h(&self) -> Vec<f64> {
        let n = self.candidates() as f64;
        self.scores
            .iter()
            .zip(&self.log_prior)
            .map(|(row, p)| row[self.answer] - row.iter().sum::<f64>() / n + p)
            .collect()
    }

    /// A random toy with `s` scaled to exactly `target`.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, target: f64) -> Self {
        loop {
            let rules = rng.gen_range(1..=5);
            let cands = rng.gen_range(2..=6);
            let k = rng.gen_range(1..=3);
            let scores: Vec<Vec<f64>> = (0..rules)
                .map(|_| {
                    (0..cands)
                        .map(|_| if rng.gen_bool(0.4) { 0.0 } else { rng.gen_range(-1.0..1.0) })
                        .collect()
                })
                .collect();
            let mut toy = Self {
                scores,
                answer: rng.gen_range(0..cands),
                log_prior: (0..rules).map(|_| rng.gen_range(-5.0..0.0)).collect(),
                k,
            };
            let s = toy.s();
            if s < 1e-6 {
                continue;
            }
            let scale = target / s;
            toy.scores.iter_mut().flatten().for_each(|x| *x *= scale);
            return toy;
        }
    }
}

/// Exact log-posterior `log p(z | answer)` over every size-`k` multiset of the
/// toy's rules against `Σ H + γ + const`, with the constant chosen so both
/// sides normalize. Requires `s < 1`.
pub fn verify_posterior_bound(toy: &PosteriorToy) -> Result<PosteriorBoundReport> {
    if toy.scores.is_empty() || toy.candidates() == 0 || toy.k == 0 {
        return Err(Error::Precondition("toy needs rules, candidates and k >= 1".into()));
    }
    if toy.log_prior.len() != toy.scores.len() || toy.answer >= toy.candidates() {
        return Err(Error::Precondition("toy dimensions disagree".into()));
    }
    let s = toy.s();
    if s >= 1.0 {
        return Err(Error::Precondition(format!("s = {s} must be below 1")));
    }
    let h = toy.h();
    let zs = multisets(toy.scores.len(), toy.k);
    let mut exact = Vec::with_capacity(zs.len());
    let mut approx = Vec::with_capacity(zs.len());
    for z in &zs {
        let sc = toy.multiset_scores(z);
        let log_lik = sc[toy.answer] - log_sum_exp(sc.iter().copied());
        let prior: f64 = z.iter().zip(&toy.log_prior).map(|(&n, p)| f64::from(n) * p).sum();
        exact.push(log_lik + gamma(z) + prior);
        approx.push(z.iter().zip(&h).map(|(&n, x)| f64::from(n) * x).sum::<f64>() + gamma(z));
    }
    let ze = log_sum_exp(exact.iter().copied());
    let za = log_sum_exp(approx.iter().copied());
    let deviation = exact
        .iter()
        .zip(&approx)
        .map(|(e, a)| ((e - ze) - (a - za)).abs())
        .fold(0.0, f64::max);
    Ok(PosteriorBoundReport {
        s,
        deviation,
        bound: s * s + s.powi(4),
        multisets: zs.len(),
    })
}

/// Generator and predictor trained together.
#[derive(Debug, Clone)]
pub struct Models {
    pub generator: GeneratorModel,
    pub predictor: Predictor,
}

/// Grounds `rules` for a training triplet with the triplet (and its inverse)
/// hidden from the graph.
pub fn ground_training(graph: &KnowledgeGraph, triplet: Triplet, rules: &RuleMultiset, config: &GroundingConfig) -> Result<GroundingResult> {
    let inst = make_instance(graph, triplet)?;
    Ok(ground_rule_set(&inst.view, triplet.head, rules, config))
}

/// Rules and predictor ids for one query relation.
#[derive(Debug, Clone)]
pub struct RelationRules {
    pub rules: RuleMultiset,
    pub ids: Vec<usize>,
}

/// Training instances grouped by query relation, in relation order.
pub fn group_by_relation(instances: &[Triplet]) -> BTreeMap<RelationId, Vec<Triplet>> {
    let mut groups: BTreeMap<RelationId, Vec<Triplet>> = BTreeMap::new();
    for &t in instances {
        groups.entry(t.relation).or_default().push(t);
    }
    groups
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FitReport {
    /// Mean loss over the last pass.
    pub loss: f64,
    /// Instances of the last pass whose answer was not a candidate.
    pub skipped: usize,
    pub oversaturated: usize,
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Registers the rule sets with the predictor, initializes new weights from a
/// sample of instances, and trains for `passes` passes in mini-batches.
pub fn fit_predictor(
    predictor: &mut Predictor,
    graph: &KnowledgeGraph,
    groups: &BTreeMap<RelationId, Vec<Triplet>>,
    rule_sets: &BTreeMap<RelationId, RuleMultiset>,
    passes: usize,
    init_sample: usize,
    grounding: &GroundingConfig,
    seed: u64,
) -> Result<(BTreeMap<RelationId, RelationRules>, FitReport)> {
    let mut sets = BTreeMap::new();
    let mut fresh_by_rel = Vec::new();
    for (&r, rules) in rule_sets {
        let (ids, fresh) = predictor.register(rules);
        fresh_by_rel.push((r, fresh));
        sets.insert(r, RelationRules { rules: rules.clone(), ids });
    }
    for (r, fresh) in fresh_by_rel {
        let (Some(set), Some(inst)) = (sets.get(&r), groups.get(&r)) else {
            continue;
        };
        if fresh.is_empty() {
            continue;
        }
        let mut sample = inst.clone();
        sample.shuffle(&mut rng_for(seed, u64::from(r)));
        sample.truncate(init_sample.max(1));
        let groundings: Vec<GroundingResult> = sample
            .par_iter()
            .map(|&t| ground_training(graph, t, &set.rules, grounding))
            .collect::<Result<_>>()?;
        let queries: Vec<Query<'_>> = sample
            .iter()
            .zip(&groundings)
            .map(|(t, g)| Query {
                start: t.head,
                answer: t.tail,
                rule_ids: &set.ids,
                grounding: g,
            })
            .collect();
        predictor.init_rule_weights(&fresh, &queries);
    }
    let instances: Vec<Triplet> = groups
        .iter()
        .filter(|(r, _)| sets.contains_key(r))
        .flat_map(|(_, v)| v.iter().copied())
        .collect();
    let batch = predictor.config().batch_size;
    let mut report = FitReport::default();
    for pass in 0..passes {
        let mut order = instances.clone();
        order.shuffle(&mut rng_for(seed ^ 0x9e37_79b9, pass as u64));
        let (mut loss, mut used, mut skipped, mut over) = (0.0, 0usize, 0usize, 0usize);
        for chunk in order.chunks(batch) {
            let groundings: Vec<GroundingResult> = chunk
                .par_iter()
                .map(|&t| ground_training(graph, t, &sets[&t.relation].rules, grounding))
                .collect::<Result<_>>()?;
            let queries: Vec<Query<'_>> = chunk
                .iter()
                .zip(&groundings)
                .map(|(t, g)| Query {
                    start: t.head,
                    answer: t.tail,
                    rule_ids: &sets[&t.relation].ids,
                    grounding: g,
                })
                .collect();
            over += groundings.iter().map(|g| g.oversaturated).sum::<usize>();
            let step = predictor.train_step(&queries)?;
            if let Some(l) = step.loss {
                loss += l * step.used as f64;
            }
            used += step.used;
            skipped += step.skipped;
        }
        report = FitReport {
            loss: if used == 0 { 0.0 } else { loss / used as f64 },
            skipped,
            oversaturated: over,
        };
    }
    Ok((sets, report))
}

/// One record per iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationReport {
    pub iteration: usize,
    pub predictor_loss: f64,
    pub skipped_instances: usize,
    pub oversaturated: usize,
    pub mean_selected_h: f64,
    pub mean_s: f64,
    pub max_s: f64,
    /// Instances with `s >= 1`.
    pub s_violations: usize,
    pub sampled_distinct: usize,
    pub selected_distinct: usize,
    pub short_selections: usize,
    /// Mean reward (REINFORCE only; 0 for EM).
    pub mean_reward: f64,
    pub generator_loss: f64,
}

impl fmt::Display for IterationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "iteration={} predictor_loss={:.6} skipped={} oversaturated={} mean_selected_h={:.6} \
             mean_s={:.6} max_s={:.6} s_violations={} sampled_distinct={} selected_distinct={} \
             short_selections={} mean_reward={:.6} generator_loss={:.6}",
            self.iteration,
            self.predictor_loss,
            self.skipped_instances,
            self.oversaturated,
            self.mean_selected_h,
            self.mean_s,
            self.max_s,
            self.s_violations,
            self.sampled_distinct,
            self.selected_distinct,
            self.short_selections,
            self.mean_reward,
            self.generator_loss,
        )
    }
}

/// `N` rules per relation from the generator, one seeded stream per relation.
pub fn sample_rule_sets(
    generator: &GeneratorModel,
    relations: impl IntoIterator<Item = RelationId>,
    n: usize,
    seed: u64,
) -> Result<BTreeMap<RelationId, RuleMultiset>> {
    let relations: Vec<RelationId> = relations.into_iter().collect();
    let sets: Vec<RuleMultiset> = relations
        .par_iter()
        .map(|&r| generator.sample_rules(r, n, &mut rng_for(seed, u64::from(r))))
        .collect::<Result<_>>()?;
    Ok(relations.into_iter().zip(sets).collect())
}

struct Phase {
    groups: BTreeMap<RelationId, Vec<Triplet>>,
    sets: BTreeMap<RelationId, RelationRules>,
    fit: FitReport,
    sampled_distinct: usize,
}

fn sample_and_fit(models: &mut Models, graph: &KnowledgeGraph, instances: &[Triplet], config: &EmConfig, iteration: usize) -> Result<Phase> {
    let groups = group_by_relation(instances);
    let seed = config.seed.wrapping_add(iteration as u64 * 0x1000_0001);
    let rule_sets = sample_rule_sets(&models.generator, groups.keys().copied(), config.rules_per_relation, seed)?;
    let sampled_distinct = rule_sets.values().map(RuleMultiset::distinct).sum();
    let (sets, fit) = fit_predictor(
        &mut models.predictor,
        graph,
        &groups,
        &rule_sets,
        config.predictor_passes,
        config.init_sample,
        &config.grounding,
        seed,
    )?;
    Ok(Phase {
        groups,
        sets,
        fit,
        sampled_distinct,
    })
}

struct InstanceSelection {
    counts: Vec<u32>,
    selected_h: f64,
    s: f64,
    short: bool,
}

/// One EM iteration (sampling, predictor fit, E-step, M-step).
pub fn em_iteration(models: &mut Models, graph: &KnowledgeGraph, instances: &[Triplet], config: &EmConfig, iteration: usize) -> Result<IterationReport> {
    config.validate()?;
    let phase = sample_and_fit(models, graph, instances, config, iteration)?;
    let mut priors = BTreeMap::new();
    for (&r, set) in &phase.sets {
        priors.insert(r, rule_priors(&models.generator, &set.rules)?);
    }
    let predictor = &models.predictor;
    let seed = config.seed.wrapping_add(iteration as u64 * 0x1000_0001) ^ 0x5eed;
    let mut totals: BTreeMap<RelationId, Vec<u64>> = BTreeMap::new();
    let (mut h_sum, mut h_count) = (0.0, 0u64);
    let (mut s_sum, mut s_max, mut s_viol, mut s_count) = (0.0, 0.0f64, 0usize, 0usize);
    let mut short = 0;
    for (&r, inst) in &phase.groups {
        let set = &phase.sets[&r];
        let rules: Vec<&Rule> = set.rules.rules().collect();
        let selections: Vec<Option<InstanceSelection>> = inst
            .par_iter()
            .enumerate()
            .map(|(i, &t)| -> Result<Option<InstanceSelection>> {
                let g = ground_training(graph, t, &set.rules, &config.grounding)?;
                let q = Query {
                    start: t.head,
                    answer: t.tail,
                    rule_ids: &set.ids,
                    grounding: &g,
                };
                if g.candidates.is_empty() {
                    return Ok(None);
                }
                let h = h_scores(predictor, &q, &priors[&r])?;
                let sel = match config.selection {
                    SelectionMode::TopK => select_top_k(&h, &rules, config.selected_per_instance)?,
                    SelectionMode::Map => select_map(&h, &rules, config.selected_per_instance)?,
                    SelectionMode::Posterior => {
                        let mut rng = rng_for(seed ^ u64::from(r), i as u64);
                        sample_posterior(&h, config.selected_per_instance, &mut rng)?
                    }
                };
                let selected_h = sel.counts.iter().zip(&h).map(|(&n, x)| f64::from(n) * x.value).sum();
                let counts = sel.counts;
                Ok(Some(InstanceSelection {
                    counts,
                    selected_h,
                    s: predictor.max_abs_score(&q),
                    short: sel.short,
                }))
            })
            .collect::<Result<_>>()?;
        let total = totals.entry(r).or_insert_with(|| vec![0; rules.len()]);
        for sel in selections.into_iter().flatten() {
            for (t, &c) in total.iter_mut().zip(&sel.counts) {
                *t += u64::from(c);
            }
            h_sum += sel.selected_h;
            h_count += sel.counts.iter().map(|&c| u64::from(c)).sum::<u64>();
            s_sum += sel.s;
            s_max = s_max.max(sel.s);
            s_count += 1;
            s_viol += usize::from(sel.s >= 1.0);
            short += usize::from(sel.short);
        }
    }
    let mut data = Vec::new();
    for (r, total) in &totals {
        for (j, &c) in total.iter().enumerate() {
            if c > 0 {
                data.push((phase.sets[r].rules.get(j).0.clone(), c as f64));
            }
        }
    }
    let mut generator_loss = 0.0;
    for step in 0..config.generator_steps {
        let l = models.generator.mle_step(&data)?;
        if step == 0 {
            generator_loss = l;
        }
    }
    Ok(IterationReport {
        iteration,
        predictor_loss: phase.fit.loss,
        skipped_instances: phase.fit.skipped,
        oversaturated: phase.fit.oversaturated,
        mean_selected_h: if h_count == 0 { 0.0 } else { h_sum / h_count as f64 },
        mean_s: if s_count == 0 { 0.0 } else { s_sum / s_count as f64 },
        max_s: s_max,
        s_violations: s_viol,
        sampled_distinct: phase.sampled_distinct,
        selected_distinct: data.len(),
        short_selections: short,
        mean_reward: 0.0,
        generator_loss,
    })
}

/// Reward `p(answer | rules)` of one training triplet (0 if not a candidate).
pub fn reward(predictor: &Predictor, graph: &KnowledgeGraph, triplet: Triplet, set: &RelationRules, grounding: &GroundingConfig) -> Result<f64> {
    let g = ground_training(graph, triplet, &set.rules, grounding)?;
    Ok(predictor.answer_probability(&Query {
        start: triplet.head,
        answer: triplet.tail,
        rule_ids: &set.ids,
        grounding: &g,
    }))
}

/// Samples `N` rules for one instance's relation, rewards them with the
/// predictor's answer probability and takes a reward-weighted generator step.
/// Returns the reward.
pub fn reinforce_step<R: Rng + ?Sized>(models: &mut Models, graph: &KnowledgeGraph, triplet: Triplet, config: &EmConfig, rng: &mut R) -> Result<f64> {
    let rules = models.generator.sample_rules(triplet.relation, config.rules_per_relation, rng)?;
    let (ids, fresh) = models.predictor.register(&rules);
    let set = RelationRules { rules, ids };
    if !fresh.is_empty() {
        let g = ground_training(graph, triplet, &set.rules, &config.grounding)?;
        let q = Query {
            start: triplet.head,
            answer: triplet.tail,
            rule_ids: &set.ids,
            grounding: &g,
        };
        models.predictor.init_rule_weights(&fresh, &[q]);
    }
    let r = reward(&models.predictor, graph, triplet, &set, &config.grounding)?;
    let data: Vec<(Rule, f64)> = set.rules.iter().map(|(rule, n)| (rule.clone(), r * f64::from(n))).collect();
    models.generator.weighted_step(&data, set.rules.total() as f64)?;
    Ok(r)
}

/// The REINFORCE counterpart of [`em_iteration`] on the same budget: same
/// sampling and predictor fit, then `generator_steps` steps on the
/// reward-weighted log-likelihood of each relation's sampled rules.
pub fn reinforce_iteration(models: &mut Models, graph: &KnowledgeGraph, instances: &[Triplet], config: &EmConfig, iteration: usize) -> Result<IterationReport> {
    config.validate()?;
    let phase = sample_and_fit(models, graph, instances, config, iteration)?;
    let mut data = Vec::new();
    let (mut reward_sum, mut count) = (0.0, 0usize);
    let mut normalizer = 0.0;
    for (&r, inst) in &phase.groups {
        let set = &phase.sets[&r];
        let rewards: Vec<f64> = inst
            .par_iter()
            .map(|&t| reward(&models.predictor, graph, t, set, &config.grounding))
            .collect::<Result<_>>()?;
        let total: f64 = rewards.iter().sum();
        reward_sum += total;
        count += rewards.len();
        normalizer += (set.rules.total() as f64) * rewards.len() as f64;
        for (rule, n) in set.rules.iter() {
            data.push((rule.clone(), total * f64::from(n)));
        }
    }
    let mut generator_loss = 0.0;
    if normalizer > 0.0 {
        for step in 0..config.generator_steps {
            let l = models.generator.weighted_step(&data, normalizer)?;
            if step == 0 {
                generator_loss = l;
            }
        }
    }
    Ok(IterationReport {
        iteration,
        predictor_loss: phase.fit.loss,
        skipped_instances: phase.fit.skipped,
        oversaturated: phase.fit.oversaturated,
        mean_selected_h: 0.0,
        mean_s: 0.0,
        max_s: 0.0,
        s_violations: 0,
        sampled_distinct: phase.sampled_distinct,
        selected_distinct: data.iter().filter(|d| d.1 > 0.0).count(),
        short_selections: 0,
        mean_reward: if count == 0 { 0.0 } else { reward_sum / count as f64 },
        generator_loss,
    })
}
