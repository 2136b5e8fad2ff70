//! Log-linear reasoning predictor.
//!
//! `score(e) = Σ_rule n_rule · ψ(rule) · mean_path φ(path)` over the rules that
//! reach `e`, and `p(e) = softmax(score / τ)` over the candidate set. With the
//! constant path score the mean is 1 whenever a rule reaches `e`. With
//! rotation embeddings every path of a rule between the same endpoints has the
//! same score, so the mean is the endpoint score.

mod rotation;

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grounding::{GroundingResult, RuleGrounding};
use crate::kg::{EntityId, Vocabularies};
use crate::optim::{Adam, LazyAdam};
use crate::rule::{format_rule_line, Rule, RuleMultiset};

pub use rotation::RotationEmbeddings;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathMode {
    Constant,
    Rotation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightInit {
    /// Average discriminativeness of the rule over sampled instances.
    Heuristic,
    Zero,
    Random,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorConfig {
    pub temperature: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub init: WeightInit,
    pub path_mode: PathMode,
    pub embedding_dim: usize,
    pub margin: f64,
    pub embedding_learning_rate: f64,
    pub seed: u64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            learning_rate: 0.01,
            weight_decay: 5e-4,
            batch_size: 32,
            init: WeightInit::Heuristic,
            path_mode: PathMode::Constant,
            embedding_dim: 200,
            margin: 3.0,
            embedding_learning_rate: 5e-5,
            seed: 0,
        }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            problems.push("temperature must be positive");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            problems.push("predictor learning rate must be positive");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            problems.push("weight decay must be non-negative");
        }
        if self.batch_size == 0 {
            problems.push("batch size must be positive");
        }
        if self.path_mode == PathMode::Rotation {
            if self.embedding_dim == 0 {
                problems.push("embedding dimension must be positive");
            }
            if !(self.embedding_learning_rate.is_finite() && self.embedding_learning_rate > 0.0) {
                problems.push("embedding learning rate must be positive");
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems.join("; ")))
        }
    }
}

/// Rule weights ψ, one per distinct rule seen so far.
#[derive(Debug, Clone, Default)]
pub struct RuleTable {
    index: HashMap<Rule, usize>,
    rules: Vec<Rule>,
    weights: Vec<f64>,
}

impl RuleTable {
    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn id(&self, rule: &Rule) -> Option<usize> {
        self.index.get(rule).copied()
    }

    pub fn rule(&self, id: usize) -> &Rule {
        &self.rules[id]
    }

    pub fn weight(&self, id: usize) -> f64 {
        self.weights[id]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn set_weight(&mut self, id: usize, weight: f64) {
        self.weights[id] = weight;
    }

    /// Id of `rule`, adding it with weight 0 if new.
    pub fn insert(&mut self, rule: &Rule) -> (usize, bool) {
        if let Some(&id) = self.index.get(rule) {
            return (id, false);
        }
        let id = self.rules.len();
        self.index.insert(rule.clone(), id);
        self.rules.push(rule.clone());
        self.weights.push(0.0);
        (id, true)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Rule, f64)> {
        self.rules.iter().zip(self.weights.iter().copied())
    }
}

/// One training or test query with its grounding. `rule_ids[i]` is the table
/// id of the grounding's i-th distinct rule.
#[derive(Debug, Clone, Copy)]
pub struct Query<'a> {
    pub start: EntityId,
    pub answer: EntityId,
    pub rule_ids: &'a [usize],
    pub grounding: &'a GroundingResult,
}

/// Loss and sparse gradient of `−log p(answer)` for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceGrad {
    pub loss: f64,
    /// `(rule id, ∂loss/∂ψ)`.
    pub psi: Vec<(usize, f64)>,
    /// `(embedding parameter index, ∂loss/∂x)`, possibly repeated.
    pub embedding: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    /// Mean loss over the queries whose answer is a candidate.
    pub loss: Option<f64>,
    pub used: usize,
    /// Queries whose answer is not a candidate.
    pub skipped: usize,
}

/// Softmax of `scores / τ`; `None` when there are no candidates.
pub fn answer_distribution(scores: &[f64], temperature: f64) -> Option<Vec<f64>> {
    if scores.is_empty() {
        return None;
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = scores.iter().map(|s| ((s - max) / temperature).exp()).collect();
    let z: f64 = p.iter().sum();
    for x in &mut p {
        *x /= z;
    }
    Some(p)
}

#[derive(Debug, Clone)]
pub struct Predictor {
    config: PredictorConfig,
    table: RuleTable,
    psi_adam: LazyAdam,
    embeddings: Option<RotationEmbeddings>,
    embedding_adam: Adam,
}

impl Predictor {
    pub fn new(config: PredictorConfig, num_entities: usize, raw_relations: usize) -> Result<Self> {
        config.validate()?;
        let embeddings = match config.path_mode {
            PathMode::Constant => None,
            PathMode::Rotation => Some(RotationEmbeddings::new(
                num_entities,
                raw_relations,
                config.embedding_dim,
                config.margin,
                config.seed,
            )?),
        };
        let len = embeddings.as_ref().map_or(0, |e| e.params().len());
        Ok(Self {
            psi_adam: LazyAdam::new(config.weight_decay),
            embedding_adam: Adam::new(len, config.weight_decay),
            config,
            table: RuleTable::default(),
            embeddings,
        })
    }

    pub(crate) fn from_parts(config: PredictorConfig, table: RuleTable, psi_adam: LazyAdam, embeddings: Option<RotationEmbeddings>, embedding_adam: Adam) -> Self {
        Self {
            config,
            table,
            psi_adam,
            embeddings,
            embedding_adam,
        }
    }

    pub(crate) fn optimizer_state(&self) -> (&LazyAdam, &Adam) {
        (&self.psi_adam, &self.embedding_adam)
    }

    pub fn config(&self) -> &PredictorConfig {
        &self.config
    }

    pub fn table(&self) -> &RuleTable {
        &self.table
    }

    pub fn table_mut(&mut self) -> &mut RuleTable {
        &mut self.table
    }

    pub fn embeddings(&self) -> Option<&RotationEmbeddings> {
        self.embeddings.as_ref()
    }

    pub fn embeddings_mut(&mut self) -> Option<&mut RotationEmbeddings> {
        self.embeddings.as_mut()
    }

    /// Replaces the embeddings, e.g. with externally trained ones.
    pub fn import_embeddings(&mut self, embeddings: RotationEmbeddings) {
        self.embedding_adam = Adam::new(embeddings.params().len(), self.config.weight_decay);
        self.embeddings = Some(embeddings);
    }

    /// Table ids for the distinct rules of `rules`, plus the ids that are new.
    pub fn register(&mut self, rules: &RuleMultiset) -> (Vec<usize>, Vec<usize>) {
        let mut fresh = Vec::new();
        let ids = rules
            .rules()
            .map(|r| {
                let (id, new) = self.table.insert(r);
                if new {
                    fresh.push(id);
                }
                id
            })
            .collect();
        (ids, fresh)
    }

    /// Mean path score of `rule` for every terminal entity of `g`.
    fn mean_phi(&self, rule: &Rule, start: EntityId, g: &RuleGrounding) -> Vec<f64> {
        match &self.embeddings {
            None => vec![1.0; g.counts.len()],
            Some(emb) => {
                let rotated = emb.rotate(start, &emb.body_phase(&rule.body));
                g.counts
                    .iter()
                    .map(|&(e, _)| rotation::sigmoid(emb.margin() - emb.distance(&rotated, e)))
                    .collect()
            }
        }
    }

    fn check_query(&self, q: &Query<'_>) {
        assert_eq!(q.rule_ids.len(), q.grounding.per_rule.len(), "rule ids do not match grounding");
    }

    /// `score(e | rule) = ψ · mean φ` for each distinct rule, per reached entity.
    pub fn per_rule_scores(&self, q: &Query<'_>) -> Vec<Vec<(EntityId, f64)>> {
        self.check_query(q);
        q.rule_ids
            .iter()
            .zip(&q.grounding.per_rule)
            .map(|(&id, g)| {
                let psi = self.table.weight(id);
                let phi = self.mean_phi(self.table.rule(id), q.start, g);
                g.counts.iter().zip(phi).map(|(&(e, _), f)| (e, psi * f)).collect()
            })
            .collect()
    }

    /// Scores aligned with `q.grounding.candidates`.
    pub fn score_answers(&self, q: &Query<'_>) -> Vec<f64> {
        let mut scores = vec![0.0; q.grounding.candidates.len()];
        for (i, per) in self.per_rule_scores(q).into_iter().enumerate() {
            let n = f64::from(q.grounding.multiplicity[i]);
            for (e, s) in per {
                let k = q.grounding.candidate_index(e).expect("reached entity is a candidate");
                scores[k] += n * s;
            }
        }
        scores
    }

    /// Answer distribution aligned with the candidates; `None` when empty.
    pub fn distribution(&self, q: &Query<'_>) -> Option<Vec<f64>> {
        answer_distribution(&self.score_answers(q), self.config.temperature)
    }

    /// `p(answer)`, zero when the answer is not a candidate.
    pub fn answer_probability(&self, q: &Query<'_>) -> f64 {
        match (q.grounding.candidate_index(q.answer), self.distribution(q)) {
            (Some(k), Some(p)) => p[k],
            _ => 0.0,
        }
    }

    /// Loss and gradient, or `None` when the answer is not a candidate.
    pub fn instance_gradient(&self, q: &Query<'_>) -> Option<InstanceGrad> {
        self.check_query(q);
        let a = q.grounding.candidate_index(q.answer)?;
        let tau = self.config.temperature;
        let phis: Vec<Vec<f64>> = q
            .rule_ids
            .iter()
            .zip(&q.grounding.per_rule)
            .map(|(&id, g)| self.mean_phi(self.table.rule(id), q.start, g))
            .collect();
        let mut scores = vec![0.0; q.grounding.candidates.len()];
        for (i, (&id, g)) in q.rule_ids.iter().zip(&q.grounding.per_rule).enumerate() {
            let w = f64::from(q.grounding.multiplicity[i]) * self.table.weight(id);
            for (&(e, _), f) in g.counts.iter().zip(&phis[i]) {
                scores[q.grounding.candidate_index(e).unwrap()] += w * f;
            }
        }
        let p = answer_distribution(&scores, tau)?;
        let loss = -p[a].ln();
        // ∂loss/∂score_e = (p_e − [e = a]) / τ.
        let mut ds: Vec<f64> = p.iter().map(|x| x / tau).collect();
        ds[a] -= 1.0 / tau;
        let mut psi = Vec::with_capacity(q.rule_ids.len());
        let mut embedding = Vec::new();
        for (i, (&id, g)) in q.rule_ids.iter().zip(&q.grounding.per_rule).enumerate() {
            let n = f64::from(q.grounding.multiplicity[i]);
            let mut gpsi = 0.0;
            for (&(e, _), f) in g.counts.iter().zip(&phis[i]) {
                gpsi += ds[q.grounding.candidate_index(e).unwrap()] * n * f;
            }
            psi.push((id, gpsi));
            if let Some(emb) = &self.embeddings {
                let rule = self.table.rule(id);
                let theta = emb.body_phase(&rule.body);
                let rotated = emb.rotate(q.start, &theta);
                let scale = n * self.table.weight(id);
                for (&(e, _), &f) in g.counts.iter().zip(&phis[i]) {
                    let k = q.grounding.candidate_index(e).unwrap();
                    emb.accumulate_phi_grad(q.start, &rule.body, &theta, &rotated, e, f, ds[k] * scale, &mut embedding);
                }
            }
        }
        Some(InstanceGrad { loss, psi, embedding })
    }

    /// One mini-batch step on the mean loss of `queries`. Queries whose answer
    /// is not a candidate are skipped.
    pub fn train_step(&mut self, queries: &[Query<'_>]) -> Result<StepReport> {
        let grads: Vec<Option<InstanceGrad>> = queries.par_iter().map(|q| self.instance_gradient(q)).collect();
        let used = grads.iter().flatten().count();
        let skipped = grads.len() - used;
        if used == 0 {
            return Ok(StepReport {
                loss: None,
                used,
                skipped,
            });
        }
        let mut loss = 0.0;
        let mut psi: BTreeMap<usize, f64> = BTreeMap::new();
        let emb_len = self.embeddings.as_ref().map_or(0, |e| e.params().len());
        let mut emb = vec![0.0; emb_len];
        for g in grads.iter().flatten() {
            loss += g.loss;
            for &(id, v) in &g.psi {
                *psi.entry(id).or_default() += v;
            }
            for &(i, v) in &g.embedding {
                emb[i] += v;
            }
        }
        let scale = 1.0 / used as f64;
        loss *= scale;
        if !loss.is_finite() || psi.values().any(|v| !v.is_finite()) || emb.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite predictor loss {loss}")));
        }
        let sparse: Vec<(usize, f64)> = psi.into_iter().map(|(id, v)| (id, v * scale)).collect();
        self.psi_adam.step(&mut self.table.weights, &sparse, self.config.learning_rate);
        if let Some(e) = &mut self.embeddings {
            for v in &mut emb {
                *v *= scale;
            }
            self.embedding_adam
                .step(e.params_mut(), &emb, self.config.embedding_learning_rate);
        }
        Ok(StepReport {
            loss: Some(loss),
            used,
            skipped,
        })
    }

    /// Sets the weights of `ids` per the configured initialization. The
    /// heuristic averages, over the queries using each rule with a non-empty
    /// candidate set, `φ̄(answer | rule) − Σ_e φ̄(e | rule) / |𝒜|` (ψ taken as 1).
    pub fn init_rule_weights(&mut self, ids: &[usize], queries: &[Query<'_>]) {
        match self.config.init {
            WeightInit::Zero => ids.iter().for_each(|&id| self.table.set_weight(id, 0.0)),
            WeightInit::Random => {
                for &id in ids {
                    let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
                    rng.set_stream(id as u64);
                    self.table.set_weight(id, rng.gen_range(-0.1..0.1));
                }
            }
            WeightInit::Heuristic => {
                let targets: HashMap<usize, usize> = ids.iter().enumerate().map(|(k, &id)| (id, k)).collect();
                let partial: Vec<Vec<(usize, f64)>> = queries
                    .par_iter()
                    .map(|q| {
                        self.check_query(q);
                        let size = q.grounding.candidates.len();
                        if size == 0 {
                            return Vec::new();
                        }
                        q.rule_ids
                            .iter()
                            .zip(&q.grounding.per_rule)
                            .filter_map(|(id, g)| {
                                let k = *targets.get(id)?;
                                let phi = self.mean_phi(self.table.rule(*id), q.start, g);
                                let truth = g
                                    .counts
                                    .binary_search_by_key(&q.answer, |&(e, _)| e)
                                    .map_or(0.0, |i| phi[i]);
                                Some((k, truth - phi.iter().sum::<f64>() / size as f64))
                            })
                            .collect()
                    })
                    .collect();
                let mut sum = vec![0.0; ids.len()];
                let mut count = vec![0usize; ids.len()];
                for (k, v) in partial.into_iter().flatten() {
                    sum[k] += v;
                    count[k] += 1;
                }
                for (k, &id) in ids.iter().enumerate() {
                    let w = if count[k] == 0 { 0.0 } else { sum[k] / count[k] as f64 };
                    self.table.set_weight(id, w);
                }
            }
        }
    }

    /// `max |score(e)|` over the candidates (0 when there are none).
    pub fn max_abs_score(&self, q: &Query<'_>) -> f64 {
        self.score_answers(q).iter().fold(0.0, |m, s| m.max(s.abs()))
    }

    /// `head<TAB>body<TAB>ψ` lines for `ids` (all rules when `None`), by
    /// decreasing |ψ|, ties by rule order.
    pub fn export_rules(&self, ids: Option<&[usize]>, vocab: &Vocabularies) -> String {
        let mut chosen: Vec<usize> = match ids {
            Some(ids) => ids.to_vec(),
            None => (0..self.table.len()).collect(),
        };
        chosen.sort_by(|&a, &b| {
            self.table
                .weight(b)
                .abs()
                .total_cmp(&self.table.weight(a).abs())
                .then_with(|| self.table.rule(a).cmp(self.table.rule(b)))
        });
        chosen.dedup();
        chosen
            .into_iter()
            .map(|id| format_rule_line(self.table.rule(id), self.table.weight(id), vocab) + "\n")
            .collect()
    }
}
