use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;

use super::{GeneratorModel, State};
use crate::error::Result;
use crate::kg::RelationId;
use crate::rule::{Rule, RuleMultiset};

/// Attempts per sample before a truncated draw is kept at maximum length.
pub const MAX_SAMPLE_ATTEMPTS: usize = 10;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SampleStats {
    /// Draws that hit the length limit without END and were redrawn.
    pub truncated_draws: u64,
    /// Samples kept at maximum length after exhausting their attempts.
    pub kept_truncated: u64,
    /// Distinct prefixes evaluated by the network.
    pub prefixes_evaluated: usize,
}

/// Memoizes the next-token distribution for every prefix seen while sampling.
struct PrefixCache<'m> {
    model: &'m GeneratorModel,
    head: RelationId,
    entries: HashMap<Vec<RelationId>, (Rc<State>, Rc<Vec<f64>>)>,
}

impl<'m> PrefixCache<'m> {
    fn new(model: &'m GeneratorModel, head: RelationId) -> Self {
        Self {
            model,
            head,
            entries: HashMap::new(),
        }
    }

    /// Probabilities over relations + END after `prefix`.
    fn probs(&mut self, prefix: &[RelationId]) -> Rc<Vec<f64>> {
        if let Some((_, p)) = self.entries.get(prefix) {
            return Rc::clone(p);
        }
        let (parent_state, input) = match prefix.split_last() {
            None => (Rc::new(self.model.initial_state(self.head)), None),
            Some((&last, rest)) => {
                self.probs(rest);
                (Rc::clone(&self.entries[rest].0), Some(last))
            }
        };
        let (state, logp) = self.model.step(self.head, &parent_state, input, prefix.len());
        let probs = Rc::new(logp.iter().map(|l| l.exp()).collect::<Vec<_>>());
        self.entries
            .insert(prefix.to_vec(), (Rc::new(state), Rc::clone(&probs)));
        probs
    }
}

fn draw<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

impl GeneratorModel {
    /// `n` ancestral samples for `head`, as a multiset.
    pub fn sample_rules<R: Rng + ?Sized>(&self, head: RelationId, n: usize, rng: &mut R) -> Result<RuleMultiset> {
        self.sample_rules_with_stats(head, n, rng).map(|(m, _)| m)
    }

    pub fn sample_rules_with_stats<R: Rng + ?Sized>(
        &self,
        head: RelationId,
        n: usize,
        rng: &mut R,
    ) -> Result<(RuleMultiset, SampleStats)> {
        self.check_head(head)?;
        let max_len = self.config.max_rule_len;
        let end = self.end_token();
        let mut cache = PrefixCache::new(self, head);
        let mut stats = SampleStats::default();
        let mut out = RuleMultiset::new();
        for _ in 0..n {
            let mut attempt = 0;
            let body = loop {
                attempt += 1;
                let mut prefix: Vec<RelationId> = Vec::with_capacity(max_len);
                let complete = loop {
                    let probs = cache.probs(&prefix);
                    if prefix.len() == max_len {
                        break rng.gen::<f64>() < probs[end];
                    }
                    let tok = draw(&probs, rng);
                    if tok == end {
                        break true;
                    }
                    prefix.push(tok as RelationId);
                };
                if complete {
                    break prefix;
                }
                if attempt >= MAX_SAMPLE_ATTEMPTS {
                    stats.kept_truncated += 1;
                    break prefix;
                }
                stats.truncated_draws += 1;
            };
            out.insert(Rule { head, body });
        }
        stats.prefixes_evaluated = cache.entries.len();
        Ok((out, stats))
    }

    /// Step-wise argmax decode.
    pub fn greedy_decode(&self, head: RelationId) -> Result<Rule> {
        self.check_head(head)?;
        let end = self.end_token();
        let mut state = self.initial_state(head);
        let mut body = Vec::new();
        let mut input = None;
        while body.len() < self.config.max_rule_len {
            let (next, logp) = self.step(head, &state, input, body.len());
            let best = argmax(&logp);
            if best == end {
                break;
            }
            body.push(best as RelationId);
            input = Some(best as RelationId);
            state = next;
        }
        Ok(Rule { head, body })
    }

    /// Top-`top` complete rules for `head` by log-probability, best first.
    /// Finished hypotheses compete for beam slots, so `beam_width = 1` is greedy
    /// decoding and a width at least the number of complete sequences is exact.
    pub fn beam_search(&self, head: RelationId, top: usize, beam_width: usize) -> Result<Vec<(Rule, f64)>> {
        self.check_head(head)?;
        if top == 0 || beam_width == 0 {
            return Ok(Vec::new());
        }
        struct Hyp {
            body: Vec<RelationId>,
            logp: f64,
            state: Option<Rc<State>>,
        }
        let end = self.end_token();
        let max_len = self.config.max_rule_len;
        let mut beam = vec![Hyp {
            body: Vec::new(),
            logp: 0.0,
            state: Some(Rc::new(self.initial_state(head))),
        }];
        for depth in 0..=max_len {
            let mut next: Vec<Hyp> = Vec::new();
            for hyp in beam {
                let Some(state) = hyp.state else {
                    next.push(hyp);
                    continue;
                };
                let input = hyp.body.last().copied();
                let (child, logp) = self.step(head, &state, input, depth);
                if depth > 0 {
                    next.push(Hyp {
                        body: hyp.body.clone(),
                        logp: hyp.logp + logp[end],
                        state: None,
                    });
                }
                if depth < max_len {
                    let child = Rc::new(child);
                    for (r, &lp) in logp[..end].iter().enumerate() {
                        let mut body = hyp.body.clone();
                        body.push(r as RelationId);
                        next.push(Hyp {
                            body,
                            logp: hyp.logp + lp,
                            state: Some(Rc::clone(&child)),
                        });
                    }
                }
            }
            next.sort_by(|a, b| b.logp.total_cmp(&a.logp).then_with(|| a.body.cmp(&b.body)));
            next.truncate(beam_width);
            let done = next.iter().all(|h| h.state.is_none());
            beam = next;
            if done {
                break;
            }
        }
        Ok(beam
            .into_iter()
            .filter(|h| h.state.is_none())
            .take(top)
            .map(|h| (Rule { head, body: h.body }, h.logp))
            .collect())
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
