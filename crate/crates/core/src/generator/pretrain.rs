//! Warm-starting the generator on relation paths observed in the graph.
//!
//! For each training edge `(h, r, t)` the edge and its inverse are hidden and
//! relation paths from `h` to `t` of length at most the rule limit are drawn:
//! a length is picked uniformly among those with at least one walk, then a
//! walk of that length is drawn uniformly using backward walk counts.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::GeneratorModel;
use crate::error::Result;
use crate::kg::{make_instance, EntityId, GraphView, KnowledgeGraph, RelationId, Triplet};
use crate::rule::{Rule, RuleMultiset};

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub walks_per_triplet: usize,
    /// Full-batch MLE steps on the collected paths.
    pub steps: usize,
    pub seed: u64,
}

/// Walk counts to `target`: `counts[k][x]` is the number of length-`k` walks
/// from `x` that end at `target`.
fn walk_counts(view: &GraphView<'_>, target: EntityId, max_len: usize) -> Vec<HashMap<EntityId, f64>> {
    let graph = view.graph();
    let mut counts = vec![HashMap::from([(target, 1.0)])];
    for k in 1..=max_len {
        let mut next: HashMap<EntityId, f64> = HashMap::new();
        let mut frontier: Vec<_> = counts[k - 1].iter().map(|(&e, &c)| (e, c)).collect();
        frontier.sort_unstable_by_key(|&(e, _)| e);
        for (y, cy) in frontier {
            // In-edge (x, r, y) is stored as out-edge (y, r⁻¹, x).
            for (inv_r, x) in graph.out_edges(y) {
                let r = graph.inverse(inv_r);
                if view.contains(Triplet::new(x, r, y)) {
                    *next.entry(x).or_default() += cy;
                }
            }
        }
        counts.push(next);
    }
    counts
}

fn sample_path<R: Rng + ?Sized>(
    view: &GraphView<'_>,
    start: EntityId,
    counts: &[HashMap<EntityId, f64>],
    rng: &mut R,
) -> Option<Vec<RelationId>> {
    let lengths: Vec<usize> = (1..counts.len())
        .filter(|&k| counts[k].get(&start).copied().unwrap_or(0.0) > 0.0)
        .collect();
    if lengths.is_empty() {
        return None;
    }
    let len = lengths[rng.gen_range(0..lengths.len())];
    let mut at = start;
    let mut body = Vec::with_capacity(len);
    for k in (1..=len).rev() {
        let options: Vec<(RelationId, EntityId, f64)> = view
            .out_edges(at)
            .filter_map(|(r, y)| counts[k - 1].get(&y).map(|&c| (r, y, c)))
            .collect();
        let total: f64 = options.iter().map(|o| o.2).sum();
        let mut u = rng.gen::<f64>() * total;
        let mut pick = options[options.len() - 1];
        for o in &options {
            if u < o.2 {
                pick = *o;
                break;
            }
            u -= o.2;
        }
        body.push(pick.0);
        at = pick.1;
    }
    Some(body)
}

/// Relation paths for every triplet, `walks_per_triplet` draws each, as
/// rules headed by the triplet's relation. Triplets with no path are skipped.
pub fn collect_path_rules(
    graph: &KnowledgeGraph,
    triplets: &[Triplet],
    max_len: usize,
    walks_per_triplet: usize,
    seed: u64,
) -> Result<RuleMultiset> {
    if walks_per_triplet == 0 {
        return Ok(RuleMultiset::new());
    }
    let per: Vec<Vec<Rule>> = triplets
        .par_iter()
        .enumerate()
        .map(|(i, &t)| -> Result<Vec<Rule>> {
            let inst = make_instance(graph, t)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let counts = walk_counts(&inst.view, t.tail, max_len);
            Ok((0..walks_per_triplet)
                .filter_map(|_| sample_path(&inst.view, t.head, &counts, &mut rng))
                .map(|body| Rule {
                    head: t.relation,
                    body,
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(per.into_iter().flatten().collect())
}

impl GeneratorModel {
    /// Collects graph paths and runs `config.steps` MLE steps on them.
    /// Returns the per-step loss trace.
    pub fn pretrain_on_paths(
        &mut self,
        graph: &KnowledgeGraph,
        triplets: &[Triplet],
        config: &PretrainConfig,
    ) -> Result<Vec<f64>> {
        let rules = collect_path_rules(
            graph,
            triplets,
            self.config.max_rule_len,
            config.walks_per_triplet,
            config.seed,
        )?;
        if rules.is_empty() {
            return Ok(Vec::new());
        }
        let data = super::train::weighted(&rules);
        (0..config.steps).map(|_| self.mle_step(&data)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{augment_inverse, build_graph};

    /// 0 -a-> 1 -b-> 2 and 0 -c-> 2, plus a diamond through 3.
    fn toy() -> KnowledgeGraph {
        let raw = [
            Triplet::new(0, 0, 1),
            Triplet::new(1, 1, 2),
            Triplet::new(0, 2, 2),
            Triplet::new(0, 0, 3),
            Triplet::new(3, 1, 2),
        ];
        build_graph(&augment_inverse(&raw, 3), 5, 6)
    }

    #[test]
    fn walk_counts_match_hand_enumeration() {
        let g = toy();
        let inst = make_instance(&g, Triplet::new(0, 2, 2)).unwrap();
        let counts = walk_counts(&inst.view, 2, 2);
        // Two length-2 walks 0→2 (via 1 and via 3); the direct edge is masked.
        assert_eq!(counts[2].get(&0), Some(&2.0));
        assert_eq!(counts[1].get(&0), None);
    }

    #[test]
    fn sampled_paths_connect_head_to_tail() {
        let g = toy();
        let rules = collect_path_rules(&g, &[Triplet::new(0, 2, 2)], 2, 20, 1).unwrap();
        assert_eq!(rules.total(), 20);
        for (r, _) in rules.iter() {
            assert_eq!(r.body, vec![0, 1]);
            assert_eq!(r.head, 2);
        }
    }

    #[test]
    fn disconnected_pair_is_skipped() {
        let g = build_graph(&augment_inverse(&[Triplet::new(0, 0, 1), Triplet::new(2, 0, 3)], 1), 4, 2);
        let rules = collect_path_rules(&g, &[Triplet::new(0, 0, 1)], 3, 5, 0).unwrap();
        // Only back-and-forth walks would exist, and those return to 0, never 1.
        assert!(rules.is_empty());
    }
}
