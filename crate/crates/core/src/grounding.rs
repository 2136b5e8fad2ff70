//! Grounding chain rules on a (possibly masked) graph.
//!
//! Path counts are propagated layer by layer as `(entity, count)` lists, so a
//! rule is grounded without materializing its paths. When concrete paths are
//! needed (rotation path scores), they are recovered backwards from the layer
//! counts: all of them when there are at most `path_cap`, otherwise `path_cap`
//! uniform draws.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::kg::{EntityId, GraphView, RelationId};
use crate::rule::{Rule, RuleMultiset};

#[derive(Debug, Clone, PartialEq)]
pub struct GroundingConfig {
    /// Keep concrete entity paths per answer (needed for embedding scores).
    pub materialize_paths: bool,
    pub path_cap: usize,
    /// Entity visits per rule before it is declared oversaturated.
    pub fanout_limit: u64,
    pub seed: u64,
}

impl Default for GroundingConfig {
    fn default() -> Self {
        Self {
            materialize_paths: false,
            path_cap: 32,
            fanout_limit: 1_000_000,
            seed: 0,
        }
    }
}

/// Paths of one rule, per terminal entity.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RuleGrounding {
    /// `(entity, path count)` sorted by entity; counts are ≥ 1.
    pub counts: Vec<(EntityId, u64)>,
    /// Entity sequences `e₀ … e_l` per entry of `counts`, when materialized.
    pub paths: Option<Vec<Vec<Vec<EntityId>>>>,
    /// The fanout guard tripped; the rule contributes no evidence.
    pub oversaturated: bool,
}

impl RuleGrounding {
    pub fn count(&self, entity: EntityId) -> u64 {
        self.counts
            .binary_search_by_key(&entity, |&(e, _)| e)
            .map_or(0, |i| self.counts[i].1)
    }

    pub fn reaches(&self, entity: EntityId) -> bool {
        self.count(entity) > 0
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }
}

fn merge(mut items: Vec<(EntityId, u64)>) -> Vec<(EntityId, u64)> {
    items.sort_unstable_by_key(|&(e, _)| e);
    let mut out: Vec<(EntityId, u64)> = Vec::with_capacity(items.len());
    for (e, c) in items {
        match out.last_mut() {
            Some((le, lc)) if *le == e => *lc = lc.saturating_add(c),
            _ => out.push((e, c)),
        }
    }
    out
}

fn layer_count(layer: &[(EntityId, u64)], e: EntityId) -> u64 {
    layer
        .binary_search_by_key(&e, |&(x, _)| x)
        .map_or(0, |i| layer[i].1)
}

fn path_seed(seed: u64, start: EntityId, body: &[RelationId]) -> u64 {
    // FNV-1a over the start entity and body.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed;
    for x in std::iter::once(start).chain(body.iter().copied()) {
        for b in x.to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

/// Walks `body` from `start`, returning per-terminal path counts (and paths
/// when configured). An unreachable rule yields an empty grounding.
pub fn ground_rule(view: &GraphView<'_>, start: EntityId, body: &[RelationId], config: &GroundingConfig) -> RuleGrounding {
    let mut layers: Vec<Vec<(EntityId, u64)>> = vec![vec![(start, 1)]];
    let mut visits: u64 = 0;
    for &r in body {
        let mut next = Vec::new();
        for &(e, c) in layers.last().unwrap() {
            for t in view.neighbors(e, r) {
                next.push((t, c));
                visits += 1;
            }
            if visits > config.fanout_limit {
                return RuleGrounding {
                    oversaturated: true,
                    ..RuleGrounding::default()
                };
            }
        }
        if next.is_empty() {
            return RuleGrounding::default();
        }
        layers.push(merge(next));
    }
    let counts = layers.last().unwrap().clone();
    let paths = config.materialize_paths.then(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(path_seed(config.seed, start, body));
        counts
            .iter()
            .map(|&(e, c)| {
                if c as usize <= config.path_cap {
                    enumerate_paths(view, &layers, body, e)
                } else {
                    (0..config.path_cap)
                        .map(|_| sample_path(view, &layers, body, e, &mut rng))
                        .collect()
                }
            })
            .collect()
    });
    RuleGrounding {
        counts,
        paths,
        oversaturated: false,
    }
}

/// Predecessors `u` of `e` via `r` in layer `k - 1`, with their counts.
fn predecessors(
    view: &GraphView<'_>,
    layers: &[Vec<(EntityId, u64)>],
    body: &[RelationId],
    k: usize,
    e: EntityId,
) -> Vec<(EntityId, u64)> {
    let inv = view.graph().inverse(body[k - 1]);
    view.neighbors(e, inv)
        .filter_map(|u| {
            let c = layer_count(&layers[k - 1], u);
            (c > 0).then_some((u, c))
        })
        .collect()
}

fn enumerate_paths(
    view: &GraphView<'_>,
    layers: &[Vec<(EntityId, u64)>],
    body: &[RelationId],
    terminal: EntityId,
) -> Vec<Vec<EntityId>> {
    let l = body.len();
    let mut out = Vec::new();
    // Reversed partial paths, extended from the terminal towards the start.
    let mut stack = vec![vec![terminal]];
    while let Some(rev) = stack.pop() {
        let k = l + 1 - rev.len();
        if k == 0 {
            out.push(rev.into_iter().rev().collect());
            continue;
        }
        for (u, _) in predecessors(view, layers, body, k, *rev.last().unwrap()) {
            let mut next = rev.clone();
            next.push(u);
            stack.push(next);
        }
    }
    out.sort();
    out
}

fn sample_path<R: Rng>(
    view: &GraphView<'_>,
    layers: &[Vec<(EntityId, u64)>],
    body: &[RelationId],
    terminal: EntityId,
    rng: &mut R,
) -> Vec<EntityId> {
    let mut rev = vec![terminal];
    for k in (1..=body.len()).rev() {
        let preds = predecessors(view, layers, body, k, *rev.last().unwrap());
        let total: u64 = preds.iter().map(|p| p.1).sum();
        let mut u = rng.gen_range(0..total);
        let mut pick = preds[0].0;
        for &(e, c) in &preds {
            if u < c {
                pick = e;
                break;
            }
            u -= c;
        }
        rev.push(pick);
    }
    rev.reverse();
    rev
}

/// Groundings of every distinct rule of a multiset from one start entity.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundingResult {
    /// Candidate answers 𝒜, sorted.
    pub candidates: Vec<EntityId>,
    /// Indexed like the multiset's distinct rules.
    pub per_rule: Vec<RuleGrounding>,
    pub multiplicity: Vec<u32>,
    pub oversaturated: usize,
}

impl GroundingResult {
    pub fn contains(&self, entity: EntityId) -> bool {
        self.candidates.binary_search(&entity).is_ok()
    }

    pub fn candidate_index(&self, entity: EntityId) -> Option<usize> {
        self.candidates.binary_search(&entity).ok()
    }
}

pub fn ground_rule_set(view: &GraphView<'_>, start: EntityId, rules: &RuleMultiset, config: &GroundingConfig) -> GroundingResult {
    let mut per_rule = Vec::with_capacity(rules.distinct());
    let mut multiplicity = Vec::with_capacity(rules.distinct());
    let mut candidates = Vec::new();
    let mut oversaturated = 0;
    for (rule, n) in rules.iter() {
        let g = ground_rule(view, start, &rule.body, config);
        oversaturated += usize::from(g.oversaturated);
        candidates.extend(g.counts.iter().map(|&(e, _)| e));
        per_rule.push(g);
        multiplicity.push(n);
    }
    candidates.sort_unstable();
    candidates.dedup();
    GroundingResult {
        candidates,
        per_rule,
        multiplicity,
        oversaturated,
    }
}

/// `rule<TAB>answer<TAB>path_count` lines for debugging.
pub fn dump_groundings(
    rules: &RuleMultiset,
    result: &GroundingResult,
    rule_name: impl Fn(&Rule) -> String,
    entity_name: impl Fn(EntityId) -> String,
) -> String {
    let mut out = String::new();
    for (i, (rule, _)) in rules.iter().enumerate() {
        for &(e, c) in &result.per_rule[i].counts {
            out.push_str(&format!("{}\t{}\t{}\n", rule_name(rule), entity_name(e), c));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{augment_inverse, build_graph, make_instance, parse_triplets, KnowledgeGraph, Triplet, Vocabularies};

    fn alice() -> (Vocabularies, KnowledgeGraph) {
        let mut v = Vocabularies::default();
        let t = parse_triplets(
            "Alice\tfriend\tBob\nBob\thobby\tSing\nAlice\tfriend\tCharlie\nCharlie\thobby\tSki\n",
            "toy",
            &mut v,
        )
        .unwrap();
        let g = build_graph(&augment_inverse(&t, 2), v.entities.len(), 4);
        (v, g)
    }

    #[test]
    fn alice_hobby_example() {
        let (v, g) = alice();
        let view = GraphView::full(&g);
        let alice = v.entities.get("Alice").unwrap();
        let got = ground_rule(&view, alice, &[0, 1], &GroundingConfig::default());
        let sing = v.entities.get("Sing").unwrap();
        let ski = v.entities.get("Ski").unwrap();
        let mut want = vec![(sing, 1), (ski, 1)];
        want.sort();
        assert_eq!(got.counts, want);
    }

    #[test]
    fn missing_first_edge_gives_empty() {
        let (v, g) = alice();
        let bob = v.entities.get("Sing").unwrap();
        assert!(ground_rule(&GraphView::full(&g), bob, &[0, 1], &GroundingConfig::default()).is_empty());
    }

    #[test]
    fn diamond_counts_two_paths() {
        let raw = [
            Triplet::new(0, 0, 1),
            Triplet::new(0, 0, 2),
            Triplet::new(1, 1, 3),
            Triplet::new(2, 1, 3),
        ];
        let g = build_graph(&augment_inverse(&raw, 2), 4, 4);
        let cfg = GroundingConfig {
            materialize_paths: true,
            ..GroundingConfig::default()
        };
        let got = ground_rule(&GraphView::full(&g), 0, &[0, 1], &cfg);
        assert_eq!(got.counts, vec![(3, 2)]);
        assert_eq!(got.paths.unwrap()[0], vec![vec![0, 1, 3], vec![0, 2, 3]]);
    }

    #[test]
    fn capped_paths_are_sampled_valid_walks() {
        // 0 → {1..=40} → 41 gives 40 paths, above the cap of 8.
        let mut raw = Vec::new();
        for m in 1..=40 {
            raw.push(Triplet::new(0, 0, m));
            raw.push(Triplet::new(m, 1, 41));
        }
        let g = build_graph(&augment_inverse(&raw, 2), 42, 4);
        let cfg = GroundingConfig {
            materialize_paths: true,
            path_cap: 8,
            ..GroundingConfig::default()
        };
        let got = ground_rule(&GraphView::full(&g), 0, &[0, 1], &cfg);
        assert_eq!(got.counts, vec![(41, 40)]);
        let paths = &got.paths.unwrap()[0];
        assert_eq!(paths.len(), 8);
        for p in paths {
            assert!(g.contains(Triplet::new(p[0], 0, p[1])) && g.contains(Triplet::new(p[1], 1, p[2])));
        }
    }

    #[test]
    fn fanout_guard_marks_oversaturated() {
        let mut raw = Vec::new();
        for m in 1..=50 {
            raw.push(Triplet::new(0, 0, m));
        }
        let g = build_graph(&augment_inverse(&raw, 1), 51, 2);
        let cfg = GroundingConfig {
            fanout_limit: 10,
            ..GroundingConfig::default()
        };
        let got = ground_rule(&GraphView::full(&g), 0, &[0], &cfg);
        assert!(got.oversaturated && got.is_empty());
    }

    #[test]
    fn multiset_grounding_memoizes_and_unions() {
        let (v, g) = alice();
        let view = GraphView::full(&g);
        let alice = v.entities.get("Alice").unwrap();
        let mut rules = RuleMultiset::new();
        rules.add(Rule::new(1, vec![0, 1]), 2);
        rules.add(Rule::new(1, vec![0]), 1);
        let res = ground_rule_set(&view, alice, &rules, &GroundingConfig::default());
        assert_eq!(res.per_rule.len(), 2);
        assert_eq!(res.multiplicity, vec![2, 1]);
        // Disjoint answers: {Sing, Ski} and {Bob, Charlie}.
        assert_eq!(res.candidates.len(), 4);
    }

    #[test]
    fn masked_edge_is_never_traversed() {
        // The only 2-hop route from 0 to 2 uses the edge (0, a, 1).
        let raw = [Triplet::new(0, 0, 1), Triplet::new(1, 1, 2), Triplet::new(0, 2, 2)];
        let g = build_graph(&augment_inverse(&raw, 3), 3, 6);
        let inst = make_instance(&g, Triplet::new(0, 0, 1)).unwrap();
        assert!(ground_rule(&inst.view, 0, &[0, 1], &GroundingConfig::default()).is_empty());
        // From 2 backwards via inverses, the masked inverse edge (1, a⁻¹, 0) blocks too.
        assert!(ground_rule(&inst.view, 2, &[4, 3], &GroundingConfig::default()).is_empty());
        assert_eq!(
            ground_rule(&GraphView::full(&g), 0, &[0, 1], &GroundingConfig::default()).counts,
            vec![(2, 1)]
        );
    }
}
