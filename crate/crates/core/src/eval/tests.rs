use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::kg::parse_triplets;
use crate::rule::Rule;

/// Position of `answer` after filtering, with ties and missing entities
/// ordered uniformly at random, averaged over `trials` orderings.
fn monte_carlo_rank(probs: &[(EntityId, f64)], answer: EntityId, filter: &HashSet<EntityId>, n: usize, trials: usize, rng: &mut ChaCha8Rng) -> f64 {
    let p_of = |e: EntityId| probs.iter().find(|(x, _)| *x == e).map_or(0.0, |&(_, p)| p);
    let entities: Vec<(EntityId, f64)> = (0..n as EntityId)
        .filter(|e| !filter.contains(e))
        .map(|e| (e, p_of(e)))
        .collect();
    let mut total = 0.0;
    let mut order = entities.clone();
    for _ in 0..trials {
        order.shuffle(rng);
        order.sort_by(|a, b| b.1.total_cmp(&a.1));
        let pos = order.iter().position(|(e, _)| *e == answer).unwrap();
        total += (pos + 1) as f64;
    }
    total / trials as f64
}

fn random_config(rng: &mut ChaCha8Rng) -> (Vec<(EntityId, f64)>, EntityId, HashSet<EntityId>) {
    let mut ids: Vec<EntityId> = (0..8).collect();
    ids.shuffle(rng);
    let levels = [0.1, 0.2, 0.3];
    let probs: Vec<(EntityId, f64)> = ids[..3]
        .iter()
        .map(|&e| (e, levels[rng.gen_range(0..levels.len())]))
        .collect();
    let answer = ids[rng.gen_range(0..3)];
    let filtered = if rng.gen_bool(0.5) { ids[3] } else { ids[rng.gen_range(0..3)] };
    let filter: HashSet<EntityId> = [filtered].into_iter().filter(|&e| e != answer).collect();
    (probs, answer, filter)
}

#[test]
fn zero_probability_answer_uses_block_formula() {
    let probs: Vec<(EntityId, f64)> = (0..10).map(|e| (e, 0.1)).collect();
    let rank = rank_answer(&probs, 50, &HashSet::new(), 135).unwrap();
    assert_eq!(rank, 72.5);
}

#[test]
fn answer_outside_candidates_counts_as_zero_probability() {
    let probs = vec![(0, 0.6), (1, 0.4)];
    assert_eq!(rank_answer(&probs, 7, &HashSet::new(), 10).unwrap(), 2.0 + 8.0 / 2.0);
}

#[test]
fn unique_best_answer_ranks_first() {
    let probs = vec![(0, 0.2), (1, 0.7), (2, 0.1)];
    assert_eq!(rank_answer(&probs, 1, &HashSet::new(), 40).unwrap(), 1.0);
}

#[test]
fn ties_are_averaged() {
    let probs = vec![(0, 0.4), (1, 0.2), (2, 0.2), (3, 0.2)];
    assert_eq!(rank_answer(&probs, 2, &HashSet::new(), 5).unwrap(), 3.0);
}

#[test]
fn filtered_competitors_are_removed() {
    let probs = vec![(0, 0.5), (1, 0.3), (2, 0.2)];
    let filter: HashSet<EntityId> = [0].into();
    assert_eq!(rank_answer(&probs, 1, &filter, 3).unwrap(), 1.0);
}

#[test]
fn answer_in_filter_is_rejected() {
    let filter: HashSet<EntityId> = [3].into();
    assert!(matches!(rank_answer(&[], 3, &filter, 5), Err(Error::InvalidArgument(_))));
}

#[test]
fn rank_matches_monte_carlo_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let (probs, answer, filter) = random_config(&mut rng);
        let rank = rank_answer(&probs, answer, &filter, 8).unwrap();
        let oracle = monte_carlo_rank(&probs, answer, &filter, 8, 20_000, &mut rng);
        assert!((rank - oracle).abs() <= 0.05, "{probs:?} {answer} {filter:?}: {rank} vs {oracle}");
    }
}

#[test]
fn zero_probability_rank_sits_half_a_place_above_random_tie_breaking() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let probs = vec![(0, 0.5), (1, 0.3), (2, 0.2)];
    let filter: HashSet<EntityId> = [4].into();
    let rank = rank_answer(&probs, 6, &filter, 8).unwrap();
    let oracle = monte_carlo_rank(&probs, 6, &filter, 8, 50_000, &mut rng);
    assert_eq!(rank, 3.0 + 4.0 / 2.0);
    assert!((oracle - 0.5 - rank).abs() <= 0.05, "{oracle}");
}

#[test]
fn filtering_never_raises_rank_and_rank_stays_in_bounds() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..500 {
        let n = rng.gen_range(2..20);
        let probs: Vec<(EntityId, f64)> = (0..n as EntityId)
            .filter_map(|e| rng.gen_bool(0.5).then(|| (e, f64::from(rng.gen_range(0..4u8)) / 4.0)))
            .collect();
        let answer = rng.gen_range(0..n as EntityId);
        let mut filter = HashSet::new();
        let mut prev = rank_answer(&probs, answer, &filter, n).unwrap();
        for e in 0..n as EntityId {
            if e == answer || rng.gen_bool(0.5) {
                continue;
            }
            filter.insert(e);
            let rank = rank_answer(&probs, answer, &filter, n).unwrap();
            assert!(rank <= prev + 1e-12, "{rank} > {prev}");
            assert!(rank >= 1.0 && rank <= (n - filter.len()) as f64);
            prev = rank;
        }
    }
}

#[test]
fn aggregates_match_rank_list() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ranks: Vec<QueryRank> = (0..300)
        .map(|i| QueryRank {
            query: Triplet::new(i, 0, 0),
            rank: f64::from(rng.gen_range(2..60u32)) / 2.0,
            candidates: 0,
        })
        .collect();
    let result = RankingResult::new(ranks.clone());
    let n = ranks.len() as f64;
    let mrr = ranks.iter().map(|r| 1.0 / r.rank).sum::<f64>() / n;
    let h = |k: f64| ranks.iter().filter(|r| r.rank <= k).count() as f64 / n;
    assert_eq!(result.metrics.mrr, mrr);
    assert_eq!(result.metrics.hits1, h(1.0));
    assert_eq!(result.metrics.hits3, h(3.0));
    assert_eq!(result.metrics.hits10, h(10.0));
    assert!(result.metrics.hits1 <= result.metrics.hits3 && result.metrics.hits3 <= result.metrics.hits10);
    assert!(result.metrics.mrr > 0.0 && result.metrics.mrr <= 1.0);
}

/// `copy` mirrors `base` exactly, so `copy ⇐ base` always finds the answer.
fn mirrored() -> Dataset {
    let mut vocab = Vocabularies::default();
    let mut train = String::new();
    let mut test = String::new();
    for i in 0..12 {
        let _ = writeln!(train, "e{i}\tbase\te{}", (i + 5) % 12);
        let line = format!("e{i}\tcopy\te{}\n", (i + 5) % 12);
        if i < 8 {
            train.push_str(&line);
        } else {
            test.push_str(&line);
        }
    }
    let train = parse_triplets(&train, "train", &mut vocab).unwrap();
    let test = parse_triplets(&test, "test", &mut vocab).unwrap();
    Dataset::from_splits(vocab, train, Vec::new(), test)
}

#[test]
fn perfect_rules_give_perfect_metrics() {
    let ds = mirrored();
    let raw = ds.vocab.raw_relation_count();
    let (base, copy) = (ds.vocab.relation_id("base").unwrap(), ds.vocab.relation_id("copy").unwrap());
    let mut rules = BTreeMap::new();
    for (head, body) in [(copy, base), (copy + raw, base + raw)] {
        let mut set = RuleMultiset::new();
        set.insert(Rule::new(head, vec![body]));
        rules.insert(head, set);
    }
    let mut predictor = Predictor::new(PredictorConfig::default(), ds.graph.num_entities(), raw as usize).unwrap();
    let queries = test_queries(&ds.test, raw);
    let result = rank_with_rules(&mut predictor, &ds, &rules, &queries, &EvalConfig::default()).unwrap();
    assert_eq!(result.ranks.len(), 8);
    assert_eq!(result.metrics.mrr, 1.0);
    assert_eq!(result.metrics.hits1, 1.0);
    assert_eq!(result.metrics.mr, 1.0);
}

#[test]
fn no_rules_fall_back_to_block_rank() {
    let ds = mirrored();
    let raw = ds.vocab.raw_relation_count();
    let mut predictor = Predictor::new(PredictorConfig::default(), ds.graph.num_entities(), raw as usize).unwrap();
    let queries = test_queries(&ds.test, raw);
    let result = rank_with_rules(&mut predictor, &ds, &BTreeMap::new(), &queries, &EvalConfig::default()).unwrap();
    for q in &result.ranks {
        assert_eq!(q.rank, 12.0 / 2.0);
    }
}

#[test]
fn filter_index_covers_all_splits_and_inverses() {
    let ds = mirrored();
    let filter = FilterIndex::from_dataset(&ds);
    let raw = ds.vocab.raw_relation_count();
    let t = ds.test[0];
    assert!(filter.filter_for(t).is_empty());
    let inv = t.inverse(raw);
    assert!(filter.filter_for(inv).is_empty());
    let known = filter.filter_for(Triplet::new(t.head, t.relation, t.head));
    assert_eq!(known, [t.tail].into());
}

#[test]
fn metrics_render() {
    let m = RankingResult::new(vec![
        QueryRank { query: Triplet::new(0, 0, 1), rank: 1.0, candidates: 2 },
        QueryRank { query: Triplet::new(0, 0, 1), rank: 4.0, candidates: 2 },
    ])
    .metrics;
    assert_eq!(m.record(), "queries=2 mr=2.500000 mrr=0.625000 hits1=0.500000 hits3=0.500000 hits10=1.000000");
    assert_eq!(m.row(), "    2.50  0.6250   50.0   50.0  100.0");
    let table = budget_table(&[BudgetRow { rules_per_query: 10, metrics: m }]);
    assert_eq!(table.lines().count(), 2);
}
