use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rulecraft::grounding::{ground_rule, GroundingConfig};
use rulecraft::kg::{augment_inverse, build_graph, make_instance, GraphView, KnowledgeGraph, Triplet};

/// Walks following `body` from `at`, counted by brute-force recursion over
/// the raw edge list.
fn dfs(edges: &[Triplet], masked: &[Triplet], at: u32, body: &[u32], counts: &mut Vec<u64>) {
    let Some((&r, rest)) = body.split_first() else {
        counts[at as usize] += 1;
        return;
    };
    for e in edges {
        if e.head == at && e.relation == r && !masked.contains(e) {
            dfs(edges, masked, e.tail, rest, counts);
        }
    }
}

fn random_graph(rng: &mut ChaCha8Rng) -> (KnowledgeGraph, Vec<Triplet>, u32, u32) {
    let n = rng.gen_range(2..=10u32);
    let raw = rng.gen_range(1..=3u32);
    let m = rng.gen_range(1..=15);
    let edges: Vec<Triplet> = (0..m)
        .map(|_| Triplet::new(rng.gen_range(0..n), rng.gen_range(0..raw), rng.gen_range(0..n)))
        .collect();
    let augmented = augment_inverse(&edges, raw);
    let graph = build_graph(&augmented, n as usize, 2 * raw as usize);
    let all: Vec<Triplet> = graph.triplets().collect();
    assert!(all.len() <= 30);
    (graph, all, n, raw)
}

#[test]
fn path_counts_match_exhaustive_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let config = GroundingConfig::default();
    let mut compared = 0;
    for _ in 0..100 {
        let (graph, edges, n, raw) = random_graph(&mut rng);
        for _ in 0..10 {
            let len = rng.gen_range(1..=4);
            let body: Vec<u32> = (0..len).map(|_| rng.gen_range(0..2 * raw)).collect();
            for start in 0..n {
                let mut expected = vec![0u64; n as usize];
                dfs(&edges, &[], start, &body, &mut expected);
                let got = ground_rule(&GraphView::full(&graph), start, &body, &config);
                for e in 0..n {
                    assert_eq!(got.count(e), expected[e as usize], "start {start} body {body:?} end {e}");
                }
                compared += 1;
            }
        }
    }
    assert!(compared > 1000);
}

#[test]
fn masked_counts_match_enumeration_without_the_triplet() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let config = GroundingConfig::default();
    for _ in 0..100 {
        let (graph, edges, n, raw) = random_graph(&mut rng);
        let picked = edges[rng.gen_range(0..edges.len())];
        let inst = make_instance(&graph, picked).unwrap();
        let masked = [picked, picked.inverse(raw)];
        let body: Vec<u32> = (0..rng.gen_range(1..=3)).map(|_| rng.gen_range(0..2 * raw)).collect();
        let mut expected = vec![0u64; n as usize];
        dfs(&edges, &masked, picked.head, &body, &mut expected);
        let got = ground_rule(&inst.view, picked.head, &body, &config);
        for e in 0..n {
            assert_eq!(got.count(e), expected[e as usize]);
        }
    }
}
