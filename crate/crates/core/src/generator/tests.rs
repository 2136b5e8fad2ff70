use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::kg::{augment_inverse, build_graph, Triplet};

fn tiny(num_relations: usize, max_len: usize) -> GeneratorConfig {
    GeneratorConfig {
        num_relations,
        max_rule_len: max_len,
        embedding_dim: 3,
        input_size: 4,
        hidden_size: 3,
        learning_rate: 0.05,
        lr_decay_steps: 0,
    }
}

/// Plain-loop forward over the flat parameters; shares nothing with the
/// ndarray path besides the tensor offsets.
fn reference_log_probs(m: &GeneratorModel, head: usize, body: &[u32]) -> Vec<Vec<f64>> {
    let c = m.config();
    let (r, e, x, h) = (c.num_relations, c.embedding_dim, c.input_size, c.hidden_size);
    let ranges = m.tensor_ranges();
    let t = |name: &str| -> &[f64] {
        let (_, rg) = ranges.iter().find(|(n, _)| *n == name).unwrap();
        &m.params()[rg.clone()]
    };
    let emb = |tok: usize| &t("embedding")[tok * e..(tok + 1) * e];
    let matvec = |w: &[f64], b: &[f64], rows: usize, v: &[f64]| -> Vec<f64> {
        (0..rows)
            .map(|i| b[i] + (0..v.len()).map(|j| w[i * v.len() + j] * v[j]).sum::<f64>())
            .collect()
    };
    let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
    let mut hid = matvec(t("init_w"), t("init_b"), h, emb(head));
    let mut cell = vec![0.0; h];
    let mut out = Vec::new();
    let mut input = r;
    for depth in 0..=body.len() {
        let cat: Vec<f64> = emb(head).iter().chain(emb(input)).copied().collect();
        let xin = matvec(t("input_w"), t("input_b"), x, &cat);
        let a = matvec(t("w_ih"), t("gate_b"), 4 * h, &xin);
        let zero = vec![0.0; 4 * h];
        let bh = matvec(t("w_hh"), &zero, 4 * h, &hid);
        let z: Vec<f64> = a.iter().zip(&bh).map(|(p, q)| p + q).collect();
        for k in 0..h {
            let (i, f, g, o) = (sig(z[k]), sig(z[h + k]), z[2 * h + k].tanh(), sig(z[3 * h + k]));
            cell[k] = f * cell[k] + i * g;
            hid[k] = o * cell[k].tanh();
        }
        let mut logits = matvec(t("output_w"), t("output_b"), r + 1, &hid);
        if depth == 0 {
            logits[r] = f64::NEG_INFINITY;
        }
        let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
        out.push(logits.iter().map(|l| l - mx - z.ln()).collect());
        if depth < body.len() {
            input = body[depth] as usize;
        }
    }
    out
}

/// Every complete rule with its exact probability, plus total truncated mass.
fn enumerate(m: &GeneratorModel, head: u32) -> (Vec<(Rule, f64)>, f64) {
    let c = m.config();
    let mut complete = Vec::new();
    let mut truncated = 0.0;
    let mut stack = vec![(Vec::<u32>::new(), 0.0f64)];
    while let Some((prefix, lp)) = stack.pop() {
        let steps = reference_log_probs(m, head as usize, &prefix);
        let last = steps.last().unwrap();
        if !prefix.is_empty() {
            complete.push((Rule::new(head, prefix.clone()), lp + last[c.num_relations]));
        }
        for rel in 0..c.num_relations {
            let next = lp + last[rel];
            if prefix.len() == c.max_rule_len {
                truncated += next.exp();
            } else {
                let mut p = prefix.clone();
                p.push(rel as u32);
                stack.push((p, next));
            }
        }
    }
    (complete, truncated)
}

#[test]
fn equal_seeds_give_identical_parameters() {
    let a = GeneratorModel::new(GeneratorConfig::desk(5, 3), 7).unwrap();
    let b = GeneratorModel::new(GeneratorConfig::desk(5, 3), 7).unwrap();
    let bytes = |m: &GeneratorModel| m.params().iter().flat_map(|p| p.to_le_bytes()).collect::<Vec<u8>>();
    assert_eq!(bytes(&a), bytes(&b));
    let c = GeneratorModel::new(GeneratorConfig::desk(5, 3), 8).unwrap();
    assert_ne!(bytes(&a), bytes(&c));
}

#[test]
fn standard_and_desk_sizes() {
    let s = GeneratorConfig::standard(10, 3);
    assert_eq!((s.input_size, s.hidden_size), (512, 256));
    let d = GeneratorConfig::desk(10, 3);
    assert_eq!((d.input_size, d.hidden_size), (64, 64));
    assert!(GeneratorModel::new(d, 1).is_ok());
}

#[test]
fn zero_relations_is_invalid_config() {
    assert!(matches!(
        GeneratorModel::new(GeneratorConfig::desk(0, 3), 1),
        Err(Error::InvalidConfig(_))
    ));
}

#[test]
fn step_matches_reference_forward() {
    let m = GeneratorModel::new(tiny(3, 3), 11).unwrap();
    let body = [2u32, 0, 1];
    let reference = reference_log_probs(&m, 1, &body);
    let mut state = m.initial_state(1);
    let mut input = None;
    for (depth, want) in reference.iter().enumerate() {
        let (next, got) = m.step(1, &state, input, depth);
        for (a, b) in got.iter().zip(want) {
            assert!(a == b || (a - b).abs() < 1e-12, "{a} vs {b}");
        }
        state = next;
        input = body.get(depth).copied();
    }
}

#[test]
fn per_step_distributions_are_normalized() {
    let m = GeneratorModel::new(tiny(4, 3), 3).unwrap();
    let mut state = m.initial_state(0);
    for depth in 0..4 {
        let (next, logp) = m.step(0, &state, if depth == 0 { None } else { Some(1) }, depth);
        let total: f64 = logp.iter().map(|l| l.exp()).sum();
        assert!((total - 1.0).abs() < 1e-6);
        state = next;
    }
}

#[test]
fn log_prob_is_a_probability() {
    let m = GeneratorModel::new(tiny(3, 3), 5).unwrap();
    for body in [vec![0], vec![1, 2], vec![2, 2, 2]] {
        let lp = m.rule_log_prob(&Rule::new(0, body)).unwrap();
        assert!(lp <= 0.0 && lp.exp() > 0.0);
    }
    assert!(m.rule_log_prob(&Rule::new(0, vec![0, 0, 0, 0])).is_err());
}

#[test]
fn single_relation_rule_probability_by_enumeration() {
    let m = GeneratorModel::new(tiny(1, 1), 9).unwrap();
    let steps = reference_log_probs(&m, 0, &[0]);
    // First step has END masked, so relation 0 gets all the mass.
    assert!((steps[0][0].exp() - 1.0).abs() < 1e-12);
    let expected = steps[0][0] + steps[1][1];
    let got = m.rule_log_prob(&Rule::new(0, vec![0])).unwrap();
    assert!((got - expected).abs() < 1e-12);
}

#[test]
fn exhaustive_mass_sums_to_one() {
    for (r, l, seed) in [(3, 2, 1), (2, 3, 2), (4, 2, 3), (4, 3, 4)] {
        let m = GeneratorModel::new(tiny(r, l), seed).unwrap();
        for head in 0..r as u32 {
            let (complete, truncated) = enumerate(&m, head);
            let mass: f64 = complete.iter().map(|(rule, lp)| {
                let got = m.rule_log_prob(rule).unwrap();
                assert!((got - lp).abs() < 1e-10);
                lp.exp()
            }).sum();
            assert!((mass + truncated - 1.0).abs() < 1e-6, "{mass} + {truncated}");
        }
    }
}

#[test]
fn sample_counts() {
    let m = GeneratorModel::new(GeneratorConfig::desk(6, 3), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(m.sample_rules(2, 2000, &mut rng).unwrap().total(), 2000);
    let one = m.sample_rules(2, 1, &mut rng).unwrap();
    assert_eq!((one.total(), one.distinct()), (1, 1));
    for (rule, _) in one.iter() {
        assert!(!rule.body.is_empty() && rule.body.len() <= 3);
    }
}

#[test]
fn sampling_frequencies_match_exact_probabilities() {
    let m = GeneratorModel::new(tiny(3, 2), 21).unwrap();
    let (complete, truncated) = enumerate(&m, 1);
    let attempts = MAX_SAMPLE_ATTEMPTS as i32;
    // Redraw on truncation, keep the last prefix after the final attempt.
    let boost = (1.0 - truncated.powi(attempts)) / (1.0 - truncated);
    let n = 50_000;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let sample = m.sample_rules(1, n, &mut rng).unwrap();
    for (rule, lp) in &complete {
        let mut p = lp.exp() * boost;
        if rule.len() == 2 {
            let steps = reference_log_probs(&m, 1, &rule.body);
            let end = steps[2][3].exp();
            let prefix = lp.exp() / end;
            p += truncated.powi(attempts - 1) * prefix * (1.0 - end);
        }
        let freq = f64::from(sample.count(rule)) / n as f64;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        assert!((freq - p).abs() <= 3.0 * sigma + 1e-12, "{rule}: {freq} vs {p}");
    }
}

#[test]
fn beam_width_one_is_greedy() {
    for seed in 0..5 {
        let m = GeneratorModel::new(tiny(4, 3), seed).unwrap();
        for head in 0..4 {
            let greedy = m.greedy_decode(head).unwrap();
            let beam = m.beam_search(head, 1, 1).unwrap();
            assert_eq!(beam[0].0, greedy);
        }
    }
}

#[test]
fn wide_beam_is_exact() {
    for seed in 0..5 {
        let m = GeneratorModel::new(tiny(3, 2), seed).unwrap();
        let (mut complete, _) = enumerate(&m, 0);
        assert_eq!(complete.len(), 12);
        complete.sort_by(|a, b| b.1.total_cmp(&a.1));
        for top in [1, 5, 12] {
            let beam = m.beam_search(0, top, 13).unwrap();
            assert_eq!(beam.len(), top);
            for ((r, lp), (er, elp)) in beam.iter().zip(&complete) {
                assert_eq!(r, er);
                assert!((lp - elp).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn mle_on_point_mass_increases_log_prob() {
    let mut m = GeneratorModel::new(tiny(3, 3), 4).unwrap();
    let rule = Rule::new(1, vec![2, 0]);
    let before = m.rule_log_prob(&rule).unwrap();
    let data = vec![(rule.clone(), 1.0)];
    for _ in 0..100 {
        m.mle_step(&data).unwrap();
    }
    let after = m.rule_log_prob(&rule).unwrap();
    assert!(after > before, "{before} -> {after}");
}

#[test]
fn mle_loss_is_mean_nll_before_step() {
    let mut m = GeneratorModel::new(tiny(3, 3), 4).unwrap();
    let data = vec![(Rule::new(1, vec![2, 0]), 1.0), (Rule::new(0, vec![1]), 3.0)];
    let expected = -(m.rule_log_prob(&data[0].0).unwrap() + 3.0 * m.rule_log_prob(&data[1].0).unwrap()) / 4.0;
    let loss = m.mle_step(&data).unwrap();
    assert!((loss - expected).abs() < 1e-10);
}

#[test]
fn empty_mle_step_is_noop() {
    let mut m = GeneratorModel::new(tiny(3, 3), 4).unwrap();
    let before = m.params().to_vec();
    assert_eq!(m.mle_step(&[]).unwrap(), 0.0);
    assert_eq!(m.params(), &before[..]);
}

#[test]
fn unit_reward_step_equals_mle_step() {
    let data = vec![(Rule::new(0, vec![1, 2]), 3.0), (Rule::new(2, vec![0]), 1.0)];
    let mut a = GeneratorModel::new(tiny(3, 3), 8).unwrap();
    let mut b = a.clone();
    let la = a.mle_step(&data).unwrap();
    let lb = b.weighted_step(&data, 4.0).unwrap();
    assert_eq!(la, lb);
    assert_eq!(a.params(), b.params());
}

#[test]
fn zero_reward_leaves_generator_unchanged() {
    let mut m = GeneratorModel::new(tiny(3, 3), 8).unwrap();
    let before = m.params().to_vec();
    let data = vec![(Rule::new(0, vec![1, 2]), 0.0)];
    assert_eq!(m.weighted_step(&data, 5.0).unwrap(), 0.0);
    assert_eq!(m.params(), &before[..]);
    assert_eq!(m.optimizer_steps(), 0);
}

/// Central differences on `-Σ w log p` computed through `rule_log_prob`.
pub(crate) fn finite_difference_check(m: &GeneratorModel, data: &[(Rule, f64)], eps: f64) -> f64 {
    let (_, _, grad) = m.nll_gradient(data).unwrap();
    let mut probe = m.clone();
    let loss = |p: &GeneratorModel| -> f64 {
        data.iter().map(|(r, w)| -w * p.rule_log_prob(r).unwrap()).sum()
    };
    let mut worst: f64 = 0.0;
    for i in 0..m.num_params() {
        let orig = probe.params()[i];
        probe.params_mut()[i] = orig + eps;
        let up = loss(&probe);
        probe.params_mut()[i] = orig - eps;
        let down = loss(&probe);
        probe.params_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let denom = grad[i].abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((grad[i] - numeric).abs() / denom);
    }
    worst
}

#[test]
fn analytic_gradient_matches_finite_differences() {
    let m = GeneratorModel::new(tiny(2, 2), 17).unwrap();
    let data = vec![
        (Rule::new(0, vec![1]), 2.0),
        (Rule::new(0, vec![1, 0]), 1.0),
        (Rule::new(1, vec![0, 0]), 0.5),
        (Rule::new(0, vec![0, 1]), 1.5),
    ];
    let err = finite_difference_check(&m, &data, 1e-4);
    assert!(err <= 1e-3, "max relative error {err}");
}

#[test]
fn pretraining_prefers_planted_composition() {
    // r2 ≡ r0 ∘ r1 on ten disjoint triangles.
    let mut raw = Vec::new();
    for i in 0..10u32 {
        let (x, y, z) = (3 * i, 3 * i + 1, 3 * i + 2);
        raw.push(Triplet::new(x, 0, y));
        raw.push(Triplet::new(y, 1, z));
        raw.push(Triplet::new(x, 2, z));
    }
    let g = build_graph(&augment_inverse(&raw, 3), 30, 6);
    let mut cfg = tiny(6, 2);
    cfg.hidden_size = 8;
    cfg.input_size = 8;
    let mut m = GeneratorModel::new(cfg, 3).unwrap();
    let triplets: Vec<_> = g.triplets().collect();
    let trace = m
        .pretrain_on_paths(&g, &triplets, &PretrainConfig { walks_per_triplet: 4, steps: 150, seed: 5 })
        .unwrap();
    assert!(trace.iter().all(|l| l.is_finite()));
    assert!(trace.last() < trace.first());
    let planted = m.rule_log_prob(&Rule::new(2, vec![0, 1])).unwrap();
    for a in 0..6 {
        for b in 0..6 {
            if (a, b) != (0, 1) {
                let other = m.rule_log_prob(&Rule::new(2, vec![a, b])).unwrap();
                assert!(planted > other, "[{a},{b}] {other} >= {planted}");
            }
        }
    }
}

#[test]
fn zero_walks_leave_model_unchanged() {
    let g = build_graph(&augment_inverse(&[Triplet::new(0, 0, 1)], 1), 2, 2);
    let mut m = GeneratorModel::new(tiny(2, 2), 1).unwrap();
    let before = m.params().to_vec();
    let trace = m
        .pretrain_on_paths(&g, &[Triplet::new(0, 0, 1)], &PretrainConfig { walks_per_triplet: 0, steps: 10, seed: 0 })
        .unwrap();
    assert!(trace.is_empty());
    assert_eq!(m.params(), &before[..]);
}
