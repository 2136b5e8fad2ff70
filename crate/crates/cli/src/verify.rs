//! Numeric checks of the E-step approximation, run by `rulecraft verify`.

use std::fmt;

use anyhow::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rulecraft::em::{gamma, log_sum_exp_gap, select_map, verify_posterior_bound, HScore, PosteriorToy};
use rulecraft::rule::Rule;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{status} {} {}", self.name, self.detail)
    }
}

/// Posterior approximation error on `toys` random instances per score scale.
pub fn posterior_bound(scales: &[f64], toys: usize, seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for &s in scales {
        let (mut worst, mut ok) = (0.0f64, true);
        for _ in 0..toys {
            let report = verify_posterior_bound(&PosteriorToy::random(&mut rng, s))?;
            worst = worst.max(report.deviation / report.bound.max(f64::MIN_POSITIVE));
            ok &= report.holds();
        }
        out.push(Check {
            name: format!("posterior_bound s={s}"),
            passed: ok,
            detail: format!("toys={toys} worst_deviation_over_bound={worst:.4}"),
        });
    }
    Ok(out)
}

/// `0 <= log-sum-exp gap <= s² + s⁴` on random score vectors.
pub fn log_sum_exp_checks(scales: &[f64], trials: usize, seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    scales
        .iter()
        .map(|&s| {
            let mut ok = true;
            let mut worst = 0.0f64;
            for _ in 0..trials {
                let n = rng.gen_range(1..=20);
                let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(-s..=s)).collect();
                let gap = log_sum_exp_gap(&scores);
                ok &= gap >= -1e-12 && gap <= s * s + s.powi(4);
                worst = worst.max(gap);
            }
            Check {
                name: format!("log_sum_exp_gap s={s}"),
                passed: ok,
                detail: format!("trials={trials} max_gap={worst:.6} bound={:.6}", s * s + s.powi(4)),
            }
        })
        .collect()
}

/// Best `Σ H + γ` over all size-`k` multisets of `h.len()` rules.
pub fn exhaustive_map(h: &[f64], k: usize) -> f64 {
    fn go(h: &[f64], i: usize, left: usize, counts: &mut Vec<u32>, best: &mut f64) {
        if i == h.len() - 1 {
            counts[i] = left as u32;
            let v: f64 = counts.iter().zip(h).map(|(&c, x)| f64::from(c) * x).sum::<f64>() + gamma(counts);
            *best = best.max(v);
            return;
        }
        for c in 0..=left {
            counts[i] = c as u32;
            go(h, i + 1, left - c, counts, best);
        }
    }
    let mut best = f64::NEG_INFINITY;
    go(h, 0, k, &mut vec![0; h.len()], &mut best);
    best
}

/// Hard selection against exhaustive enumeration.
pub fn selection_oracle(instances: usize, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut agree = 0;
    for _ in 0..instances {
        let n = rng.gen_range(1..=6);
        let k = rng.gen_range(1..=3);
        let h: Vec<HScore> = (0..n).map(|_| HScore::new(rng.gen_range(-3.0..1.0), rng.gen_range(-4.0..0.0))).collect();
        let rules: Vec<Rule> = (0..n as u32).map(|i| Rule::new(0, vec![i])).collect();
        let refs: Vec<&Rule> = rules.iter().collect();
        let sel = select_map(&h, &refs, k)?;
        let values: Vec<f64> = h.iter().map(|x| x.value).collect();
        let got: f64 = sel.counts.iter().zip(&values).map(|(&c, x)| f64::from(c) * x).sum::<f64>() + gamma(&sel.counts);
        agree += usize::from(sel.total() == k as u64 && (got - exhaustive_map(&values, k)).abs() < 1e-9);
    }
    Ok(Check {
        name: "selection_oracle".into(),
        passed: agree == instances,
        detail: format!("agreement={agree}/{instances}"),
    })
}

/// The full suite as run by the command.
pub fn run_all(seed: u64) -> Result<Vec<Check>> {
    let scales = [0.1, 0.3, 0.6];
    let mut checks = posterior_bound(&scales, 100, seed)?;
    checks.extend(log_sum_exp_checks(&scales, 1000, seed));
    checks.push(selection_oracle(200, seed)?);
    Ok(checks)
}
