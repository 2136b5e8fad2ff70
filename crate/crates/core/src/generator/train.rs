//! Maximum-likelihood training over weighted rule sets.
//!
//! Rules sharing a head are merged into a prefix trie so each distinct prefix
//! is run through the cell once. Levels of the trie are processed as batched
//! matrix products, forward from the root and backward from the leaves.

use std::collections::{BTreeMap, HashMap};

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis, Zip};
use rayon::prelude::*;

use super::{sigmoid, GeneratorModel, Span};
use crate::error::{Error, Result};
use crate::kg::RelationId;
use crate::optim::cosine_lr;
use crate::rule::{Rule, RuleMultiset};

/// Heads are split into this many fixed chunks for parallel accumulation, so
/// the summation order does not depend on the thread count.
const GRAD_CHUNKS: usize = 16;

struct TrieLevel {
    parent: Vec<usize>,
    /// Input token consumed at this node (the start token at the root).
    token: Vec<usize>,
    /// `(next token, weight)` targets emitted from this node.
    targets: Vec<Vec<(usize, f64)>>,
}

fn build_trie(start: usize, end: usize, rules: &[(&[RelationId], f64)]) -> Vec<TrieLevel> {
    let max_len = rules.iter().map(|(b, _)| b.len()).max().unwrap_or(0);
    let mut levels: Vec<TrieLevel> = (0..=max_len)
        .map(|_| TrieLevel {
            parent: Vec::new(),
            token: Vec::new(),
            targets: Vec::new(),
        })
        .collect();
    let mut index: Vec<HashMap<&[RelationId], usize>> = vec![HashMap::new(); max_len + 1];
    levels[0].parent.push(usize::MAX);
    levels[0].token.push(start);
    levels[0].targets.push(Vec::new());
    index[0].insert(&[], 0);
    for &(body, w) in rules {
        let mut node = 0;
        for d in 0..=body.len() {
            if d > 0 {
                let prefix = &body[..d];
                node = match index[d].get(prefix) {
                    Some(&n) => n,
                    None => {
                        let lvl = &mut levels[d];
                        let n = lvl.parent.len();
                        lvl.parent.push(node);
                        lvl.token.push(body[d - 1] as usize);
                        lvl.targets.push(Vec::new());
                        index[d].insert(prefix, n);
                        n
                    }
                };
            }
            let target = if d < body.len() { body[d] as usize } else { end };
            let targets = &mut levels[d].targets[node];
            match targets.iter_mut().find(|(t, _)| *t == target) {
                Some((_, acc)) => *acc += w,
                None => targets.push((target, w)),
            }
        }
    }
    levels
}

struct LevelCache {
    ein: Array2<f64>,
    x: Array2<f64>,
    hpar: Array2<f64>,
    cpar: Array2<f64>,
    i: Array2<f64>,
    f: Array2<f64>,
    g: Array2<f64>,
    o: Array2<f64>,
    tc: Array2<f64>,
    c: Array2<f64>,
    h: Array2<f64>,
    logp: Array2<f64>,
}

fn grad_mat<'a>(grad: &'a mut [f64], s: Span) -> ArrayViewMut2<'a, f64> {
    ArrayViewMut2::from_shape((s.rows, s.cols), &mut grad[s.range()]).unwrap()
}

fn grad_vec<'a>(grad: &'a mut [f64], s: Span) -> ArrayViewMut1<'a, f64> {
    ArrayViewMut1::from(&mut grad[s.range()])
}

/// `out += a^T · b`.
fn acc_at_b(out: &mut ArrayViewMut2<'_, f64>, a: &ArrayView2<'_, f64>, b: &ArrayView2<'_, f64>) {
    general_mat_mul(1.0, &a.t(), b, 1.0, out);
}

impl GeneratorModel {
    /// Adds `∂/∂θ Σ w·(−log RNN(body|head))` into `grad`; returns the loss.
    fn head_gradient(&self, head: RelationId, rules: &[(&[RelationId], f64)], grad: &mut [f64]) -> f64 {
        let l = self.layout.clone();
        let e = self.config.embedding_dim;
        let hs = self.config.hidden_size;
        let end = self.end_token();
        let trie = build_trie(self.start_token(), end, rules);

        let emb = self.mat(l.emb);
        let v_head = emb.row(head as usize).to_owned();
        let in_w = self.mat(l.in_w);
        let w_ih = self.mat(l.w_ih);
        let w_hh = self.mat(l.w_hh);
        let out_w = self.mat(l.out_w);
        let h0 = self.mat(l.init_w).dot(&v_head) + self.vec(l.init_b);

        // Forward.
        let mut caches: Vec<LevelCache> = Vec::with_capacity(trie.len());
        for (d, lvl) in trie.iter().enumerate() {
            let n = lvl.parent.len();
            let mut ein = Array2::<f64>::zeros((n, 2 * e));
            let mut hpar = Array2::<f64>::zeros((n, hs));
            let mut cpar = Array2::<f64>::zeros((n, hs));
            for j in 0..n {
                ein.slice_mut(s![j, ..e]).assign(&v_head);
                ein.slice_mut(s![j, e..]).assign(&emb.row(lvl.token[j]));
                if d == 0 {
                    hpar.row_mut(j).assign(&h0);
                } else {
                    let prev = &caches[d - 1];
                    hpar.row_mut(j).assign(&prev.h.row(lvl.parent[j]));
                    cpar.row_mut(j).assign(&prev.c.row(lvl.parent[j]));
                }
            }
            let x = ein.dot(&in_w.t()) + self.vec(l.in_b);
            let z = x.dot(&w_ih.t()) + hpar.dot(&w_hh.t()) + self.vec(l.gate_b);
            let i = z.slice(s![.., ..hs]).mapv(sigmoid);
            let f = z.slice(s![.., hs..2 * hs]).mapv(sigmoid);
            let g = z.slice(s![.., 2 * hs..3 * hs]).mapv(f64::tanh);
            let o = z.slice(s![.., 3 * hs..]).mapv(sigmoid);
            let c = &f * &cpar + &i * &g;
            let tc = c.mapv(f64::tanh);
            let h = &o * &tc;
            let mut logp = h.dot(&out_w.t()) + self.vec(l.out_b);
            for mut row in logp.rows_mut() {
                if d == 0 {
                    row[end] = f64::NEG_INFINITY;
                }
                super::log_softmax(row.as_slice_mut().unwrap());
            }
            caches.push(LevelCache {
                ein,
                x,
                hpar,
                cpar,
                i,
                f,
                g,
                o,
                tc,
                c,
                h,
                logp,
            });
        }

        // Backward.
        let mut loss = 0.0;
        let mut d_emb_head = Array1::<f64>::zeros(e);
        let mut dh_next: Option<Array2<f64>> = None;
        let mut dc_next: Option<Array2<f64>> = None;
        for d in (0..trie.len()).rev() {
            let lvl = &trie[d];
            let cache = &caches[d];
            let n = lvl.parent.len();
            let mut dlogits = cache.logp.mapv(f64::exp);
            for j in 0..n {
                let total: f64 = lvl.targets[j].iter().map(|(_, w)| w).sum();
                let mut row = dlogits.row_mut(j);
                row *= total;
                for &(t, w) in &lvl.targets[j] {
                    row[t] -= w;
                    loss -= w * cache.logp[[j, t]];
                }
            }
            acc_at_b(&mut grad_mat(grad, l.out_w), &dlogits.view(), &cache.h.view());
            grad_vec(grad, l.out_b).scaled_add(1.0, &dlogits.sum_axis(Axis(0)));

            let mut dh = dlogits.dot(&out_w);
            let mut dc = Array2::<f64>::zeros((n, hs));
            if let (Some(dhn), Some(dcn)) = (&dh_next, &dc_next) {
                let child = &trie[d + 1];
                for (k, &p) in child.parent.iter().enumerate() {
                    let mut r = dh.row_mut(p);
                    r += &dhn.row(k);
                    let mut r = dc.row_mut(p);
                    r += &dcn.row(k);
                }
            }
            // dc += dh ⊙ o ⊙ (1 − tanh²c)
            Zip::from(&mut dc)
                .and(&dh)
                .and(&cache.o)
                .and(&cache.tc)
                .for_each(|dc, &dh, &o, &tc| *dc += dh * o * (1.0 - tc * tc));
            let mut dz = Array2::<f64>::zeros((n, 4 * hs));
            {
                let (mut di, rest) = dz.view_mut().split_at(Axis(1), hs);
                let (mut df, rest) = rest.split_at(Axis(1), hs);
                let (mut dg, mut dout) = rest.split_at(Axis(1), hs);
                Zip::from(&mut di)
                    .and(&dc)
                    .and(&cache.g)
                    .and(&cache.i)
                    .for_each(|z, &dc, &g, &i| *z = dc * g * i * (1.0 - i));
                Zip::from(&mut df)
                    .and(&dc)
                    .and(&cache.cpar)
                    .and(&cache.f)
                    .for_each(|z, &dc, &cp, &f| *z = dc * cp * f * (1.0 - f));
                Zip::from(&mut dg)
                    .and(&dc)
                    .and(&cache.i)
                    .and(&cache.g)
                    .for_each(|z, &dc, &i, &g| *z = dc * i * (1.0 - g * g));
                Zip::from(&mut dout)
                    .and(&dh)
                    .and(&cache.tc)
                    .and(&cache.o)
                    .for_each(|z, &dh, &tc, &o| *z = dh * tc * o * (1.0 - o));
            }
            acc_at_b(&mut grad_mat(grad, l.w_ih), &dz.view(), &cache.x.view());
            acc_at_b(&mut grad_mat(grad, l.w_hh), &dz.view(), &cache.hpar.view());
            grad_vec(grad, l.gate_b).scaled_add(1.0, &dz.sum_axis(Axis(0)));

            let dx = dz.dot(&w_ih);
            acc_at_b(&mut grad_mat(grad, l.in_w), &dx.view(), &cache.ein.view());
            grad_vec(grad, l.in_b).scaled_add(1.0, &dx.sum_axis(Axis(0)));
            let dein = dx.dot(&in_w);
            d_emb_head += &dein.slice(s![.., ..e]).sum_axis(Axis(0));
            {
                let mut gemb = grad_mat(grad, l.emb);
                for j in 0..n {
                    let mut row = gemb.row_mut(lvl.token[j]);
                    row += &dein.slice(s![j, e..]);
                }
            }

            let dhpar = dz.dot(&w_hh);
            let dcpar = &dc * &cache.f;
            if d == 0 {
                // Root parent is the initial state h0 = W v_head + b; c0 is constant.
                let dh0 = dhpar.row(0).to_owned();
                {
                    let mut gw = grad_mat(grad, l.init_w);
                    for a in 0..hs {
                        let mut row = gw.row_mut(a);
                        row.scaled_add(dh0[a], &v_head);
                    }
                }
                grad_vec(grad, l.init_b).scaled_add(1.0, &dh0);
                d_emb_head += &self.mat(l.init_w).t().dot(&dh0);
            } else {
                dh_next = Some(dhpar);
                dc_next = Some(dcpar);
            }
        }
        let mut gemb = grad_mat(grad, l.emb);
        let mut row = gemb.row_mut(head as usize);
        row += &d_emb_head;
        loss
    }

    /// Gradient of `Σ w·(−log RNN(rule|head))` over a weighted rule list.
    /// Returns `(loss sum, weight sum, gradient)`.
    pub fn nll_gradient(&self, rules: &[(Rule, f64)]) -> Result<(f64, f64, Vec<f64>)> {
        let mut by_head: BTreeMap<RelationId, Vec<(&[RelationId], f64)>> = BTreeMap::new();
        let mut weight = 0.0;
        for (rule, w) in rules {
            rule.validate(self.config.max_rule_len, self.config.num_relations)?;
            if !(w.is_finite() && *w >= 0.0) {
                return Err(Error::InvalidArgument(format!("rule weight {w} must be finite and non-negative")));
            }
            if *w > 0.0 {
                by_head.entry(rule.head).or_default().push((&rule.body, *w));
                weight += w;
            }
        }
        let heads: Vec<_> = by_head.into_iter().collect();
        let chunk = heads.len().div_ceil(GRAD_CHUNKS).max(1);
        let parts: Vec<(f64, Vec<f64>)> = heads
            .par_chunks(chunk)
            .map(|group| {
                let mut grad = vec![0.0; self.layout.total];
                let mut loss = 0.0;
                for (head, list) in group {
                    loss += self.head_gradient(*head, list, &mut grad);
                }
                (loss, grad)
            })
            .collect();
        let mut grad = vec![0.0; self.layout.total];
        let mut loss = 0.0;
        for (l, g) in parts {
            loss += l;
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += b;
            }
        }
        Ok((loss, weight, grad))
    }

    /// One Adam step on the weighted log-likelihood `Σ w·log RNN(rule|head)`.
    /// Returns the weighted mean negative log-likelihood before the step;
    /// an empty or zero-weight list is a no-op returning 0.
    pub fn mle_step(&mut self, rules: &[(Rule, f64)]) -> Result<f64> {
        let weight: f64 = rules.iter().map(|r| r.1).sum();
        if weight == 0.0 || rules.is_empty() {
            return self.nll_gradient(rules).map(|_| 0.0);
        }
        self.weighted_step(rules, weight)
    }

    pub fn mle_step_multiset(&mut self, rules: &RuleMultiset) -> Result<f64> {
        self.mle_step(&weighted(rules))
    }

    /// Ascent on `Σ w · log RNN(rule | head) / normalizer`, the score-function
    /// estimator when `w = reward · multiplicity` and `normalizer` is the
    /// number of sampled rules. Returns the normalized loss before the step.
    /// With all weights zero the model (and optimizer) is left unchanged.
    pub fn weighted_step(&mut self, rules: &[(Rule, f64)], normalizer: f64) -> Result<f64> {
        if !(normalizer.is_finite() && normalizer > 0.0) {
            return Err(Error::InvalidArgument(format!("normalizer must be positive, got {normalizer}")));
        }
        let (loss, weight, mut grad) = self.nll_gradient(rules)?;
        if weight == 0.0 {
            return Ok(0.0);
        }
        let scale = 1.0 / normalizer;
        grad.iter_mut().for_each(|g| *g *= scale);
        let mean = loss * scale;
        if !mean.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric("non-finite generator gradient; step skipped".into()));
        }
        let lr = cosine_lr(
            self.config.learning_rate,
            self.adam.steps(),
            self.config.lr_decay_steps,
        );
        self.adam.step(&mut self.params, &grad, lr);
        Ok(mean)
    }
}

/// Multiset as `(rule, multiplicity)` pairs.
pub fn weighted(rules: &RuleMultiset) -> Vec<(Rule, f64)> {
    rules.iter().map(|(r, n)| (r.clone(), f64::from(n))).collect()
}
