//! Autoregressive rule generator.
//!
//! A single-layer LSTM reads `[v_head, v_prev]` at every step and emits a
//! distribution over the relations plus an END class. The initial hidden state
//! is a linear map of the head embedding; the first step reads a learned start
//! vector in place of a previous relation. END is disallowed at the first step
//! so every complete sequence is a rule with a non-empty body. A prefix that
//! reaches the maximum body length still gets one more step, and the mass it
//! puts on non-END tokens is the truncated (never-terminating) mass.

mod decode;
mod pretrain;
mod train;

use ndarray::{ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kg::RelationId;
use crate::optim::Adam;
use crate::rule::Rule;

pub use decode::{SampleStats, MAX_SAMPLE_ATTEMPTS};
pub use train::weighted;
pub use pretrain::{collect_path_rules, PretrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    /// Relation count including inverses; END is one extra output class.
    pub num_relations: usize,
    pub max_rule_len: usize,
    pub embedding_dim: usize,
    pub input_size: usize,
    pub hidden_size: usize,
    pub learning_rate: f64,
    /// Length of the cosine decay; 0 keeps the rate constant.
    pub lr_decay_steps: u64,
}

impl GeneratorConfig {
    /// Input 512, hidden 256, learning rate 1e-3.
    pub fn standard(num_relations: usize, max_rule_len: usize) -> Self {
        Self {
            num_relations,
            max_rule_len,
            embedding_dim: 256,
            input_size: 512,
            hidden_size: 256,
            learning_rate: 1e-3,
            lr_decay_steps: 0,
        }
    }

    /// Small sizes for quick runs.
    pub fn desk(num_relations: usize, max_rule_len: usize) -> Self {
        Self {
            embedding_dim: 64,
            input_size: 64,
            hidden_size: 64,
            ..Self::standard(num_relations, max_rule_len)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.num_relations == 0 {
            problems.push("generator needs at least one relation");
        }
        if self.max_rule_len == 0 {
            problems.push("max_rule_len must be >= 1");
        }
        if self.embedding_dim == 0 || self.input_size == 0 || self.hidden_size == 0 {
            problems.push("generator sizes must be positive");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            problems.push("generator learning rate must be positive");
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems.join("; ")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Span {
    pub off: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Span {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.off..self.off + self.len()
    }
}

/// Offsets of every tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Layout {
    /// Relation embeddings; the last row is the start vector.
    pub emb: Span,
    pub init_w: Span,
    pub init_b: Span,
    pub in_w: Span,
    pub in_b: Span,
    pub w_ih: Span,
    pub w_hh: Span,
    pub gate_b: Span,
    pub out_w: Span,
    pub out_b: Span,
    pub total: usize,
}

impl Layout {
    fn new(c: &GeneratorConfig) -> Self {
        let (r, e, x, h) = (c.num_relations, c.embedding_dim, c.input_size, c.hidden_size);
        let mut off = 0;
        let mut span = |rows, cols| {
            let s = Span { off, rows, cols };
            off += rows * cols;
            s
        };
        let emb = span(r + 1, e);
        let init_w = span(h, e);
        let init_b = span(h, 1);
        let in_w = span(x, 2 * e);
        let in_b = span(x, 1);
        let w_ih = span(4 * h, x);
        let w_hh = span(4 * h, h);
        let gate_b = span(4 * h, 1);
        let out_w = span(r + 1, h);
        let out_b = span(r + 1, 1);
        Self {
            emb,
            init_w,
            init_b,
            in_w,
            in_b,
            w_ih,
            w_hh,
            gate_b,
            out_w,
            out_b,
            total: off,
        }
    }

    /// `(name, span, init bound)` for every tensor.
    pub fn tensors(&self, c: &GeneratorConfig) -> [(&'static str, Span, f64); 10] {
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        let h = inv(c.hidden_size);
        [
            ("embedding", self.emb, inv(c.embedding_dim)),
            ("init_w", self.init_w, inv(c.embedding_dim)),
            ("init_b", self.init_b, inv(c.embedding_dim)),
            ("input_w", self.in_w, inv(2 * c.embedding_dim)),
            ("input_b", self.in_b, inv(2 * c.embedding_dim)),
            ("w_ih", self.w_ih, h),
            ("w_hh", self.w_hh, h),
            ("gate_b", self.gate_b, h),
            ("output_w", self.out_w, h),
            ("output_b", self.out_b, h),
        ]
    }
}

/// LSTM hidden and cell vectors after consuming a prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct GeneratorModel {
    config: GeneratorConfig,
    layout: Layout,
    params: Vec<f64>,
    adam: Adam,
    seed: u64,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Numerically stable log-softmax; `-inf` entries stay `-inf`.
pub(crate) fn log_softmax(logits: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&l| (l - max).exp()).sum();
    let lse = max + sum.ln();
    for l in logits.iter_mut() {
        *l -= lse;
    }
}

impl GeneratorModel {
    /// Parameters drawn uniformly from `±1/sqrt(fan_in)` with a seeded ChaCha stream.
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (_, span, bound) in layout.tensors(&config) {
            for p in &mut params[span.range()] {
                *p = rng.gen_range(-bound..bound);
            }
        }
        let adam = Adam::new(layout.total, 0.0);
        Ok(Self {
            config,
            layout,
            params,
            adam,
            seed,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.layout.total
    }

    /// Names and flat ranges of the parameter tensors.
    pub fn tensor_ranges(&self) -> Vec<(&'static str, std::ops::Range<usize>)> {
        self.layout
            .tensors(&self.config)
            .iter()
            .map(|(n, s, _)| (*n, s.range()))
            .collect()
    }

    pub fn optimizer_steps(&self) -> u64 {
        self.adam.steps()
    }

    pub fn set_lr_decay_steps(&mut self, steps: u64) {
        self.config.lr_decay_steps = steps;
    }

    /// The END output class.
    pub fn end_token(&self) -> usize {
        self.config.num_relations
    }

    fn start_token(&self) -> usize {
        self.config.num_relations
    }

    pub(crate) fn adam(&self) -> &Adam {
        &self.adam
    }

    pub(crate) fn from_parts(config: GeneratorConfig, params: Vec<f64>, adam: Adam, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(Error::Checkpoint(format!(
                "generator expects {} parameters, found {}",
                layout.total,
                params.len()
            )));
        }
        Ok(Self {
            config,
            layout,
            params,
            adam,
            seed,
        })
    }

    pub(crate) fn mat(&self, s: Span) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((s.rows, s.cols), &self.params[s.range()]).unwrap()
    }

    pub(crate) fn vec(&self, s: Span) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.params[s.range()])
    }

    fn embedding(&self, token: usize) -> ArrayView1<'_, f64> {
        self.mat(self.layout.emb).index_axis_move(ndarray::Axis(0), token)
    }

    fn check_head(&self, head: RelationId) -> Result<()> {
        if (head as usize) < self.config.num_relations {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "head relation {head} out of range ({} relations)",
                self.config.num_relations
            )))
        }
    }

    /// Hidden state before the first step for `head`.
    pub fn initial_state(&self, head: RelationId) -> State {
        let v = self.embedding(head as usize);
        let h = self.mat(self.layout.init_w).dot(&v) + &self.vec(self.layout.init_b);
        State {
            h: h.to_vec(),
            c: vec![0.0; self.config.hidden_size],
        }
    }

    /// Consumes `input` (a relation, or `None` for the start vector) and returns
    /// the new state with log-probabilities over relations + END. `depth` is the
    /// number of body relations already in the prefix.
    pub fn step(&self, head: RelationId, state: &State, input: Option<RelationId>, depth: usize) -> (State, Vec<f64>) {
        let l = &self.layout;
        let e = self.config.embedding_dim;
        let hs = self.config.hidden_size;
        let tok = input.map_or(self.start_token(), |r| r as usize);
        let in_w = self.mat(l.in_w);
        let x = in_w.slice(ndarray::s![.., ..e]).dot(&self.embedding(head as usize))
            + in_w.slice(ndarray::s![.., e..]).dot(&self.embedding(tok))
            + self.vec(l.in_b);
        let hprev = ArrayView1::from(&state.h[..]);
        let z = self.mat(l.w_ih).dot(&x) + self.mat(l.w_hh).dot(&hprev) + self.vec(l.gate_b);
        let mut h = vec![0.0; hs];
        let mut c = vec![0.0; hs];
        for k in 0..hs {
            let i = sigmoid(z[k]);
            let f = sigmoid(z[hs + k]);
            let g = z[2 * hs + k].tanh();
            let o = sigmoid(z[3 * hs + k]);
            c[k] = f * state.c[k] + i * g;
            h[k] = o * c[k].tanh();
        }
        let mut logits =
            (self.mat(l.out_w).dot(&ArrayView1::from(&h[..])) + self.vec(l.out_b)).to_vec();
        if depth == 0 {
            logits[self.end_token()] = f64::NEG_INFINITY;
        }
        log_softmax(&mut logits);
        (State { h, c }, logits)
    }

    /// `log RNN(rule | head)`, END token included.
    pub fn rule_log_prob(&self, rule: &Rule) -> Result<f64> {
        rule.validate(self.config.max_rule_len, self.config.num_relations)?;
        let mut state = self.initial_state(rule.head);
        let mut input = None;
        let mut total = 0.0;
        for (depth, &r) in rule.body.iter().enumerate() {
            let (next, logp) = self.step(rule.head, &state, input, depth);
            total += logp[r as usize];
            state = next;
            input = Some(r);
        }
        let (_, logp) = self.step(rule.head, &state, input, rule.body.len());
        Ok(total + logp[self.end_token()])
    }
}

#[cfg(test)]
mod tests;
