//! Complex rotation embeddings for path scores.
//!
//! Entities are complex vectors stored as `[re₀ … re_{d-1}, im₀ … im_{d-1}]`.
//! Relations are unit-modulus complex vectors stored as phases; only raw
//! relations own phases and an inverse relation rotates by the negated phase.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kg::{EntityId, RelationId};

#[derive(Debug, Clone, PartialEq)]
pub struct RotationEmbeddings {
    dim: usize,
    margin: f64,
    num_entities: usize,
    raw_relations: usize,
    /// Entity tables followed by relation phases, flat.
    params: Vec<f64>,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl RotationEmbeddings {
    /// Entity coordinates uniform in `±(margin + 2)/dim`, phases uniform in `±π`.
    pub fn new(num_entities: usize, raw_relations: usize, dim: usize, margin: f64, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidConfig("embedding dimension must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = (margin.abs() + 2.0) / dim as f64;
        let mut params = Vec::with_capacity(num_entities * 2 * dim + raw_relations * dim);
        params.extend((0..num_entities * 2 * dim).map(|_| rng.gen_range(-bound..bound)));
        let pi = std::f64::consts::PI;
        params.extend((0..raw_relations * dim).map(|_| rng.gen_range(-pi..pi)));
        Ok(Self {
            dim,
            margin,
            num_entities,
            raw_relations,
            params,
        })
    }

    /// Builds embeddings from externally trained tables: `entities[e]` holds
    /// `2 * dim` values (real parts then imaginary parts) and `phases[r]` holds
    /// `dim` angles per raw relation.
    pub fn from_tables(entities: &[Vec<f64>], phases: &[Vec<f64>], margin: f64) -> Result<Self> {
        let dim = phases
            .first()
            .map(Vec::len)
            .or_else(|| entities.first().map(|e| e.len() / 2))
            .unwrap_or(0);
        if dim == 0 {
            return Err(Error::InvalidState("empty embedding tables".into()));
        }
        if entities.iter().any(|e| e.len() != 2 * dim) || phases.iter().any(|p| p.len() != dim) {
            return Err(Error::InvalidState(format!(
                "embedding tables disagree on dimension {dim}"
            )));
        }
        let params: Vec<f64> = entities.iter().chain(phases).flatten().copied().collect();
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite embedding value".into()));
        }
        Ok(Self {
            dim,
            margin,
            num_entities: entities.len(),
            raw_relations: phases.len(),
            params,
        })
    }

    pub(crate) fn from_parts(
        dim: usize,
        margin: f64,
        num_entities: usize,
        raw_relations: usize,
        params: Vec<f64>,
    ) -> Result<Self> {
        if params.len() != num_entities * 2 * dim + raw_relations * dim {
            return Err(Error::Checkpoint("embedding table size mismatch".into()));
        }
        Ok(Self {
            dim,
            margin,
            num_entities,
            raw_relations,
            params,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn margin(&self) -> f64 {
        self.margin
    }

    pub fn num_entities(&self) -> usize {
        self.num_entities
    }

    pub fn raw_relations(&self) -> usize {
        self.raw_relations
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn entity_offset(&self, e: EntityId) -> usize {
        e as usize * 2 * self.dim
    }

    fn phase_offset(&self, raw: usize) -> usize {
        self.num_entities * 2 * self.dim + raw * self.dim
    }

    /// Raw relation index and rotation sign.
    fn relation_sign(&self, r: RelationId) -> (usize, f64) {
        let r = r as usize;
        if r < self.raw_relations {
            (r, 1.0)
        } else {
            (r - self.raw_relations, -1.0)
        }
    }

    fn check(&self, entities: &[EntityId], body: &[RelationId]) -> Result<()> {
        if let Some(e) = entities.iter().find(|&&e| e as usize >= self.num_entities) {
            return Err(Error::InvalidState(format!("entity {e} has no embedding")));
        }
        if let Some(r) = body.iter().find(|&&r| r as usize >= 2 * self.raw_relations) {
            return Err(Error::InvalidState(format!("relation {r} has no embedding")));
        }
        Ok(())
    }

    /// Summed rotation angles of a relation sequence.
    pub fn body_phase(&self, body: &[RelationId]) -> Vec<f64> {
        let mut theta = vec![0.0; self.dim];
        for &r in body {
            let (raw, sign) = self.relation_sign(r);
            let off = self.phase_offset(raw);
            for (t, p) in theta.iter_mut().zip(&self.params[off..off + self.dim]) {
                *t += sign * p;
            }
        }
        theta
    }

    /// `x_head ∘ exp(iθ)` as `(re, im)`.
    pub fn rotate(&self, head: EntityId, theta: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let d = self.dim;
        let off = self.entity_offset(head);
        let (re, im) = self.params[off..off + 2 * d].split_at(d);
        let mut ur = vec![0.0; d];
        let mut ui = vec![0.0; d];
        for k in 0..d {
            let (s, c) = theta[k].sin_cos();
            ur[k] = re[k] * c - im[k] * s;
            ui[k] = re[k] * s + im[k] * c;
        }
        (ur, ui)
    }

    /// L1 distance between a rotated vector and an entity embedding.
    pub fn distance(&self, rotated: &(Vec<f64>, Vec<f64>), tail: EntityId) -> f64 {
        let d = self.dim;
        let off = self.entity_offset(tail);
        let (re, im) = self.params[off..off + 2 * d].split_at(d);
        (0..d)
            .map(|k| (rotated.0[k] - re[k]).hypot(rotated.1[k] - im[k]))
            .sum()
    }

    /// `σ(δ − d(x_head ∘ rotation(body), x_tail))`.
    pub fn phi(&self, head: EntityId, body: &[RelationId], tail: EntityId) -> Result<f64> {
        self.check(&[head, tail], body)?;
        let rotated = self.rotate(head, &self.body_phase(body));
        Ok(sigmoid(self.margin - self.distance(&rotated, tail)))
    }

    /// Path score of a concrete walk `entities[0] -body[0]-> … -> entities[l]`.
    /// Rotations compose, so only the endpoints matter.
    pub fn phi_path(&self, entities: &[EntityId], body: &[RelationId]) -> Result<f64> {
        if entities.len() != body.len() + 1 {
            return Err(Error::InvalidState(format!(
                "path with {} entities cannot follow {} relations",
                entities.len(),
                body.len()
            )));
        }
        self.phi(entities[0], body, entities[body.len()])
    }

    /// Adds `scale · ∂φ/∂params` for `φ(head, body, tail)` into `grad`.
    pub(crate) fn accumulate_phi_grad(
        &self,
        head: EntityId,
        body: &[RelationId],
        theta: &[f64],
        rotated: &(Vec<f64>, Vec<f64>),
        tail: EntityId,
        phi: f64,
        scale: f64,
        grad: &mut Vec<(usize, f64)>,
    ) {
        let d = self.dim;
        // ∂φ/∂dist = −φ(1 − φ).
        let dd = -phi * (1.0 - phi) * scale;
        if dd == 0.0 {
            return;
        }
        let h_off = self.entity_offset(head);
        let t_off = self.entity_offset(tail);
        let mut dtheta = vec![0.0; d];
        for k in 0..d {
            let (ur, ui) = (rotated.0[k], rotated.1[k]);
            let dr = ur - self.params[t_off + k];
            let di = ui - self.params[t_off + d + k];
            let norm = dr.hypot(di);
            if norm == 0.0 {
                continue;
            }
            let (gr, gi) = (dd * dr / norm, dd * di / norm);
            let (s, c) = theta[k].sin_cos();
            grad.push((h_off + k, gr * c + gi * s));
            grad.push((h_off + d + k, -gr * s + gi * c));
            grad.push((t_off + k, -gr));
            grad.push((t_off + d + k, -gi));
            dtheta[k] = -gr * ui + gi * ur;
        }
        for &r in body {
            let (raw, sign) = self.relation_sign(r);
            let off = self.phase_offset(raw);
            for (k, g) in dtheta.iter().enumerate() {
                if *g != 0.0 {
                    grad.push((off + k, sign * g));
                }
            }
        }
    }
}
