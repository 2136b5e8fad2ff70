//! Triple loading, inverse augmentation and the adjacency-indexed graph.
//!
//! Entity and relation ids are dense integers handed out in first-seen order.
//! Every raw relation `r` gets an inverse with id `r + R` where `R` is the raw
//! relation count, so a graph built from augmented triplets answers queries in
//! both directions.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub type EntityId = u32;
pub type RelationId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triplet {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

impl Triplet {
    pub const fn new(head: EntityId, relation: RelationId, tail: EntityId) -> Self {
        Self {
            head,
            relation,
            tail,
        }
    }

    /// The reversed edge `(tail, r⁻¹, head)`.
    pub fn inverse(self, raw_relation_count: u32) -> Self {
        Self::new(
            self.tail,
            inverse_relation(self.relation, raw_relation_count),
            self.head,
        )
    }
}

impl fmt::Display for Triplet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.head, self.relation, self.tail)
    }
}

/// Maps a relation id to its inverse; applying it twice is the identity.
pub fn inverse_relation(relation: RelationId, raw_relation_count: u32) -> RelationId {
    if relation < raw_relation_count {
        relation + raw_relation_count
    } else {
        relation - raw_relation_count
    }
}

/// Interned surface strings.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocab {
    names: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn intern(&mut self, name: &str) -> u32 {
        if let Some(&id) = self.index.get(name) {
            return id;
        }
        let id = self.names.len() as u32;
        self.names.push(name.to_owned());
        self.index.insert(name.to_owned(), id);
        id
    }

    pub fn get(&self, name: &str) -> Option<u32> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: u32) -> &str {
        &self.names[id as usize]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// `id<TAB>surface` lines in id order.
    pub fn to_dump(&self) -> String {
        let mut out = String::new();
        for (id, name) in self.names.iter().enumerate() {
            out.push_str(&format!("{id}\t{name}\n"));
        }
        out
    }

    pub fn from_dump(text: &str, source: &str) -> Result<Self> {
        let mut vocab = Vocab::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                path: source.to_owned(),
                line: lineno + 1,
                message,
            };
            let (id, name) = line
                .split_once('\t')
                .ok_or_else(|| parse_err("expected `id<TAB>surface`".into()))?;
            let id: usize = id
                .parse()
                .map_err(|_| parse_err(format!("bad id `{id}`")))?;
            if id != vocab.len() {
                return Err(parse_err(format!(
                    "ids must be dense and ordered, expected {} got {id}",
                    vocab.len()
                )));
            }
            if vocab.get(name).is_some() {
                return Err(parse_err(format!("duplicate surface `{name}`")));
            }
            vocab.intern(name);
        }
        Ok(vocab)
    }
}

/// Entity and relation vocabularies. Relation ids here are raw ids only; the
/// inverse of relation `r` is `r + relations.len()` and has no surface entry.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocabularies {
    pub entities: Vocab,
    pub relations: Vocab,
}

impl Vocabularies {
    pub fn raw_relation_count(&self) -> u32 {
        self.relations.len() as u32
    }

    /// Surface name for a possibly-inverse relation id; inverses print as `inv_<name>`.
    pub fn relation_name(&self, relation: RelationId) -> String {
        let raw = self.raw_relation_count();
        if relation < raw {
            self.relations.name(relation).to_owned()
        } else {
            format!("inv_{}", self.relations.name(relation - raw))
        }
    }

    /// Inverse of [`Self::relation_name`].
    pub fn relation_id(&self, name: &str) -> Option<RelationId> {
        if let Some(id) = self.relations.get(name) {
            return Some(id);
        }
        name.strip_prefix("inv_")
            .and_then(|raw| self.relations.get(raw))
            .map(|id| id + self.raw_relation_count())
    }
}

/// Parses tab-separated `head<TAB>relation<TAB>tail` lines, interning new
/// surfaces. `source` names the input in error messages.
pub fn parse_triplets(text: &str, source: &str, vocab: &mut Vocabularies) -> Result<Vec<Triplet>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                path: source.to_owned(),
                line: lineno + 1,
                message: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        let head = vocab.entities.intern(fields[0]);
        let relation = vocab.relations.intern(fields[1]);
        let tail = vocab.entities.intern(fields[2]);
        out.push(Triplet::new(head, relation, tail));
    }
    Ok(out)
}

pub fn load_triplets(path: impl AsRef<Path>, vocab: &mut Vocabularies) -> Result<Vec<Triplet>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_triplets(&text, &path.display().to_string(), vocab)
}

/// Appends `(t, r + R, h)` for every `(h, r, t)`, originals first.
pub fn augment_inverse(triplets: &[Triplet], raw_relation_count: u32) -> Vec<Triplet> {
    debug_assert!(triplets.iter().all(|t| t.relation < raw_relation_count));
    let mut out = Vec::with_capacity(triplets.len() * 2);
    out.extend_from_slice(triplets);
    out.extend(triplets.iter().map(|t| t.inverse(raw_relation_count)));
    out
}

/// Immutable adjacency store: for each entity, its out-edges sorted by
/// `(relation, tail)` without duplicates. Edges are kept as two parallel
/// arrays so a `(entity, relation)` lookup yields a plain tail slice.
#[derive(Debug, Clone)]
pub struct KnowledgeGraph {
    num_entities: usize,
    num_relations: usize,
    offsets: Vec<usize>,
    relations: Vec<RelationId>,
    tails: Vec<EntityId>,
}

impl KnowledgeGraph {
    pub fn num_entities(&self) -> usize {
        self.num_entities
    }

    /// Relation count including inverses.
    pub fn num_relations(&self) -> usize {
        self.num_relations
    }

    pub fn raw_relation_count(&self) -> u32 {
        (self.num_relations / 2) as u32
    }

    pub fn num_edges(&self) -> usize {
        self.tails.len()
    }

    pub fn inverse(&self, relation: RelationId) -> RelationId {
        inverse_relation(relation, self.raw_relation_count())
    }

    /// Sorted tails of `(entity, relation, ·)`.
    pub fn neighbors(&self, entity: EntityId, relation: RelationId) -> &[EntityId] {
        let (lo, hi) = (self.offsets[entity as usize], self.offsets[entity as usize + 1]);
        let rels = &self.relations[lo..hi];
        let a = rels.partition_point(|&r| r < relation);
        let b = a + rels[a..].partition_point(|&r| r <= relation);
        &self.tails[lo + a..lo + b]
    }

    /// Out-edges of `entity` as `(relation, tail)`, sorted.
    pub fn out_edges(&self, entity: EntityId) -> impl Iterator<Item = (RelationId, EntityId)> + '_ {
        let (lo, hi) = (self.offsets[entity as usize], self.offsets[entity as usize + 1]);
        self.relations[lo..hi]
            .iter()
            .copied()
            .zip(self.tails[lo..hi].iter().copied())
    }

    pub fn out_degree(&self, entity: EntityId) -> usize {
        self.offsets[entity as usize + 1] - self.offsets[entity as usize]
    }

    pub fn contains(&self, triplet: Triplet) -> bool {
        (triplet.head as usize) < self.num_entities
            && self
                .neighbors(triplet.head, triplet.relation)
                .binary_search(&triplet.tail)
                .is_ok()
    }

    pub fn triplets(&self) -> impl Iterator<Item = Triplet> + '_ {
        (0..self.num_entities as u32).flat_map(move |h| {
            self.out_edges(h).map(move |(r, t)| Triplet::new(h, r, t))
        })
    }
}

/// Builds the adjacency from inverse-augmented triplets. Duplicates collapse.
pub fn build_graph(triplets: &[Triplet], num_entities: usize, num_relations: usize) -> KnowledgeGraph {
    let mut sorted: Vec<Triplet> = triplets.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut offsets = vec![0usize; num_entities + 1];
    for t in &sorted {
        assert!((t.head as usize) < num_entities && (t.tail as usize) < num_entities);
        assert!((t.relation as usize) < num_relations);
        offsets[t.head as usize + 1] += 1;
    }
    for i in 0..num_entities {
        offsets[i + 1] += offsets[i];
    }
    KnowledgeGraph {
        num_entities,
        num_relations,
        offsets,
        relations: sorted.iter().map(|t| t.relation).collect(),
        tails: sorted.iter().map(|t| t.tail).collect(),
    }
}

/// A graph with at most two edges hidden: a training triplet and its inverse.
#[derive(Debug, Clone, Copy)]
pub struct GraphView<'g> {
    graph: &'g KnowledgeGraph,
    masked: [Option<Triplet>; 2],
}

impl<'g> GraphView<'g> {
    /// The unmasked graph, as used at test time.
    pub fn full(graph: &'g KnowledgeGraph) -> Self {
        Self {
            graph,
            masked: [None, None],
        }
    }

    pub fn masking(graph: &'g KnowledgeGraph, triplet: Triplet) -> Self {
        let inverse = triplet.inverse(graph.raw_relation_count());
        Self {
            graph,
            masked: [Some(triplet), Some(inverse)],
        }
    }

    pub fn graph(&self) -> &'g KnowledgeGraph {
        self.graph
    }

    pub fn masked(&self) -> impl Iterator<Item = Triplet> + '_ {
        self.masked.iter().flatten().copied()
    }

    /// Tails of `(entity, relation, ·)` with the masked edge, if any, removed.
    pub fn neighbors(&self, entity: EntityId, relation: RelationId) -> Neighbors<'g> {
        let skip = self
            .masked
            .iter()
            .flatten()
            .find(|m| m.head == entity && m.relation == relation)
            .map(|m| m.tail);
        Neighbors {
            tails: self.graph.neighbors(entity, relation).iter(),
            skip,
        }
    }

    pub fn contains(&self, triplet: Triplet) -> bool {
        !self.masked.contains(&Some(triplet)) && self.graph.contains(triplet)
    }

    /// Visible out-edges of `entity` as `(relation, tail)`.
    pub fn out_edges(&self, entity: EntityId) -> impl Iterator<Item = (RelationId, EntityId)> + 'g {
        let masked = self.masked;
        self.graph.out_edges(entity).filter(move |&(r, t)| {
            !masked.contains(&Some(Triplet::new(entity, r, t)))
        })
    }
}

pub struct Neighbors<'g> {
    tails: std::slice::Iter<'g, EntityId>,
    skip: Option<EntityId>,
}

impl Iterator for Neighbors<'_> {
    type Item = EntityId;

    fn next(&mut self) -> Option<EntityId> {
        loop {
            let t = *self.tails.next()?;
            if Some(t) != self.skip {
                return Some(t);
            }
        }
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        (0, self.tails.size_hint().1)
    }
}

/// A training or test query: answer `answer` to `(head, relation, ?)` on `view`.
#[derive(Debug, Clone, Copy)]
pub struct Instance<'g> {
    pub view: GraphView<'g>,
    pub head: EntityId,
    pub relation: RelationId,
    pub answer: EntityId,
}

impl<'g> Instance<'g> {
    pub fn triplet(&self) -> Triplet {
        Triplet::new(self.head, self.relation, self.answer)
    }

    /// Query against the full graph, for evaluation.
    pub fn test(graph: &'g KnowledgeGraph, query: Triplet) -> Self {
        Self {
            view: GraphView::full(graph),
            head: query.head,
            relation: query.relation,
            answer: query.tail,
        }
    }
}

/// Forms a training instance by hiding `picked` and its inverse from `full_set`.
pub fn make_instance(full_set: &KnowledgeGraph, picked: Triplet) -> Result<Instance<'_>> {
    if !full_set.contains(picked) {
        return Err(Error::InvalidArgument(format!(
            "triplet {picked} is not in the training set"
        )));
    }
    Ok(Instance {
        view: GraphView::masking(full_set, picked),
        head: picked.head,
        relation: picked.relation,
        answer: picked.tail,
    })
}

/// Train/valid/test splits sharing one vocabulary, with the augmented
/// training graph prebuilt.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub vocab: Vocabularies,
    pub train: Vec<Triplet>,
    pub valid: Vec<Triplet>,
    pub test: Vec<Triplet>,
    pub graph: KnowledgeGraph,
}

impl Dataset {
    /// Loads `train.txt`, `valid.txt` and `test.txt` from `dir`. Missing
    /// validation or test files are treated as empty.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut vocab = Vocabularies::default();
        let train = load_triplets(dir.join("train.txt"), &mut vocab)?;
        let mut optional = |name: &str| -> Result<Vec<Triplet>> {
            let path = dir.join(name);
            if path.exists() {
                load_triplets(path, &mut vocab)
            } else {
                Ok(Vec::new())
            }
        };
        let valid = optional("valid.txt")?;
        let test = optional("test.txt")?;
        Ok(Self::from_splits(vocab, train, valid, test))
    }

    pub fn from_splits(
        vocab: Vocabularies,
        train: Vec<Triplet>,
        valid: Vec<Triplet>,
        test: Vec<Triplet>,
    ) -> Self {
        let raw = vocab.raw_relation_count();
        let augmented = augment_inverse(&train, raw);
        let graph = build_graph(&augmented, vocab.entities.len(), 2 * raw as usize);
        Self {
            vocab,
            train,
            valid,
            test,
            graph,
        }
    }

    /// Distinct augmented training triplets, in graph order.
    pub fn training_triplets(&self) -> Vec<Triplet> {
        self.graph.triplets().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab_of(text: &str) -> (Vocabularies, Vec<Triplet>) {
        let mut v = Vocabularies::default();
        let t = parse_triplets(text, "mem", &mut v).unwrap();
        (v, t)
    }

    #[test]
    fn single_line_parse() {
        let (v, t) = vocab_of("alice\tfriend\tbob\n");
        assert_eq!(t, vec![Triplet::new(0, 0, 1)]);
        assert_eq!(v.entities.len(), 2);
        assert_eq!(v.relations.len(), 1);
    }

    #[test]
    fn malformed_line_names_line_number() {
        let mut v = Vocabularies::default();
        let err = parse_triplets("a\tr\tb\nc\td\n", "f.txt", &mut v).unwrap_err();
        match err {
            Error::Parse { line, path, .. } => {
                assert_eq!(line, 2);
                assert_eq!(path, "f.txt");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unreadable_file_is_io_error() {
        let mut v = Vocabularies::default();
        let err = load_triplets("/nonexistent/train.txt", &mut v).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn augment_examples() {
        assert_eq!(
            augment_inverse(&[Triplet::new(0, 0, 1)], 1),
            vec![Triplet::new(0, 0, 1), Triplet::new(1, 1, 0)]
        );
        assert!(augment_inverse(&[], 3).is_empty());
    }

    #[test]
    fn build_two_edges_and_dedup() {
        let g = build_graph(&[Triplet::new(0, 0, 1), Triplet::new(1, 1, 0)], 2, 2);
        assert_eq!(g.neighbors(0, 0), &[1]);
        assert_eq!(g.neighbors(1, 1), &[0]);
        assert!(g.neighbors(0, 1).is_empty());

        let g = build_graph(&[Triplet::new(0, 0, 1), Triplet::new(0, 0, 1)], 2, 2);
        assert_eq!(g.neighbors(0, 0), &[1]);
        assert_eq!(g.num_edges(), 1);
    }

    #[test]
    fn inverse_is_an_involution() {
        for r in 0..10 {
            assert_eq!(inverse_relation(inverse_relation(r, 5), 5), r);
        }
    }

    #[test]
    fn instance_masks_edge_and_inverse() {
        let base = [Triplet::new(0, 0, 1), Triplet::new(0, 0, 2)];
        let g = build_graph(&augment_inverse(&base, 1), 3, 2);
        let inst = make_instance(&g, Triplet::new(0, 0, 1)).unwrap();
        assert_eq!(inst.view.neighbors(0, 0).collect::<Vec<_>>(), vec![2]);
        assert!(inst.view.neighbors(1, 1).next().is_none());
        assert_eq!(inst.view.neighbors(2, 1).collect::<Vec<_>>(), vec![0]);
        assert_eq!((inst.head, inst.relation, inst.answer), (0, 0, 1));
    }

    #[test]
    fn two_triplet_store_leaves_remainder() {
        let g = build_graph(&augment_inverse(&[Triplet::new(0, 0, 1)], 1), 2, 2);
        let inst = make_instance(&g, Triplet::new(0, 0, 1)).unwrap();
        let visible: Vec<_> = g.triplets().filter(|t| inst.view.contains(*t)).collect();
        assert!(visible.is_empty());
    }

    #[test]
    fn absent_pick_is_rejected() {
        let g = build_graph(&[Triplet::new(0, 0, 1), Triplet::new(1, 1, 0)], 2, 2);
        assert!(matches!(
            make_instance(&g, Triplet::new(1, 0, 0)),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn test_instance_sees_full_graph() {
        let g = build_graph(&augment_inverse(&[Triplet::new(0, 0, 1)], 1), 2, 2);
        let inst = Instance::test(&g, Triplet::new(0, 0, 1));
        assert!(g.triplets().all(|t| inst.view.contains(t)));
    }

    #[test]
    fn vocab_dump_roundtrip() {
        let (v, _) = vocab_of("x\tp\ty\ny\tq\tz\n");
        let back = Vocab::from_dump(&v.entities.to_dump(), "dump").unwrap();
        assert_eq!(back, v.entities);
        assert!(Vocab::from_dump("1\tfoo\n", "dump").is_err());
    }

    #[test]
    fn relation_names_cover_inverses() {
        let (v, _) = vocab_of("x\tp\ty\n");
        assert_eq!(v.relation_name(1), "inv_p");
        assert_eq!(v.relation_id("inv_p"), Some(1));
        assert_eq!(v.relation_id("p"), Some(0));
    }
}
