//! Versioned binary checkpoints of a generator and predictor pair.
//!
//! Layout: magic, format version, SHA-256 of the vocabulary, the number of
//! completed EM iterations, then the generator and predictor sections, all
//! little-endian. A SHA-256 of everything before it closes the file.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::em::Models;
use crate::error::{Error, Result};
use crate::generator::{GeneratorConfig, GeneratorModel};
use crate::kg::Vocabularies;
use crate::optim::{Adam, LazyAdam};
use crate::predictor::{PathMode, Predictor, PredictorConfig, RotationEmbeddings, RuleTable, WeightInit};
use crate::rule::Rule;

const MAGIC: &[u8; 8] = b"RULECKPT";
pub const FORMAT_VERSION: u32 = 1;

/// SHA-256 over entity and relation surfaces in id order.
pub fn vocab_hash(vocab: &Vocabularies) -> [u8; 32] {
    let mut h = Sha256::new();
    for (tag, v) in [(b'E', &vocab.entities), (b'R', &vocab.relations)] {
        h.update([tag]);
        h.update((v.len() as u64).to_le_bytes());
        for name in v.names() {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
        }
    }
    h.finalize().into()
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub vocab_hash: [u8; 32],
    /// EM iterations completed when the checkpoint was written.
    pub iteration: u64,
    pub models: Models,
}

impl Checkpoint {
    pub fn new(vocab: &Vocabularies, iteration: u64, models: Models) -> Self {
        Self {
            vocab_hash: vocab_hash(vocab),
            iteration,
            models,
        }
    }

    /// Fails with [`Error::Incompatible`] when `vocab` differs from the one
    /// the checkpoint was trained on.
    pub fn check_vocab(&self, vocab: &Vocabularies) -> Result<()> {
        let expected = vocab_hash(vocab);
        if expected != self.vocab_hash {
            return Err(Error::Incompatible(format!(
                "checkpoint vocabulary hash {} does not match dataset hash {}",
                hex(&self.vocab_hash),
                hex(&expected)
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u32(FORMAT_VERSION);
        w.bytes(&self.vocab_hash);
        w.u64(self.iteration);
        write_generator(&mut w, &self.models.generator);
        write_predictor(&mut w, &self.models.predictor);
        let digest: [u8; 32] = Sha256::digest(&w.buf).into();
        w.bytes(&digest);
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        let mut r = Reader { buf: body, pos: MAGIC.len() };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Incompatible(format!(
                "checkpoint format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checkpoint("checksum mismatch".into()));
        }
        let vocab_hash: [u8; 32] = r.take(32)?.try_into().unwrap();
        let iteration = r.u64()?;
        let generator = read_generator(&mut r)?;
        let predictor = read_predictor(&mut r)?;
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Self {
            vocab_hash,
            iteration,
            models: Models { generator, predictor },
        })
    }

    /// Writes atomically through a temporary sibling file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn write_generator(w: &mut Writer, g: &GeneratorModel) {
    let c = g.config();
    w.usize(c.num_relations);
    w.usize(c.max_rule_len);
    w.usize(c.embedding_dim);
    w.usize(c.input_size);
    w.usize(c.hidden_size);
    w.f64(c.learning_rate);
    w.u64(c.lr_decay_steps);
    w.u64(g.seed());
    w.f64s(g.params());
    write_adam(w, g.adam());
}

fn read_generator(r: &mut Reader<'_>) -> Result<GeneratorModel> {
    let config = GeneratorConfig {
        num_relations: r.usize()?,
        max_rule_len: r.usize()?,
        embedding_dim: r.usize()?,
        input_size: r.usize()?,
        hidden_size: r.usize()?,
        learning_rate: r.f64()?,
        lr_decay_steps: r.u64()?,
    };
    let seed = r.u64()?;
    let params = r.f64s()?;
    let adam = read_adam(r)?;
    GeneratorModel::from_parts(config, params, adam, seed)
}

fn write_adam(w: &mut Writer, adam: &Adam) {
    let (m, v, t) = adam.state();
    w.f64(adam.weight_decay);
    w.f64s(m);
    w.f64s(v);
    w.u64(t);
}

fn read_adam(r: &mut Reader<'_>) -> Result<Adam> {
    let weight_decay = r.f64()?;
    let m = r.f64s()?;
    let v = r.f64s()?;
    let t = r.u64()?;
    if m.len() != v.len() {
        return Err(Error::Checkpoint("optimizer moment sizes differ".into()));
    }
    Ok(Adam::from_state(m, v, t, weight_decay))
}

fn write_predictor(w: &mut Writer, p: &Predictor) {
    let c = p.config();
    w.f64(c.temperature);
    w.f64(c.learning_rate);
    w.f64(c.weight_decay);
    w.usize(c.batch_size);
    w.u8(match c.init {
        WeightInit::Heuristic => 0,
        WeightInit::Zero => 1,
        WeightInit::Random => 2,
    });
    w.u8(match c.path_mode {
        PathMode::Constant => 0,
        PathMode::Rotation => 1,
    });
    w.usize(c.embedding_dim);
    w.f64(c.margin);
    w.f64(c.embedding_learning_rate);
    w.u64(c.seed);

    let table = p.table();
    w.usize(table.len());
    for (rule, weight) in table.iter() {
        w.u32(rule.head);
        w.usize(rule.body.len());
        for &b in &rule.body {
            w.u32(b);
        }
        w.f64(weight);
    }
    let (psi_adam, emb_adam) = p.optimizer_state();
    w.f64(psi_adam.weight_decay);
    w.f64s(&psi_adam.m);
    w.f64s(&psi_adam.v);
    w.usize(psi_adam.t.len());
    for &t in &psi_adam.t {
        w.u32(t);
    }
    match p.embeddings() {
        None => w.u8(0),
        Some(e) => {
            w.u8(1);
            w.usize(e.dim());
            w.f64(e.margin());
            w.usize(e.num_entities());
            w.usize(e.raw_relations());
            w.f64s(e.params());
        }
    }
    write_adam(w, emb_adam);
}

fn read_predictor(r: &mut Reader<'_>) -> Result<Predictor> {
    let temperature = r.f64()?;
    let learning_rate = r.f64()?;
    let weight_decay = r.f64()?;
    let batch_size = r.usize()?;
    let init = match r.u8()? {
        0 => WeightInit::Heuristic,
        1 => WeightInit::Zero,
        2 => WeightInit::Random,
        x => return Err(Error::Checkpoint(format!("unknown weight init tag {x}"))),
    };
    let path_mode = match r.u8()? {
        0 => PathMode::Constant,
        1 => PathMode::Rotation,
        x => return Err(Error::Checkpoint(format!("unknown path mode tag {x}"))),
    };
    let config = PredictorConfig {
        temperature,
        learning_rate,
        weight_decay,
        batch_size,
        init,
        path_mode,
        embedding_dim: r.usize()?,
        margin: r.f64()?,
        embedding_learning_rate: r.f64()?,
        seed: r.u64()?,
    };
    config.validate()?;

    let mut table = RuleTable::default();
    for _ in 0..r.usize()? {
        let head = r.u32()?;
        let len = r.usize()?;
        let body = (0..len).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let weight = r.f64()?;
        let (id, fresh) = table.insert(&Rule::new(head, body));
        if !fresh {
            return Err(Error::Checkpoint("duplicate rule in table".into()));
        }
        table.set_weight(id, weight);
    }
    let mut psi_adam = LazyAdam::new(r.f64()?);
    psi_adam.m = r.f64s()?;
    psi_adam.v = r.f64s()?;
    let n = r.usize()?;
    psi_adam.t = (0..n).map(|_| r.u32()).collect::<Result<_>>()?;
    if psi_adam.m.len() != psi_adam.v.len() || psi_adam.m.len() != psi_adam.t.len() || psi_adam.m.len() > table.len() {
        return Err(Error::Checkpoint("rule optimizer state does not match table".into()));
    }
    let embeddings = match r.u8()? {
        0 => None,
        1 => {
            let dim = r.usize()?;
            let margin = r.f64()?;
            let n_e = r.usize()?;
            let raw = r.usize()?;
            Some(RotationEmbeddings::from_parts(dim, margin, n_e, raw, r.f64s()?)?)
        }
        x => return Err(Error::Checkpoint(format!("unknown embedding tag {x}"))),
    };
    if embeddings.is_some() != (path_mode == PathMode::Rotation) {
        return Err(Error::Checkpoint("embeddings do not match path mode".into()));
    }
    let emb_adam = read_adam(r)?;
    Ok(Predictor::from_parts(config, table, psi_adam, embeddings, emb_adam))
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        self.usize(v.len());
        for &x in v {
            self.f64(x);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        };
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflow".into()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.usize()?;
        if n > (self.buf.len() - self.pos) / 8 {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        (0..n).map(|_| self.f64()).collect()
    }
}
