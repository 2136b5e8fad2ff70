//! Chain rules `head ← body₁ ∧ … ∧ body_l` and rule multisets.

use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::kg::{RelationId, Vocabularies};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Rule {
    pub head: RelationId,
    pub body: Vec<RelationId>,
}

impl Rule {
    pub fn new(head: RelationId, body: impl Into<Vec<RelationId>>) -> Self {
        let body = body.into();
        debug_assert!(!body.is_empty(), "rule body must be non-empty");
        Self { head, body }
    }

    pub fn len(&self) -> usize {
        self.body.len()
    }

    pub fn is_empty(&self) -> bool {
        self.body.is_empty()
    }

    pub fn validate(&self, max_len: usize, num_relations: usize) -> Result<()> {
        if self.body.is_empty() {
            return Err(Error::InvalidArgument("rule body is empty".into()));
        }
        if self.body.len() > max_len {
            return Err(Error::InvalidArgument(format!(
                "rule body length {} exceeds maximum {max_len}",
                self.body.len()
            )));
        }
        let bad = std::iter::once(self.head)
            .chain(self.body.iter().copied())
            .find(|&r| r as usize >= num_relations);
        if let Some(r) = bad {
            return Err(Error::InvalidArgument(format!(
                "relation id {r} out of range ({num_relations} relations)"
            )));
        }
        Ok(())
    }

    /// `body` as space-separated surface names.
    pub fn body_names(&self, vocab: &Vocabularies) -> String {
        self.body
            .iter()
            .map(|&r| vocab.relation_name(r))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn display<'a>(&'a self, vocab: &'a Vocabularies) -> impl fmt::Display + 'a {
        struct D<'a>(&'a Rule, &'a Vocabularies);
        impl fmt::Display for D<'_> {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{} <- ", self.1.relation_name(self.0.head))?;
                for (i, &r) in self.0.body.iter().enumerate() {
                    if i > 0 {
                        f.write_str(" ^ ")?;
                    }
                    f.write_str(&self.1.relation_name(r))?;
                }
                Ok(())
            }
        }
        D(self, vocab)
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} <-", self.head)?;
        for r in &self.body {
            write!(f, " {r}")?;
        }
        Ok(())
    }
}

/// Rules with multiplicities. Distinct rules keep first-insertion order so
/// iteration is deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RuleMultiset {
    entries: Vec<(Rule, u32)>,
    index: HashMap<Rule, usize>,
    total: u64,
}

impl RuleMultiset {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, rule: Rule, count: u32) {
        if count == 0 {
            return;
        }
        self.total += u64::from(count);
        match self.index.get(&rule) {
            Some(&i) => self.entries[i].1 += count,
            None => {
                self.index.insert(rule.clone(), self.entries.len());
                self.entries.push((rule, count));
            }
        }
    }

    pub fn insert(&mut self, rule: Rule) {
        self.add(rule, 1);
    }

    /// Σ multiplicities.
    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn distinct(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count(&self, rule: &Rule) -> u32 {
        self.index.get(rule).map_or(0, |&i| self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Rule, u32)> {
        self.entries.iter().map(|(r, n)| (r, *n))
    }

    pub fn rules(&self) -> impl Iterator<Item = &Rule> {
        self.entries.iter().map(|(r, _)| r)
    }

    pub fn get(&self, i: usize) -> (&Rule, u32) {
        let (r, n) = &self.entries[i];
        (r, *n)
    }

    pub fn position(&self, rule: &Rule) -> Option<usize> {
        self.index.get(rule).copied()
    }

    pub fn extend(&mut self, other: &RuleMultiset) {
        for (r, n) in other.iter() {
            self.add(r.clone(), n);
        }
    }
}

impl FromIterator<Rule> for RuleMultiset {
    fn from_iter<I: IntoIterator<Item = Rule>>(iter: I) -> Self {
        let mut m = RuleMultiset::new();
        for r in iter {
            m.insert(r);
        }
        m
    }
}

/// One line of a rule file: `head<TAB>r1 r2 … rl<TAB>value`.
pub fn format_rule_line(rule: &Rule, value: f64, vocab: &Vocabularies) -> String {
    format!(
        "{}\t{}\t{}",
        vocab.relation_name(rule.head),
        rule.body_names(vocab),
        format_value(value)
    )
}

/// Fixed six-decimal rendering; byte-stable across runs.
pub fn format_value(value: f64) -> String {
    let v = if value == 0.0 { 0.0 } else { value };
    format!("{v:.6}")
}

pub fn parse_rule_file(text: &str, source: &str, vocab: &Vocabularies) -> Result<Vec<(Rule, f64)>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: source.to_owned(),
            line: lineno + 1,
            message,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(err(format!("expected 3 tab-separated fields, found {}", fields.len())));
        }
        let rel = |name: &str| {
            vocab
                .relation_id(name)
                .ok_or_else(|| err(format!("unknown relation `{name}`")))
        };
        let head = rel(fields[0])?;
        let body = fields[1]
            .split(' ')
            .filter(|s| !s.is_empty())
            .map(rel)
            .collect::<Result<Vec<_>>>()?;
        if body.is_empty() {
            return Err(err("empty rule body".into()));
        }
        let value: f64 = fields[2]
            .parse()
            .map_err(|_| err(format!("bad value `{}`", fields[2])))?;
        out.push((Rule { head, body }, value));
    }
    Ok(out)
}
