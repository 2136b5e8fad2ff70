//! Run configuration: a sectioned `key = value` file plus `--section.key value`
//! overrides.
//!
//! ```text
//! # comment
//! [em]
//! rules_per_relation = 500
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rulecraft::em::{EmConfig, SelectionMode};
use rulecraft::eval::EvalConfig;
use rulecraft::generator::{GeneratorConfig, PretrainConfig};
use rulecraft::grounding::GroundingConfig;
use rulecraft::predictor::{PathMode, PredictorConfig, WeightInit};

/// Every problem found while reading or validating a configuration.
#[derive(Debug, thiserror::Error)]
#[error("invalid configuration:\n  {}", .0.join("\n  "))]
pub struct ConfigError(pub Vec<String>);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Optimizer {
    Em,
    Reinforce,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Directory holding `train.txt`, `valid.txt`, `test.txt`.
    pub data_dir: PathBuf,
    /// Fraction of each split kept, for smoke runs.
    pub data_fraction: f64,
    pub max_rule_len: usize,
    pub generator_embedding_dim: usize,
    pub generator_input_size: usize,
    pub generator_hidden_size: usize,
    pub generator_learning_rate: f64,
    pub generator_seed: u64,
    pub pretrain_walks: usize,
    pub pretrain_steps: usize,
    pub optimizer: Optimizer,
    pub rules_per_relation: usize,
    pub selected_per_instance: usize,
    pub iterations: usize,
    pub selection: SelectionMode,
    pub predictor_passes: usize,
    pub generator_steps: usize,
    pub init_sample: usize,
    pub em_seed: u64,
    pub temperature: f64,
    pub predictor_learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub weight_init: WeightInit,
    pub path_mode: PathMode,
    pub embedding_dim: usize,
    pub margin: f64,
    pub embedding_learning_rate: f64,
    pub predictor_seed: u64,
    pub path_cap: usize,
    pub fanout_limit: u64,
    pub rules_per_query: usize,
    pub beam_width: usize,
    pub eval_passes: usize,
    pub raw_ranking: bool,
    /// Worker threads; 0 uses every core.
    pub threads: usize,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let em = EmConfig::default();
        let pred = PredictorConfig::default();
        let grounding = GroundingConfig::default();
        let eval = EvalConfig::default();
        Self {
            data_dir: PathBuf::from("data"),
            data_fraction: 1.0,
            max_rule_len: 3,
            generator_embedding_dim: 64,
            generator_input_size: 64,
            generator_hidden_size: 64,
            generator_learning_rate: 1e-2,
            generator_seed: 0,
            pretrain_walks: 5,
            pretrain_steps: 400,
            optimizer: Optimizer::Em,
            rules_per_relation: em.rules_per_relation,
            selected_per_instance: em.selected_per_instance,
            iterations: em.iterations,
            selection: em.selection,
            predictor_passes: em.predictor_passes,
            generator_steps: em.generator_steps,
            init_sample: em.init_sample,
            em_seed: 0,
            temperature: pred.temperature,
            predictor_learning_rate: pred.learning_rate,
            weight_decay: pred.weight_decay,
            batch_size: pred.batch_size,
            weight_init: pred.init,
            path_mode: pred.path_mode,
            embedding_dim: pred.embedding_dim,
            margin: pred.margin,
            embedding_learning_rate: pred.embedding_learning_rate,
            predictor_seed: 0,
            path_cap: grounding.path_cap,
            fanout_limit: grounding.fanout_limit,
            rules_per_query: eval.rules_per_query,
            beam_width: eval.beam_width,
            eval_passes: eval.predictor_passes,
            raw_ranking: eval.raw,
            threads: 0,
            output_dir: PathBuf::from("runs/out"),
        }
    }
}

fn selection_name(s: SelectionMode) -> &'static str {
    match s {
        SelectionMode::TopK => "top-k",
        SelectionMode::Map => "map",
        SelectionMode::Posterior => "posterior",
    }
}

fn init_name(w: WeightInit) -> &'static str {
    match w {
        WeightInit::Heuristic => "heuristic",
        WeightInit::Zero => "zero",
        WeightInit::Random => "random",
    }
}

fn path_mode_name(p: PathMode) -> &'static str {
    match p {
        PathMode::Constant => "constant",
        PathMode::Rotation => "rotation",
    }
}

fn optimizer_name(o: Optimizer) -> &'static str {
    match o {
        Optimizer::Em => "em",
        Optimizer::Reinforce => "reinforce",
    }
}

fn num<T: std::str::FromStr>(value: &str) -> Result<T, String> {
    value.parse().map_err(|_| format!("cannot parse `{value}`"))
}

fn choice<T: Copy>(value: &str, options: &[(&str, T)]) -> Result<T, String> {
    options
        .iter()
        .find(|(name, _)| *name == value)
        .map(|&(_, v)| v)
        .ok_or_else(|| {
            let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
            format!("`{value}` is not one of {}", names.join(", "))
        })
}

fn flag(value: &str) -> Result<bool, String> {
    choice(value, &[("true", true), ("false", false)])
}

/// Every `section.key`, in file order.
pub const KEYS: &[&str] = &[
    "data.dir",
    "data.fraction",
    "generator.max_rule_len",
    "generator.embedding_dim",
    "generator.input_size",
    "generator.hidden_size",
    "generator.learning_rate",
    "generator.seed",
    "pretrain.walks_per_triplet",
    "pretrain.steps",
    "em.optimizer",
    "em.rules_per_relation",
    "em.selected_per_instance",
    "em.iterations",
    "em.selection",
    "em.predictor_passes",
    "em.generator_steps",
    "em.init_sample",
    "em.seed",
    "predictor.temperature",
    "predictor.learning_rate",
    "predictor.weight_decay",
    "predictor.batch_size",
    "predictor.init",
    "predictor.path_mode",
    "predictor.embedding_dim",
    "predictor.margin",
    "predictor.embedding_learning_rate",
    "predictor.seed",
    "grounding.path_cap",
    "grounding.fanout_limit",
    "eval.rules_per_query",
    "eval.beam_width",
    "eval.predictor_passes",
    "eval.raw",
    "run.threads",
    "run.output_dir",
];

impl RunConfig {
    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        match key {
            "data.dir" => self.data_dir = PathBuf::from(value),
            "data.fraction" => self.data_fraction = num(value)?,
            "generator.max_rule_len" => self.max_rule_len = num(value)?,
            "generator.embedding_dim" => self.generator_embedding_dim = num(value)?,
            "generator.input_size" => self.generator_input_size = num(value)?,
            "generator.hidden_size" => self.generator_hidden_size = num(value)?,
            "generator.learning_rate" => self.generator_learning_rate = num(value)?,
            "generator.seed" => self.generator_seed = num(value)?,
            "pretrain.walks_per_triplet" => self.pretrain_walks = num(value)?,
            "pretrain.steps" => self.pretrain_steps = num(value)?,
            "em.optimizer" => {
                self.optimizer = choice(value, &[("em", Optimizer::Em), ("reinforce", Optimizer::Reinforce)])?
            }
            "em.rules_per_relation" => self.rules_per_relation = num(value)?,
            "em.selected_per_instance" => self.selected_per_instance = num(value)?,
            "em.iterations" => self.iterations = num(value)?,
            "em.selection" => {
                self.selection = choice(
                    value,
                    &[
                        ("top-k", SelectionMode::TopK),
                        ("map", SelectionMode::Map),
                        ("posterior", SelectionMode::Posterior),
                    ],
                )?
            }
            "em.predictor_passes" => self.predictor_passes = num(value)?,
            "em.generator_steps" => self.generator_steps = num(value)?,
            "em.init_sample" => self.init_sample = num(value)?,
            "em.seed" => self.em_seed = num(value)?,
            "predictor.temperature" => self.temperature = num(value)?,
            "predictor.learning_rate" => self.predictor_learning_rate = num(value)?,
            "predictor.weight_decay" => self.weight_decay = num(value)?,
            "predictor.batch_size" => self.batch_size = num(value)?,
            "predictor.init" => {
                self.weight_init = choice(
                    value,
                    &[
                        ("heuristic", WeightInit::Heuristic),
                        ("zero", WeightInit::Zero),
                        ("random", WeightInit::Random),
                    ],
                )?
            }
            "predictor.path_mode" => {
                self.path_mode = choice(value, &[("constant", PathMode::Constant), ("rotation", PathMode::Rotation)])?
            }
            "predictor.embedding_dim" => self.embedding_dim = num(value)?,
            "predictor.margin" => self.margin = num(value)?,
            "predictor.embedding_learning_rate" => self.embedding_learning_rate = num(value)?,
            "predictor.seed" => self.predictor_seed = num(value)?,
            "grounding.path_cap" => self.path_cap = num(value)?,
            "grounding.fanout_limit" => self.fanout_limit = num(value)?,
            "eval.rules_per_query" => self.rules_per_query = num(value)?,
            "eval.beam_width" => self.beam_width = num(value)?,
            "eval.predictor_passes" => self.eval_passes = num(value)?,
            "eval.raw" => self.raw_ranking = flag(value)?,
            "run.threads" => self.threads = num(value)?,
            "run.output_dir" => self.output_dir = PathBuf::from(value),
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Text form of one key.
    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "data.dir" => self.data_dir.display().to_string(),
            "data.fraction" => self.data_fraction.to_string(),
            "generator.max_rule_len" => self.max_rule_len.to_string(),
            "generator.embedding_dim" => self.generator_embedding_dim.to_string(),
            "generator.input_size" => self.generator_input_size.to_string(),
            "generator.hidden_size" => self.generator_hidden_size.to_string(),
            "generator.learning_rate" => self.generator_learning_rate.to_string(),
            "generator.seed" => self.generator_seed.to_string(),
            "pretrain.walks_per_triplet" => self.pretrain_walks.to_string(),
            "pretrain.steps" => self.pretrain_steps.to_string(),
            "em.optimizer" => optimizer_name(self.optimizer).into(),
            "em.rules_per_relation" => self.rules_per_relation.to_string(),
            "em.selected_per_instance" => self.selected_per_instance.to_string(),
            "em.iterations" => self.iterations.to_string(),
            "em.selection" => selection_name(self.selection).into(),
            "em.predictor_passes" => self.predictor_passes.to_string(),
            "em.generator_steps" => self.generator_steps.to_string(),
            "em.init_sample" => self.init_sample.to_string(),
            "em.seed" => self.em_seed.to_string(),
            "predictor.temperature" => self.temperature.to_string(),
            "predictor.learning_rate" => self.predictor_learning_rate.to_string(),
            "predictor.weight_decay" => self.weight_decay.to_string(),
            "predictor.batch_size" => self.batch_size.to_string(),
            "predictor.init" => init_name(self.weight_init).into(),
            "predictor.path_mode" => path_mode_name(self.path_mode).into(),
            "predictor.embedding_dim" => self.embedding_dim.to_string(),
            "predictor.margin" => self.margin.to_string(),
            "predictor.embedding_learning_rate" => self.embedding_learning_rate.to_string(),
            "predictor.seed" => self.predictor_seed.to_string(),
            "grounding.path_cap" => self.path_cap.to_string(),
            "grounding.fanout_limit" => self.fanout_limit.to_string(),
            "eval.rules_per_query" => self.rules_per_query.to_string(),
            "eval.beam_width" => self.beam_width.to_string(),
            "eval.predictor_passes" => self.eval_passes.to_string(),
            "eval.raw" => self.raw_ranking.to_string(),
            "run.threads" => self.threads.to_string(),
            "run.output_dir" => self.output_dir.display().to_string(),
            _ => return None,
        })
    }

    /// Parses config text on top of the defaults. Every problem is reported.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut config = Self::default();
        let mut problems = Vec::new();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_owned();
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                problems.push(format!("line {}: expected `key = value`", i + 1));
                continue;
            };
            let full = format!("{section}.{}", key.trim());
            if let Err(e) = config.set(&full, value.trim()) {
                problems.push(format!("line {}: {full}: {e}", i + 1));
            }
        }
        problems.extend(config.problems());
        if problems.is_empty() {
            Ok(config)
        } else {
            Err(ConfigError(problems))
        }
    }

    /// Reads a config file; a relative `data.dir` or `run.output_dir` is
    /// resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError(vec![format!("{}: {e}", path.display())]))?;
        let mut config = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        if config.data_dir.is_relative() {
            config.data_dir = base.join(&config.data_dir);
        }
        if config.output_dir.is_relative() {
            config.output_dir = base.join(&config.output_dir);
        }
        Ok(config)
    }

    /// Applies `(key, value)` overrides, then validates.
    pub fn with_overrides<'a>(mut self, overrides: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self, ConfigError> {
        let mut problems = Vec::new();
        for (key, value) in overrides {
            if let Err(e) = self.set(key, value) {
                problems.push(format!("--{key}: {e}"));
            }
        }
        problems.extend(self.problems());
        if problems.is_empty() {
            Ok(self)
        } else {
            Err(ConfigError(problems))
        }
    }

    /// Canonical text form; `parse` of it gives back the same config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for key in KEYS {
            let (sec, name) = key.split_once('.').unwrap();
            if sec != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                let _ = writeln!(out, "[{sec}]");
                section = sec;
            }
            let _ = writeln!(out, "{name} = {}", self.get(key).unwrap());
        }
        out
    }

    /// Range problems, all at once.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        let mut need = |ok: bool, msg: &str| {
            if !ok {
                p.push(msg.to_owned());
            }
        };
        let pos = |x: f64| x.is_finite() && x > 0.0;
        need(self.data_fraction > 0.0 && self.data_fraction <= 1.0, "data.fraction must be in (0, 1]");
        need((1..=6).contains(&self.max_rule_len), "generator.max_rule_len must be in 1..=6");
        need(self.generator_embedding_dim > 0, "generator.embedding_dim must be positive");
        need(self.generator_input_size > 0, "generator.input_size must be positive");
        need(self.generator_hidden_size > 0, "generator.hidden_size must be positive");
        need(pos(self.generator_learning_rate), "generator.learning_rate must be positive");
        need(self.rules_per_relation > 0, "em.rules_per_relation must be positive");
        need(
            self.selected_per_instance >= 1 && self.selected_per_instance <= self.rules_per_relation,
            "em.selected_per_instance must be in 1..=em.rules_per_relation",
        );
        need(pos(self.temperature), "predictor.temperature must be positive");
        need(pos(self.predictor_learning_rate), "predictor.learning_rate must be positive");
        need(self.weight_decay.is_finite() && self.weight_decay >= 0.0, "predictor.weight_decay must be non-negative");
        need(self.batch_size > 0, "predictor.batch_size must be positive");
        need(self.embedding_dim > 0, "predictor.embedding_dim must be positive");
        need(self.margin.is_finite(), "predictor.margin must be finite");
        need(pos(self.embedding_learning_rate), "predictor.embedding_learning_rate must be positive");
        need(self.path_cap > 0, "grounding.path_cap must be positive");
        need(self.fanout_limit > 0, "grounding.fanout_limit must be positive");
        p
    }

    pub fn generator(&self, num_relations: usize) -> GeneratorConfig {
        GeneratorConfig {
            num_relations,
            max_rule_len: self.max_rule_len,
            embedding_dim: self.generator_embedding_dim,
            input_size: self.generator_input_size,
            hidden_size: self.generator_hidden_size,
            learning_rate: self.generator_learning_rate,
            lr_decay_steps: 0,
        }
    }

    pub fn pretrain(&self) -> PretrainConfig {
        PretrainConfig {
            walks_per_triplet: self.pretrain_walks,
            steps: self.pretrain_steps,
            seed: self.generator_seed,
        }
    }

    pub fn grounding(&self) -> GroundingConfig {
        GroundingConfig {
            path_cap: self.path_cap,
            fanout_limit: self.fanout_limit,
            ..GroundingConfig::default()
        }
    }

    pub fn em(&self) -> EmConfig {
        EmConfig {
            rules_per_relation: self.rules_per_relation,
            selected_per_instance: self.selected_per_instance,
            iterations: self.iterations,
            selection: self.selection,
            predictor_passes: self.predictor_passes,
            generator_steps: self.generator_steps,
            init_sample: self.init_sample,
            grounding: self.grounding(),
            seed: self.em_seed,
        }
    }

    pub fn predictor(&self) -> PredictorConfig {
        PredictorConfig {
            temperature: self.temperature,
            learning_rate: self.predictor_learning_rate,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            init: self.weight_init,
            path_mode: self.path_mode,
            embedding_dim: self.embedding_dim,
            margin: self.margin,
            embedding_learning_rate: self.embedding_learning_rate,
            seed: self.predictor_seed,
        }
    }

    pub fn eval(&self) -> EvalConfig {
        EvalConfig {
            rules_per_query: self.rules_per_query,
            beam_width: self.beam_width,
            predictor_passes: self.eval_passes,
            init_sample: self.init_sample,
            grounding: self.grounding(),
            raw: self.raw_ranking,
            seed: self.em_seed,
        }
    }
}
