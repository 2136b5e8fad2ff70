//! The work behind each command, callable without going through `main`.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rulecraft::checkpoint::Checkpoint;
use rulecraft::em::{em_iteration, reinforce_iteration, IterationReport, Models};
use rulecraft::eval::{budget_table, evaluate, rule_budget_eval, BudgetRow, RankingResult};
use rulecraft::generator::GeneratorModel;
use rulecraft::grounding::{dump_groundings, ground_rule_set};
use rulecraft::kg::{Dataset, GraphView, Triplet};
use rulecraft::predictor::Predictor;
use rulecraft::rule::{format_value, RuleMultiset};

use crate::config::{Optimizer, RunConfig};

/// Runs `f` on a pool of `threads` workers (0 = every core). The
/// `RULECRAFT_THREADS` environment variable takes precedence.
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let threads = match std::env::var("RULECRAFT_THREADS") {
        Ok(v) => v
            .parse()
            .with_context(|| format!("RULECRAFT_THREADS=`{v}` is not a thread count"))?,
        Err(_) => threads,
    };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build()?;
    Ok(pool.install(f))
}

fn keep_fraction(split: &[Triplet], fraction: f64, seed: u64) -> Vec<Triplet> {
    if fraction >= 1.0 {
        return split.to_vec();
    }
    let mut v = split.to_vec();
    v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    v.truncate(((split.len() as f64) * fraction).ceil() as usize);
    v
}

/// Loads the configured dataset, keeping `data.fraction` of each split.
pub fn load_dataset(config: &RunConfig) -> Result<Dataset> {
    let ds = Dataset::load(&config.data_dir)?;
    if config.data_fraction >= 1.0 {
        return Ok(ds);
    }
    let f = config.data_fraction;
    Ok(Dataset::from_splits(
        ds.vocab,
        keep_fraction(&ds.train, f, 1),
        keep_fraction(&ds.valid, f, 2),
        keep_fraction(&ds.test, f, 3),
    ))
}

pub fn checkpoint_path(dir: &Path, iteration: usize) -> PathBuf {
    dir.join(format!("checkpoint-{iteration:03}.ckpt"))
}

/// `head<TAB>body<TAB>log_prob<TAB>weight` for the top `top` beam-search
/// rules of every relation. Rules the predictor has not seen get weight 0.
pub fn export_rules(models: &Models, dataset: &Dataset, top: usize, beam_width: usize) -> Result<String> {
    let width = if beam_width == 0 { top } else { beam_width };
    let vocab = &dataset.vocab;
    let mut out = String::new();
    for r in 0..models.generator.config().num_relations as u32 {
        for (rule, logp) in models.generator.beam_search(r, top, width)? {
            let psi = models.predictor.table().id(&rule).map_or(0.0, |id| models.predictor.table().weight(id));
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}",
                vocab.relation_name(rule.head),
                rule.body_names(vocab),
                format_value(logp),
                format_value(psi)
            );
        }
    }
    Ok(out)
}

pub struct TrainOutcome {
    pub models: Models,
    pub reports: Vec<IterationReport>,
    pub rules_path: PathBuf,
}

fn append(path: &Path, line: &str) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .with_context(|| format!("opening {}", path.display()))?;
    writeln!(f, "{line}")?;
    Ok(())
}

/// Pretraining and EM (or REINFORCE) iterations. Writes a checkpoint after
/// pretraining and after every iteration, one report record per iteration,
/// and the final rule export. On failure the last good checkpoint remains.
pub fn train(config: &RunConfig, dataset: &Dataset) -> Result<TrainOutcome> {
    let out = &config.output_dir;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let reports_path = out.join("reports.txt");
    fs::write(&reports_path, "")?;
    fs::write(out.join("config.cfg"), config.to_text())?;

    let raw = dataset.vocab.raw_relation_count() as usize;
    let triplets = dataset.training_triplets();
    let started = Instant::now();
    let mut generator = GeneratorModel::new(config.generator(2 * raw), config.generator_seed)?;
    let losses = generator.pretrain_on_paths(&dataset.graph, &triplets, &config.pretrain())?;
    let pretrain_loss = losses.last().copied().unwrap_or(f64::NAN);
    if losses.iter().any(|l| !l.is_finite()) {
        bail!(rulecraft::Error::Numeric("pretraining loss is not finite".into()));
    }
    append(
        &reports_path,
        &format!(
            "phase=pretrain steps={} loss={:.6} seconds={:.1}",
            losses.len(),
            pretrain_loss,
            started.elapsed().as_secs_f64()
        ),
    )?;
    let predictor = Predictor::new(config.predictor(), dataset.graph.num_entities(), raw)?;
    let mut models = Models { generator, predictor };
    let save = |models: &Models, iteration: usize| -> Result<()> {
        let ck = Checkpoint::new(&dataset.vocab, iteration as u64, models.clone());
        ck.save(checkpoint_path(out, iteration))?;
        ck.save(out.join("model.ckpt"))?;
        Ok(())
    };
    save(&models, 0)?;

    let em = config.em();
    let mut reports = Vec::new();
    for it in 0..config.iterations {
        let t = Instant::now();
        let report = match config.optimizer {
            Optimizer::Em => em_iteration(&mut models, &dataset.graph, &triplets, &em, it),
            Optimizer::Reinforce => reinforce_iteration(&mut models, &dataset.graph, &triplets, &em, it),
        }
        .with_context(|| format!("iteration {it}; last good checkpoint is {}", checkpoint_path(out, it).display()))?;
        append(&reports_path, &format!("phase=iterate {report} seconds={:.1}", t.elapsed().as_secs_f64()))?;
        eprintln!("{report}");
        save(&models, it + 1)?;
        reports.push(report);
    }
    let rules_path = out.join("rules.txt");
    fs::write(&rules_path, export_rules(&models, dataset, config.rules_per_query, config.beam_width)?)?;
    Ok(TrainOutcome {
        models,
        reports,
        rules_path,
    })
}

/// Loads a checkpoint and checks it against the dataset vocabulary.
pub fn load_models(path: &Path, dataset: &Dataset) -> Result<Models> {
    let ck = Checkpoint::load(path)?;
    ck.check_vocab(&dataset.vocab)?;
    Ok(ck.models)
}

pub fn evaluate_models(config: &RunConfig, dataset: &Dataset, models: &Models) -> Result<RankingResult> {
    Ok(evaluate(&models.generator, &models.predictor, dataset, &dataset.test, &config.eval())?)
}

pub fn budget_eval(config: &RunConfig, dataset: &Dataset, models: &Models, budgets: &[usize]) -> Result<Vec<BudgetRow>> {
    Ok(rule_budget_eval(
        &models.generator,
        &config.predictor(),
        dataset,
        &dataset.test,
        budgets,
        &config.eval(),
    )?)
}

pub fn format_budget(rows: &[BudgetRow]) -> String {
    budget_table(rows)
}

/// Grounding dump of the top `top` rules of `relation` from `head`.
pub fn ground(config: &RunConfig, models: &Models, dataset: &Dataset, head: &str, relation: &str, top: usize) -> Result<String> {
    let vocab = &dataset.vocab;
    let Some(h) = vocab.entities.get(head) else {
        bail!(rulecraft::Error::InvalidArgument(format!("unknown entity `{head}`")));
    };
    let Some(r) = vocab.relation_id(relation) else {
        bail!(rulecraft::Error::InvalidArgument(format!("unknown relation `{relation}`")));
    };
    let mut rules = RuleMultiset::new();
    for (rule, _) in models.generator.beam_search(r, top, top)? {
        rules.insert(rule);
    }
    let grounding = ground_rule_set(&GraphView::full(&dataset.graph), h, &rules, &config.grounding());
    Ok(dump_groundings(
        &rules,
        &grounding,
        |rule| format!("{}", rule.display(vocab)),
        |e| vocab.entities.name(e).to_owned(),
    ))
}
