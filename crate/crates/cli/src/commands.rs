use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use tshift_core::adaptation::{adaptation_grid, method_grid_csv, render_adaptation_table, AdaptContext, AdaptationMethod, AdaptationOutcome};
use tshift_core::drift::{describe, generate_with, DriftConfig};
use tshift_core::exec::Execution;
use tshift_core::harness::{self, summary_markdown, JobFailure, RunConfig, RunConfigFile, RunOptions};
use tshift_core::io::write_atomic;
use tshift_core::learners::TrainerSession;
use tshift_core::split::{materialize_all, plan_splits, train_size};
use tshift_core::summary::{summarize_grid, summary_csv, SummaryScores};
use tshift_core::Error;

use crate::{AdaptArgs, GridArgs, RenderArgs, RunArgs, SimulateArgs, SummarizeArgs};

/// Cells that could not be computed; the rest of the run completed.
#[derive(Debug)]
struct FailedCells {
    failures: Vec<JobFailure>,
}

impl fmt::Display for FailedCells {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} job(s) failed; their cells are marked failed:", self.failures.len())?;
        for j in &self.failures {
            writeln!(f, "  column {} seed {}: {}", j.train, j.seed, j.message)?;
        }
        Ok(())
    }
}

impl std::error::Error for FailedCells {}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    if let Some(f) = e.downcast_ref::<FailedCells>() {
        return if f.failures.iter().any(|j| j.is_trainer_error) { 3 } else { 2 };
    }
    match e.downcast_ref::<Error>() {
        Some(Error::InvalidArgument(_)) => 1,
        Some(err) if err.is_trainer_error() => 3,
        _ => 2,
    }
}

fn resolve_run(a: &RunArgs) -> Result<RunConfig> {
    let mut f = match &a.config {
        Some(p) => RunConfigFile::read(p)?,
        None => RunConfigFile::default(),
    };
    macro_rules! take {
        ($($field:ident),*) => {$(
            if let Some(v) = &a.$field {
                f.$field = Some(v.clone());
            }
        )*};
    }
    take!(dataset, metric, periods_per_split, seeds, split_seed, trainer, out, alpha, workers, decimals, max_tokens);
    let mut cfg = f.resolve()?;
    for (k, v) in &a.hparams {
        cfg.trainer.hyperparameters.set(k.clone(), v);
    }
    Ok(cfg)
}

fn print_and_write(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())?;
    print!("{text}");
    Ok(())
}

pub fn split(a: RunArgs) -> Result<()> {
    let cfg = resolve_run(&a)?;
    let ds = cfg.load_dataset()?;
    let plan = plan_splits(&ds, cfg.periods_per_split, cfg.split_seed)?;
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    let path = cfg.out.join("plan.json");
    plan.write(&path)?;
    println!("| split | periods | records | train | dev |\n|---|---|---:|---:|---:|");
    for t in 1..=plan.n {
        let size = plan.ids(t)?.len();
        let train = train_size(size);
        println!("| {t} | {} | {size} | {train} | {} |", plan.label(t), size - train);
    }
    eprintln!("wrote {}", path.display());
    Ok(())
}

pub fn simulate(a: SimulateArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => DriftConfig::read(p)?,
        None => DriftConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(c) = a.churn {
        cfg.churn = c;
    }
    if let Some(p) = a.periods {
        cfg.periods = p;
    }
    if let Some(r) = a.records_per_period {
        cfg.records_per_period = r;
    }
    let exec = a.workers.map(Execution::with_workers).unwrap_or_default();
    let corpus = generate_with(&cfg, exec)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    corpus.dataset.write_jsonl(&a.out.join("corpus.jsonl"))?;
    write_atomic(&a.out.join("drift.toml"), cfg.to_toml().as_bytes())?;
    let universe = corpus.indicative_universe();
    let report = format!(
        "## Corpus\n\n{}\n## Indicative-vocabulary overlap\n\n{}",
        describe(&corpus.dataset, None).render(),
        describe(&corpus.dataset, Some(&universe)).render_overlap()
    );
    print_and_write(&a.out.join("drift.md"), &report)?;
    eprintln!("wrote {} records to {}", corpus.dataset.len(), a.out.join("corpus.jsonl").display());
    Ok(())
}

fn fail_if_any(failures: Vec<JobFailure>) -> Result<()> {
    if failures.is_empty() {
        Ok(())
    } else {
        Err(FailedCells { failures }.into())
    }
}

pub fn run_grid(a: GridArgs) -> Result<()> {
    let cfg = resolve_run(&a.run)?;
    let outcome = harness::run_grid(&cfg, RunOptions { fresh: a.fresh })?;
    eprintln!(
        "trained {} model(s); grid at {}",
        outcome.trainings,
        cfg.out.join("grid.csv").display()
    );
    let grid_path = cfg.out.join("grid.csv");
    let matrix = harness::render_matrix_file(&grid_path, cfg.decimals)?;
    write_atomic(&cfg.out.join("matrix.md"), matrix.as_bytes())?;
    fail_if_any(outcome.failures)?;
    let (_, files) = harness::summarize(&grid_path, cfg.alpha, cfg.decimals, &cfg.out)?;
    print!("{matrix}\n{}", fs::read_to_string(&files.markdown)?);
    Ok(())
}

const TABLE_ROWS: [AdaptationMethod; 3] = [
    AdaptationMethod::GoldRetrain,
    AdaptationMethod::FinetunePretrainFinetune,
    AdaptationMethod::SelfLabel,
];

pub fn adapt(a: AdaptArgs) -> Result<()> {
    let cfg = resolve_run(&a.run)?;
    let ds = cfg.load_dataset()?;
    let plan = plan_splits(&ds, cfg.periods_per_split, cfg.split_seed)?;
    let views = materialize_all(&ds, &plan, cfg.split_seed)?;
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    plan.write(&cfg.out.join("plan.json"))?;

    let can_pretrain = TrainerSession::start(&cfg.trainer)?.capabilities().supports_pretrain_phase;
    let methods: Vec<AdaptationMethod> = match &a.method {
        Some(ms) => {
            if let Some(m) = ms.iter().find(|m| m.needs_pretrain()).filter(|_| !can_pretrain) {
                return Err(Error::UnsupportedCapability(format!("{m}: a pre-training phase in {}", cfg.trainer)).into());
            }
            ms.clone()
        }
        None => TABLE_ROWS.into_iter().filter(|m| can_pretrain || !m.needs_pretrain()).collect(),
    };
    if !can_pretrain && a.method.is_none() {
        eprintln!("note: {} cannot pre-train; skipping ft-pretrain-ft", cfg.trainer);
    }

    let ctx = AdaptContext {
        views: &views,
        metric: &cfg.metric,
        inventory: &ds.label_inventory,
    };
    let outcomes: Vec<AdaptationOutcome> = methods
        .iter()
        .map(|&m| adaptation_grid(&ctx, m, &cfg.trainer, &cfg.seeds, a.fraction, cfg.execution()))
        .collect::<tshift_core::Result<_>>()?;
    let refs: Vec<&AdaptationOutcome> = outcomes.iter().collect();
    write_atomic(&cfg.out.join("adapt_grid.csv"), method_grid_csv(&refs).as_bytes())?;
    fail_if_any(outcomes.iter().flat_map(|o| o.failures.clone()).collect())?;

    let summaries: Vec<(AdaptationMethod, SummaryScores)> = outcomes
        .iter()
        .map(|o| Ok((o.method, summarize_grid(&o.grid, &cfg.wilcoxon())?)))
        .collect::<tshift_core::Result<_>>()?;
    let find = |m: AdaptationMethod| summaries.iter().find(|(x, _)| *x == m).map(|(_, s)| s);
    let mut table_rows: Vec<(AdaptationMethod, Option<&SummaryScores>)> = TABLE_ROWS.iter().map(|&m| (m, find(m))).collect();
    for (m, s) in &summaries {
        if !TABLE_ROWS.contains(m) {
            table_rows.push((*m, Some(s)));
        }
    }
    let labelled: Vec<(&str, &SummaryScores)> = summaries.iter().map(|(m, s)| (m.name(), s)).collect();
    write_atomic(&cfg.out.join("adapt_summary.csv"), summary_csv(&labelled).as_bytes())?;
    let report = format!(
        "## Adaptation scores w.r.t. the anchor split\n\n{}\n{}",
        render_adaptation_table(&table_rows),
        summary_markdown(&labelled, cfg.decimals)
    );
    print_and_write(&cfg.out.join("adaptation.md"), &report)
}

fn sibling_dir(grid: &Path) -> PathBuf {
    match grid.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

pub fn summarize(a: SummarizeArgs) -> Result<()> {
    let out = a.out.unwrap_or_else(|| sibling_dir(&a.grid));
    let (_, files) = harness::summarize(&a.grid, a.alpha, a.decimals, &out)?;
    print!("{}", fs::read_to_string(&files.markdown)?);
    Ok(())
}

pub fn render_matrix(a: RenderArgs) -> Result<()> {
    let text = harness::render_matrix_file(&a.grid, a.decimals)?;
    let out = a.out.unwrap_or_else(|| sibling_dir(&a.grid).join("matrix.md"));
    print_and_write(&out, &text)
}
