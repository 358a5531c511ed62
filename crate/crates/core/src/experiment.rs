//! Experiment orchestration behind the `ictlab` binary: one TOML config, one
//! master seed, deterministic output files.
//!
//! Output layout under the run directory:
//!
//! ```text
//! suite/suite.jsonl, suite/suite_manifest.json, folds.json
//! fold-F/<method>-kK/checkpoint.json (+ .bin), train_log.json
//! fold-F/<method>-kK/eval_records.csv, eval_summary.json
//! fold-F/<method>-kK/sense/sense_report.json, mu_samples.csv
//! grid/fold-F/<method>-kK/grid_validation.csv, grid_winner.json
//! report.md, report.json
//! ```

use std::cell::Cell;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::OptimizerKind;
use crate::error::{Error, Result};
use crate::eval::{evaluate_method, records_csv, summarize, EvalConfig, EvalSummary};
use crate::lm::{LanguageModel, LmConfig};
use crate::meta::{
    raw_lm_baseline, train_fomaml, train_ict, train_instruction_tuning, AdaptConfig, Method, MethodRun, TrainConfig,
};
use crate::rng::derive_seed;
use crate::sense::{sensitivity_report, SenseConfig, SenseMode, SensitivityReport};
use crate::tasks::io::{build_suite, read_suite, write_suite, SuiteConfig, SuiteManifest, MANIFEST_FILE};
use crate::tasks::{make_folds, Suite, SuiteSplit, TaskSpec};

/// Model hyperparameters; the vocabulary size comes from the suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_context: usize,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

fn default_init_std() -> f64 {
    0.02
}

impl ModelConfig {
    pub fn lm_config(&self, vocab_size: usize) -> LmConfig {
        LmConfig {
            vocab_size,
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            d_ff: self.d_ff,
            max_context: self.max_context,
            dropout: self.dropout,
            init_std: self.init_std,
        }
    }
}

/// Which test (and validation) tasks are scored.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalSubset {
    #[default]
    All,
    /// Only tasks of the label-permutation sub-family.
    LabelPermuted,
}

fn default_folds() -> usize {
    8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FoldConfig {
    #[serde(default = "default_folds")]
    pub n_folds: usize,
    #[serde(default)]
    pub fold: usize,
    #[serde(default)]
    pub eval_subset: EvalSubset,
}

impl Default for FoldConfig {
    fn default() -> Self {
        Self {
            n_folds: default_folds(),
            fold: 0,
            eval_subset: EvalSubset::All,
        }
    }
}

fn default_shots() -> Vec<usize> {
    vec![1, 2, 5]
}
fn default_batch() -> usize {
    1
}
fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Adam
}
fn default_inner_steps() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodConfig {
    pub name: Method,
    #[serde(default = "default_shots")]
    pub shots: Vec<usize>,
    pub epochs: usize,
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_inner_steps")]
    pub inner_steps: usize,
    /// Fine-tuning step size for INS_T_FT; FOMAML always uses `lr`.
    #[serde(default)]
    pub inner_lr: Option<f64>,
}

fn default_m() -> usize {
    5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    #[serde(default = "default_m")]
    pub m_samplings: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { m_samplings: default_m() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[serde(default)]
pub struct SenseSettings {
    pub mode: SenseMode,
    pub n_targets: usize,
    pub budget: u64,
    pub mc_instructions: usize,
    pub mc_supports: usize,
    pub mc_orderings: Option<usize>,
    pub fixed_instruction: usize,
}

impl Default for SenseSettings {
    fn default() -> Self {
        let d = SenseConfig::monte_carlo(0, 0);
        Self {
            mode: d.mode,
            n_targets: d.n_targets,
            budget: d.budget,
            mc_instructions: d.mc_instructions,
            mc_supports: d.mc_supports,
            mc_orderings: d.mc_orderings,
            fixed_instruction: d.fixed_instruction,
        }
    }
}

/// Value lists expanded as a full Cartesian product.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub epochs: Vec<usize>,
    pub lr: Vec<f64>,
    /// Only used by FOMAML and INS_T_FT.
    #[serde(default)]
    pub inner_steps: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    pub suite: SuiteConfig,
    #[serde(default)]
    pub folds: FoldConfig,
    pub model: ModelConfig,
    pub method: MethodConfig,
    #[serde(default)]
    pub eval: EvalSettings,
    #[serde(default)]
    pub sense: SenseSettings,
    #[serde(default)]
    pub grid: Option<GridConfig>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.folds.fold >= self.folds.n_folds {
            return Err(Error::config(format!(
                "fold {} out of range for {} folds",
                self.folds.fold, self.folds.n_folds
            )));
        }
        if self.method.shots.is_empty() {
            return Err(Error::config("method.shots must list at least one K"));
        }
        if let Some(&k) = self.method.shots.iter().find(|&&k| k > self.suite.k_max) {
            return Err(Error::config(format!("shot count {k} exceeds suite.k_max {}", self.suite.k_max)));
        }
        self.model.lm_config(self.suite.vocab()?.size()).validate()?;
        Ok(())
    }

    pub fn out_dir(&self) -> Result<&Path> {
        self.out_dir
            .as_deref()
            .ok_or_else(|| Error::config("no output directory: set out_dir or pass --out"))
    }

    pub fn suite_seed(&self) -> u64 {
        derive_seed(self.seed, "suite", 0)
    }

    pub fn fold_seed(&self) -> u64 {
        derive_seed(self.seed, "folds", 0)
    }

    pub fn base_model_seed(&self) -> u64 {
        derive_seed(self.seed, "base-model", 0)
    }

    /// Training seed; independent of the output directory.
    pub fn train_seed(&self, method: Method, k: usize, fold: usize) -> u64 {
        derive_seed(self.seed, &format!("train/{}/k{k}", method.cli_name()), fold as u64)
    }

    /// Evaluation seed, shared by all methods so their episodes are paired.
    pub fn eval_seed(&self, fold: usize) -> u64 {
        derive_seed(self.seed, "eval", fold as u64)
    }

    pub fn sense_config(&self, k: usize, fold: usize) -> SenseConfig {
        let s = &self.sense;
        SenseConfig {
            k,
            mode: s.mode,
            n_targets: s.n_targets,
            budget: s.budget,
            mc_instructions: s.mc_instructions,
            mc_supports: s.mc_supports,
            mc_orderings: s.mc_orderings,
            fixed_instruction: s.fixed_instruction,
            seed: derive_seed(self.seed, "sense", fold as u64),
        }
    }

    /// Method hyperparameters with `epochs`/`lr`/`inner_steps` replaced.
    fn with_point(&self, p: &GridPoint) -> Self {
        let mut c = self.clone();
        c.method.epochs = p.epochs;
        c.method.lr = p.lr;
        c.method.inner_steps = p.inner_steps;
        c
    }

    fn train_config(&self, method: Method, k: usize, fold: usize) -> TrainConfig {
        TrainConfig {
            epochs: self.method.epochs,
            lr: self.method.lr,
            batch_size: self.method.batch_size,
            optimizer: self.method.optimizer,
            seed: self.train_seed(method, k, fold),
        }
    }

    fn adapt(&self) -> AdaptConfig {
        AdaptConfig {
            inner_steps: self.method.inner_steps,
            inner_lr: match self.method.name {
                Method::Fomaml => self.method.lr,
                _ => self.method.inner_lr.unwrap_or(self.method.lr),
            },
        }
    }
}

/// Effective support size of a method's run: INS_T never uses one.
pub fn effective_k(method: Method, k: usize) -> usize {
    if method == Method::InsT {
        0
    } else {
        k
    }
}

pub fn run_dir(out: &Path, fold: usize, method: Method, k: usize) -> PathBuf {
    out.join(format!("fold-{fold}"))
        .join(format!("{}-k{}", method.cli_name(), effective_k(method, k)))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_file(path, serde_json::to_string_pretty(value)? + "\n")
}

/// Generates the suite and fold assignment under `out`.
pub fn cmd_gen(cfg: &ExperimentConfig) -> Result<SuiteManifest> {
    let out = cfg.out_dir()?;
    let (suite, report) = build_suite(cfg.suite_seed(), &cfg.suite)?;
    let manifest = write_suite(&out.join("suite"), cfg.suite_seed(), &cfg.suite, &suite, &report)?;
    let folds = make_folds(&suite.tasks, cfg.folds.n_folds, cfg.fold_seed())?;
    write_json(&out.join("folds.json"), &folds)?;
    log::info!(
        "suite: {} tasks kept of {}, {} examples removed by the majority-label filter",
        report.tasks_kept,
        report.tasks_in,
        report.examples_removed
    );
    Ok(manifest)
}

/// The persisted suite if present and generated from this config, else a
/// fresh one (written to disk).
pub fn load_suite(cfg: &ExperimentConfig) -> Result<(Suite, Vec<SuiteSplit>)> {
    let out = cfg.out_dir()?;
    let dir = out.join("suite");
    if !dir.join(MANIFEST_FILE).exists() {
        cmd_gen(cfg)?;
    }
    let (suite, manifest) = read_suite(&dir)?;
    if manifest.config != cfg.suite || manifest.seed != cfg.suite_seed() {
        return Err(Error::config(format!(
            "{} was generated from a different suite config or seed",
            dir.display()
        )));
    }
    let folds = make_folds(&suite.tasks, cfg.folds.n_folds, cfg.fold_seed())?;
    Ok((suite, folds))
}

fn scored<'a>(cfg: &ExperimentConfig, suite: &'a Suite, ids: &[String]) -> Result<Vec<&'a TaskSpec>> {
    let tasks = suite.select(ids)?;
    let tasks: Vec<&TaskSpec> = match cfg.folds.eval_subset {
        EvalSubset::All => tasks,
        EvalSubset::LabelPermuted => tasks.into_iter().filter(|t| t.is_label_permuted()).collect(),
    };
    if tasks.is_empty() {
        return Err(Error::config("no tasks left to score in this partition"));
    }
    Ok(tasks)
}

pub fn base_model(cfg: &ExperimentConfig, suite: &Suite) -> Result<LanguageModel> {
    LanguageModel::init(cfg.model.lm_config(suite.vocab.size()), cfg.base_model_seed())
}

/// Trains `cfg.method.name` with `k` shots on the training tasks of `fold`.
pub fn train_method(cfg: &ExperimentConfig, base: &LanguageModel, train: &[&TaskSpec], k: usize, fold: usize) -> Result<MethodRun> {
    let method = cfg.method.name;
    let tc = cfg.train_config(method, effective_k(method, k), fold);
    match method {
        Method::Ict => train_ict(base, train, k, &tc),
        Method::InsT => train_instruction_tuning(base, train, &tc),
        Method::InsTFt => train_instruction_tuning(base, train, &tc)?.into_finetuning(cfg.adapt()),
        Method::Fomaml => train_fomaml(base, train, k, cfg.method.inner_steps, &tc),
        Method::Raw => Ok(raw_lm_baseline(base)),
    }
}

/// Trains and saves one run; returns its directory.
pub fn cmd_train(cfg: &ExperimentConfig, k: usize) -> Result<PathBuf> {
    let fold = cfg.folds.fold;
    let (suite, folds) = load_suite(cfg)?;
    let split = &folds[fold];
    let train = suite.select(&split.train_tasks)?;
    let base = base_model(cfg, &suite)?;
    let run = train_method(cfg, &base, &train, k, fold)?;
    let dir = run_dir(cfg.out_dir()?, fold, cfg.method.name, k);
    run.save(&dir)?;
    write_file(&dir.join("config.toml"), cfg.to_toml()?)?;
    Ok(dir)
}

/// Evaluates a saved run on the test tasks of the configured fold.
pub fn cmd_eval(cfg: &ExperimentConfig, k: usize) -> Result<EvalSummary> {
    let fold = cfg.folds.fold;
    let (suite, folds) = load_suite(cfg)?;
    let dir = run_dir(cfg.out_dir()?, fold, cfg.method.name, k);
    let run = MethodRun::load(&dir)?;
    let test = scored(cfg, &suite, &folds[fold].test_tasks)?;
    let ec = EvalConfig {
        k,
        m_samplings: cfg.eval.m_samplings,
        seed: cfg.eval_seed(fold),
    };
    let records = evaluate_method(&run, &test, &ec, None)?;
    let summary = summarize(&records)?;
    write_file(&dir.join("eval_records.csv"), records_csv(&records)?)?;
    write_json(&dir.join("eval_summary.json"), &summary)?;
    Ok(summary)
}

/// Variance decomposition of a saved run on the fold's test tasks.
pub fn cmd_sense(cfg: &ExperimentConfig, k: usize) -> Result<SensitivityReport> {
    let fold = cfg.folds.fold;
    let (suite, folds) = load_suite(cfg)?;
    let dir = run_dir(cfg.out_dir()?, fold, cfg.method.name, k);
    let run = MethodRun::load(&dir)?;
    let test = scored(cfg, &suite, &folds[fold].test_tasks)?;
    sensitivity_report(&run, &test, &cfg.sense_config(k, fold), Some(&dir.join("sense")))
}

/// A partition whose every read is counted.
pub struct AuditedTasks<'a> {
    tasks: Vec<&'a TaskSpec>,
    reads: Cell<usize>,
}

impl<'a> AuditedTasks<'a> {
    pub fn new(tasks: Vec<&'a TaskSpec>) -> Self {
        Self {
            tasks,
            reads: Cell::new(0),
        }
    }

    pub fn read(&self) -> &[&'a TaskSpec] {
        self.reads.set(self.reads.get() + 1);
        &self.tasks
    }

    pub fn reads(&self) -> usize {
        self.reads.get()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub epochs: usize,
    pub lr: f64,
    pub inner_steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub fold: usize,
    pub method: Method,
    pub k: usize,
    pub point: usize,
    pub epochs: usize,
    pub lr: f64,
    pub inner_steps: usize,
    pub val_metric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridWinner {
    pub fold: usize,
    pub method: Method,
    pub k: usize,
    /// `auc` on binary suites, `p_at_1` otherwise.
    pub metric: String,
    pub point: usize,
    pub params: GridPoint,
    pub val_metric: f64,
    /// Reads of the test partition before the winner was fixed.
    pub test_reads_before_selection: usize,
    pub test: EvalSummary,
}

/// Full Cartesian product of the grid. Inner steps only vary for methods
/// that adapt by gradient.
pub fn expand_grid(cfg: &ExperimentConfig) -> Result<Vec<GridPoint>> {
    let g = cfg
        .grid
        .as_ref()
        .ok_or_else(|| Error::config("cmd grid needs a [grid] table"))?;
    let inner: Vec<usize> = if cfg.method.name.adapts_by_gradient() {
        g.inner_steps.clone()
    } else {
        vec![cfg.method.inner_steps]
    };
    if g.epochs.is_empty() || g.lr.is_empty() || inner.is_empty() {
        return Err(Error::config("grid is empty"));
    }
    let mut out = Vec::new();
    for &epochs in &g.epochs {
        for &lr in &g.lr {
            for &inner_steps in &inner {
                out.push(GridPoint { epochs, lr, inner_steps });
            }
        }
    }
    Ok(out)
}

fn headline(summary: &EvalSummary) -> (String, f64) {
    match summary.macro_auc {
        Some(a) => ("auc".into(), a),
        None => ("p_at_1".into(), summary.macro_p_at_1),
    }
}

/// Index of the best validation metric; the earliest point wins ties.
pub fn select_winner(rows: &[GridRow]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, r) in rows.iter().enumerate() {
        if best.map_or(true, |b| r.val_metric > rows[b].val_metric) {
            best = Some(i);
        }
    }
    best
}

/// Grid search on one fold: every point is trained on the training tasks and
/// scored on the validation tasks; only the winner is evaluated on test.
pub fn grid_search_fold(cfg: &ExperimentConfig, suite: &Suite, split: &SuiteSplit, k: usize) -> Result<(Vec<GridRow>, GridWinner)> {
    let fold = split.fold_index;
    if !split.is_disjoint() {
        return Err(Error::config(format!("fold {fold} partitions overlap")));
    }
    let points = expand_grid(cfg)?;
    let train = suite.select(&split.train_tasks)?;
    let val = scored(cfg, suite, &split.val_tasks)?;
    let test = AuditedTasks::new(scored(cfg, suite, &split.test_tasks)?);
    let base = base_model(cfg, suite)?;
    let method = cfg.method.name;

    let mut rows = Vec::with_capacity(points.len());
    let mut runs = Vec::with_capacity(points.len());
    for (i, p) in points.iter().enumerate() {
        let pc = cfg.with_point(p);
        let run = train_method(&pc, &base, &train, k, fold)?;
        let ec = EvalConfig {
            k,
            m_samplings: cfg.eval.m_samplings,
            seed: derive_seed(cfg.seed, "val", fold as u64),
        };
        let summary = summarize(&evaluate_method(&run, &val, &ec, None)?)?;
        let (_, v) = headline(&summary);
        log::info!("fold {fold} {method} k={k} point {i} {p:?}: val {v:.4}");
        rows.push(GridRow {
            fold,
            method,
            k: effective_k(method, k),
            point: i,
            epochs: p.epochs,
            lr: p.lr,
            inner_steps: p.inner_steps,
            val_metric: v,
        });
        runs.push(run);
    }
    let w = select_winner(&rows).ok_or_else(|| Error::config("grid is empty"))?;
    let reads_before = test.reads();

    let ec = EvalConfig {
        k,
        m_samplings: cfg.eval.m_samplings,
        seed: cfg.eval_seed(fold),
    };
    let test_summary = summarize(&evaluate_method(&runs[w], test.read(), &ec, None)?)?;
    let (metric, _) = headline(&test_summary);
    let val_metric = rows[w].val_metric;
    Ok((
        rows,
        GridWinner {
            fold,
            method,
            k: effective_k(method, k),
            metric,
            point: w,
            params: points[w].clone(),
            val_metric,
            test_reads_before_selection: reads_before,
            test: test_summary,
        },
    ))
}

/// Runs the grid on the configured fold and writes the validation table and
/// the winner.
pub fn cmd_grid(cfg: &ExperimentConfig, k: usize) -> Result<GridWinner> {
    let (suite, folds) = load_suite(cfg)?;
    let split = &folds[cfg.folds.fold];
    let (rows, winner) = grid_search_fold(cfg, &suite, split, k)?;
    let dir = cfg
        .out_dir()?
        .join("grid")
        .join(format!("fold-{}", split.fold_index))
        .join(format!("{}-k{}", cfg.method.name.cli_name(), effective_k(cfg.method.name, k)));
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r)?;
    }
    write_file(
        &dir.join("grid_validation.csv"),
        w.into_inner().map_err(|e| Error::config(e.to_string()))?,
    )?;
    write_json(&dir.join("grid_winner.json"), &winner)?;
    Ok(winner)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub fold: usize,
    pub method: Method,
    pub k: usize,
    pub p_at_1: f64,
    pub auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: Method,
    pub k: usize,
    pub n_folds: usize,
    pub p_at_1: f64,
    pub auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub per_fold: Vec<ReportRow>,
    pub aggregate: Vec<AggregateRow>,
}

fn sorted_subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    out.sort();
    Ok(out)
}

/// Collects every `eval_summary.json` into per-fold and fold-averaged tables.
pub fn cmd_report(cfg: &ExperimentConfig) -> Result<Report> {
    let out = cfg.out_dir()?;
    let mut per_fold = Vec::new();
    for fold_dir in sorted_subdirs(out)? {
        let Some(fold) = fold_dir
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("fold-"))
            .and_then(|n| n.parse::<usize>().ok())
        else {
            continue;
        };
        for run in sorted_subdirs(&fold_dir)? {
            let p = run.join("eval_summary.json");
            if !p.exists() {
                continue;
            }
            let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            let s: EvalSummary = serde_json::from_str(&text)?;
            per_fold.push(ReportRow {
                fold,
                method: s.method,
                k: s.k,
                p_at_1: s.macro_p_at_1,
                auc: s.macro_auc,
            });
        }
    }
    per_fold.sort_by(|a, b| (a.method.cli_name(), a.k, a.fold).cmp(&(b.method.cli_name(), b.k, b.fold)));

    let mut aggregate: Vec<AggregateRow> = Vec::new();
    for chunk in per_fold.chunk_by(|a, b| a.method == b.method && a.k == b.k) {
        let n = chunk.len() as f64;
        aggregate.push(AggregateRow {
            method: chunk[0].method,
            k: chunk[0].k,
            n_folds: chunk.len(),
            p_at_1: chunk.iter().map(|r| r.p_at_1).sum::<f64>() / n,
            auc: chunk
                .iter()
                .map(|r| r.auc)
                .collect::<Option<Vec<_>>>()
                .map(|v| v.iter().sum::<f64>() / n),
        });
    }
    let report = Report { per_fold, aggregate };
    write_json(&out.join("report.json"), &report)?;
    write_file(&out.join("report.md"), render_report(&report))?;
    Ok(report)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

pub fn render_report(r: &Report) -> String {
    let mut s = String::from("# Results\n\n## Aggregated over folds\n\n| method | K | folds | P@1 | AUC |\n|---|---|---|---|---|\n");
    for a in &r.aggregate {
        s.push_str(&format!(
            "| {} | {} | {} | {:.4} | {} |\n",
            a.method,
            a.k,
            a.n_folds,
            a.p_at_1,
            fmt_opt(a.auc)
        ));
    }
    s.push_str("\n## Per fold\n\n| fold | method | K | P@1 | AUC |\n|---|---|---|---|---|\n");
    for row in &r.per_fold {
        s.push_str(&format!(
            "| {} | {} | {} | {:.4} | {} |\n",
            row.fold,
            row.method,
            row.k,
            row.p_at_1,
            fmt_opt(row.auc)
        ));
    }
    s
}
