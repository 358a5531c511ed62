//! Sensitivity of episode accuracy to instruction wording, example choice and
//! example order.
//!
//! For a fixed target set, `μ(I, S, σ)` is the accuracy of a method when
//! prompted (or fine-tuned) with instruction `I` and support `S` in order `σ`.
//! By the law of total variance over the independent sampling stages,
//!
//! ```text
//! Var[μ] = Var_I[E_{S,σ}[μ|I]] + E_I[Var_S[E_σ[μ|I,S]]] + E_{I,S}[Var_σ[μ|I,S]]
//!           instruction          example choice           example order
//! ```
//!
//! All variances are reported in percentage points squared (accuracy × 100).

use std::collections::HashMap;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::episodes::{next_permutation, Episode, PromptLayout};
use crate::error::{Error, Result};
use crate::eval::prediction_from_log_probs;
use crate::meta::{finetune_on_support, Method, MethodRun};
use crate::rng;
use crate::tasks::TaskSpec;

pub const SENSE_SCHEMA_VERSION: u32 = 1;
pub const VARIANCE_UNITS: &str = "pp^2";
const PP2: f64 = 1e4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SenseMode {
    Exhaustive,
    MonteCarlo,
}

fn default_targets() -> usize {
    16
}
fn default_budget() -> u64 {
    100_000
}
fn default_mc_instructions() -> usize {
    8
}
fn default_mc_supports() -> usize {
    16
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SenseConfig {
    pub k: usize,
    pub mode: SenseMode,
    /// Size of the fixed target set; the remaining examples form the pool.
    #[serde(default = "default_targets")]
    pub n_targets: usize,
    /// Largest number of μ evaluations exhaustive mode may perform.
    #[serde(default = "default_budget")]
    pub budget: u64,
    #[serde(default = "default_mc_instructions")]
    pub mc_instructions: usize,
    #[serde(default = "default_mc_supports")]
    pub mc_supports: usize,
    /// Orderings per support set; `min(K!, 24)` when absent.
    #[serde(default)]
    pub mc_orderings: Option<usize>,
    /// The single default instruction I* of the fixed-instruction estimators.
    #[serde(default)]
    pub fixed_instruction: usize,
    pub seed: u64,
}

impl SenseConfig {
    pub fn monte_carlo(k: usize, seed: u64) -> Self {
        Self {
            k,
            mode: SenseMode::MonteCarlo,
            n_targets: default_targets(),
            budget: default_budget(),
            mc_instructions: default_mc_instructions(),
            mc_supports: default_mc_supports(),
            mc_orderings: None,
            fixed_instruction: 0,
            seed,
        }
    }

    pub fn exhaustive(k: usize, seed: u64) -> Self {
        Self {
            mode: SenseMode::Exhaustive,
            ..Self::monte_carlo(k, seed)
        }
    }

    fn orderings(&self) -> usize {
        let k_fact = factorial(self.k).min(u128::from(u32::MAX)) as usize;
        self.mc_orderings.unwrap_or(k_fact.min(24)).min(k_fact)
    }
}

fn factorial(k: usize) -> u128 {
    (1..=k as u128).fold(1u128, |a, b| a.saturating_mul(b))
}

fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k as u128).fold(1u128, |acc, i| acc.saturating_mul(n as u128 - i) / (i + 1))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VarianceComponents {
    pub total: f64,
    pub instruction: f64,
    pub choice: f64,
    pub order: f64,
}

/// Components measured with the instruction pinned to I*.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FixedInstructionComponents {
    pub instruction_index: usize,
    pub choice: f64,
    pub order: f64,
}

/// One evaluation of μ. Support ids index the task's example list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MuSample {
    pub task_id: String,
    /// `nested` or `fixed` (the I* sampling stage of monte-carlo mode).
    pub stage: String,
    pub instruction_index: usize,
    pub support_set: String,
    pub ordering: String,
    pub mu: f64,
}

/// Result of [`decompose`] on abstract pool indices.
#[derive(Clone, Debug, PartialEq)]
pub struct Decomposition {
    pub components: VarianceComponents,
    pub fixed: FixedInstructionComponents,
    pub mean_mu: f64,
    pub n_instructions: usize,
    pub n_supports: usize,
    pub n_orderings: usize,
    pub n_evaluations: usize,
    /// `(stage, instruction, ordered pool indices, μ)` in evaluation order.
    pub samples: Vec<(&'static str, usize, Vec<usize>, f64)>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn pop_var(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64
}

fn sample_var(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64
}

/// Lexicographic `k`-subsets of `0..n`.
fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut c: Vec<usize> = (0..k).collect();
    if k > n {
        return out;
    }
    loop {
        out.push(c.clone());
        let Some(i) = (0..k).rev().find(|&i| c[i] != i + n - k) else {
            return out;
        };
        c[i] += 1;
        for j in i + 1..k {
            c[j] = c[j - 1] + 1;
        }
    }
}

fn permutations(set: &[usize]) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..set.len()).collect();
    let mut out = Vec::new();
    loop {
        out.push(idx.iter().map(|&i| set[i]).collect());
        if !next_permutation(&mut idx) {
            return out;
        }
    }
}

/// Decomposes the variance of `mu(instruction, ordered support)` over
/// `n_instructions` instructions and `k`-subsets of a pool of `pool` items.
pub fn decompose<F>(n_instructions: usize, pool: usize, config: &SenseConfig, mut mu: F) -> Result<Decomposition>
where
    F: FnMut(usize, &[usize]) -> Result<f64>,
{
    let k = config.k;
    if n_instructions == 0 {
        return Err(Error::Empty("instruction list"));
    }
    if config.fixed_instruction >= n_instructions {
        return Err(Error::config(format!(
            "fixed instruction {} out of range ({n_instructions} instructions)",
            config.fixed_instruction
        )));
    }
    if pool < k {
        return Err(Error::PoolTooSmall {
            task: String::from("<sense pool>"),
            pool,
            needed: k,
        });
    }
    match config.mode {
        SenseMode::Exhaustive => exhaustive(n_instructions, pool, config, &mut mu),
        SenseMode::MonteCarlo => monte_carlo(n_instructions, pool, config, &mut mu),
    }
}

fn exhaustive<F>(n_instr: usize, pool: usize, config: &SenseConfig, mu: &mut F) -> Result<Decomposition>
where
    F: FnMut(usize, &[usize]) -> Result<f64>,
{
    let k = config.k;
    let needed = (n_instr as u128)
        .saturating_mul(binomial(pool, k))
        .saturating_mul(factorial(k));
    if needed > u128::from(config.budget) {
        return Err(Error::BudgetExceeded {
            needed,
            budget: u128::from(config.budget),
        });
    }
    let supports = combinations(pool, k);
    let orders: Vec<Vec<Vec<usize>>> = supports.iter().map(|s| permutations(s)).collect();
    let mut samples = Vec::with_capacity(needed as usize);
    // table[i][s][o]
    let mut table = vec![vec![Vec::new(); supports.len()]; n_instr];
    for (i, row) in table.iter_mut().enumerate() {
        for (s, cell) in row.iter_mut().enumerate() {
            for ord in &orders[s] {
                let v = mu(i, ord)?;
                cell.push(v);
                samples.push(("nested", i, ord.clone(), v));
            }
        }
    }

    let m_is: Vec<Vec<f64>> = table.iter().map(|row| row.iter().map(|c| mean(c)).collect()).collect();
    let m_i: Vec<f64> = m_is.iter().map(|r| mean(r)).collect();
    let all: Vec<f64> = table.iter().flatten().flatten().copied().collect();
    let order_i: Vec<f64> = table.iter().map(|row| mean(&row.iter().map(|c| pop_var(c)).collect::<Vec<_>>())).collect();
    let choice_i: Vec<f64> = m_is.iter().map(|r| pop_var(r)).collect();
    let star = config.fixed_instruction;
    Ok(Decomposition {
        components: VarianceComponents {
            total: pop_var(&all) * PP2,
            instruction: pop_var(&m_i) * PP2,
            choice: mean(&choice_i) * PP2,
            order: mean(&order_i) * PP2,
        },
        fixed: FixedInstructionComponents {
            instruction_index: star,
            choice: choice_i[star] * PP2,
            order: order_i[star] * PP2,
        },
        mean_mu: mean(&all),
        n_instructions: n_instr,
        n_supports: supports.len(),
        n_orderings: factorial(k) as usize,
        n_evaluations: all.len(),
        samples,
    })
}

fn monte_carlo<F>(n_instr: usize, pool: usize, config: &SenseConfig, mu: &mut F) -> Result<Decomposition>
where
    F: FnMut(usize, &[usize]) -> Result<f64>,
{
    let (a, b, c) = (config.mc_instructions, config.mc_supports, config.orderings());
    if a == 0 || b == 0 || c == 0 {
        return Err(Error::config("monte-carlo sample counts must be positive"));
    }
    let k = config.k;
    let mut rng = rng::stream(config.seed, "sense-mc", 0);
    let mut memo: HashMap<(usize, Vec<usize>), f64> = HashMap::new();
    let mut samples = Vec::new();
    let mut eval = |stage: &'static str, i: usize, ord: Vec<usize>, samples: &mut Vec<_>| -> Result<f64> {
        let v = match memo.get(&(i, ord.clone())) {
            Some(&v) => v,
            None => {
                let v = mu(i, &ord)?;
                memo.insert((i, ord.clone()), v);
                v
            }
        };
        samples.push((stage, i, ord, v));
        Ok(v)
    };
    // Support set, then `c` iid orderings of it.
    let draw_cell = |rng: &mut rng::StreamRng| -> Vec<Vec<usize>> {
        let mut set = index::sample(rng, pool, k).into_vec();
        set.sort_unstable();
        (0..c)
            .map(|_| {
                let mut o = set.clone();
                o.shuffle(rng);
                o
            })
            .collect()
    };

    // nested stage: a instructions × b supports × c orderings
    let mut cells: Vec<Vec<Vec<f64>>> = Vec::with_capacity(a);
    for _ in 0..a {
        let i = rng.gen_range(0..n_instr);
        let mut row = Vec::with_capacity(b);
        for _ in 0..b {
            let ords = draw_cell(&mut rng);
            let vals = ords
                .into_iter()
                .map(|o| eval("nested", i, o, &mut samples))
                .collect::<Result<Vec<_>>>()?;
            row.push(vals);
        }
        cells.push(row);
    }
    let (order, choice, instruction) = nested_estimates(&cells, b, c);
    let all: Vec<f64> = cells.iter().flatten().flatten().copied().collect();

    // fixed-instruction stage: b supports × c orderings under I*
    let star = config.fixed_instruction;
    let mut fixed_row = Vec::with_capacity(b);
    for _ in 0..b {
        let ords = draw_cell(&mut rng);
        let vals = ords
            .into_iter()
            .map(|o| eval("fixed", star, o, &mut samples))
            .collect::<Result<Vec<_>>>()?;
        fixed_row.push(vals);
    }
    let (f_order, f_choice, _) = nested_estimates(&[fixed_row], b, c);

    Ok(Decomposition {
        components: VarianceComponents {
            total: sample_var(&all) * PP2,
            instruction: instruction * PP2,
            choice: choice * PP2,
            order: order * PP2,
        },
        fixed: FixedInstructionComponents {
            instruction_index: star,
            choice: f_choice * PP2,
            order: f_order * PP2,
        },
        mean_mu: mean(&all),
        n_instructions: a,
        n_supports: b,
        n_orderings: c,
        n_evaluations: memo.len(),
        samples,
    })
}

/// Bessel-corrected nested estimators on a balanced `[a][b][c]` design:
/// returns `(order, choice, instruction)`, each clamped at zero.
fn nested_estimates(cells: &[Vec<Vec<f64>>], b: usize, c: usize) -> (f64, f64, f64) {
    let s2_sigma: Vec<Vec<f64>> = cells.iter().map(|r| r.iter().map(|o| sample_var(o)).collect()).collect();
    let m_is: Vec<Vec<f64>> = cells.iter().map(|r| r.iter().map(|o| mean(o)).collect()).collect();
    let order = mean(&s2_sigma.iter().flatten().copied().collect::<Vec<_>>());
    let s2_s: Vec<f64> = m_is.iter().map(|r| sample_var(r)).collect();
    let choice_i: Vec<f64> = s2_s
        .iter()
        .zip(&s2_sigma)
        .map(|(v, sig)| v - mean(sig) / c as f64)
        .collect();
    let choice = mean(&choice_i);
    let m_i: Vec<f64> = m_is.iter().map(|r| mean(r)).collect();
    let instruction = if cells.len() > 1 {
        sample_var(&m_i) - mean(&s2_s) / b as f64
    } else {
        0.0
    };
    (order.max(0.0), choice.max(0.0), instruction.max(0.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSensitivity {
    pub task_id: String,
    pub method: Method,
    pub k: usize,
    pub mode: SenseMode,
    pub target_ids: Vec<usize>,
    pub mean_accuracy: f64,
    pub components: VarianceComponents,
    pub fixed: FixedInstructionComponents,
    pub n_instructions: usize,
    pub n_supports: usize,
    pub n_orderings: usize,
    pub n_evaluations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub schema_version: u32,
    pub units: String,
    pub config: SenseConfig,
    pub tasks: Vec<TaskSensitivity>,
}

/// Seeded split of a task's examples into the fixed target set and the pool.
pub fn split_targets(task: &TaskSpec, config: &SenseConfig) -> Result<(Vec<usize>, Vec<usize>)> {
    let n = task.examples.len();
    if config.n_targets == 0 || config.n_targets + config.k > n {
        return Err(Error::PoolTooSmall {
            task: task.task_id.clone(),
            pool: n,
            needed: config.n_targets.max(1) + config.k,
        });
    }
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut rng::stream(config.seed, &format!("sense-targets/{}", task.task_id), 0));
    let mut targets = ids[..config.n_targets].to_vec();
    let mut pool = ids[config.n_targets..].to_vec();
    targets.sort_unstable();
    pool.sort_unstable();
    Ok((targets, pool))
}

fn join_ids(ids: &[usize]) -> String {
    ids.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

/// Accuracy of `run` on `targets` with the given instruction and ordered
/// support. The shared prompt prefix is encoded once.
pub fn episode_accuracy(
    run: &MethodRun,
    task: &TaskSpec,
    instruction_index: usize,
    support_ids: &[usize],
    targets: &[usize],
) -> Result<f64> {
    let layout = PromptLayout::default();
    let max_context = run.model.config.max_context;
    let adapted;
    let (model, in_context) = match run.method {
        Method::Ict | Method::Raw => (&run.model, true),
        Method::InsT => (&run.model, false),
        Method::Fomaml | Method::InsTFt => {
            let adapt = run
                .adapt
                .ok_or_else(|| Error::config(format!("{} run has no adapt config", run.method)))?;
            let support: Vec<_> = support_ids.iter().map(|&i| task.examples[i].clone()).collect();
            let params = finetune_on_support(&run.model, &task.instructions[instruction_index], &support, &adapt, &layout)?;
            adapted = run.model.with_params(params);
            (&adapted, false)
        }
    };
    let shown: &[usize] = if in_context { support_ids } else { &[] };
    let mut correct = 0usize;
    let mut cache = None;
    for &t in targets {
        let episode = Episode::assemble(task, instruction_index, shown, t)?;
        let prompt = layout.serialize(&episode, false, max_context)?;
        let suffix_len = episode.target.input.len() + 2;
        let split = prompt.len() - suffix_len;
        let cache = match &cache {
            Some(c) => c,
            None => cache.insert(model.encode_prefix(&prompt[..split])?),
        };
        let lp = model.next_token_log_probs_after(cache, &prompt[split..])?;
        let pred = prediction_from_log_probs(task, &lp, episode.target.answer)?;
        correct += usize::from(pred.predicted == episode.target.answer);
    }
    Ok(correct as f64 / targets.len() as f64)
}

/// Variance decomposition of `run`'s accuracy on one task.
pub fn variance_decomposition(run: &MethodRun, task: &TaskSpec, config: &SenseConfig) -> Result<(TaskSensitivity, Vec<MuSample>)> {
    let (targets, pool) = split_targets(task, config)?;
    let d = decompose(task.instructions.len(), pool.len(), config, |i, ord| {
        let support: Vec<usize> = ord.iter().map(|&p| pool[p]).collect();
        episode_accuracy(run, task, i, &support, &targets)
    })?;
    let samples = d
        .samples
        .iter()
        .map(|(stage, i, ord, mu)| {
            let ids: Vec<usize> = ord.iter().map(|&p| pool[p]).collect();
            let mut sorted = ids.clone();
            sorted.sort_unstable();
            MuSample {
                task_id: task.task_id.clone(),
                stage: stage.to_string(),
                instruction_index: *i,
                support_set: join_ids(&sorted),
                ordering: join_ids(&ids),
                mu: *mu,
            }
        })
        .collect();
    Ok((
        TaskSensitivity {
            task_id: task.task_id.clone(),
            method: run.method,
            k: config.k,
            mode: config.mode,
            target_ids: targets,
            mean_accuracy: d.mean_mu,
            components: d.components,
            fixed: d.fixed,
            n_instructions: d.n_instructions,
            n_supports: d.n_supports,
            n_orderings: d.n_orderings,
            n_evaluations: d.n_evaluations,
        },
        samples,
    ))
}

/// Runs the decomposition on every task and writes `sense_report.json` and
/// `mu_samples.csv` under `out` when given.
pub fn sensitivity_report(
    run: &MethodRun,
    tasks: &[&TaskSpec],
    config: &SenseConfig,
    out: Option<&Path>,
) -> Result<SensitivityReport> {
    let mut rows = Vec::new();
    let mut all_samples = Vec::new();
    for task in tasks {
        let (row, samples) = variance_decomposition(run, task, config)?;
        log::info!(
            "{} {}: instr {:.2} choice {:.2} order {:.2} ({VARIANCE_UNITS})",
            run.method,
            task.task_id,
            row.components.instruction,
            row.components.choice,
            row.components.order
        );
        rows.push(row);
        all_samples.extend(samples);
    }
    let report = SensitivityReport {
        schema_version: SENSE_SCHEMA_VERSION,
        units: VARIANCE_UNITS.into(),
        config: config.clone(),
        tasks: rows,
    };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("sense_report.json");
        std::fs::write(&p, serde_json::to_string_pretty(&report)? + "\n").map_err(|e| Error::io(&p, e))?;
        let mut w = csv::Writer::from_writer(Vec::new());
        for s in &all_samples {
            w.serialize(s)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::config(e.to_string()))?;
        let p = dir.join("mu_samples.csv");
        std::fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exhaustive_cfg(k: usize) -> SenseConfig {
        SenseConfig::exhaustive(k, 1)
    }

    #[test]
    fn counting_helpers() {
        assert_eq!(combinations(4, 2).len(), 6);
        assert_eq!(combinations(5, 0), vec![Vec::<usize>::new()]);
        assert_eq!(permutations(&[3, 5, 7]).len(), 6);
        assert_eq!(binomial(6, 3), 20);
        assert_eq!(factorial(5), 120);
    }

    #[test]
    fn constant_mu_has_no_variance() {
        let zero = |c: VarianceComponents| [c.total, c.instruction, c.choice, c.order].iter().all(|v| v.abs() < 1e-20);
        let d = decompose(3, 5, &exhaustive_cfg(2), |_, _| Ok(0.7)).unwrap();
        assert!(zero(d.components), "{:?}", d.components);
        let d = decompose(3, 9, &SenseConfig::monte_carlo(3, 2), |_, _| Ok(0.7)).unwrap();
        assert!(zero(d.components), "{:?}", d.components);
    }

    #[test]
    fn instruction_only_mu() {
        let d = decompose(3, 5, &exhaustive_cfg(2), |i, _| Ok(i as f64 * 0.25)).unwrap();
        assert_eq!(d.components.choice, 0.0);
        assert_eq!(d.components.order, 0.0);
        assert!(d.components.instruction > 0.0);
        let d = decompose(3, 9, &SenseConfig::monte_carlo(3, 2), |i, _| Ok(i as f64 * 0.25)).unwrap();
        assert_eq!(d.components.choice, 0.0);
        assert_eq!(d.components.order, 0.0);
    }

    #[test]
    fn spreadsheet_oracle_two_instructions_three_supports_two_orderings() {
        // pool of 3, K = 2: supports {0,1} {0,2} {1,2}, two orderings each
        let table: HashMap<(usize, Vec<usize>), f64> = [
            ((0, vec![0, 1]), 0.50),
            ((0, vec![1, 0]), 0.70),
            ((0, vec![0, 2]), 0.40),
            ((0, vec![2, 0]), 0.40),
            ((0, vec![1, 2]), 0.90),
            ((0, vec![2, 1]), 0.60),
            ((1, vec![0, 1]), 0.20),
            ((1, vec![1, 0]), 0.30),
            ((1, vec![0, 2]), 0.10),
            ((1, vec![2, 0]), 0.50),
            ((1, vec![1, 2]), 0.20),
            ((1, vec![2, 1]), 0.20),
        ]
        .into_iter()
        .collect();
        let d = decompose(2, 3, &exhaustive_cfg(2), |i, o| Ok(table[&(i, o.to_vec())])).unwrap();
        // By hand: cell means I0 = .60 .40 .75, I1 = .25 .30 .20; instruction
        // means 7/12 and 1/4; within-cell variances .01 0 .0225 / .0025 .04 0.
        let c = d.components;
        assert!((c.instruction - PP2 / 36.0).abs() < 1e-9);
        assert!((c.choice - PP2 / 90.0).abs() < 1e-9);
        assert!((c.order - PP2 / 80.0).abs() < 1e-9);
        assert!((c.total - PP2 * 37.0 / 720.0).abs() < 1e-9);
        assert!((c.instruction + c.choice + c.order - c.total).abs() < 1e-10);
        // I* = 0
        assert!((d.fixed.choice - PP2 * 37.0 / 1800.0).abs() < 1e-9);
        assert!((d.fixed.order - PP2 * 13.0 / 1200.0).abs() < 1e-9);
    }

    #[test]
    fn budget_exceeded_points_to_monte_carlo() {
        let mut cfg = exhaustive_cfg(3);
        cfg.budget = 100;
        let err = decompose(3, 6, &cfg, |_, _| Ok(0.0)).unwrap_err();
        assert!(matches!(err, Error::BudgetExceeded { needed: 360, budget: 100 }));
        assert!(err.to_string().contains("monte-carlo"));
    }

    #[test]
    fn monte_carlo_is_close_to_exhaustive_on_a_smooth_table() {
        // μ = f(I) + g(S) + h(σ) with independent random effects
        let f = |i: usize| [0.1, 0.3, 0.2][i];
        let g = |s: &[usize]| {
            let mut t = s.to_vec();
            t.sort_unstable();
            (t.iter().map(|&x| x * 7 + 3).sum::<usize>() % 11) as f64 / 40.0
        };
        let h = |s: &[usize]| if s[0] < s[1] { 0.05 } else { -0.05 };
        let mu = |i: usize, s: &[usize]| Ok(f(i) + g(s) + h(s));
        let ex = decompose(3, 8, &exhaustive_cfg(2), mu).unwrap().components;
        let mut cfg = SenseConfig::monte_carlo(2, 5);
        cfg.mc_instructions = 60;
        cfg.mc_supports = 60;
        cfg.mc_orderings = Some(8);
        let mc = decompose(3, 8, &cfg, mu).unwrap().components;
        assert!((mc.order - ex.order).abs() < 0.25 * ex.order, "{mc:?} vs {ex:?}");
        assert!((mc.choice - ex.choice).abs() < 0.35 * ex.choice, "{mc:?} vs {ex:?}");
    }

    #[test]
    fn single_shot_has_no_order_component() {
        let d = decompose(2, 6, &SenseConfig::monte_carlo(1, 3), |i, s| Ok((i + s[0]) as f64 / 10.0)).unwrap();
        assert_eq!(d.n_orderings, 1);
        assert_eq!(d.components.order, 0.0);
        assert!(d.components.choice > 0.0);
    }
}
