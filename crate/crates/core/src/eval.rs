//! Evaluation harness: P@1 and AUC-ROC over test tasks for any method.
//!
//! Every method sees the same targets in the same order. For each task the
//! harness enumerates instruction × target × sampling; each sampling draws a
//! fresh support set and ordering from the pool minus the target.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::episodes::{Episode, PromptLayout};
use crate::error::{Error, Result};
use crate::lm::{argmax_first, LanguageModel, TokenId};
use crate::meta::{finetune_on_support, AdaptConfig, Method, MethodRun};
use crate::rng::{self, StreamRng};
use crate::tasks::{TaskSpec, Vocab};

pub const EVAL_SCHEMA_VERSION: u32 = 1;

fn default_m() -> usize {
    5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub k: usize,
    /// Support/ordering samplings per (instruction, target).
    #[serde(default = "default_m")]
    pub m_samplings: usize,
    pub seed: u64,
}

/// One prediction. `score` is `log p(Yes) − log p(No)` on binary tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub method: Method,
    pub k: usize,
    pub task_id: String,
    pub instruction_index: usize,
    pub sampling: usize,
    /// Sorted support ids, space separated.
    pub support_set: String,
    /// Support ids in presentation order.
    pub ordering: String,
    pub target_id: usize,
    pub gold: TokenId,
    pub predicted: TokenId,
    pub correct: bool,
    pub gold_log_prob: f64,
    pub score: Option<f64>,
}

fn join_ids(ids: &[usize]) -> String {
    ids.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

/// Support ids for a fixed target: uniform `k`-subset of the rest, permuted.
fn draw_support(rng: &mut StreamRng, n: usize, k: usize, target: usize) -> Vec<usize> {
    let mut s: Vec<usize> = index::sample(rng, n - 1, k)
        .into_iter()
        .map(|i| if i >= target { i + 1 } else { i })
        .collect();
    s.sort_unstable();
    s.shuffle(rng);
    s
}

/// Log-probabilities of the task's answer space, picked from a next-token distribution.
fn answer_scores(task: &TaskSpec, lp: &[f64]) -> Result<Vec<f64>> {
    task.answer_space
        .iter()
        .map(|&a| {
            lp.get(a as usize).copied().ok_or(Error::TokenOutOfRange {
                id: a,
                vocab: lp.len(),
            })
        })
        .collect()
}

#[derive(Clone, Copy)]
pub(crate) struct Prediction {
    pub predicted: TokenId,
    pub gold_log_prob: f64,
    pub score: Option<f64>,
}

pub(crate) fn predict(model: &LanguageModel, task: &TaskSpec, prompt: &[TokenId], gold: TokenId) -> Result<Prediction> {
    prediction_from_log_probs(task, &model.next_token_log_probs_fast(prompt)?, gold)
}

/// Argmax over the answer space (lowest index on ties) and the binary margin.
pub(crate) fn prediction_from_log_probs(task: &TaskSpec, lp: &[f64], gold: TokenId) -> Result<Prediction> {
    let scores = answer_scores(task, lp)?;
    let predicted = task.answer_space[argmax_first(&scores)];
    let gold_idx = task
        .answer_index(gold)
        .ok_or_else(|| Error::config(format!("gold answer {gold} outside answer space of {}", task.task_id)))?;
    let score = match (task.answer_index(Vocab::YES), task.answer_index(Vocab::NO)) {
        (Some(y), Some(n)) if task.answer_space.len() == 2 => Some(scores[y] - scores[n]),
        _ => None,
    };
    Ok(Prediction {
        predicted,
        gold_log_prob: scores[gold_idx],
        score,
    })
}

/// Adaptation actually used for `run`, checking tag/adapt consistency.
fn resolve_adapt(run: &MethodRun, adapt: Option<AdaptConfig>) -> Result<Option<AdaptConfig>> {
    if run.method.adapts_by_gradient() {
        let a = adapt
            .or(run.adapt)
            .ok_or_else(|| Error::config(format!("{} evaluation needs an adapt config", run.method)))?;
        a.validate()?;
        Ok(Some(a))
    } else if adapt.is_some() {
        Err(Error::config(format!("{} does not take an adapt config", run.method)))
    } else {
        Ok(None)
    }
}

/// Evaluates `run` on `tasks`. ICT and RAW put the support in the prompt;
/// FOMAML and INS_T_FT fine-tune a copy on it and predict zero-shot; INS_T
/// never sees support examples.
pub fn evaluate_method(
    run: &MethodRun,
    tasks: &[&TaskSpec],
    config: &EvalConfig,
    adapt: Option<AdaptConfig>,
) -> Result<Vec<EvalRecord>> {
    let adapt = resolve_adapt(run, adapt)?;
    if config.m_samplings == 0 {
        return Err(Error::config("m_samplings must be positive"));
    }
    let k = if run.method == Method::InsT { 0 } else { config.k };
    if run.method.adapts_by_gradient() && k == 0 {
        return Err(Error::config(format!("{} needs k >= 1", run.method)));
    }
    let layout = PromptLayout::default();
    let max_context = run.model.config.max_context;
    let mut records = Vec::new();
    for task in tasks {
        let n = task.examples.len();
        if n < k + 1 {
            return Err(Error::PoolTooSmall {
                task: task.task_id.clone(),
                pool: n,
                needed: k + 1,
            });
        }
        let mut r = rng::stream(config.seed, &format!("eval/{}", task.task_id), k as u64);
        for instruction_index in 0..task.instructions.len() {
            for target_id in 0..n {
                let mut zero_shot: Option<Prediction> = None;
                for sampling in 0..config.m_samplings {
                    let support_ids = if k == 0 { Vec::new() } else { draw_support(&mut r, n, k, target_id) };
                    let episode = Episode::assemble(task, instruction_index, &support_ids, target_id)?;
                    let gold = episode.target.answer;
                    let pred = match (run.method, adapt) {
                        (Method::Ict | Method::Raw, _) => {
                            let prompt = layout.serialize(&episode, false, max_context)?;
                            predict(&run.model, task, &prompt, gold)?
                        }
                        (Method::InsT, _) => match &zero_shot {
                            Some(p) => *p,
                            None => {
                                let prompt = layout.serialize(&episode, false, max_context)?;
                                let p = predict(&run.model, task, &prompt, gold)?;
                                zero_shot = Some(p);
                                p
                            }
                        },
                        (_, Some(a)) => {
                            let adapted: ParamStore =
                                finetune_on_support(&run.model, &episode.instruction, &episode.support, &a, &layout)?;
                            let model = run.model.with_params(adapted);
                            let prompt = layout.serialize(&episode.without_support(), false, max_context)?;
                            predict(&model, task, &prompt, gold)?
                        }
                        (_, None) => unreachable!("adapt resolved above"),
                    };
                    let mut sorted = support_ids.clone();
                    sorted.sort_unstable();
                    records.push(EvalRecord {
                        method: run.method,
                        k,
                        task_id: task.task_id.clone(),
                        instruction_index,
                        sampling,
                        support_set: join_ids(&sorted),
                        ordering: join_ids(&support_ids),
                        target_id,
                        gold,
                        predicted: pred.predicted,
                        correct: pred.predicted == gold,
                        gold_log_prob: pred.gold_log_prob,
                        score: pred.score,
                    });
                }
            }
        }
    }
    Ok(records)
}

/// `P(score⁺ > score⁻) + ½ P(tie)` over all positive–negative pairs.
pub fn auc_roc(scored: &[(f64, bool)]) -> Result<f64> {
    let n_pos = scored.iter().filter(|(_, l)| *l).count();
    let n_neg = scored.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("AUC-ROC needs both classes"));
    }
    if scored.iter().any(|(s, _)| s.is_nan()) {
        return Err(Error::UndefinedMetric("AUC-ROC score is NaN"));
    }
    // rank-sum with midranks for ties
    let mut sorted: Vec<(f64, bool)> = scored.to_vec();
    sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("no NaN"));
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1].0 == sorted[i].0 {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let mid = (i + j + 2) as f64 / 2.0;
        let pos_in_block = sorted[i..=j].iter().filter(|(_, l)| *l).count();
        pos_rank_sum += mid * pos_in_block as f64;
        i = j + 1;
    }
    let np = n_pos as f64;
    Ok((pos_rank_sum - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task_id: String,
    pub n_records: usize,
    pub p_at_1: f64,
    /// Mean over instructions of the per-instruction AUC (binary tasks only).
    pub auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub schema_version: u32,
    pub method: Method,
    pub k: usize,
    pub tasks: Vec<TaskMetrics>,
    pub macro_p_at_1: f64,
    pub macro_auc: Option<f64>,
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// Per-task P@1 (averaged over samplings, then targets) and AUC, then macro
/// averages over tasks in first-seen order.
pub fn summarize(records: &[EvalRecord]) -> Result<EvalSummary> {
    let first = records.first().ok_or(Error::Empty("evaluation records"))?;
    let mut order: Vec<&str> = Vec::new();
    let mut by_task: BTreeMap<&str, Vec<&EvalRecord>> = BTreeMap::new();
    for r in records {
        if !by_task.contains_key(r.task_id.as_str()) {
            order.push(&r.task_id);
        }
        by_task.entry(&r.task_id).or_default().push(r);
    }
    let mut tasks = Vec::with_capacity(order.len());
    for id in order {
        let rs = &by_task[id];
        let mut per_target: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for r in rs {
            per_target.entry(r.target_id).or_default().push(if r.correct { 1.0 } else { 0.0 });
        }
        let p_at_1 = mean(per_target.values().map(|v| mean(v.iter().copied())));
        let auc = if rs.iter().all(|r| r.score.is_some()) {
            let mut per_instr: BTreeMap<usize, Vec<(f64, bool)>> = BTreeMap::new();
            for r in rs {
                per_instr
                    .entry(r.instruction_index)
                    .or_default()
                    .push((r.score.expect("checked"), r.gold == Vocab::YES));
            }
            let aucs = per_instr.values().map(|v| auc_roc(v)).collect::<Result<Vec<_>>>()?;
            Some(mean(aucs))
        } else {
            None
        };
        tasks.push(TaskMetrics {
            task_id: id.to_string(),
            n_records: rs.len(),
            p_at_1,
            auc,
        });
    }
    let macro_p_at_1 = mean(tasks.iter().map(|t| t.p_at_1));
    let macro_auc = tasks.iter().map(|t| t.auc).collect::<Option<Vec<_>>>().map(mean);
    Ok(EvalSummary {
        schema_version: EVAL_SCHEMA_VERSION,
        method: first.method,
        k: first.k,
        tasks,
        macro_p_at_1,
        macro_auc,
    })
}

/// Per-task and macro P@1 of `run` on `tasks`.
pub fn precision_at_1(run: &MethodRun, tasks: &[&TaskSpec], config: &EvalConfig) -> Result<EvalSummary> {
    summarize(&evaluate_method(run, tasks, config, None)?)
}

pub fn records_csv(records: &[EvalRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::config(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn read_records_csv(path: &Path) -> Result<Vec<EvalRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::backward_calls;
    use crate::lm::LmConfig;
    use crate::meta::{raw_lm_baseline, train_instruction_tuning, TrainConfig};
    use crate::tasks::{gen_binary_suite, gen_relation_suite, BinarySuiteConfig, RelationSuiteConfig, RuleKind, Suite};
    use rand::{Rng, SeedableRng};

    fn pair_oracle(scored: &[(f64, bool)]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for &(sp, lp) in scored {
            for &(sn, ln) in scored {
                if lp && !ln {
                    den += 1.0;
                    num += if sp > sn {
                        1.0
                    } else if sp == sn {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        num / den
    }

    #[test]
    fn auc_trivial_cases() {
        assert_eq!(auc_roc(&[(0.9, true), (0.8, true), (0.1, false)]).unwrap(), 1.0);
        assert_eq!(auc_roc(&[(1.0, true), (1.0, false), (1.0, false)]).unwrap(), 0.5);
        assert!(matches!(auc_roc(&[(0.0, false), (1.0, false)]), Err(Error::UndefinedMetric(_))));
        assert!(auc_roc(&[]).is_err());
    }

    #[test]
    fn auc_matches_pair_counting() {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let scored: Vec<(f64, bool)> = (0..20).map(|_| (r.gen_range(0..5) as f64, r.gen())).collect();
            let Ok(a) = auc_roc(&scored) else { continue };
            assert_eq!(a, pair_oracle(&scored));
        }
    }

    #[test]
    fn auc_invariant_under_monotone_maps() {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let scored: Vec<(f64, bool)> = (0..30).map(|i| (r.gen::<f64>() - 0.5, i % 3 == 0)).collect();
        let base = auc_roc(&scored).unwrap();
        let affine: Vec<_> = scored.iter().map(|&(s, l)| (2.0 * s + 1.0, l)).collect();
        let squashed: Vec<_> = scored.iter().map(|&(s, l)| (s.tanh(), l)).collect();
        assert_eq!(auc_roc(&affine).unwrap(), base);
        assert_eq!(auc_roc(&squashed).unwrap(), base);
    }

    fn binary() -> Suite {
        gen_binary_suite(
            2,
            &BinarySuiteConfig {
                n_tasks: 4,
                n_examples: 10,
                input_len: 2,
                n_markers: 3,
                n_fillers: 6,
                rule_kinds: vec![RuleKind::Presence],
                permuted_fraction: 1.0,
                max_task_input_len: 8,
            },
        )
        .unwrap()
    }

    fn model(vocab: usize, seed: u64) -> LanguageModel {
        LanguageModel::init(
            LmConfig {
                vocab_size: vocab,
                d_model: 8,
                n_heads: 2,
                n_layers: 1,
                d_ff: 16,
                max_context: 48,
                dropout: 0.0,
                init_std: 0.3,
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn p_at_1_recounts_from_records() {
        let s = binary();
        let run = raw_lm_baseline(&model(s.vocab.size(), 1));
        let tasks: Vec<&TaskSpec> = s.tasks.iter().collect();
        let cfg = EvalConfig {
            k: 2,
            m_samplings: 3,
            seed: 5,
        };
        let records = evaluate_method(&run, &tasks[..1], &cfg, None).unwrap();
        let n_instr = tasks[0].instructions.len();
        assert_eq!(records.len(), n_instr * 10 * 3);
        let hand = records.iter().filter(|r| r.correct).count() as f64 / records.len() as f64;
        let summary = summarize(&records).unwrap();
        assert!((summary.macro_p_at_1 - hand).abs() < 1e-12);
        assert!(summary.macro_auc.is_some());
    }

    #[test]
    fn uniform_model_hits_chance_and_ties_to_first_candidate() {
        let s = gen_relation_suite(
            1,
            &RelationSuiteConfig {
                n_tasks: 2,
                n_examples: 12,
                entity_vocab_size: 20,
                max_task_input_len: 8,
            },
        )
        .unwrap();
        let mut base = model(s.vocab.size(), 2);
        base.zero_output_head();
        let run = raw_lm_baseline(&base);
        let tasks: Vec<&TaskSpec> = s.tasks.iter().collect();
        let records = evaluate_method(&run, &tasks, &EvalConfig { k: 1, m_samplings: 1, seed: 0 }, None).unwrap();
        for r in &records {
            let t = s.task(&r.task_id).unwrap();
            assert_eq!(r.predicted, t.answer_space[0]);
            assert!((r.gold_log_prob + (s.vocab.size() as f64).ln()).abs() < 1e-12);
        }
        assert!(summarize(&records).unwrap().macro_auc.is_none());
    }

    #[test]
    fn in_context_eval_computes_no_gradients_and_shares_episodes() {
        let s = binary();
        let base = model(s.vocab.size(), 3);
        let tasks: Vec<&TaskSpec> = s.tasks.iter().collect();
        let ict = train_instruction_tuning(
            &base,
            &tasks,
            &TrainConfig {
                epochs: 1,
                lr: 0.01,
                batch_size: 1,
                optimizer: crate::autodiff::OptimizerKind::Adam,
                seed: 1,
            },
        )
        .unwrap();
        let ict = MethodRun { method: Method::Ict, ..ict };
        let raw = raw_lm_baseline(&base);
        let cfg = EvalConfig { k: 3, m_samplings: 2, seed: 9 };
        let before = backward_calls();
        let a = evaluate_method(&ict, &tasks, &cfg, None).unwrap();
        let b = evaluate_method(&raw, &tasks, &cfg, None).unwrap();
        assert_eq!(backward_calls(), before);
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!((&x.task_id, x.instruction_index, &x.ordering, x.target_id), (&y.task_id, y.instruction_index, &y.ordering, y.target_id));
        }
        // rerun is bitwise identical
        assert_eq!(evaluate_method(&raw, &tasks, &cfg, None).unwrap(), b);
    }

    #[test]
    fn inst_t_sees_no_support_and_fomaml_zero_steps_matches_it() {
        let s = binary();
        let base = model(s.vocab.size(), 4);
        let tasks: Vec<&TaskSpec> = s.tasks.iter().collect();
        let ins = MethodRun {
            method: Method::InsT,
            ..raw_lm_baseline(&base)
        };
        let fo = MethodRun {
            method: Method::Fomaml,
            adapt: Some(AdaptConfig { inner_steps: 0, inner_lr: 0.1 }),
            ..raw_lm_baseline(&base)
        };
        let cfg = EvalConfig { k: 2, m_samplings: 2, seed: 1 };
        let a = evaluate_method(&ins, &tasks, &cfg, None).unwrap();
        let b = evaluate_method(&fo, &tasks, &cfg, None).unwrap();
        assert!(a.iter().all(|r| r.support_set.is_empty() && r.k == 0));
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(
                (&x.task_id, x.instruction_index, x.target_id, x.predicted, x.gold_log_prob, x.score),
                (&y.task_id, y.instruction_index, y.target_id, y.predicted, y.gold_log_prob, y.score)
            );
        }
    }

    #[test]
    fn adapt_mismatch_is_config_error() {
        let s = binary();
        let base = model(s.vocab.size(), 4);
        let tasks: Vec<&TaskSpec> = s.tasks.iter().collect();
        let cfg = EvalConfig { k: 2, m_samplings: 1, seed: 1 };
        let a = AdaptConfig { inner_steps: 1, inner_lr: 0.1 };
        assert!(matches!(evaluate_method(&raw_lm_baseline(&base), &tasks, &cfg, Some(a)), Err(Error::Config(_))));
        let fo = MethodRun { method: Method::Fomaml, ..raw_lm_baseline(&base) };
        assert!(matches!(evaluate_method(&fo, &tasks, &cfg, None), Err(Error::Config(_))));
    }

    #[test]
    fn gradient_eval_leaves_run_untouched() {
        let s = binary();
        let base = model(s.vocab.size(), 6);
        let tasks: Vec<&TaskSpec> = s.tasks.iter().collect();
        let run = MethodRun {
            method: Method::InsTFt,
            adapt: Some(AdaptConfig { inner_steps: 2, inner_lr: 0.5 }),
            ..raw_lm_baseline(&base)
        };
        let snapshot = run.model.params.clone();
        let recs = evaluate_method(&run, &tasks[..1], &EvalConfig { k: 2, m_samplings: 1, seed: 1 }, None).unwrap();
        assert!(!recs.is_empty());
        assert!(run.model.params.bitwise_eq(&snapshot));
    }

    #[test]
    fn csv_round_trip() {
        let s = binary();
        let run = raw_lm_baseline(&model(s.vocab.size(), 1));
        let tasks: Vec<&TaskSpec> = s.tasks.iter().collect();
        let recs = evaluate_method(&run, &tasks[..1], &EvalConfig { k: 1, m_samplings: 1, seed: 2 }, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        std::fs::write(&p, records_csv(&recs).unwrap()).unwrap();
        assert_eq!(read_records_csv(&p).unwrap(), recs);
    }
}
