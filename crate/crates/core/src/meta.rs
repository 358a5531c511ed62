//! The five adaptation methods: in-context tuning (ICT), first-order MAML,
//! instruction tuning, instruction tuning + fine-tuning, and raw prompting.
//!
//! | method   | meta-training objective          | adaptation to a new task |
//! |----------|----------------------------------|--------------------------|
//! | ICT      | in-context few-shot prediction   | prompt assembly only     |
//! | FOMAML   | post-adaptation query loss       | gradient steps           |
//! | INS_T    | instruction + input → output     | none                     |
//! | INS_T_FT | instruction + input → output     | gradient steps           |
//! | RAW      | none                             | prompt assembly only     |

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{checkpoint, sgd_step, GradStore, Optimizer, OptimizerKind, ParamStore};
use crate::episodes::{sample_episode_for_target, Episode, PromptLayout};
use crate::error::{Error, Result};
use crate::lm::{LanguageModel, LmConfig, TokenId};
use crate::rng::{self, StreamRng};
use crate::tasks::{Example, TaskSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "ICT", alias = "ict")]
    Ict,
    #[serde(rename = "FOMAML", alias = "fomaml")]
    Fomaml,
    #[serde(rename = "INS_T", alias = "inst")]
    InsT,
    #[serde(rename = "INS_T_FT", alias = "inst-ft")]
    InsTFt,
    #[serde(rename = "RAW", alias = "raw")]
    Raw,
}

impl Method {
    /// Whether test-time adaptation takes gradient steps on the support set.
    pub fn adapts_by_gradient(self) -> bool {
        matches!(self, Method::Fomaml | Method::InsTFt)
    }

    /// Whether the support set is placed in the prompt.
    pub fn uses_in_context_examples(self) -> bool {
        matches!(self, Method::Ict | Method::Raw)
    }

    pub fn cli_name(self) -> &'static str {
        match self {
            Method::Ict => "ict",
            Method::Fomaml => "fomaml",
            Method::InsT => "inst",
            Method::InsTFt => "inst-ft",
            Method::Raw => "raw",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = match self {
            Method::Ict => "ICT",
            Method::Fomaml => "FOMAML",
            Method::InsT => "INS_T",
            Method::InsTFt => "INS_T_FT",
            Method::Raw => "RAW",
        };
        f.write_str(tag)
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "ict" => Ok(Method::Ict),
            "fomaml" => Ok(Method::Fomaml),
            "inst" | "ins-t" => Ok(Method::InsT),
            "inst-ft" | "ins-t-ft" => Ok(Method::InsTFt),
            "raw" => Ok(Method::Raw),
            other => Err(Error::config(format!("unknown method `{other}`"))),
        }
    }
}

/// Test-time (and FOMAML inner-loop) gradient adaptation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    pub inner_steps: usize,
    pub inner_lr: f64,
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.inner_lr > 0.0 && self.inner_lr.is_finite()) {
            return Err(Error::config(format!("inner_lr must be positive, got {}", self.inner_lr)));
        }
        Ok(())
    }
}

fn default_batch_size() -> usize {
    1
}

fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Adam
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean training loss per epoch (outer query loss for FOMAML).
    pub epoch_loss: Vec<f64>,
}

/// A trained (or wrapped) model together with the method that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct MethodRun {
    pub method: Method,
    pub model: LanguageModel,
    pub log: TrainLog,
    pub adapt: Option<AdaptConfig>,
    pub config: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct RunMeta {
    method: Method,
    lm_config: LmConfig,
    adapt: Option<AdaptConfig>,
    config: serde_json::Value,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const TRAIN_LOG_FILE: &str = "train_log.json";

impl MethodRun {
    /// Instruction-tuned parameters reused for fine-tuning at test time.
    pub fn into_finetuning(self, adapt: AdaptConfig) -> Result<Self> {
        if self.method != Method::InsT {
            return Err(Error::config(format!(
                "INS_T_FT starts from an INS_T run, got {}",
                self.method
            )));
        }
        adapt.validate()?;
        Ok(Self {
            method: Method::InsTFt,
            adapt: Some(adapt),
            ..self
        })
    }

    /// Adapted copy θ′ of the stored parameters; the run itself is untouched.
    pub fn finetune_on_support(&self, episode: &Episode, layout: &PromptLayout) -> Result<ParamStore> {
        if !self.method.adapts_by_gradient() {
            return Err(Error::config(format!("{} does not adapt by gradient", self.method)));
        }
        let adapt = self
            .adapt
            .ok_or_else(|| Error::config(format!("{} run has no adapt config", self.method)))?;
        finetune_on_support(&self.model, &episode.instruction, &episode.support, &adapt, layout)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = RunMeta {
            method: self.method,
            lm_config: self.model.config.clone(),
            adapt: self.adapt,
            config: self.config.clone(),
        };
        checkpoint::save(&dir.join(CHECKPOINT_FILE), &self.model.params, serde_json::to_value(meta)?)?;
        let path = dir.join(TRAIN_LOG_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(&self.log)? + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (params, manifest) = checkpoint::load(&dir.join(CHECKPOINT_FILE))?;
        let meta: RunMeta = serde_json::from_value(manifest.meta)?;
        let path = dir.join(TRAIN_LOG_FILE);
        let log_text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            method: meta.method,
            model: LanguageModel::from_params(meta.lm_config, params)?,
            log: serde_json::from_str(&log_text)?,
            adapt: meta.adapt,
            config: meta.config,
        })
    }
}

/// A serialized prompt and the single-token answer to predict after it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptItem {
    pub prompt: Vec<TokenId>,
    pub answer: TokenId,
}

impl PromptItem {
    pub fn from_episode(episode: &Episode, layout: &PromptLayout, max_context: usize) -> Result<Self> {
        Ok(Self {
            prompt: layout.serialize(episode, false, max_context)?,
            answer: episode.target.answer,
        })
    }

    /// Instruction ⧺ input layout used for instruction tuning and fine-tuning.
    pub fn zero_shot(instruction: &[TokenId], example: &Example, layout: &PromptLayout, max_context: usize) -> Result<Self> {
        let episode = Episode {
            task_id: String::new(),
            instruction_index: 0,
            instruction: instruction.to_vec(),
            support_ids: Vec::new(),
            support: Vec::new(),
            target_id: 0,
            target: example.clone(),
        };
        Self::from_episode(&episode, layout, max_context)
    }
}

/// Mean loss over `items` and its gradient.
pub fn batch_loss_and_grad(
    model: &LanguageModel,
    items: &[PromptItem],
    mut dropout: Option<&mut StreamRng>,
) -> Result<(f64, GradStore)> {
    if items.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let scale = 1.0 / items.len() as f64;
    let mut total = 0.0;
    let mut grads = model.params.zeros_like();
    for item in items {
        let (loss, g) = model.loss_and_grad(&item.prompt, &[item.answer], dropout.as_deref_mut())?;
        total += loss;
        grads.add_scaled(&g, scale);
    }
    Ok((total * scale, grads))
}

/// Runs optimizer steps over a stream of batches, one step per batch.
/// Returns the mean batch loss of each epoch.
pub fn train_on_stream(
    model: &mut LanguageModel,
    epochs: &[Vec<Vec<PromptItem>>],
    config: &TrainConfig,
) -> Result<Vec<f64>> {
    let mut opt = Optimizer::new(config.optimizer);
    let mut losses = Vec::with_capacity(epochs.len());
    for (epoch, batches) in epochs.iter().enumerate() {
        let mut dropout = rng::stream(config.seed, "dropout", epoch as u64);
        let mut sum = 0.0;
        for (step, batch) in batches.iter().enumerate() {
            let (loss, grads) = batch_loss_and_grad(model, batch, Some(&mut dropout))?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    last_good: Box::new(model.params.clone()),
                });
            }
            opt.step(&mut model.params, &grads, config.lr)?;
            sum += loss;
        }
        losses.push(if batches.is_empty() { 0.0 } else { sum / batches.len() as f64 });
    }
    Ok(losses)
}

fn check_pool(tasks: &[&TaskSpec], needed: usize) -> Result<()> {
    if tasks.is_empty() {
        return Err(Error::Empty("training task list"));
    }
    for t in tasks {
        if t.examples.len() < needed {
            return Err(Error::PoolTooSmall {
                task: t.task_id.clone(),
                pool: t.examples.len(),
                needed,
            });
        }
    }
    Ok(())
}

/// The in-context tuning stream for one epoch: every (task, target) pair once
/// in shuffled order, each with a freshly sampled instruction, support set and
/// ordering, chunked into batches.
pub fn ict_epoch_batches(
    tasks: &[&TaskSpec],
    k: usize,
    epoch: usize,
    config: &TrainConfig,
    layout: &PromptLayout,
    max_context: usize,
) -> Result<Vec<Vec<PromptItem>>> {
    let mut r = rng::stream(config.seed, "ict-epoch", epoch as u64);
    let mut pairs: Vec<(usize, usize)> = tasks
        .iter()
        .enumerate()
        .flat_map(|(ti, t)| (0..t.examples.len()).map(move |e| (ti, e)))
        .collect();
    pairs.shuffle(&mut r);
    let items = pairs
        .into_iter()
        .map(|(ti, target)| {
            let ep = sample_episode_for_target(tasks[ti], k, target, &mut r)?;
            PromptItem::from_episode(&ep, layout, max_context)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(items.chunks(config.batch_size).map(<[PromptItem]>::to_vec).collect())
}

fn train_in_context(
    method: Method,
    base: &LanguageModel,
    tasks: &[&TaskSpec],
    k: usize,
    config: &TrainConfig,
) -> Result<MethodRun> {
    config.validate()?;
    check_pool(tasks, k + 1)?;
    let layout = PromptLayout::default();
    let mut model = base.clone();
    let mut opt = Optimizer::new(config.optimizer);
    let mut log = TrainLog::default();
    for epoch in 0..config.epochs {
        let batches = ict_epoch_batches(tasks, k, epoch, config, &layout, model.config.max_context)?;
        let mut dropout = rng::stream(config.seed, "dropout", epoch as u64);
        let mut sum = 0.0;
        for (step, batch) in batches.iter().enumerate() {
            let (loss, grads) = batch_loss_and_grad(&model, batch, Some(&mut dropout))?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    last_good: Box::new(model.params.clone()),
                });
            }
            opt.step(&mut model.params, &grads, config.lr)?;
            sum += loss;
        }
        let mean = sum / batches.len().max(1) as f64;
        log::info!("{method} epoch {epoch}: mean loss {mean:.5}");
        log.epoch_loss.push(mean);
    }
    Ok(MethodRun {
        method,
        model,
        log,
        adapt: None,
        config: serde_json::json!({ "k": k, "train": config }),
    })
}

/// In-context tuning: minimize `-log p(y_tgt | I, S, x_tgt)` over training tasks
/// with `k` in-context examples.
pub fn train_ict(base: &LanguageModel, tasks: &[&TaskSpec], k: usize, config: &TrainConfig) -> Result<MethodRun> {
    train_in_context(Method::Ict, base, tasks, k, config)
}

/// Instruction tuning: in-context tuning with no support examples.
pub fn train_instruction_tuning(base: &LanguageModel, tasks: &[&TaskSpec], config: &TrainConfig) -> Result<MethodRun> {
    train_in_context(Method::InsT, base, tasks, 0, config)
}

/// Few full-batch SGD steps on the support set in instruction ⧺ input layout.
/// Returns θ′; `model` is not modified. Dropout is off.
pub fn finetune_on_support(
    model: &LanguageModel,
    instruction: &[TokenId],
    support: &[Example],
    adapt: &AdaptConfig,
    layout: &PromptLayout,
) -> Result<ParamStore> {
    if support.is_empty() {
        return Err(Error::Empty("support set"));
    }
    adapt.validate()?;
    let items = support
        .iter()
        .map(|ex| PromptItem::zero_shot(instruction, ex, layout, model.config.max_context))
        .collect::<Result<Vec<_>>>()?;
    let mut adapted = model.clone();
    for _ in 0..adapt.inner_steps {
        let (_, grads) = batch_loss_and_grad(&adapted, &items, None)?;
        sgd_step(&mut adapted.params, &grads, adapt.inner_lr)?;
    }
    Ok(adapted.params)
}

/// One FOMAML outer step: a task with a support set and a disjoint query set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MetaBatch {
    pub task_index: usize,
    pub instruction_index: usize,
    pub support_ids: Vec<usize>,
    pub query_ids: Vec<usize>,
}

/// Query-set size per meta-batch for support size `k`.
pub fn fomaml_query_size(k: usize) -> usize {
    (2 * k).max(1)
}

/// FOMAML meta-batches of one epoch: tasks in shuffled order, one per step.
pub fn fomaml_epoch_batches(tasks: &[&TaskSpec], k: usize, epoch: usize, seed: u64) -> Vec<MetaBatch> {
    let mut r = rng::stream(seed, "fomaml-epoch", epoch as u64);
    let mut order: Vec<usize> = (0..tasks.len()).collect();
    order.shuffle(&mut r);
    let q = fomaml_query_size(k);
    order
        .into_iter()
        .map(|ti| {
            let task = tasks[ti];
            let instruction_index = r.gen_range(0..task.instructions.len());
            let drawn = index::sample(&mut r, task.examples.len(), k + q).into_vec();
            MetaBatch {
                task_index: ti,
                instruction_index,
                support_ids: drawn[..k].to_vec(),
                query_ids: drawn[k..].to_vec(),
            }
        })
        .collect()
}

/// Query items of a meta-batch in instruction ⧺ input layout.
pub fn query_items(task: &TaskSpec, batch: &MetaBatch, layout: &PromptLayout, max_context: usize) -> Result<Vec<PromptItem>> {
    let instruction = &task.instructions[batch.instruction_index];
    batch
        .query_ids
        .iter()
        .map(|&i| PromptItem::zero_shot(instruction, &task.examples[i], layout, max_context))
        .collect()
}

/// First-order MAML. The outer gradient of the query loss is taken at the
/// adapted parameters θ_T and applied directly to θ. Inner and outer loops
/// share `config.lr`.
pub fn train_fomaml(
    base: &LanguageModel,
    tasks: &[&TaskSpec],
    k: usize,
    inner_steps: usize,
    config: &TrainConfig,
) -> Result<MethodRun> {
    config.validate()?;
    check_pool(tasks, k + fomaml_query_size(k))?;
    let adapt = AdaptConfig {
        inner_steps,
        inner_lr: config.lr,
    };
    let layout = PromptLayout::default();
    let max_context = base.config.max_context;
    let mut model = base.clone();
    let mut opt = Optimizer::new(config.optimizer);
    let mut log = TrainLog::default();
    for epoch in 0..config.epochs {
        let mut dropout = rng::stream(config.seed, "dropout", epoch as u64);
        let batches = fomaml_epoch_batches(tasks, k, epoch, config.seed);
        let mut sum = 0.0;
        for (step, mb) in batches.iter().enumerate() {
            let task = tasks[mb.task_index];
            let queries = query_items(task, mb, &layout, max_context)?;
            let (loss, grads) = if inner_steps == 0 || k == 0 {
                batch_loss_and_grad(&model, &queries, Some(&mut dropout))?
            } else {
                let support: Vec<Example> = mb.support_ids.iter().map(|&i| task.examples[i].clone()).collect();
                let adapted = finetune_on_support(
                    &model,
                    &task.instructions[mb.instruction_index],
                    &support,
                    &adapt,
                    &layout,
                )?;
                batch_loss_and_grad(&model.with_params(adapted), &queries, Some(&mut dropout))?
            };
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    last_good: Box::new(model.params.clone()),
                });
            }
            opt.step(&mut model.params, &grads, config.lr)?;
            sum += loss;
        }
        let mean = sum / batches.len().max(1) as f64;
        log::info!("FOMAML epoch {epoch}: mean query loss {mean:.5}");
        log.epoch_loss.push(mean);
    }
    Ok(MethodRun {
        method: Method::Fomaml,
        model,
        log,
        adapt: Some(adapt),
        config: serde_json::json!({ "k": k, "inner_steps": inner_steps, "train": config }),
    })
}

/// Raw prompting: the base model, untouched.
pub fn raw_lm_baseline(base: &LanguageModel) -> MethodRun {
    MethodRun {
        method: Method::Raw,
        model: base.clone(),
        log: TrainLog::default(),
        adapt: None,
        config: serde_json::json!({}),
    }
}
