//! Few-shot episodes and their serialization into model input.
//!
//! Layout: `⟨ins⟩ I (⟨x⟩ xᵢ ⟨y⟩ yᵢ)* ⟨tgt⟩ x ⟨y⟩ [y]`. The sequence without the
//! answer ends at the final `⟨y⟩`, which is where the target answer is scored.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::TokenId;
use crate::tasks::{Example, TaskSpec, Vocab};

/// Largest support size whose orderings are enumerated exhaustively (5! = 120).
pub const MAX_ENUMERABLE_K: usize = 5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub task_id: String,
    pub instruction_index: usize,
    pub instruction: Vec<TokenId>,
    /// Pool indices of the support examples, in prompt order.
    pub support_ids: Vec<usize>,
    pub support: Vec<Example>,
    pub target_id: usize,
    pub target: Example,
}

impl Episode {
    pub fn k(&self) -> usize {
        self.support.len()
    }

    /// Builds an episode from explicit choices. `support_ids` order is the
    /// prompt order.
    pub fn assemble(task: &TaskSpec, instruction_index: usize, support_ids: &[usize], target_id: usize) -> Result<Self> {
        let instruction = task
            .instructions
            .get(instruction_index)
            .ok_or_else(|| Error::config(format!("instruction {instruction_index} out of range")))?
            .clone();
        let fetch = |i: usize| {
            task.examples
                .get(i)
                .cloned()
                .ok_or_else(|| Error::config(format!("example {i} out of range")))
        };
        if support_ids.contains(&target_id) {
            return Err(Error::config("target example inside support set"));
        }
        Ok(Self {
            task_id: task.task_id.clone(),
            instruction_index,
            instruction,
            support: support_ids.iter().map(|&i| fetch(i)).collect::<Result<_>>()?,
            support_ids: support_ids.to_vec(),
            target_id,
            target: fetch(target_id)?,
        })
    }

    /// Sorted support ids, identifying the unordered support set.
    pub fn support_set_key(&self) -> Vec<usize> {
        let mut ids = self.support_ids.clone();
        ids.sort_unstable();
        ids
    }

    /// Same instruction and target with zero support examples.
    pub fn without_support(&self) -> Self {
        Self {
            support_ids: Vec::new(),
            support: Vec::new(),
            ..self.clone()
        }
    }
}

/// Separator tokens of the prompt grammar.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptLayout {
    pub ins: TokenId,
    pub x: TokenId,
    pub y: TokenId,
    pub tgt: TokenId,
}

impl Default for PromptLayout {
    fn default() -> Self {
        Self {
            ins: Vocab::INS,
            x: Vocab::X,
            y: Vocab::Y,
            tgt: Vocab::TGT,
        }
    }
}

impl PromptLayout {
    pub fn prompt_len(&self, episode: &Episode) -> usize {
        1 + episode.instruction.len()
            + episode.support.iter().map(|e| e.input.len() + 3).sum::<usize>()
            + 1
            + episode.target.input.len()
            + 1
    }

    /// Token sequence for `episode`; with `include_answer` the gold target
    /// answer is appended.
    pub fn serialize(&self, episode: &Episode, include_answer: bool, max_context: usize) -> Result<Vec<TokenId>> {
        let len = self.prompt_len(episode) + usize::from(include_answer);
        if len > max_context {
            return Err(Error::PromptOverflow {
                overflow: len - max_context,
            });
        }
        let mut out = Vec::with_capacity(len);
        out.push(self.ins);
        out.extend_from_slice(&episode.instruction);
        for ex in &episode.support {
            out.push(self.x);
            out.extend_from_slice(&ex.input);
            out.push(self.y);
            out.push(ex.answer);
        }
        out.push(self.tgt);
        out.extend_from_slice(&episode.target.input);
        out.push(self.y);
        if include_answer {
            out.push(episode.target.answer);
        }
        Ok(out)
    }
}

/// Episode for a fixed target: uniform instruction, uniform `k`-subset of the
/// remaining pool, uniformly permuted.
pub fn sample_episode_for_target<R: Rng>(task: &TaskSpec, k: usize, target_id: usize, rng: &mut R) -> Result<Episode> {
    let n = task.examples.len();
    if k + 1 > n {
        return Err(Error::PoolTooSmall {
            task: task.task_id.clone(),
            pool: n,
            needed: k + 1,
        });
    }
    if target_id >= n {
        return Err(Error::config(format!("target {target_id} out of range")));
    }
    if task.instructions.is_empty() {
        return Err(Error::Empty("instruction list"));
    }
    let instruction_index = rng.gen_range(0..task.instructions.len());
    let mut support: Vec<usize> = index::sample(rng, n - 1, k)
        .into_iter()
        .map(|i| if i >= target_id { i + 1 } else { i })
        .collect();
    support.sort_unstable();
    support.shuffle(rng);
    Episode::assemble(task, instruction_index, &support, target_id)
}

/// Episode with a uniformly drawn target.
pub fn sample_episode<R: Rng>(task: &TaskSpec, k: usize, rng: &mut R) -> Result<Episode> {
    if k + 1 > task.examples.len() {
        return Err(Error::PoolTooSmall {
            task: task.task_id.clone(),
            pool: task.examples.len(),
            needed: k + 1,
        });
    }
    let target = rng.gen_range(0..task.examples.len());
    sample_episode_for_target(task, k, target, rng)
}

/// Rearranges `v` into its next lexicographic permutation; false once the
/// last permutation has been reached.
pub(crate) fn next_permutation(v: &mut [usize]) -> bool {
    if v.len() < 2 {
        return false;
    }
    let mut i = v.len() - 1;
    while i > 0 && v[i - 1] >= v[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = v.len() - 1;
    while v[j] <= v[i - 1] {
        j -= 1;
    }
    v.swap(i - 1, j);
    v[i..].reverse();
    true
}

/// Every ordering of the episode's support, in lexicographic order of the
/// permutation applied to the current support positions.
pub fn enumerate_orderings(episode: &Episode) -> Result<Vec<Episode>> {
    let k = episode.k();
    if k > MAX_ENUMERABLE_K {
        return Err(Error::TooManyOrderings {
            k,
            needed: (1..=k as u128).product(),
        });
    }
    let mut perm: Vec<usize> = (0..k).collect();
    let mut out = Vec::new();
    loop {
        out.push(Episode {
            support_ids: perm.iter().map(|&p| episode.support_ids[p]).collect(),
            support: perm.iter().map(|&p| episode.support[p].clone()).collect(),
            ..episode.clone()
        });
        if !next_permutation(&mut perm) {
            break;
        }
    }
    Ok(out)
}

/// Debug export, one episode per line.
pub fn episodes_jsonl(episodes: &[Episode]) -> Result<String> {
    let mut out = String::new();
    for e in episodes {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    Ok(out)
}
