//! Synthetic task suites: relation lookup (one injective subject→object map
//! per task) and yes/no classification over symbol sequences, plus the
//! dataset filtering and cross-validation split machinery.

mod binary;
mod filter;
mod folds;
pub mod io;
mod relation;

use serde::{Deserialize, Serialize};

use crate::lm::TokenId;

pub use binary::{gen_binary_suite, BinarySuiteConfig, LatentRule, RuleKind};
pub use filter::{input_length_filter, majority_label_filter, DropRecord, FilterOutcome, FilterReport};
pub use folds::{make_folds, SuiteSplit};
pub use relation::{gen_relation_suite, RelationSuiteConfig};

/// Token id layout shared by a suite and the model trained on it.
///
/// `[⟨ins⟩ ⟨x⟩ ⟨y⟩ ⟨tgt⟩ | Yes No | words… | symbols…]`
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub n_words: u32,
    pub n_symbols: u32,
}

impl Vocab {
    pub const INS: TokenId = 0;
    pub const X: TokenId = 1;
    pub const Y: TokenId = 2;
    pub const TGT: TokenId = 3;
    pub const YES: TokenId = 4;
    pub const NO: TokenId = 5;
    const FIRST_WORD: TokenId = 6;

    pub fn size(&self) -> usize {
        (Self::FIRST_WORD + self.n_words + self.n_symbols) as usize
    }

    pub fn word(&self, i: u32) -> TokenId {
        debug_assert!(i < self.n_words);
        Self::FIRST_WORD + i
    }

    pub fn symbol(&self, i: u32) -> TokenId {
        debug_assert!(i < self.n_symbols);
        Self::FIRST_WORD + self.n_words + i
    }

    pub fn is_special(t: TokenId) -> bool {
        t < Self::YES
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    RelationLookup,
    BinaryClf,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub input: Vec<TokenId>,
    pub answer: TokenId,
}

/// One task: instruction paraphrases, labeled example pool and answer space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub family: Family,
    /// Similarity group; tasks sharing a group always land in the same fold.
    pub group: String,
    pub instructions: Vec<Vec<TokenId>>,
    pub examples: Vec<Example>,
    pub answer_space: Vec<TokenId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rule: Option<LatentRule>,
}

impl TaskSpec {
    /// Whether the task belongs to the label-permutation sub-family.
    pub fn is_label_permuted(&self) -> bool {
        self.rule.is_some_and(|r| r.permuted)
    }

    pub fn max_input_len(&self) -> usize {
        self.examples.iter().map(|e| e.input.len()).max().unwrap_or(0)
    }

    pub fn validate(&self, k_max: usize) -> crate::Result<()> {
        use crate::Error;
        if self.instructions.is_empty() || self.instructions.iter().any(Vec::is_empty) {
            return Err(Error::Empty("instruction list"));
        }
        if self.examples.len() < k_max + 1 {
            return Err(Error::PoolTooSmall {
                task: self.task_id.clone(),
                pool: self.examples.len(),
                needed: k_max + 1,
            });
        }
        if let Some(e) = self.examples.iter().find(|e| !self.answer_space.contains(&e.answer)) {
            return Err(Error::config(format!(
                "task {}: answer {} outside answer space",
                self.task_id, e.answer
            )));
        }
        Ok(())
    }

    /// Position of `answer` in the answer space.
    pub fn answer_index(&self, answer: TokenId) -> Option<usize> {
        self.answer_space.iter().position(|&a| a == answer)
    }
}

/// A generated suite with its vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct Suite {
    pub vocab: Vocab,
    pub tasks: Vec<TaskSpec>,
}

impl Suite {
    pub fn task(&self, id: &str) -> Option<&TaskSpec> {
        self.tasks.iter().find(|t| t.task_id == id)
    }

    /// Tasks for a list of ids, in the order given.
    pub fn select(&self, ids: &[String]) -> crate::Result<Vec<&TaskSpec>> {
        ids.iter()
            .map(|id| {
                self.task(id)
                    .ok_or_else(|| crate::Error::config(format!("unknown task `{id}`")))
            })
            .collect()
    }
}

/// Picks `n` distinct paraphrases by repeatedly drawing from `draw`.
pub(crate) fn distinct_paraphrases(
    n: usize,
    mut draw: impl FnMut() -> Vec<TokenId>,
) -> Vec<Vec<TokenId>> {
    let mut out: Vec<Vec<TokenId>> = Vec::with_capacity(n);
    let mut attempts = 0;
    while out.len() < n && attempts < 1000 * n {
        let p = draw();
        if !out.contains(&p) {
            out.push(p);
        }
        attempts += 1;
    }
    out
}
