use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{distinct_paraphrases, Example, Family, Suite, TaskSpec, Vocab};
use crate::error::{Error, Result};
use crate::lm::TokenId;
use crate::rng::{self, StreamRng};

const QUESTION_WORDS: u32 = 3;
/// Two synonyms per rule kind, after the question words.
const RULE_WORDS_PER_KIND: u32 = 2;
const MAX_PARAPHRASES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RuleKind {
    /// Positive iff the marker symbol occurs in the input.
    Presence,
    /// Positive iff the marker symbol occurs an odd number of times.
    Parity,
}

impl RuleKind {
    fn word_offset(self) -> u32 {
        QUESTION_WORDS
            + RULE_WORDS_PER_KIND
                * match self {
                    RuleKind::Presence => 0,
                    RuleKind::Parity => 1,
                }
    }
}

/// Hidden rule behind a binary task. `flipped` swaps the Yes/No semantics,
/// and is never visible in the instruction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentRule {
    pub kind: RuleKind,
    pub marker: TokenId,
    pub flipped: bool,
    /// Member of the label-permutation sub-family (one of a twin pair).
    #[serde(default)]
    pub permuted: bool,
}

impl LatentRule {
    pub fn feature(&self, input: &[TokenId]) -> bool {
        let count = input.iter().filter(|&&t| t == self.marker).count();
        match self.kind {
            RuleKind::Presence => count > 0,
            RuleKind::Parity => count % 2 == 1,
        }
    }

    pub fn label(&self, input: &[TokenId]) -> TokenId {
        if self.feature(input) != self.flipped {
            Vocab::YES
        } else {
            Vocab::NO
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinarySuiteConfig {
    pub n_tasks: usize,
    pub n_examples: usize,
    #[serde(default = "default_input_len")]
    pub input_len: usize,
    #[serde(default = "default_markers")]
    pub n_markers: usize,
    #[serde(default = "default_fillers")]
    pub n_fillers: usize,
    #[serde(default = "default_kinds")]
    pub rule_kinds: Vec<RuleKind>,
    /// Fraction of tasks in the label-permutation sub-family. These come in
    /// twin pairs that share rule, instructions and inputs but have opposite
    /// Yes/No semantics, so the instruction alone is uninformative.
    #[serde(default = "default_permuted")]
    pub permuted_fraction: f64,
    #[serde(default = "default_max_input")]
    pub max_task_input_len: usize,
}

fn default_input_len() -> usize {
    3
}
fn default_markers() -> usize {
    8
}
fn default_fillers() -> usize {
    16
}
fn default_kinds() -> Vec<RuleKind> {
    vec![RuleKind::Presence, RuleKind::Parity]
}
fn default_permuted() -> f64 {
    0.5
}
fn default_max_input() -> usize {
    8
}

impl BinarySuiteConfig {
    pub fn vocab(&self) -> Vocab {
        Vocab {
            n_words: QUESTION_WORDS + 2 * RULE_WORDS_PER_KIND,
            n_symbols: (self.n_markers + self.n_fillers) as u32,
        }
    }

    /// Number of tasks in the label-permutation sub-family (always even).
    pub fn n_permuted(&self) -> usize {
        let n = (self.permuted_fraction * self.n_tasks as f64).round() as usize;
        n.min(self.n_tasks) / 2 * 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_tasks == 0 {
            return Err(Error::config("binary suite needs n_tasks > 0"));
        }
        if self.n_examples == 0 || self.n_examples % 2 != 0 {
            return Err(Error::config(format!(
                "binary n_examples must be even and positive, got {}",
                self.n_examples
            )));
        }
        if self.input_len == 0 || self.input_len > self.max_task_input_len {
            return Err(Error::config(format!(
                "input_len {} must be in 1..={}",
                self.input_len, self.max_task_input_len
            )));
        }
        if self.n_markers == 0 || self.n_fillers < 2 {
            return Err(Error::config("need >= 1 marker and >= 2 filler symbols"));
        }
        if self.rule_kinds.is_empty() {
            return Err(Error::config("rule_kinds must be nonempty"));
        }
        if !(0.0..=1.0).contains(&self.permuted_fraction) {
            return Err(Error::config("permuted_fraction must be in [0, 1]"));
        }
        // distinct inputs per class must exist
        let per_class = self.n_examples / 2;
        let negatives = (self.n_fillers as f64).powi(self.input_len as i32);
        if negatives < per_class as f64 * 2.0 {
            return Err(Error::config("too few filler symbols for distinct inputs"));
        }
        Ok(())
    }
}

/// Draws an input whose feature value under `kind`/`marker` is `positive`.
fn draw_input(
    r: &mut StreamRng,
    kind: RuleKind,
    marker: TokenId,
    fillers: &[TokenId],
    len: usize,
    positive: bool,
) -> Vec<TokenId> {
    let count = match (kind, positive) {
        (RuleKind::Presence, true) => 1,
        (RuleKind::Presence, false) => 0,
        (RuleKind::Parity, p) => {
            let options: Vec<usize> = (0..=len).filter(|c| (c % 2 == 1) == p).collect();
            *options.choose(r).expect("len >= 1 gives both parities")
        }
    };
    let mut input: Vec<TokenId> = (0..len).map(|_| *fillers.choose(r).expect("fillers")).collect();
    let mut slots: Vec<usize> = (0..len).collect();
    slots.shuffle(r);
    for &s in &slots[..count] {
        input[s] = marker;
    }
    input
}

/// Binary yes/no suite. Labels are balanced exactly 50/50 within every task.
pub fn gen_binary_suite(seed: u64, config: &BinarySuiteConfig) -> Result<Suite> {
    config.validate()?;
    let vocab = config.vocab();
    let markers: Vec<TokenId> = (0..config.n_markers as u32).map(|i| vocab.symbol(i)).collect();
    let fillers: Vec<TokenId> = (config.n_markers as u32..vocab.n_symbols)
        .map(|i| vocab.symbol(i))
        .collect();
    let n_permuted = config.n_permuted();
    // twin pairs first, then the plain tasks
    let n_units = n_permuted / 2 + (config.n_tasks - n_permuted);

    let mut tasks = Vec::with_capacity(config.n_tasks);
    for unit in 0..n_units {
        let twin = unit < n_permuted / 2;
        let mut r = rng::stream(seed, "binary-task", unit as u64);
        let kind = *config.rule_kinds.choose(&mut r).expect("validated nonempty");
        let marker = *markers.choose(&mut r).expect("validated nonempty");

        let n_para = r.gen_range(1..=MAX_PARAPHRASES);
        let instructions = distinct_paraphrases(n_para, || {
            let q = vocab.word(r.gen_range(0..QUESTION_WORDS));
            let w = vocab.word(kind.word_offset() + r.gen_range(0..RULE_WORDS_PER_KIND));
            let mut slots = vec![q, w, marker];
            slots.shuffle(&mut r);
            slots
        });

        let per_class = config.n_examples / 2;
        let mut inputs: Vec<(Vec<TokenId>, bool)> = Vec::with_capacity(config.n_examples);
        for positive in [true, false] {
            let mut made = 0;
            while made < per_class {
                let x = draw_input(&mut r, kind, marker, &fillers, config.input_len, positive);
                if !inputs.iter().any(|(y, _)| *y == x) {
                    inputs.push((x, positive));
                    made += 1;
                }
            }
        }
        inputs.shuffle(&mut r);

        let flips: &[bool] = if twin { &[false, true] } else { &[false] };
        let group = format!("bin-{unit:03}");
        for &flipped in flips {
            let rule = LatentRule {
                kind,
                marker,
                flipped,
                permuted: twin,
            };
            let examples = inputs
                .iter()
                .map(|(x, _)| Example {
                    input: x.clone(),
                    answer: rule.label(x),
                })
                .collect();
            let task_id = if twin {
                format!("{group}{}", if flipped { 'b' } else { 'a' })
            } else {
                group.clone()
            };
            tasks.push(TaskSpec {
                task_id,
                family: Family::BinaryClf,
                group: group.clone(),
                instructions: instructions.clone(),
                examples,
                answer_space: vec![Vocab::YES, Vocab::NO],
                rule: Some(rule),
            });
        }
    }
    Ok(Suite { vocab, tasks })
}
