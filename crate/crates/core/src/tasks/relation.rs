use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{distinct_paraphrases, Example, Family, Suite, TaskSpec, Vocab};
use crate::error::{Error, Result};
use crate::lm::TokenId;
use crate::rng;

/// Question-word and filler-word synonym slots shared by every relation
/// instruction template.
const QUESTION_WORDS: u32 = 3;
const FILLER_WORDS: u32 = 3;
const TEMPLATE_WORDS: u32 = QUESTION_WORDS + FILLER_WORDS;
const MAX_PARAPHRASES: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationSuiteConfig {
    pub n_tasks: usize,
    pub n_examples: usize,
    pub entity_vocab_size: usize,
    #[serde(default = "default_max_input")]
    pub max_task_input_len: usize,
}

fn default_max_input() -> usize {
    8
}

impl RelationSuiteConfig {
    pub fn vocab(&self) -> Vocab {
        Vocab {
            n_words: TEMPLATE_WORDS + 2 * self.n_tasks as u32,
            n_symbols: self.entity_vocab_size as u32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_tasks == 0 || self.n_examples == 0 {
            return Err(Error::config("relation suite needs n_tasks > 0 and n_examples > 0"));
        }
        if self.entity_vocab_size < self.n_examples {
            return Err(Error::config(format!(
                "entity_vocab_size {} < n_examples {}: injective mapping impossible",
                self.entity_vocab_size, self.n_examples
            )));
        }
        if self.max_task_input_len == 0 {
            return Err(Error::config("max_task_input_len must be positive"));
        }
        Ok(())
    }
}

/// Relation-lookup suite: each task is a random injective subject→object map,
/// so the object of an unseen subject is never recoverable from other tasks.
pub fn gen_relation_suite(seed: u64, config: &RelationSuiteConfig) -> Result<Suite> {
    config.validate()?;
    let vocab = config.vocab();
    let entities: Vec<TokenId> = (0..vocab.n_symbols).map(|i| vocab.symbol(i)).collect();
    let mut tasks = Vec::with_capacity(config.n_tasks);
    for t in 0..config.n_tasks {
        let mut r = rng::stream(seed, "relation-task", t as u64);
        let rel_name = vocab.word(TEMPLATE_WORDS + 2 * t as u32);
        let rel_alias = vocab.word(TEMPLATE_WORDS + 2 * t as u32 + 1);

        let n_para = r.gen_range(1..=MAX_PARAPHRASES);
        let instructions = distinct_paraphrases(n_para, || {
            let q = vocab.word(r.gen_range(0..QUESTION_WORDS));
            let f = vocab.word(QUESTION_WORDS + r.gen_range(0..FILLER_WORDS));
            let rel = if r.gen_bool(0.5) { rel_name } else { rel_alias };
            let mut slots = vec![q, rel, f];
            slots.shuffle(&mut r);
            slots
        });

        let subjects: Vec<TokenId> = entities.choose_multiple(&mut r, config.n_examples).copied().collect();
        let objects: Vec<TokenId> = entities.choose_multiple(&mut r, config.n_examples).copied().collect();
        let examples = subjects
            .into_iter()
            .zip(objects)
            .map(|(s, o)| Example {
                input: vec![s],
                answer: o,
            })
            .collect();

        let task_id = format!("rel-{t:03}");
        tasks.push(TaskSpec {
            group: task_id.clone(),
            task_id,
            family: Family::RelationLookup,
            instructions,
            examples,
            answer_space: entities.clone(),
            rule: None,
        });
    }
    Ok(Suite { vocab, tasks })
}
