//! Central finite differences against the reverse sweep, for every graph op
//! and for the full language-model loss.

mod common;

use std::time::Instant;

use common::{check_lm_loss, check_ops, lm_config, numeric_grad, rel_err, SEEDS, TOL};
use ictlab::autodiff::ParamStore;
use ictlab::episodes::PromptLayout;
use ictlab::lm::LanguageModel;
use ictlab::meta::{finetune_on_support, AdaptConfig, PromptItem};
use ictlab::tasks::{Example, Vocab};

#[test]
fn every_op_matches_finite_differences() {
    let start = Instant::now();
    for seed in 0..SEEDS {
        check_ops(seed);
    }
    assert!(start.elapsed().as_secs() < 60);
}

#[test]
fn language_model_loss_matches_finite_differences() {
    let start = Instant::now();
    let worst = (0..SEEDS).map(check_lm_loss).fold(0.0, f64::max);
    println!("lm loss: worst relative error {worst:e} over {SEEDS} seeds");
    assert!(start.elapsed().as_secs() < 60);
}

#[test]
fn one_finetuning_step_is_sgd_on_the_numeric_gradient() {
    let layout = PromptLayout::default();
    for seed in 0..5 {
        let mut cfg = lm_config(0);
        cfg.max_context = 16;
        let model = LanguageModel::init(cfg.clone(), seed).unwrap();
        let instruction = vec![Vocab::INS + 6, 7];
        let support: Vec<Example> = (0..3)
            .map(|i| Example {
                input: vec![8 + i, 9],
                answer: if i % 2 == 0 { Vocab::YES } else { Vocab::NO },
            })
            .collect();
        let adapt = AdaptConfig {
            inner_steps: 1,
            inner_lr: 0.05,
        };
        let adapted = finetune_on_support(&model, &instruction, &support, &adapt, &layout).unwrap();

        let items: Vec<PromptItem> = support
            .iter()
            .map(|e| PromptItem::zero_shot(&instruction, e, &layout, cfg.max_context).unwrap())
            .collect();
        let mean_loss = |p: &ParamStore| {
            let m = LanguageModel::from_params(cfg.clone(), p.clone()).unwrap();
            items.iter().map(|it| m.nll_of_answer(&it.prompt, &[it.answer]).unwrap()).sum::<f64>() / items.len() as f64
        };
        for name in model.params.names() {
            let numeric = numeric_grad(&model.params, name, &mean_loss);
            let implied: Vec<f64> = model.params.get(name).unwrap().data().iter().zip(adapted.get(name).unwrap().data()).map(|(w, a)| (w - a) / 0.05).collect();
            let e = rel_err(&implied, &numeric);
            assert!(e < TOL, "seed {seed} {name}: relative error {e:e}");
        }
    }
}
