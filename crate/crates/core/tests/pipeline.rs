//! End-to-end prune loop on small models.

mod common;

use common::make_identity_block;
use fusegpt_core::checkpoint::{from_bytes, to_bytes};
use fusegpt_core::corpus::{synthetic_text, Corpus};
use fusegpt_core::importance::Metric;
use fusegpt_core::pipeline::*;
use fusegpt_core::{Error, GptConfig, GptModel};

fn small_config(n_blocks: usize) -> GptConfig {
    GptConfig {
        n_blocks,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        max_seq_len: 16,
        seed: 3,
        ..GptConfig::default()
    }
}

fn small_run(sparsity: f64, ablation: AblationMode) -> RunConfig {
    RunConfig {
        sparsity,
        ablation,
        group_size: 3,
        rank: 2,
        lora_rank: Some(2),
        epochs: 2,
        batch_size: 4,
        calib_samples: 8,
        finetune_samples: 16,
        seq_len: 16,
        lr_base: 1e-3,
        ..RunConfig::default()
    }
}

fn data() -> RunData {
    RunData::new(Corpus::from_text(&synthetic_text(20_000, 1)), Vec::new())
}

fn trained(n_blocks: usize) -> GptModel<f32> {
    let spec = PretrainConfig {
        steps: 60,
        batch_size: 4,
        seq_len: 16,
        lr: 3e-3,
        ..PretrainConfig::default()
    };
    pretrain_toy(small_config(n_blocks), &data().corpus.train, &spec).unwrap().0
}

#[test]
fn zero_removals_leave_the_model_unchanged() {
    let model = trained(4);
    let (out, report) = run_fusegpt(model.clone(), &data(), &small_run(0.1, AblationMode::FullFusion)).unwrap();
    assert_eq!(report.blocks_to_remove, 1);
    let (out0, report0) = run_fusegpt(model.clone(), &data(), &small_run(0.0, AblationMode::FullFusion)).unwrap();
    assert!(report0.iterations.is_empty());
    assert_eq!(to_bytes(&out0).unwrap(), to_bytes(&model).unwrap());
    assert_eq!(out.n_live(), 3);
}

#[test]
fn full_run_accounts_for_every_block() {
    let model = trained(8);
    let (out, report) = run_fusegpt(model, &data(), &small_run(0.25, AblationMode::FullFusion)).unwrap();
    assert_eq!(report.iterations.len(), 2);
    assert_eq!(out.n_live(), 6);
    assert_eq!(report.block_map.len(), 8);
    let removed: Vec<usize> = report.block_map.iter().filter(|f| f.status == BlockStatus::Removed).map(|f| f.block).collect();
    let mut pruned: Vec<usize> = report.iterations.iter().map(|i| i.pruned).collect();
    pruned.sort();
    assert_eq!(removed, pruned);
    for it in &report.iterations {
        assert!(it.group.contains(&it.pruned));
        assert_eq!(it.group.len(), 4);
        let d = it.distill.as_ref().unwrap();
        assert_eq!(d.trace.len(), 2);
    }
    assert!(out.blocks.iter().all(|b| b.linears.iter().all(|l| l.is_plain())));
    let fresh = GptModel::<f32>::init(GptConfig { n_blocks: 6, ..small_config(6) }).unwrap();
    assert_eq!(out.parameter_count(), fresh.parameter_count());
    // The saved model reproduces the reported perplexity exactly.
    let reloaded: GptModel<f32> = from_bytes(&to_bytes(&out).unwrap()).unwrap();
    let ppl = evaluate_perplexity(&reloaded, &data().corpus.heldout, 16, None).unwrap();
    assert_eq!(ppl, report.perplexity["heldout"].after);
}

#[test]
fn detect_only_removes_an_identity_block_first() {
    let mut model = trained(5);
    make_identity_block(&mut model, 4);
    let (_, report) = run_fusegpt(model, &data(), &small_run(0.2, AblationMode::DetectOnly)).unwrap();
    assert_eq!(report.iterations[0].pruned, 4);
    assert!(report.iterations[0].importance.scores[3].value <= 1e-6);
    assert!(report.iterations[0].distill.is_none());
}

#[test]
fn importance_is_recomputed_on_the_current_model() {
    // Distillation changes the surviving weights, so a fresh scoring pass
    // must disagree with the first iteration's scores for the same blocks.
    let model = trained(6);
    let mut cfg = small_run(0.3, AblationMode::FullFusion);
    cfg.lr_base = 1e-2;
    cfg.lr_coeff = 1e-2;
    let (_, report) = run_fusegpt(model, &data(), &cfg).unwrap();
    let (first, second) = (&report.iterations[0], &report.iterations[1]);
    assert_eq!(second.importance.scores.len(), 5);
    assert!(second.importance.scores.iter().all(|s| s.block != first.pruned));
    let stale: Vec<f64> = first.importance.scores.iter().filter(|s| s.block != first.pruned).map(|s| s.value).collect();
    let fresh: Vec<f64> = second.importance.scores.iter().map(|s| s.value).collect();
    assert_ne!(stale, fresh);
}

#[test]
fn fused_target_is_baked_before_it_is_fused_again() {
    let model = trained(6);
    let mut cfg = small_run(0.5, AblationMode::FullFusion);
    cfg.group_size = 5;
    let (_, report) = run_fusegpt(model, &data(), &cfg).unwrap();
    // With every live block in the group, the second target already carries
    // the first round's injections.
    assert!(report.iterations[1..].iter().all(|it| it.baked_source));
    let fate = report.block_map.iter().find(|f| f.block == report.iterations[0].pruned).unwrap();
    assert_eq!(fate.fused_into.len(), 5);
}

#[test]
fn unreachable_sparsity_is_a_config_error() {
    let err = run_fusegpt(trained(2), &data(), &small_run(0.9, AblationMode::FullFusion)).unwrap_err();
    assert!(matches!(err.error, Error::Config(_)));
    assert_eq!(err.error.exit_code(), 2);
    assert!(err.partial.iterations.is_empty());
}

#[test]
fn numerical_failure_returns_a_partial_report() {
    let mut model = trained(6);
    model.tok_emb.data_mut()[b'a' as usize * 16] = f32::INFINITY;
    let err = run_fusegpt(model, &data(), &small_run(0.3, AblationMode::FullFusion)).unwrap_err();
    assert_eq!(err.error.exit_code(), 3, "{}", err.error);
    assert!(err.partial.error.is_some());
}

#[test]
fn pretraining_is_deterministic() {
    let a = trained(2);
    let b = trained(2);
    assert_eq!(to_bytes(&a).unwrap(), to_bytes(&b).unwrap());
    let bad = GptConfig { n_blocks: 1, ..small_config(1) };
    assert!(matches!(pretrain_toy(bad, &data().corpus.train, &PretrainConfig::default()), Err(Error::Config(_))));
    let spec = PretrainConfig { seq_len: 16, ..PretrainConfig::default() };
    assert!(matches!(pretrain_toy(small_config(2), &[1, 2, 3], &spec), Err(Error::Config(_))));
}

#[test]
fn pretraining_memorizes_a_repeated_pattern() {
    let pattern: String = (0..64).map(|i| (b'a' + (i * 7 % 26) as u8) as char).collect();
    let tokens = fusegpt_core::tokenizer::tokenize(&pattern.repeat(40));
    let spec = PretrainConfig {
        steps: 400,
        batch_size: 8,
        seq_len: 16,
        lr: 3e-3,
        target_nll: Some(0.2),
        seed: 1,
    };
    let (model, report) = pretrain_toy(small_config(2), &tokens, &spec).unwrap();
    assert!(report.final_nll < 0.2, "{report:?}");
    assert!(report.steps < 400);
    let ppl = evaluate_perplexity(&model, &tokens, 16, None).unwrap();
    assert!(ppl.ln() < 0.3);
    assert_eq!(ppl, evaluate_perplexity(&model, &tokens, 16, None).unwrap());
}

#[test]
fn ablation_arms_remove_the_same_number_of_blocks() {
    let model = trained(6);
    let mut cfg = small_run(0.3, AblationMode::FullFusion);
    cfg.metric = Metric::Bi;
    let arms = run_ablation(&model, &data(), &cfg).unwrap();
    assert_eq!(arms.len(), 3);
    assert!(arms.iter().all(|r| r.iterations.len() == 2));
    assert_eq!(arms[0].iterations[0].pruned, arms[2].iterations[0].pruned);
    assert!(arms[1].iterations[0].distill.is_some() && arms[0].iterations[0].distill.is_none());
}
