mod common;

use common::{catalog, tiny_cfg, two_region_sample};
use pcl_core::data::{build_protocol, ProtocolMode};
use pcl_core::model::{add_step, image_tensor, init_model, ModelConfig, ModelState};
use pcl_core::training::{
    grad_check, hungarian, mask_targets, match_cost, train_task, MatchWeights, Objective,
    TrainHyper,
};

#[test]
fn analytic_gradient_matches_finite_differences() {
    let p = build_protocol(&catalog(2), 2, 1, ProtocolMode::Overlap, None).unwrap();
    let s: ModelState<f64> = init_model(&tiny_cfg(), &p, 11).unwrap();
    assert_eq!(s.prompt_sets[0].num_queries, 2);
    let sample = two_region_sample(16);
    let targets = mask_targets(&sample, [4, 4], &[1, 2], 0).unwrap();
    let img = image_tensor(&sample);
    let r = grad_check(&s, &img, &targets, 1, 1e-5, &MatchWeights::default()).unwrap();
    assert_eq!(r.checked, s.count_trainable());
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

#[test]
fn frozen_groups_receive_zero_gradient_at_later_steps() {
    let p = build_protocol(&catalog(4), 2, 2, ProtocolMode::Overlap, None).unwrap();
    let mut s: ModelState<f64> = init_model(&tiny_cfg(), &p, 11).unwrap();
    add_step(&mut s, p.step_classes(2).unwrap(), 12).unwrap();
    let mut sample = two_region_sample(16);
    sample.segments[0].class_id = 3;
    sample.segments[1].class_id = 4;
    let targets = mask_targets(&sample, [4, 4], &[3, 4], 0).unwrap();
    let r = grad_check(&s, &image_tensor(&sample), &targets, 2, 1e-5, &MatchWeights::default())
        .unwrap();
    assert_eq!(r.frozen_max_abs, 0.0);
    assert_eq!(r.checked, s.count_trainable());
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

#[test]
fn finite_difference_error_shrinks_with_epsilon() {
    // a later step keeps the base network fixed, so perturbations of the
    // prompts and head stay clear of encoder ReLU kinks
    let p = build_protocol(&catalog(4), 2, 2, ProtocolMode::Overlap, None).unwrap();
    let mut s: ModelState<f64> = init_model(&tiny_cfg(), &p, 5).unwrap();
    add_step(&mut s, p.step_classes(2).unwrap(), 6).unwrap();
    let mut sample = two_region_sample(16);
    sample.segments[0].class_id = 3;
    sample.segments[1].class_id = 4;
    let targets = mask_targets(&sample, [4, 4], &[3, 4], 0).unwrap();
    let img = image_tensor(&sample);
    let w = MatchWeights::default();
    let coarse = grad_check(&s, &img, &targets, 2, 5e-4, &w).unwrap();
    let fine = grad_check(&s, &img, &targets, 2, 2.5e-4, &w).unwrap();
    assert!(fine.max_rel_error < coarse.max_rel_error, "{fine:?} vs {coarse:?}");
    // second-order truncation: halving epsilon cuts the error about fourfold
    let ratio = coarse.max_rel_error / fine.max_rel_error;
    assert!((3.0..5.0).contains(&ratio), "ratio {ratio}");
}

#[test]
fn toy_task_loss_drops_by_ninety_percent() {
    let p = build_protocol(&catalog(2), 2, 1, ProtocolMode::Overlap, None).unwrap();
    let cfg = ModelConfig {
        image_size: [32, 32],
        mask_resolution: [8, 8],
        embed_dim: 16,
        num_heads: 2,
        pixel_embed_dim: 16,
        mlp_hidden: 16,
        num_layers: 1,
        encoder_channels: [8, 8, 16],
        min_prompts: 2,
        ..Default::default()
    };
    let mut s: ModelState<f32> = init_model(&cfg, &p, 3).unwrap();
    let data = vec![two_region_sample(32)];
    let hyper = TrainHyper {
        iters_per_class: 250,
        iter_scale: 1.0,
        batch_size: 1,
        lr_first: 3e-3,
        ..Default::default()
    };
    let report = train_task(&mut s, &data, 1, &hyper, &MatchWeights::default(), Objective::Eclipse)
        .unwrap();
    assert_eq!(report.iterations, 500);
    let first = report.log[0].total;
    let last = report.log[report.log.len() - 1].total;
    assert!(last <= 0.1 * first, "loss {first} -> {last}");
}

#[test]
fn zero_iterations_leave_state_unchanged() {
    let p = build_protocol(&catalog(2), 2, 1, ProtocolMode::Overlap, None).unwrap();
    let mut s: ModelState<f32> = init_model(&tiny_cfg(), &p, 3).unwrap();
    let before = s.clone();
    let hyper = TrainHyper {
        iter_scale: 0.0,
        ..Default::default()
    };
    let r = train_task(
        &mut s,
        &[two_region_sample(16)],
        1,
        &hyper,
        &MatchWeights::default(),
        Objective::Eclipse,
    )
    .unwrap();
    assert_eq!(r.iterations, 0);
    assert_eq!(s, before);
}

#[test]
fn later_step_training_touches_only_new_prompts_and_head() {
    let p = build_protocol(&catalog(4), 2, 2, ProtocolMode::Overlap, None).unwrap();
    let mut s: ModelState<f32> = init_model(&tiny_cfg(), &p, 3).unwrap();
    add_step(&mut s, p.step_classes(2).unwrap(), 4).unwrap();
    let before = s.clone();
    let mut sample = two_region_sample(16);
    sample.segments[0].class_id = 3;
    sample.segments[1].class_id = 4;
    let hyper = TrainHyper {
        iters_per_class: 10,
        iter_scale: 1.0,
        batch_size: 2,
        ..Default::default()
    };
    train_task(&mut s, &[sample], 2, &hyper, &MatchWeights::default(), Objective::Eclipse).unwrap();
    let mut changed = 0;
    for (i, (a, b)) in before.params().iter().zip(s.params()).enumerate() {
        if before.is_trainable(i) {
            changed += (a.value != b.value) as usize;
        } else {
            assert_eq!(a.value.data(), b.value.data(), "{} moved", a.name);
        }
    }
    assert!(changed > 0);
}

#[test]
fn empty_step_dataset_is_a_protocol_error() {
    let p = build_protocol(&catalog(2), 2, 1, ProtocolMode::Overlap, None).unwrap();
    let mut s: ModelState<f32> = init_model(&tiny_cfg(), &p, 3).unwrap();
    let err = train_task(
        &mut s,
        &[],
        1,
        &TrainHyper::default(),
        &MatchWeights::default(),
        Objective::Eclipse,
    )
    .unwrap_err();
    assert!(matches!(err, pcl_core::Error::Protocol(_)));
}

#[test]
fn training_is_deterministic() {
    let p = build_protocol(&catalog(2), 2, 1, ProtocolMode::Overlap, None).unwrap();
    let hyper = TrainHyper {
        iters_per_class: 5,
        iter_scale: 1.0,
        batch_size: 2,
        ..Default::default()
    };
    let run = || {
        let mut s: ModelState<f32> = init_model(&tiny_cfg(), &p, 3).unwrap();
        train_task(
            &mut s,
            &[two_region_sample(16)],
            1,
            &hyper,
            &MatchWeights::default(),
            Objective::Finetune,
        )
        .unwrap();
        s
    };
    assert_eq!(run(), run());
}

#[test]
fn matching_on_model_outputs_is_well_formed() {
    let p = build_protocol(&catalog(2), 2, 1, ProtocolMode::Overlap, None).unwrap();
    let s: ModelState<f64> = init_model(&tiny_cfg(), &p, 3).unwrap();
    let sample = two_region_sample(16);
    let out = pcl_core::model::forward_step(&s, &image_tensor(&sample), 1).unwrap();
    let targets = mask_targets(&sample, [4, 4], &[1, 2], 0).unwrap();
    let cost = match_cost(
        out.class_logits.data(),
        out.mask_logits.data(),
        2,
        &targets,
        &MatchWeights::default(),
    )
    .unwrap();
    assert!(cost.data.iter().all(|c| c.is_finite() && *c >= 0.0));
    assert_eq!(hungarian(&cost).pairs.len(), 2);
}

