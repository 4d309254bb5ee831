mod common;

use common::*;
use pcl_core::data::{build_protocol, generate_dataset, ClassCatalog, ProtocolMode, SceneGenConfig, TaskProtocol};
use pcl_core::model::{encode, forward_step, image_tensor, init_model, ModelConfig, ModelState, PromptMode};
use pcl_core::Tensor;

fn scene() -> SceneGenConfig {
    scene32(5)
}

fn small_cfg(mode: PromptMode, layers: usize) -> ModelConfig {
    model32(mode, layers)
}

fn protocol(catalog: &ClassCatalog) -> TaskProtocol {
    build_protocol(catalog, 4, 2, ProtocolMode::Overlap, None).unwrap()
}

#[test]
fn shallow_and_deep_coincide_with_one_layer() {
    let catalog = scene().catalog();
    let p = protocol(&catalog);
    let shallow: ModelState<f64> = init_model(&small_cfg(PromptMode::Shallow, 1), &p, 9).unwrap();
    let deep: ModelState<f64> = init_model(&small_cfg(PromptMode::Deep, 1), &p, 9).unwrap();
    assert_eq!(shallow.params(), deep.params());
    for s in generate_dataset(&scene(), 4).unwrap() {
        let img = image_tensor(&s);
        let (a, b) = (forward_step(&shallow, &img, 1).unwrap(), forward_step(&deep, &img, 1).unwrap());
        for (x, y) in [
            (&a.class_logits, &b.class_logits),
            (&a.mask_logits, &b.mask_logits),
            (&a.decoder_embeddings, &b.decoder_embeddings),
        ] {
            let diff = x.data().iter().zip(y.data()).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
            assert!(diff <= 1e-12, "{diff}");
        }
    }
}

#[test]
fn earlier_outputs_survive_later_training_exactly() {
    assert_eq!(freeze_invariance(5).unwrap(), 0.0);
}

#[test]
fn trainable_count_after_add_step_has_a_closed_form() {
    assert_eq!(trainable_accounting().unwrap(), 11);
}

#[test]
fn desk_default_step_has_1920_prompt_scalars() {
    let cfg = ModelConfig::default();
    assert_eq!(cfg.step_param_count(10, 4), 1920 + head_params(64, 64, 2, 4));
    // full-size decoder: D = 256, L = 9, two hidden layers of 256
    let big = ModelConfig {
        embed_dim: 256,
        num_layers: 9,
        mlp_hidden: 256,
        ..Default::default()
    };
    let per_step = big.step_param_count(10, 10);
    assert!((100_000..1_000_000).contains(&per_step), "{per_step}");
}

#[test]
fn attention_cost_is_additive_over_prompt_sets() {
    assert_eq!(attention_additivity().unwrap(), 3);
}

#[test]
fn zero_image_encoding_matches_recorded_values() {
    let catalog = scene().catalog();
    let s: ModelState<f64> = init_model(&small_cfg(PromptMode::Deep, 2), &protocol(&catalog), 42).unwrap();
    let zero = Tensor::zeros(&[32, 32, 3]);
    let enc = encode(&s, &zero).unwrap();
    assert_eq!(enc, encode(&s, &zero).unwrap());
    assert!(enc.pixel.data().iter().chain(enc.memory.data()).all(|v| v.is_finite()));
    let summary = [
        enc.pixel.data().iter().sum::<f64>(),
        enc.pixel.data().iter().map(|v| v * v).sum::<f64>(),
        enc.memory.data().iter().sum::<f64>(),
        enc.memory.data().iter().map(|v| v * v).sum::<f64>(),
    ];
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/zero_image_encoding.json");
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, serde_json::to_string_pretty(&summary).unwrap()).unwrap();
    }
    let recorded: [f64; 4] = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    for (a, b) in summary.iter().zip(recorded) {
        assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0), "{a} vs {b}");
    }
}
