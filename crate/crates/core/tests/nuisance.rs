use vtn_core::model::{build_model, Classifier, ModelSpec, Variant};
use vtn_core::synth::{make_dataset, SceneSpec};
use vtn_core::train::{evaluate, fit, TrainConfig};

// A position-sensitive classifier fit to templates alone does not cover the
// pose variation of the benchmark.
#[test]
fn pose_variation_costs_a_template_trained_model() {
    let deformed = SceneSpec::desk_default();
    let canonical = deformed.canonical();
    let train = make_dataset(&canonical, 400, 1, 1).unwrap().train;
    let clean = make_dataset(&canonical, 1, 300, 2).unwrap().test;
    let moved = make_dataset(&deformed, 1, 300, 2).unwrap().test;

    let spec = ModelSpec {
        classifier: Classifier::Flatten,
        ..ModelSpec::new(Variant::Base, 10, 0)
    };
    let mut model = build_model::<f32>(&spec, None).unwrap();
    let cfg = TrainConfig {
        epochs: 5,
        lambda: 0.0,
        ..TrainConfig::default()
    };
    fit(&mut model, &train, None, &cfg, |_| {}).unwrap();
    let a_clean = evaluate(&mut model, &clean, 100, 1.0).unwrap().accuracy;
    let a_moved = evaluate(&mut model, &moved, 100, 1.0).unwrap().accuracy;
    assert!(a_clean - a_moved >= 0.10, "clean {a_clean} deformed {a_moved}");
}
