use brainnet_moe::{evaluate, generate_split, train, BrainNetMoE, Cohort, ModelConfig, Split, SynthSpec, TrainConfig};

fn small() -> (Cohort, ModelConfig, TrainConfig) {
    let spec = SynthSpec {
        n_regions: 10,
        subjects_per_class: 8,
        seed: 5,
        ..SynthSpec::default()
    };
    let cohort = generate_split(&spec).unwrap();
    let model = ModelConfig {
        n_regions: 10,
        expert_hidden: 16,
        model_dim: 8,
        gate_hidden: 8,
        seed: 5,
        ..ModelConfig::default()
    };
    let train_cfg = TrainConfig {
        epochs: 2,
        batch_size: 8,
        seed: 5,
        ..TrainConfig::default()
    };
    (cohort, model, train_cfg)
}

#[test]
fn cohort_survives_a_directory_round_trip() {
    let (cohort, _, _) = small();
    let dir = tempfile::tempdir().unwrap();
    cohort.write_dir(dir.path(), None).unwrap();
    let back = Cohort::read_dir(dir.path()).unwrap();
    assert_eq!(back.train, cohort.train);
    assert_eq!(back.test, cohort.test);
    assert_eq!(back.labels(&back.test), cohort.labels(&cohort.test));
    assert_eq!(back.subjects[3].matrix.values(), cohort.subjects[3].matrix.values());
}

#[test]
fn train_checkpoint_evaluate() {
    let (cohort, model_cfg, train_cfg) = small();
    let mut model = BrainNetMoE::new(model_cfg).unwrap();
    let mut lines = Vec::new();
    let history = train(&mut model, &cohort, &train_cfg, &mut |r| {
        lines.push(r.to_json_line());
        Ok(())
    })
    .unwrap();
    assert_eq!(history.steps.len(), 2 * cohort.train.len().div_ceil(8));
    assert_eq!(lines.len(), history.steps.len() + history.evals.len());
    assert!(history.steps.iter().all(|s| s.total.is_finite()));

    let before = evaluate(&model, &cohort, Split::Test).unwrap();
    assert_eq!(before.total(), cohort.test.len());
    let last = history.evals.last().unwrap();
    assert_eq!(last.accuracy, before.accuracy);

    let dir = tempfile::tempdir().unwrap();
    model.save_checkpoint(dir.path()).unwrap();
    let loaded = BrainNetMoE::load_checkpoint(dir.path()).unwrap();
    assert_eq!(loaded.config(), model.config());
    assert_eq!(evaluate(&loaded, &cohort, Split::Test).unwrap(), before);
}
