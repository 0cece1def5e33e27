use applenet_core::baselines::BaselineKind;
use applenet_core::datagen::Protocol;
use applenet_core::losses::predict;
use applenet_core::model::FeatureBatch;
use applenet_core::rng;
use applenet_core::tensor::Tensor;
use applenet_harness::train::{prepare_seed, run_experiment, train_seed, BackboneCache};
use applenet_harness::ExperimentConfig;

fn quick(method: BaselineKind) -> ExperimentConfig {
    ExperimentConfig { method, epochs: 3, seeds: vec![4], ..ExperimentConfig::default() }
}

#[test]
fn zero_epochs_leave_parameters_and_match_zero_shot() {
    let cache = BackboneCache::new();
    let zs = run_experiment(&quick(BaselineKind::ZeroShot), &cache).unwrap();
    for method in [BaselineKind::Coop, BaselineKind::Cocoop, BaselineKind::MsCocoop, BaselineKind::Applenet] {
        let cfg = ExperimentConfig { epochs: 0, ..quick(method) };
        let prepared = cache.get(&cfg).unwrap();
        let data = prepare_seed(&cfg, &prepared, 4).unwrap();
        let out = train_seed(&cfg, &prepared, &data, 4).unwrap();
        assert_eq!(out.learner.params(), &out.initial_params, "{method}");
        assert_eq!(out.metrics.final_loss, None);
        assert_eq!(out.metrics.accuracies, zs.per_seed[0].accuracies, "{method}");
    }
}

#[test]
fn training_touches_only_declared_parameters_and_never_the_encoders() {
    let cache = BackboneCache::new();
    for method in BaselineKind::ALL {
        let cfg = quick(method);
        let prepared = cache.get(&cfg).unwrap();
        let before = prepared.backbone.weight_bits();
        let data = prepare_seed(&cfg, &prepared, 4).unwrap();
        let out = train_seed(&cfg, &prepared, &data, 4).unwrap();
        assert_eq!(prepared.backbone.weight_bits(), before, "{method}");
        let groups = method.learnable_groups();
        let mut changed = 0;
        for ((_, name, t), (_, _, t0)) in out.learner.params().iter().zip(out.initial_params.iter()) {
            assert!(groups.iter().any(|g| name.starts_with(g)), "{method}: unexpected parameter {name}");
            if t.data() != t0.data() {
                changed += 1;
            }
        }
        if method == BaselineKind::ZeroShot {
            assert_eq!(out.learner.params().len(), 0);
        } else {
            assert!(changed > 0, "{method} did not train");
        }
    }
}

#[test]
fn repeated_runs_are_bit_identical() {
    let cfg = ExperimentConfig { seeds: vec![2, 2], ..quick(BaselineKind::Applenet) };
    let a = run_experiment(&cfg, &BackboneCache::new()).unwrap();
    let b = run_experiment(&cfg, &BackboneCache::new()).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.per_seed[0], a.per_seed[1]);
}

#[test]
fn seed_mean_is_the_mean_of_seed_records() {
    let cfg = ExperimentConfig { seeds: vec![1, 2, 3], ..quick(BaselineKind::Coop) };
    let r = run_experiment(&cfg, &BackboneCache::new()).unwrap();
    for set in &r.eval_sets {
        let m: f64 = r.per_seed.iter().map(|s| s.accuracies[set].unwrap()).sum::<f64>() / 3.0;
        assert_eq!(r.mean[set], Some(m));
    }
    let h: f64 = r.per_seed.iter().map(|s| s.harmonic.unwrap()).sum::<f64>() / 3.0;
    assert_eq!(r.mean_harmonic, Some(h));
    assert!(r.per_seed.iter().all(|s| s.accuracies.values().all(|a| (0.0..=100.0).contains(&a.unwrap()))));
}

#[test]
fn linear_probe_reports_new_classes_as_unavailable() {
    let r = run_experiment(&quick(BaselineKind::ErmLinear), &BackboneCache::new()).unwrap();
    assert!(r.mean["base"].is_some());
    assert_eq!(r.mean["new"], None);
    assert_eq!(r.mean_harmonic, None);
}

#[test]
fn random_prompts_score_near_chance_on_sixteen_classes() {
    let cfg = ExperimentConfig { protocol: Protocol::Ssmt, seeds: vec![1], ..ExperimentConfig::default() };
    let cache = BackboneCache::new();
    let prepared = cache.get(&cfg).unwrap();
    let data = prepare_seed(&cfg, &prepared, 1).unwrap();
    let mut samples = Vec::new();
    let mut labels = Vec::new();
    for (_, _, batch) in &data.evals {
        let FeatureBatch { samples: s, labels: l, .. } = batch.clone();
        samples.extend(s);
        labels.extend(l);
    }
    samples.truncate(1000);
    labels.truncate(1000);
    // Fresh prompts per image, so predictions carry no class information.
    let mut r = rng::stream(1, "random-prompts");
    let hits = samples
        .iter()
        .zip(&labels)
        .filter(|(s, y)| {
            let prompts: Vec<Tensor> = (0..16).map(|_| Tensor::randn(&[32], 1.0, &mut r)).collect();
            predict(&s.final_feature, &prompts, 0.07).unwrap() == **y
        })
        .count();
    let acc = 100.0 * hits as f64 / samples.len() as f64;
    assert!((acc - 6.25).abs() <= 3.0, "accuracy {acc}");
}

#[test]
fn learned_context_beats_the_fixed_prompt_on_base_classes() {
    let cache = BackboneCache::new();
    let zs = run_experiment(&ExperimentConfig { method: BaselineKind::ZeroShot, ..Default::default() }, &cache).unwrap();
    let coop = run_experiment(&ExperimentConfig { method: BaselineKind::Coop, ..Default::default() }, &cache).unwrap();
    assert!(coop.mean["base"].unwrap() > zs.mean["base"].unwrap());
}

#[test]
fn invalid_configs_are_contract_errors() {
    let cache = BackboneCache::new();
    for cfg in [
        ExperimentConfig { shots: 60, ..quick(BaselineKind::Coop) },
        ExperimentConfig { context_length: 8, ..quick(BaselineKind::Coop) },
        ExperimentConfig { ms_layers: Some(9), ..quick(BaselineKind::Applenet) },
        ExperimentConfig { temperature: 0.0, ..quick(BaselineKind::Applenet) },
    ] {
        let err = run_experiment(&cfg, &cache).unwrap_err();
        assert!(err.is_contract(), "{err}");
    }
}
