//! Training loop and protocol evaluation.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};

use applenet_core::baselines::BaselineKind;
use applenet_core::datagen::{build_split, pretrained_backbone, Datasets, PatternWorld, ProtocolSplit};
use applenet_core::encoders::Backbone;
use applenet_core::model::{FeatureBatch, PromptLearner};
use applenet_core::rng;
use applenet_core::tensor::Parameters;
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::metrics::{accuracy, base_new_harmonic, MetricsRecord, SeedMetrics};
use crate::optim::{lr_schedule, sgd_step};

/// Frozen encoders and the class-appearance rule they were aligned on.
#[derive(Debug)]
pub struct Prepared {
    pub backbone: Backbone,
    pub world: PatternWorld,
}

/// Builds each distinct backbone once and shares it between experiments.
#[derive(Debug, Default)]
pub struct BackboneCache {
    entries: Mutex<HashMap<String, Arc<Prepared>>>,
}

impl BackboneCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, cfg: &ExperimentConfig) -> Result<Arc<Prepared>> {
        let key = serde_json::to_string(&(&cfg.encoder, &cfg.pretrain))?;
        if let Some(p) = self.entries.lock().expect("cache lock").get(&key) {
            return Ok(p.clone());
        }
        let (backbone, world) = pretrained_backbone(&cfg.encoder, &cfg.pretrain)?;
        let prepared = Arc::new(Prepared { backbone, world });
        self.entries
            .lock()
            .expect("cache lock")
            .entry(key)
            .or_insert_with(|| prepared.clone());
        Ok(prepared)
    }
}

/// Data of one seed with frozen features already extracted.
#[derive(Debug, Clone)]
pub struct SeedData {
    pub split: ProtocolSplit,
    pub datasets: Datasets,
    pub train: FeatureBatch,
    pub evals: Vec<(String, Vec<usize>, FeatureBatch)>,
}

pub fn prepare_seed(cfg: &ExperimentConfig, prepared: &Prepared, seed: u64) -> Result<SeedData> {
    let (split, datasets) = build_split(
        cfg.protocol,
        &cfg.data,
        cfg.shots,
        seed,
        &prepared.world,
        &prepared.backbone.text,
    )?;
    let vision = &prepared.backbone.vision;
    let train = FeatureBatch::extract(vision, &datasets.train)?;
    let evals = datasets
        .evals
        .iter()
        .map(|e| Ok((e.spec.name.clone(), e.spec.classes.clone(), FeatureBatch::extract(vision, &e.data)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(SeedData { split, datasets, train, evals })
}

/// Outcome of training and evaluating one seed.
#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub metrics: SeedMetrics,
    pub learner: PromptLearner,
    pub initial_params: Parameters,
}

pub fn train_seed(cfg: &ExperimentConfig, prepared: &Prepared, data: &SeedData, seed: u64) -> Result<SeedOutcome> {
    let classes = &data.split.seen;
    let mut learner = PromptLearner::new(
        cfg.learner_config(),
        &prepared.backbone,
        &data.split.class_names,
        classes,
        rng::derive_seed(seed, "learner"),
    )?;
    learner.set_training_style(data.train.style()?);
    let initial_params = learner.params().clone();

    let mut final_loss = None;
    if cfg.method != BaselineKind::ZeroShot {
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        for epoch in 1..=cfg.epochs {
            let lr = lr_schedule(epoch, cfg.learning_rate, cfg.warmup_rate, cfg.warmup_epochs)?;
            order.shuffle(&mut rng::stream(seed, &format!("epoch:{epoch}")));
            for chunk in order.chunks(cfg.batch_size) {
                let batch = data.train.subset(chunk);
                let (bundle, grads) = learner.gradients(&batch, classes)?;
                sgd_step(learner.params_mut(), &grads, lr)?;
                final_loss = Some(bundle.total);
            }
        }
    }

    let mut accuracies = BTreeMap::new();
    for (name, eval_classes, batch) in &data.evals {
        let acc = if learner.can_score(eval_classes) {
            let pred = learner.predict(&batch.samples, eval_classes)?;
            Some(accuracy(&pred, &batch.labels)?)
        } else {
            None
        };
        accuracies.insert(name.clone(), acc);
    }
    let harmonic = base_new_harmonic(&accuracies);
    Ok(SeedOutcome {
        metrics: SeedMetrics { seed, accuracies, harmonic, final_loss },
        learner,
        initial_params,
    })
}

/// Trains and evaluates every seed of `cfg` (seeds run in parallel).
pub fn run_experiment(cfg: &ExperimentConfig, cache: &BackboneCache) -> Result<MetricsRecord> {
    cfg.validate()?;
    let prepared = cache.get(cfg)?;
    let per_seed = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let data = prepare_seed(cfg, &prepared, seed)?;
            Ok(train_seed(cfg, &prepared, &data, seed)?.metrics)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsRecord::from_seeds(
        cfg.hash(),
        cfg.comparison_hash(),
        cfg.method,
        cfg.protocol,
        per_seed,
    )?)
}
