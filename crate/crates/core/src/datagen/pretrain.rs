use serde::{Deserialize, Serialize};

use super::world::{generate_sample, DomainSpec, PatternWorld};
use crate::encoders::{Backbone, EncoderConfig};
use crate::error::Result;
use crate::promptcore::MANUAL_CONTEXT;
use crate::rng;
use crate::tensor::Tensor;

/// How the frozen vision head is aligned with the text space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    /// Number of synthetic concept names (disjoint from scene class names).
    pub concepts: usize,
    pub samples_per_concept: usize,
    pub noise: f64,
    pub ridge: f64,
    /// Shift magnitude of the alignment images' style relative to the
    /// native style of the task domains.
    pub style_shift: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            concepts: 384,
            samples_per_concept: 2,
            noise: 0.1,
            ridge: 1.0,
            style_shift: 0.5,
        }
    }
}

/// Builds both encoders and fits the vision head so that images of a concept
/// land near the text feature of `"a photo of a <concept>"`.
pub fn pretrained_backbone(enc: &EncoderConfig, pre: &PretrainConfig) -> Result<(Backbone, PatternWorld)> {
    let mut backbone = Backbone::new(enc)?;
    let shape = [enc.width, enc.height, enc.in_channels];
    let world = PatternWorld::new(rng::derive_seed(enc.seed, "world"), shape, enc.embed_dim);
    let style = DomainSpec::new(
        rng::derive_seed(enc.seed, "pretrain-style"),
        0,
        enc.in_channels,
        pre.style_shift,
        pre.noise,
    );
    let context = backbone.text.embed_words(MANUAL_CONTEXT)?;
    let mut r = rng::stream(enc.seed, "pretrain-samples");

    let mut inputs = Vec::with_capacity(pre.concepts * pre.samples_per_concept);
    let mut targets = Vec::with_capacity(inputs.capacity());
    for i in 0..pre.concepts {
        let name = format!("concept{i}");
        let proto = world.prototype(&name, &backbone.text)?;
        let mut tokens: Vec<Tensor> = context.clone();
        tokens.push(backbone.text.class_embedding(&name)?.embedding);
        let t = backbone.text.encode(&tokens, context.len())?;
        let norm = t.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let target: Vec<f64> = t.data().iter().map(|v| v / norm).collect();
        for _ in 0..pre.samples_per_concept {
            let img = generate_sample(&proto, &style, shape, &mut r);
            inputs.push(backbone.vision.head_input(&img)?);
            targets.push(target.clone());
        }
    }
    backbone.fit_vision_head(&inputs, &targets, pre.ridge)?;
    Ok((backbone, world))
}
