//! One forward and loss path shared by every method.
//!
//! Vision features are frozen, so they are extracted once per image into
//! [`SampleFeatures`]; only prompt-side computation runs on the tape.

use serde::{Deserialize, Serialize};

use crate::baselines::{BaselineKind, ErmProbe, MetaNet};
use crate::datagen::DomainBatch;
use crate::encoders::{Backbone, TextEncoder, VisionEncoder};
use crate::error::{contract, Error, Result};
use crate::losses::{cosine_logits, cosine_logits_normalized, cross_entropy, crp_loss, total_loss, argmax, LossBundle};
use crate::promptcore::{
    fuse_content_style, multiscale_features, MANUAL_CONTEXT, style_statistics_of, InitMode, InjectionParams,
    InjectionShape, LinearInit, PromptState, ClassPosition,
};
use crate::rng;
use crate::tensor::{Bindings, Gradients, Parameters, Tape, Tensor, Var};

/// Frozen vision outputs of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleFeatures {
    pub final_feature: Tensor,
    /// GAP of every stage, shallow to deep.
    pub layer_gaps: Vec<Tensor>,
}

impl SampleFeatures {
    pub fn extract(vision: &VisionEncoder, image: &Tensor) -> Result<Self> {
        let out = vision.forward(image)?;
        let mut tape = Tape::new();
        let layer_gaps = out
            .maps
            .iter()
            .map(|m| {
                let v = tape.constant(m);
                let g = multiscale_features(&mut tape, &[v])?;
                Ok(tape.tensor(g))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            final_feature: out.feature,
            layer_gaps,
        })
    }

    /// GAP vectors of the deepest `layers` stages, concatenated shallow to deep.
    pub fn content(&self, layers: usize) -> Result<Tensor> {
        let total = self.layer_gaps.len();
        if layers == 0 || layers > total {
            return contract(format!("multi-scale layer count {layers} outside 1..={total}"));
        }
        let data = self.layer_gaps[total - layers..]
            .iter()
            .flat_map(|g| g.data().iter().copied())
            .collect();
        Tensor::vector(data)
    }
}

/// Features of a single-domain batch with global class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBatch {
    pub domain: usize,
    pub samples: Vec<SampleFeatures>,
    pub labels: Vec<usize>,
}

impl FeatureBatch {
    pub fn extract(vision: &VisionEncoder, batch: &DomainBatch) -> Result<Self> {
        Ok(Self {
            domain: batch.domain,
            samples: batch
                .images
                .iter()
                .map(|im| SampleFeatures::extract(vision, im))
                .collect::<Result<Vec<_>>>()?,
            labels: batch.labels.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            domain: self.domain,
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Style statistic of the batch.
    pub fn style(&self) -> Result<Tensor> {
        style_of(&self.samples)
    }
}

fn style_of(samples: &[SampleFeatures]) -> Result<Tensor> {
    let finals: Vec<Tensor> = samples.iter().map(|s| s.final_feature.clone()).collect();
    style_statistics_of(&finals)
}

/// What the injection block reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InjectionInput {
    /// Multi-scale content and batch style.
    #[default]
    ContentAndStyle,
    Content,
    Style,
}

/// Tokens the redundancy penalty acts on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CrpTarget {
    /// Context plus visual token, per image.
    #[default]
    PromptTokens,
    ContextOnly,
}

/// Source of the style statistic when predicting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InferenceStyle {
    /// Mean over the images being predicted; the stored training
    /// statistic for a single image.
    #[default]
    EvalBatch,
    /// Always the stored training statistic.
    Source,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnerConfig {
    pub method: BaselineKind,
    pub context_len: usize,
    pub position: ClassPosition,
    pub init: InitMode,
    pub attention_modules: usize,
    pub reduction: usize,
    /// Deepest stages feeding the content feature; `None` uses all.
    pub ms_layers: Option<usize>,
    pub injection_input: InjectionInput,
    pub temperature: f64,
    pub crp_weight: f64,
    pub crp_target: CrpTarget,
    pub inference_style: InferenceStyle,
    /// Init of the projector heads and the meta-network output layer.
    pub output_init: LinearInit,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            method: BaselineKind::Applenet,
            context_len: 4,
            position: ClassPosition::End,
            init: InitMode::Manual,
            attention_modules: 2,
            reduction: 4,
            ms_layers: None,
            injection_input: InjectionInput::ContentAndStyle,
            temperature: crate::losses::DEFAULT_TEMPERATURE,
            crp_weight: crate::losses::DEFAULT_CRP_WEIGHT,
            crp_target: CrpTarget::PromptTokens,
            inference_style: InferenceStyle::EvalBatch,
            output_init: LinearInit::Zeros,
        }
    }
}

/// Projector heads start at this gain when the context starts at zero, so
/// that the prompt tokens are never all zero.
pub const ZERO_CONTEXT_HEAD_GAIN: f64 = 0.01;

/// Learnable state of one method plus the frozen text side it needs.
#[derive(Debug, Clone)]
pub struct PromptLearner {
    config: LearnerConfig,
    text: TextEncoder,
    params: Parameters,
    prompt: Option<PromptState>,
    manual: Vec<Tensor>,
    injection: Option<InjectionParams>,
    meta: Option<MetaNet>,
    probe: Option<ErmProbe>,
    train_classes: Vec<usize>,
    class_tokens: Vec<Tensor>,
    ms_layers: usize,
    train_style: Option<Tensor>,
}

/// Scalar objective terms on the tape.
#[derive(Debug, Clone, Copy)]
pub struct Objective {
    pub total: Var,
    pub ce: Var,
    pub crp: Var,
}

impl PromptLearner {
    /// `train_classes` are global class ids the method is trained on; the
    /// linear probe can only score these.
    pub fn new(
        config: LearnerConfig,
        backbone: &Backbone,
        class_names: &[String],
        train_classes: &[usize],
        seed: u64,
    ) -> Result<Self> {
        let layers = backbone.vision.layers();
        let ms_layers = config.ms_layers.unwrap_or(layers);
        if ms_layers == 0 || ms_layers > layers {
            return contract(format!("ms_layers {ms_layers} outside 1..={layers}"));
        }
        if !(config.temperature > 0.0 && config.temperature.is_finite()) {
            return contract("temperature must be positive");
        }
        if !(config.crp_weight >= 0.0 && config.crp_weight.is_finite()) {
            return contract("redundancy weight must be finite and >= 0");
        }
        if config.reduction == 0 {
            return contract("reduction ratio must be at least 1");
        }
        if train_classes.is_empty() || train_classes.iter().any(|&c| c >= class_names.len()) {
            return contract("training classes must be valid, nonempty class ids");
        }
        let text = backbone.text.clone();
        let d = text.dim();
        let class_tokens = class_names
            .iter()
            .map(|n| Ok(text.class_embedding(n)?.embedding))
            .collect::<Result<Vec<_>>>()?;
        let manual = text.embed_words(MANUAL_CONTEXT)?;
        let mut r = rng::stream(seed, "learner-init");
        let mut params = Parameters::new();
        let method = config.method;

        let prompt = if method.has_context() {
            Some(PromptState::new(&mut params, config.context_len, config.position, config.init, &text, &mut r)?)
        } else {
            None
        };
        let content_dim: usize = backbone.config.layer_channels[layers - ms_layers..].iter().sum();
        let meta = match method {
            BaselineKind::Cocoop => Some(MetaNet::new(&mut params, d, d, config.output_init, &mut r)?),
            BaselineKind::MsCocoop => Some(MetaNet::new(&mut params, content_dim, d, config.output_init, &mut r)?),
            _ => None,
        };
        let injection = if method == BaselineKind::Applenet {
            let dim = match config.injection_input {
                InjectionInput::ContentAndStyle => content_dim + d,
                InjectionInput::Content => content_dim,
                InjectionInput::Style => d,
            };
            let head_init = match (config.init, config.output_init) {
                (InitMode::Zeros, LinearInit::Zeros) => LinearInit::Gaussian(ZERO_CONTEXT_HEAD_GAIN),
                (_, init) => init,
            };
            let shape = InjectionShape {
                dim,
                token_dim: d,
                modules: config.attention_modules,
                heads: config.context_len,
                reduction: config.reduction,
            };
            Some(InjectionParams::new(&mut params, shape, head_init, &mut r)?)
        } else {
            None
        };
        let probe = if method == BaselineKind::ErmLinear {
            Some(ErmProbe::new(&mut params, d, train_classes.len(), &mut r)?)
        } else {
            None
        };
        Ok(Self {
            config,
            text,
            params,
            prompt,
            manual,
            injection,
            meta,
            probe,
            train_classes: train_classes.to_vec(),
            class_tokens,
            ms_layers,
            train_style: None,
        })
    }

    pub fn config(&self) -> &LearnerConfig {
        &self.config
    }

    pub fn params(&self) -> &Parameters {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Parameters {
        &mut self.params
    }

    pub fn injection(&self) -> Option<&InjectionParams> {
        self.injection.as_ref()
    }

    pub fn prompt(&self) -> Option<&PromptState> {
        self.prompt.as_ref()
    }

    pub fn class_token(&self, class: usize) -> &Tensor {
        &self.class_tokens[class]
    }

    /// Stored style used when an inference batch has a single image.
    pub fn set_training_style(&mut self, style: Tensor) {
        self.train_style = Some(style);
    }

    pub fn training_style(&self) -> Option<&Tensor> {
        self.train_style.as_ref()
    }

    fn uses_style(&self) -> bool {
        self.config.method == BaselineKind::Applenet && self.config.injection_input != InjectionInput::Content
    }

    /// Whether this method can score `classes`.
    pub fn can_score(&self, classes: &[usize]) -> bool {
        if self.config.method.uses_prompts() {
            classes.iter().all(|&c| c < self.class_tokens.len())
        } else {
            classes == self.train_classes.as_slice()
        }
    }

    fn class_index(&self) -> usize {
        match &self.prompt {
            Some(p) => p.position.index(p.len()),
            None => self.manual.len(),
        }
    }

    fn tokens_of(&self, classes: &[usize]) -> Result<Vec<Tensor>> {
        classes
            .iter()
            .map(|&c| {
                self.class_tokens
                    .get(c)
                    .cloned()
                    .ok_or_else(|| Error::Contract(format!("unknown class id {c}")))
            })
            .collect()
    }

    /// Context tokens for one image: `c_m + v_m(x)` or the method's analogue,
    /// plus the tokens the redundancy penalty should see.
    fn image_context(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        sample: &SampleFeatures,
        style: Option<&Tensor>,
    ) -> Result<Vec<Var>> {
        let ctx = match &self.prompt {
            Some(p) => p.vars(b),
            None => return Ok(self.manual.iter().map(|t| tape.constant(t)).collect()),
        };
        match self.config.method {
            BaselineKind::Cocoop | BaselineKind::MsCocoop => {
                let meta = self.meta.as_ref().expect("meta-network present");
                let input = if self.config.method == BaselineKind::Cocoop {
                    sample.final_feature.clone()
                } else {
                    sample.content(self.ms_layers)?
                };
                let x = tape.constant(&input);
                let shift = meta.forward(tape, b, x)?;
                ctx.iter().map(|&c| tape.add(c, shift)).collect()
            }
            BaselineKind::Applenet => {
                let inj = self.injection.as_ref().expect("injection block present");
                let fused = match self.config.injection_input {
                    InjectionInput::ContentAndStyle => {
                        let content = tape.constant(&sample.content(self.ms_layers)?);
                        let s = tape.constant(style.ok_or_else(|| Error::Contract("missing style statistic".into()))?);
                        fuse_content_style(tape, content, s)?
                    }
                    InjectionInput::Content => tape.constant(&sample.content(self.ms_layers)?),
                    InjectionInput::Style => {
                        tape.constant(style.ok_or_else(|| Error::Contract("missing style statistic".into()))?)
                    }
                };
                let o = inj.forward(tape, b, fused)?;
                let v = inj.visual_tokens(tape, b, o)?;
                ctx.iter().zip(&v).map(|(&c, &u)| tape.add(c, u)).collect()
            }
            _ => Ok(ctx),
        }
    }

    fn image_conditioned(&self) -> bool {
        matches!(
            self.config.method,
            BaselineKind::Cocoop | BaselineKind::MsCocoop | BaselineKind::Applenet
        )
    }

    /// Per-sample logits over `classes` and the mean redundancy penalty.
    pub fn batch_logits(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        samples: &[SampleFeatures],
        style: Option<&Tensor>,
        classes: &[usize],
    ) -> Result<(Vec<Var>, Var)> {
        if samples.is_empty() {
            return contract("empty batch");
        }
        if classes.is_empty() {
            return contract("empty class set");
        }
        let tau = self.config.temperature;
        if let Some(probe) = &self.probe {
            if classes != self.train_classes.as_slice() {
                return contract("linear probe cannot score classes outside its training set");
            }
            let logits = samples
                .iter()
                .map(|s| {
                    let x = tape.constant(&s.final_feature);
                    probe.logits(tape, b, x)
                })
                .collect::<Result<Vec<_>>>()?;
            let zero = tape.constant(&Tensor::scalar(0.0));
            return Ok((logits, zero));
        }
        let tokens = self.tokens_of(classes)?;
        let index = self.class_index();
        let applenet = self.config.method == BaselineKind::Applenet;
        let mut logits = Vec::with_capacity(samples.len());
        let mut crps = Vec::new();
        if self.image_conditioned() {
            for s in samples {
                let ctx = self.image_context(tape, b, s, style)?;
                if applenet && self.config.crp_target == CrpTarget::PromptTokens {
                    crps.push(crp_loss(tape, &ctx)?);
                }
                let feats = self.text.forward_classes(tape, &ctx, &tokens, index)?;
                let img = tape.constant(&s.final_feature);
                logits.push(cosine_logits(tape, img, &feats, tau)?);
            }
        } else {
            let ctx = self.image_context(tape, b, &samples[0], style)?;
            let feats = self.text.forward_classes(tape, &ctx, &tokens, index)?;
            let unit = feats
                .iter()
                .map(|&f| tape.normalize_l2(f))
                .collect::<Result<Vec<_>>>()?;
            for s in samples {
                let img = tape.constant(&s.final_feature);
                logits.push(cosine_logits_normalized(tape, img, &unit, tau)?);
            }
        }
        let crp = if applenet && self.config.crp_target == CrpTarget::ContextOnly {
            let ctx = self.prompt.as_ref().expect("context present").vars(b);
            crp_loss(tape, &ctx)?
        } else if !crps.is_empty() {
            let all = tape.concat(&crps)?;
            tape.mean(all)
        } else {
            tape.constant(&Tensor::scalar(0.0))
        };
        Ok((logits, crp))
    }

    fn local_labels(&self, labels: &[usize], classes: &[usize]) -> Result<Vec<usize>> {
        labels
            .iter()
            .map(|y| {
                classes
                    .iter()
                    .position(|c| c == y)
                    .ok_or_else(|| Error::Contract(format!("label {y} is not among the candidate classes")))
            })
            .collect()
    }

    /// `ce + lambda * crp` on one domain-pure batch. The style statistic is
    /// the batch mean of final features.
    pub fn objective(&self, tape: &mut Tape, b: &Bindings, batch: &FeatureBatch, classes: &[usize]) -> Result<Objective> {
        let style = if self.uses_style() { Some(batch.style()?) } else { None };
        let (logits, crp) = self.batch_logits(tape, b, &batch.samples, style.as_ref(), classes)?;
        let labels = self.local_labels(&batch.labels, classes)?;
        let ce = cross_entropy(tape, &logits, &labels)?;
        let lambda = if self.config.method == BaselineKind::Applenet { self.config.crp_weight } else { 0.0 };
        let total = total_loss(tape, ce, crp, lambda)?;
        Ok(Objective { total, ce, crp })
    }

    /// Mean objective over several domain batches, each with its own style,
    /// evaluated with `params` in place of the learner's own.
    pub fn evaluate_objective(
        &self,
        params: &Parameters,
        batches: &[FeatureBatch],
        classes: &[usize],
        with_gradients: bool,
    ) -> Result<(LossBundle, Option<Gradients>)> {
        if batches.is_empty() {
            return contract("objective over zero batches");
        }
        let mut tape = Tape::new();
        let b = tape.bind(params);
        let mut totals = Vec::with_capacity(batches.len());
        let mut ces = Vec::with_capacity(batches.len());
        let mut crps = Vec::with_capacity(batches.len());
        for batch in batches {
            let o = self.objective(&mut tape, &b, batch, classes)?;
            totals.push(o.total);
            ces.push(o.ce);
            crps.push(o.crp);
        }
        let mut mean_of = |vs: &[Var]| -> Result<Var> {
            if vs.len() == 1 {
                return Ok(vs[0]);
            }
            let c = tape.concat(vs)?;
            Ok(tape.mean(c))
        };
        let total = mean_of(&totals)?;
        let ce = mean_of(&ces)?;
        let crp = mean_of(&crps)?;
        let (ce_v, crp_v, total_v) = (tape.scalar(ce)?, tape.scalar(crp)?, tape.scalar(total)?);
        if !total_v.is_finite() {
            return Err(Error::Divergence(format!("non-finite loss (ce={ce_v}, crp={crp_v})")));
        }
        let lambda = if self.config.method == BaselineKind::Applenet { self.config.crp_weight } else { 0.0 };
        let mut bundle = LossBundle::new(ce_v, crp_v, lambda)?;
        // Keep the value actually on the tape, which is what gradients describe.
        bundle.total = total_v;
        let grads = if with_gradients { Some(tape.backward(total)?) } else { None };
        Ok((bundle, grads))
    }

    /// Loss and gradients of one training batch at the current parameters.
    pub fn gradients(&self, batch: &FeatureBatch, classes: &[usize]) -> Result<(LossBundle, Gradients)> {
        let (bundle, grads) = self.evaluate_objective(&self.params, std::slice::from_ref(batch), classes, true)?;
        Ok((bundle, grads.expect("requested")))
    }

    /// Predicted global class id per sample. The style statistic follows
    /// [`InferenceStyle`].
    pub fn predict(&self, samples: &[SampleFeatures], classes: &[usize]) -> Result<Vec<usize>> {
        if classes.is_empty() {
            return contract("prediction over an empty class set");
        }
        if samples.is_empty() {
            return contract("prediction over an empty evaluation set");
        }
        let style = if self.uses_style() {
            Some(if samples.len() > 1 && self.config.inference_style == InferenceStyle::EvalBatch {
                style_of(samples)?
            } else {
                self.train_style
                    .clone()
                    .ok_or_else(|| Error::Contract("inference needs a stored training style".into()))?
            })
        } else {
            None
        };
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(32) {
            let mut tape = Tape::new();
            let b = tape.bind(&self.params);
            let (logits, _) = self.batch_logits(&mut tape, &b, chunk, style.as_ref(), classes)?;
            for l in logits {
                let k = argmax(tape.value(l)).expect("nonempty class set");
                out.push(classes[k]);
            }
        }
        Ok(out)
    }

    /// Text features of every class for one image (before normalization).
    pub fn class_features(&self, sample: &SampleFeatures, style: Option<&Tensor>, classes: &[usize]) -> Result<Vec<Tensor>> {
        if !self.config.method.uses_prompts() {
            return contract("the linear probe has no class prompts");
        }
        let mut tape = Tape::new();
        let b = tape.bind(&self.params);
        let ctx = self.image_context(&mut tape, &b, sample, style)?;
        let tokens = self.tokens_of(classes)?;
        let feats = self.text.forward_classes(&mut tape, &ctx, &tokens, self.class_index())?;
        Ok(feats.into_iter().map(|f| tape.tensor(f)).collect())
    }

    /// Per-sample context tokens after conditioning (for inspection).
    pub fn context_tokens(&self, sample: &SampleFeatures, style: Option<&Tensor>) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let b = tape.bind(&self.params);
        let ctx = self.image_context(&mut tape, &b, sample, style)?;
        Ok(ctx.into_iter().map(|v| tape.tensor(v)).collect())
    }
}
