//! Frozen stand-ins for a contrastive vision/text backbone.
//!
//! The vision encoder is a stack of 3x3 patch-linear + ReLU stages that keep
//! the spatial grid, so every layer has a meaningful global average. Its
//! output head reads an average-pooled grid of the last stage. The text
//! encoder embeds words with a seeded hash, modulates each token by a fixed
//! per-position vector, mean-pools, and applies one linear + tanh mixer.
//!
//! Nothing in here is ever a trainable parameter; gradients only flow
//! *through* the text encoder into the token embeddings it is given.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::rng;
use crate::tensor::{Tape, Tensor, Var};

const PATCH: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub in_channels: usize,
    /// Channel count of each vision stage; its length is the layer count.
    pub layer_channels: Vec<usize>,
    /// Shared embedding dimension of both encoders.
    pub embed_dim: usize,
    /// Side of the pooled grid read by the vision head.
    pub head_grid: usize,
    /// Spread of the per-position token modulation in the text encoder.
    pub position_spread: f64,
    /// Standard deviation of word embeddings.
    pub word_scale: f64,
    /// Gain of the text mixer weights.
    pub text_gain: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            width: 16,
            height: 16,
            in_channels: 3,
            layer_channels: vec![8, 8, 8],
            embed_dim: 32,
            head_grid: 4,
            position_spread: 0.5,
            word_scale: 0.25,
            text_gain: 4.0,
        }
    }
}

impl EncoderConfig {
    pub fn layers(&self) -> usize {
        self.layer_channels.len()
    }

    /// Length of the concatenated per-layer GAP vector.
    pub fn content_dim(&self) -> usize {
        self.layer_channels.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_channels.is_empty() || self.layer_channels.contains(&0) {
            return contract("vision encoder needs at least one stage with nonzero channels");
        }
        if self.width == 0 || self.height == 0 || self.in_channels == 0 || self.embed_dim == 0 {
            return contract("encoder dimensions must be positive");
        }
        if !(self.word_scale > 0.0 && self.word_scale.is_finite()) {
            return contract("word_scale must be positive");
        }
        if self.head_grid == 0 || !self.width.is_multiple_of(self.head_grid) || !self.height.is_multiple_of(self.head_grid)
        {
            return contract("head_grid must divide the image width and height");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Stage {
    in_c: usize,
    out_c: usize,
    /// `[out_c x (3*3*in_c)]`
    weight: Tensor,
    bias: Tensor,
}

/// Output of one vision pass.
#[derive(Debug, Clone, PartialEq)]
pub struct VisionOutput {
    /// `W x H x C_l` map of every stage, shallow to deep.
    pub maps: Vec<Tensor>,
    /// Final joint-space feature.
    pub feature: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisionEncoder {
    width: usize,
    height: usize,
    in_channels: usize,
    head_grid: usize,
    stages: Vec<Stage>,
    head_weight: Tensor,
    head_bias: Tensor,
}

impl VisionEncoder {
    pub fn new(cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::stream(cfg.seed, "vision");
        let mut in_c = cfg.in_channels;
        let mut stages = Vec::with_capacity(cfg.layers());
        for &out_c in &cfg.layer_channels {
            let fan_in = PATCH * PATCH * in_c;
            let std = (2.0 / fan_in as f64).sqrt();
            stages.push(Stage {
                in_c,
                out_c,
                weight: Tensor::randn(&[out_c, fan_in], std, &mut r),
                bias: Tensor::zeros(&[out_c]),
            });
            in_c = out_c;
        }
        let head_in = cfg.head_grid * cfg.head_grid * in_c;
        let head_weight = Tensor::randn(&[cfg.embed_dim, head_in], 1.0 / (head_in as f64).sqrt(), &mut r);
        Ok(Self {
            width: cfg.width,
            height: cfg.height,
            in_channels: cfg.in_channels,
            head_grid: cfg.head_grid,
            stages,
            head_weight,
            head_bias: Tensor::zeros(&[cfg.embed_dim]),
        })
    }

    pub fn layers(&self) -> usize {
        self.stages.len()
    }

    pub fn embed_dim(&self) -> usize {
        self.head_bias.len()
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.width, self.height, self.in_channels]
    }

    /// Declared shape of stage `l` (0-based).
    pub fn layer_shape(&self, l: usize) -> [usize; 3] {
        [self.width, self.height, self.stages[l].out_c]
    }

    pub fn head_input_dim(&self) -> usize {
        self.head_weight.shape()[1]
    }

    /// Sets every stage bias to `value`.
    pub fn set_stage_biases(&mut self, value: f64) {
        for s in &mut self.stages {
            s.bias = Tensor::full(&[s.out_c], value);
        }
    }

    pub fn set_head(&mut self, weight: Tensor, bias: Tensor) -> Result<()> {
        if weight.shape() != self.head_weight.shape() || bias.shape() != self.head_bias.shape() {
            return Err(Error::Dimension {
                op: "set_head",
                lhs: self.head_weight.shape().to_vec(),
                rhs: weight.shape().to_vec(),
            });
        }
        self.head_weight = weight;
        self.head_bias = bias;
        Ok(())
    }

    /// Runs every stage on a `W x H x C_in` image.
    pub fn forward(&self, image: &Tensor) -> Result<VisionOutput> {
        let maps = self.stage_maps(image)?;
        let pooled = self.head_input_from(maps.last().expect("at least one stage"));
        let feature = self.apply_head(&pooled);
        Ok(VisionOutput { maps, feature })
    }

    /// Input of the output head for an image: the pooled last-stage grid.
    pub fn head_input(&self, image: &Tensor) -> Result<Vec<f64>> {
        let maps = self.stage_maps(image)?;
        Ok(self.head_input_from(maps.last().expect("at least one stage")))
    }

    fn stage_maps(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        let expected = self.input_shape();
        if image.shape() != expected {
            return Err(Error::Dimension {
                op: "vision_forward",
                lhs: expected.to_vec(),
                rhs: image.shape().to_vec(),
            });
        }
        let mut maps = Vec::with_capacity(self.stages.len());
        let mut current = image.data().to_vec();
        for stage in &self.stages {
            current = self.conv_relu(stage, &current);
            maps.push(Tensor::new(&[self.width, self.height, stage.out_c], current.clone())?);
        }
        Ok(maps)
    }

    fn conv_relu(&self, stage: &Stage, input: &[f64]) -> Vec<f64> {
        let (w, h) = (self.width as isize, self.height as isize);
        let (in_c, out_c) = (stage.in_c, stage.out_c);
        let fan_in = PATCH * PATCH * in_c;
        let weight = stage.weight.data();
        let bias = stage.bias.data();
        let mut out = vec![0.0; self.width * self.height * out_c];
        let mut patch = vec![0.0; fan_in];
        for x in 0..w {
            for y in 0..h {
                patch.iter_mut().for_each(|v| *v = 0.0);
                for dx in -1..=1isize {
                    for dy in -1..=1isize {
                        let (px, py) = (x + dx, y + dy);
                        if px < 0 || py < 0 || px >= w || py >= h {
                            continue;
                        }
                        let src = ((px * h + py) as usize) * in_c;
                        let dst = (((dx + 1) * 3 + (dy + 1)) as usize) * in_c;
                        patch[dst..dst + in_c].copy_from_slice(&input[src..src + in_c]);
                    }
                }
                let base = ((x * h + y) as usize) * out_c;
                for o in 0..out_c {
                    let row = &weight[o * fan_in..(o + 1) * fan_in];
                    let z: f64 = bias[o] + row.iter().zip(&patch).map(|(a, b)| a * b).sum::<f64>();
                    out[base + o] = z.max(0.0);
                }
            }
        }
        out
    }

    fn head_input_from(&self, last: &Tensor) -> Vec<f64> {
        let c = last.shape()[2];
        let g = self.head_grid;
        let (cw, ch) = (self.width / g, self.height / g);
        let data = last.data();
        let mut pooled = vec![0.0; g * g * c];
        for x in 0..self.width {
            for y in 0..self.height {
                let cell = (x / cw) * g + (y / ch);
                let src = (x * self.height + y) * c;
                for k in 0..c {
                    pooled[cell * c + k] += data[src + k];
                }
            }
        }
        let inv = 1.0 / (cw * ch) as f64;
        pooled.iter_mut().for_each(|v| *v *= inv);
        pooled
    }

    fn apply_head(&self, pooled: &[f64]) -> Tensor {
        let n = pooled.len();
        let w = self.head_weight.data();
        let out = self
            .head_bias
            .data()
            .iter()
            .enumerate()
            .map(|(i, b)| b + w[i * n..(i + 1) * n].iter().zip(pooled).map(|(a, x)| a * x).sum::<f64>())
            .collect();
        Tensor::vector(out).expect("nonempty head")
    }

    /// Bit patterns of every weight, for frozenness checks.
    pub fn weight_bits(&self) -> Vec<u64> {
        let mut bits = Vec::new();
        for s in &self.stages {
            bits.extend(s.weight.bits());
            bits.extend(s.bias.bits());
        }
        bits.extend(self.head_weight.bits());
        bits.extend(self.head_bias.bits());
        bits
    }

    pub fn all_frozen(&self) -> bool {
        self.stages
            .iter()
            .all(|s| !s.weight.requires_grad() && !s.bias.requires_grad())
            && !self.head_weight.requires_grad()
            && !self.head_bias.requires_grad()
    }
}

/// Word embedding of a class name, used as the class token.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassEmbedding {
    pub name: String,
    pub embedding: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoder {
    seed: u64,
    dim: usize,
    word_scale: f64,
    mixer_weight: Tensor,
    mixer_bias: Tensor,
    modulations: Vec<Tensor>,
}

/// Longest token sequence the text encoder accepts.
pub const MAX_TOKENS: usize = 64;

impl TextEncoder {
    pub fn new(cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let mut r = rng::stream(cfg.seed, "text-mixer");
        let mixer_weight = Tensor::randn(&[d, d], cfg.text_gain / (d as f64).sqrt(), &mut r);
        let mixer_bias = Tensor::randn(&[d], 0.1, &mut r);
        let modulations = (0..MAX_TOKENS)
            .map(|i| {
                let mut r = rng::stream(cfg.seed, &format!("position:{i}"));
                let noise = Tensor::randn(&[d], cfg.position_spread, &mut r);
                Tensor::vector(noise.data().iter().map(|z| 1.0 + z).collect()).expect("nonempty")
            })
            .collect();
        Ok(Self {
            seed: cfg.seed,
            dim: d,
            word_scale: cfg.word_scale,
            mixer_weight,
            mixer_bias,
            modulations,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Seeded-hash embedding of one word.
    pub fn embed_word(&self, word: &str) -> Tensor {
        let mut r = rng::stream(self.seed, &format!("word:{word}"));
        Tensor::randn(&[self.dim], self.word_scale, &mut r)
    }

    pub fn word_scale(&self) -> f64 {
        self.word_scale
    }

    /// One embedding per whitespace-separated word.
    pub fn embed_words(&self, phrase: &str) -> Result<Vec<Tensor>> {
        let words: Vec<&str> = phrase.split_whitespace().collect();
        if words.is_empty() {
            return contract("cannot embed an empty phrase");
        }
        Ok(words.into_iter().map(|w| self.embed_word(w)).collect())
    }

    /// Class token: mean of the word embeddings of the class name.
    pub fn class_embedding(&self, name: &str) -> Result<ClassEmbedding> {
        let words = self.embed_words(name)?;
        let mut acc = vec![0.0; self.dim];
        for w in &words {
            acc.iter_mut().zip(w.data()).for_each(|(a, b)| *a += b);
        }
        let inv = 1.0 / words.len() as f64;
        acc.iter_mut().for_each(|a| *a *= inv);
        Ok(ClassEmbedding {
            name: name.to_string(),
            embedding: Tensor::vector(acc)?,
        })
    }

    /// Frozen modulation vector applied to the token at sequence index `i`.
    pub fn position_modulation(&self, i: usize) -> &Tensor {
        &self.modulations[i]
    }

    /// Encodes `context_len + 1` token embeddings into one joint-space vector.
    pub fn forward(&self, tape: &mut Tape, tokens: &[Var], context_len: usize) -> Result<Var> {
        if tokens.len() != context_len + 1 || tokens.len() > MAX_TOKENS {
            return contract(format!(
                "text encoder expects {} tokens (context {} + class), got {}",
                context_len + 1,
                context_len,
                tokens.len()
            ));
        }
        let mut pooled: Option<Var> = None;
        for (i, &tok) in tokens.iter().enumerate() {
            if tape.shape(tok) != [self.dim] {
                return Err(Error::Dimension {
                    op: "text_forward",
                    lhs: vec![self.dim],
                    rhs: tape.shape(tok).to_vec(),
                });
            }
            let m = tape.constant(self.position_modulation(i));
            let t = tape.mul(tok, m)?;
            pooled = Some(match pooled {
                Some(p) => tape.add(p, t)?,
                None => t,
            });
        }
        let pooled = tape.scale(pooled.expect("at least one token"), 1.0 / tokens.len() as f64);
        let w = tape.constant(&self.mixer_weight);
        let b = tape.constant(&self.mixer_bias);
        let z = tape.matvec(w, pooled)?;
        let z = tape.add(z, b)?;
        Ok(tape.tanh(z))
    }

    /// Encodes one prompt per class sharing the same context tokens, with the
    /// class token at sequence index `class_index`.
    ///
    /// Equal to calling [`TextEncoder::forward`] once per class, but the
    /// context contribution is pooled and mixed only once. Class tokens are
    /// constants, so their mixed contribution is computed off the tape.
    pub fn forward_classes(
        &self,
        tape: &mut Tape,
        context: &[Var],
        class_tokens: &[Tensor],
        class_index: usize,
    ) -> Result<Vec<Var>> {
        let n = context.len() + 1;
        if n > MAX_TOKENS || class_index > context.len() {
            return contract(format!(
                "class index {class_index} invalid for {} context tokens",
                context.len()
            ));
        }
        let inv = 1.0 / n as f64;
        let mut pooled: Option<Var> = None;
        for (j, &tok) in context.iter().enumerate() {
            if tape.shape(tok) != [self.dim] {
                return Err(Error::Dimension {
                    op: "text_forward",
                    lhs: vec![self.dim],
                    rhs: tape.shape(tok).to_vec(),
                });
            }
            let pos = if j < class_index { j } else { j + 1 };
            let m = tape.constant(self.position_modulation(pos));
            let t = tape.mul(tok, m)?;
            pooled = Some(match pooled {
                Some(p) => tape.add(p, t)?,
                None => t,
            });
        }
        let z_ctx = match pooled {
            Some(p) => {
                let w = tape.constant(&self.mixer_weight);
                let z = tape.matvec(w, p)?;
                Some(tape.scale(z, inv))
            }
            None => None,
        };
        let m = self.position_modulation(class_index).data();
        let w = self.mixer_weight.data();
        let d = self.dim;
        class_tokens
            .iter()
            .map(|cls| {
                if cls.len() != d {
                    return Err(Error::Dimension {
                        op: "text_forward",
                        lhs: vec![d],
                        rhs: cls.shape().to_vec(),
                    });
                }
                let u: Vec<f64> = cls.data().iter().zip(m).map(|(a, b)| a * b).collect();
                let term: Vec<f64> = (0..d)
                    .map(|r| {
                        let s: f64 = w[r * d..(r + 1) * d].iter().zip(&u).map(|(a, b)| a * b).sum();
                        s * inv + self.mixer_bias.data()[r]
                    })
                    .collect();
                let c = tape.constant_vec(&term);
                let z = match z_ctx {
                    Some(zc) => tape.add(zc, c)?,
                    None => c,
                };
                Ok(tape.tanh(z))
            })
            .collect()
    }

    /// Convenience wrapper: encodes concrete token tensors on a scratch tape.
    pub fn encode(&self, tokens: &[Tensor], context_len: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tokens.iter().map(|t| tape.constant(t)).collect();
        let out = self.forward(&mut tape, &vars, context_len)?;
        Ok(tape.tensor(out))
    }

    pub fn weight_bits(&self) -> Vec<u64> {
        let mut bits = self.mixer_weight.bits();
        bits.extend(self.mixer_bias.bits());
        bits
    }

    pub fn all_frozen(&self) -> bool {
        !self.mixer_weight.requires_grad() && !self.mixer_bias.requires_grad()
    }
}

/// Vision and text encoders that share an embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub config: EncoderConfig,
    pub vision: VisionEncoder,
    pub text: TextEncoder,
}

impl Backbone {
    /// Encoders with a random (unaligned) vision head.
    pub fn new(config: &EncoderConfig) -> Result<Self> {
        Ok(Self {
            config: config.clone(),
            vision: VisionEncoder::new(config)?,
            text: TextEncoder::new(config)?,
        })
    }

    /// Fits the vision head by ridge regression so that pooled image
    /// features map onto `targets`. Rows of `inputs` are head inputs.
    pub fn fit_vision_head(&mut self, inputs: &[Vec<f64>], targets: &[Vec<f64>], ridge: f64) -> Result<()> {
        if inputs.is_empty() || inputs.len() != targets.len() {
            return contract("head fit needs matching, nonempty inputs and targets");
        }
        let n = inputs.len();
        let p = self.vision.head_input_dim();
        let d = self.vision.embed_dim();
        if inputs.iter().any(|r| r.len() != p) || targets.iter().any(|r| r.len() != d) {
            return Err(Error::Dimension {
                op: "fit_vision_head",
                lhs: vec![p, d],
                rhs: vec![inputs[0].len(), targets[0].len()],
            });
        }
        // Centre so the bias absorbs the means.
        let mean_x: Vec<f64> = (0..p).map(|j| inputs.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
        let mean_y: Vec<f64> = (0..d).map(|j| targets.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
        let x = DMatrix::from_fn(n, p, |i, j| inputs[i][j] - mean_x[j]);
        let y = DMatrix::from_fn(n, d, |i, j| targets[i][j] - mean_y[j]);
        let mut gram = x.transpose() * &x;
        for i in 0..p {
            gram[(i, i)] += ridge;
        }
        let rhs = x.transpose() * &y;
        let chol = gram
            .cholesky()
            .ok_or_else(|| Error::Degenerate("ridge system is not positive definite".into()))?;
        let coef = chol.solve(&rhs); // p x d
        let mut w = vec![0.0; d * p];
        for i in 0..d {
            for j in 0..p {
                w[i * p + j] = coef[(j, i)];
            }
        }
        let mx = DVector::from_vec(mean_x);
        let b: Vec<f64> = (0..d)
            .map(|i| mean_y[i] - (0..p).map(|j| coef[(j, i)] * mx[j]).sum::<f64>())
            .collect();
        self.vision
            .set_head(Tensor::matrix(d, p, w)?, Tensor::vector(b)?)
    }

    /// Fingerprint of every frozen weight in both encoders.
    pub fn weight_bits(&self) -> Vec<u64> {
        let mut bits = self.vision.weight_bits();
        bits.extend(self.text.weight_bits());
        bits
    }
}
