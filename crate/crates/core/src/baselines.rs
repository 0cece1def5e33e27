//! Comparison methods built from the same encoders and losses.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::TextEncoder;
use crate::error::{contract, Error, Result};
use crate::losses::{argmax, cross_entropy};
use crate::promptcore::{assemble_prompt, ClassPosition, Linear, LinearInit, MANUAL_CONTEXT};
use crate::tensor::{Bindings, Parameters, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    ZeroShot,
    ErmLinear,
    Coop,
    Cocoop,
    MsCocoop,
    #[default]
    Applenet,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 6] = [
        BaselineKind::ZeroShot,
        BaselineKind::ErmLinear,
        BaselineKind::Coop,
        BaselineKind::Cocoop,
        BaselineKind::MsCocoop,
        BaselineKind::Applenet,
    ];

    /// Name prefixes of the parameters this method may train.
    pub fn learnable_groups(self) -> &'static [&'static str] {
        match self {
            BaselineKind::ZeroShot => &[],
            BaselineKind::ErmLinear => &["probe"],
            BaselineKind::Coop => &["ctx"],
            BaselineKind::Cocoop | BaselineKind::MsCocoop => &["ctx", "meta"],
            BaselineKind::Applenet => &["ctx", "gate", "proj", "head"],
        }
    }

    /// Whether classification goes through text prompts (and so can score
    /// classes never seen in training).
    pub fn uses_prompts(self) -> bool {
        self != BaselineKind::ErmLinear
    }

    pub fn has_context(self) -> bool {
        !matches!(self, BaselineKind::ZeroShot | BaselineKind::ErmLinear)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BaselineKind::ZeroShot => "zero_shot",
            BaselineKind::ErmLinear => "erm_linear",
            BaselineKind::Coop => "coop",
            BaselineKind::Cocoop => "cocoop",
            BaselineKind::MsCocoop => "ms_cocoop",
            BaselineKind::Applenet => "applenet",
        }
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BaselineKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        BaselineKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Contract(format!("unknown method {s:?}")))
    }
}

/// Fixed hand-written prompt: the manual context words followed by the class token.
pub fn zero_shot_prompt(text: &TextEncoder, class_token: &Tensor) -> Result<Vec<Tensor>> {
    let mut seq = text.embed_words(MANUAL_CONTEXT)?;
    seq.push(class_token.clone());
    Ok(seq)
}

/// Learned context with no visual conditioning.
pub fn coop_prompt(tape: &mut Tape, context: &[Var], class_token: Var, position: ClassPosition) -> Result<Vec<Var>> {
    assemble_prompt(tape, context, None, class_token, position)
}

/// Learned context shifted by one image-conditioned vector shared by every
/// context slot.
pub fn cocoop_prompt(
    tape: &mut Tape,
    context: &[Var],
    shift: Var,
    class_token: Var,
    position: ClassPosition,
) -> Result<Vec<Var>> {
    let shifts = vec![shift; context.len()];
    assemble_prompt(tape, context, Some(&shifts), class_token, position)
}

/// Two-layer bottleneck `pi(x) = W2 relu(W1 x + b1) + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaNet {
    pub hidden: Linear,
    pub output: Linear,
}

impl MetaNet {
    /// Bottleneck width is a quarter of the input. The output layer starts
    /// at `output_init`; zeros make the method start as plain learned context.
    pub fn new<R: Rng + ?Sized>(
        params: &mut Parameters,
        in_dim: usize,
        out_dim: usize,
        output_init: LinearInit,
        rng: &mut R,
    ) -> Result<Self> {
        let width = (in_dim / 4).max(1);
        Ok(Self {
            hidden: Linear::new(params, "meta.hidden", in_dim, width, LinearInit::Gaussian(1.0), rng)?,
            output: Linear::new(params, "meta.output", width, out_dim, output_init, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, b: &Bindings, x: Var) -> Result<Var> {
        let h = self.hidden.forward(tape, b, x)?;
        let h = tape.relu(h);
        self.output.forward(tape, b, h)
    }
}

/// Softmax linear classifier over frozen final image features.
#[derive(Debug, Clone, PartialEq)]
pub struct ErmProbe {
    pub linear: Linear,
}

impl ErmProbe {
    pub fn new<R: Rng + ?Sized>(params: &mut Parameters, dim: usize, classes: usize, rng: &mut R) -> Result<Self> {
        if classes == 0 {
            return contract("linear probe needs at least one class");
        }
        Ok(Self {
            linear: Linear::new(params, "probe", dim, classes, LinearInit::Gaussian(0.01), rng)?,
        })
    }

    pub fn classes(&self) -> usize {
        self.linear.out_dim
    }

    pub fn logits(&self, tape: &mut Tape, b: &Bindings, feature: Var) -> Result<Var> {
        self.linear.forward(tape, b, feature)
    }

    /// Mean cross-entropy over `features` with local labels.
    pub fn loss(&self, tape: &mut Tape, b: &Bindings, features: &[Tensor], labels: &[usize]) -> Result<Var> {
        let logits = features
            .iter()
            .map(|f| {
                let x = tape.constant(f);
                self.logits(tape, b, x)
            })
            .collect::<Result<Vec<_>>>()?;
        cross_entropy(tape, &logits, labels)
    }

    pub fn predict(&self, params: &Parameters, feature: &Tensor) -> Result<usize> {
        let mut tape = Tape::new();
        let b = tape.bind(params);
        let x = tape.constant(feature);
        let l = self.logits(&mut tape, &b, x)?;
        argmax(tape.value(l)).ok_or_else(|| Error::Contract("no classes".into()))
    }

    /// Plain mini-batch SGD at a fixed rate.
    #[allow(clippy::too_many_arguments)]
    pub fn fit<R: Rng + ?Sized>(
        &self,
        params: &mut Parameters,
        features: &[Tensor],
        labels: &[usize],
        epochs: usize,
        batch: usize,
        lr: f64,
        rng: &mut R,
    ) -> Result<()> {
        if features.is_empty() || features.len() != labels.len() || batch == 0 {
            return contract("probe fit needs matching, nonempty features and labels");
        }
        let mut order: Vec<usize> = (0..features.len()).collect();
        for _ in 0..epochs {
            order.shuffle(rng);
            for chunk in order.chunks(batch) {
                let f: Vec<Tensor> = chunk.iter().map(|&i| features[i].clone()).collect();
                let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
                let mut tape = Tape::new();
                let b = tape.bind(params);
                let loss = self.loss(&mut tape, &b, &f, &y)?;
                params.zero_grad();
                tape.backward_into(loss, params)?;
                params.sgd_step(lr)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::EncoderConfig;
    use crate::rng;

    #[test]
    fn learnable_groups_per_kind() {
        assert!(BaselineKind::ZeroShot.learnable_groups().is_empty());
        for k in BaselineKind::ALL {
            assert_eq!(k.as_str().parse::<BaselineKind>().unwrap(), k);
        }
        assert!("clip_adapter".parse::<BaselineKind>().is_err());
    }

    #[test]
    fn zero_shot_prompt_is_fixed_length_five() {
        let text = TextEncoder::new(&EncoderConfig::default()).unwrap();
        let cls = text.class_embedding("forest").unwrap().embedding;
        let a = zero_shot_prompt(&text, &cls).unwrap();
        assert_eq!(a.len(), 5);
        assert_eq!(a, zero_shot_prompt(&text, &cls).unwrap());
        assert_eq!(a[4], cls);
    }

    #[test]
    fn coop_equals_assembly_with_zero_tokens() {
        let mut tape = Tape::new();
        let mut r = rng::stream(2, "coop");
        let ctx: Vec<Var> = (0..4).map(|_| tape.constant(&Tensor::randn(&[6], 1.0, &mut r))).collect();
        let zeros: Vec<Var> = (0..4).map(|_| tape.constant_vec(&[0.0; 6])).collect();
        let cls = tape.constant(&Tensor::randn(&[6], 1.0, &mut r));
        for pos in [ClassPosition::Front, ClassPosition::Middle, ClassPosition::End] {
            let a = coop_prompt(&mut tape, &ctx, cls, pos).unwrap();
            let b = assemble_prompt(&mut tape, &ctx, Some(&zeros), cls, pos).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert_eq!(tape.value(*x), tape.value(*y));
            }
        }
    }

    #[test]
    fn cocoop_shift_is_identical_across_slots() {
        let mut p = Parameters::new();
        let mut r = rng::stream(3, "meta");
        let meta = MetaNet::new(&mut p, 8, 6, LinearInit::Gaussian(1.0), &mut r).unwrap();
        let mut tape = Tape::new();
        let b = tape.bind(&p);
        let ctx: Vec<Var> = (0..4).map(|_| tape.constant(&Tensor::randn(&[6], 1.0, &mut r))).collect();
        let x = tape.constant(&Tensor::randn(&[8], 1.0, &mut r));
        let cls = tape.constant_vec(&[1.0; 6]);
        let shift = meta.forward(&mut tape, &b, x).unwrap();
        let seq = cocoop_prompt(&mut tape, &ctx, shift, cls, ClassPosition::End).unwrap();
        let mut max_diff: f64 = 0.0;
        let deltas: Vec<Vec<f64>> = (0..4)
            .map(|m| {
                tape.value(seq[m])
                    .iter()
                    .zip(tape.value(ctx[m]))
                    .map(|(a, c)| a - c)
                    .collect()
            })
            .collect();
        for d in &deltas[1..] {
            for (a, b) in d.iter().zip(&deltas[0]) {
                max_diff = max_diff.max((a - b).abs());
            }
        }
        assert!(max_diff < 1e-12);

        // Zero output layer reduces to learned context alone.
        let mut p = Parameters::new();
        let meta = MetaNet::new(&mut p, 8, 6, LinearInit::Zeros, &mut r).unwrap();
        let mut tape2 = Tape::new();
        let b = tape2.bind(&p);
        let x = tape2.constant(&Tensor::randn(&[8], 1.0, &mut r));
        let shift = meta.forward(&mut tape2, &b, x).unwrap();
        assert!(tape2.value(shift).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn probe_separates_two_clusters() {
        let mut r = rng::stream(4, "probe");
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for i in 0..40 {
            let y = i % 2;
            let mut f = Tensor::randn(&[4], 0.1, &mut r);
            f.data_mut()[0] += if y == 0 { 1.0 } else { -1.0 };
            feats.push(f);
            labels.push(y);
        }
        let mut p = Parameters::new();
        let probe = ErmProbe::new(&mut p, 4, 2, &mut r).unwrap();
        probe.fit(&mut p, &feats, &labels, 50, 4, 0.5, &mut r).unwrap();
        let correct = feats
            .iter()
            .zip(&labels)
            .filter(|(f, y)| probe.predict(&p, f).unwrap() == **y)
            .count();
        assert!(correct as f64 / 40.0 >= 0.99);
    }
}
