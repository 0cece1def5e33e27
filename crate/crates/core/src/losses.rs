//! Temperature-scaled cosine softmax, cross-entropy, the context
//! redundancy penalty and argmax prediction.

use crate::error::{contract, Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Temperature used unless configured otherwise.
pub const DEFAULT_TEMPERATURE: f64 = 0.07;
/// Weight of the redundancy penalty unless configured otherwise.
pub const DEFAULT_CRP_WEIGHT: f64 = 0.1;

fn check_temperature(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        contract(format!("temperature must be positive and finite, got {tau}"))
    }
}

/// Per-class logits `cos(image, prompt_k) / tau` as one vector.
pub fn cosine_logits(tape: &mut Tape, image: Var, prompts: &[Var], tau: f64) -> Result<Var> {
    check_temperature(tau)?;
    if prompts.is_empty() {
        return contract("need at least one class prompt");
    }
    let img = tape.normalize_l2(image)?;
    let mut cos = Vec::with_capacity(prompts.len());
    for &p in prompts {
        let pn = tape.normalize_l2(p)?;
        cos.push(tape.dot(img, pn)?);
    }
    let stacked = tape.concat(&cos)?;
    Ok(tape.scale(stacked, 1.0 / tau))
}

/// Cosine logits against prompts whose features are already unit length.
pub fn cosine_logits_normalized(tape: &mut Tape, image: Var, unit_prompts: &[Var], tau: f64) -> Result<Var> {
    check_temperature(tau)?;
    if unit_prompts.is_empty() {
        return contract("need at least one class prompt");
    }
    let img = tape.normalize_l2(image)?;
    let cos = unit_prompts
        .iter()
        .map(|&p| tape.dot(img, p))
        .collect::<Result<Vec<_>>>()?;
    let stacked = tape.concat(&cos)?;
    Ok(tape.scale(stacked, 1.0 / tau))
}

/// Cosines and softmax probabilities of one image against every class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassScores {
    pub cosines: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub temperature: f64,
}

impl ClassScores {
    pub fn from_cosines(cosines: Vec<f64>, tau: f64) -> Result<Self> {
        check_temperature(tau)?;
        if cosines.is_empty() {
            return contract("need at least one class");
        }
        let probabilities = softmax(&cosines.iter().map(|c| c / tau).collect::<Vec<_>>());
        Ok(Self {
            cosines,
            probabilities,
            temperature: tau,
        })
    }

    pub fn predict(&self) -> usize {
        argmax(&self.probabilities).expect("nonempty by construction")
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(na > 1e-12 && nb > 1e-12) {
        return Err(Error::Degenerate("zero-norm feature in cosine similarity".into()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// Class probabilities of one image feature against per-class prompt features.
pub fn class_probabilities(image: &Tensor, prompts: &[Tensor], tau: f64) -> Result<ClassScores> {
    check_temperature(tau)?;
    let cos = prompts
        .iter()
        .map(|p| {
            if p.len() != image.len() {
                return Err(Error::Dimension {
                    op: "class_probabilities",
                    lhs: image.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            cosine(image.data(), p.data())
        })
        .collect::<Result<Vec<_>>>()?;
    ClassScores::from_cosines(cos, tau)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

/// Class index with the highest probability among the candidates.
pub fn predict(image: &Tensor, prompts: &[Tensor], tau: f64) -> Result<usize> {
    if prompts.is_empty() {
        return contract("prediction over an empty class set");
    }
    Ok(class_probabilities(image, prompts, tau)?.predict())
}

/// Batch mean of `-log p(label)` from per-sample logit vectors.
pub fn cross_entropy(tape: &mut Tape, logits: &[Var], labels: &[usize]) -> Result<Var> {
    if logits.is_empty() || logits.len() != labels.len() {
        return contract("cross-entropy needs one label per nonempty logit vector");
    }
    let mut terms = Vec::with_capacity(logits.len());
    for (&l, &y) in logits.iter().zip(labels) {
        let n = tape.value(l).len();
        if y >= n {
            return contract(format!("label {y} out of range for {n} classes"));
        }
        let ls = tape.log_softmax(l)?;
        terms.push(tape.select(ls, y)?);
    }
    let stacked = tape.concat(&terms)?;
    let mean = tape.mean(stacked);
    Ok(tape.scale(mean, -1.0))
}

/// Batch mean of `-log p(true)` from probability rows.
pub fn cross_entropy_from_probabilities(probs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if probs.is_empty() || probs.len() != labels.len() {
        return contract("cross-entropy needs one label per nonempty probability row");
    }
    let mut total = 0.0;
    for (p, &y) in probs.iter().zip(labels) {
        let py = *p
            .get(y)
            .ok_or_else(|| Error::Contract(format!("label {y} out of range for {} classes", p.len())))?;
        total -= py.ln();
    }
    Ok(total / probs.len() as f64)
}

/// Mean absolute cosine over distinct token pairs (`j != l`) after L2
/// normalization; 0 for a single token.
pub fn crp_loss(tape: &mut Tape, tokens: &[Var]) -> Result<Var> {
    match tokens.len() {
        0 => contract("redundancy penalty over zero tokens"),
        1 => Ok(tape.constant(&Tensor::scalar(0.0))),
        _ => {
            let unit = tokens
                .iter()
                .map(|&t| tape.normalize_l2(t))
                .collect::<Result<Vec<_>>>()?;
            let n = tape.stack(&unit)?;
            let nt = tape.transpose(n)?;
            let gram = tape.matmul(n, nt)?;
            let abs = tape.abs(gram);
            tape.off_diagonal_mean(abs)
        }
    }
}

/// `ce + lambda * crp`.
pub fn total_loss(tape: &mut Tape, ce: Var, crp: Var, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return contract(format!("loss weight must be finite and >= 0, got {lambda}"));
    }
    let weighted = tape.scale(crp, lambda);
    tape.add(ce, weighted)
}

/// Scalar values of one objective evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBundle {
    pub ce: f64,
    pub crp: f64,
    pub lambda: f64,
    pub total: f64,
}

impl LossBundle {
    pub fn new(ce: f64, crp: f64, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return contract(format!("loss weight must be finite and >= 0, got {lambda}"));
        }
        if !ce.is_finite() || !crp.is_finite() {
            return Err(Error::Divergence(format!("non-finite loss terms ce={ce} crp={crp}")));
        }
        Ok(Self {
            ce,
            crp,
            lambda,
            total: ce + lambda * crp,
        })
    }
}
