//! Style statistics, multi-scale content fusion, the residual attention
//! injection block, projector heads and prompt assembly.
//!
//! For one image `x` from a domain batch:
//!
//! ```text
//! F(x)  = [gap(f_v^1(x)); ...; gap(f_v^L(x)); mu]        fused content + style
//! O_q   = P_q(O_{q-1} * A_q(O_{q-1}) + O_{q-1}),  O_0 = F  injection block
//! v_m   = h_m(O_Q)                                       visual tokens
//! t_y   = [c_1 + v_1, ..., c_M + v_M] with CLS_y inserted
//! ```
//!
//! `A_q` is a squeeze/excite gate (linear, ReLU, linear, sigmoid) and `P_q`
//! the linear layer that follows each attention module.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::TextEncoder;
use crate::error::{contract, Error, Result};
use crate::tensor::{Bindings, ParamId, Parameters, Tape, Tensor, Var};

/// Manual context the prompts start from.
pub const MANUAL_CONTEXT: &str = "a photo of a";

/// Standard deviation of randomly initialized context vectors.
pub const RANDOM_INIT_STD: f64 = 0.02;

/// Where the class token sits among the context vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClassPosition {
    Front,
    Middle,
    #[default]
    End,
}

impl ClassPosition {
    /// Index of the class token in a prompt with `m` context vectors.
    pub fn index(self, m: usize) -> usize {
        match self {
            ClassPosition::Front => 0,
            ClassPosition::Middle => m / 2,
            ClassPosition::End => m,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Word embeddings of the manual context.
    #[default]
    Manual,
    Random,
    Zeros,
}

/// Column means of a batch of final features.
pub fn style_statistics(tape: &mut Tape, batch_features: Var) -> Result<Var> {
    tape.mean_over_batch(batch_features)
}

/// Plain version of [`style_statistics`] over individual vectors.
pub fn style_statistics_of(features: &[Tensor]) -> Result<Tensor> {
    let first = features
        .first()
        .ok_or_else(|| Error::Degenerate("style statistics of an empty batch".into()))?;
    let d = first.len();
    let mut acc = vec![0.0; d];
    for f in features {
        if f.len() != d {
            return Err(Error::Dimension {
                op: "style_statistics",
                lhs: first.shape().to_vec(),
                rhs: f.shape().to_vec(),
            });
        }
        acc.iter_mut().zip(f.data()).for_each(|(a, b)| *a += b);
    }
    let inv = 1.0 / features.len() as f64;
    acc.iter_mut().for_each(|a| *a *= inv);
    Tensor::vector(acc)
}

/// GAP of every layer map, concatenated shallow to deep.
pub fn multiscale_features(tape: &mut Tape, layer_maps: &[Var]) -> Result<Var> {
    if layer_maps.is_empty() {
        return contract("multi-scale features need at least one layer");
    }
    let pooled = layer_maps
        .iter()
        .map(|&m| tape.gap(m))
        .collect::<Result<Vec<_>>>()?;
    if pooled.len() == 1 {
        return Ok(pooled[0]);
    }
    tape.concat(&pooled)
}

/// `[content; style]`.
pub fn fuse_content_style(tape: &mut Tape, content: Var, style: Var) -> Result<Var> {
    if !tape.value(content).iter().chain(tape.value(style)).all(|v| v.is_finite()) {
        return Err(Error::Degenerate("non-finite content or style feature".into()));
    }
    tape.concat(&[content, style])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LinearInit {
    /// Gaussian weights with std `gain / sqrt(fan_in)`, zero bias.
    Gaussian(f64),
    Identity,
    Zeros,
}

/// `y = W x + b` with `W: [out x in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        params: &mut Parameters,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: LinearInit,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = match init {
            LinearInit::Gaussian(gain) => {
                Tensor::randn(&[out_dim, in_dim], gain / (in_dim as f64).sqrt(), rng)
            }
            LinearInit::Identity => {
                if in_dim != out_dim {
                    return contract("identity init needs a square layer");
                }
                Tensor::identity(in_dim)
            }
            LinearInit::Zeros => Tensor::zeros(&[out_dim, in_dim]),
        };
        Ok(Self {
            weight: params.add(format!("{name}.weight"), weight),
            bias: params.add(format!("{name}.bias"), Tensor::zeros(&[out_dim])),
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, tape: &mut Tape, b: &Bindings, x: Var) -> Result<Var> {
        let y = tape.matvec(b.get(self.weight), x)?;
        tape.add(y, b.get(self.bias))
    }
}

/// Squeeze/excite channel gate: `sigmoid(W2 relu(W1 x + b1) + b2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGate {
    pub squeeze: Linear,
    pub expand: Linear,
}

impl AttentionGate {
    pub fn forward(&self, tape: &mut Tape, b: &Bindings, x: Var) -> Result<Var> {
        let h = self.squeeze.forward(tape, b, x)?;
        let h = tape.relu(h);
        let g = self.expand.forward(tape, b, h)?;
        Ok(tape.sigmoid(g))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InjectionShape {
    /// Length of the fused feature.
    pub dim: usize,
    /// Text token dimension.
    pub token_dim: usize,
    /// Attention modules.
    pub modules: usize,
    /// Projector heads, one per context vector.
    pub heads: usize,
    pub reduction: usize,
}

/// Trainable parameters of the injection block and the projector heads.
#[derive(Debug, Clone, PartialEq)]
pub struct InjectionParams {
    pub dim: usize,
    pub gates: Vec<AttentionGate>,
    pub projections: Vec<Linear>,
    pub heads: Vec<Linear>,
}

impl InjectionParams {
    /// Gates start Gaussian, post-gate projections at identity and heads as
    /// given by `head_init`.
    pub fn new<R: Rng + ?Sized>(
        params: &mut Parameters,
        shape: InjectionShape,
        head_init: LinearInit,
        rng: &mut R,
    ) -> Result<Self> {
        if shape.dim == 0 || shape.token_dim == 0 || shape.reduction == 0 {
            return contract("injection block dimensions must be positive");
        }
        let hidden = (shape.dim / shape.reduction).max(1);
        let mut gates = Vec::with_capacity(shape.modules);
        let mut projections = Vec::with_capacity(shape.modules);
        for q in 0..shape.modules {
            gates.push(AttentionGate {
                squeeze: Linear::new(params, &format!("gate{q}.squeeze"), shape.dim, hidden, LinearInit::Gaussian(1.0), rng)?,
                expand: Linear::new(params, &format!("gate{q}.expand"), hidden, shape.dim, LinearInit::Gaussian(1.0), rng)?,
            });
            projections.push(Linear::new(params, &format!("proj{q}"), shape.dim, shape.dim, LinearInit::Identity, rng)?);
        }
        let heads = (0..shape.heads)
            .map(|m| Linear::new(params, &format!("head{m}"), shape.dim, shape.token_dim, head_init, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            dim: shape.dim,
            gates,
            projections,
            heads,
        })
    }

    pub fn modules(&self) -> usize {
        self.gates.len()
    }

    /// Residual gated recursion; `Q = 0` returns `fused` unchanged.
    pub fn forward(&self, tape: &mut Tape, b: &Bindings, fused: Var) -> Result<Var> {
        if tape.shape(fused) != [self.dim] {
            return Err(Error::Dimension {
                op: "injection_forward",
                lhs: vec![self.dim],
                rhs: tape.shape(fused).to_vec(),
            });
        }
        let mut o = fused;
        for (gate, proj) in self.gates.iter().zip(&self.projections) {
            let a = gate.forward(tape, b, o)?;
            let gated = tape.mul(o, a)?;
            let residual = tape.add(gated, o)?;
            o = proj.forward(tape, b, residual)?;
        }
        Ok(o)
    }

    /// `v_m = h_m(O)` for every head.
    pub fn visual_tokens(&self, tape: &mut Tape, b: &Bindings, o: Var) -> Result<Vec<Var>> {
        self.heads.iter().map(|h| h.forward(tape, b, o)).collect()
    }
}

/// Learnable context vectors and the class-token policy.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptState {
    pub context: Vec<ParamId>,
    pub position: ClassPosition,
}

impl PromptState {
    pub fn new<R: Rng + ?Sized>(
        params: &mut Parameters,
        context_len: usize,
        position: ClassPosition,
        init: InitMode,
        text: &TextEncoder,
        rng: &mut R,
    ) -> Result<Self> {
        let vectors = initial_context(context_len, init, text, rng)?;
        let context = vectors
            .into_iter()
            .enumerate()
            .map(|(i, t)| params.add(format!("ctx{i}"), t))
            .collect();
        Ok(Self { context, position })
    }

    pub fn len(&self) -> usize {
        self.context.len()
    }

    pub fn is_empty(&self) -> bool {
        self.context.is_empty()
    }

    pub fn vars(&self, b: &Bindings) -> Vec<Var> {
        self.context.iter().map(|&id| b.get(id)).collect()
    }
}

/// Initial context vectors for `init`.
pub fn initial_context<R: Rng + ?Sized>(
    context_len: usize,
    init: InitMode,
    text: &TextEncoder,
    rng: &mut R,
) -> Result<Vec<Tensor>> {
    if context_len == 0 {
        return contract("context length must be at least 1");
    }
    let d = text.dim();
    Ok(match init {
        InitMode::Manual => {
            let words = text.embed_words(MANUAL_CONTEXT)?;
            if words.len() != context_len {
                return contract(format!(
                    "manual initialization has {} words but context length is {context_len}",
                    words.len()
                ));
            }
            words
        }
        InitMode::Random => (0..context_len)
            .map(|_| Tensor::randn(&[d], RANDOM_INIT_STD, rng))
            .collect(),
        InitMode::Zeros => (0..context_len).map(|_| Tensor::zeros(&[d])).collect(),
    })
}

/// Builds `c_m + v_m` (or bare `c_m` when `visual` is `None`) and inserts
/// the class token per `position`. The result has `M + 1` entries.
pub fn assemble_prompt(
    tape: &mut Tape,
    context: &[Var],
    visual: Option<&[Var]>,
    class_token: Var,
    position: ClassPosition,
) -> Result<Vec<Var>> {
    let mut tokens = match visual {
        Some(v) => {
            if v.len() != context.len() {
                return contract(format!(
                    "{} visual tokens for {} context vectors",
                    v.len(),
                    context.len()
                ));
            }
            context
                .iter()
                .zip(v)
                .map(|(&c, &u)| tape.add(c, u))
                .collect::<Result<Vec<_>>>()?
        }
        None => context.to_vec(),
    };
    tokens.insert(position.index(context.len()), class_token);
    Ok(tokens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::EncoderConfig;
    use crate::rng;

    fn v(tape: &mut Tape, data: &[f64]) -> Var {
        tape.constant_vec(data)
    }

    #[test]
    fn style_statistics_examples() {
        let mut tape = Tape::new();
        let m = tape.constant(&Tensor::matrix(2, 2, vec![0.0, 2.0, 2.0, 0.0]).unwrap());
        let mu = style_statistics(&mut tape, m).unwrap();
        assert_eq!(tape.value(mu), &[1.0, 1.0]);

        let same = vec![Tensor::vector(vec![0.3, -1.0]).unwrap(); 5];
        let mu = style_statistics_of(&same).unwrap();
        assert!((mu.data()[0] - 0.3).abs() < 1e-15 && (mu.data()[1] + 1.0).abs() < 1e-15);
        assert!(matches!(style_statistics_of(&[]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn multiscale_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(&Tensor::full(&[4, 4, 1], 1.5));
        let b = tape.constant(&Tensor::full(&[2, 2, 1], -3.0));
        let f = multiscale_features(&mut tape, &[a, b]).unwrap();
        assert_eq!(tape.value(f), &[1.5, -3.0]);

        let single = multiscale_features(&mut tape, &[a]).unwrap();
        let g = tape.gap(a).unwrap();
        assert_eq!(tape.value(single), tape.value(g));

        assert!(matches!(multiscale_features(&mut tape, &[]), Err(Error::Contract(_))));
    }

    #[test]
    fn fuse_examples() {
        let mut tape = Tape::new();
        let c = v(&mut tape, &[1.0, 2.0]);
        let s = v(&mut tape, &[3.0]);
        let f = fuse_content_style(&mut tape, c, s).unwrap();
        assert_eq!(tape.value(f), &[1.0, 2.0, 3.0]);
        let back_c = tape.slice(f, 0, 2).unwrap();
        let back_s = tape.slice(f, 2, 1).unwrap();
        assert_eq!(tape.value(back_c), &[1.0, 2.0]);
        assert_eq!(tape.value(back_s), &[3.0]);

        let bad = v(&mut tape, &[f64::NAN]);
        assert!(fuse_content_style(&mut tape, c, bad).is_err());
    }

    fn zero_gate_block(dim: usize, modules: usize) -> (Parameters, InjectionParams) {
        let mut p = Parameters::new();
        let mut r = rng::stream(0, "t");
        let shape = InjectionShape { dim, token_dim: 3, modules, heads: 2, reduction: 4 };
        let inj = InjectionParams::new(&mut p, shape, LinearInit::Zeros, &mut r).unwrap();
        for g in &inj.gates {
            for id in [g.squeeze.weight, g.squeeze.bias, g.expand.weight, g.expand.bias] {
                p.get_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
            }
        }
        (p, inj)
    }

    #[test]
    fn zero_gates_identity_projection_scale_by_one_and_a_half() {
        let (p, inj) = zero_gate_block(8, 1);
        let mut tape = Tape::new();
        let b = tape.bind(&p);
        let f: Vec<f64> = (0..8).map(|i| i as f64 - 3.5).collect();
        let fv = v(&mut tape, &f);
        let o = inj.forward(&mut tape, &b, fv).unwrap();
        for (got, x) in tape.value(o).iter().zip(&f) {
            assert_eq!(*got, 1.5 * x);
        }
    }

    #[test]
    fn no_modules_is_identity_and_dims_checked() {
        let (p, inj) = zero_gate_block(5, 0);
        let mut tape = Tape::new();
        let b = tape.bind(&p);
        let fv = v(&mut tape, &[1.0, 2.0, 3.0, 4.0, 5.0]);
        let o = inj.forward(&mut tape, &b, fv).unwrap();
        assert_eq!(o, fv);
        let wrong = v(&mut tape, &[1.0, 2.0]);
        assert!(matches!(inj.forward(&mut tape, &b, wrong), Err(Error::Dimension { .. })));
    }

    #[test]
    fn saturated_gates_scale_by_power() {
        // Expand bias pinned so every gate outputs g = sigmoid(beta).
        for q in [1usize, 2] {
            let (mut p, inj) = zero_gate_block(6, q);
            let beta = 0.7;
            for g in &inj.gates {
                p.get_mut(g.expand.bias).data_mut().iter_mut().for_each(|x| *x = beta);
            }
            let gval = 1.0 / (1.0 + (-beta).exp());
            let mut tape = Tape::new();
            let b = tape.bind(&p);
            let f = [0.5, -1.0, 2.0, 0.0, 3.0, -0.25];
            let fv = v(&mut tape, &f);
            let o = inj.forward(&mut tape, &b, fv).unwrap();
            for (got, x) in tape.value(o).iter().zip(&f) {
                let want = x * (1.0 + gval).powi(q as i32);
                assert!((got - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn visual_token_examples() {
        let (p, inj) = zero_gate_block(4, 1);
        let mut tape = Tape::new();
        let b = tape.bind(&p);
        let o = v(&mut tape, &[1.0, -2.0, 0.5, 3.0]);
        let toks = inj.visual_tokens(&mut tape, &b, o).unwrap();
        assert_eq!(toks.len(), 2);
        for t in toks {
            assert_eq!(tape.value(t), &[0.0, 0.0, 0.0]);
        }

        let mut p = Parameters::new();
        let shape = InjectionShape { dim: 4, token_dim: 3, modules: 0, heads: 3, reduction: 4 };
        let inj = InjectionParams::new(&mut p, shape, LinearInit::Gaussian(1.0), &mut rng::stream(4, "h")).unwrap();
        let mut tape = Tape::new();
        let b = tape.bind(&p);
        let o = v(&mut tape, &[0.3, -1.1, 0.8, 2.0]);
        let toks = inj.visual_tokens(&mut tape, &b, o).unwrap();
        for i in 0..3 {
            for j in i + 1..3 {
                assert_ne!(tape.value(toks[i]), tape.value(toks[j]));
            }
        }
        // single head == its own linear map
        let h = &inj.heads[0];
        let w = p.get(h.weight).data();
        let want: Vec<f64> = (0..3)
            .map(|r| (0..4).map(|c| w[r * 4 + c] * [0.3, -1.1, 0.8, 2.0][c]).sum())
            .collect();
        assert_eq!(tape.value(toks[0]), want.as_slice());
    }

    #[test]
    fn class_token_positions() {
        assert_eq!(ClassPosition::End.index(4), 4);
        assert_eq!(ClassPosition::Front.index(4), 0);
        assert_eq!(ClassPosition::Middle.index(4), 2);
        assert_eq!(ClassPosition::Middle.index(5), 2);
        assert_eq!(ClassPosition::Middle.index(1), 0);

        let mut tape = Tape::new();
        let ctx: Vec<Var> = (0..4).map(|i| v(&mut tape, &[i as f64, 0.0])).collect();
        let zero: Vec<Var> = (0..4).map(|_| v(&mut tape, &[0.0, 0.0])).collect();
        let cls = v(&mut tape, &[9.0, 9.0]);
        for pos in [ClassPosition::Front, ClassPosition::Middle, ClassPosition::End] {
            let seq = assemble_prompt(&mut tape, &ctx, Some(&zero), cls, pos).unwrap();
            assert_eq!(seq.len(), 5);
            assert_eq!(seq.iter().filter(|&&s| s == cls).count(), 1);
            assert_eq!(seq[pos.index(4)], cls);
            let plain: Vec<Vec<f64>> = seq.iter().map(|&s| tape.value(s).to_vec()).collect();
            let bare = assemble_prompt(&mut tape, &ctx, None, cls, pos).unwrap();
            let bare: Vec<Vec<f64>> = bare.iter().map(|&s| tape.value(s).to_vec()).collect();
            assert_eq!(plain, bare);
        }
        assert!(matches!(
            assemble_prompt(&mut tape, &ctx, Some(&zero[..3]), cls, ClassPosition::End),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn context_initialization_modes() {
        let text = TextEncoder::new(&EncoderConfig::default()).unwrap();
        let mut r = rng::stream(1, "init");
        let manual = initial_context(4, InitMode::Manual, &text, &mut r).unwrap();
        assert_eq!(manual, text.embed_words(MANUAL_CONTEXT).unwrap());
        assert!(initial_context(8, InitMode::Manual, &text, &mut r).is_err());
        let zeros = initial_context(3, InitMode::Zeros, &text, &mut r).unwrap();
        assert!(zeros.iter().all(|t| t.data().iter().all(|x| *x == 0.0)));
        let random = initial_context(16, InitMode::Random, &text, &mut r).unwrap();
        let n = random.iter().map(Tensor::len).sum::<usize>() as f64;
        let var = random.iter().flat_map(|t| t.data()).map(|x| x * x).sum::<f64>() / n;
        assert!((var.sqrt() - RANDOM_INIT_STD).abs() < 0.005);
        assert!(initial_context(0, InitMode::Zeros, &text, &mut r).is_err());
    }
}
