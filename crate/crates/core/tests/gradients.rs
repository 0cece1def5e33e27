use applenet_core::baselines::BaselineKind;
use applenet_core::encoders::{Backbone, EncoderConfig};
use applenet_core::model::{FeatureBatch, LearnerConfig, PromptLearner, SampleFeatures};
use applenet_core::promptcore::LinearInit;
use applenet_core::rng;
use applenet_core::tensor::{gradcheck, Parameters, Tape, Tensor, Var};
use applenet_core::Result;

const H: f64 = 1e-5;
const REL: f64 = 1e-4;
const ABS: f64 = 1e-7;

type OpFn = fn(&mut Tape, &[Var]) -> Result<Var>;

/// Parameters drawn for one op instance: inputs are all trainable.
fn draw(seed: u64, name: &str, shapes: &[&[usize]]) -> Parameters {
    let mut r = rng::stream(seed, name);
    let mut p = Parameters::new();
    for (i, s) in shapes.iter().enumerate() {
        p.add(format!("x{i}"), Tensor::randn(s, 1.0, &mut r));
    }
    p
}

/// Projects the op output onto fixed random weights so every output element
/// contributes a distinct amount to the scalar being differentiated.
fn probe_loss(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let n = tape.value(out).len();
    let flat = tape.reshape(out, &[n])?;
    let w = Tensor::randn(&[n], 1.0, &mut rng::stream(seed, "probe-weights"));
    let w = tape.constant(&w);
    tape.dot(flat, w)
}

fn check_op(name: &str, shapes: &[&[usize]], f: OpFn) {
    for seed in 0..50u64 {
        let params = draw(seed, name, shapes);
        let eval = |p: &Parameters| -> Result<f64> {
            let mut tape = Tape::new();
            let b = tape.bind(p);
            let vars: Vec<Var> = p.ids().map(|id| b.get(id)).collect();
            let out = f(&mut tape, &vars)?;
            let l = probe_loss(&mut tape, out, seed)?;
            tape.scalar(l)
        };
        let mut tape = Tape::new();
        let b = tape.bind(&params);
        let vars: Vec<Var> = params.ids().map(|id| b.get(id)).collect();
        let out = f(&mut tape, &vars).unwrap();
        let l = probe_loss(&mut tape, out, seed).unwrap();
        let grads = tape.backward(l).unwrap();
        let report = gradcheck(&params, &grads, H, REL, ABS, eval).unwrap();
        assert!(
            report.passed(),
            "{name} seed {seed}: {:?}",
            &report.mismatches[..report.mismatches.len().min(3)]
        );
    }
}

#[test]
fn every_op_matches_central_differences_on_50_seeds() {
    let cases: Vec<(&str, Vec<&[usize]>, OpFn)> = vec![
        ("matmul", vec![&[3, 4], &[4, 2]], |t, v| t.matmul(v[0], v[1])),
        ("matvec", vec![&[3, 5], &[5]], |t, v| t.matvec(v[0], v[1])),
        ("transpose", vec![&[3, 2]], |t, v| t.transpose(v[0])),
        ("add", vec![&[6], &[6]], |t, v| t.add(v[0], v[1])),
        ("sub", vec![&[6], &[6]], |t, v| t.sub(v[0], v[1])),
        ("mul", vec![&[6], &[6]], |t, v| t.mul(v[0], v[1])),
        ("scale", vec![&[6]], |t, v| Ok(t.scale(v[0], -1.7))),
        ("relu", vec![&[8]], |t, v| Ok(t.relu(v[0]))),
        ("sigmoid", vec![&[8]], |t, v| Ok(t.sigmoid(v[0]))),
        ("tanh", vec![&[8]], |t, v| Ok(t.tanh(v[0]))),
        ("abs", vec![&[8]], |t, v| Ok(t.abs(v[0]))),
        ("sum", vec![&[2, 3]], |t, v| Ok(t.sum(v[0]))),
        ("mean", vec![&[2, 3]], |t, v| Ok(t.mean(v[0]))),
        ("mean_over_batch", vec![&[4, 5]], |t, v| t.mean_over_batch(v[0])),
        ("gap", vec![&[3, 2, 4]], |t, v| t.gap(v[0])),
        ("normalize_l2", vec![&[8]], |t, v| t.normalize_l2(v[0])),
        ("dot", vec![&[5], &[5]], |t, v| t.dot(v[0], v[1])),
        ("concat", vec![&[3], &[2], &[4]], |t, v| t.concat(v)),
        ("slice", vec![&[7]], |t, v| t.slice(v[0], 2, 3)),
        ("stack", vec![&[4], &[4], &[4]], |t, v| t.stack(v)),
        ("row", vec![&[3, 4]], |t, v| t.row(v[0], 1)),
        ("reshape", vec![&[2, 6]], |t, v| t.reshape(v[0], &[3, 4])),
        ("log_softmax", vec![&[5]], |t, v| t.log_softmax(v[0])),
        ("select", vec![&[5]], |t, v| t.select(v[0], 3)),
        ("off_diagonal_mean", vec![&[4, 4]], |t, v| t.off_diagonal_mean(v[0])),
    ];
    for (name, shapes, f) in cases {
        check_op(name, &shapes, f);
    }
}

#[test]
fn sigmoid_slope_at_zero_is_a_quarter() {
    let mut p = Parameters::new();
    let id = p.add("x", Tensor::scalar(0.0));
    let mut tape = Tape::new();
    let b = tape.bind(&p);
    let y = tape.sigmoid(b.get(id));
    let g = tape.backward(y).unwrap();
    assert!((g.get(id).unwrap()[0] - 0.25).abs() < 1e-12);
    let num = (1.0 / (1.0 + (-H).exp()) - 1.0 / (1.0 + (H).exp())) / (2.0 * H);
    assert!((num - 0.25).abs() < 1e-9);
}

#[test]
fn backward_twice_accumulates_double() {
    let mut r = rng::stream(9, "twice");
    let mut p = Parameters::new();
    let a = p.add("a", Tensor::randn(&[3, 4], 1.0, &mut r));
    let x = p.add("x", Tensor::randn(&[4], 1.0, &mut r));
    let mut tape = Tape::new();
    let b = tape.bind(&p);
    let y = tape.matvec(b.get(a), b.get(x)).unwrap();
    let y = tape.tanh(y);
    let l = tape.sum(y);
    let once = tape.backward(l).unwrap();
    tape.backward_into(l, &mut p).unwrap();
    tape.backward_into(l, &mut p).unwrap();
    for id in [a, x] {
        let acc = p.get(id).grad().unwrap();
        for (g2, g1) in acc.iter().zip(once.get(id).unwrap()) {
            assert_eq!(*g2, 2.0 * g1);
        }
    }
}

#[test]
fn unreachable_parameters_get_zero_gradient() {
    let mut p = Parameters::new();
    let used = p.add("used", Tensor::vector(vec![1.0, 2.0]).unwrap());
    let unused = p.add("unused", Tensor::vector(vec![3.0]).unwrap());
    let mut tape = Tape::new();
    let b = tape.bind(&p);
    let l = tape.sum(b.get(used));
    let g = tape.backward(l).unwrap();
    assert_eq!(g.get(used).unwrap(), &[1.0, 1.0]);
    assert!(g.get(unused).is_none_or(|v| v.iter().all(|x| *x == 0.0)));
}

#[test]
fn text_forward_is_differentiable_in_its_tokens() {
    let backbone = Backbone::new(&EncoderConfig::default()).unwrap();
    let text = &backbone.text;
    for seed in 0..5u64 {
        let mut r = rng::stream(seed, "text-tokens");
        let mut p = Parameters::new();
        for i in 0..5 {
            p.add(format!("tok{i}"), Tensor::randn(&[text.dim()], 0.5, &mut r));
        }
        let f = |params: &Parameters| -> Result<(Tape, Var)> {
            let mut tape = Tape::new();
            let b = tape.bind(params);
            let toks: Vec<Var> = params.ids().map(|id| b.get(id)).collect();
            let out = text.forward(&mut tape, &toks, 4)?;
            let l = probe_loss(&mut tape, out, seed)?;
            Ok((tape, l))
        };
        let (tape, l) = f(&p).unwrap();
        let grads = tape.backward(l).unwrap();
        let report = gradcheck(&p, &grads, H, REL, ABS, |q| {
            let (t, l) = f(q)?;
            t.scalar(l)
        })
        .unwrap();
        assert!(report.passed(), "{:?}", report.mismatches);
    }
}

fn toy_batches(backbone: &Backbone, seed: u64) -> Vec<FeatureBatch> {
    let mut r = rng::stream(seed, "toy-images");
    (0..2)
        .map(|domain| {
            let samples = (0..2)
                .map(|_| {
                    let img = Tensor::randn(&[16, 16, 3], 1.0, &mut r);
                    SampleFeatures::extract(&backbone.vision, &img).unwrap()
                })
                .collect();
            FeatureBatch { domain, samples, labels: vec![0, 1] }
        })
        .collect()
}

fn full_loss_check(method: BaselineKind, seed: u64) {
    let backbone = Backbone::new(&EncoderConfig::default()).unwrap();
    let names = vec!["forest".to_string(), "harbor".to_string()];
    let config = LearnerConfig {
        method,
        output_init: LinearInit::Gaussian(1.0),
        ..LearnerConfig::default()
    };
    let learner = PromptLearner::new(config, &backbone, &names, &[0, 1], seed).unwrap();
    let batches = toy_batches(&backbone, seed);
    let classes = [0, 1];
    let (bundle, grads) = learner
        .evaluate_objective(learner.params(), &batches, &classes, true)
        .unwrap();
    assert!(bundle.crp > 0.0 || method != BaselineKind::Applenet);
    let grads = grads.unwrap();
    let report = gradcheck(learner.params(), &grads, H, REL, ABS, |p| {
        Ok(learner.evaluate_objective(p, &batches, &classes, false)?.0.total)
    })
    .unwrap();
    assert_eq!(report.checked, learner.params().numel());
    assert!(
        report.passed(),
        "{method}: {} of {} mismatched, first {:?}",
        report.mismatches.len(),
        report.checked,
        report.mismatches.first()
    );
    for (id, name, _) in learner.params().iter() {
        let g = grads.get(id).expect("every parameter is reachable");
        assert!(g.iter().any(|x| *x != 0.0), "{name} received no gradient");
    }
}

#[test]
fn full_applenet_loss_matches_central_differences() {
    full_loss_check(BaselineKind::Applenet, 11);
}

#[test]
fn conditioned_baselines_match_central_differences() {
    full_loss_check(BaselineKind::Cocoop, 12);
    full_loss_check(BaselineKind::MsCocoop, 13);
    full_loss_check(BaselineKind::Coop, 14);
}
