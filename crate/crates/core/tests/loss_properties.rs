use applenet_core::losses::{class_probabilities, crp_loss, predict};
use applenet_core::tensor::{Tape, Tensor};
use proptest::prelude::*;

fn vec_strategy(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, d).prop_filter("nonzero norm", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-3)
}

fn features(d: usize, k: usize) -> impl Strategy<Value = (Vec<f64>, Vec<Vec<f64>>)> {
    (vec_strategy(d), prop::collection::vec(vec_strategy(d), k))
}

fn t(v: &[f64]) -> Tensor {
    Tensor::vector(v.to_vec()).unwrap()
}

fn crp_of(tokens: &[Vec<f64>]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<_> = tokens.iter().map(|v| tape.constant_vec(v)).collect();
    let l = crp_loss(&mut tape, &vars).unwrap();
    tape.scalar(l).unwrap()
}

/// Gram-Schmidt over the given vectors; `None` if they are nearly dependent.
fn orthonormalize(vs: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let mut out: Vec<Vec<f64>> = Vec::new();
    for v in vs {
        let mut u = v.clone();
        for e in &out {
            let d: f64 = u.iter().zip(e).map(|(a, b)| a * b).sum();
            u.iter_mut().zip(e).for_each(|(a, b)| *a -= d * b);
        }
        let n = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < 1e-3 {
            return None;
        }
        u.iter_mut().for_each(|x| *x /= n);
        out.push(u);
    }
    Some(out)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn probabilities_sum_to_one((img, prompts) in features(8, 5), tau in 0.01f64..2.0) {
        let prompts: Vec<Tensor> = prompts.iter().map(|p| t(p)).collect();
        let s = class_probabilities(&t(&img), &prompts, tau).unwrap();
        let total: f64 = s.probabilities.iter().sum();
        prop_assert!((total - 1.0).abs() <= 1e-9);
        prop_assert!(s.probabilities.iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn predict_ignores_temperature_and_image_scale(
        (img, prompts) in features(8, 6),
        tau_a in 0.01f64..2.0,
        tau_b in 0.01f64..2.0,
        scale in 0.01f64..100.0,
    ) {
        let prompts: Vec<Tensor> = prompts.iter().map(|p| t(p)).collect();
        let base = predict(&t(&img), &prompts, tau_a).unwrap();
        prop_assert_eq!(base, predict(&t(&img), &prompts, tau_b).unwrap());
        let scaled: Vec<f64> = img.iter().map(|x| x * scale).collect();
        prop_assert_eq!(base, predict(&t(&scaled), &prompts, tau_a).unwrap());
    }

    #[test]
    fn crp_is_zero_on_orthogonal_tokens(
        raw in prop::collection::vec(vec_strategy(6), 4),
        scales in prop::collection::vec(0.1f64..10.0, 4),
    ) {
        let basis = orthonormalize(&raw);
        prop_assume!(basis.is_some());
        let tokens: Vec<Vec<f64>> = basis
            .unwrap()
            .iter()
            .zip(&scales)
            .map(|(u, s)| u.iter().map(|x| x * s).collect())
            .collect();
        prop_assert!(crp_of(&tokens).abs() <= 1e-9);
    }

    #[test]
    fn crp_is_one_on_duplicated_tokens(v in vec_strategy(6), m in 2usize..6) {
        let u: Vec<f64> = {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| x / n).collect()
        };
        let tokens = vec![u; m];
        prop_assert!((crp_of(&tokens) - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn crp_ignores_token_order_and_scale(
        tokens in prop::collection::vec(vec_strategy(6), 2..6),
        scales in prop::collection::vec(0.1f64..10.0, 6),
        rotation in 0usize..6,
    ) {
        let base = crp_of(&tokens);
        let scaled: Vec<Vec<f64>> = tokens
            .iter()
            .zip(&scales)
            .map(|(v, s)| v.iter().map(|x| x * s).collect())
            .collect();
        prop_assert!((crp_of(&scaled) - base).abs() <= 1e-12);
        let mut permuted = tokens.clone();
        permuted.rotate_left(rotation % tokens.len());
        permuted.reverse();
        prop_assert!((crp_of(&permuted) - base).abs() <= 1e-12);
    }
}
