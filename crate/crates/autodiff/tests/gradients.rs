use autodiff::{forward_eval, grad_check, grad_check_fn, reference_cases, Primitive, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-4;
const TOL: f64 = 1e-3;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn every_primitive_passes_central_differences() {
    let mut failures = Vec::new();
    for (p, inputs) in reference_cases(11) {
        let err = grad_check(&p, &inputs, STEP).unwrap();
        if err > TOL {
            failures.push(format!("{} ({err:.2e})", p.name()));
        }
    }
    assert!(failures.is_empty(), "gradient check failed: {failures:?}");
}

#[test]
fn catalog_covers_every_primitive_name() {
    let mut names: Vec<_> = reference_cases(0).iter().map(|(p, _)| p.name()).collect();
    names.sort();
    names.dedup();
    assert_eq!(names.len(), 28);
}

#[test]
fn mul_gradient_is_tight() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs = vec![uniform(&mut rng, &[8]), uniform(&mut rng, &[8])];
    assert!(grad_check(&Primitive::Mul, &inputs, STEP).unwrap() <= 1e-6);
}

#[test]
fn conv_3x3_on_4x4_within_tolerance() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let inputs = vec![uniform(&mut rng, &[1, 1, 4, 4]), uniform(&mut rng, &[1, 1, 3, 3])];
    assert!(grad_check(&Primitive::Conv2d { stride: 1, pad: 1 }, &inputs, STEP).unwrap() <= 1e-3);
}

#[test]
fn attention_on_2x4_tokens_within_tolerance() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inputs = vec![
        uniform(&mut rng, &[1, 4, 2, 4]),
        uniform(&mut rng, &[12, 4]),
        uniform(&mut rng, &[12]),
        uniform(&mut rng, &[4, 4]),
        uniform(&mut rng, &[4]),
    ];
    assert!(grad_check(&Primitive::Mhsa { heads: 4 }, &inputs, STEP).unwrap() <= 1e-3);
}

fn smooth_unary() -> Vec<Primitive> {
    vec![
        Primitive::Tanh,
        Primitive::Silu,
        Primitive::Softmax,
        Primitive::LogSoftmax,
        Primitive::L2Normalize,
        Primitive::Scale(0.7),
        Primitive::AddScalar(-0.2),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn composition_obeys_chain_rule(
        i in 0usize..7,
        j in 0usize..7,
        data in proptest::collection::vec(-1.0f64..1.0, 6),
    ) {
        let (f, g) = (smooth_unary()[i].clone(), smooth_unary()[j].clone());
        let x = Tensor::new([2, 3], data).unwrap();
        let err = grad_check_fn(&[x], STEP, |v| {
            let inner = g.apply(v)?;
            f.apply(&[inner])
        })
        .unwrap();
        prop_assert!(err <= TOL, "{} after {}: {err:e}", f.name(), g.name());
    }

    #[test]
    fn forward_and_backward_are_bitwise_reproducible(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = uniform(&mut rng, &[2, 4, 4, 4]).cast::<f32>();
        let w = uniform(&mut rng, &[4, 4, 3, 3]).cast::<f32>();
        let run = || {
            let tape = Tape::new();
            let xv = tape.leaf(x.clone(), true);
            let wv = tape.leaf(w.clone(), true);
            let y = xv.conv2d(wv, None, 1, 1).unwrap().silu().unwrap();
            let loss = y.mean_square().unwrap();
            let g = tape.backward(loss).unwrap();
            (y.to_tensor(), g.get(xv).unwrap().clone(), g.get(wv).unwrap().clone())
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn forward_eval_never_mutates_inputs(data in proptest::collection::vec(-2.0f64..2.0, 8)) {
        let x = Tensor::new([2, 4], data).unwrap();
        let before = x.clone();
        let _ = forward_eval(&Primitive::Softmax, std::slice::from_ref(&x)).unwrap();
        prop_assert_eq!(x, before);
    }
}

#[test]
fn unused_input_gets_no_gradient() {
    let tape = Tape::<f64>::new();
    let a = tape.leaf(Tensor::new([1], vec![1.0]).unwrap(), true);
    let b = tape.leaf(Tensor::new([1], vec![2.0]).unwrap(), true);
    let y = a.scale(3.0).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(a).unwrap().data(), &[3.0]);
    assert!(g.get(b).is_none());
}
