//! Central-difference verification of analytic gradients (float64 only).

use crate::error::{Error, Result};
use crate::primitive::Primitive;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Fixed projection weights used to reduce a non-scalar output to a scalar.
fn projection(n: usize) -> Tensor<f64> {
    let data = (0..n)
        .map(|i| {
            let u = ((i as f64 + 1.0) * 0.618_033_988_749_895).fract();
            0.5 + u
        })
        .collect::<Vec<_>>();
    Tensor::new([n], data).expect("positive length")
}

fn reduce<'t>(out: Var<'t, f64>) -> Result<Var<'t, f64>> {
    if out.value().numel() == 1 {
        return out.reshape([1]);
    }
    let n = out.value().numel();
    let w = out.tape().constant(projection(n));
    out.reshape([n])?.mul(w)?.sum()
}

fn eval_scalar<F>(inputs: &[Tensor<f64>], f: &F) -> Result<f64>
where
    F: for<'t> Fn(&[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    Ok(reduce(f(&vars)?)?.item())
}

/// Max relative error between analytic and central-difference gradients of
/// `f` over every coordinate of every input.
///
/// Relative error is `|a - c| / max(|a|, |c|, 1e-8)`.
pub fn grad_check_fn<F>(inputs: &[Tensor<f64>], step: f64, f: F) -> Result<f64>
where
    F: for<'t> Fn(&[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    if !(1e-6..=1e-3).contains(&step) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step {step} outside [1e-6, 1e-3]"
        )));
    }
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = reduce(f(&vars)?)?;
    let grads = tape.backward(loss)?;
    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let zeros = Tensor::zeros(inputs[k].shape().to_vec());
        let analytic = grads.get(*var).unwrap_or(&zeros).data().to_vec();
        for (i, &a) in analytic.iter().enumerate() {
            let orig = inputs[k].data()[i];
            probe[k].data_mut()[i] = orig + step;
            let up = eval_scalar(&probe, &f)?;
            probe[k].data_mut()[i] = orig - step;
            let down = eval_scalar(&probe, &f)?;
            probe[k].data_mut()[i] = orig;
            let central = (up - down) / (2.0 * step);
            let rel = (a - central).abs() / a.abs().max(central.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// [`grad_check_fn`] for a single cataloged primitive.
pub fn grad_check(primitive: &Primitive, inputs: &[Tensor<f64>], step: f64) -> Result<f64> {
    grad_check_fn(inputs, step, |vars| primitive.apply(vars))
}

/// Deterministic values in `[-1, 1]` (splitmix64), or with magnitude in
/// `[0.1, 1]` when `off_zero` is set, for primitives with a kink at 0.
fn probe(state: &mut u64, shape: &[usize], off_zero: bool) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
            let mut z = *state;
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
            let v = ((z ^ (z >> 31)) >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0;
            if off_zero {
                v.signum() * (0.1 + 0.9 * v.abs())
            } else {
                v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("positive shape")
}

/// One small input set for every primitive, for use with [`grad_check`].
pub fn reference_cases(seed: u64) -> Vec<(Primitive, Vec<Tensor<f64>>)> {
    let mut state = seed;
    let mut u = |s: &[usize]| probe(&mut state, s, false);
    let mut cases = vec![
        (Primitive::Add, vec![u(&[2, 3]), u(&[2, 3])]),
        (Primitive::Sub, vec![u(&[2, 3]), u(&[2, 3])]),
        (Primitive::Mul, vec![u(&[2, 3]), u(&[2, 3])]),
        (Primitive::Scale(-1.7), vec![u(&[4])]),
        (Primitive::AddScalar(0.3), vec![u(&[4])]),
        (Primitive::MatMul, vec![u(&[3, 4]), u(&[4, 2])]),
        (Primitive::Transpose, vec![u(&[3, 2])]),
        (Primitive::AddRow, vec![u(&[3, 4]), u(&[4])]),
        (
            Primitive::Conv2d { stride: 1, pad: 1 },
            vec![u(&[1, 1, 4, 4]), u(&[2, 1, 3, 3]), u(&[2])],
        ),
        (
            Primitive::Conv2d { stride: 2, pad: 1 },
            vec![u(&[2, 2, 6, 6]), u(&[3, 2, 4, 4]), u(&[3])],
        ),
        (
            Primitive::Conv2d { stride: 1, pad: 3 },
            vec![u(&[1, 2, 5, 5]), u(&[2, 2, 7, 7])],
        ),
        (
            Primitive::Conv2d { stride: 1, pad: 0 },
            vec![u(&[2, 3, 3, 3]), u(&[2, 3, 1, 1])],
        ),
        (Primitive::Upsample2x, vec![u(&[1, 2, 2, 3])]),
        (Primitive::AvgPool(2), vec![u(&[1, 2, 4, 4])]),
        (
            Primitive::GroupNorm { groups: 2 },
            vec![u(&[2, 4, 3, 3]), u(&[4]), u(&[4])],
        ),
        (
            Primitive::GroupNorm { groups: 3 },
            vec![u(&[1, 3, 2, 2]), u(&[3]), u(&[3])],
        ),
        (Primitive::Silu, vec![u(&[5])]),
        (Primitive::Tanh, vec![u(&[5])]),
        (Primitive::Softmax, vec![u(&[2, 4])]),
        (Primitive::LogSoftmax, vec![u(&[2, 4])]),
        (Primitive::Film, vec![u(&[2, 3, 2, 2]), u(&[2, 3]), u(&[2, 3])]),
        (
            Primitive::Mhsa { heads: 2 },
            vec![u(&[1, 4, 2, 4]), u(&[12, 4]), u(&[12]), u(&[4, 4]), u(&[4])],
        ),
        (
            Primitive::Mhsa { heads: 4 },
            vec![u(&[2, 4, 2, 2]), u(&[12, 4]), u(&[12]), u(&[4, 4]), u(&[4])],
        ),
        (Primitive::Reshape(vec![3, 2]), vec![u(&[2, 3])]),
        (Primitive::Permute(vec![2, 0, 1]), vec![u(&[2, 3, 2])]),
        (Primitive::Concat(1), vec![u(&[2, 1, 3]), u(&[2, 2, 3])]),
        (Primitive::Sum, vec![u(&[3, 2])]),
        (Primitive::Mean, vec![u(&[3, 2])]),
        (Primitive::L2, vec![u(&[3, 2])]),
        (Primitive::L2Normalize, vec![u(&[3, 4])]),
    ];
    for p in [Primitive::Relu, Primitive::LeakyRelu(0.2), Primitive::L1] {
        cases.push((p, vec![probe(&mut state, &[6], true)]));
    }
    cases
}
