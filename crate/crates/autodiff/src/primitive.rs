//! Named primitive catalog, used to drive primitives generically (gradient
//! checks, benchmarks) without writing one closure per operation.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};

/// A primitive together with its non-tensor attributes.
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddScalar(f64),
    /// Inputs `[m, k]`, `[k, n]`.
    MatMul,
    Transpose,
    /// Inputs `[.., n]`, `[n]`.
    AddRow,
    /// Inputs `x`, `w` and optionally `b`.
    Conv2d {
        stride: usize,
        pad: usize,
    },
    Upsample2x,
    AvgPool(usize),
    /// Inputs `x`, `gamma`, `beta`.
    GroupNorm {
        groups: usize,
    },
    Relu,
    LeakyRelu(f64),
    Silu,
    Tanh,
    Softmax,
    LogSoftmax,
    /// Inputs `x`, `scale`, `shift`.
    Film,
    /// Inputs `x`, `w_qkv`, `b_qkv`, `w_out`, `b_out`.
    Mhsa {
        heads: usize,
    },
    Reshape(Vec<usize>),
    Permute(Vec<usize>),
    Concat(usize),
    Sum,
    Mean,
    /// Mean absolute value.
    L1,
    /// Mean squared value.
    L2,
    L2Normalize,
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Scale(_) => "scale",
            Primitive::AddScalar(_) => "add_scalar",
            Primitive::MatMul => "matmul",
            Primitive::Transpose => "transpose",
            Primitive::AddRow => "add_row",
            Primitive::Conv2d { .. } => "conv2d",
            Primitive::Upsample2x => "upsample2x",
            Primitive::AvgPool(_) => "avg_pool",
            Primitive::GroupNorm { .. } => "group_norm",
            Primitive::Relu => "relu",
            Primitive::LeakyRelu(_) => "leaky_relu",
            Primitive::Silu => "silu",
            Primitive::Tanh => "tanh",
            Primitive::Softmax => "softmax",
            Primitive::LogSoftmax => "log_softmax",
            Primitive::Film => "film",
            Primitive::Mhsa { .. } => "mhsa",
            Primitive::Reshape(_) => "reshape",
            Primitive::Permute(_) => "permute",
            Primitive::Concat(_) => "concat",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::L1 => "mean_abs",
            Primitive::L2 => "mean_square",
            Primitive::L2Normalize => "l2_normalize",
        }
    }

    fn arity(&self) -> std::ops::RangeInclusive<usize> {
        match self {
            Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::MatMul | Primitive::AddRow => 2..=2,
            Primitive::Conv2d { .. } => 2..=3,
            Primitive::GroupNorm { .. } | Primitive::Film => 3..=3,
            Primitive::Mhsa { .. } => 5..=5,
            Primitive::Concat(_) => 1..=usize::MAX,
            _ => 1..=1,
        }
    }

    /// Record this primitive on the inputs' tape.
    pub fn apply<'t, T: Element>(&self, inputs: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        if !self.arity().contains(&inputs.len()) {
            return Err(Error::InvalidArgument(format!(
                "{} takes {:?} inputs, got {}",
                self.name(),
                self.arity(),
                inputs.len()
            )));
        }
        let x = inputs[0];
        match self {
            Primitive::Add => x.add(inputs[1]),
            Primitive::Sub => x.sub(inputs[1]),
            Primitive::Mul => x.mul(inputs[1]),
            Primitive::Scale(c) => x.scale(*c),
            Primitive::AddScalar(c) => x.add_scalar(*c),
            Primitive::MatMul => x.matmul(inputs[1]),
            Primitive::Transpose => x.transpose(),
            Primitive::AddRow => x.add_row(inputs[1]),
            Primitive::Conv2d { stride, pad } => x.conv2d(inputs[1], inputs.get(2).copied(), *stride, *pad),
            Primitive::Upsample2x => x.upsample2x(),
            Primitive::AvgPool(k) => x.avg_pool(*k),
            Primitive::GroupNorm { groups } => x.group_norm(*groups, inputs[1], inputs[2], 1e-5),
            Primitive::Relu => x.relu(),
            Primitive::LeakyRelu(s) => x.leaky_relu(*s),
            Primitive::Silu => x.silu(),
            Primitive::Tanh => x.tanh(),
            Primitive::Softmax => x.softmax(),
            Primitive::LogSoftmax => x.log_softmax(),
            Primitive::Film => x.film(inputs[1], inputs[2]),
            Primitive::Mhsa { heads } => x.mhsa(inputs[1], inputs[2], inputs[3], inputs[4], *heads),
            Primitive::Reshape(shape) => x.reshape(shape.clone()),
            Primitive::Permute(axes) => x.permute(axes),
            Primitive::Concat(axis) => Var::concat(inputs, *axis),
            Primitive::Sum => x.sum(),
            Primitive::Mean => x.mean(),
            Primitive::L1 => x.mean_abs(),
            Primitive::L2 => x.mean_square(),
            Primitive::L2Normalize => x.l2_normalize(),
        }
    }
}

/// Evaluate one primitive on fresh constant inputs.
pub fn forward_eval<T: Element>(primitive: &Primitive, inputs: &[Tensor<T>]) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    Ok(primitive.apply(&vars)?.to_tensor())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arity_is_enforced() {
        let a = Tensor::<f64>::zeros([2]);
        assert!(matches!(
            forward_eval(&Primitive::Add, &[a]),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn forward_eval_matches_direct_call() {
        let a = Tensor::new([2], vec![1.0f32, 2.0]).unwrap();
        let b = Tensor::new([2], vec![3.0f32, 4.0]).unwrap();
        assert_eq!(forward_eval(&Primitive::Add, &[a, b]).unwrap().data(), &[4.0, 6.0]);
    }
}
