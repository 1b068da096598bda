//! Parameter storage and the small set of layers the networks are built from.

use std::sync::Arc;

use autodiff::{Element, Tape, Tensor, TensorPack, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Named, ordered parameter tensors of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T: Element> {
    names: Vec<String>,
    values: Vec<Arc<Tensor<T>>>,
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
        }
    }
}

impl<T: Element> ParamStore<T> {
    pub fn add(&mut self, name: String, value: Tensor<T>) -> usize {
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(Arc::new(value));
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, i: usize) -> &Tensor<T> {
        &self.values[i]
    }

    /// Mutable access; copies the tensor first if a tape still shares it.
    pub fn get_mut(&mut self, i: usize) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.values[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.values.iter().map(|v| &**v))
    }

    /// Total scalar parameter count.
    pub fn numel(&self) -> usize {
        self.values.iter().map(|v| v.numel()).sum()
    }

    /// Record every parameter as a leaf on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, requires_grad: bool) -> Vec<Var<'t, T>> {
        self.values
            .iter()
            .map(|v| tape.leaf_shared(Arc::clone(v), requires_grad))
            .collect()
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(|v| Arc::new(v.cast())).collect(),
        }
    }

    pub fn save_into(&self, prefix: &str, pack: &mut TensorPack) -> Result<()> {
        for (name, v) in self.iter() {
            pack.push(&format!("{prefix}.{name}"), v)?;
        }
        Ok(())
    }

    /// Overwrite every parameter from `pack`; shapes must match exactly.
    pub fn load_from(&mut self, prefix: &str, pack: &TensorPack) -> Result<()> {
        for i in 0..self.len() {
            let key = format!("{prefix}.{}", self.names[i]);
            let t: Tensor<T> = pack.tensor(&key)?;
            if t.shape() != self.values[i].shape() {
                return Err(Error::Checkpoint(format!(
                    "{key}: stored shape {:?}, expected {:?}",
                    t.shape(),
                    self.values[i].shape()
                )));
            }
            self.values[i] = Arc::new(t);
        }
        Ok(())
    }
}

/// Registers parameters under a name prefix while a network is constructed.
pub struct Builder<'a, T: Element> {
    pub store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Element> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        Builder {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
            prefix: String::new(),
        }
    }

    /// Run `f` with `name` appended to the prefix.
    pub fn scope<R>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> R) -> R {
        let saved = self.prefix.clone();
        if !self.prefix.is_empty() {
            self.prefix.push('.');
        }
        self.prefix.push_str(name);
        let out = f(self);
        self.prefix = saved;
        out
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    /// `U(-bound, bound)` with `bound = 1/sqrt(fan_in)`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> usize {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64_lossy(self.rng.random_range(-bound..bound)))
            .collect();
        let t = Tensor::new(shape.to_vec(), data).expect("layer shapes are positive");
        self.store.add(self.full_name(name), t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> usize {
        let t = Tensor::full(shape.to_vec(), T::from_f64_lossy(value));
        self.store.add(self.full_name(name), t)
    }
}

/// Bound parameters of one network on one tape.
pub type Params<'p, 't, T> = &'p [Var<'t, T>];

#[derive(Debug, Clone)]
pub struct Conv {
    w: usize,
    b: Option<usize>,
    stride: usize,
    pad: usize,
}

impl Conv {
    pub fn new<T: Element>(
        bld: &mut Builder<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        bld.scope(name, |bld| {
            let fan_in = cin * k * k;
            Conv {
                w: bld.uniform("w", &[cout, cin, k, k], fan_in),
                b: Some(bld.uniform("b", &[cout], fan_in)),
                stride,
                pad,
            }
        })
    }

    /// Same-size `k x k` convolution.
    pub fn same<T: Element>(bld: &mut Builder<'_, T>, name: &str, cin: usize, cout: usize, k: usize) -> Self {
        Self::new(bld, name, cin, cout, k, 1, k / 2)
    }

    pub fn fwd<'t, T: Element>(&self, p: Params<'_, 't, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(x.conv2d(p[self.w], self.b.map(|b| p[b]), self.stride, self.pad)?)
    }
}

/// Group normalization with 8 groups, or one group per channel below 8.
#[derive(Debug, Clone)]
pub struct Norm {
    gamma: usize,
    beta: usize,
    groups: usize,
}

pub fn norm_groups(channels: usize) -> usize {
    if channels >= 8 && channels.is_multiple_of(8) {
        8
    } else {
        channels
    }
}

impl Norm {
    pub fn new<T: Element>(bld: &mut Builder<'_, T>, name: &str, channels: usize) -> Self {
        bld.scope(name, |bld| Norm {
            gamma: bld.constant("gamma", &[channels], 1.0),
            beta: bld.constant("beta", &[channels], 0.0),
            groups: norm_groups(channels),
        })
    }

    pub fn fwd<'t, T: Element>(&self, p: Params<'_, 't, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(x.group_norm(self.groups, p[self.gamma], p[self.beta], 1e-5)?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    w: usize,
    b: usize,
}

impl Linear {
    pub fn new<T: Element>(bld: &mut Builder<'_, T>, name: &str, din: usize, dout: usize) -> Self {
        bld.scope(name, |bld| Linear {
            w: bld.uniform("w", &[din, dout], din),
            b: bld.uniform("b", &[dout], din),
        })
    }

    pub fn fwd<'t, T: Element>(&self, p: Params<'_, 't, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(x.linear(p[self.w], p[self.b])?)
    }
}

/// Sinusoidal features of `1000 t`, shape `[len(t), dim]`.
pub fn sinusoidal<T: Element>(t: &[f64], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        let s = 1000.0 * ti;
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            out.push(T::from_f64_lossy((s * freq).sin()));
        }
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            out.push(T::from_f64_lossy((s * freq).cos()));
        }
        out.extend(std::iter::repeat_n(T::zero(), dim - 2 * half));
    }
    Tensor::new([t.len(), dim], out).expect("positive embedding shape")
}

/// Sinusoidal features followed by a two-layer SiLU MLP.
#[derive(Debug, Clone)]
pub struct TimeMlp {
    pub dim: usize,
    l1: Linear,
    l2: Linear,
}

impl TimeMlp {
    pub fn new<T: Element>(bld: &mut Builder<'_, T>, name: &str, dim: usize) -> Self {
        bld.scope(name, |bld| TimeMlp {
            dim,
            l1: Linear::new(bld, "l1", dim, dim),
            l2: Linear::new(bld, "l2", dim, dim),
        })
    }

    pub fn fwd<'t, T: Element>(&self, p: Params<'_, 't, T>, tape: &'t Tape<T>, t: &[f64]) -> Result<Var<'t, T>> {
        let feats = tape.constant(sinusoidal(t, self.dim));
        let h = self.l1.fwd(p, feats)?.silu()?;
        self.l2.fwd(p, h)
    }
}

/// Residual block whose second normalization is modulated by the time
/// embedding: `x*(1+scale) + shift`.
#[derive(Debug, Clone)]
pub struct FilmResBlock {
    n1: Norm,
    c1: Conv,
    n2: Norm,
    c2: Conv,
    film: Option<(Linear, Linear)>,
    skip: Option<Conv>,
}

impl FilmResBlock {
    /// `tdim = None` builds the same block without time modulation.
    pub fn new<T: Element>(bld: &mut Builder<'_, T>, name: &str, cin: usize, cout: usize, tdim: Option<usize>) -> Self {
        bld.scope(name, |bld| FilmResBlock {
            n1: Norm::new(bld, "n1", cin),
            c1: Conv::same(bld, "c1", cin, cout, 3),
            n2: Norm::new(bld, "n2", cout),
            c2: Conv::same(bld, "c2", cout, cout, 3),
            film: tdim.map(|d| (Linear::new(bld, "scale", d, cout), Linear::new(bld, "shift", d, cout))),
            skip: (cin != cout).then(|| Conv::same(bld, "skip", cin, cout, 1)),
        })
    }

    pub fn fwd<'t, T: Element>(
        &self,
        p: Params<'_, 't, T>,
        x: Var<'t, T>,
        temb: Option<Var<'t, T>>,
    ) -> Result<Var<'t, T>> {
        let h = self.c1.fwd(p, self.n1.fwd(p, x)?.silu()?)?;
        let mut h = self.n2.fwd(p, h)?;
        if let (Some((scale, shift)), Some(temb)) = (&self.film, temb) {
            let act = temb.silu()?;
            h = h.film(scale.fwd(p, act)?, shift.fwd(p, act)?)?;
        }
        let h = h.silu()?;
        let h = self.c2.fwd(p, h)?;
        let skip = match &self.skip {
            Some(c) => c.fwd(p, x)?,
            None => x,
        };
        Ok(h.add(skip)?)
    }
}

/// Unconditioned residual block: conv-norm-relu-conv-norm plus identity.
#[derive(Debug, Clone)]
pub struct ResBlock {
    c1: Conv,
    n1: Norm,
    c2: Conv,
    n2: Norm,
}

impl ResBlock {
    pub fn new<T: Element>(bld: &mut Builder<'_, T>, name: &str, ch: usize) -> Self {
        bld.scope(name, |bld| ResBlock {
            c1: Conv::same(bld, "c1", ch, ch, 3),
            n1: Norm::new(bld, "n1", ch),
            c2: Conv::same(bld, "c2", ch, ch, 3),
            n2: Norm::new(bld, "n2", ch),
        })
    }

    pub fn fwd<'t, T: Element>(&self, p: Params<'_, 't, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let h = self.n1.fwd(p, self.c1.fwd(p, x)?)?.relu()?;
        let h = self.n2.fwd(p, self.c2.fwd(p, h)?)?;
        Ok(h.add(x)?)
    }
}

/// Pre-norm multi-head self-attention with a residual connection.
#[derive(Debug, Clone)]
pub struct Attention {
    norm: Norm,
    w_qkv: usize,
    b_qkv: usize,
    w_out: usize,
    b_out: usize,
    heads: usize,
    pool: usize,
}

impl Attention {
    /// `pool` (a power of two) average-pools the tokens before attending and
    /// repeats the result back to full resolution.
    pub fn new<T: Element>(bld: &mut Builder<'_, T>, name: &str, ch: usize, heads: usize, pool: usize) -> Self {
        bld.scope(name, |bld| Attention {
            norm: Norm::new(bld, "norm", ch),
            w_qkv: bld.uniform("w_qkv", &[3 * ch, ch], ch),
            b_qkv: bld.constant("b_qkv", &[3 * ch], 0.0),
            w_out: bld.uniform("w_out", &[ch, ch], ch),
            b_out: bld.constant("b_out", &[ch], 0.0),
            heads,
            pool,
        })
    }

    pub fn fwd<'t, T: Element>(&self, p: Params<'_, 't, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let mut h = x;
        if self.pool > 1 {
            h = h.avg_pool(self.pool)?;
        }
        h = self.norm.fwd(p, h)?;
        let mut a = h.mhsa(p[self.w_qkv], p[self.b_qkv], p[self.w_out], p[self.b_out], self.heads)?;
        let mut k = 1;
        while k < self.pool {
            a = a.upsample2x()?;
            k *= 2;
        }
        Ok(x.add(a)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builder_scopes_names() {
        let mut store = ParamStore::<f32>::default();
        let mut bld = Builder::new(&mut store, 0);
        bld.scope("enc", |b| Conv::same(b, "c1", 1, 4, 3));
        let names: Vec<_> = store.names().to_vec();
        assert_eq!(names, ["enc.c1.w", "enc.c1.b"]);
        assert_eq!(store.numel(), 4 * 9 + 4);
    }

    #[test]
    fn norm_falls_back_to_instance_norm() {
        assert_eq!(norm_groups(32), 8);
        assert_eq!(norm_groups(4), 4);
        assert_eq!(norm_groups(1), 1);
    }

    #[test]
    fn sinusoidal_is_bounded_and_time_dependent() {
        let e = sinusoidal::<f64>(&[0.0, 1.0], 64);
        assert_eq!(e.shape(), &[2, 64]);
        assert!(e.data().iter().all(|v| v.abs() <= 1.0));
        assert_ne!(&e.data()[..64], &e.data()[64..]);
    }

    #[test]
    fn pack_round_trip_restores_parameters() {
        let mut store = ParamStore::<f32>::default();
        Linear::new(&mut Builder::new(&mut store, 3), "fc", 3, 2);
        let mut pack = TensorPack::new();
        store.save_into("net", &mut pack).unwrap();
        let mut other = ParamStore::<f32>::default();
        Linear::new(&mut Builder::new(&mut other, 4), "fc", 3, 2);
        assert_ne!(store, other);
        other.load_from("net", &pack).unwrap();
        assert_eq!(store, other);
    }
}
