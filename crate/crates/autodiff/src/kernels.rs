//! Forward and backward kernels for the heavier primitives.
//!
//! Everything here works on raw row-major slices; shape checking happens in
//! the tape before a kernel is called.

use crate::tensor::Element;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Option<Self> {
        let (b, ci, h, wd) = (x[0], x[1], x[2], x[3]);
        let (co, wci, kh, kw) = (w[0], w[1], w[2], w[3]);
        if ci != wci || stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kw {
            return None;
        }
        Some(ConvGeom {
            batch: b,
            in_ch: ci,
            in_h: h,
            in_w: wd,
            out_ch: co,
            kh,
            kw,
            stride,
            pad,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (wd + 2 * pad - kw) / stride + 1,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch_len(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_image(&self) -> usize {
        self.in_ch * self.in_h * self.in_w
    }
}

fn im2col<T: Element>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.in_ch {
        let xc = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let drow = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.in_h as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.in_w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.in_ch {
        let dxc = &mut dx[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let drow = &mut dxc[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            drow[ix as usize] = drow[ix as usize] + src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Element>(g: &ConvGeom, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let plane = g.out_plane();
    let k = g.patch_len();
    let mut out = vec![T::zero(); g.batch * g.out_ch * plane];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * plane]
    };
    for b in 0..g.batch {
        let xb = &x[b * g.in_image()..(b + 1) * g.in_image()];
        let ob = &mut out[b * g.out_ch * plane..(b + 1) * g.out_ch * plane];
        if let Some(bias) = bias {
            for (co, row) in ob.chunks_mut(plane).enumerate() {
                row.fill(bias[co]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        let src: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(g, xb, &mut cols);
            &cols
        };
        T::gemm(
            g.out_ch,
            k,
            plane,
            T::one(),
            w,
            k as isize,
            1,
            src,
            plane as isize,
            1,
            beta,
            ob,
            plane as isize,
            1,
        );
    }
    out
}

/// Gradients of a convolution; each requested output is accumulated into.
pub fn conv2d_backward<T: Element>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let plane = g.out_plane();
    let k = g.patch_len();
    let pointwise = g.is_pointwise();
    let mut cols = if pointwise {
        Vec::new()
    } else {
        vec![T::zero(); k * plane]
    };
    let mut dcols = if pointwise || dx.is_none() {
        Vec::new()
    } else {
        vec![T::zero(); k * plane]
    };
    for b in 0..g.batch {
        let xb = &x[b * g.in_image()..(b + 1) * g.in_image()];
        let dyb = &dy[b * g.out_ch * plane..(b + 1) * g.out_ch * plane];
        if let Some(db) = db.as_deref_mut() {
            for (co, row) in dyb.chunks(plane).enumerate() {
                db[co] = db[co] + row.iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = dw.as_deref_mut() {
            let src: &[T] = if pointwise {
                xb
            } else {
                im2col(g, xb, &mut cols);
                &cols
            };
            // dW[co, k] += dy[co, l] * cols[k, l]
            T::gemm(
                g.out_ch,
                plane,
                k,
                T::one(),
                dyb,
                plane as isize,
                1,
                src,
                1,
                plane as isize,
                T::one(),
                dw,
                k as isize,
                1,
            );
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxb = &mut dx[b * g.in_image()..(b + 1) * g.in_image()];
            if pointwise {
                T::gemm(
                    k,
                    g.out_ch,
                    plane,
                    T::one(),
                    w,
                    1,
                    k as isize,
                    dyb,
                    plane as isize,
                    1,
                    T::one(),
                    dxb,
                    plane as isize,
                    1,
                );
            } else {
                T::gemm(
                    k,
                    g.out_ch,
                    plane,
                    T::one(),
                    w,
                    1,
                    k as isize,
                    dyb,
                    plane as isize,
                    1,
                    T::zero(),
                    &mut dcols,
                    plane as isize,
                    1,
                );
                col2im(g, &dcols, dxb);
            }
        }
    }
}

/// Per-group statistics saved by the group-norm forward pass.
#[derive(Debug, Clone)]
pub struct GroupStats<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

pub fn group_norm_forward<T: Element>(
    x: &[T],
    shape: &[usize],
    groups: usize,
    gamma: &[T],
    beta: &[T],
    eps: f64,
) -> (Vec<T>, GroupStats<T>) {
    let (b, c) = (shape[0], shape[1]);
    let hw: usize = shape[2..].iter().product();
    let cpg = c / groups;
    let glen = cpg * hw;
    let n = T::from_usize(glen).unwrap();
    let eps = T::from_f64_lossy(eps);
    let mut out = vec![T::zero(); x.len()];
    let mut mean = Vec::with_capacity(b * groups);
    let mut rstd = Vec::with_capacity(b * groups);
    for bi in 0..b {
        for g in 0..groups {
            let off = (bi * c + g * cpg) * hw;
            let xs = &x[off..off + glen];
            let m = xs.iter().copied().sum::<T>() / n;
            let var = xs.iter().map(|&v| (v - m) * (v - m)).sum::<T>() / n;
            let r = T::one() / (var + eps).sqrt();
            mean.push(m);
            rstd.push(r);
            for ci in 0..cpg {
                let ch = g * cpg + ci;
                let base = off + ci * hw;
                for i in base..base + hw {
                    out[i] = (x[i] - m) * r * gamma[ch] + beta[ch];
                }
            }
        }
    }
    (out, GroupStats { mean, rstd })
}

#[allow(clippy::too_many_arguments)]
pub fn group_norm_backward<T: Element>(
    x: &[T],
    shape: &[usize],
    groups: usize,
    gamma: &[T],
    stats: &GroupStats<T>,
    dy: &[T],
    mut dx: Option<&mut [T]>,
    mut dgamma: Option<&mut [T]>,
    mut dbeta: Option<&mut [T]>,
) {
    let (b, c) = (shape[0], shape[1]);
    let hw: usize = shape[2..].iter().product();
    let cpg = c / groups;
    let glen = cpg * hw;
    let n = T::from_usize(glen).unwrap();
    for bi in 0..b {
        for g in 0..groups {
            let gi = bi * groups + g;
            let (m, r) = (stats.mean[gi], stats.rstd[gi]);
            let off = (bi * c + g * cpg) * hw;
            let mut sum_dxhat = T::zero();
            let mut sum_dxhat_xhat = T::zero();
            for ci in 0..cpg {
                let ch = g * cpg + ci;
                let base = off + ci * hw;
                let mut dg = T::zero();
                let mut dbt = T::zero();
                for i in base..base + hw {
                    let xhat = (x[i] - m) * r;
                    dg = dg + dy[i] * xhat;
                    dbt = dbt + dy[i];
                    let dxhat = dy[i] * gamma[ch];
                    sum_dxhat = sum_dxhat + dxhat;
                    sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
                }
                if let Some(dgm) = dgamma.as_deref_mut() {
                    dgm[ch] = dgm[ch] + dg;
                }
                if let Some(dbm) = dbeta.as_deref_mut() {
                    dbm[ch] = dbm[ch] + dbt;
                }
            }
            if let Some(dx) = dx.as_deref_mut() {
                let mean_dxhat = sum_dxhat / n;
                let mean_dxhat_xhat = sum_dxhat_xhat / n;
                for ci in 0..cpg {
                    let ch = g * cpg + ci;
                    let base = off + ci * hw;
                    for i in base..base + hw {
                        let xhat = (x[i] - m) * r;
                        let dxhat = dy[i] * gamma[ch];
                        dx[i] = dx[i] + r * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                    }
                }
            }
        }
    }
}

pub fn softmax_rows<T: Element>(x: &[T], row: usize) -> Vec<T> {
    let mut out = x.to_vec();
    for r in out.chunks_mut(row) {
        softmax_in_place(r);
    }
    out
}

pub fn softmax_in_place<T: Element>(r: &mut [T]) {
    let max = r.iter().copied().fold(T::neg_infinity(), T::max);
    for v in r.iter_mut() {
        *v = *v - max;
    }
    T::exp_in_place(r);
    let s: T = r.iter().copied().sum();
    let inv = T::one() / s;
    for v in r.iter_mut() {
        *v = *v * inv;
    }
}

pub fn log_softmax_rows<T: Element>(x: &[T], row: usize) -> Vec<T> {
    let mut out = x.to_vec();
    let mut tmp = vec![T::zero(); row];
    for r in out.chunks_mut(row) {
        let max = r.iter().copied().fold(T::neg_infinity(), T::max);
        for (t, &v) in tmp.iter_mut().zip(r.iter()) {
            *t = v - max;
        }
        T::exp_in_place(&mut tmp);
        let lse = tmp.iter().copied().sum::<T>().ln() + max;
        for v in r.iter_mut() {
            *v = *v - lse;
        }
    }
    out
}

/// Geometry of a multi-head self-attention call over `tokens` positions.
#[derive(Debug, Clone, Copy)]
pub struct AttnGeom {
    pub batch: usize,
    pub channels: usize,
    pub tokens: usize,
    pub heads: usize,
}

impl AttnGeom {
    fn head_dim(&self) -> usize {
        self.channels / self.heads
    }
}

/// Projected q/k/v for one batch element: `[3C, L]`, channel-major.
fn project_qkv<T: Element>(g: &AttnGeom, xb: &[T], w_qkv: &[T], b_qkv: &[T]) -> Vec<T> {
    let (c, l) = (g.channels, g.tokens);
    let mut qkv = vec![T::zero(); 3 * c * l];
    for (row, chunk) in qkv.chunks_mut(l).enumerate() {
        chunk.fill(b_qkv[row]);
    }
    T::gemm(
        3 * c,
        c,
        l,
        T::one(),
        w_qkv,
        c as isize,
        1,
        xb,
        l as isize,
        1,
        T::one(),
        &mut qkv,
        l as isize,
        1,
    );
    qkv
}

/// Row-softmaxed scores `P[i, j]` for one head.
fn head_probs<T: Element>(g: &AttnGeom, qkv: &[T], h: usize, probs: &mut [T]) {
    let (c, l, d) = (g.channels, g.tokens, g.head_dim());
    let q = &qkv[h * d * l..(h + 1) * d * l];
    let k = &qkv[(c + h * d) * l..(c + (h + 1) * d) * l];
    let scale = T::one() / T::from_usize(d).unwrap().sqrt();
    // S[i, j] = sum_c q[c, i] k[c, j]
    T::gemm(
        l,
        d,
        l,
        scale,
        q,
        1,
        l as isize,
        k,
        l as isize,
        1,
        T::zero(),
        probs,
        l as isize,
        1,
    );
    for r in probs.chunks_mut(l) {
        softmax_in_place(r);
    }
}

pub fn mhsa_forward<T: Element>(g: &AttnGeom, x: &[T], w_qkv: &[T], b_qkv: &[T], w_out: &[T], b_out: &[T]) -> Vec<T> {
    let (c, l, d) = (g.channels, g.tokens, g.head_dim());
    let mut out = vec![T::zero(); g.batch * c * l];
    let mut probs = vec![T::zero(); l * l];
    let mut heads = vec![T::zero(); c * l];
    for b in 0..g.batch {
        let xb = &x[b * c * l..(b + 1) * c * l];
        let qkv = project_qkv(g, xb, w_qkv, b_qkv);
        for h in 0..g.heads {
            head_probs(g, &qkv, h, &mut probs);
            let v = &qkv[(2 * c + h * d) * l..(2 * c + (h + 1) * d) * l];
            // O[c, i] = sum_j V[c, j] P[i, j]
            T::gemm(
                d,
                l,
                l,
                T::one(),
                v,
                l as isize,
                1,
                &probs,
                1,
                l as isize,
                T::zero(),
                &mut heads[h * d * l..(h + 1) * d * l],
                l as isize,
                1,
            );
        }
        let ob = &mut out[b * c * l..(b + 1) * c * l];
        for (row, chunk) in ob.chunks_mut(l).enumerate() {
            chunk.fill(b_out[row]);
        }
        T::gemm(
            c,
            c,
            l,
            T::one(),
            w_out,
            c as isize,
            1,
            &heads,
            l as isize,
            1,
            T::one(),
            ob,
            l as isize,
            1,
        );
    }
    out
}

pub struct AttnGrads<'a, T> {
    pub dx: Option<&'a mut [T]>,
    pub dw_qkv: Option<&'a mut [T]>,
    pub db_qkv: Option<&'a mut [T]>,
    pub dw_out: Option<&'a mut [T]>,
    pub db_out: Option<&'a mut [T]>,
}

/// Attention backward. Scores are recomputed per head instead of stored.
pub fn mhsa_backward<T: Element>(
    g: &AttnGeom,
    x: &[T],
    w_qkv: &[T],
    b_qkv: &[T],
    w_out: &[T],
    dy: &[T],
    mut grads: AttnGrads<'_, T>,
) {
    let (c, l, d) = (g.channels, g.tokens, g.head_dim());
    let scale = T::one() / T::from_usize(d).unwrap().sqrt();
    let mut probs = vec![T::zero(); l * l];
    let mut dprobs = vec![T::zero(); l * l];
    let mut heads = vec![T::zero(); c * l];
    let mut dheads = vec![T::zero(); c * l];
    let need_inner = grads.dx.is_some() || grads.dw_qkv.is_some() || grads.db_qkv.is_some();
    for b in 0..g.batch {
        let xb = &x[b * c * l..(b + 1) * c * l];
        let dyb = &dy[b * c * l..(b + 1) * c * l];
        let qkv = project_qkv(g, xb, w_qkv, b_qkv);
        if let Some(db) = grads.db_out.as_deref_mut() {
            for (row, chunk) in dyb.chunks(l).enumerate() {
                db[row] = db[row] + chunk.iter().copied().sum::<T>();
            }
        }
        if grads.dw_out.is_some() {
            for h in 0..g.heads {
                head_probs(g, &qkv, h, &mut probs);
                let v = &qkv[(2 * c + h * d) * l..(2 * c + (h + 1) * d) * l];
                T::gemm(
                    d,
                    l,
                    l,
                    T::one(),
                    v,
                    l as isize,
                    1,
                    &probs,
                    1,
                    l as isize,
                    T::zero(),
                    &mut heads[h * d * l..(h + 1) * d * l],
                    l as isize,
                    1,
                );
            }
            // dWout[c, c'] += dy[c, l] O[c', l]
            T::gemm(
                c,
                l,
                c,
                T::one(),
                dyb,
                l as isize,
                1,
                &heads,
                1,
                l as isize,
                T::one(),
                grads.dw_out.as_deref_mut().unwrap(),
                c as isize,
                1,
            );
        }
        if !need_inner {
            continue;
        }
        // dO = Wout^T dy
        T::gemm(
            c,
            c,
            l,
            T::one(),
            w_out,
            1,
            c as isize,
            dyb,
            l as isize,
            1,
            T::zero(),
            &mut dheads,
            l as isize,
            1,
        );
        let mut dqkv = vec![T::zero(); 3 * c * l];
        for h in 0..g.heads {
            head_probs(g, &qkv, h, &mut probs);
            let q = &qkv[h * d * l..(h + 1) * d * l];
            let k = &qkv[(c + h * d) * l..(c + (h + 1) * d) * l];
            let v = &qkv[(2 * c + h * d) * l..(2 * c + (h + 1) * d) * l];
            let doh = &dheads[h * d * l..(h + 1) * d * l];
            // dV[c, j] = sum_i dO[c, i] P[i, j]
            T::gemm(
                d,
                l,
                l,
                T::one(),
                doh,
                l as isize,
                1,
                &probs,
                l as isize,
                1,
                T::zero(),
                &mut dqkv[(2 * c + h * d) * l..(2 * c + (h + 1) * d) * l],
                l as isize,
                1,
            );
            // dP[i, j] = sum_c dO[c, i] V[c, j]
            T::gemm(
                l,
                d,
                l,
                T::one(),
                doh,
                1,
                l as isize,
                v,
                l as isize,
                1,
                T::zero(),
                &mut dprobs,
                l as isize,
                1,
            );
            for (prow, drow) in probs.chunks(l).zip(dprobs.chunks_mut(l)) {
                let dot: T = prow.iter().zip(drow.iter()).map(|(&p, &dp)| p * dp).sum();
                for (dp, &p) in drow.iter_mut().zip(prow) {
                    *dp = p * (*dp - dot) * scale;
                }
            }
            // dQ[c, i] = sum_j K[c, j] dS[i, j]
            T::gemm(
                d,
                l,
                l,
                T::one(),
                k,
                l as isize,
                1,
                &dprobs,
                1,
                l as isize,
                T::zero(),
                &mut dqkv[h * d * l..(h + 1) * d * l],
                l as isize,
                1,
            );
            // dK[c, j] = sum_i Q[c, i] dS[i, j]
            T::gemm(
                d,
                l,
                l,
                T::one(),
                q,
                l as isize,
                1,
                &dprobs,
                l as isize,
                1,
                T::zero(),
                &mut dqkv[(c + h * d) * l..(c + (h + 1) * d) * l],
                l as isize,
                1,
            );
        }
        if let Some(db) = grads.db_qkv.as_deref_mut() {
            for (row, chunk) in dqkv.chunks(l).enumerate() {
                db[row] = db[row] + chunk.iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = grads.dw_qkv.as_deref_mut() {
            T::gemm(
                3 * c,
                l,
                c,
                T::one(),
                &dqkv,
                l as isize,
                1,
                xb,
                1,
                l as isize,
                T::one(),
                dw,
                c as isize,
                1,
            );
        }
        if let Some(dx) = grads.dx.as_deref_mut() {
            T::gemm(
                c,
                3 * c,
                l,
                T::one(),
                w_qkv,
                1,
                c as isize,
                &dqkv,
                l as isize,
                1,
                T::one(),
                &mut dx[b * c * l..(b + 1) * c * l],
                l as isize,
                1,
            );
        }
    }
}

/// Index map for a general axis permutation: `out[i] = x[map[i]]`.
pub fn permute_index(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let nd = shape.len();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let numel: usize = shape.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; nd];
    for _ in 0..numel {
        map.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
        for d in (0..nd).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    map
}
