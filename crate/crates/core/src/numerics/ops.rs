//! Forward kernels on [`Tensor`] values plus the matching adjoint routines
//! used by the gradient graph.
//!
//! All reductions run in ascending input-index order so results are
//! bit-reproducible. Kernels that contract (matmul, conv3d) report the number
//! of multiply-accumulates they executed.

use crate::error::{Error, Result};
use crate::numerics::tensor::{strides_of, Element, Tensor, MAX_RANK};

// ---------------------------------------------------------------------------
// Broadcasting element-wise ops

/// Right-aligned broadcast of two dims lists.
pub fn broadcast_dims(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![1; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank {
            a[i + a.len() - rank]
        } else {
            1
        };
        let db = if i + b.len() >= rank {
            b[i + b.len() - rank]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::mismatch(op, a, b)),
        };
    }
    Ok(out)
}

/// Strides of `dims` aligned to `out`, with zero stride on broadcast axes.
fn aligned_strides(dims: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides_of(dims);
    let lead = out.len() - dims.len();
    (0..out.len())
        .map(|i| {
            if i < lead || dims[i - lead] == 1 {
                0
            } else {
                own[i - lead]
            }
        })
        .collect()
}

/// Visits every output index of a broadcast, yielding `(out, a, b)` offsets.
fn for_each_broadcast(
    out: &[usize],
    a_str: &[usize],
    b_str: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n: usize = out.iter().product();
    let rank = out.len();
    let mut idx = [0usize; MAX_RANK];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..n {
        f(o, ia, ib);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            ia += a_str[ax];
            ib += b_str[ax];
            if idx[ax] < out[ax] {
                break;
            }
            ia -= a_str[ax] * out[ax];
            ib -= b_str[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

fn is_suffix(short: &[usize], long: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

pub(crate) fn zip_broadcast<F: Element>(
    op: &'static str,
    a: &Tensor<F>,
    b: &Tensor<F>,
    f: impl Fn(F, F) -> F,
) -> Result<Tensor<F>> {
    let out = broadcast_dims(op, a.dims(), b.dims())?;
    let (xa, xb) = (a.elems(), b.elems());
    let elems: Vec<F> = if a.dims() == b.dims() {
        xa.iter().zip(xb).map(|(&x, &y)| f(x, y)).collect()
    } else if out == a.dims() && is_suffix(b.dims(), a.dims()) {
        let m = xb.len();
        xa.chunks_exact(m)
            .flat_map(|row| row.iter().zip(xb).map(|(&x, &y)| f(x, y)))
            .collect()
    } else if out == b.dims() && is_suffix(a.dims(), b.dims()) {
        let m = xa.len();
        xb.chunks_exact(m)
            .flat_map(|row| xa.iter().zip(row).map(|(&x, &y)| f(x, y)))
            .collect()
    } else {
        let n: usize = out.iter().product();
        let mut v = Vec::with_capacity(n);
        let sa = aligned_strides(a.dims(), &out);
        let sb = aligned_strides(b.dims(), &out);
        for_each_broadcast(&out, &sa, &sb, |_, ia, ib| v.push(f(xa[ia], xb[ib])));
        v
    };
    Ok(Tensor::from_parts(out, elems))
}

pub fn add<F: Element>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    zip_broadcast("add", a, b, |x, y| x + y)
}

pub fn mul<F: Element>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    zip_broadcast("mul", a, b, |x, y| x * y)
}

/// Sums a broadcast gradient `g` (dims `out`) back down to `target` dims.
pub(crate) fn reduce_to<F: Element>(g: &[F], out: &[usize], target: &[usize]) -> Vec<F> {
    if out == target {
        return g.to_vec();
    }
    let m: usize = target.iter().product();
    let mut acc = vec![F::zero(); m];
    if is_suffix(target, out) {
        for row in g.chunks_exact(m) {
            for (a, &x) in acc.iter_mut().zip(row) {
                *a += x;
            }
        }
    } else {
        let st = aligned_strides(target, out);
        let zero = vec![0; out.len()];
        for_each_broadcast(out, &st, &zero, |o, it, _| acc[it] += g[o]);
    }
    acc
}

/// Gradient of `a ⊙ b` with respect to `a`, reduced to `a`'s dims.
pub(crate) fn mul_adjoint<F: Element>(
    g: &[F],
    out: &[usize],
    a_dims: &[usize],
    b: &Tensor<F>,
) -> Vec<F> {
    let full: Vec<F> = if b.dims() == out {
        g.iter().zip(b.elems()).map(|(&x, &y)| x * y).collect()
    } else {
        let sb = aligned_strides(b.dims(), out);
        let zero = vec![0; out.len()];
        let mut v = Vec::with_capacity(g.len());
        let xb = b.elems();
        for_each_broadcast(out, &sb, &zero, |o, ib, _| v.push(g[o] * xb[ib]));
        v
    };
    reduce_to(&full, out, a_dims)
}

// ---------------------------------------------------------------------------
// GELU (tanh approximation)

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `(1 + tanh u) / 2` written as a logistic, which avoids the cancellation
/// of `1 + tanh u` for negative `u`.
#[inline]
fn half_one_plus_tanh<F: Element>(u: F) -> F {
    F::one() / (F::one() + (F::lit(-2.0) * u).exp())
}

#[inline]
pub fn gelu_scalar<F: Element>(x: F) -> F {
    let c = F::lit(GELU_C);
    let a = F::lit(GELU_A);
    x * half_one_plus_tanh(c * (x + a * x * x * x))
}

#[inline]
pub(crate) fn gelu_grad_scalar<F: Element>(x: F) -> F {
    let c = F::lit(GELU_C);
    let a = F::lit(GELU_A);
    let s = half_one_plus_tanh(c * (x + a * x * x * x));
    s + F::lit(2.0) * x * s * (F::one() - s) * c * (F::one() + F::lit(3.0) * a * x * x)
}

pub fn gelu<F: Element>(x: &Tensor<F>) -> Tensor<F> {
    x.map(gelu_scalar)
}

// ---------------------------------------------------------------------------
// Matmul

#[derive(Clone, Debug)]
pub(crate) struct MatmulPlan {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    /// (a offset, b offset) per output batch entry.
    pub batches: Vec<(usize, usize)>,
    pub out_dims: Vec<usize>,
}

pub(crate) fn matmul_plan(a: &[usize], b: &[usize]) -> Result<MatmulPlan> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::shape(
            "matmul",
            format!("operands need rank >= 2, got {a:?} and {b:?}"),
        ));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(Error::mismatch("matmul", a, b));
    }
    let (ab, bb) = (&a[..a.len() - 2], &b[..b.len() - 2]);
    if bb.is_empty() {
        // a plain matrix on the right: fold every leading axis of `a` into rows
        let mut out_dims = a[..a.len() - 1].to_vec();
        out_dims.push(n);
        return Ok(MatmulPlan {
            m: a[..a.len() - 1].iter().product(),
            k,
            n,
            batches: vec![(0, 0)],
            out_dims,
        });
    }
    let batch = broadcast_dims("matmul", ab, bb).map_err(|_| Error::mismatch("matmul", a, b))?;
    let sa: Vec<usize> = aligned_strides(ab, &batch)
        .iter()
        .map(|s| s * m * k)
        .collect();
    let sb: Vec<usize> = aligned_strides(bb, &batch)
        .iter()
        .map(|s| s * k * n)
        .collect();
    let mut batches = Vec::new();
    if batch.is_empty() {
        batches.push((0, 0));
    } else {
        for_each_broadcast(&batch, &sa, &sb, |_, ia, ib| batches.push((ia, ib)));
    }
    let mut out_dims = batch;
    out_dims.extend([m, n]);
    if out_dims.len() > MAX_RANK {
        return Err(Error::mismatch("matmul", a, b));
    }
    Ok(MatmulPlan {
        m,
        k,
        n,
        batches,
        out_dims,
    })
}

/// `c += a · b` for row-major `a: m×k`, `b: k×n`. Returns the MAC count.
#[inline]
pub(crate) fn gemm_acc<F: Element>(
    a: &[F],
    b: &[F],
    c: &mut [F],
    m: usize,
    k: usize,
    n: usize,
) -> u64 {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    (m * k * n) as u64
}

/// `c += aᵀ · b` for row-major `a: m×k`, `b: m×n`, `c: k×n`.
#[inline]
fn gemm_tn_acc<F: Element>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    for r in 0..m {
        let brow = &b[r * n..(r + 1) * n];
        for (i, &av) in a[r * k..(r + 1) * k].iter().enumerate() {
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

fn transpose2<F: Element>(x: &[F], rows: usize, cols: usize) -> Vec<F> {
    let mut t = vec![F::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = x[r * cols + c];
        }
    }
    t
}

pub(crate) fn matmul_with_plan<F: Element>(
    plan: &MatmulPlan,
    a: &Tensor<F>,
    b: &Tensor<F>,
) -> (Tensor<F>, u64) {
    let MatmulPlan { m, k, n, .. } = *plan;
    let mut out = vec![F::zero(); plan.batches.len() * m * n];
    let mut macs = 0;
    for (bi, &(ia, ib)) in plan.batches.iter().enumerate() {
        macs += gemm_acc(
            &a.elems()[ia..ia + m * k],
            &b.elems()[ib..ib + k * n],
            &mut out[bi * m * n..(bi + 1) * m * n],
            m,
            k,
            n,
        );
    }
    (Tensor::from_parts(plan.out_dims.clone(), out), macs)
}

/// Batched matrix product over the last two axes with broadcast batch axes.
pub fn matmul<F: Element>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let plan = matmul_plan(a.dims(), b.dims())?;
    Ok(matmul_with_plan(&plan, a, b).0)
}

pub(crate) fn matmul_backward<F: Element>(
    plan: &MatmulPlan,
    a: &Tensor<F>,
    b: &Tensor<F>,
    g: &[F],
    need_a: bool,
    need_b: bool,
) -> (Option<Vec<F>>, Option<Vec<F>>) {
    let MatmulPlan { m, k, n, .. } = *plan;
    let mut ga = need_a.then(|| vec![F::zero(); a.numel()]);
    let mut gb = need_b.then(|| vec![F::zero(); b.numel()]);
    let mut bt: Option<(usize, Vec<F>)> = None;
    for (bi, &(ia, ib)) in plan.batches.iter().enumerate() {
        let gc = &g[bi * m * n..(bi + 1) * m * n];
        if let Some(ga) = ga.as_mut() {
            // dA = dC · Bᵀ
            if bt.as_ref().is_none_or(|(at, _)| *at != ib) {
                bt = Some((ib, transpose2(&b.elems()[ib..ib + k * n], k, n)));
            }
            let (_, t) = bt.as_ref().expect("just set");
            gemm_acc(gc, t, &mut ga[ia..ia + m * k], m, n, k);
        }
        if let Some(gb) = gb.as_mut() {
            // dB = Aᵀ · dC
            gemm_tn_acc(
                &a.elems()[ia..ia + m * k],
                gc,
                &mut gb[ib..ib + k * n],
                m,
                k,
                n,
            );
        }
    }
    (ga, gb)
}

// ---------------------------------------------------------------------------
// Softmax and layer norm over the last axis

pub fn softmax_last<F: Element>(x: &Tensor<F>) -> Result<Tensor<F>> {
    if !x.is_finite() {
        return Err(Error::NonFinite { op: "softmax" });
    }
    let n = *x
        .dims()
        .last()
        .ok_or_else(|| Error::shape("softmax", "rank-0 input"))?;
    let mut out = Vec::with_capacity(x.numel());
    for row in x.elems().chunks_exact(n) {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let start = out.len();
        let mut sum = F::zero();
        for &v in row {
            let e = (v - max).exp();
            sum += e;
            out.push(e);
        }
        for v in &mut out[start..] {
            *v /= sum;
        }
    }
    Ok(Tensor::from_parts(x.dims().to_vec(), out))
}

pub(crate) fn softmax_backward<F: Element>(y: &Tensor<F>, g: &[F]) -> Vec<F> {
    let n = *y.dims().last().expect("rank >= 1");
    let mut gx = Vec::with_capacity(g.len());
    for (yr, gr) in y.elems().chunks_exact(n).zip(g.chunks_exact(n)) {
        let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        gx.extend(yr.iter().zip(gr).map(|(&yv, &gv)| yv * (gv - dot)));
    }
    gx
}

pub const LN_EPS: f64 = 1e-5;

/// Normalized values and reciprocal standard deviations saved for backward.
pub(crate) struct LayerNormSaved<F> {
    pub xhat: Vec<F>,
    pub rstd: Vec<F>,
}

pub(crate) fn layer_norm_impl<F: Element>(
    x: &Tensor<F>,
    gain: &Tensor<F>,
    shift: &Tensor<F>,
    eps: f64,
) -> Result<(Tensor<F>, LayerNormSaved<F>)> {
    let c = *x
        .dims()
        .last()
        .ok_or_else(|| Error::shape("layer_norm", "rank-0 input"))?;
    if gain.dims() != [c] || shift.dims() != [c] {
        return Err(Error::mismatch("layer_norm", x.dims(), gain.dims()));
    }
    let inv_c = F::one() / F::from_usize(c).unwrap();
    let eps = F::lit(eps);
    let rows = x.numel() / c;
    let mut out = Vec::with_capacity(x.numel());
    let mut xhat = Vec::with_capacity(x.numel());
    let mut rstd = Vec::with_capacity(rows);
    for row in x.elems().chunks_exact(c) {
        let mean = row.iter().copied().sum::<F>() * inv_c;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_c;
        let r = F::one() / (var + eps).sqrt();
        rstd.push(r);
        for ((&v, &ga), &sh) in row.iter().zip(gain.elems()).zip(shift.elems()) {
            let h = (v - mean) * r;
            xhat.push(h);
            out.push(h * ga + sh);
        }
    }
    Ok((
        Tensor::from_parts(x.dims().to_vec(), out),
        LayerNormSaved { xhat, rstd },
    ))
}

/// Layer normalization over the channel (last) axis.
pub fn layer_norm<F: Element>(
    x: &Tensor<F>,
    gain: &Tensor<F>,
    shift: &Tensor<F>,
    eps: f64,
) -> Result<Tensor<F>> {
    layer_norm_impl(x, gain, shift, eps).map(|(y, _)| y)
}

pub(crate) fn layer_norm_backward<F: Element>(
    saved: &LayerNormSaved<F>,
    gain: &Tensor<F>,
    g: &[F],
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let c = gain.numel();
    let inv_c = F::one() / F::from_usize(c).unwrap();
    let mut gx = Vec::with_capacity(g.len());
    let mut ggain = vec![F::zero(); c];
    let mut gshift = vec![F::zero(); c];
    let mut dyh = vec![F::zero(); c];
    for ((gr, hr), &r) in g
        .chunks_exact(c)
        .zip(saved.xhat.chunks_exact(c))
        .zip(&saved.rstd)
    {
        for j in 0..c {
            ggain[j] += gr[j] * hr[j];
            gshift[j] += gr[j];
            dyh[j] = gr[j] * gain.elems()[j];
        }
        let mean_d = dyh.iter().copied().sum::<F>() * inv_c;
        let mean_dh = dyh.iter().zip(hr).map(|(&d, &h)| d * h).sum::<F>() * inv_c;
        gx.extend((0..c).map(|j| r * (dyh[j] - mean_d - hr[j] * mean_dh)));
    }
    (gx, ggain, gshift)
}

// ---------------------------------------------------------------------------
// Shape ops

pub fn permute<F: Element>(x: &Tensor<F>, perm: &[usize]) -> Result<Tensor<F>> {
    let rank = x.rank();
    let mut seen = [false; MAX_RANK];
    if perm.len() != rank
        || perm
            .iter()
            .any(|&p| p >= rank || std::mem::replace(&mut seen[p], true))
    {
        return Err(Error::shape(
            "permute",
            format!("{perm:?} is not a permutation of rank {rank}"),
        ));
    }
    let src_str = x.strides();
    let out_dims: Vec<usize> = perm.iter().map(|&p| x.dims()[p]).collect();
    let moved: Vec<usize> = perm.iter().map(|&p| src_str[p]).collect();
    let zero = vec![0; rank];
    let src = x.elems();
    let mut out = Vec::with_capacity(x.numel());
    for_each_broadcast(&out_dims, &moved, &zero, |_, i, _| out.push(src[i]));
    Ok(Tensor::from_parts(out_dims, out))
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Mean over one axis; the axis is removed from the result.
pub fn mean_axis<F: Element>(x: &Tensor<F>, axis: usize) -> Result<Tensor<F>> {
    if axis >= x.rank() {
        return Err(Error::shape(
            "mean_axis",
            format!("axis {axis} for {:?}", x.dims()),
        ));
    }
    let (outer, n, inner) = split_axis(x.dims(), axis);
    let scale = F::one() / F::from_usize(n).unwrap();
    let mut out = vec![F::zero(); outer * inner];
    for o in 0..outer {
        let dst = &mut out[o * inner..(o + 1) * inner];
        for i in 0..n {
            let src = &x.elems()[(o * n + i) * inner..(o * n + i + 1) * inner];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
        for d in dst.iter_mut() {
            *d *= scale;
        }
    }
    let mut dims = x.dims().to_vec();
    dims.remove(axis);
    Ok(Tensor::from_parts(dims, out))
}

pub(crate) fn split_axis(dims: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = dims[..axis].iter().product();
    let inner = dims[axis + 1..].iter().product();
    (outer, dims[axis], inner)
}

pub(crate) fn mean_axis_backward<F: Element>(in_dims: &[usize], axis: usize, g: &[F]) -> Vec<F> {
    let (outer, n, inner) = split_axis(in_dims, axis);
    let scale = F::one() / F::from_usize(n).unwrap();
    let mut gx = Vec::with_capacity(outer * n * inner);
    for o in 0..outer {
        let src = &g[o * inner..(o + 1) * inner];
        for _ in 0..n {
            gx.extend(src.iter().map(|&v| v * scale));
        }
    }
    gx
}

pub fn slice_axis<F: Element>(
    x: &Tensor<F>,
    axis: usize,
    start: usize,
    len: usize,
) -> Result<Tensor<F>> {
    if axis >= x.rank() || len == 0 || start + len > x.dims()[axis] {
        return Err(Error::shape(
            "slice",
            format!(
                "[{start}, {}) on axis {axis} of {:?}",
                start + len,
                x.dims()
            ),
        ));
    }
    let (outer, n, inner) = split_axis(x.dims(), axis);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        out.extend_from_slice(&x.elems()[(o * n + start) * inner..(o * n + start + len) * inner]);
    }
    let mut dims = x.dims().to_vec();
    dims[axis] = len;
    Ok(Tensor::from_parts(dims, out))
}

pub fn concat_axis<F: Element>(parts: &[&Tensor<F>], axis: usize) -> Result<Tensor<F>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("concat", "no inputs"))?;
    if axis >= first.rank() {
        return Err(Error::shape(
            "concat",
            format!("axis {axis} for {:?}", first.dims()),
        ));
    }
    let mut dims = first.dims().to_vec();
    dims[axis] = 0;
    for p in parts {
        let same = p.rank() == first.rank()
            && p.dims()
                .iter()
                .zip(first.dims())
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !same {
            return Err(Error::mismatch("concat", first.dims(), p.dims()));
        }
        dims[axis] += p.dims()[axis];
    }
    let (outer, _, inner) = split_axis(first.dims(), axis);
    let mut out = Vec::with_capacity(dims.iter().product());
    for o in 0..outer {
        for p in parts {
            let n = p.dims()[axis];
            out.extend_from_slice(&p.elems()[o * n * inner..(o + 1) * n * inner]);
        }
    }
    Ok(Tensor::from_parts(dims, out))
}

// ---------------------------------------------------------------------------
// Spatial / temporal resampling on [B, T, H, W, C]

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Down,
    Up,
}

fn video_dims(op: &'static str, dims: &[usize]) -> Result<[usize; 5]> {
    <[usize; 5]>::try_from(dims)
        .map_err(|_| Error::shape(op, format!("expected [B,T,H,W,C], got {dims:?}")))
}

/// Output dims of [`resample`], validating divisibility for the down direction.
pub(crate) fn resample_dims(
    dims: &[usize],
    time_ratio: usize,
    space_ratio: usize,
    dir: Direction,
) -> Result<[usize; 5]> {
    let [b, t, h, w, c] = video_dims("resample", dims)?;
    if time_ratio == 0 || space_ratio == 0 {
        return Err(Error::shape("resample", "ratio must be positive"));
    }
    match dir {
        Direction::Down => {
            if t % time_ratio != 0 || h % space_ratio != 0 || w % space_ratio != 0 {
                return Err(Error::shape(
                    "resample",
                    format!("{dims:?} not divisible by time {time_ratio} / space {space_ratio}"),
                ));
            }
            Ok([b, t / time_ratio, h / space_ratio, w / space_ratio, c])
        }
        Direction::Up => Ok([b, t * time_ratio, h * space_ratio, w * space_ratio, c]),
    }
}

/// Block-mean pooling (down) or nearest-neighbour replication (up) by
/// `time_ratio` along T and `space_ratio` along H and W.
pub(crate) fn resample<F: Element>(
    x: &Tensor<F>,
    time_ratio: usize,
    space_ratio: usize,
    dir: Direction,
) -> Result<Tensor<F>> {
    let out = resample_dims(x.dims(), time_ratio, space_ratio, dir)?;
    if time_ratio == 1 && space_ratio == 1 {
        return Ok(x.clone());
    }
    let elems = match dir {
        Direction::Down => pool_blocks(x.elems(), x.dims(), &out, time_ratio, space_ratio),
        Direction::Up => replicate_blocks(x.elems(), x.dims(), time_ratio, space_ratio),
    };
    Ok(Tensor::from_parts(out.to_vec(), elems))
}

/// Spatial-only resampling: mean pooling down, nearest-neighbour up. The time
/// axis is never touched.
pub fn resample_spatial<F: Element>(
    x: &Tensor<F>,
    ratio: usize,
    dir: Direction,
) -> Result<Tensor<F>> {
    resample(x, 1, ratio, dir)
}

/// Mean over `rt × rs × rs` blocks. `fine` dims are `[B,T,H,W,C]`.
fn pool_blocks<F: Element>(
    x: &[F],
    fine: &[usize],
    coarse: &[usize; 5],
    rt: usize,
    rs: usize,
) -> Vec<F> {
    let [_, _, h, w, c] = <[usize; 5]>::try_from(fine).unwrap();
    let [b, to, ho, wo, _] = *coarse;
    let scale = F::one() / F::from_usize(rt * rs * rs).unwrap();
    let mut out = vec![F::zero(); b * to * ho * wo * c];
    for bi in 0..b {
        for t in 0..to {
            for i in 0..ho {
                for j in 0..wo {
                    let o = (((bi * to + t) * ho + i) * wo + j) * c;
                    let dst = &mut out[o..o + c];
                    for dt in 0..rt {
                        for di in 0..rs {
                            for dj in 0..rs {
                                let src = ((((bi * to + t) * rt + dt) * h + i * rs + di) * w
                                    + j * rs
                                    + dj)
                                    * c;
                                for (d, &s) in dst.iter_mut().zip(&x[src..src + c]) {
                                    *d += s;
                                }
                            }
                        }
                    }
                    for d in dst.iter_mut() {
                        *d *= scale;
                    }
                }
            }
        }
    }
    out
}

/// Copies every coarse cell into its `rt × rs × rs` fine block.
fn replicate_blocks<F: Element>(x: &[F], coarse: &[usize], rt: usize, rs: usize) -> Vec<F> {
    let [b, t, h, w, c] = <[usize; 5]>::try_from(coarse).unwrap();
    let (to, ho, wo) = (t * rt, h * rs, w * rs);
    let mut out = vec![F::zero(); b * to * ho * wo * c];
    for bi in 0..b {
        for ft in 0..to {
            for fi in 0..ho {
                for fj in 0..wo {
                    let src = (((bi * t + ft / rt) * h + fi / rs) * w + fj / rs) * c;
                    let dst = (((bi * to + ft) * ho + fi) * wo + fj) * c;
                    out[dst..dst + c].copy_from_slice(&x[src..src + c]);
                }
            }
        }
    }
    out
}

/// Adjoint of [`resample`]: `g` has the output dims, result has `in_dims`.
pub(crate) fn resample_backward<F: Element>(
    in_dims: &[usize],
    time_ratio: usize,
    space_ratio: usize,
    dir: Direction,
    g: &[F],
) -> Vec<F> {
    let out = resample_dims(in_dims, time_ratio, space_ratio, dir).expect("validated in forward");
    match dir {
        // adjoint of block mean = replicate scaled by 1/block
        Direction::Down => {
            let scale = F::one() / F::from_usize(time_ratio * space_ratio * space_ratio).unwrap();
            let mut gx = replicate_blocks(g, &out, time_ratio, space_ratio);
            gx.iter_mut().for_each(|v| *v *= scale);
            gx
        }
        // adjoint of replication = block sum
        Direction::Up => {
            let coarse = <[usize; 5]>::try_from(in_dims).unwrap();
            let k = F::from_usize(time_ratio * space_ratio * space_ratio).unwrap();
            let mut gx = pool_blocks(g, &out, &coarse, time_ratio, space_ratio);
            gx.iter_mut().for_each(|v| *v *= k);
            gx
        }
    }
}

// ---------------------------------------------------------------------------
// Adaptive 2D mean pooling over the last two axes

/// Contiguous bin `[start, end)` of source index range `n` for target bin `i` of `m`.
#[inline]
pub(crate) fn adaptive_bin(i: usize, n: usize, m: usize) -> (usize, usize) {
    let start = i * n / m;
    let end = ((i + 1) * n).div_ceil(m);
    (start, end)
}

pub fn adaptive_pool2d<F: Element>(x: &Tensor<F>, out_h: usize, out_w: usize) -> Result<Tensor<F>> {
    let r = x.rank();
    if r < 2 || out_h == 0 || out_w == 0 {
        return Err(Error::shape(
            "adaptive_pool2d",
            format!("{:?} -> {out_h}x{out_w}", x.dims()),
        ));
    }
    let (h, w) = (x.dims()[r - 2], x.dims()[r - 1]);
    let mut dims = x.dims().to_vec();
    dims[r - 2] = out_h;
    dims[r - 1] = out_w;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let mut out = Vec::with_capacity(dims.iter().product());
    for plane in x.elems().chunks_exact(h * w) {
        for i in 0..out_h {
            let (h0, h1) = adaptive_bin(i, h, out_h);
            for j in 0..out_w {
                let (w0, w1) = adaptive_bin(j, w, out_w);
                let mut s = F::zero();
                for a in h0..h1 {
                    for b in w0..w1 {
                        s += plane[a * w + b];
                    }
                }
                out.push(s / F::from_usize((h1 - h0) * (w1 - w0)).unwrap());
            }
        }
    }
    Ok(Tensor::from_parts(dims, out))
}

pub(crate) fn adaptive_pool2d_backward<F: Element>(
    in_dims: &[usize],
    out_h: usize,
    out_w: usize,
    g: &[F],
) -> Vec<F> {
    let r = in_dims.len();
    let (h, w) = (in_dims[r - 2], in_dims[r - 1]);
    if (h, w) == (out_h, out_w) {
        return g.to_vec();
    }
    let planes = in_dims[..r - 2].iter().product::<usize>();
    let mut gx = vec![F::zero(); planes * h * w];
    for p in 0..planes {
        let gp = &g[p * out_h * out_w..(p + 1) * out_h * out_w];
        let dst = &mut gx[p * h * w..(p + 1) * h * w];
        for i in 0..out_h {
            let (h0, h1) = adaptive_bin(i, h, out_h);
            for j in 0..out_w {
                let (w0, w1) = adaptive_bin(j, w, out_w);
                let v = gp[i * out_w + j] / F::from_usize((h1 - h0) * (w1 - w0)).unwrap();
                for a in h0..h1 {
                    for b in w0..w1 {
                        dst[a * w + b] += v;
                    }
                }
            }
        }
    }
    gx
}

// ---------------------------------------------------------------------------
// 3D convolution, channels-last

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dSpec {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub groups: usize,
}

impl Conv3dSpec {
    pub fn new(stride: [usize; 3], padding: [usize; 3], groups: usize) -> Self {
        Self {
            stride,
            padding,
            groups,
        }
    }

    /// Stride 1 with zero padding that preserves extents for odd kernels.
    pub fn same(kernel: [usize; 3], groups: usize) -> Self {
        Self::new([1; 3], kernel.map(|k| k / 2), groups)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    b: usize,
    /// padded input extents
    pin: [usize; 3],
    input: [usize; 3],
    cin: usize,
    kern: [usize; 3],
    cin_g: usize,
    cout: usize,
    cout_g: usize,
    groups: usize,
    out: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
}

impl ConvGeom {
    pub(crate) fn out_dims(&self) -> Vec<usize> {
        vec![self.b, self.out[0], self.out[1], self.out[2], self.cout]
    }

    fn depthwise(&self) -> bool {
        self.cin_g == 1 && self.cout_g == 1
    }

    fn taps(&self) -> usize {
        self.kern.iter().product()
    }
}

pub(crate) fn conv_geom(x: &[usize], k: &[usize], spec: &Conv3dSpec) -> Result<ConvGeom> {
    let [b, t, h, w, cin] = video_dims("conv3d", x)?;
    let [kd, kh, kw, cin_g, cout] = <[usize; 5]>::try_from(k).map_err(|_| {
        Error::shape(
            "conv3d",
            format!("kernel must be [kd,kh,kw,Cin/g,Cout], got {k:?}"),
        )
    })?;
    let g = spec.groups;
    if g == 0 || cin % g != 0 || cout % g != 0 || cin_g * g != cin {
        return Err(Error::shape(
            "conv3d",
            format!("groups {g} incompatible with input {x:?} and kernel {k:?}"),
        ));
    }
    if spec.stride.contains(&0) {
        return Err(Error::shape("conv3d", "stride must be positive"));
    }
    let input = [t, h, w];
    let kern = [kd, kh, kw];
    let mut pin = [0; 3];
    let mut out = [0; 3];
    for a in 0..3 {
        pin[a] = input[a] + 2 * spec.padding[a];
        if kern[a] > pin[a] {
            return Err(Error::shape(
                "conv3d",
                format!("kernel {kern:?} larger than padded input {:?}", pin),
            ));
        }
        out[a] = (pin[a] - kern[a]) / spec.stride[a] + 1;
    }
    Ok(ConvGeom {
        b,
        pin,
        input,
        cin,
        kern,
        cin_g,
        cout,
        cout_g: cout / g,
        groups: g,
        out,
        stride: spec.stride,
        pad: spec.padding,
    })
}

fn pad_input<F: Element>(x: &[F], geo: &ConvGeom) -> Vec<F> {
    let [t, h, w] = geo.input;
    let [pt, ph, pw] = geo.pad;
    let [tp, hp, wp] = geo.pin;
    let c = geo.cin;
    if geo.pad == [0; 3] {
        return x.to_vec();
    }
    let mut out = vec![F::zero(); geo.b * tp * hp * wp * c];
    for b in 0..geo.b {
        for i in 0..t {
            for j in 0..h {
                let src = (((b * t + i) * h + j) * w) * c;
                let dst = ((((b * tp + i + pt) * hp + j + ph) * wp) + pw) * c;
                out[dst..dst + w * c].copy_from_slice(&x[src..src + w * c]);
            }
        }
    }
    out
}

fn crop_padding<F: Element>(xp: &[F], geo: &ConvGeom) -> Vec<F> {
    if geo.pad == [0; 3] {
        return xp.to_vec();
    }
    let [t, h, w] = geo.input;
    let [pt, ph, pw] = geo.pad;
    let [tp, hp, wp] = geo.pin;
    let c = geo.cin;
    let mut out = Vec::with_capacity(geo.b * t * h * w * c);
    for b in 0..geo.b {
        for i in 0..t {
            for j in 0..h {
                let src = ((((b * tp + i + pt) * hp + j + ph) * wp) + pw) * c;
                out.extend_from_slice(&xp[src..src + w * c]);
            }
        }
    }
    out
}

/// Visits each (output position, kernel tap) pair with the flat output
/// position index, the padded-input offset and the tap index.
#[inline]
fn for_each_tap(geo: &ConvGeom, mut f: impl FnMut(usize, usize, usize)) {
    let [to, ho, wo] = geo.out;
    let [kd, kh, kw] = geo.kern;
    let [tp, hp, wp] = geo.pin;
    let [st, sh, sw] = geo.stride;
    let mut pos = 0;
    for b in 0..geo.b {
        for ot in 0..to {
            for oh in 0..ho {
                for ow in 0..wo {
                    for i in 0..kd {
                        for j in 0..kh {
                            let row = ((b * tp + ot * st + i) * hp + oh * sh + j) * wp + ow * sw;
                            for l in 0..kw {
                                f(pos, (row + l) * geo.cin, (i * kh + j) * kw + l);
                            }
                        }
                    }
                    pos += 1;
                }
            }
        }
    }
}

pub(crate) fn conv3d_impl<F: Element>(
    x: &Tensor<F>,
    kernel: &Tensor<F>,
    bias: Option<&Tensor<F>>,
    spec: &Conv3dSpec,
) -> Result<(Tensor<F>, ConvGeom, u64)> {
    let geo = conv_geom(x.dims(), kernel.dims(), spec)?;
    if let Some(b) = bias {
        if b.dims() != [geo.cout] {
            return Err(Error::mismatch("conv3d bias", b.dims(), &[geo.cout]));
        }
    }
    let xp = pad_input(x.elems(), &geo);
    let w = kernel.elems();
    let (cout, cin_g, cout_g) = (geo.cout, geo.cin_g, geo.cout_g);
    let npos = geo.b * geo.out.iter().product::<usize>();
    let mut out = match bias {
        Some(b) => b.elems().repeat(npos),
        None => vec![F::zero(); npos * cout],
    };
    let depthwise = geo.depthwise();
    let mut macs = 0u64;
    for_each_tap(&geo, |pos, xo, tap| {
        let orow = &mut out[pos * cout..(pos + 1) * cout];
        let xin = &xp[xo..xo + geo.cin];
        let wtap = &w[tap * cin_g * cout..(tap + 1) * cin_g * cout];
        if depthwise {
            for ((o, &xv), &wv) in orow.iter_mut().zip(xin).zip(wtap) {
                *o += xv * wv;
            }
        } else {
            for gi in 0..geo.groups {
                let og = &mut orow[gi * cout_g..(gi + 1) * cout_g];
                for ci in 0..cin_g {
                    let xv = xin[gi * cin_g + ci];
                    let wrow = &wtap[ci * cout + gi * cout_g..ci * cout + (gi + 1) * cout_g];
                    for (o, &wv) in og.iter_mut().zip(wrow) {
                        *o += xv * wv;
                    }
                }
            }
        }
        macs += (cin_g * cout) as u64;
    });
    Ok((Tensor::from_parts(geo.out_dims(), out), geo, macs))
}

/// Grouped 3D cross-correlation with zero padding.
///
/// `x` is `[B,T,H,W,Cin]`, `kernel` is `[kd,kh,kw,Cin/g,Cout]`, `bias` is `[Cout]`.
pub fn conv3d<F: Element>(
    x: &Tensor<F>,
    kernel: &Tensor<F>,
    bias: Option<&Tensor<F>>,
    spec: &Conv3dSpec,
) -> Result<Tensor<F>> {
    conv3d_impl(x, kernel, bias, spec).map(|(y, _, _)| y)
}

pub(crate) struct ConvGrads<F> {
    pub x: Option<Vec<F>>,
    pub kernel: Option<Vec<F>>,
    pub bias: Option<Vec<F>>,
}

pub(crate) fn conv3d_backward<F: Element>(
    geo: &ConvGeom,
    x: &Tensor<F>,
    kernel: &Tensor<F>,
    g: &[F],
    need: [bool; 3],
) -> ConvGrads<F> {
    let (cout, cin_g, cout_g, cin) = (geo.cout, geo.cin_g, geo.cout_g, geo.cin);
    let depthwise = geo.depthwise();
    let w = kernel.elems();

    let bias = need[2].then(|| {
        let mut gb = vec![F::zero(); cout];
        for row in g.chunks_exact(cout) {
            for (a, &v) in gb.iter_mut().zip(row) {
                *a += v;
            }
        }
        gb
    });

    let xp = need[1].then(|| pad_input(x.elems(), geo));
    let mut gk = need[1].then(|| vec![F::zero(); kernel.numel()]);
    let mut gxp = need[0].then(|| vec![F::zero(); geo.b * geo.pin.iter().product::<usize>() * cin]);
    // kernel transposed to [tap, Cout, Cin/g] for the input adjoint
    let wt: Vec<F> = if need[0] && !depthwise {
        let mut t = vec![F::zero(); w.len()];
        for tap in 0..geo.taps() {
            for ci in 0..cin_g {
                for co in 0..cout {
                    t[(tap * cout + co) * cin_g + ci] = w[(tap * cin_g + ci) * cout + co];
                }
            }
        }
        t
    } else {
        Vec::new()
    };

    for_each_tap(geo, |pos, xo, tap| {
        let grow = &g[pos * cout..(pos + 1) * cout];
        if let (Some(gk), Some(xp)) = (gk.as_mut(), xp.as_ref()) {
            let xin = &xp[xo..xo + cin];
            let gtap = &mut gk[tap * cin_g * cout..(tap + 1) * cin_g * cout];
            if depthwise {
                for ((a, &xv), &gv) in gtap.iter_mut().zip(xin).zip(grow) {
                    *a += xv * gv;
                }
            } else {
                for gi in 0..geo.groups {
                    let gg = &grow[gi * cout_g..(gi + 1) * cout_g];
                    for ci in 0..cin_g {
                        let xv = xin[gi * cin_g + ci];
                        let dst = &mut gtap[ci * cout + gi * cout_g..ci * cout + (gi + 1) * cout_g];
                        for (a, &gv) in dst.iter_mut().zip(gg) {
                            *a += xv * gv;
                        }
                    }
                }
            }
        }
        if let Some(gxp) = gxp.as_mut() {
            let dst = &mut gxp[xo..xo + cin];
            if depthwise {
                let wtap = &w[tap * cout..(tap + 1) * cout];
                for ((a, &gv), &wv) in dst.iter_mut().zip(grow).zip(wtap) {
                    *a += gv * wv;
                }
            } else {
                for gi in 0..geo.groups {
                    let dg = &mut dst[gi * cin_g..(gi + 1) * cin_g];
                    for co in gi * cout_g..(gi + 1) * cout_g {
                        let gv = grow[co];
                        let wrow = &wt[(tap * cout + co) * cin_g..(tap * cout + co + 1) * cin_g];
                        for (a, &wv) in dg.iter_mut().zip(wrow) {
                            *a += gv * wv;
                        }
                    }
                }
            }
        }
    });

    ConvGrads {
        x: gxp.map(|gxp| crop_padding(&gxp, geo)),
        kernel: gk,
        bias,
    }
}

// ---------------------------------------------------------------------------
// Cross-entropy

/// Mean cross-entropy over rows of `logits: [B, K]` with optional label
/// smoothing. Returns the loss and the softmax probabilities.
pub(crate) fn cross_entropy_impl<F: Element>(
    logits: &Tensor<F>,
    labels: &[usize],
    smoothing: f64,
) -> Result<(F, Vec<F>)> {
    let [b, k] = <[usize; 2]>::try_from(logits.dims())
        .map_err(|_| Error::shape("cross_entropy", format!("logits {:?}", logits.dims())))?;
    if labels.len() != b || labels.iter().any(|&l| l >= k) {
        return Err(Error::shape(
            "cross_entropy",
            format!("{} labels for {b} rows of {k} classes", labels.len()),
        ));
    }
    let probs = softmax_last(logits)?.into_elems();
    let eps = F::lit(smoothing);
    let off = eps / F::from_usize(k).unwrap();
    let mut loss = F::zero();
    for (row, &y) in logits.elems().chunks_exact(k).zip(labels) {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<F>().ln();
        for (j, &v) in row.iter().enumerate() {
            let q = if j == y { F::one() - eps + off } else { off };
            if q > F::zero() {
                loss += q * (lse - v);
            }
        }
    }
    Ok((loss / F::from_usize(b).unwrap(), probs))
}

pub(crate) fn cross_entropy_backward<F: Element>(
    probs: &[F],
    labels: &[usize],
    k: usize,
    smoothing: f64,
    g: F,
) -> Vec<F> {
    let b = labels.len();
    let eps = F::lit(smoothing);
    let off = eps / F::from_usize(k).unwrap();
    let scale = g / F::from_usize(b).unwrap();
    let mut gx = Vec::with_capacity(probs.len());
    for (p, &y) in probs.chunks_exact(k).zip(labels) {
        for (j, &pv) in p.iter().enumerate() {
            let q = if j == y { F::one() - eps + off } else { off };
            gx.push((pv - q) * scale);
        }
    }
    gx
}
