//! Forward and backward passes through a subnet view.
//!
//! Activations are stored channel-major: a `C x (B * L)` matrix, so every
//! pointwise convolution over the whole batch is a single matrix product.

use super::{BlockView, SubnetView, SupernetParams};
use crate::distill::LogitsBatch;
use crate::error::{Error, Result};
use crate::scalar::{gemm, MatRef, Scalar};
use crate::space::ArchEncoding;

use super::data::Batch;

/// Dense gradient buffer laid out like [`SupernetParams::data`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub data: Vec<T>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros(len: usize) -> Self {
        Gradients {
            data: vec![T::zero(); len],
        }
    }

    pub fn add_assign(&mut self, other: &Gradients<T>) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn support(&self) -> Vec<bool> {
        self.data.iter().map(|v| *v != T::zero()).collect()
    }
}

struct SeCache<T> {
    pooled: Vec<T>,
    reduced: Vec<T>,
    gate: Vec<T>,
}

struct BlockCache<T> {
    input: Vec<T>,
    expanded: Vec<T>,
    depthwise: Vec<T>,
    se: Option<SeCache<T>>,
    /// Post-gate activations; `None` when the block has no SE.
    gated: Option<Vec<T>>,
    len_in: usize,
    len_out: usize,
}

/// Intermediates of one forward pass, consumed by [`backward`].
pub struct ActivationCache<T> {
    arch: ArchEncoding,
    version: u64,
    batch: usize,
    input: Vec<T>,
    stem: Vec<T>,
    blocks: Vec<BlockCache<T>>,
    head_in: Vec<T>,
    head: Vec<T>,
    pooled: Vec<T>,
    final_len: usize,
}

impl<T> ActivationCache<T> {
    pub fn arch(&self) -> &ArchEncoding {
        &self.arch
    }

    /// Smallest |pre-activation| seen by any rectifier, used to keep
    /// finite-difference probes away from kinks.
    pub fn min_abs_relu_input(&self) -> f64
    where
        T: Scalar,
    {
        let mut m = f64::INFINITY;
        let mut scan = |v: &[T]| {
            for x in v {
                let a = x.to_f64().unwrap().abs();
                if a > 0.0 && a < m {
                    m = a;
                }
            }
        };
        scan(&self.stem);
        scan(&self.head);
        for b in &self.blocks {
            scan(&b.expanded);
            scan(&b.depthwise);
            if let Some(se) = &b.se {
                scan(&se.reduced);
            }
        }
        m
    }
}

/// Leading `rows x cols` block of a stored tensor plus its fan-in
/// correction, see [`super::slice_scale`].
fn weight<T: Scalar>(
    params_layout: &super::NetLayout,
    id: usize,
    rows: usize,
    cols: usize,
) -> (MatRef, T) {
    let t = &params_layout.tensors[id];
    debug_assert!(rows <= t.rows && cols <= t.cols);
    (
        MatRef::strided(t.offset, rows, cols, t.cols),
        T::lit(super::slice_scale(t.cols, cols)),
    )
}

fn offset(params_layout: &super::NetLayout, id: usize) -> usize {
    params_layout.tensors[id].offset
}

/// `a * W[0..o, 0..c] * x + b[0..o]` for `x` of shape `c x n`.
fn pointwise<T: Scalar>(p: &[T], (w, a): (MatRef, T), bias: usize, x: &[T], n: usize) -> Vec<T> {
    let o = w.rows;
    let mut out = Vec::with_capacity(o * n);
    for r in 0..o {
        out.resize((r + 1) * n, p[bias + r]);
    }
    gemm(
        a,
        p,
        w,
        x,
        MatRef::dense(0, w.cols, n),
        T::one(),
        &mut out,
        MatRef::dense(0, o, n),
    );
    out
}

/// Accumulates weight and bias gradients; returns `W^T * dout` when asked.
#[allow(clippy::too_many_arguments)]
fn pointwise_back<T: Scalar>(
    p: &[T],
    g: &mut [T],
    (w, a): (MatRef, T),
    bias: usize,
    x: &[T],
    dout: &[T],
    n: usize,
    want_dx: bool,
) -> Option<Vec<T>> {
    let (o, c) = (w.rows, w.cols);
    gemm(
        a,
        dout,
        MatRef::dense(0, o, n),
        x,
        MatRef::dense(0, c, n).t(),
        T::one(),
        g,
        w,
    );
    for (r, row) in dout.chunks_exact(n).enumerate() {
        g[bias + r] += row.iter().copied().sum::<T>();
    }
    want_dx.then(|| {
        let mut dx = vec![T::zero(); c * n];
        gemm(
            a,
            p,
            w.t(),
            dout,
            MatRef::dense(0, o, n),
            T::zero(),
            &mut dx,
            MatRef::dense(0, c, n),
        );
        dx
    })
}

fn relu_in_place<T: Scalar>(v: &mut [T]) {
    // select form keeps NaN and lets the loop vectorize
    for x in v.iter_mut() {
        *x = if *x < T::zero() { T::zero() } else { *x };
    }
}

/// Zero the gradient wherever the rectifier output was not positive.
fn relu_mask<T: Scalar>(grad: &mut [T], activation: &[T]) {
    for (g, a) in grad.iter_mut().zip(activation) {
        *g = if *a <= T::zero() { T::zero() } else { *g };
    }
}

fn out_len(len_in: usize, stride: usize) -> usize {
    len_in.div_ceil(stride)
}

/// Output positions `l` for which tap `t` reads inside the input, i.e.
/// `0 <= l * stride + t - half < len_in`.
fn tap_range(
    t: usize,
    half: usize,
    stride: usize,
    len_in: usize,
    len_out: usize,
) -> std::ops::Range<usize> {
    let lo = half.saturating_sub(t).div_ceil(stride);
    let hi = if len_in + half > t {
        (len_in + half - t - 1) / stride + 1
    } else {
        0
    };
    lo.min(len_out)..hi.min(len_out).max(lo.min(len_out))
}

/// Depthwise 1-D convolution with "same" zero padding; `x` is `h x (B*len_in)`.
///
/// Each channel row is copied into a zero-padded buffer split into `stride`
/// phases, so every tap becomes one contiguous multiply-add over the batch.
fn depthwise<T: Scalar>(
    p: &[T],
    b: &BlockView,
    layout: &super::NetLayout,
    x: &[T],
    batch: usize,
    len_in: usize,
) -> Vec<T> {
    let k_t = &layout.tensors[b.layout.dw];
    let (s, k) = (b.stride, b.kernel);
    let len_out = out_len(len_in, s);
    let half = k / 2;
    let a = T::lit(super::slice_scale(k_t.cols, k));
    // per-sample length of one phase, and the furthest tap shift within it
    let q = (len_in + 2 * half).div_ceil(s);
    let reach = (k - 1) / s;
    let n_pad = batch * q;
    let mut phases = vec![T::zero(); s * (n_pad + reach)];
    let mut acc = vec![T::zero(); n_pad];
    let mut out = vec![T::zero(); b.hidden * batch * len_out];
    for h in 0..b.hidden {
        let taps = &p[k_t.offset + h * k_t.cols + b.tap_offset..][..k];
        let src_row = &x[h * batch * len_in..][..batch * len_in];
        for (bi, src) in src_row.chunks_exact(len_in).enumerate() {
            for (i, v) in src.iter().enumerate() {
                let j = i + half;
                phases[(j % s) * (n_pad + reach) + bi * q + j / s] = *v;
            }
        }
        acc.fill(T::zero());
        for (t, tap) in taps.iter().enumerate() {
            let w = a * *tap;
            let ph = &phases[(t % s) * (n_pad + reach) + t / s..][..n_pad];
            for (d, v) in acc.iter_mut().zip(ph) {
                *d += w * *v;
            }
        }
        let dst_row = &mut out[h * batch * len_out..][..batch * len_out];
        for (dst, src) in dst_row.chunks_exact_mut(len_out).zip(acc.chunks_exact(q)) {
            dst.copy_from_slice(&src[..len_out]);
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn depthwise_back<T: Scalar>(
    p: &[T],
    g: &mut [T],
    b: &BlockView,
    layout: &super::NetLayout,
    x: &[T],
    dout: &[T],
    batch: usize,
    len_in: usize,
) -> Vec<T> {
    let k_t = &layout.tensors[b.layout.dw];
    let len_out = out_len(len_in, b.stride);
    let half = b.kernel / 2;
    let a = T::lit(super::slice_scale(k_t.cols, b.kernel));
    let ranges: Vec<_> = (0..b.kernel)
        .map(|t| tap_range(t, half, b.stride, len_in, len_out))
        .collect();
    let mut dx = vec![T::zero(); b.hidden * batch * len_in];
    for h in 0..b.hidden {
        let base_k = k_t.offset + h * k_t.cols + b.tap_offset;
        for (t, r) in ranges.iter().enumerate() {
            let w = a * p[base_k + t];
            let mut gw = T::zero();
            for bi in 0..batch {
                let src = &x[(h * batch + bi) * len_in..][..len_in];
                let dsrc = &mut dx[(h * batch + bi) * len_in..][..len_in];
                let dd = &dout[(h * batch + bi) * len_out..][..len_out];
                let first = r.start * b.stride + t - half;
                if b.stride == 1 {
                    for ((d, s), ds) in dd[r.clone()]
                        .iter()
                        .zip(&src[first..])
                        .zip(&mut dsrc[first..])
                    {
                        gw += *d * *s;
                        *ds += w * *d;
                    }
                } else {
                    for (j, d) in dd[r.clone()].iter().enumerate() {
                        let pos = first + j * b.stride;
                        gw += *d * src[pos];
                        dsrc[pos] += w * *d;
                    }
                }
            }
            g[base_k + t] += a * gw;
        }
    }
    dx
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Mean over the length axis: `c x (B*len)` to `c x B`.
fn mean_pool<T: Scalar>(x: &[T], len: usize) -> Vec<T> {
    let inv = T::one() / T::from_usize(len).unwrap();
    x.chunks_exact(len)
        .map(|row| row.iter().copied().sum::<T>() * inv)
        .collect()
}

fn forward_block<T: Scalar>(
    params: &SupernetParams<T>,
    b: &BlockView,
    x: Vec<T>,
    batch: usize,
    len_in: usize,
) -> (Vec<T>, BlockCache<T>) {
    let p = &params.data;
    let l = &*params.layout;
    let n_in = batch * len_in;
    let len_out = out_len(len_in, b.stride);
    let n_out = batch * len_out;

    let mut expanded = pointwise(
        p,
        weight(l, b.layout.expand_w, b.hidden, b.in_c),
        offset(l, b.layout.expand_b),
        &x,
        n_in,
    );
    relu_in_place(&mut expanded);
    let mut dw = depthwise(p, b, l, &expanded, batch, len_in);
    relu_in_place(&mut dw);

    let (se, gated) = match &b.se {
        Some(sv) => {
            let pooled = mean_pool(&dw, len_out);
            let mut reduced = pointwise(
                p,
                weight(l, sv.layout.reduce_w, sv.dim, b.hidden),
                offset(l, sv.layout.reduce_b),
                &pooled,
                batch,
            );
            relu_in_place(&mut reduced);
            let mut gate = pointwise(
                p,
                weight(l, sv.layout.expand_w, b.hidden, sv.dim),
                offset(l, sv.layout.expand_b),
                &reduced,
                batch,
            );
            for v in gate.iter_mut() {
                *v = sigmoid(*v);
            }
            let mut gated = dw.clone();
            for (i, row) in gated.chunks_exact_mut(len_out).enumerate() {
                let s = gate[i];
                for v in row.iter_mut() {
                    *v *= s;
                }
            }
            (
                Some(SeCache {
                    pooled,
                    reduced,
                    gate,
                }),
                Some(gated),
            )
        }
        None => (None, None),
    };

    let project_in = gated.as_deref().unwrap_or(&dw);
    let mut y = pointwise(
        p,
        weight(l, b.layout.project_w, b.out_c, b.hidden),
        offset(l, b.layout.project_b),
        project_in,
        n_out,
    );
    if b.residual {
        for (a, v) in y.iter_mut().zip(&x) {
            *a += *v;
        }
    }
    let cache = BlockCache {
        input: x,
        expanded,
        depthwise: dw,
        se,
        gated,
        len_in,
        len_out,
    };
    (y, cache)
}

/// Logits (`batch x n_classes`) of the subnet and the cache for [`backward`].
pub fn forward<T: Scalar>(
    params: &SupernetParams<T>,
    view: &SubnetView,
    input: &Batch<T>,
) -> Result<(LogitsBatch<T>, ActivationCache<T>)> {
    if input.len != view.resolution {
        return Err(Error::Shape(format!(
            "batch length {} does not match subnet resolution {}",
            input.len, view.resolution
        )));
    }
    if *view.layout() != *params.layout {
        return Err(Error::Shape(
            "view was built for a different supernet layout".into(),
        ));
    }
    let p = &params.data;
    let l = &*params.layout;
    let batch = input.batch;
    let mut len = input.len;

    let mut stem = pointwise(
        p,
        weight(l, l.stem_w, view.stem, 1),
        offset(l, l.stem_b),
        &input.data,
        batch * len,
    );
    relu_in_place(&mut stem);

    let mut x = stem.clone();
    let mut blocks = Vec::with_capacity(view.blocks.len());
    for b in &view.blocks {
        let (y, cache) = forward_block(params, b, x, batch, len);
        len = cache.len_out;
        blocks.push(cache);
        x = y;
    }

    let c_last = view.last_width();
    let mut head = pointwise(
        p,
        weight(l, l.head_w, view.head, c_last),
        offset(l, l.head_b),
        &x,
        batch * len,
    );
    relu_in_place(&mut head);
    let pooled = mean_pool(&head, len);
    let logits_t = pointwise(
        p,
        weight(l, l.cls_w, view.n_classes, view.head),
        offset(l, l.cls_b),
        &pooled,
        batch,
    );
    let mut logits = vec![T::zero(); batch * view.n_classes];
    for c in 0..view.n_classes {
        for bi in 0..batch {
            logits[bi * view.n_classes + c] = logits_t[c * batch + bi];
        }
    }
    let cache = ActivationCache {
        arch: view.arch.clone(),
        version: params.version,
        batch,
        input: input.data.clone(),
        stem,
        blocks,
        head_in: x,
        head,
        pooled,
        final_len: len,
    };
    Ok((LogitsBatch::new(logits, batch, view.n_classes), cache))
}

fn backward_block<T: Scalar>(
    params: &SupernetParams<T>,
    g: &mut [T],
    b: &BlockView,
    c: &BlockCache<T>,
    dy: Vec<T>,
    batch: usize,
) -> Vec<T> {
    let p = &params.data;
    let l = &*params.layout;
    let n_in = batch * c.len_in;
    let n_out = batch * c.len_out;

    let project_in = c.gated.as_deref().unwrap_or(&c.depthwise);
    let mut d_act = pointwise_back(
        p,
        g,
        weight(l, b.layout.project_w, b.out_c, b.hidden),
        offset(l, b.layout.project_b),
        project_in,
        &dy,
        n_out,
        true,
    )
    .unwrap();

    if let (Some(sv), Some(se)) = (&b.se, &c.se) {
        // d_act currently holds d(gated); split into d(dw) and d(gate)
        let mut d_gate = vec![T::zero(); b.hidden * batch];
        for (i, (drow, arow)) in d_act
            .chunks_exact_mut(c.len_out)
            .zip(c.depthwise.chunks_exact(c.len_out))
            .enumerate()
        {
            let s = se.gate[i];
            let mut acc = T::zero();
            for (d, a) in drow.iter_mut().zip(arow) {
                acc += *d * *a;
                *d *= s;
            }
            d_gate[i] = acc * s * (T::one() - s);
        }
        let mut d_red = pointwise_back(
            p,
            g,
            weight(l, sv.layout.expand_w, b.hidden, sv.dim),
            offset(l, sv.layout.expand_b),
            &se.reduced,
            &d_gate,
            batch,
            true,
        )
        .unwrap();
        relu_mask(&mut d_red, &se.reduced);
        let d_pool = pointwise_back(
            p,
            g,
            weight(l, sv.layout.reduce_w, sv.dim, b.hidden),
            offset(l, sv.layout.reduce_b),
            &se.pooled,
            &d_red,
            batch,
            true,
        )
        .unwrap();
        let inv = T::one() / T::from_usize(c.len_out).unwrap();
        for (i, row) in d_act.chunks_exact_mut(c.len_out).enumerate() {
            let add = d_pool[i] * inv;
            for d in row.iter_mut() {
                *d += add;
            }
        }
    }

    relu_mask(&mut d_act, &c.depthwise);
    let mut d_exp = depthwise_back(p, g, b, l, &c.expanded, &d_act, batch, c.len_in);
    relu_mask(&mut d_exp, &c.expanded);
    let mut dx = pointwise_back(
        p,
        g,
        weight(l, b.layout.expand_w, b.hidden, b.in_c),
        offset(l, b.layout.expand_b),
        &c.input,
        &d_exp,
        n_in,
        true,
    )
    .unwrap();
    if b.residual {
        for (a, v) in dx.iter_mut().zip(&dy) {
            *a += *v;
        }
    }
    dx
}

/// Adds the gradient of `sum(dlogits * logits)` into `grads`; only
/// coordinates of the view's slice plan are written.
pub fn backward_into<T: Scalar>(
    params: &SupernetParams<T>,
    view: &SubnetView,
    cache: &ActivationCache<T>,
    dlogits: &LogitsBatch<T>,
    grads: &mut Gradients<T>,
) -> Result<()> {
    if cache.arch != view.arch {
        return Err(Error::StaleCache(format!(
            "cache for {} used with view {}",
            cache.arch, view.arch
        )));
    }
    if cache.version != params.version {
        return Err(Error::StaleCache(format!(
            "cache from parameter version {} used at version {}",
            cache.version, params.version
        )));
    }
    if dlogits.batch != cache.batch || dlogits.n_classes != view.n_classes {
        return Err(Error::Shape(
            "dlogits shape does not match the forward batch".into(),
        ));
    }
    if grads.data.len() != params.data.len() {
        return Err(Error::Shape("gradient buffer size mismatch".into()));
    }
    let p = &params.data;
    let l = &*params.layout;
    let g = &mut grads.data;
    let batch = cache.batch;
    let len = cache.final_len;

    let mut dl_t = vec![T::zero(); view.n_classes * batch];
    for bi in 0..batch {
        for c in 0..view.n_classes {
            dl_t[c * batch + bi] = dlogits.values[bi * view.n_classes + c];
        }
    }
    let d_pool = pointwise_back(
        p,
        g,
        weight(l, l.cls_w, view.n_classes, view.head),
        offset(l, l.cls_b),
        &cache.pooled,
        &dl_t,
        batch,
        true,
    )
    .unwrap();
    let inv = T::one() / T::from_usize(len).unwrap();
    let mut d_head = vec![T::zero(); view.head * batch * len];
    for (i, row) in d_head.chunks_exact_mut(len).enumerate() {
        row.fill(d_pool[i] * inv);
    }
    relu_mask(&mut d_head, &cache.head);
    let mut dx = pointwise_back(
        p,
        g,
        weight(l, l.head_w, view.head, view.last_width()),
        offset(l, l.head_b),
        &cache.head_in,
        &d_head,
        batch * len,
        true,
    )
    .unwrap();

    for (b, c) in view.blocks.iter().zip(&cache.blocks).rev() {
        dx = backward_block(params, g, b, c, dx, batch);
    }

    relu_mask(&mut dx, &cache.stem);
    pointwise_back(
        p,
        g,
        weight(l, l.stem_w, view.stem, 1),
        offset(l, l.stem_b),
        &cache.input,
        &dx,
        batch * view.resolution,
        false,
    );
    Ok(())
}

pub fn backward<T: Scalar>(
    params: &SupernetParams<T>,
    view: &SubnetView,
    cache: &ActivationCache<T>,
    dlogits: &LogitsBatch<T>,
) -> Result<Gradients<T>> {
    let mut grads = Gradients::zeros(params.data.len());
    backward_into(params, view, cache, dlogits, &mut grads)?;
    Ok(grads)
}
