//! Forward and adjoint kernels on plain tensors. The tape in `tape.rs` wires
//! these together; everything here is a pure function of its arguments.

use crate::error::{shape_err, Result, TensorError};
use crate::scalar::{gemm, Layout, Scalar};
use crate::tensor::{numel, Tensor};

// ---------------------------------------------------------------------------
// Broadcasting elementwise binary ops

/// Output shape of a broadcasting binary op. Allowed: equal shapes, a
/// one-element operand, or one shape being a trailing suffix of the other.
pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b {
        return Ok(a.to_vec());
    }
    if numel(b) == 1 && b.len() <= a.len() {
        return Ok(a.to_vec());
    }
    if numel(a) == 1 && a.len() <= b.len() {
        return Ok(b.to_vec());
    }
    if b.len() < a.len() && a.ends_with(b) {
        return Ok(a.to_vec());
    }
    if a.len() < b.len() && b.ends_with(a) {
        return Ok(b.to_vec());
    }
    Err(shape_err(op, format!("cannot broadcast {a:?} with {b:?}")))
}

pub(crate) fn zip_broadcast<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    let shape = broadcast_shape(op, a.shape(), b.shape())?;
    let n = numel(&shape);
    let (da, db) = (a.data(), b.data());
    let data = if da.len() == n && db.len() == n {
        da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
    } else {
        (0..n)
            .map(|i| f(da[i % da.len()], db[i % db.len()]))
            .collect()
    };
    Ok(Tensor::from_parts(shape, data))
}

/// Folds a gradient of the broadcast output back onto an operand of `numel` elements.
pub(crate) fn unbroadcast<T: Scalar>(grad: Vec<T>, shape: &[usize]) -> Tensor<T> {
    let n = numel(shape);
    if grad.len() == n {
        return Tensor::from_parts(shape.to_vec(), grad);
    }
    let mut out = vec![T::zero(); n];
    for (i, g) in grad.into_iter().enumerate() {
        out[i % n] = out[i % n] + g;
    }
    Tensor::from_parts(shape.to_vec(), out)
}

// ---------------------------------------------------------------------------
// Axis helpers

/// Splits a shape around `axis` into `(outer, extent, inner)`.
pub(crate) fn split_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TensorError::Axis {
            op,
            axis,
            rank: shape.len(),
        });
    }
    Ok((
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    ))
}

fn without_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    s
}

// ---------------------------------------------------------------------------
// Reductions

pub(crate) fn sum_axis<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, n, inner) = split_axis("sum", x.shape(), axis)?;
    let d = x.data();
    let mut out = vec![T::zero(); outer * inner];
    for o in 0..outer {
        for k in 0..n {
            let row = &d[(o * n + k) * inner..(o * n + k + 1) * inner];
            for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                *acc = *acc + v;
            }
        }
    }
    Ok(Tensor::from_parts(without_axis(x.shape(), axis), out))
}

/// Adjoint of `sum_axis`: repeat the gradient along the collapsed axis.
pub(crate) fn expand_axis<T: Scalar>(grad: &Tensor<T>, shape: &[usize], axis: usize, factor: T) -> Tensor<T> {
    let outer = numel(&shape[..axis]);
    let n = shape[axis];
    let inner = numel(&shape[axis + 1..]);
    let g = grad.data();
    let mut out = Vec::with_capacity(outer * n * inner);
    for o in 0..outer {
        for _ in 0..n {
            out.extend(g[o * inner..(o + 1) * inner].iter().map(|&v| v * factor));
        }
    }
    Tensor::from_parts(shape.to_vec(), out)
}

pub(crate) fn l2_norm_axis<T: Scalar>(x: &Tensor<T>, axis: usize, eps: T) -> Result<Tensor<T>> {
    let squares = x.map(|v| v * v);
    Ok(sum_axis(&squares, axis)?.map(|s| (s + eps).sqrt()))
}

pub(crate) fn l2_norm_backward<T: Scalar>(
    x: &Tensor<T>,
    norm: &Tensor<T>,
    grad: &Tensor<T>,
    axis: usize,
) -> Tensor<T> {
    let shape = x.shape();
    let outer = numel(&shape[..axis]);
    let n = shape[axis];
    let inner = numel(&shape[axis + 1..]);
    let (xd, nd, gd) = (x.data(), norm.data(), grad.data());
    let mut out = vec![T::zero(); xd.len()];
    for o in 0..outer {
        for k in 0..n {
            for i in 0..inner {
                let r = o * inner + i;
                let idx = (o * n + k) * inner + i;
                out[idx] = gd[r] * xd[idx] / nd[r];
            }
        }
    }
    Tensor::from_parts(shape.to_vec(), out)
}

// ---------------------------------------------------------------------------
// Softmax

pub(crate) fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, n, inner) = split_axis("softmax", x.shape(), axis)?;
    let d = x.data();
    let mut out = vec![T::zero(); d.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * n + k) * inner + i;
            let mut max = T::neg_infinity();
            for k in 0..n {
                max = max.max(d[at(k)]);
            }
            let mut total = T::zero();
            for k in 0..n {
                let e = (d[at(k)] - max).exp();
                out[at(k)] = e;
                total = total + e;
            }
            for k in 0..n {
                out[at(k)] = out[at(k)] / total;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub(crate) fn softmax_backward<T: Scalar>(y: &Tensor<T>, grad: &Tensor<T>, axis: usize) -> Tensor<T> {
    let shape = y.shape();
    let outer = numel(&shape[..axis]);
    let n = shape[axis];
    let inner = numel(&shape[axis + 1..]);
    let (yd, gd) = (y.data(), grad.data());
    let mut out = vec![T::zero(); yd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * n + k) * inner + i;
            let mut dot = T::zero();
            for k in 0..n {
                dot = dot + yd[at(k)] * gd[at(k)];
            }
            for k in 0..n {
                out[at(k)] = yd[at(k)] * (gd[at(k)] - dot);
            }
        }
    }
    Tensor::from_parts(shape.to_vec(), out)
}

// ---------------------------------------------------------------------------
// Permutation

pub(crate) fn check_perm(perm: &[usize], rank: usize) -> Result<()> {
    let mut seen = vec![false; rank];
    if perm.len() != rank {
        return Err(shape_err(
            "permute",
            format!("permutation {perm:?} has wrong length for rank {rank}"),
        ));
    }
    for &p in perm {
        if p >= rank || seen[p] {
            return Err(shape_err(
                "permute",
                format!("{perm:?} is not a permutation of 0..{rank}"),
            ));
        }
        seen[p] = true;
    }
    Ok(())
}

pub(crate) fn permute<T: Scalar>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let in_shape = x.shape();
    let rank = in_shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let d = x.data();
    let n = d.len();
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return Tensor::from_parts(out_shape, out);
    }
    if rank == 0 {
        return x.clone();
    }
    // Odometer over output indices; the innermost axis is walked as a run.
    let last = rank - 1;
    let (run, run_stride) = (out_shape[last], strides[last]);
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    loop {
        let mut off = base;
        for _ in 0..run {
            out.push(d[off]);
            off += run_stride;
        }
        let mut axis = last;
        loop {
            if axis == 0 {
                return Tensor::from_parts(out_shape, out);
            }
            axis -= 1;
            idx[axis] += 1;
            base += strides[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            base -= strides[axis] * idx[axis];
            idx[axis] = 0;
        }
    }
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

// ---------------------------------------------------------------------------
// Batched matrix product

pub(crate) struct MatmulDims {
    pub p: usize,
    pub q: usize,
    pub r: usize,
    pub batch: usize,
    pub batch_a: usize,
    pub batch_b: usize,
    pub out_shape: Vec<usize>,
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<MatmulDims> {
    if a.len() < 2 || b.len() < 2 {
        return Err(shape_err(
            "matmul",
            format!("operands must be at least rank 2, got {a:?} and {b:?}"),
        ));
    }
    let (ba, ma) = a.split_at(a.len() - 2);
    let (bb, mb) = b.split_at(b.len() - 2);
    if ma[1] != mb[0] {
        return Err(shape_err(
            "matmul",
            format!("inner extents differ: {a:?} x {b:?}"),
        ));
    }
    let batch_shape = if ba.ends_with(bb) {
        ba
    } else if bb.ends_with(ba) {
        bb
    } else {
        return Err(shape_err(
            "matmul",
            format!("batch extents not broadcastable: {a:?} x {b:?}"),
        ));
    };
    let mut out_shape = batch_shape.to_vec();
    out_shape.extend_from_slice(&[ma[0], mb[1]]);
    Ok(MatmulDims {
        p: ma[0],
        q: ma[1],
        r: mb[1],
        batch: numel(batch_shape),
        batch_a: numel(ba),
        batch_b: numel(bb),
        out_shape,
    })
}

pub(crate) fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let dims = matmul_dims(a.shape(), b.shape())?;
    let MatmulDims { p, q, r, batch, batch_a, batch_b, .. } = dims;
    let mut out = vec![T::zero(); batch * p * r];
    let (ad, bd) = (a.data(), b.data());
    if batch_b == 1 && batch_a == batch {
        // Shared right operand: fold the batch into the rows.
        gemm(batch * p, q, r, ad, Layout::row_major(q), bd, Layout::row_major(r), T::zero(), &mut out);
    } else {
        for t in 0..batch {
            let (ta, tb) = (t % batch_a, t % batch_b);
            gemm(
                p,
                q,
                r,
                &ad[ta * p * q..(ta + 1) * p * q],
                Layout::row_major(q),
                &bd[tb * q * r..(tb + 1) * q * r],
                Layout::row_major(r),
                T::zero(),
                &mut out[t * p * r..(t + 1) * p * r],
            );
        }
    }
    Ok(Tensor::from_parts(dims.out_shape, out))
}

/// Returns `(dA, dB)` for `C = A B` given `dC`.
pub(crate) fn matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    grad: &Tensor<T>,
    need_a: bool,
    need_b: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let dims = matmul_dims(a.shape(), b.shape()).expect("validated in forward");
    let MatmulDims { p, q, r, batch, batch_a, batch_b, .. } = dims;
    let (ad, bd, gd) = (a.data(), b.data(), grad.data());
    let folded = batch_b == 1 && batch_a == batch;

    let da = need_a.then(|| {
        let mut da = vec![T::zero(); a.numel()];
        if folded {
            // dA = dC B^T over the folded rows.
            gemm(batch * p, r, q, gd, Layout::row_major(r), bd, Layout::transposed(r), T::zero(), &mut da);
        } else {
            for t in 0..batch {
                let (ta, tb) = (t % batch_a, t % batch_b);
                gemm(
                    p,
                    r,
                    q,
                    &gd[t * p * r..(t + 1) * p * r],
                    Layout::row_major(r),
                    &bd[tb * q * r..(tb + 1) * q * r],
                    Layout::transposed(r),
                    T::one(),
                    &mut da[ta * p * q..(ta + 1) * p * q],
                );
            }
        }
        Tensor::from_parts(a.shape().to_vec(), da)
    });

    let db = need_b.then(|| {
        let mut db = vec![T::zero(); b.numel()];
        if folded {
            // dB = A^T dC with A viewed as (batch*p) x q.
            gemm(q, batch * p, r, ad, Layout::transposed(q), gd, Layout::row_major(r), T::zero(), &mut db);
        } else {
            for t in 0..batch {
                let (ta, tb) = (t % batch_a, t % batch_b);
                gemm(
                    q,
                    p,
                    r,
                    &ad[ta * p * q..(ta + 1) * p * q],
                    Layout::transposed(q),
                    &gd[t * p * r..(t + 1) * p * r],
                    Layout::row_major(r),
                    T::one(),
                    &mut db[tb * q * r..(tb + 1) * q * r],
                );
            }
        }
        Tensor::from_parts(b.shape().to_vec(), db)
    });

    (da, db)
}

// ---------------------------------------------------------------------------
// Valid 2-D cross-correlation, NCHW input and OIHW kernel

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvDims {
    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }
}

pub(crate) fn conv_dims(input: &[usize], kernel: &[usize], bias: &[usize], stride: usize) -> Result<ConvDims> {
    let op = "conv2d";
    if input.len() != 4 || kernel.len() != 4 {
        return Err(shape_err(
            op,
            format!("expected NCHW input and OIHW kernel, got {input:?} and {kernel:?}"),
        ));
    }
    if stride == 0 {
        return Err(shape_err(op, "stride must be positive"));
    }
    let (batch, c, h, w) = (input[0], input[1], input[2], input[3]);
    let (o, kc, kh, kw) = (kernel[0], kernel[1], kernel[2], kernel[3]);
    if kc != c {
        return Err(shape_err(
            op,
            format!("input has {c} channels but kernel expects {kc}"),
        ));
    }
    if bias != [o] {
        return Err(shape_err(
            op,
            format!("bias shape {bias:?} does not match {o} output channels"),
        ));
    }
    if kh == 0 || kw == 0 || kh > h || kw > w {
        return Err(shape_err(
            op,
            format!("kernel {kh}x{kw} does not fit input {h}x{w}"),
        ));
    }
    Ok(ConvDims {
        batch,
        c,
        h,
        w,
        o,
        kh,
        kw,
        stride,
        oh: (h - kh) / stride + 1,
        ow: (w - kw) / stride + 1,
    })
}

/// Unfolds one image into a `(C*kh*kw) x (oh*ow)` patch matrix.
fn im2col<T: Scalar>(img: &[T], d: &ConvDims, cols: &mut [T]) {
    let pos = d.positions();
    for ch in 0..d.c {
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = (ch * d.kh + ki) * d.kw + kj;
                let dst = &mut cols[row * pos..(row + 1) * pos];
                for oy in 0..d.oh {
                    let src = &img[(ch * d.h + oy * d.stride + ki) * d.w + kj..];
                    for ox in 0..d.ow {
                        dst[oy * d.ow + ox] = src[ox * d.stride];
                    }
                }
            }
        }
    }
}

/// Adjoint of `im2col`: scatter-adds patch gradients back onto the image.
fn col2im<T: Scalar>(cols: &[T], d: &ConvDims, img: &mut [T]) {
    let pos = d.positions();
    for ch in 0..d.c {
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = (ch * d.kh + ki) * d.kw + kj;
                let src = &cols[row * pos..(row + 1) * pos];
                for oy in 0..d.oh {
                    let base = (ch * d.h + oy * d.stride + ki) * d.w + kj;
                    for ox in 0..d.ow {
                        let at = base + ox * d.stride;
                        img[at] = img[at] + src[oy * d.ow + ox];
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
) -> Result<Tensor<T>> {
    let d = conv_dims(input.shape(), kernel.shape(), bias.shape(), stride)?;
    let (patch, pos) = (d.patch(), d.positions());
    let img_len = d.c * d.h * d.w;
    let out_len = d.o * pos;
    let mut out = vec![T::zero(); d.batch * out_len];
    let mut cols = vec![T::zero(); patch * pos];
    let (xd, kd, bd) = (input.data(), kernel.data(), bias.data());
    for n in 0..d.batch {
        im2col(&xd[n * img_len..(n + 1) * img_len], &d, &mut cols);
        let dst = &mut out[n * out_len..(n + 1) * out_len];
        for (oc, chunk) in dst.chunks_mut(pos).enumerate() {
            chunk.fill(bd[oc]);
        }
        gemm(d.o, patch, pos, kd, Layout::row_major(patch), &cols, Layout::row_major(pos), T::one(), dst);
    }
    Ok(Tensor::from_parts(vec![d.batch, d.o, d.oh, d.ow], out))
}

pub(crate) struct ConvGrads<T: Scalar> {
    pub input: Option<Tensor<T>>,
    pub kernel: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    grad: &Tensor<T>,
    need: [bool; 3],
) -> ConvGrads<T> {
    let d = conv_dims(input.shape(), kernel.shape(), bias.shape(), stride).expect("validated in forward");
    let (patch, pos) = (d.patch(), d.positions());
    let img_len = d.c * d.h * d.w;
    let out_len = d.o * pos;
    let (xd, kd, gd) = (input.data(), kernel.data(), grad.data());

    let mut dx = need[0].then(|| vec![T::zero(); input.numel()]);
    let mut dk = need[1].then(|| vec![T::zero(); kernel.numel()]);
    let mut db = need[2].then(|| vec![T::zero(); d.o]);
    let mut cols = vec![T::zero(); patch * pos];

    for n in 0..d.batch {
        let g = &gd[n * out_len..(n + 1) * out_len];
        if let Some(db) = db.as_mut() {
            for (oc, chunk) in g.chunks(pos).enumerate() {
                db[oc] = db[oc] + chunk.iter().copied().sum::<T>();
            }
        }
        if let Some(dk) = dk.as_mut() {
            im2col(&xd[n * img_len..(n + 1) * img_len], &d, &mut cols);
            // dK += dY * cols^T
            gemm(d.o, pos, patch, g, Layout::row_major(pos), &cols, Layout::transposed(pos), T::one(), dk);
        }
        if let Some(dx) = dx.as_mut() {
            // dcols = K^T * dY
            gemm(patch, d.o, pos, kd, Layout::transposed(patch), g, Layout::row_major(pos), T::zero(), &mut cols);
            col2im(&cols, &d, &mut dx[n * img_len..(n + 1) * img_len]);
        }
    }

    ConvGrads {
        input: dx.map(|v| Tensor::from_parts(input.shape().to_vec(), v)),
        kernel: dk.map(|v| Tensor::from_parts(kernel.shape().to_vec(), v)),
        bias: db.map(|v| Tensor::from_parts(bias.shape().to_vec(), v)),
    }
}
