//! Slice-level kernels shared by the forward and backward passes.

use super::{NumericsError, Result, Scalar};

pub fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    let mismatch = || NumericsError::ShapeMismatch {
        op: "matmul",
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.is_empty() || b.len() != 2 {
        return Err(mismatch());
    }
    let k = a[a.len() - 1];
    if b[0] != k {
        return Err(mismatch());
    }
    let m = a[..a.len() - 1].iter().product();
    Ok((m, k, b[1]))
}

/// `out (+)= a[m,k] * b[k,n]`.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize, acc: bool) {
    let beta = if acc { T::one() } else { T::zero() };
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a,
        (k as isize, 1),
        b,
        (n as isize, 1),
        beta,
        out,
        (n as isize, 1),
    );
}

/// `out (+)= a[m,k] * b[n,k]^T`.
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize, acc: bool) {
    let beta = if acc { T::one() } else { T::zero() };
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a,
        (k as isize, 1),
        b,
        (1, k as isize),
        beta,
        out,
        (n as isize, 1),
    );
}

/// `out (+)= a[k,m]^T * b[k,n]`.
pub fn matmul_tn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize, acc: bool) {
    let beta = if acc { T::one() } else { T::zero() };
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a,
        (1, m as isize),
        b,
        (n as isize, 1),
        beta,
        out,
        (n as isize, 1),
    );
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
pub fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let th = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + three * a * x * x)
}

/// In-place softmax of each contiguous row of length `d`.
pub fn softmax_rows<T: Scalar>(data: &mut [T], d: usize) {
    for row in data.chunks_exact_mut(d) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = T::one() / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

/// In-place log-softmax of each row.
pub fn log_softmax_rows<T: Scalar>(data: &mut [T], d: usize) {
    for row in data.chunks_exact_mut(d) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
}

/// Layer norm over rows of length `d`. `stats` receives `(mean, rstd)` pairs.
pub fn layer_norm_forward<T: Scalar>(
    x: &[T],
    gain: Option<&[T]>,
    bias: Option<&[T]>,
    out: &mut [T],
    stats: &mut [T],
    d: usize,
    eps: T,
) {
    let inv_d = T::one() / T::from_f64(d as f64);
    for (r, (row, orow)) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)).enumerate() {
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rstd = T::one() / (var + eps).sqrt();
        stats[2 * r] = mean;
        stats[2 * r + 1] = rstd;
        for (j, (o, &v)) in orow.iter_mut().zip(row).enumerate() {
            let mut y = (v - mean) * rstd;
            if let Some(g) = gain {
                y *= g[j];
            }
            if let Some(b) = bias {
                y += b[j];
            }
            *o = y;
        }
    }
}

/// Backward of [`layer_norm_forward`]. Gain/bias gradients are accumulated.
#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward<T: Scalar>(
    x: &[T],
    gain: Option<&[T]>,
    stats: &[T],
    dy: &[T],
    dx: &mut [T],
    mut dgain: Option<&mut [T]>,
    mut dbias: Option<&mut [T]>,
    d: usize,
) {
    let inv_d = T::one() / T::from_f64(d as f64);
    let mut dxhat = vec![T::zero(); d];
    let mut xhat = vec![T::zero(); d];
    for (r, ((row, dyrow), dxrow)) in x
        .chunks_exact(d)
        .zip(dy.chunks_exact(d))
        .zip(dx.chunks_exact_mut(d))
        .enumerate()
    {
        let mean = stats[2 * r];
        let rstd = stats[2 * r + 1];
        let mut m1 = T::zero();
        let mut m2 = T::zero();
        for j in 0..d {
            xhat[j] = (row[j] - mean) * rstd;
            dxhat[j] = match gain {
                Some(g) => dyrow[j] * g[j],
                None => dyrow[j],
            };
            m1 += dxhat[j];
            m2 += dxhat[j] * xhat[j];
            if let Some(dg) = dgain.as_deref_mut() {
                dg[j] += dyrow[j] * xhat[j];
            }
            if let Some(db) = dbias.as_deref_mut() {
                db[j] += dyrow[j];
            }
        }
        m1 *= inv_d;
        m2 *= inv_d;
        for j in 0..d {
            dxrow[j] = rstd * (dxhat[j] - m1 - xhat[j] * m2);
        }
    }
}

/// Dimensions of a `[batch, tokens, heads, head_dim]` attention operand.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnDims {
    pub batch: usize,
    pub tokens: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl AttnDims {
    pub fn from_shape(shape: &[usize]) -> Result<Self> {
        match *shape {
            [batch, tokens, heads, head_dim] if head_dim > 0 => Ok(Self {
                batch,
                tokens,
                heads,
                head_dim,
            }),
            _ => Err(NumericsError::InvalidShape {
                op: "attention",
                shape: shape.to_vec(),
                reason: "expected [batch, tokens, heads, head_dim]".into(),
            }),
        }
    }

    fn offset(&self, b: usize, h: usize) -> usize {
        b * self.tokens * self.heads * self.head_dim + h * self.head_dim
    }

    fn row_stride(&self) -> isize {
        (self.heads * self.head_dim) as isize
    }
}

/// Scaled dot-product attention. Returns the output and the attention
/// probabilities laid out `[batch, heads, tokens, tokens]`.
pub fn attention_forward<T: Scalar>(q: &[T], k: &[T], v: &[T], dims: AttnDims) -> (Vec<T>, Vec<T>) {
    let AttnDims {
        batch,
        tokens: t,
        heads,
        head_dim: hd,
    } = dims;
    let scale = T::one() / T::from_f64(hd as f64).sqrt();
    let rs = dims.row_stride();
    let mut out = vec![T::zero(); q.len()];
    let mut probs = vec![T::zero(); batch * heads * t * t];
    for b in 0..batch {
        for h in 0..heads {
            let off = dims.offset(b, h);
            let p = &mut probs[(b * heads + h) * t * t..][..t * t];
            T::gemm(
                t,
                hd,
                t,
                scale,
                &q[off..],
                (rs, 1),
                &k[off..],
                (1, rs),
                T::zero(),
                p,
                (t as isize, 1),
            );
            softmax_rows(p, t);
            T::gemm(
                t,
                t,
                hd,
                T::one(),
                p,
                (t as isize, 1),
                &v[off..],
                (rs, 1),
                T::zero(),
                &mut out[off..],
                (rs, 1),
            );
        }
    }
    (out, probs)
}

/// Backward of [`attention_forward`]; gradients are accumulated.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dout: &[T],
    dq: &mut [T],
    dk: &mut [T],
    dv: &mut [T],
    dims: AttnDims,
) {
    let AttnDims {
        batch,
        tokens: t,
        heads,
        head_dim: hd,
    } = dims;
    let scale = T::one() / T::from_f64(hd as f64).sqrt();
    let rs = dims.row_stride();
    let ts = t as isize;
    let mut dp = vec![T::zero(); t * t];
    for b in 0..batch {
        for h in 0..heads {
            let off = dims.offset(b, h);
            let p = &probs[(b * heads + h) * t * t..][..t * t];
            // dV += P^T dO
            T::gemm(
                t,
                t,
                hd,
                T::one(),
                p,
                (1, ts),
                &dout[off..],
                (rs, 1),
                T::one(),
                &mut dv[off..],
                (rs, 1),
            );
            // dP = dO V^T
            T::gemm(
                t,
                hd,
                t,
                T::one(),
                &dout[off..],
                (rs, 1),
                &v[off..],
                (1, rs),
                T::zero(),
                &mut dp,
                (ts, 1),
            );
            // dS = P * (dP - rowsum(dP * P))
            for (prow, dprow) in p.chunks_exact(t).zip(dp.chunks_exact_mut(t)) {
                let dot: T = prow.iter().zip(dprow.iter()).map(|(&a, &b)| a * b).sum();
                for (d, &pv) in dprow.iter_mut().zip(prow) {
                    *d = pv * (*d - dot);
                }
            }
            // dQ += scale dS K ; dK += scale dS^T Q
            T::gemm(
                t,
                t,
                hd,
                scale,
                &dp,
                (ts, 1),
                &k[off..],
                (rs, 1),
                T::one(),
                &mut dq[off..],
                (rs, 1),
            );
            T::gemm(
                t,
                t,
                hd,
                scale,
                &dp,
                (1, ts),
                &q[off..],
                (rs, 1),
                T::one(),
                &mut dk[off..],
                (rs, 1),
            );
        }
    }
}

/// Rotate consecutive pairs of the last axis of `[batch, tokens, heads, dim]`.
/// `cos`/`sin` are `[tokens, dim / 2]`. With `inverse` the rotation angle is negated.
pub fn rotate_pairs<T: Scalar>(
    x: &[T],
    out: &mut [T],
    cos: &[T],
    sin: &[T],
    tokens: usize,
    heads: usize,
    dim: usize,
    inverse: bool,
) {
    let pairs = dim / 2;
    let row = heads * dim;
    // rows iterate over (batch, token)
    for (r,(chunk, ochunk)) in x.chunks_exact(row).zip(out.chunks_exact_mut(row)).enumerate() {
        let tok = r % tokens;
        let c = &cos[tok * pairs..][..pairs];
        let s = &sin[tok * pairs..][..pairs];
        for (hx, ho) in chunk.chunks_exact(dim).zip(ochunk.chunks_exact_mut(dim)) {
            for j in 0..pairs {
                let (a, b) = (hx[2 * j], hx[2 * j + 1]);
                let sj = if inverse { -s[j] } else { s[j] };
                ho[2 * j] = a * c[j] - b * sj;
                ho[2 * j + 1] = a * sj + b * c[j];
            }
        }
    }
}

/// `[batch, h, w, c]` -> `[batch, (h/p)*(w/p), p*p*c]`, patches row-major,
/// each patch flattened as (row, col, channel).
pub fn patchify<T: Scalar>(x: &[T], batch: usize, h: usize, w: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    patch_permute(x, &mut out, batch, h, w, c, p, false);
    out
}

pub fn unpatchify<T: Scalar>(x: &[T], batch: usize, h: usize, w: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    patch_permute(x, &mut out, batch, h, w, c, p, true);
    out
}

#[allow(clippy::too_many_arguments)]
fn patch_permute<T: Scalar>(
    src: &[T],
    dst: &mut [T],
    batch: usize,
    h: usize,
    w: usize,
    c: usize,
    p: usize,
    inverse: bool,
) {
    let (gh, gw) = (h / p, w / p);
    let patch = p * p * c;
    for b in 0..batch {
        for i in 0..h {
            for j in 0..w {
                let grid_off = ((b * h + i) * w + j) * c;
                let tok = (i / p) * gw + j / p;
                let inner = ((i % p) * p + j % p) * c;
                let patch_off = (b * gh * gw + tok) * patch + inner;
                for ch in 0..c {
                    if inverse {
                        dst[grid_off + ch] = src[patch_off + ch];
                    } else {
                        dst[patch_off + ch] = src[grid_off + ch];
                    }
                }
            }
        }
    }
}

/// 3x3 same-padding patches: `[b, h, w, c]` -> `[b, h, w, 9c]`.
pub fn im2col3<T: Scalar>(x: &[T], batch: usize, h: usize, w: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); batch * h * w * 9 * c];
    for b in 0..batch {
        for i in 0..h {
            for j in 0..w {
                let o = ((b * h + i) * w + j) * 9 * c;
                for di in 0..3 {
                    for dj in 0..3 {
                        let (si, sj) = (i + di, j + dj);
                        if si < 1 || sj < 1 || si > h || sj > w {
                            continue;
                        }
                        let src = ((b * h + si - 1) * w + sj - 1) * c;
                        let dst = o + (di * 3 + dj) * c;
                        out[dst..dst + c].copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
    }
    out
}

pub fn col2im3<T: Scalar>(g: &[T], batch: usize, h: usize, w: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); batch * h * w * c];
    for b in 0..batch {
        for i in 0..h {
            for j in 0..w {
                let o = ((b * h + i) * w + j) * 9 * c;
                for di in 0..3 {
                    for dj in 0..3 {
                        let (si, sj) = (i + di, j + dj);
                        if si < 1 || sj < 1 || si > h || sj > w {
                            continue;
                        }
                        let dst = ((b * h + si - 1) * w + sj - 1) * c;
                        let src = o + (di * 3 + dj) * c;
                        for ch in 0..c {
                            out[dst + ch] += g[src + ch];
                        }
                    }
                }
            }
        }
    }
    out
}

/// 2x2 average pooling with stride 2 on `[b, h, w, c]`.
pub fn avg_pool2<T: Scalar>(x: &[T], batch: usize, h: usize, w: usize, c: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64(0.25);
    let mut out = vec![T::zero(); batch * oh * ow * c];
    for b in 0..batch {
        for i in 0..oh {
            for j in 0..ow {
                let o = ((b * oh + i) * ow + j) * c;
                for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let src = ((b * h + 2 * i + di) * w + 2 * j + dj) * c;
                    for ch in 0..c {
                        out[o + ch] += quarter * x[src + ch];
                    }
                }
            }
        }
    }
    out
}

pub fn avg_pool2_backward<T: Scalar>(g: &[T], batch: usize, h: usize, w: usize, c: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64(0.25);
    let mut out = vec![T::zero(); batch * h * w * c];
    for b in 0..batch {
        for i in 0..oh {
            for j in 0..ow {
                let o = ((b * oh + i) * ow + j) * c;
                for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let dst = ((b * h + 2 * i + di) * w + 2 * j + dj) * c;
                    for ch in 0..c {
                        out[dst + ch] = quarter * g[o + ch];
                    }
                }
            }
        }
    }
    out
}
