//! Numpy-style broadcasting for binary elementwise kernels.

use super::{NumericsError, Result, Scalar};

/// Right-aligned broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = dim_from_right(a, rank - 1 - i);
        let db = dim_from_right(b, rank - 1 - i);
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(NumericsError::ShapeMismatch {
                    op: "broadcast",
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

fn dim_from_right(shape: &[usize], from_right: usize) -> usize {
    if from_right < shape.len() {
        shape[shape.len() - 1 - from_right]
    } else {
        1
    }
}

/// Element strides of `shape` viewed inside `out`; broadcast axes get 0.
fn strides_in(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..rank).rev() {
        let d = dim_from_right(shape, rank - 1 - i);
        strides[i] = if d == 1 { 0 } else { acc };
        acc *= d;
    }
    strides
}

enum Layout {
    Same,
    Scalar,
    /// Operand repeats every `period` output elements.
    Tail(usize),
    General(Vec<usize>),
}

fn layout(shape: &[usize], out: &[usize]) -> Layout {
    let numel: usize = shape.iter().product();
    let out_numel: usize = out.iter().product();
    if numel == out_numel {
        return Layout::Same;
    }
    if numel == 1 {
        return Layout::Scalar;
    }
    // Operand equals a trailing block of the output shape, possibly with
    // leading unit axes.
    let trimmed: Vec<usize> = shape.iter().copied().skip_while(|&d| d == 1).collect();
    if out.ends_with(&trimmed) {
        return Layout::Tail(numel);
    }
    Layout::General(strides_in(shape, out))
}

/// Source offset for every output element.
fn for_each_offset(out: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = out.len();
    let numel: usize = out.iter().product();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for i in 0..numel {
        f(i, off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < out[ax] {
                break;
            }
            off -= strides[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

fn gather<T: Scalar>(data: &[T], shape: &[usize], out: &[usize]) -> Option<Vec<T>> {
    match layout(shape, out) {
        Layout::Same => None,
        Layout::Scalar => Some(vec![data[0]; out.iter().product()]),
        Layout::Tail(period) => {
            let numel: usize = out.iter().product();
            Some((0..numel).map(|i| data[i % period]).collect())
        }
        Layout::General(strides) => {
            let mut v = Vec::with_capacity(out.iter().product());
            for_each_offset(out, &strides, |_, off| v.push(data[off]));
            Some(v)
        }
    }
}

/// Broadcast `a op b`, returning the output shape and data.
pub(crate) fn binary<T: Scalar>(
    a_shape: &[usize],
    a: &[T],
    b_shape: &[usize],
    b: &[T],
    op: &'static str,
    f: impl Fn(T, T) -> T,
) -> Result<(Vec<usize>, Vec<T>)> {
    let out = broadcast_shape(a_shape, b_shape).map_err(|_| NumericsError::ShapeMismatch {
        op,
        lhs: a_shape.to_vec(),
        rhs: b_shape.to_vec(),
    })?;
    let numel: usize = out.iter().product();
    let mut data = Vec::with_capacity(numel);
    match (layout(a_shape, &out), layout(b_shape, &out)) {
        (Layout::Same, Layout::Same) => data.extend(a.iter().zip(b).map(|(&x, &y)| f(x, y))),
        (Layout::Same, Layout::Scalar) => data.extend(a.iter().map(|&x| f(x, b[0]))),
        (Layout::Same, Layout::Tail(p)) => {
            for chunk in a.chunks_exact(p) {
                data.extend(chunk.iter().zip(b).map(|(&x, &y)| f(x, y)));
            }
        }
        (Layout::Scalar, Layout::Same) => data.extend(b.iter().map(|&y| f(a[0], y))),
        (Layout::Tail(p), Layout::Same) => {
            for chunk in b.chunks_exact(p) {
                data.extend(a.iter().zip(chunk).map(|(&x, &y)| f(x, y)));
            }
        }
        _ => {
            let ga = gather(a, a_shape, &out);
            let gb = gather(b, b_shape, &out);
            let ra = ga.as_deref().unwrap_or(a);
            let rb = gb.as_deref().unwrap_or(b);
            data.extend(ra.iter().zip(rb).map(|(&x, &y)| f(x, y)));
        }
    }
    Ok((out, data))
}

/// Sum a gradient of shape `out` down to an operand of shape `shape`.
pub(crate) fn reduce_to<T: Scalar>(grad: &[T], out: &[usize], shape: &[usize]) -> Vec<T> {
    let numel: usize = shape.iter().product();
    match layout(shape, out) {
        Layout::Same => grad.to_vec(),
        Layout::Scalar => vec![grad.iter().copied().sum()],
        Layout::Tail(period) => {
            let mut acc = vec![T::zero(); period];
            for chunk in grad.chunks_exact(period) {
                for (a, &g) in acc.iter_mut().zip(chunk) {
                    *a += g;
                }
            }
            acc
        }
        Layout::General(strides) => {
            let mut acc = vec![T::zero(); numel];
            for_each_offset(out, &strides, |i, off| acc[off] += grad[i]);
            acc
        }
    }
}

/// Materialize `data` of `shape` broadcast to `out`.
pub(crate) fn expand<T: Scalar>(data: &[T], shape: &[usize], out: &[usize]) -> Vec<T> {
    gather(data, shape, out).unwrap_or_else(|| data.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes() {
        assert_eq!(broadcast_shape(&[2, 1], &[1, 3]).unwrap(), vec![2, 3]);
        assert_eq!(broadcast_shape(&[4, 2, 3], &[3]).unwrap(), vec![4, 2, 3]);
        assert_eq!(broadcast_shape(&[], &[5]).unwrap(), vec![5]);
        assert!(broadcast_shape(&[2, 3], &[2]).is_err());
    }

    #[test]
    fn general_layout_matches_naive() {
        // [2,1,3] against [2,4,1]
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect();
        let b: Vec<f64> = (0..8).map(|v| 10.0 * v as f64).collect();
        let (shape, out) = binary(&[2, 1, 3], &a, &[2, 4, 1], &b, "add", |x, y| x + y).unwrap();
        assert_eq!(shape, vec![2, 4, 3]);
        for i in 0..2 {
            for j in 0..4 {
                for k in 0..3 {
                    let want = a[i * 3 + k] + b[i * 4 + j];
                    assert_eq!(out[(i * 4 + j) * 3 + k], want);
                }
            }
        }
        let red = reduce_to(&out, &[2, 4, 3], &[2, 1, 3]);
        assert_eq!(red.len(), 6);
    }

    #[test]
    fn reduce_tail_sums_rows() {
        let g = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        assert_eq!(reduce_to(&g, &[2, 3], &[3]), vec![5.0, 7.0, 9.0]);
        assert_eq!(reduce_to(&g, &[2, 3], &[1]), vec![21.0]);
        assert_eq!(reduce_to(&g, &[2, 3], &[2, 1]), vec![6.0, 15.0]);
    }
}
