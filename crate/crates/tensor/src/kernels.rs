//! Loop kernels shared by forward and backward rules. Every reduction runs in a
//! fixed order so results are bit-reproducible.

use crate::scalar::Scalar;

/// `c[m,n] (+)= a[m,k] * b[k,n]`.
pub fn gemm<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    let (ki, ni) = (k as isize, n as isize);
    T::gemm_acc(m, k, n, a, (ki, 1), b, (ni, 1), c, (ni, 1));
}

/// `c[k,n] += a[m,k]^T * g[m,n]`.
pub fn gemm_tn<T: Scalar>(a: &[T], g: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    let (ki, ni) = (k as isize, n as isize);
    T::gemm_acc(k, m, n, a, (1, ki), g, (ni, 1), c, (ni, 1));
}

/// `c[m,k] += g[m,n] * b[k,n]^T`.
pub fn gemm_nt<T: Scalar>(g: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    let (ki, ni) = (k as isize, n as isize);
    T::gemm_acc(m, n, k, g, (ni, 1), b, (1, ni), c, (ki, 1));
}

pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Swaps axes `a` and `b`.
pub fn swap_axes<T: Scalar>(x: &[T], shape: &[usize], a: usize, b: usize) -> (Vec<T>, Vec<usize>) {
    let mut out_shape = shape.to_vec();
    out_shape.swap(a, b);
    let in_strides = strides(shape);
    let mut perm_strides = in_strides.clone();
    perm_strides.swap(a, b);
    let n = x.len();
    let mut out = Vec::with_capacity(n);
    let nd = out_shape.len();
    if nd == 0 {
        return (x.to_vec(), out_shape);
    }
    // Iterate output in row-major order; innermost axis handled as a strided run.
    let inner = out_shape[nd - 1];
    let inner_stride = perm_strides[nd - 1];
    let mut idx = vec![0usize; nd - 1];
    let outer: usize = out_shape[..nd - 1].iter().product();
    for _ in 0..outer {
        let base: usize = idx.iter().zip(&perm_strides).map(|(i, s)| i * s).sum();
        for j in 0..inner {
            out.push(x[base + j * inner_stride]);
        }
        for ax in (0..nd - 1).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i + a.len() >= nd { a[i + a.len() - nd] } else { 1 };
        let db = if i + b.len() >= nd { b[i + b.len() - nd] } else { 1 };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return None;
        };
    }
    Some(out)
}

/// For each flat output index, the flat index into an input of shape `input`
/// broadcast to `out`.
pub fn broadcast_index_map(input: &[usize], out: &[usize]) -> Vec<usize> {
    let nd = out.len();
    let pad = nd - input.len();
    let in_strides = strides(input);
    let mut eff = vec![0usize; nd];
    for i in 0..input.len() {
        if input[i] != 1 {
            eff[pad + i] = in_strides[i];
        }
    }
    let total: usize = out.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; nd];
    let mut flat = 0usize;
    for _ in 0..total {
        map.push(flat);
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            flat += eff[ax];
            if idx[ax] < out[ax] {
                break;
            }
            flat -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    Same,
    /// Input is broadcast by repetition (its shape is a suffix of the output).
    Tiled,
    /// Input has a single element.
    Scalar,
    General,
}

pub fn layout(input: &[usize], out: &[usize]) -> Layout {
    let n_in: usize = input.iter().product();
    if input == out {
        return Layout::Same;
    }
    if n_in == 1 {
        return Layout::Scalar;
    }
    // Strip leading ones, then check suffix equality.
    let trimmed: Vec<usize> = input.iter().copied().skip_while(|&d| d == 1).collect();
    if trimmed.len() <= out.len() && out[out.len() - trimmed.len()..] == trimmed[..] {
        return Layout::Tiled;
    }
    Layout::General
}

/// Reduces a gradient of shape `out` back to `input` by summation.
pub fn sum_to_shape<T: Scalar>(g: &[T], out: &[usize], input: &[usize]) -> Vec<T> {
    let n_in: usize = input.iter().product();
    match layout(input, out) {
        Layout::Same => g.to_vec(),
        Layout::Scalar => vec![g.iter().copied().sum()],
        Layout::Tiled => {
            let mut acc = vec![T::zero(); n_in];
            for chunk in g.chunks(n_in) {
                for (a, &v) in acc.iter_mut().zip(chunk) {
                    *a = *a + v;
                }
            }
            acc
        }
        Layout::General => {
            let map = broadcast_index_map(input, out);
            let mut acc = vec![T::zero(); n_in];
            for (&src, &v) in map.iter().zip(g) {
                acc[src] = acc[src] + v;
            }
            acc
        }
    }
}

/// Materialises `x` (shape `input`) broadcast to `out`.
pub fn expand<T: Scalar>(x: &[T], input: &[usize], out: &[usize]) -> Vec<T> {
    let total: usize = out.iter().product();
    match layout(input, out) {
        Layout::Same => x.to_vec(),
        Layout::Scalar => vec![x[0]; total],
        Layout::Tiled => {
            let mut v = Vec::with_capacity(total);
            while v.len() < total {
                v.extend_from_slice(x);
            }
            v
        }
        Layout::General => broadcast_index_map(input, out)
            .into_iter()
            .map(|i| x[i])
            .collect(),
    }
}

/// Splits a shape around `axis` into (outer, len, inner) extents.
pub fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_identity() {
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let id = [1.0f64, 0.0, 0.0, 1.0];
        let mut c = [0.0; 4];
        gemm(&a, &id, &mut c, 2, 2, 2);
        assert_eq!(c, a);
    }

    #[test]
    fn swap_axes_matches_naive() {
        let shape = [2, 3, 4];
        let x: Vec<f64> = (0..24).map(|v| v as f64).collect();
        let (y, ys) = swap_axes(&x, &shape, 0, 2);
        assert_eq!(ys, vec![4, 3, 2]);
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..4 {
                    assert_eq!(y[k * 6 + j * 2 + i], x[i * 12 + j * 4 + k]);
                }
            }
        }
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[3, 1], &[4]), Some(vec![3, 4]));
        assert_eq!(broadcast_shape(&[2, 3], &[3, 2]), None);
        assert_eq!(layout(&[1, 4], &[3, 4]), Layout::Tiled);
        assert_eq!(layout(&[3, 1], &[3, 4]), Layout::General);
        let g = [1.0f64; 12];
        assert_eq!(sum_to_shape(&g, &[3, 4], &[3, 1]), vec![4.0; 3]);
        assert_eq!(sum_to_shape(&g, &[3, 4], &[4]), vec![3.0; 4]);
    }
}
