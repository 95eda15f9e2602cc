//! Dense row-major kernels used by the tape.

use crate::scalar::Scalar;

/// `c += a · b` with `a: n×k`, `b: k×m`.
///
/// Works on 4×4 output tiles held in locals; ragged edges fall back to
/// row-wise accumulation.
pub(crate) fn mm_nn<S: Scalar>(a: &[S], b: &[S], c: &mut [S], n: usize, k: usize, m: usize) {
    if m == 1 {
        for (c_i, a_row) in c.iter_mut().zip(a.chunks_exact(k)) {
            *c_i += dot(a_row, b);
        }
        return;
    }
    let (n4, m4) = (n - n % 4, m - m % 4);
    for i in (0..n4).step_by(4) {
        let rows: [&[S]; 4] = std::array::from_fn(|r| &a[(i + r) * k..(i + r + 1) * k]);
        for j in (0..m4).step_by(4) {
            let mut acc = [[S::zero(); 4]; 4];
            for p in 0..k {
                let bp: &[S; 4] = b[p * m + j..p * m + j + 4].try_into().expect("tile width");
                for r in 0..4 {
                    let ar = rows[r][p];
                    for q in 0..4 {
                        acc[r][q] += ar * bp[q];
                    }
                }
            }
            for (r, acc_r) in acc.iter().enumerate() {
                for (q, &v) in acc_r.iter().enumerate() {
                    c[(i + r) * m + j + q] += v;
                }
            }
        }
        for (r, a_row) in rows.iter().enumerate() {
            for j in m4..m {
                let mut acc = S::zero();
                for (p, &x) in a_row.iter().enumerate() {
                    acc += x * b[p * m + j];
                }
                c[(i + r) * m + j] += acc;
            }
        }
    }
    for i in n4..n {
        let c_row = &mut c[i * m..(i + 1) * m];
        for (p, &a_ip) in a[i * k..(i + 1) * k].iter().enumerate() {
            for (c_ij, &b_pj) in c_row.iter_mut().zip(&b[p * m..(p + 1) * m]) {
                *c_ij += a_ip * b_pj;
            }
        }
    }
}

fn transposed<S: Scalar>(x: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); rows * cols];
    for r in 0..rows {
        for q in 0..cols {
            out[q * rows + r] = x[r * cols + q];
        }
    }
    out
}

/// `c += a · bᵀ` with `a: n×k`, `b: m×k`.
pub(crate) fn mm_nt<S: Scalar>(a: &[S], b: &[S], c: &mut [S], n: usize, k: usize, m: usize) {
    mm_nn(a, &transposed(b, m, k), c, n, k, m);
}

/// `c += aᵀ · b` with `a: n×k`, `b: n×m`, `c: k×m`.
pub(crate) fn mm_tn<S: Scalar>(a: &[S], b: &[S], c: &mut [S], n: usize, k: usize, m: usize) {
    if m == 1 {
        for (a_row, &b_i) in a.chunks_exact(k).zip(b) {
            for (c_p, &a_ip) in c.iter_mut().zip(a_row) {
                *c_p += a_ip * b_i;
            }
        }
        return;
    }
    mm_nn(&transposed(a, n, k), b, c, k, n, m);
}

/// Dot product with four independent accumulators so the loop vectorizes.
fn dot<S: Scalar>(x: &[S], y: &[S]) -> S {
    let mut acc = [S::zero(); 4];
    let xs = x.chunks_exact(4);
    let ys = y.chunks_exact(4);
    let mut tail = S::zero();
    for (&p, &q) in xs.remainder().iter().zip(ys.remainder()) {
        tail += p * q;
    }
    for (xc, yc) in xs.zip(ys) {
        for r in 0..4 {
            acc[r] += xc[r] * yc[r];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// True when every value is finite; branch-free so it vectorizes.
#[inline]
pub(crate) fn all_finite<S: Scalar>(values: &[S]) -> bool {
    let mut acc = [S::zero(); 4];
    let chunks = values.chunks_exact(4);
    let rest = chunks.remainder();
    for c in chunks {
        acc[0] += c[0] * S::zero();
        acc[1] += c[1] * S::zero();
        acc[2] += c[2] * S::zero();
        acc[3] += c[3] * S::zero();
    }
    let mut tail = S::zero();
    for &v in rest {
        tail += v * S::zero();
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3]) + tail).is_finite()
}

pub(crate) fn stable_sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// Row-major strides for `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    strides
}

/// For every output position of `input.permute(axes)`, the source offset in `input`.
pub(crate) fn permutation_map(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mapped: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let total: usize = shape.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut counter = vec![0usize; out_shape.len()];
    let mut offset = 0usize;
    for _ in 0..total {
        map.push(offset);
        for d in (0..out_shape.len()).rev() {
            counter[d] += 1;
            offset += mapped[d];
            if counter[d] < out_shape[d] {
                break;
            }
            offset -= mapped[d] * out_shape[d];
            counter[d] = 0;
        }
    }
    map
}

/// Splits `shape` around `axis` into (outer, extent, inner) element counts.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permutation_map_transposes() {
        // 2x3 -> 3x2
        let map = permutation_map(&[2, 3], &[1, 0]);
        assert_eq!(map, vec![0, 3, 1, 4, 2, 5]);
    }

    #[test]
    fn matmul_kernels_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.0, -1.0, 2.0, 0.5, 1.0]; // 3x2
        let mut c = [0.0; 4];
        mm_nn(&a, &b, &mut c, 2, 3, 2);
        assert_eq!(c, [1.0 - 2.0 + 1.5, 4.0 + 3.0, 4.0 - 5.0 + 3.0, 10.0 + 6.0]);
        let bt = [1.0, -1.0, 0.5, 0.0, 2.0, 1.0]; // b transposed, 2x3
        let mut c2 = [0.0; 4];
        mm_nt(&a, &bt, &mut c2, 2, 3, 2);
        assert_eq!(c, c2);
    }
}
