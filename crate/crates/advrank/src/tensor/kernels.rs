//! Scalar kernels behind the tape ops.
//!
//! All functions operate on flat row-major slices. Reductions accumulate in
//! f64 so results do not drift with operand count; matrix products keep f32
//! accumulators for speed (inner dimensions here stay small).

/// C[m,n] = A[m,k] @ B[k,n].
pub fn matmul_nn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

/// C[m,q] = X[m,p] @ Y[q,p]ᵀ  (row dot row).
pub fn matmul_nt(x: &[f32], y: &[f32], m: usize, p: usize, q: usize) -> Vec<f32> {
    debug_assert_eq!(x.len(), m * p);
    debug_assert_eq!(y.len(), q * p);
    let mut out = vec![0.0f32; m * q];
    for i in 0..m {
        let x_row = &x[i * p..(i + 1) * p];
        for r in 0..q {
            let y_row = &y[r * p..(r + 1) * p];
            let mut acc = 0.0f32;
            for (&xv, &yv) in x_row.iter().zip(y_row) {
                acc += xv * yv;
            }
            out[i * q + r] = acc;
        }
    }
    out
}

/// C[m,q] = X[p,m]ᵀ @ Y[p,q]  (column dot column).
pub fn matmul_tn(x: &[f32], y: &[f32], p: usize, m: usize, q: usize) -> Vec<f32> {
    debug_assert_eq!(x.len(), p * m);
    debug_assert_eq!(y.len(), p * q);
    let mut out = vec![0.0f32; m * q];
    for j in 0..p {
        let x_row = &x[j * m..(j + 1) * m];
        let y_row = &y[j * q..(j + 1) * q];
        for (i, &xv) in x_row.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let o_row = &mut out[i * q..(i + 1) * q];
            for (o, &yv) in o_row.iter_mut().zip(y_row) {
                *o += xv * yv;
            }
        }
    }
    out
}

pub fn sum_f64(xs: &[f32]) -> f64 {
    xs.iter().map(|&v| v as f64).sum()
}

pub fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

pub fn sq_norm_f64(xs: &[f32]) -> f64 {
    xs.iter().map(|&v| v as f64 * v as f64).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_nn_2x2() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        assert_eq!(matmul_nn(&a, &b, 2, 2, 2), vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_nt_matches_explicit_transpose() {
        // X[2,3] @ Y[2,3]ᵀ -> [2,2]
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let y = [1.0, 0.0, 1.0, 0.0, 2.0, 0.0];
        // rows: x0·y0 = 1+3 = 4, x0·y1 = 4, x1·y0 = 4+6 = 10, x1·y1 = 10
        assert_eq!(matmul_nt(&x, &y, 2, 3, 2), vec![4.0, 4.0, 10.0, 10.0]);
    }

    #[test]
    fn matmul_tn_matches_explicit_transpose() {
        // X[2,3]ᵀ @ Y[2,2] -> [3,2]
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let y = [1.0, 0.0, 0.0, 1.0];
        assert_eq!(
            matmul_tn(&x, &y, 2, 3, 2),
            vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]
        );
    }

    #[test]
    fn sum_accumulates_in_f64() {
        let xs = vec![1.0e-4f32; 1_000_000];
        let s = sum_f64(&xs);
        // A sequential f32 accumulator drifts by ~1 here; f64 stays tight.
        assert!((s - 100.0).abs() < 2e-3, "drift too large: {s}");
    }
}
