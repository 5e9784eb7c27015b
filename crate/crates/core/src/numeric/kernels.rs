//! Dense f32 kernels behind the graph ops.
//!
//! Every kernel visits its operands in a fixed order, so outputs are a pure
//! function of inputs (no data-dependent reduction order). Row `i` of a product
//! depends on row `i` of the left operand only; this is what keeps causal
//! logits bitwise stable when future tokens change.

const LANES: usize = 8;

/// Dot product with eight independent accumulators.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0f32;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out = a[m×k] · b[k×n]` (overwrites `out`).
pub fn matmul(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for (arow, orow) in a.chunks_exact(k).zip(out.chunks_exact_mut(n)) {
        orow.fill(0.0);
        for (&av, brow) in arow.iter().zip(b.chunks_exact(n)) {
            axpy(av, brow, orow);
        }
    }
}

/// `da[m×k] += dc[m×n] · b[k×n]ᵀ`
pub fn matmul_grad_lhs(dc: &[f32], b: &[f32], da: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(dc.len(), m * n);
    debug_assert_eq!(da.len(), m * k);
    for (dcrow, darow) in dc.chunks_exact(n).zip(da.chunks_exact_mut(k)) {
        for (d, brow) in darow.iter_mut().zip(b.chunks_exact(n)) {
            *d += dot(dcrow, brow);
        }
    }
}

/// `db[k×n] += a[m×k]ᵀ · dc[m×n]`
pub fn matmul_grad_rhs(a: &[f32], dc: &[f32], db: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(db.len(), k * n);
    for (arow, dcrow) in a.chunks_exact(k).zip(dc.chunks_exact(n)) {
        for (&av, dbrow) in arow.iter().zip(db.chunks_exact_mut(n)) {
            axpy(av, dcrow, dbrow);
        }
    }
}

/// Numerically stable softmax of one row, in place.
#[inline]
pub fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_A: f32 = 0.044_715;

/// tanh-approximated GELU.
#[inline]
pub fn gelu(x: f32) -> f32 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

#[inline]
pub fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_matches_naive() {
        for n in [0usize, 1, 7, 8, 9, 31, 64, 100] {
            let a: Vec<f32> = (0..n).map(|i| (i as f32 * 0.37).sin()).collect();
            let b: Vec<f32> = (0..n).map(|i| (i as f32 * 0.11).cos()).collect();
            let naive: f64 = a.iter().zip(&b).map(|(&x, &y)| x as f64 * y as f64).sum();
            assert!((dot(&a, &b) as f64 - naive).abs() < 1e-4);
        }
    }

    #[test]
    fn matmul_grads_match_transposed_products() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f32> = (0..m * k).map(|i| i as f32 * 0.5 - 2.0).collect();
        let b: Vec<f32> = (0..k * n).map(|i| 1.0 - i as f32 * 0.25).collect();
        let dc: Vec<f32> = (0..m * n).map(|i| (i % 3) as f32 - 1.0).collect();
        let mut da = vec![0.0; m * k];
        matmul_grad_lhs(&dc, &b, &mut da, m, k, n);
        let mut db = vec![0.0; k * n];
        matmul_grad_rhs(&a, &dc, &mut db, m, k, n);
        for i in 0..m {
            for kk in 0..k {
                let want: f32 = (0..n).map(|j| dc[i * n + j] * b[kk * n + j]).sum();
                assert!((da[i * k + kk] - want).abs() < 1e-5);
            }
        }
        for kk in 0..k {
            for j in 0..n {
                let want: f32 = (0..m).map(|i| a[i * k + kk] * dc[i * n + j]).sum();
                assert!((db[kk * n + j] - want).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for x in [-3.0f32, -1.0, -0.1, 0.0, 0.4, 2.5] {
            let h = 1e-3f64;
            let xd = x as f64;
            let g = |v: f64| {
                let u = (2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v * v * v);
                0.5 * v * (1.0 + u.tanh())
            };
            let fd = (g(xd + h) - g(xd - h)) / (2.0 * h);
            assert!((gelu_grad(x) as f64 - fd).abs() < 1e-4, "x={x}");
        }
    }
}
