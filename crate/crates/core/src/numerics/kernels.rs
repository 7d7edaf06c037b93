//! Raw numeric kernels on flat slices.
//!
//! Every matrix kernel *accumulates* into its output (`c += op(a, b)`), which
//! lets forward passes and gradient accumulation share one code path. Each
//! kernel has a sequential and (with the `parallel` feature) a rayon variant
//! that partitions disjoint output rows; the inner reduction order is
//! identical in both, so results are bit-equal regardless of thread count.
//! Dispatch picks the parallel path for large products only.

use crate::parallel;

/// Work threshold (multiply-adds) below which threading is not worth it.
const PAR_THRESHOLD: usize = 1 << 15;

// ── matrix products ─────────────────────────────────────────────────────

/// C[m,n] += A[m,k] · B[k,n]
pub fn mm_nn(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(c.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    if cfg!(feature = "parallel") && m * k * n >= PAR_THRESHOLD {
        mm_nn_par(c, a, b, m, k, n);
    } else {
        mm_nn_seq(c, a, b, m, k, n);
    }
}

/// C[m,n] += A[m,k] · B[n,k]ᵀ
pub fn mm_nt(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(c.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    if cfg!(feature = "parallel") && m * k * n >= PAR_THRESHOLD {
        mm_nt_par(c, a, b, m, k, n);
    } else {
        mm_nt_seq(c, a, b, m, k, n);
    }
}

/// C[k,n] += A[m,k]ᵀ · B[m,n]
pub fn mm_tn(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(c.len(), k * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    if cfg!(feature = "parallel") && m * k * n >= PAR_THRESHOLD {
        mm_tn_par(c, a, b, m, k, n);
    } else {
        mm_tn_seq(c, a, b, m, k, n);
    }
}

pub fn mm_nn_seq(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        mm_row_nn(crow, arow, b, k, n);
    }
}

pub fn mm_nt_seq(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        mm_row_nt(crow, arow, b, k, n);
    }
}

pub fn mm_tn_seq(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let crow = &mut c[p * n..(p + 1) * n];
        mm_row_tn(crow, a, b, p, m, k, n);
    }
}

#[cfg(feature = "parallel")]
pub fn mm_nn_par(c: &mut [f64], a: &[f64], b: &[f64], _m: usize, k: usize, n: usize) {
    parallel::for_each_chunk_mut(c, n, |i, crow| {
        mm_row_nn(crow, &a[i * k..(i + 1) * k], b, k, n);
    });
}

#[cfg(feature = "parallel")]
pub fn mm_nt_par(c: &mut [f64], a: &[f64], b: &[f64], _m: usize, k: usize, n: usize) {
    parallel::for_each_chunk_mut(c, n, |i, crow| {
        mm_row_nt(crow, &a[i * k..(i + 1) * k], b, k, n);
    });
}

#[cfg(feature = "parallel")]
pub fn mm_tn_par(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    parallel::for_each_chunk_mut(c, n, |p, crow| {
        mm_row_tn(crow, a, b, p, m, k, n);
    });
}

#[cfg(not(feature = "parallel"))]
pub use mm_nn_seq as mm_nn_par;
#[cfg(not(feature = "parallel"))]
pub use mm_nt_seq as mm_nt_par;
#[cfg(not(feature = "parallel"))]
pub use mm_tn_seq as mm_tn_par;

#[inline]
fn mm_row_nn(crow: &mut [f64], arow: &[f64], b: &[f64], k: usize, n: usize) {
    for (p, &aip) in arow.iter().enumerate().take(k) {
        if aip == 0.0 {
            continue;
        }
        let brow = &b[p * n..(p + 1) * n];
        for j in 0..n {
            crow[j] += aip * brow[j];
        }
    }
}

#[inline]
fn mm_row_nt(crow: &mut [f64], arow: &[f64], b: &[f64], k: usize, n: usize) {
    for (j, cj) in crow.iter_mut().enumerate().take(n) {
        let brow = &b[j * k..(j + 1) * k];
        let mut s = 0.0;
        for p in 0..k {
            s += arow[p] * brow[p];
        }
        *cj += s;
    }
}

#[inline]
fn mm_row_tn(crow: &mut [f64], a: &[f64], b: &[f64], p: usize, m: usize, k: usize, n: usize) {
    for i in 0..m {
        let aip = a[i * k + p];
        if aip == 0.0 {
            continue;
        }
        let brow = &b[i * n..(i + 1) * n];
        for j in 0..n {
            crow[j] += aip * brow[j];
        }
    }
}

// ── row-wise softmax with mask and temperature ──────────────────────────

/// Masked, temperature-scaled softmax of one score row. Masked entries come
/// out exactly 0. The caller guarantees at least one unmasked column.
pub fn softmax_row(out: &mut [f64], scores: &[f64], mask: &[bool], tau: f64) {
    let mut max = f64::NEG_INFINITY;
    for (j, &s) in scores.iter().enumerate() {
        if mask[j] && s > max {
            max = s;
        }
    }
    let mut z = 0.0;
    for j in 0..scores.len() {
        if mask[j] {
            let e = ((scores[j] - max) / tau).exp();
            out[j] = e;
            z += e;
        } else {
            out[j] = 0.0;
        }
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

/// Backward of `softmax_row`: dx_i = y_i (dy_i − Σ_j dy_j y_j) / tau on
/// unmasked columns, 0 elsewhere. Accumulates into `dx`.
pub fn softmax_row_backward(dx: &mut [f64], y: &[f64], dy: &[f64], mask: &[bool], tau: f64) {
    let mut dot = 0.0;
    for j in 0..y.len() {
        if mask[j] {
            dot += dy[j] * y[j];
        }
    }
    for j in 0..y.len() {
        if mask[j] {
            dx[j] += y[j] * (dy[j] - dot) / tau;
        }
    }
}

// ── layer norm rows ─────────────────────────────────────────────────────

/// y = (x − μ) / √(σ² + eps) · gain + bias over the last dimension.
pub fn layer_norm_row(out: &mut [f64], x: &[f64], gain: &[f64], bias: &[f64], eps: f64) {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let rstd = 1.0 / (var + eps).sqrt();
    for j in 0..x.len() {
        out[j] = (x[j] - mean) * rstd * gain[j] + bias[j];
    }
}

/// Backward of `layer_norm_row`. Accumulates into `dx`, `dgain`, `dbias`.
pub fn layer_norm_row_backward(
    dx: &mut [f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
    x: &[f64],
    gain: &[f64],
    dy: &[f64],
    eps: f64,
) {
    let n = x.len();
    let d = n as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let rstd = 1.0 / (var + eps).sqrt();

    let mut sum_dxhat = 0.0;
    let mut sum_dxhat_xhat = 0.0;
    for j in 0..n {
        let xhat = (x[j] - mean) * rstd;
        let dxhat = dy[j] * gain[j];
        dgain[j] += dy[j] * xhat;
        dbias[j] += dy[j];
        sum_dxhat += dxhat;
        sum_dxhat_xhat += dxhat * xhat;
    }
    for j in 0..n {
        let xhat = (x[j] - mean) * rstd;
        let dxhat = dy[j] * gain[j];
        dx[j] += rstd * (dxhat - sum_dxhat / d - xhat * sum_dxhat_xhat / d);
    }
}

// ── scalar nonlinearities ───────────────────────────────────────────────

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^z) without overflow at large |z|.
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::Rng;

    fn naive_mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn mm_variants_agree_with_naive_triple_loop() {
        let mut rng = Rng::new(1);
        let (m, k, n) = (5, 7, 4);
        let a: Vec<f64> = (0..m * k).map(|_| rng.normal()).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.normal()).collect();
        let want = naive_mm(&a, &b, m, k, n);

        let mut c = vec![0.0; m * n];
        mm_nn(&mut c, &a, &b, m, k, n);
        assert!(c.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12));

        // A·Bᵀ with B stored transposed, i.e. bt[j,p] = b[p,j]
        let mut bt = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut c = vec![0.0; m * n];
        mm_nt(&mut c, &a, &bt, m, k, n);
        assert!(c.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12));

        // Aᵀ·B with A stored transposed, i.e. at[i,p] = a_t[p,i]
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut c = vec![0.0; m * n];
        mm_tn(&mut c, &at, &b, k, m, n);
        assert!(c.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn sequential_and_parallel_products_are_bit_identical() {
        let mut rng = Rng::new(2);
        let (m, k, n) = (33, 65, 17);
        let a: Vec<f64> = (0..m * k).map(|_| rng.normal()).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.normal()).collect();
        let mut c_seq = vec![0.0; m * n];
        let mut c_par = vec![0.0; m * n];
        mm_nn_seq(&mut c_seq, &a, &b, m, k, n);
        mm_nn_par(&mut c_par, &a, &b, m, k, n);
        assert!(c_seq
            .iter()
            .zip(&c_par)
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn softplus_matches_naive_at_moderate_z_and_survives_extremes() {
        for z in [-20.0, -3.0, -0.5, 0.0, 0.5, 3.0, 20.0] {
            let naive = (1.0 + f64::exp(z)).ln();
            assert!((softplus(z) - naive).abs() < 1e-12);
        }
        assert!(softplus(800.0).is_finite());
        assert!(softplus(-800.0) >= 0.0);
    }

    #[test]
    fn gelu_grad_matches_finite_difference() {
        for x in [-3.0, -1.0, -0.1, 0.0, 0.2, 1.5, 4.0] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!(
                (gelu_grad(x) - fd).abs() < 1e-8,
                "x={x}: {} vs {fd}",
                gelu_grad(x)
            );
        }
    }
}
