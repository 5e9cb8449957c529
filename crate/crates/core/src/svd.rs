//! Verified singular value decomposition.
//!
//! The dense bidiagonalization solver is fast, but on severely
//! rank-deficient inputs — precisely the shape of low-rank task updates —
//! it occasionally returns orthonormal, correctly-sorted factors whose
//! product drifts from the input by far more than roundoff. Every
//! factorization used for alignment is therefore checked by multiplying it
//! back out; when the product drifts, a cyclic one-sided Jacobi pass
//! recomputes it. Jacobi rotations act on the input's columns directly, so
//! its reconstruction is exact by construction and only orthogonality
//! depends on convergence.

use nalgebra::{DMatrix, DVector};

/// Relative Frobenius drift above which a factorization is rejected.
const VERIFY_TOL: f64 = 1e-10;

/// Pairs whose normalized column dot-product falls at or below this are
/// already orthogonal enough to skip.
const PAIR_TOL: f64 = 1e-14;

/// Cap on full Jacobi sweeps; cyclic sweeps converge long before this.
const MAX_SWEEPS: usize = 60;

/// Thin SVD `(U, S, Vᵀ)` with `S` descending, verified to reproduce `a`.
pub(crate) fn verified_svd(a: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
    let svd = a.clone().svd(true, true);
    let u = svd.u.expect("factors were requested");
    let vt = svd.v_t.expect("factors were requested");
    let s = svd.singular_values;
    if reconstruction_ok(a, &u, &s, &vt) {
        return (u, s, vt);
    }
    let (u, s, vt) = jacobi_svd(a);
    debug_assert!(reconstruction_ok(a, &u, &s, &vt));
    (u, s, vt)
}

fn reconstruction_ok(a: &DMatrix<f64>, u: &DMatrix<f64>, s: &DVector<f64>, vt: &DMatrix<f64>) -> bool {
    let norm = a.norm();
    if norm == 0.0 {
        return true;
    }
    let mut scaled = u.clone();
    for j in 0..s.len().min(scaled.ncols()) {
        for i in 0..scaled.nrows() {
            scaled[(i, j)] *= s[j];
        }
    }
    (scaled * vt - a).norm() <= VERIFY_TOL * norm
}

/// One-sided Jacobi SVD, any orientation. Returns the thin factorization
/// with `min(m, n)` singular values sorted descending (ties keep the lower
/// original index first, so the result is deterministic).
fn jacobi_svd(a: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
    let (m, n) = a.shape();
    if m >= n {
        return jacobi_svd_tall(a);
    }
    // A wide matrix factors through its transpose: A = (U'·S·V'ᵀ)ᵀ of Aᵀ
    // gives U = V', Vᵀ = U'ᵀ.
    let (ut, s, vtt) = jacobi_svd_tall(&a.transpose());
    (vtt.transpose(), s, ut.transpose())
}

fn jacobi_svd_tall(a: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
    let (m, n) = a.shape();
    let mut w = a.clone();
    let mut v = DMatrix::<f64>::identity(n, n);

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let mut alpha = 0.0;
                let mut beta = 0.0;
                let mut gamma = 0.0;
                for i in 0..m {
                    let wp = w[(i, p)];
                    let wq = w[(i, q)];
                    alpha += wp * wp;
                    beta += wq * wq;
                    gamma += wp * wq;
                }
                if gamma == 0.0 || gamma.abs() <= PAIR_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = if zeta.is_finite() {
                    zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt())
                } else {
                    // |ζ| overflowed: the rotation angle underflows to zero.
                    0.0
                };
                if t == 0.0 {
                    continue;
                }
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotated = true;
                for i in 0..m {
                    let wp = w[(i, p)];
                    let wq = w[(i, q)];
                    w[(i, p)] = c * wp - s * wq;
                    w[(i, q)] = s * wp + c * wq;
                }
                for i in 0..n {
                    let vp = v[(i, p)];
                    let vq = v[(i, q)];
                    v[(i, p)] = c * vp - s * vq;
                    v[(i, q)] = s * vp + c * vq;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    // Column norms are the singular values; sort them descending.
    let norms: Vec<f64> = (0..n).map(|j| w.column(j).norm()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| norms[y].partial_cmp(&norms[x]).unwrap().then(x.cmp(&y)));

    let mut u = DMatrix::<f64>::zeros(m, n);
    let mut vt = DMatrix::<f64>::zeros(n, n);
    let mut s_out = DVector::<f64>::zeros(n);
    for (slot, &j) in order.iter().enumerate() {
        let sigma = norms[j];
        s_out[slot] = sigma;
        if sigma > 0.0 {
            for i in 0..m {
                u[(i, slot)] = w[(i, j)] / sigma;
            }
        }
        for i in 0..n {
            vt[(slot, i)] = v[(i, j)];
        }
    }
    (u, s_out, vt)
}

// ── tests ──
