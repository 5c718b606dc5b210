//! Shared oracles for integration tests: independent reimplementations of
//! the quantities under test, computed directly from raw atom lists by
//! brute force so that agreement with the library is a genuine cross-check
//! rather than the same code called twice.

// each test binary compiles this module separately and uses its own subset
#![allow(dead_code)]

/// ln Σ pᵢ·e^{−rᵢ/α} computed from scratch (log-sum-exp over atom terms).
pub fn ln_w0_atoms(atoms: &[(f64, f64)], alpha: f64) -> f64 {
    let mut m = f64::NEG_INFINITY;
    for &(r, p) in atoms {
        let t = p.ln() - r / alpha;
        if t > m {
            m = t;
        }
    }
    if m == f64::NEG_INFINITY {
        return m;
    }
    let mut acc = 0.0;
    for &(r, p) in atoms {
        acc += (p.ln() - r / alpha - m).exp();
    }
    m + acc.ln()
}

/// Dense-grid maximization of the KL dual φ(α) = −α·ln W0(α) − αδ over
/// α ∈ [1e-8, 1/δ]. Returns (argmax, max).
pub fn grid_max_phi_kl(atoms: &[(f64, f64)], delta: f64, points: usize) -> (f64, f64) {
    let lo = 1e-8;
    let hi = 1.0 / delta;
    let step = (hi - lo) / (points - 1) as f64;
    let mut best = (lo, f64::NEG_INFINITY);
    for i in 0..points {
        let alpha = if i + 1 == points { hi } else { lo + step * i as f64 };
        let phi = -alpha * ln_w0_atoms(atoms, alpha) - alpha * delta;
        if phi > best.1 {
            best = (alpha, phi);
        }
    }
    best
}

/// KL divergence Σ qᵢ·ln(qᵢ/pᵢ) between two distributions on the same
/// support (atom order must match).
pub fn kl_between(q: &[(f64, f64)], p: &[(f64, f64)]) -> f64 {
    q.iter().zip(p).map(|(&(_, qi), &(_, pi))| qi * (qi / pi).ln()).sum()
}
