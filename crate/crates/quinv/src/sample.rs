//! Random physical Gaussian states for property tests and sweeps.
//!
//! Physicality is guaranteed by the Williamson construction: a covariance
//! matrix `A_S = S (⊕ ν_j I₂) Sᵀ` with symplectic `S` and `ν_j ≥ 1` always
//! describes a quantum state.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;

use crate::gauss::{
    build_covariance, is_physical, params_from_covariance, CovarianceMatrix,
    GaussianStateParams, PHYS_TOL_ANALYTIC,
};
use crate::Result;

/// Random passive symplectic (orthogonal ∩ symplectic) matrix in the
/// interleaved (x₁,p₁,…) ordering, built from a Haar-ish random unitary.
fn random_passive(n: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    // Gram-Schmidt on a complex Gaussian matrix.
    let mut cols: Vec<Vec<Complex64>> = Vec::with_capacity(n);
    while cols.len() < n {
        let mut v: Vec<Complex64> = (0..n)
            .map(|_| {
                Complex64::new(
                    rng.sample::<f64, _>(rand::distributions::Standard) - 0.5,
                    rng.sample::<f64, _>(rand::distributions::Standard) - 0.5,
                )
            })
            .collect();
        for c in &cols {
            let overlap: Complex64 = c.iter().zip(&v).map(|(a, b)| a.conj() * b).sum();
            for i in 0..n {
                v[i] -= overlap * c[i];
            }
        }
        let norm: f64 = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue;
        }
        for z in &mut v {
            *z /= norm;
        }
        cols.push(v);
    }
    // Embed U as the real symplectic [[Re U, −Im U],[Im U, Re U]] and
    // permute from the (x…x,p…p) block ordering to interleaved.
    let mut s = DMatrix::<f64>::zeros(2 * n, 2 * n);
    for i in 0..n {
        for j in 0..n {
            let u = cols[j][i];
            s[(2 * i, 2 * j)] = u.re;
            s[(2 * i, 2 * j + 1)] = -u.im;
            s[(2 * i + 1, 2 * j)] = u.im;
            s[(2 * i + 1, 2 * j + 1)] = u.re;
        }
    }
    s
}

/// Random physical `n_beams`-mode state: Williamson form with symplectic
/// eigenvalues in `[1,3]` and per-mode squeezing `r ∈ [0,0.5]` sandwiched
/// between two random passive transformations.
pub fn random_physical_state(n_beams: usize, rng: &mut impl Rng) -> Result<GaussianStateParams> {
    let n = n_beams;
    let k1 = random_passive(n, rng);
    let k2 = random_passive(n, rng);
    let mut z = DMatrix::<f64>::zeros(2 * n, 2 * n);
    for j in 0..n {
        let r: f64 = rng.gen_range(0.0..0.5);
        z[(2 * j, 2 * j)] = r.exp();
        z[(2 * j + 1, 2 * j + 1)] = (-r).exp();
    }
    let s = &k1 * &z * &k2;
    let mut nu = DMatrix::<f64>::zeros(2 * n, 2 * n);
    for j in 0..n {
        let v: f64 = rng.gen_range(1.0..3.0);
        nu[(2 * j, 2 * j)] = v;
        nu[(2 * j + 1, 2 * j + 1)] = v;
    }
    let a = &s * &nu * s.transpose();
    let cm = CovarianceMatrix::from_matrix(n, a)?;
    Ok(params_from_covariance(&cm))
}

/// Random physical 3-beam state symmetric under beam exchange: all `B`, `C`,
/// `D` equal; `D̄` equal and real (exchange maps `D̄_jk → D̄*_jk`, so beam
/// symmetry forces a real `D̄`). Rejection-sampled against physicality.
pub fn random_symmetric_state(rng: &mut impl Rng) -> Result<GaussianStateParams> {
    loop {
        let b: f64 = rng.gen_range(0.0..1.2);
        let c = Complex64::from_polar(rng.gen_range(0.0..0.8), rng.gen_range(0.0..std::f64::consts::TAU));
        let d = Complex64::from_polar(rng.gen_range(0.0..0.8), rng.gen_range(0.0..std::f64::consts::TAU));
        let dbar = Complex64::new(rng.gen_range(-0.8..0.8), 0.0);
        let mut p = GaussianStateParams::vacuum(3)?;
        for j in 0..3 {
            p.set_b(j, b);
            p.set_c(j, c);
        }
        for j in 0..3 {
            for k in (j + 1)..3 {
                p.set_d(j, k, d);
                p.set_d_bar(j, k, dbar);
            }
        }
        // A spectrum-extraction failure can only happen on a malformed
        // (grossly unphysical) candidate, so it also counts as a rejection.
        let Ok(cm) = build_covariance(&p) else { continue };
        if let Ok(true) = is_physical(&cm, PHYS_TOL_ANALYTIC) {
            return Ok(p);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gauss::{symplectic_eigenvalues, symplectic_form};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn passive_is_symplectic_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for n in 1..=3 {
            let s = random_passive(n, &mut rng);
            let omega = symplectic_form(n);
            let id = DMatrix::<f64>::identity(2 * n, 2 * n);
            assert!((&s * &omega * s.transpose() - &omega).norm() < 1e-12);
            assert!((&s * s.transpose() - id).norm() < 1e-12);
        }
    }

    #[test]
    fn sampled_states_are_physical() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in 1..=3 {
            for _ in 0..50 {
                let p = random_physical_state(n, &mut rng).unwrap();
                let cm = build_covariance(&p).unwrap();
                assert!(is_physical(&cm, PHYS_TOL_ANALYTIC).unwrap());
                let spec = symplectic_eigenvalues(&cm).unwrap();
                assert!(spec.min() >= 1.0 - 1e-9);
            }
        }
    }

    #[test]
    fn symmetric_states_are_symmetric_and_physical() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let p = random_symmetric_state(&mut rng).unwrap();
            let q = p.apply_permutation(&[1, 2, 0]);
            for j in 0..3 {
                assert!((p.b(j) - q.b(j)).abs() < 1e-15);
                assert!((p.c(j) - q.c(j)).norm() < 1e-15);
            }
            for j in 0..3 {
                for k in (j + 1)..3 {
                    assert!((p.d(j, k) - q.d(j, k)).norm() < 1e-15);
                    assert!((p.d_bar(j, k) - q.d_bar(j, k)).norm() < 1e-15);
                }
            }
            let cm = build_covariance(&p).unwrap();
            assert!(is_physical(&cm, PHYS_TOL_ANALYTIC).unwrap());
        }
    }
}
