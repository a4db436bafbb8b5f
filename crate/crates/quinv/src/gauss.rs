//! N-beam Gaussian states: normal-ordering parameters, symmetric-ordering
//! covariance matrices, symplectic invariants (QUIs) via principal minors,
//! symplectic eigenvalues and partial transposition.
//!
//! Conventions fixed here and used everywhere else:
//! * quadrature ordering `(x₁,p₁,…,x_N,p_N)` with `Ω = ⊕ [[0,1],[−1,0]]`;
//! * vacuum variance 1, so physicality reads `ν_j ≥ 1`;
//! * pair parameters are stored once per unordered pair with the symmetry
//!   `D_kj = D_jk` and `D̄_kj = D̄*_jk`.

use std::collections::BTreeMap;

use itertools::Itertools;
use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Default physicality tolerance for analytically constructed states.
pub const PHYS_TOL_ANALYTIC: f64 = 1e-9;
/// Physicality tolerance for states inferred from reconstructed data.
pub const PHYS_TOL_RECONSTRUCTED: f64 = 1e-6;

/// Normal-ordering parameters `B_j`, `C_j`, `D_jk`, `D̄_jk` of an N-beam
/// zero-mean Gaussian field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ParamsWire", into = "ParamsWire")]
pub struct GaussianStateParams {
    n_beams: usize,
    b: Vec<f64>,
    c: Vec<Complex64>,
    /// Upper-triangle pair parameters in the order (1,2), (1,3), (2,3).
    d: Vec<Complex64>,
    d_bar: Vec<Complex64>,
}

fn pair_slot(n: usize, j: usize, k: usize) -> usize {
    debug_assert!(j < k && k < n);
    // Row-major upper triangle without the diagonal.
    j * n - j * (j + 1) / 2 + (k - j - 1)
}

impl GaussianStateParams {
    /// All-zero (vacuum) parameter set.
    pub fn vacuum(n_beams: usize) -> Result<Self> {
        if n_beams < 1 {
            return Err(Error::validation("n_beams must be ≥ 1"));
        }
        let n_pairs = n_beams * (n_beams - 1) / 2;
        Ok(Self {
            n_beams,
            b: vec![0.0; n_beams],
            c: vec![Complex64::new(0.0, 0.0); n_beams],
            d: vec![Complex64::new(0.0, 0.0); n_pairs],
            d_bar: vec![Complex64::new(0.0, 0.0); n_pairs],
        })
    }

    pub fn n_beams(&self) -> usize {
        self.n_beams
    }

    pub fn b(&self, j: usize) -> f64 {
        self.b[j]
    }

    pub fn c(&self, j: usize) -> Complex64 {
        self.c[j]
    }

    /// `D_jk` with automatic index symmetry (`D_kj = D_jk`), 0-based.
    pub fn d(&self, j: usize, k: usize) -> Complex64 {
        let (lo, hi) = if j < k { (j, k) } else { (k, j) };
        self.d[pair_slot(self.n_beams, lo, hi)]
    }

    /// `D̄_jk` with automatic index symmetry (`D̄_kj = D̄*_jk`), 0-based.
    pub fn d_bar(&self, j: usize, k: usize) -> Complex64 {
        if j < k {
            self.d_bar[pair_slot(self.n_beams, j, k)]
        } else {
            self.d_bar[pair_slot(self.n_beams, k, j)].conj()
        }
    }

    pub fn set_b(&mut self, j: usize, v: f64) {
        self.b[j] = v;
    }

    pub fn set_c(&mut self, j: usize, v: Complex64) {
        self.c[j] = v;
    }

    /// Sets `D_jk`; indices may come in either order.
    pub fn set_d(&mut self, j: usize, k: usize, v: Complex64) {
        let (lo, hi) = if j < k { (j, k) } else { (k, j) };
        self.d[pair_slot(self.n_beams, lo, hi)] = v;
    }

    /// Sets `D̄_jk` as given for `j < k` (conjugated if passed reversed).
    pub fn set_d_bar(&mut self, j: usize, k: usize, v: Complex64) {
        if j < k {
            self.d_bar[pair_slot(self.n_beams, j, k)] = v;
        } else {
            self.d_bar[pair_slot(self.n_beams, k, j)] = v.conj();
        }
    }

    /// Basic well-formedness: non-negative `B_j`.
    pub fn validate(&self) -> Result<()> {
        if self.n_beams < 1 {
            return Err(Error::validation("n_beams must be ≥ 1"));
        }
        for (j, &b) in self.b.iter().enumerate() {
            if !(b >= 0.0) {
                return Err(Error::validation(format!("B_{} = {b} must be ≥ 0", j + 1)));
            }
        }
        Ok(())
    }

    /// Relabels beams: beam `i` of the result carries the parameters of beam
    /// `perm[i]` of `self`.  Used by the generic `addt` symmetrizers.
    pub fn apply_permutation(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.n_beams);
        let mut out = Self::vacuum(self.n_beams).expect("valid n_beams");
        for i in 0..self.n_beams {
            out.b[i] = self.b[perm[i]];
            out.c[i] = self.c[perm[i]];
        }
        for i in 0..self.n_beams {
            for j in (i + 1)..self.n_beams {
                out.set_d(i, j, self.d(perm[i], perm[j]));
                // d_bar is order-sensitive: D̄ for the ordered pair
                // (perm[i], perm[j]) is what beam pair (i, j) inherits.
                let v = self.d_bar(perm[i], perm[j]);
                out.d_bar[pair_slot(self.n_beams, i, j)] = v;
            }
        }
        out
    }
}

/// JSON wire format with 1-based pair keys `"12"`, `"13"`, `"23"`.
#[derive(Serialize, Deserialize)]
struct ParamsWire {
    n_beams: usize,
    #[serde(rename = "B")]
    b: Vec<f64>,
    #[serde(rename = "C")]
    c: Vec<[f64; 2]>,
    #[serde(rename = "D")]
    d: BTreeMap<String, [f64; 2]>,
    #[serde(rename = "Dbar")]
    d_bar: BTreeMap<String, [f64; 2]>,
}

impl From<GaussianStateParams> for ParamsWire {
    fn from(p: GaussianStateParams) -> Self {
        let mut d = BTreeMap::new();
        let mut d_bar = BTreeMap::new();
        for j in 0..p.n_beams {
            for k in (j + 1)..p.n_beams {
                let key = format!("{}{}", j + 1, k + 1);
                let v = p.d(j, k);
                d.insert(key.clone(), [v.re, v.im]);
                let v = p.d_bar(j, k);
                d_bar.insert(key, [v.re, v.im]);
            }
        }
        ParamsWire {
            n_beams: p.n_beams,
            b: p.b.clone(),
            c: p.c.iter().map(|z| [z.re, z.im]).collect(),
            d,
            d_bar,
        }
    }
}

impl TryFrom<ParamsWire> for GaussianStateParams {
    type Error = Error;

    fn try_from(w: ParamsWire) -> Result<Self> {
        let mut p = GaussianStateParams::vacuum(w.n_beams)?;
        if w.b.len() != w.n_beams || w.c.len() != w.n_beams {
            return Err(Error::Format(format!(
                "B/C arrays must have length n_beams = {}",
                w.n_beams
            )));
        }
        for j in 0..w.n_beams {
            p.set_b(j, w.b[j]);
            p.set_c(j, Complex64::new(w.c[j][0], w.c[j][1]));
        }
        let parse_key = |key: &str| -> Result<(usize, usize)> {
            let digits: Vec<usize> = key
                .chars()
                .map(|ch| {
                    ch.to_digit(10)
                        .map(|d| d as usize)
                        .ok_or_else(|| Error::Format(format!("bad pair key {key:?}")))
                })
                .collect::<Result<_>>()?;
            if digits.len() != 2
                || digits[0] < 1
                || digits[1] <= digits[0]
                || digits[1] > w.n_beams
            {
                return Err(Error::Format(format!("bad pair key {key:?}")));
            }
            Ok((digits[0] - 1, digits[1] - 1))
        };
        for (key, v) in &w.d {
            let (j, k) = parse_key(key)?;
            p.set_d(j, k, Complex64::new(v[0], v[1]));
        }
        for (key, v) in &w.d_bar {
            let (j, k) = parse_key(key)?;
            p.set_d_bar(j, k, Complex64::new(v[0], v[1]));
        }
        p.validate()?;
        Ok(p)
    }
}

/// Symmetric-ordering covariance matrix `A_S` in the `(x₁,p₁,…)` ordering.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceMatrix {
    n_beams: usize,
    m: DMatrix<f64>,
}

impl CovarianceMatrix {
    pub fn n_beams(&self) -> usize {
        self.n_beams
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    /// Wraps an existing 2N×2N symmetric matrix.
    pub fn from_matrix(n_beams: usize, m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != 2 * n_beams || m.ncols() != 2 * n_beams {
            return Err(Error::validation(format!(
                "covariance matrix must be {0}×{0}",
                2 * n_beams
            )));
        }
        let asym = (&m - m.transpose()).abs().max();
        if asym > 1e-9 * m.abs().max().max(1.0) {
            return Err(Error::validation(format!(
                "covariance matrix not symmetric (max asymmetry {asym:.3e})"
            )));
        }
        Ok(Self { n_beams, m })
    }
}

/// Symplectic form `Ω = ⊕ [[0,1],[−1,0]]` for N beams.
pub fn symplectic_form(n_beams: usize) -> DMatrix<f64> {
    let mut w = DMatrix::zeros(2 * n_beams, 2 * n_beams);
    for j in 0..n_beams {
        w[(2 * j, 2 * j + 1)] = 1.0;
        w[(2 * j + 1, 2 * j)] = -1.0;
    }
    w
}

/// Builds the block covariance matrix from the normal-ordering parameters:
/// `σ_j = [[1+2B+2ReC, 2ImC], [2ImC, 1+2B−2ReC]]` and
/// `ε_jk = [[2Re(D−D̄), 2Im(D−D̄)], [2Im(D+D̄), −2Re(D+D̄)]]`.
pub fn build_covariance(params: &GaussianStateParams) -> Result<CovarianceMatrix> {
    params.validate()?;
    let n = params.n_beams();
    let mut m = DMatrix::zeros(2 * n, 2 * n);
    for j in 0..n {
        let b = params.b(j);
        let c = params.c(j);
        m[(2 * j, 2 * j)] = 1.0 + 2.0 * b + 2.0 * c.re;
        m[(2 * j + 1, 2 * j + 1)] = 1.0 + 2.0 * b - 2.0 * c.re;
        m[(2 * j, 2 * j + 1)] = 2.0 * c.im;
        m[(2 * j + 1, 2 * j)] = 2.0 * c.im;
    }
    for j in 0..n {
        for k in (j + 1)..n {
            let d = params.d(j, k);
            let db = params.d_bar(j, k);
            let e = [
                [2.0 * (d - db).re, 2.0 * (d - db).im],
                [2.0 * (d + db).im, -2.0 * (d + db).re],
            ];
            for (r, row) in e.iter().enumerate() {
                for (s, &v) in row.iter().enumerate() {
                    m[(2 * j + r, 2 * k + s)] = v;
                    m[(2 * k + s, 2 * j + r)] = v;
                }
            }
        }
    }
    Ok(CovarianceMatrix { n_beams: n, m })
}

/// Recovers the normal-ordering parameters from a covariance matrix
/// (exact inverse of [`build_covariance`]).
pub fn params_from_covariance(cm: &CovarianceMatrix) -> GaussianStateParams {
    let n = cm.n_beams;
    let m = &cm.m;
    let mut p = GaussianStateParams::vacuum(n).expect("n ≥ 1");
    for j in 0..n {
        let xx = m[(2 * j, 2 * j)];
        let pp = m[(2 * j + 1, 2 * j + 1)];
        let xp = m[(2 * j, 2 * j + 1)];
        p.set_b(j, (xx + pp - 2.0) / 4.0);
        p.set_c(j, Complex64::new((xx - pp) / 4.0, xp / 2.0));
    }
    for j in 0..n {
        for k in (j + 1)..n {
            let e00 = m[(2 * j, 2 * k)];
            let e01 = m[(2 * j, 2 * k + 1)];
            let e10 = m[(2 * j + 1, 2 * k)];
            let e11 = m[(2 * j + 1, 2 * k + 1)];
            p.set_d(
                j,
                k,
                Complex64::new((e00 - e11) / 4.0, (e01 + e10) / 4.0),
            );
            p.set_d_bar(
                j,
                k,
                Complex64::new(-(e00 + e11) / 4.0, (e10 - e01) / 4.0),
            );
        }
    }
    p
}

/// Sum of all `2k × 2k` principal minors of `Ω A_S` — the QUI `Δᴺ_k`.
pub fn qui_from_covariance(cm: &CovarianceMatrix, k: usize) -> Result<f64> {
    let n = cm.n_beams;
    if k < 1 || k > n {
        return Err(Error::validation(format!(
            "k = {k} out of range 1..={n}"
        )));
    }
    let wa = symplectic_form(n) * &cm.m;
    let mut total = 0.0;
    for subset in (0..2 * n).combinations(2 * k) {
        let sub = wa.select_rows(subset.iter()).select_columns(subset.iter());
        total += sub.determinant();
    }
    Ok(total)
}

/// All QUIs `Δᴺ_k`, k = 1…N.
#[derive(Debug, Clone, Serialize)]
pub struct InvariantSet {
    pub n_beams: usize,
    /// `delta[k-1] = Δᴺ_k`.
    pub delta: Vec<f64>,
}

impl InvariantSet {
    pub fn from_covariance(cm: &CovarianceMatrix) -> Result<Self> {
        let delta = (1..=cm.n_beams)
            .map(|k| qui_from_covariance(cm, k))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            n_beams: cm.n_beams,
            delta,
        })
    }
}

/// Symplectic eigenvalues `ν_j ≥ 0`, sorted descending.
#[derive(Debug, Clone, Serialize)]
pub struct SymplecticSpectrum {
    pub eigenvalues: Vec<f64>,
}

impl SymplecticSpectrum {
    pub fn min(&self) -> f64 {
        *self
            .eigenvalues
            .last()
            .expect("spectrum of at least one mode")
    }
}

/// Computes the symplectic spectrum `|eig(ΩA_S)|` (paired ±iν), and
/// cross-checks it against the roots of the characteristic polynomial
/// `x^N − Δ₁x^{N−1} + … + (−1)^N Δ_N` built from the principal minors.
///
/// The spectrum is extracted through the similarity
/// `ΩA = A^{−1/2} (A^{1/2} Ω A^{1/2}) A^{1/2}`: the inner matrix is
/// antisymmetric, so its singular values are the moduli of its (purely
/// imaginary, paired) eigenvalues.  This stays in symmetric/SVD territory,
/// where the factorizations are unconditionally convergent — a nonsymmetric
/// Schur iteration on ΩA itself can fail to terminate precisely in the
/// interesting case of exactly paired ±iν eigenvalues.  The route requires
/// `A_S ⪰ 0`, which every covariance matrix satisfies.
pub fn symplectic_eigenvalues(cm: &CovarianceMatrix) -> Result<SymplecticSpectrum> {
    let n = cm.n_beams;
    let eig = nalgebra::linalg::SymmetricEigen::new(cm.m.clone());
    let lambda_scale = eig.eigenvalues.iter().fold(1.0_f64, |m, &l| m.max(l.abs()));
    let mut sqrt_lambda = DMatrix::<f64>::zeros(2 * n, 2 * n);
    for (j, &l) in eig.eigenvalues.iter().enumerate() {
        if l < -1e-9 * lambda_scale {
            return Err(Error::numerical(format!(
                "covariance matrix has negative eigenvalue {l}; not a state's covariance"
            )));
        }
        sqrt_lambda[(j, j)] = l.max(0.0).sqrt();
    }
    let root = &eig.eigenvectors * sqrt_lambda * eig.eigenvectors.transpose();
    let inner = &root * symplectic_form(n) * &root;
    let svd = inner.svd(false, false);
    let mut mods: Vec<f64> = svd.singular_values.iter().copied().collect();
    let scale = mods.iter().cloned().fold(1.0_f64, f64::max);
    mods.sort_by(|a, b| b.partial_cmp(a).expect("finite eigenvalues"));
    let mut nu = Vec::with_capacity(n);
    for j in 0..n {
        let (a, b) = (mods[2 * j], mods[2 * j + 1]);
        if (a - b).abs() > 1e-6 * scale {
            return Err(Error::numerical(format!(
                "unpaired ΩA eigenvalue moduli {a} vs {b}"
            )));
        }
        nu.push(0.5 * (a + b));
    }

    // Independent route: the ν_j² must be the roots of the QUI polynomial
    // x^N − Δ₁x^{N−1} + Δ₂x^{N−2} − … + (−1)^N Δ_N built from the principal
    // minors.  Recovering clustered roots from the coefficients is
    // ill-conditioned (a p-fold root moves like ε^{1/p}), so the agreement
    // between the two routes is asserted in the well-conditioned direction:
    // backward error of each ν² as a polynomial root, plus the elementary
    // symmetric polynomial identity e_k(ν²) = Δ_k.
    let inv = InvariantSet::from_covariance(cm)?;
    for &v in &nu {
        let x = v * v;
        let mut p = 1.0; // value of the monic polynomial at x
        let mut mag = 1.0; // Σ |c_i| |x|^i, the backward-error scale
        for k in 1..=n {
            let c = if k % 2 == 0 { 1.0 } else { -1.0 } * inv.delta[k - 1];
            p = p * x + c;
            mag = mag * x.abs() + c.abs();
        }
        if p.abs() > 1e-9 * mag.max(1.0) {
            return Err(Error::numerical(format!(
                "ν = {v} is not a root of the invariant polynomial (residual {p:.3e})"
            )));
        }
    }
    for k in 1..=n {
        let ek: f64 = (0..n)
            .combinations(k)
            .map(|c| c.iter().map(|&j| nu[j] * nu[j]).product::<f64>())
            .sum();
        let scale_k = ek.abs().max(inv.delta[k - 1].abs()).max(1.0);
        if (ek - inv.delta[k - 1]).abs() > 1e-9 * scale_k {
            return Err(Error::numerical(format!(
                "e_{k}(ν²) = {ek} disagrees with Δ_{k} = {}",
                inv.delta[k - 1]
            )));
        }
    }
    Ok(SymplecticSpectrum { eigenvalues: nu })
}

/// True iff `A_S + iΩ ⪰ 0`, i.e. `A_S ≻ 0` and all symplectic eigenvalues
/// satisfy `ν_j ≥ 1 − tol`.
///
/// Both checks are needed: `|eig(ΩA_S)| ≥ 1` alone is also satisfied by
/// matrices with negative directions (where the uncertainty bound fails),
/// so the spectrum test by itself admits false positives.
pub fn is_physical(cm: &CovarianceMatrix, tol: f64) -> Result<bool> {
    let eig = nalgebra::linalg::SymmetricEigen::new(cm.m.clone());
    let min_eig = eig.eigenvalues.iter().cloned().fold(f64::MAX, f64::min);
    if min_eig <= tol {
        return Ok(false);
    }
    Ok(symplectic_eigenvalues(cm)?.min() >= 1.0 - tol)
}

/// Momentum sign flip of one beam (`p_beam → −p_beam`); an involution.
pub fn partial_transpose(cm: &CovarianceMatrix, beam: usize) -> Result<CovarianceMatrix> {
    if beam >= cm.n_beams {
        return Err(Error::validation(format!(
            "beam index {beam} out of range for {} beams",
            cm.n_beams
        )));
    }
    let mut m = cm.m.clone();
    let p = 2 * beam + 1;
    for i in 0..m.nrows() {
        m[(p, i)] = -m[(p, i)];
    }
    for i in 0..m.nrows() {
        m[(i, p)] = -m[(i, p)];
    }
    Ok(CovarianceMatrix {
        n_beams: cm.n_beams,
        m,
    })
}
