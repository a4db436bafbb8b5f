//! PPT-based separability analysis of symmetric 3-beam states.
//!
//! Two independent routes are provided.  The *moments route* evaluates the
//! necessary condition for separability
//!
//! ```text
//! Δ³₃ − Δ³₂,w + Δ³₁,w − 1 + 32(|D₁₂|² + |D̄₁₂|²)  ≥  (Δ³₂,r − Δ³₁,r)/3
//! ```
//!
//! entirely in intensity moments: the left side is fully measurable (the
//! `|D₁₂|²+|D̄₁₂|²` term equals the pair covariance `⟨W₁W₂⟩−⟨W₁⟩⟨W₂⟩`),
//! and the inequality follows from the Robertson–Schrödinger relation
//! `Δ̃³₃ − Δ̃³₂ + Δ̃³₁ − 1 ≥ 0` of the partially transposed state together
//! with the transposition identities for the invariants (see
//! [`tilde_relation_residuals`], which validates them numerically),
//! while the unmeasurable right side is bracketed through the residue bounds
//! of [`crate::formulas`].  Because only a bracket is known, the verdict is
//! three-way: a state is called entangled only when the inequality fails
//! against the *most favorable* admissible residues, and the separability
//! condition is called met only when it holds against the *least* favorable
//! ones; everything in between stays undecided.
//!
//! The *oracle route* transposes beam 1 of the covariance matrix directly and
//! tests the symplectic spectrum of the result — the standard PPT criterion,
//! available whenever the full Gaussian parameters are known (e.g. for model
//! states).  It is used to validate the moments route: an entangled-by-moments
//! verdict must always be confirmed by the spectral test.

use serde::Serialize;

use crate::error::Error;
use crate::formulas::{
    delta31_from_moments, delta32_from_moments, delta33_from_moments, residue31_from_params,
    residue32_from_params, residue_bounds_symmetric,
};
use crate::gauss::{
    build_covariance, partial_transpose, qui_from_covariance, symplectic_eigenvalues,
    CovarianceMatrix, GaussianStateParams,
};
use crate::model::{sweep_states, SweepConfig, TwbModelParams};
use crate::moments::IntensityMoments;
use crate::Result;

/// Classification tolerance separating the verdict bands; absorbs the
/// numerical error of the moment combinations.
pub const PPT_TOL_DEFAULT: f64 = 1e-9;

/// Spectral tolerance of the oracle route (`ν̃ < 1 − tol` ⇒ NPT).
const ORACLE_TOL: f64 = 1e-9;

/// Three-way outcome of the moments-route PPT test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Entangled,
    SeparableNecessaryConditionMet,
    Undecided,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Verdict::Entangled => "entangled",
            Verdict::SeparableNecessaryConditionMet => "separable_necessary_condition_met",
            Verdict::Undecided => "undecided",
        };
        f.write_str(s)
    }
}

/// Result of the moments-route PPT test: the measurable left side of the
/// separability inequality and the bracket on its right side.
#[derive(Debug, Clone, Serialize)]
pub struct PptVerdict {
    pub lhs: f64,
    pub rhs_lower: f64,
    pub rhs_upper: f64,
    pub verdict: Verdict,
}

/// Moments-route PPT test for a symmetric 3-beam state.
///
/// `strict` escalates the beam-exchange symmetry check on the input moments
/// from a warning to an error; `tol` is the classification tolerance.
pub fn ppt_from_moments(m: &IntensityMoments, strict: bool, tol: f64) -> Result<PptVerdict> {
    if m.n_beams != 3 {
        return Err(Error::validation(format!(
            "PPT moments route expects 3-beam moments, got {} beams",
            m.n_beams
        )));
    }
    let d33 = delta33_from_moments(m)?;
    let d31 = delta31_from_moments(m)?;
    let d32 = delta32_from_moments(m)?;
    // |D₁₂|²+|D̄₁₂|² equals the pair covariance; average the three pairs to
    // absorb residual asymmetry of measured inputs.
    let mut pair_cov = 0.0;
    for (j, k) in [(0usize, 1usize), (0, 2), (1, 2)] {
        let mut jk = [0u8; 3];
        jk[j] = 1;
        jk[k] = 1;
        let mut ej = [0u8; 3];
        ej[j] = 1;
        let mut ek = [0u8; 3];
        ek[k] = 1;
        pair_cov += (m.get(jk)? - m.get(ej)? * m.get(ek)?).max(0.0);
    }
    pair_cov /= 3.0;

    let lhs = d33 - d32.measurable_part + d31.measurable_part - 1.0 + 32.0 * pair_cov;
    // Right side (Δ³₂,r − Δ³₁,r)/3, bracketed by the residue bounds; the
    // Δ³₂,r bounds come with the symmetry audit attached.
    let (r2_lo, r2_up) = residue_bounds_symmetric(m, strict)?;
    let (r1_lo, r1_up) = (d31.residue_lower, d31.residue_upper);
    let rhs_upper = (r2_up - r1_lo) / 3.0;
    let rhs_lower = (r2_lo - r1_up) / 3.0;

    let verdict = if lhs < rhs_lower - tol {
        Verdict::Entangled
    } else if lhs >= rhs_upper + tol {
        Verdict::SeparableNecessaryConditionMet
    } else {
        Verdict::Undecided
    };
    Ok(PptVerdict {
        lhs,
        rhs_lower,
        rhs_upper,
        verdict,
    })
}

/// Spectral PPT oracle: symplectic spectrum of the beam-1 partially
/// transposed covariance matrix.
#[derive(Debug, Clone, Serialize)]
pub struct PptOracleReport {
    /// True iff the partially transposed matrix violates the uncertainty
    /// bound (`ν̃_min < 1`), i.e. the state is NPT-entangled.
    pub npt_entangled: bool,
    /// Smallest symplectic eigenvalue of the transposed matrix.
    pub min_symplectic_eigenvalue: f64,
    /// Invariants `Δ̃³_k` of the transposed matrix.
    pub tilde_delta: [f64; 3],
}

/// Direct PPT test of an arbitrary 3-beam covariance matrix.
pub fn ppt_oracle(cm: &CovarianceMatrix) -> Result<PptOracleReport> {
    if cm.n_beams() != 3 {
        return Err(Error::validation(format!(
            "PPT oracle expects a 3-beam covariance matrix, got {} beams",
            cm.n_beams()
        )));
    }
    let pt = partial_transpose(cm, 0)?;
    let spec = symplectic_eigenvalues(&pt)?;
    let tilde = [
        qui_from_covariance(&pt, 1)?,
        qui_from_covariance(&pt, 2)?,
        qui_from_covariance(&pt, 3)?,
    ];
    Ok(PptOracleReport {
        npt_entangled: spec.min() < 1.0 - ORACLE_TOL,
        min_symplectic_eigenvalue: spec.min(),
        tilde_delta: tilde,
    })
}

/// Residuals of the three identities relating the transposed-state
/// invariants of a *symmetric* state to the original ones:
///
/// ```text
/// Δ̃³₁ = Δ³₁ + (4/3)Δ³₁,r
/// Δ̃³₂ = Δ³₂ + (4/3)Δ³₂,r − 32(|D₁₂|² + |D̄₁₂|²)
/// Δ̃³₃ = Δ³₃
/// ```
///
/// Returns `Δ̃ᵏ(measured) − Δ̃ᵏ(predicted)`; all three vanish identically on
/// symmetric states.
pub fn tilde_relation_residuals(p: &GaussianStateParams) -> Result<[f64; 3]> {
    if p.n_beams() != 3 {
        return Err(Error::validation("tilde relations are stated for 3-beam states"));
    }
    let cm = build_covariance(p)?;
    let pt = partial_transpose(&cm, 0)?;
    let d = |cm: &CovarianceMatrix, k| qui_from_covariance(cm, k);
    let pair12 = p.d(0, 1).norm_sqr() + p.d_bar(0, 1).norm_sqr();
    let predicted = [
        d(&cm, 1)? + 4.0 / 3.0 * residue31_from_params(p),
        d(&cm, 2)? + 4.0 / 3.0 * residue32_from_params(p) - 32.0 * pair12,
        d(&cm, 3)?,
    ];
    Ok([
        d(&pt, 1)? - predicted[0],
        d(&pt, 2)? - predicted[1],
        d(&pt, 3)? - predicted[2],
    ])
}

/// One line of a noise-sweep entanglement report.
#[derive(Debug, Clone, Serialize)]
pub struct SweepReportPoint {
    pub w_n: u32,
    pub mean_noise: f64,
    pub delta11: f64,
    pub delta22: f64,
    pub delta33: f64,
    pub delta31_measurable: f64,
    pub delta31_residue_lower: f64,
    pub delta31_residue_upper: f64,
    pub delta32_measurable: f64,
    pub delta32_residue_lower: f64,
    pub delta32_residue_upper: f64,
    pub lhs: f64,
    pub rhs_lower: f64,
    pub rhs_upper: f64,
    pub verdict: Verdict,
    pub npt_oracle: bool,
}

/// Full entanglement analysis of the generative model along a noise sweep:
/// per point, the moments-route verdict on the fitted state's exact moments
/// and the spectral oracle on its covariance matrix.
pub fn noise_sweep_report(
    model: &TwbModelParams,
    cfg: &SweepConfig,
    m_modes: f64,
) -> Result<Vec<SweepReportPoint>> {
    let points = sweep_states(model, cfg, m_modes)?;
    let mut out = Vec::with_capacity(points.len());
    for pt in points {
        let m = &pt.moments;
        let d31 = delta31_from_moments(m)?;
        let d32 = delta32_from_moments(m)?;
        let ppt = ppt_from_moments(m, false, PPT_TOL_DEFAULT)?;
        let cm = build_covariance(&pt.params)?;
        let oracle = ppt_oracle(&cm)?;
        if ppt.verdict == Verdict::Entangled && !oracle.npt_entangled {
            return Err(Error::numerical(format!(
                "moments route claims entanglement at w_n = {} but the spectral oracle disagrees",
                pt.w_n
            )));
        }
        // The single-beam invariant of one beam, averaged over the three
        // (symmetric) beams: Δ¹₁ = 1 + 4⟨W⟩ + 12⟨W⟩² − 4⟨W²⟩, fully
        // measurable.
        let mut delta11 = 0.0;
        for j in 0..3 {
            let mut e1 = [0u8; 3];
            e1[j] = 1;
            let mut e2 = [0u8; 3];
            e2[j] = 2;
            let w = m.get(e1)?;
            let w2 = m.get(e2)?;
            delta11 += 1.0 + 4.0 * w + 12.0 * w * w - 4.0 * w2;
        }
        delta11 /= 3.0;
        out.push(SweepReportPoint {
            w_n: pt.w_n,
            mean_noise: pt.mean_noise,
            delta11,
            delta22: delta22_of(m)?,
            delta33: delta33_from_moments(m)?,
            delta31_measurable: d31.measurable_part,
            delta31_residue_lower: d31.residue_lower,
            delta31_residue_upper: d31.residue_upper,
            delta32_measurable: d32.measurable_part,
            delta32_residue_lower: d32.residue_lower,
            delta32_residue_upper: d32.residue_upper,
            lhs: ppt.lhs,
            rhs_lower: ppt.rhs_lower,
            rhs_upper: ppt.rhs_upper,
            verdict: ppt.verdict,
            npt_oracle: oracle.npt_entangled,
        });
    }
    Ok(out)
}

/// Pair invariant Δ²₂ of the (0,1) pair extracted from 3-beam moments.
fn delta22_of(m: &IntensityMoments) -> Result<f64> {
    let mut pair = IntensityMoments::new(2, 4, crate::moments::Provenance::Model);
    for l1 in 0..=2u8 {
        for l2 in 0..=2u8 {
            if l1 + l2 == 0 {
                continue;
            }
            if let Some(v) = m.try_get([l1, l2, 0]) {
                pair.set([l1, l2, 0], v);
            }
        }
    }
    crate::formulas::delta22_from_moments(&pair)
}

/// JSON lines report (one object per sweep point).
pub fn report_json(points: &[SweepReportPoint]) -> Result<String> {
    let mut out = String::new();
    for p in points {
        out.push_str(&serde_json::to_string(p).map_err(|e| Error::format(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

/// CSV mirror of the report for plotting.
pub fn report_csv(points: &[SweepReportPoint]) -> String {
    let mut out = String::from(
        "w_n,mean_noise,delta11,delta22,delta33,\
         delta31_measurable,delta31_residue_lower,delta31_residue_upper,\
         delta32_measurable,delta32_residue_lower,delta32_residue_upper,\
         lhs,rhs_lower,rhs_upper,verdict,npt_oracle\n",
    );
    for p in points {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            p.w_n,
            p.mean_noise,
            p.delta11,
            p.delta22,
            p.delta33,
            p.delta31_measurable,
            p.delta31_residue_lower,
            p.delta31_residue_upper,
            p.delta32_measurable,
            p.delta32_residue_lower,
            p.delta32_residue_upper,
            p.lhs,
            p.rhs_lower,
            p.rhs_upper,
            p.verdict,
            p.npt_oracle
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gauss::GaussianStateParams;
    use crate::model::gaussian_params_of_model;
    use crate::moments::moments_from_params;
    use crate::sample::random_symmetric_state;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn vacuum_is_not_entangled() {
        let p = GaussianStateParams::vacuum(3).unwrap();
        let cm = build_covariance(&p).unwrap();
        let oracle = ppt_oracle(&cm).unwrap();
        assert!(!oracle.npt_entangled);
        assert!((oracle.min_symplectic_eigenvalue - 1.0).abs() < 1e-9);
    }

    #[test]
    fn independent_thermals_meet_separability_condition() {
        let mut p = GaussianStateParams::vacuum(3).unwrap();
        for j in 0..3 {
            p.set_b(j, 0.5);
        }
        let m = moments_from_params(&p, 6).unwrap();
        let v = ppt_from_moments(&m, true, PPT_TOL_DEFAULT).unwrap();
        assert_eq!(v.verdict, Verdict::SeparableNecessaryConditionMet);
        let cm = build_covariance(&p).unwrap();
        assert!(!ppt_oracle(&cm).unwrap().npt_entangled);
    }

    #[test]
    fn pure_pairing_model_state_is_entangled() {
        let params = TwbModelParams {
            b_s: 0.0,
            b_i: 0.0,
            ..TwbModelParams::default()
        };
        let p = gaussian_params_of_model(&params, 2, 0, 1.0).unwrap();
        let cm = build_covariance(&p).unwrap();
        assert!(ppt_oracle(&cm).unwrap().npt_entangled);
    }

    #[test]
    fn tilde_relations_hold_on_random_symmetric_states() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..200 {
            let p = random_symmetric_state(&mut rng).unwrap();
            let r = tilde_relation_residuals(&p).unwrap();
            let scale = 1.0 + r.iter().map(|x| x.abs()).fold(0.0, f64::max);
            for (k, &x) in r.iter().enumerate() {
                assert!(
                    x.abs() < 1e-9 * scale.max(1e3),
                    "tilde relation {} residual {x:.3e}",
                    k + 1
                );
            }
        }
    }

    #[test]
    fn moments_route_is_sound_on_random_states() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for _ in 0..200 {
            let p = random_symmetric_state(&mut rng).unwrap();
            let m = moments_from_params(&p, 6).unwrap();
            let v = ppt_from_moments(&m, false, PPT_TOL_DEFAULT).unwrap();
            assert!(v.rhs_lower <= v.rhs_upper + 1e-12);
            if v.verdict == Verdict::Entangled {
                let cm = build_covariance(&p).unwrap();
                assert!(
                    ppt_oracle(&cm).unwrap().npt_entangled,
                    "moments route claimed entanglement on a PPT state"
                );
            }
        }
    }

    #[test]
    fn sweep_endpoints_classify_as_expected() {
        let cfg = SweepConfig {
            w_p: 2,
            w_n_list: vec![0, 58],
        };
        let report = noise_sweep_report(&TwbModelParams::default(), &cfg, 6.7).unwrap();
        assert_eq!(report[0].verdict, Verdict::Entangled);
        assert!(report[0].npt_oracle);
        assert_eq!(report[1].verdict, Verdict::SeparableNecessaryConditionMet);

        let json = report_json(&report).unwrap();
        assert!(json.contains("\"verdict\":\"entangled\""));
        let csv = report_csv(&report);
        assert_eq!(csv.lines().count(), 3);
    }
}
