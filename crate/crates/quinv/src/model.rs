//! Generative model of noisy twin-beam states.
//!
//! The model composes symmetric 3-beam photon-number distributions from two
//! ingredients, both built on the multi-mode thermal Mandel-Rice
//! distribution:
//!
//! * a *correlated part*: weak twin beams (paired photons plus independent
//!   signal/idler noise, Eqs. (D1)-(D3)), symmetrized over the two detection
//!   roles (Eq. (D4)) and chained cyclically across the three beams
//!   (Eq. (D5));
//! * a *noise part*: the uncorrelated marginals of additional detection
//!   windows, convolved into each beam independently (Eqs. (D6)-(D7)).
//!
//! On top of the distribution builders the module provides a photocount-level
//! Monte-Carlo sampler for end-to-end pipeline tests and a fitting routine
//! that extracts effective per-mode Gaussian parameters from the model's own
//! intensity moments, which is how the theory curves of the noise sweeps are
//! produced.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detect::{DistributionKind, JointDistribution, PhotocountChannels};
use crate::error::Error;
use crate::gauss::{build_covariance, is_physical, GaussianStateParams, PHYS_TOL_ANALYTIC};
use crate::moments::{
    intensity_from_photon_moments, moments_from_distribution, reduce_to_single_mode,
    IntensityMoments,
};
use crate::Result;

/// Truncation target for the one-dimensional building blocks; kept well below
/// the 1e-12 tail budget of the composed 3-beam distributions.
const TAIL_1D: f64 = 1e-14;

/// Hard cap on any one-dimensional support; hitting it means the requested
/// parameters produce distributions too wide to compose reliably.
const MAX_SUPPORT: usize = 4096;

/// Parameters of the weak-twin-beam building block and of the two APDs that
/// detect it.
///
/// `m_a` is the number of equally populated modes and `b_a` the mean photon
/// (photon-pair for the paired component) number per mode, for the paired
/// (`p`), noise-signal (`s`) and noise-idler (`i`) components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwbModelParams {
    pub m_p: f64,
    pub m_s: f64,
    pub m_i: f64,
    pub b_p: f64,
    pub b_s: f64,
    pub b_i: f64,
    /// Signal-APD detection efficiency.
    pub eta_s: f64,
    /// Idler-APD detection efficiency.
    pub eta_i: f64,
    /// Signal-APD dark-count rate per detection window.
    pub d_s: f64,
    /// Idler-APD dark-count rate per detection window.
    pub d_i: f64,
}

impl Default for TwbModelParams {
    /// Calibrated reference parameter set of the source experiment
    /// (field parameters), with typical APD figures for the detectors.
    fn default() -> Self {
        TwbModelParams {
            m_p: 10.0,
            m_s: 10.0,
            m_i: 10.0,
            b_p: 9.8e-3,
            b_s: 3.6e-4,
            b_i: 3.9e-5,
            eta_s: 0.55,
            eta_i: 0.50,
            d_s: 2.0e-4,
            d_i: 2.0e-4,
        }
    }
}

impl TwbModelParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("m_p", self.m_p), ("m_s", self.m_s), ("m_i", self.m_i)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::validation(format!("mode count {name} = {v} must be > 0")));
            }
        }
        for (name, v) in [
            ("b_p", self.b_p),
            ("b_s", self.b_s),
            ("b_i", self.b_i),
            ("d_s", self.d_s),
            ("d_i", self.d_i),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::validation(format!("{name} = {v} must be ≥ 0")));
            }
        }
        for (name, v) in [("eta_s", self.eta_s), ("eta_i", self.eta_i)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::validation(format!("{name} = {v} must lie in [0,1]")));
            }
        }
        Ok(())
    }
}

/// Grid of a noise sweep: one correlated-window count `w_p` and a list of
/// (even) noise-window counts `w_n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub w_p: u32,
    pub w_n_list: Vec<u32>,
}

impl SweepConfig {
    /// The canonical sweep grid: `w_p = 2`, `w_n = 0, 2, …, 58`.
    pub fn canonical() -> Self {
        SweepConfig {
            w_p: 2,
            w_n_list: (0..=29).map(|k| 2 * k).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for &w_n in &self.w_n_list {
            if w_n % 2 != 0 {
                return Err(Error::validation(format!(
                    "noise window count w_n = {w_n} must be even"
                )));
            }
        }
        Ok(())
    }
}

/// Multi-mode thermal Mandel-Rice probability
/// `p(n; m, b) = Γ(n+m)/(n! Γ(m)) · bⁿ/(1+b)^{n+m}`.
pub fn mandel_rice(n: usize, m: f64, b: f64) -> f64 {
    if b == 0.0 {
        return if n == 0 { 1.0 } else { 0.0 };
    }
    // Ratio recurrence p(n+1)/p(n) = (n+m)/(n+1) · b/(1+b); exact at n=0 and
    // free of Γ-function overflow.
    let mut p = (1.0 + b).powf(-m);
    let r = b / (1.0 + b);
    for k in 0..n {
        p *= (k as f64 + m) / (k as f64 + 1.0) * r;
    }
    p
}

/// Mandel-Rice probabilities `p(0..len)` truncated adaptively so that the
/// remaining tail mass is below [`TAIL_1D`].
fn mandel_rice_support(m: f64, b: f64) -> Result<Vec<f64>> {
    if b == 0.0 {
        return Ok(vec![1.0]);
    }
    let mut p = (1.0 + b).powf(-m);
    let r = b / (1.0 + b);
    let mut out = vec![p];
    let mut cum = p;
    let mut n = 0usize;
    while 1.0 - cum > TAIL_1D {
        p *= (n as f64 + m) / (n as f64 + 1.0) * r;
        out.push(p);
        cum += p;
        n += 1;
        if out.len() >= MAX_SUPPORT {
            return Err(Error::numerical(format!(
                "Mandel-Rice support exceeded {MAX_SUPPORT} terms (m = {m}, b = {b})"
            )));
        }
    }
    Ok(out)
}

/// Discrete convolution of two probability vectors.
fn conv1(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, &x) in a.iter().enumerate() {
        if x == 0.0 {
            continue;
        }
        for (j, &y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

fn mean_of(p: &[f64]) -> f64 {
    p.iter().enumerate().map(|(n, &x)| n as f64 * x).sum()
}

/// Joint signal-idler photon-number distribution of a weak twin beam whose
/// mode counts are scaled by `w` (the number of contributing detection
/// windows): the paired component correlates the two beams, the noise
/// components add independently.
pub fn twb_joint(params: &TwbModelParams, w: f64) -> Result<JointDistribution> {
    params.validate()?;
    if !(w >= 0.0) || !w.is_finite() {
        return Err(Error::validation(format!("window scale w = {w} must be ≥ 0")));
    }
    if w == 0.0 {
        return Ok(JointDistribution::delta(
            2,
            [1, 1, 1],
            [0, 0, 0],
            DistributionKind::PhotonDistribution,
        ));
    }
    let ps = mandel_rice_support(w * params.m_s, params.b_s)?;
    let pi = mandel_rice_support(w * params.m_i, params.b_i)?;
    let pp = mandel_rice_support(w * params.m_p, params.b_p)?;
    let (ls, li, lp) = (ps.len(), pi.len(), pp.len());
    let shape = [ls + lp - 1, li + lp - 1, 1];
    let mut mass = vec![0.0; shape[0] * shape[1]];
    for (n, &wp) in pp.iter().enumerate() {
        if wp == 0.0 {
            continue;
        }
        for (a, &ws) in ps.iter().enumerate() {
            let row = (n + a) * shape[1];
            let v = wp * ws;
            for (b, &wi) in pi.iter().enumerate() {
                mass[row + n + b] += v * wi;
            }
        }
    }
    let d = JointDistribution::from_mass(2, shape, DistributionKind::PhotonDistribution, mass)?;
    let tail = d.top_bin_mass();
    if tail > 1e-9 {
        return Err(Error::numerical(format!(
            "twin-beam distribution tail mass {tail:.3e} exceeds 1e-9"
        )));
    }
    Ok(d)
}

/// Symmetrized twin-beam distribution: the convolution of `p` with its
/// index-swapped copy, `p_sym(n_s, n_i) = Σ p(n_s−l_s, n_i−l_i) p(l_i, l_s)`.
/// The result is exactly exchange-symmetric.
pub fn symmetrize(p: &JointDistribution) -> Result<JointDistribution> {
    if p.n_beams != 2 {
        return Err(Error::validation(format!(
            "symmetrize expects a 2-beam distribution, got {} beams",
            p.n_beams
        )));
    }
    let [a, b, _] = p.shape;
    let side = a + b - 1;
    let mut mass = vec![0.0; side * side];
    for ([ns, ni, _], x) in p.iter() {
        if x == 0.0 {
            continue;
        }
        // Add p(ns,ni)·p(li,ls) at (ns+ls, ni+li); the swapped copy has
        // support (ls,li) ∈ [0,b)×[0,a).
        for ([li, ls, _], y) in p.iter() {
            if y == 0.0 {
                continue;
            }
            mass[(ns + ls) * side + ni + li] += x * y;
        }
    }
    JointDistribution::from_mass(2, [side, side, 1], DistributionKind::PhotonDistribution, mass)
}

/// Per-beam noise photon-number distribution of `w_n` noise windows: the
/// convolution of the signal marginal with the idler marginal of the
/// `w_n/2`-window twin-beam distribution (the pairing partner of each noise
/// window lies outside the assembled beams, so only marginals enter).
pub fn noise_distribution(params: &TwbModelParams, w_n: u32) -> Result<Vec<f64>> {
    if w_n % 2 != 0 {
        return Err(Error::validation(format!(
            "noise window count w_n = {w_n} must be even"
        )));
    }
    if w_n == 0 {
        return Ok(vec![1.0]);
    }
    let p_si = twb_joint(params, f64::from(w_n) / 2.0)?;
    Ok(conv1(&p_si.marginal(0), &p_si.marginal(1)))
}

/// Mean photon number of the noise part of one beam, `⟨n_n⟩`; the abscissa of
/// the noise sweeps.
pub fn noise_mean(params: &TwbModelParams, w_n: u32) -> Result<f64> {
    Ok(mean_of(&noise_distribution(params, w_n)?))
}

/// Correlated 3-beam distribution: the cyclic chain
/// `p_corr(n₁,n₂,n₃) = Σ_l p_sym(n₁−l₁,l₂) p_sym(n₂−l₂,l₃) p_sym(n₃−l₃,l₁)`,
/// evaluated as a trace of matrix products (`O(n⁵)` instead of the naive
/// `O(n⁶)` sum).
fn correlated_distribution(psym: &JointDistribution) -> Vec<f64> {
    let side = psym.shape[0];
    let q = psym.data();
    let n_max = 2 * side - 1;
    // a_mats[n] is the side×side matrix A_n[l,l'] = p_sym(n−l, l').
    let a_mats: Vec<Vec<f64>> = (0..n_max)
        .map(|n| {
            let mut m = vec![0.0; side * side];
            for l in 0..side {
                if n >= l && n - l < side {
                    m[l * side..(l + 1) * side]
                        .copy_from_slice(&q[(n - l) * side..(n - l + 1) * side]);
                }
            }
            m
        })
        .collect();
    let mut corr = vec![0.0; n_max * n_max * n_max];
    let mut prod = vec![0.0; side * side];
    for n1 in 0..n_max {
        for n2 in 0..n_max {
            // prod = A_{n1} · A_{n2}
            prod.iter_mut().for_each(|x| *x = 0.0);
            for i in 0..side {
                for k in 0..side {
                    let aik = a_mats[n1][i * side + k];
                    if aik == 0.0 {
                        continue;
                    }
                    let row = &a_mats[n2][k * side..(k + 1) * side];
                    let out = &mut prod[i * side..(i + 1) * side];
                    for (o, &r) in out.iter_mut().zip(row) {
                        *o += aik * r;
                    }
                }
            }
            for n3 in 0..n_max {
                // tr(prod · A_{n3}) = Σ_{i,j} prod[i,j]·A_{n3}[j,i]
                let mut tr = 0.0;
                for i in 0..side {
                    for j in 0..side {
                        tr += prod[i * side + j] * a_mats[n3][j * side + i];
                    }
                }
                corr[(n1 * n_max + n2) * n_max + n3] = tr;
            }
        }
    }
    corr
}

/// Convolve a flattened 3-beam mass array with a one-dimensional kernel along
/// one axis, growing that axis by `kernel.len() − 1`.
fn convolve_axis(mass: &[f64], shape: [usize; 3], axis: usize, kernel: &[f64]) -> (Vec<f64>, [usize; 3]) {
    let mut out_shape = shape;
    out_shape[axis] += kernel.len() - 1;
    let mut out = vec![0.0; out_shape[0] * out_shape[1] * out_shape[2]];
    let flat_in = |n: [usize; 3]| (n[0] * shape[1] + n[1]) * shape[2] + n[2];
    let flat_out = |n: [usize; 3]| (n[0] * out_shape[1] + n[1]) * out_shape[2] + n[2];
    for n1 in 0..shape[0] {
        for n2 in 0..shape[1] {
            for n3 in 0..shape[2] {
                let x = mass[flat_in([n1, n2, n3])];
                if x == 0.0 {
                    continue;
                }
                for (k, &w) in kernel.iter().enumerate() {
                    let mut m = [n1, n2, n3];
                    m[axis] += k;
                    out[flat_out(m)] += x * w;
                }
            }
        }
    }
    (out, out_shape)
}

/// Photon-number distribution of the symmetric 3-beam state with `w_p`
/// correlated units and `w_n` noise windows per beam: the cyclic correlated
/// chain convolved per-beam with the noise distribution.
///
/// The result is verified to be cyclic-symmetric within 1e-12 (a violation is
/// reported as a numerical error); full exchange symmetry, which holds for
/// the symmetrized building blocks, is checked as well and logged if broken.
pub fn build_state_distribution(
    params: &TwbModelParams,
    w_p: u32,
    w_n: u32,
) -> Result<JointDistribution> {
    params.validate()?;
    if w_n % 2 != 0 {
        return Err(Error::validation(format!(
            "noise window count w_n = {w_n} must be even"
        )));
    }
    let (mut mass, mut shape) = if w_p == 0 {
        (vec![1.0], [1usize, 1, 1])
    } else {
        let psym = symmetrize(&twb_joint(params, f64::from(w_p))?)?;
        let side = 2 * psym.shape[0] - 1;
        (correlated_distribution(&psym), [side, side, side])
    };
    let noise = noise_distribution(params, w_n)?;
    if noise.len() > 1 {
        for axis in 0..3 {
            let (m, s) = convolve_axis(&mass, shape, axis, &noise);
            mass = m;
            shape = s;
        }
    }
    let d = JointDistribution::from_mass(3, shape, DistributionKind::PhotonDistribution, mass)?;
    let tail = d.top_bin_mass();
    if tail > 1e-9 {
        return Err(Error::numerical(format!(
            "3-beam model distribution tail mass {tail:.3e} exceeds 1e-9"
        )));
    }
    let mut cyclic_err: f64 = 0.0;
    let mut swap_err: f64 = 0.0;
    for ([n1, n2, n3], x) in d.iter() {
        cyclic_err = cyclic_err.max((x - d.get([n2, n3, n1])).abs());
        swap_err = swap_err.max((x - d.get([n2, n1, n3])).abs());
    }
    if cyclic_err > 1e-12 {
        return Err(Error::numerical(format!(
            "model distribution breaks cyclic symmetry by {cyclic_err:.3e}"
        )));
    }
    if swap_err > 1e-12 {
        log::warn!("model distribution breaks full exchange symmetry by {swap_err:.3e}");
    }
    Ok(d)
}

/// Monte-Carlo photocount channels: per window a photon pair count is drawn
/// from the single-window twin-beam distribution and each APD clicks with
/// probability `1 − (1−d)(1−η)ⁿ`. Reproducible for a fixed seed.
pub fn sample_channels(
    params: &TwbModelParams,
    n_windows: usize,
    seed: u64,
) -> Result<PhotocountChannels> {
    params.validate()?;
    let p_si = twb_joint(params, 1.0)?;
    let shape = p_si.shape;
    // Flat CDF over the (n_s, n_i) grid for inverse-transform sampling.
    let mut cdf = Vec::with_capacity(p_si.data().len());
    let mut cum = 0.0;
    for &x in p_si.data() {
        cum += x;
        cdf.push(cum);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut signal = Vec::with_capacity(n_windows);
    let mut idler = Vec::with_capacity(n_windows);
    for _ in 0..n_windows {
        let u: f64 = rng.gen();
        let flat = cdf.partition_point(|&c| c < u).min(cdf.len() - 1);
        let n_s = flat / shape[1];
        let n_i = flat % shape[1];
        let p_click_s = 1.0 - (1.0 - params.d_s) * (1.0 - params.eta_s).powi(n_s as i32);
        let p_click_i = 1.0 - (1.0 - params.d_i) * (1.0 - params.eta_i).powi(n_i as i32);
        signal.push(u16::from(rng.gen::<f64>() < p_click_s));
        idler.push(u16::from(rng.gen::<f64>() < p_click_i));
    }
    PhotocountChannels::new(signal, idler)
}

/// Intensity moments of the model state reduced to the per-mode level,
/// assuming `M` identical modes per beam (Appendix-C reduction of the exact
/// photon-number distribution of Eqs. (D1)–(D7)).
pub fn reduced_moments_of_model(
    params: &TwbModelParams,
    w_p: u32,
    w_n: u32,
    m_modes: f64,
) -> Result<IntensityMoments> {
    if !(m_modes > 0.0) || !m_modes.is_finite() {
        return Err(Error::validation(format!("mode count M = {m_modes} must be > 0")));
    }
    let dist = build_state_distribution(params, w_p, w_n)?;
    let pm = moments_from_distribution(&dist, 6)?;
    let whole = intensity_from_photon_moments(&pm)?;
    reduce_to_single_mode(&whole, m_modes)
}

/// Effective per-mode Gaussian parameters fitted to the model state, assuming
/// `M` identical modes per beam.
///
/// Structural facts of the model pin the inversion: the building blocks are
/// thermal and pair fields, so `C = 0`; the beams are never linearly mixed,
/// so the normal cross-coherence `D̄` vanishes identically and only the pair
/// amplitude `D` (real by choice of phase) couples the beams. Intensity
/// moments then determine `B = ⟨w⟩` and `|D|²` (the pair covariance).
/// Because the reduction to `M` identical modes is imposed externally, the
/// inverted pair amplitude can overshoot the physical boundary by a small
/// margin; in that case it is projected back onto the closest physical state
/// (bisection on its overall scale, which always terminates because `D = 0`
/// is admissible).
pub fn gaussian_params_of_model(
    params: &TwbModelParams,
    w_p: u32,
    w_n: u32,
    m_modes: f64,
) -> Result<GaussianStateParams> {
    let single = reduced_moments_of_model(params, w_p, w_n, m_modes)?;
    gaussian_params_from_reduced(&single)
}

/// The structural (C = 0, D̄ = 0, symmetric real D) Gaussian inversion of
/// reduced per-mode model moments; see [`gaussian_params_of_model`].
pub fn gaussian_params_from_reduced(single: &IntensityMoments) -> Result<GaussianStateParams> {
    // Symmetrize residual numerical asymmetry over the three beams / pairs.
    let b = (0..3).map(|j| single.get(unit(j)).unwrap_or(0.0)).sum::<f64>() / 3.0;
    let mut s_cov = 0.0;
    for (j, k) in [(0usize, 1usize), (0, 2), (1, 2)] {
        let mut idx = [0u8; 3];
        idx[j] = 1;
        idx[k] = 1;
        s_cov += single.get(idx)? - single.get(unit(j))? * single.get(unit(k))?;
    }
    s_cov = (s_cov / 3.0).max(0.0);

    let build = |d: f64| -> Result<GaussianStateParams> {
        let mut p = GaussianStateParams::vacuum(3)?;
        for j in 0..3 {
            p.set_b(j, b);
        }
        for j in 0..3 {
            for k in (j + 1)..3 {
                p.set_d(j, k, d.into());
            }
        }
        Ok(p)
    };
    let physical = |p: &GaussianStateParams| -> bool {
        build_covariance(p)
            .and_then(|cm| is_physical(&cm, PHYS_TOL_ANALYTIC))
            .unwrap_or(false)
    };
    let d_full = s_cov.sqrt();
    let mut u = 1.0;
    if !physical(&build(d_full)?) {
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if physical(&build(mid * d_full)?) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        u = lo;
    }
    let p = build(u * d_full)?;
    if !physical(&p) {
        return Err(Error::numerical(
            "no physical Gaussian parameter set matches the model moments",
        ));
    }
    Ok(p)
}

fn unit(j: usize) -> [u8; 3] {
    let mut e = [0u8; 3];
    e[j] = 1;
    e
}

/// One evaluated point of a noise sweep.
#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub w_n: u32,
    /// Mean noise photon number per beam, `⟨n_n⟩`.
    pub mean_noise: f64,
    /// Fitted per-mode Gaussian parameters (surrogate for spectral tests).
    pub params: GaussianStateParams,
    /// Reduced per-mode intensity moments of the model state itself — the
    /// measurable input the moment-route formulas are evaluated on.
    pub moments: IntensityMoments,
}

/// Evaluate the model along a noise sweep: per grid point, tabulate the
/// reduced per-mode intensity moments and fit the surrogate Gaussian
/// parameters from them.
pub fn sweep_states(
    params: &TwbModelParams,
    cfg: &SweepConfig,
    m_modes: f64,
) -> Result<Vec<SweepPoint>> {
    params.validate()?;
    cfg.validate()?;
    cfg.w_n_list
        .par_iter()
        .map(|&w_n| {
            let single = reduced_moments_of_model(params, cfg.w_p, w_n, m_modes)?;
            let p = gaussian_params_from_reduced(&single)?;
            Ok(SweepPoint {
                w_n,
                mean_noise: noise_mean(params, w_n)?,
                moments: single,
                params: p,
            })
        })
        .collect()
}
