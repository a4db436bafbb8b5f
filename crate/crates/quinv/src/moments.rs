//! Intensity- and photon-number-moment engine: exact Wick evaluation of
//! Gaussian intensity moments, Stirling conversions between photon-number
//! and intensity moments, moment extraction from distributions, and the
//! whole-field ↔ single-mode moment reduction for `M` independent modes.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::{Arc, Mutex, OnceLock};

use serde::{Deserialize, Serialize};

use crate::detect::JointDistribution;
use crate::gauss::GaussianStateParams;
use crate::symbolic::wick::{expand_moment_symbolic, key_order, MomentKey};
use crate::symbolic::{symbol_values, CompiledPoly};
use crate::{Error, Result};

/// Moment index `(l₁,l₂,l₃)`; trailing entries are zero for fewer beams.
pub type MomentIndex = MomentKey;

/// Where a moment set came from; constrains which invariants are checked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Model,
    Measured,
    Reduced,
}

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Provenance::Model => "model",
            Provenance::Measured => "measured",
            Provenance::Reduced => "reduced",
        };
        write!(f, "{s}")
    }
}

impl std::str::FromStr for Provenance {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "model" => Ok(Provenance::Model),
            "measured" => Ok(Provenance::Measured),
            "reduced" => Ok(Provenance::Reduced),
            other => Err(Error::validation(format!("unknown provenance `{other}`"))),
        }
    }
}

/// Normally ordered (intensity) moments `⟨W₁^{l₁}W₂^{l₂}W₃^{l₃}⟩`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IntensityMoments {
    pub n_beams: usize,
    pub max_order: u32,
    pub provenance: Provenance,
    values: BTreeMap<MomentIndex, f64>,
}

impl IntensityMoments {
    pub fn new(n_beams: usize, max_order: u32, provenance: Provenance) -> Self {
        IntensityMoments {
            n_beams,
            max_order,
            provenance,
            values: BTreeMap::new(),
        }
    }

    pub fn set(&mut self, idx: MomentIndex, value: f64) {
        self.values.insert(idx, value);
    }

    /// The moment at `idx`; order-0 is 1 by convention.
    pub fn get(&self, idx: MomentIndex) -> Result<f64> {
        if key_order(&idx) == 0 {
            return Ok(1.0);
        }
        self.values.get(&idx).copied().ok_or_else(|| Error::missing_moment(idx))
    }

    pub fn try_get(&self, idx: MomentIndex) -> Option<f64> {
        if key_order(&idx) == 0 {
            Some(1.0)
        } else {
            self.values.get(&idx).copied()
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&MomentIndex, &f64)> {
        self.values.iter()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Ordinary photon-number moments `⟨n₁^{l₁}n₂^{l₂}n₃^{l₃}⟩`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhotonMoments {
    pub n_beams: usize,
    pub values: BTreeMap<MomentIndex, f64>,
}

impl PhotonMoments {
    pub fn get(&self, idx: MomentIndex) -> Result<f64> {
        if key_order(&idx) == 0 {
            return Ok(1.0);
        }
        self.values.get(&idx).copied().ok_or_else(|| Error::missing_moment(idx))
    }
}

/// All moment indices for `n_beams` with `1 ≤ Σl_j ≤ max_order`.
pub fn moment_indices(n_beams: usize, max_order: u32) -> Vec<MomentIndex> {
    let mut out = Vec::new();
    let lim = |j: usize| if j < n_beams { max_order as u8 } else { 0 };
    for l1 in 0..=lim(0) {
        for l2 in 0..=lim(1) {
            for l3 in 0..=lim(2) {
                let idx = [l1, l2, l3];
                let order = key_order(&idx);
                if order >= 1 && order <= max_order {
                    out.push(idx);
                }
            }
        }
    }
    out.sort_by_key(|i| (key_order(i), *i));
    out
}

fn compiled_moment(key: &MomentIndex) -> Result<Arc<CompiledPoly>> {
    static CACHE: OnceLock<Mutex<HashMap<MomentKey, Arc<CompiledPoly>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(c) = cache.lock().expect("moment cache lock").get(key) {
        return Ok(c.clone());
    }
    let poly = expand_moment_symbolic(key)?;
    let compiled = Arc::new(CompiledPoly::compile(&poly));
    cache
        .lock()
        .expect("moment cache lock")
        .insert(*key, compiled.clone());
    Ok(compiled)
}

/// One intensity moment of a Gaussian state, from the exact Wick expansion.
pub fn moment_from_params(params: &GaussianStateParams, idx: MomentIndex) -> Result<f64> {
    let vals = symbol_values(params);
    Ok(compiled_moment(&idx)?.eval(&vals))
}

/// All intensity moments of a Gaussian state up to `max_order`.
pub fn moments_from_params(
    params: &GaussianStateParams,
    max_order: u32,
) -> Result<IntensityMoments> {
    params.validate()?;
    let vals = symbol_values(params);
    let mut out = IntensityMoments::new(params.n_beams(), max_order, Provenance::Model);
    for idx in moment_indices(params.n_beams(), max_order) {
        out.set(idx, compiled_moment(&idx)?.eval(&vals));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Stirling conversions (Eq. (19) and its inverse)
// ---------------------------------------------------------------------------

/// Signed Stirling numbers of the first kind `s(n,k)` for `n,k ≤ nmax`.
fn stirling_first(nmax: usize) -> Vec<Vec<i64>> {
    let mut s = vec![vec![0i64; nmax + 1]; nmax + 1];
    s[0][0] = 1;
    for n in 1..=nmax {
        for k in 1..=n {
            s[n][k] = s[n - 1][k - 1] - (n as i64 - 1) * s[n - 1][k];
        }
    }
    s
}

/// Stirling numbers of the second kind `S(n,k)`.
fn stirling_second(nmax: usize) -> Vec<Vec<i64>> {
    let mut s = vec![vec![0i64; nmax + 1]; nmax + 1];
    s[0][0] = 1;
    for n in 1..=nmax {
        for k in 1..=n {
            s[n][k] = s[n - 1][k - 1] + (k as i64) * s[n - 1][k];
        }
    }
    s
}

fn max_power(values: &BTreeMap<MomentIndex, f64>) -> usize {
    values
        .keys()
        .flat_map(|i| i.iter())
        .copied()
        .max()
        .unwrap_or(0) as usize
}

/// Intensity (factorial) moments from photon-number moments: the triple sum
/// `⟨W^l⟩ = Σ_k s(l₁,k₁)s(l₂,k₂)s(l₃,k₃)⟨n₁^{k₁}n₂^{k₂}n₃^{k₃}⟩`.
pub fn intensity_from_photon_moments(pm: &PhotonMoments) -> Result<IntensityMoments> {
    let nmax = max_power(&pm.values);
    let s = stirling_first(nmax);
    let max_order = pm.values.keys().map(key_order).max().unwrap_or(0);
    let mut out = IntensityMoments::new(pm.n_beams, max_order, Provenance::Measured);
    for idx in pm.values.keys() {
        let mut acc = 0.0;
        for k1 in 0..=idx[0] {
            for k2 in 0..=idx[1] {
                for k3 in 0..=idx[2] {
                    let c = s[idx[0] as usize][k1 as usize]
                        * s[idx[1] as usize][k2 as usize]
                        * s[idx[2] as usize][k3 as usize];
                    if c == 0 {
                        continue;
                    }
                    acc += c as f64 * pm.get([k1, k2, k3])?;
                }
            }
        }
        out.set(*idx, acc);
    }
    Ok(out)
}

/// Inverse of [`intensity_from_photon_moments`]; exact round-trip.
pub fn photon_from_intensity_moments(im: &IntensityMoments) -> Result<PhotonMoments> {
    let nmax = max_power(&im.values);
    let s = stirling_second(nmax);
    let mut values = BTreeMap::new();
    for idx in im.values.keys() {
        let mut acc = 0.0;
        for k1 in 0..=idx[0] {
            for k2 in 0..=idx[1] {
                for k3 in 0..=idx[2] {
                    let c = s[idx[0] as usize][k1 as usize]
                        * s[idx[1] as usize][k2 as usize]
                        * s[idx[2] as usize][k3 as usize];
                    if c == 0 {
                        continue;
                    }
                    acc += c as f64 * im.get([k1, k2, k3])?;
                }
            }
        }
        values.insert(*idx, acc);
    }
    Ok(PhotonMoments {
        n_beams: im.n_beams,
        values,
    })
}

/// Photon-number moments by direct summation over a truncated distribution.
pub fn moments_from_distribution(
    dist: &JointDistribution,
    max_order: u32,
) -> Result<PhotonMoments> {
    dist.check_normalized(1e-6)?;
    let tail = dist.top_bin_mass();
    if tail > 1e-8 {
        log::warn!("distribution truncation tail mass {tail:.3e} exceeds 1e-8; moments may be biased");
    }
    let mut values = BTreeMap::new();
    let indices = moment_indices(dist.n_beams, max_order);
    for idx in &indices {
        values.insert(*idx, 0.0);
    }
    for (n, mass) in dist.iter() {
        if mass == 0.0 {
            continue;
        }
        for idx in &indices {
            let mut w = mass;
            for j in 0..3 {
                for _ in 0..idx[j] {
                    w *= n[j] as f64;
                }
            }
            *values.get_mut(idx).unwrap() += w;
        }
    }
    Ok(PhotonMoments {
        n_beams: dist.n_beams,
        values,
    })
}

// ---------------------------------------------------------------------------
// Raw ↔ central moment conversion
// ---------------------------------------------------------------------------

fn binomial(n: u8, k: u8) -> f64 {
    let mut acc = 1.0;
    for i in 0..k {
        acc = acc * (n - i) as f64 / (i + 1) as f64;
    }
    acc
}

/// Central moment `⟨Π(W_j−⟨W_j⟩)^{l_j}⟩` from raw moments.
pub(crate) fn central_from_raw(
    raw: &dyn Fn(MomentIndex) -> Result<f64>,
    means: [f64; 3],
    idx: MomentIndex,
) -> Result<f64> {
    convert_moment(raw, means, idx, -1.0)
}

/// Raw moment from central moments (order-1 central moments are zero).
pub(crate) fn raw_from_central(
    central: &dyn Fn(MomentIndex) -> Result<f64>,
    means: [f64; 3],
    idx: MomentIndex,
) -> Result<f64> {
    let inner = |k: MomentIndex| -> Result<f64> {
        if key_order(&k) == 1 {
            Ok(0.0)
        } else {
            central(k)
        }
    };
    convert_moment(&inner, means, idx, 1.0)
}

fn convert_moment(
    inner: &dyn Fn(MomentIndex) -> Result<f64>,
    means: [f64; 3],
    idx: MomentIndex,
    sign: f64,
) -> Result<f64> {
    let mut acc = 0.0;
    for k1 in 0..=idx[0] {
        for k2 in 0..=idx[1] {
            for k3 in 0..=idx[2] {
                let k = [k1, k2, k3];
                let mut c = 1.0;
                for j in 0..3 {
                    c *= binomial(idx[j], k[j]);
                    for _ in 0..(idx[j] - k[j]) {
                        c *= sign * means[j];
                    }
                }
                acc += c * inner(k)?;
            }
        }
    }
    Ok(acc)
}

// ---------------------------------------------------------------------------
// Appendix-C reduction between whole-field and single-mode moments
// ---------------------------------------------------------------------------

/// One product term of an Appendix-C correction: coefficient, which `M`
/// polynomial it multiplies (2 → M(M−1), 3 → M(M−1)(M−2)), and the
/// single-mode central-moment factors in placeholder beams (j,k,l)=(0,1,2).
struct CTerm {
    coeff: f64,
    m_level: u8,
    factors: &'static [[u8; 3]],
}

const fn ct(coeff: f64, m_level: u8, factors: &'static [[u8; 3]]) -> CTerm {
    CTerm {
        coeff,
        m_level,
        factors,
    }
}

/// Correction terms per sorted-descending power pattern. Patterns absent
/// from this table have no `M(M−1)`-type corrections only when listed with
/// an empty slice; unsupported patterns are rejected upstream.
fn c_table(pattern: &[u8]) -> Option<&'static [CTerm]> {
    static EMPTY: [CTerm; 0] = [];
    static P22: [CTerm; 2] = [
        ct(2.0, 2, &[[1, 1, 0], [1, 1, 0]]),
        ct(1.0, 2, &[[2, 0, 0], [0, 2, 0]]),
    ];
    static P31: [CTerm; 1] = [ct(3.0, 2, &[[2, 0, 0], [1, 1, 0]])];
    static P32: [CTerm; 3] = [
        ct(3.0, 2, &[[2, 0, 0], [1, 2, 0]]),
        ct(1.0, 2, &[[3, 0, 0], [0, 2, 0]]),
        ct(6.0, 2, &[[2, 1, 0], [1, 1, 0]]),
    ];
    static P33: [CTerm; 7] = [
        ct(3.0, 2, &[[2, 0, 0], [1, 3, 0]]),
        ct(1.0, 2, &[[3, 0, 0], [0, 3, 0]]),
        ct(3.0, 2, &[[3, 1, 0], [0, 2, 0]]),
        ct(9.0, 2, &[[2, 2, 0], [1, 1, 0]]),
        ct(9.0, 2, &[[2, 1, 0], [1, 2, 0]]),
        ct(9.0, 3, &[[2, 0, 0], [1, 1, 0], [0, 2, 0]]),
        ct(6.0, 3, &[[1, 1, 0], [1, 1, 0], [1, 1, 0]]),
    ];
    static P211: [CTerm; 2] = [
        ct(1.0, 2, &[[2, 0, 0], [0, 1, 1]]),
        ct(2.0, 2, &[[1, 1, 0], [1, 0, 1]]),
    ];
    static P221: [CTerm; 5] = [
        ct(1.0, 2, &[[2, 0, 0], [0, 2, 1]]),
        ct(1.0, 2, &[[0, 2, 0], [2, 0, 1]]),
        ct(4.0, 2, &[[1, 1, 0], [1, 1, 1]]),
        ct(2.0, 2, &[[1, 0, 1], [1, 2, 0]]),
        ct(2.0, 2, &[[0, 1, 1], [2, 1, 0]]),
    ];
    static P222: [CTerm; 15] = [
        ct(1.0, 2, &[[2, 0, 0], [0, 2, 2]]),
        ct(1.0, 2, &[[0, 2, 0], [2, 0, 2]]),
        ct(1.0, 2, &[[0, 0, 2], [2, 2, 0]]),
        ct(4.0, 2, &[[1, 1, 0], [1, 1, 2]]),
        ct(4.0, 2, &[[1, 0, 1], [1, 2, 1]]),
        ct(4.0, 2, &[[0, 1, 1], [2, 1, 1]]),
        ct(4.0, 2, &[[1, 1, 1], [1, 1, 1]]),
        ct(2.0, 2, &[[2, 1, 0], [0, 1, 2]]),
        ct(2.0, 2, &[[2, 0, 1], [0, 2, 1]]),
        ct(2.0, 2, &[[1, 2, 0], [1, 0, 2]]),
        ct(1.0, 3, &[[2, 0, 0], [0, 2, 0], [0, 0, 2]]),
        ct(2.0, 3, &[[1, 1, 0], [1, 1, 0], [0, 0, 2]]),
        ct(2.0, 3, &[[1, 0, 1], [1, 0, 1], [0, 2, 0]]),
        ct(2.0, 3, &[[0, 1, 1], [0, 1, 1], [2, 0, 0]]),
        ct(8.0, 3, &[[1, 1, 0], [0, 1, 1], [1, 0, 1]]),
    ];
    static P311: [CTerm; 4] = [
        ct(1.0, 2, &[[3, 0, 0], [0, 1, 1]]),
        ct(3.0, 2, &[[2, 0, 0], [1, 1, 1]]),
        ct(3.0, 2, &[[1, 1, 0], [2, 0, 1]]),
        ct(3.0, 2, &[[1, 0, 1], [2, 1, 0]]),
    ];
    static P321: [CTerm; 11] = [
        ct(3.0, 2, &[[2, 0, 0], [1, 2, 1]]),
        ct(1.0, 2, &[[0, 2, 0], [3, 0, 1]]),
        ct(6.0, 2, &[[1, 1, 0], [2, 1, 1]]),
        ct(3.0, 2, &[[1, 0, 1], [2, 2, 0]]),
        ct(2.0, 2, &[[0, 1, 1], [3, 1, 0]]),
        ct(1.0, 2, &[[3, 0, 0], [0, 2, 1]]),
        ct(6.0, 2, &[[2, 1, 0], [1, 1, 1]]),
        ct(3.0, 2, &[[2, 0, 1], [1, 2, 0]]),
        ct(3.0, 3, &[[2, 0, 0], [0, 2, 0], [1, 0, 1]]),
        ct(6.0, 3, &[[2, 0, 0], [1, 1, 0], [0, 1, 1]]),
        ct(6.0, 3, &[[1, 1, 0], [1, 1, 0], [1, 0, 1]]),
    ];
    match pattern {
        [1] | [2] | [3] | [1, 1] | [2, 1] | [1, 1, 1] => Some(&EMPTY),
        [2, 2] => Some(&P22),
        [3, 1] => Some(&P31),
        [3, 2] => Some(&P32),
        [3, 3] => Some(&P33),
        [2, 1, 1] => Some(&P211),
        [2, 2, 1] => Some(&P221),
        [2, 2, 2] => Some(&P222),
        [3, 1, 1] => Some(&P311),
        [3, 2, 1] => Some(&P321),
        _ => None,
    }
}

/// Sorted-descending nonzero powers plus the beam order realizing them.
fn pattern_of(idx: MomentIndex) -> (Vec<u8>, Vec<usize>) {
    let mut beams: Vec<usize> = (0..3).filter(|&j| idx[j] > 0).collect();
    beams.sort_by_key(|&j| (std::cmp::Reverse(idx[j]), j));
    let pattern = beams.iter().map(|&j| idx[j]).collect();
    (pattern, beams)
}

/// True when the Appendix-C relation set covers this central-moment index.
pub fn appendix_c_supports(idx: MomentIndex) -> bool {
    c_table(&pattern_of(idx).0).is_some()
}

/// `M(M−1)…`-type correction of an Appendix-C relation, from already-known
/// single-mode central moments.
fn c_correction(
    idx: MomentIndex,
    m: f64,
    single_central: &dyn Fn(MomentIndex) -> Result<f64>,
) -> Result<f64> {
    let (pattern, beams) = pattern_of(idx);
    let terms = c_table(&pattern).ok_or_else(|| {
        Error::validation(format!(
            "Appendix-C relation for central moment index {idx:?} is not available"
        ))
    })?;
    let m2 = m * (m - 1.0);
    let m3 = m2 * (m - 2.0);
    let mut acc = 0.0;
    for t in terms {
        let mut prod = t.coeff * if t.m_level == 2 { m2 } else { m3 };
        for f in t.factors {
            let mut actual = [0u8; 3];
            for (slot, &beam) in beams.iter().enumerate() {
                actual[beam] = f[slot];
            }
            prod *= single_central(actual)?;
        }
        acc += prod;
    }
    Ok(acc)
}

fn order_sorted_supported(values: &BTreeMap<MomentIndex, f64>) -> Vec<MomentIndex> {
    let mut idxs: Vec<MomentIndex> = values
        .keys()
        .copied()
        .filter(|i| appendix_c_supports(*i))
        .collect();
    idxs.sort_by_key(|i| (key_order(i), *i));
    idxs
}

/// Reduces whole-field moments of an `M`-mode field to the moments of one
/// typical mode by recursively solving the Appendix-C relations low-to-high.
///
/// Indices whose pattern is outside the published relation set are dropped
/// from the output; asking for them downstream yields a missing-moment error.
pub fn reduce_to_single_mode(whole: &IntensityMoments, m: f64) -> Result<IntensityMoments> {
    if m <= 0.0 {
        return Err(Error::validation(format!("mode count M = {m} must be > 0")));
    }
    let n = whole.n_beams;
    let mut means_w = [0.0; 3];
    for j in 0..n {
        let mut e = [0u8; 3];
        e[j] = 1;
        means_w[j] = whole.get(e)?;
    }
    let means_single = [means_w[0] / m, means_w[1] / m, means_w[2] / m];

    let whole_raw = |i: MomentIndex| whole.get(i);
    let mut single_central: BTreeMap<MomentIndex, f64> = BTreeMap::new();
    let lookup = |map: &BTreeMap<MomentIndex, f64>, i: MomentIndex| -> Result<f64> {
        if key_order(&i) == 0 {
            return Ok(1.0);
        }
        if key_order(&i) == 1 {
            return Ok(0.0);
        }
        map.get(&i).copied().ok_or_else(|| Error::missing_moment(i))
    };

    for idx in order_sorted_supported(&whole.values) {
        if key_order(&idx) == 1 {
            continue;
        }
        let whole_c = central_from_raw(&whole_raw, means_w, idx)?;
        let corr = c_correction(idx, m, &|i| lookup(&single_central, i))?;
        single_central.insert(idx, (whole_c - corr) / m);
    }

    let mut out = IntensityMoments::new(n, whole.max_order, Provenance::Reduced);
    for j in 0..n {
        let mut e = [0u8; 3];
        e[j] = 1;
        out.set(e, means_single[j]);
    }
    let idxs: Vec<MomentIndex> = single_central.keys().copied().collect();
    for idx in idxs {
        let raw = raw_from_central(&|i| lookup(&single_central, i), means_single, idx)?;
        out.set(idx, raw);
    }
    Ok(out)
}

/// Forward Appendix-C map: whole-field moments of `M` independent identical
/// modes from the single-mode moments. Inverse of [`reduce_to_single_mode`].
pub fn expand_to_whole_field(single: &IntensityMoments, m: f64) -> Result<IntensityMoments> {
    if m <= 0.0 {
        return Err(Error::validation(format!("mode count M = {m} must be > 0")));
    }
    let n = single.n_beams;
    let mut means_s = [0.0; 3];
    for j in 0..n {
        let mut e = [0u8; 3];
        e[j] = 1;
        means_s[j] = single.get(e)?;
    }
    let means_w = [means_s[0] * m, means_s[1] * m, means_s[2] * m];

    let single_raw = |i: MomentIndex| single.get(i);
    let mut single_central: BTreeMap<MomentIndex, f64> = BTreeMap::new();
    for idx in order_sorted_supported(&single.values) {
        if key_order(&idx) == 1 {
            continue;
        }
        let c = central_from_raw(&single_raw, means_s, idx)?;
        single_central.insert(idx, c);
    }
    let lookup = |i: MomentIndex| -> Result<f64> {
        if key_order(&i) == 0 {
            return Ok(1.0);
        }
        if key_order(&i) == 1 {
            return Ok(0.0);
        }
        single_central.get(&i).copied().ok_or_else(|| Error::missing_moment(i))
    };

    let mut whole_central: BTreeMap<MomentIndex, f64> = BTreeMap::new();
    for (idx, &sc) in &single_central {
        let corr = c_correction(*idx, m, &lookup)?;
        whole_central.insert(*idx, m * sc + corr);
    }

    let mut out = IntensityMoments::new(n, single.max_order, Provenance::Model);
    for j in 0..n {
        let mut e = [0u8; 3];
        e[j] = 1;
        out.set(e, means_w[j]);
    }
    let wlookup = |i: MomentIndex| -> Result<f64> {
        if key_order(&i) == 0 {
            return Ok(1.0);
        }
        if key_order(&i) == 1 {
            return Ok(0.0);
        }
        whole_central.get(&i).copied().ok_or_else(|| Error::missing_moment(i))
    };
    let idxs: Vec<MomentIndex> = whole_central.keys().copied().collect();
    for idx in idxs {
        out.set(idx, raw_from_central(&wlookup, means_w, idx)?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// CSV serialization
// ---------------------------------------------------------------------------

/// Serializes to CSV: a `#` metadata line, a header row, then one row per
/// moment with columns `l1,l2,l3,value`.
pub fn moments_to_csv(im: &IntensityMoments) -> String {
    let mut s = format!(
        "# n_beams={} max_order={} provenance={}\nl1,l2,l3,value\n",
        im.n_beams, im.max_order, im.provenance
    );
    for (idx, v) in im.iter() {
        s.push_str(&format!("{},{},{},{:.17e}\n", idx[0], idx[1], idx[2], v));
    }
    s
}

pub fn moments_from_csv(text: &str) -> Result<IntensityMoments> {
    let mut lines = text.lines();
    let meta = lines
        .next()
        .ok_or_else(|| Error::format("empty moments CSV"))?;
    let meta = meta
        .strip_prefix('#')
        .ok_or_else(|| Error::format("moments CSV must start with a `#` metadata line"))?;
    let mut n_beams = None;
    let mut max_order = None;
    let mut provenance = None;
    for field in meta.split_whitespace() {
        let (k, v) = field
            .split_once('=')
            .ok_or_else(|| Error::format(format!("bad metadata field `{field}`")))?;
        match k {
            "n_beams" => n_beams = Some(v.parse::<usize>().map_err(|e| Error::format(e.to_string()))?),
            "max_order" => max_order = Some(v.parse::<u32>().map_err(|e| Error::format(e.to_string()))?),
            "provenance" => provenance = Some(v.parse::<Provenance>()?),
            other => return Err(Error::format(format!("unknown metadata key `{other}`"))),
        }
    }
    let (n_beams, max_order, provenance) = match (n_beams, max_order, provenance) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => return Err(Error::format("metadata must carry n_beams, max_order, provenance")),
    };
    // Further `#` lines carry embedded run metadata and are not data.
    let body: String = lines
        .filter(|l| !l.starts_with('#'))
        .collect::<Vec<_>>()
        .join("\n");
    let mut reader = csv::Reader::from_reader(body.as_bytes());
    let mut out = IntensityMoments::new(n_beams, max_order, provenance);
    for record in reader.records() {
        let r = record.map_err(|e| Error::format(e.to_string()))?;
        if r.len() != 4 {
            return Err(Error::format(format!("expected 4 columns, got {}", r.len())));
        }
        let parse_u8 = |i: usize| -> Result<u8> {
            r[i].trim()
                .parse::<u8>()
                .map_err(|e| Error::format(format!("bad index column: {e}")))
        };
        let idx = [parse_u8(0)?, parse_u8(1)?, parse_u8(2)?];
        let v = r[3]
            .trim()
            .parse::<f64>()
            .map_err(|e| Error::format(format!("bad value column: {e}")))?;
        out.set(idx, v);
    }
    Ok(out)
}

pub fn write_moments_csv(path: &Path, im: &IntensityMoments) -> Result<()> {
    std::fs::write(path, moments_to_csv(im))?;
    Ok(())
}

pub fn read_moments_csv(path: &Path) -> Result<IntensityMoments> {
    let text = std::fs::read_to_string(path)?;
    moments_from_csv(&text)
}
