//! Closed-form evaluation of the quantum universal invariants (QUIs) from
//! intensity moments: measurable parts, residues, and residue bounds.
//!
//! Every closed form is generated from one declarative term table (printed
//! coefficient, moment-index multiset) with the beam-index symmetrizers
//! `addt₁`/`addt₂`/`addt₃` applied mechanically by a permutation expander.
//! The two-beam invariants are obtained by specializing the three-beam
//! machinery to beams {1,2} (third beam in vacuum).

use std::collections::BTreeMap;
use std::sync::OnceLock;

use num_bigint::BigInt;
use num_rational::BigRational;
use serde::Serialize;

use crate::gauss::GaussianStateParams;
use crate::moments::IntensityMoments;
#[cfg(test)]
use crate::symbolic::wick::expand_moment_symbolic;
use crate::symbolic::wick::MomentKey;
use crate::symbolic::{sym, symbol_values, CompiledPoly, Poly};
use crate::{Error, Result};

/// Notes attached to serialized reports about repaired printed signs.
pub const CONVENTION_NOTES: &str = "Residue convention Δ = Δ_w − Δ_r; \
single-beam linear term carries +4⟨W₁⟩ (sign fixed by the e₁=4 solution); \
the single-beam bracket of the third-order invariant carries −4⟨W₁²⟩.";

/// QUI evaluated from intensity moments, with residue bracket.
#[derive(Debug, Clone, Serialize)]
pub struct QuiFromMomentsResult {
    pub k: usize,
    pub n_beams: usize,
    /// The measurable part Δᴺ_{k,w}.
    pub measurable_part: f64,
    pub residue_lower: f64,
    pub residue_upper: f64,
    /// True when the residue is identically zero (the invariant itself is
    /// fully measurable).
    pub exact: bool,
}

impl QuiFromMomentsResult {
    /// Bracket on the invariant itself: Δ = Δ_w − Δ_r.
    pub fn value_bounds(&self) -> (f64, f64) {
        (
            self.measurable_part - self.residue_upper,
            self.measurable_part - self.residue_lower,
        )
    }
}

// ---------------------------------------------------------------------------
// Declarative term tables for the printed measurable parts
// ---------------------------------------------------------------------------

/// Beam-index symmetrizer: `addt₁` substitutes the three beams for the
/// placeholder beam, `addt₂` the six ordered pairs, `addt₃` the six ordered
/// triples.
#[derive(Clone, Copy, Debug)]
enum Symmetrizer {
    Addt1,
    Addt2,
    Addt3,
}

const CYCLES: [[usize; 3]; 3] = [[0, 1, 2], [1, 2, 0], [2, 0, 1]];
const ALL_PERMS: [[usize; 3]; 6] = [
    [0, 1, 2],
    [0, 2, 1],
    [1, 0, 2],
    [1, 2, 0],
    [2, 0, 1],
    [2, 1, 0],
];

impl Symmetrizer {
    fn perms(self) -> &'static [[usize; 3]] {
        match self {
            Symmetrizer::Addt1 => &CYCLES,
            _ => &ALL_PERMS,
        }
    }
}

/// One printed term: rational coefficient and a product of moments in
/// placeholder beams 0,1,2.
struct PTerm {
    num: i64,
    den: i64,
    factors: &'static [MomentKey],
}

const fn pt(num: i64, den: i64, factors: &'static [MomentKey]) -> PTerm {
    PTerm { num, den, factors }
}

struct PrintedFormula {
    constant: i64,
    groups: &'static [(Symmetrizer, &'static [PTerm])],
}

// Measurable part of the first three-beam QUI (constant 3 plus the
// single-beam bracket summed over beams).
static A1_SINGLE: [PTerm; 3] = [
    pt(4, 1, &[[1, 0, 0]]),
    pt(12, 1, &[[1, 0, 0], [1, 0, 0]]),
    pt(-4, 1, &[[2, 0, 0]]),
];
static A1_MEAS: PrintedFormula = PrintedFormula {
    constant: 3,
    groups: &[(Symmetrizer::Addt1, &A1_SINGLE)],
};

// Measurable part of the second three-beam QUI.
static A2_SINGLE: [PTerm; 3] = [
    pt(8, 1, &[[1, 0, 0]]),
    pt(-8, 1, &[[2, 0, 0]]),
    pt(24, 1, &[[1, 0, 0], [1, 0, 0]]),
];
static A2_PAIR: [PTerm; 12] = [
    pt(-4, 1, &[[2, 2, 0]]),
    pt(8, 1, &[[1, 2, 0]]),
    pt(24, 1, &[[1, 1, 0], [1, 1, 0]]),
    pt(8, 1, &[[1, 0, 0], [0, 1, 0]]),
    pt(12, 1, &[[2, 0, 0], [0, 2, 0]]),
    pt(-24, 1, &[[2, 0, 0], [0, 1, 0]]),
    pt(-48, 1, &[[1, 0, 0], [1, 1, 0]]),
    pt(48, 1, &[[1, 0, 0], [1, 2, 0]]),
    pt(96, 1, &[[1, 0, 0], [1, 0, 0], [0, 1, 0]]),
    pt(-96, 1, &[[2, 0, 0], [0, 1, 0], [0, 1, 0]]),
    pt(240, 1, &[[1, 0, 0], [1, 0, 0], [0, 1, 0], [0, 1, 0]]),
    pt(-192, 1, &[[1, 0, 0], [1, 1, 0], [0, 1, 0]]),
];
static A2_MEAS: PrintedFormula = PrintedFormula {
    constant: 3,
    groups: &[
        (Symmetrizer::Addt1, &A2_SINGLE),
        (Symmetrizer::Addt2, &A2_PAIR),
    ],
};

// The third three-beam QUI (exact; no residue).
static A4_SINGLE: [PTerm; 3] = [
    pt(4, 1, &[[1, 0, 0]]),
    pt(-4, 1, &[[2, 0, 0]]),
    pt(12, 1, &[[1, 0, 0], [1, 0, 0]]),
];
static A4_PAIR: [PTerm; 13] = [
    pt(-4, 1, &[[1, 1, 0]]),
    pt(-4, 1, &[[2, 2, 0]]),
    pt(8, 1, &[[1, 2, 0]]),
    pt(24, 1, &[[1, 1, 0], [1, 1, 0]]),
    pt(12, 1, &[[1, 0, 0], [0, 1, 0]]),
    pt(12, 1, &[[2, 0, 0], [0, 2, 0]]),
    pt(-24, 1, &[[2, 0, 0], [0, 1, 0]]),
    pt(-96, 1, &[[2, 0, 0], [0, 1, 0], [0, 1, 0]]),
    pt(96, 1, &[[1, 0, 0], [1, 0, 0], [0, 1, 0]]),
    pt(240, 1, &[[1, 0, 0], [1, 0, 0], [0, 1, 0], [0, 1, 0]]),
    pt(-48, 1, &[[1, 0, 0], [1, 1, 0]]),
    pt(48, 1, &[[1, 0, 0], [1, 2, 0]]),
    pt(-192, 1, &[[1, 0, 0], [1, 1, 0], [0, 1, 0]]),
];
static A4_TRIPLE: [PTerm; 53] = [
    // Absent from the printed equation; forced by the exact minor expansion
    // (the polynomial difference factors as −6·512·⟨W₁W₂⟩⟨W₁W₃⟩⟨W₂W₃⟩).
    pt(512, 1, &[[1, 1, 0], [1, 0, 1], [0, 1, 1]]),
    pt(8, 3, &[[1, 1, 1]]),
    pt(-8, 3, &[[2, 2, 2]]),
    pt(-8, 1, &[[1, 1, 2]]),
    pt(8, 1, &[[1, 2, 2]]),
    pt(-24, 1, &[[1, 0, 1], [0, 1, 0]]),
    pt(-24, 1, &[[2, 0, 2], [0, 1, 0]]),
    pt(24, 1, &[[2, 0, 0], [0, 1, 1]]),
    pt(24, 1, &[[2, 0, 2], [0, 2, 0]]),
    pt(32, 1, &[[1, 1, 1], [1, 1, 1]]),
    pt(32, 1, &[[1, 0, 0], [0, 1, 0], [0, 0, 1]]),
    pt(-32, 1, &[[2, 0, 0], [0, 2, 0], [0, 0, 2]]),
    pt(48, 1, &[[1, 0, 0], [1, 1, 1]]),
    pt(48, 1, &[[1, 0, 0], [1, 2, 2]]),
    pt(48, 1, &[[1, 0, 2], [0, 1, 0]]),
    pt(-48, 1, &[[2, 0, 0], [0, 1, 2]]),
    pt(48, 1, &[[1, 1, 0], [1, 0, 1]]),
    pt(48, 1, &[[1, 2, 0], [1, 0, 2]]),
    pt(-96, 1, &[[1, 0, 1], [0, 1, 0], [0, 1, 0]]),
    pt(-96, 1, &[[1, 1, 0], [1, 1, 1]]),
    pt(-96, 1, &[[1, 0, 0], [1, 1, 2]]),
    pt(96, 1, &[[1, 1, 0], [1, 1, 2]]),
    pt(-96, 1, &[[2, 0, 2], [0, 1, 0], [0, 1, 0]]),
    pt(-96, 1, &[[1, 2, 0], [1, 0, 1]]),
    pt(192, 1, &[[1, 0, 1], [1, 0, 1], [0, 1, 0]]),
    pt(192, 1, &[[1, 0, 2], [0, 1, 0], [0, 1, 0]]),
    pt(-192, 1, &[[2, 0, 0], [0, 1, 1], [0, 1, 1]]),
    pt(960, 1, &[[1, 0, 1], [1, 0, 1], [0, 1, 0], [0, 1, 0]]),
    pt(-96, 1, &[[2, 0, 0], [0, 1, 0], [0, 0, 1]]),
    pt(96, 1, &[[2, 0, 0], [0, 2, 0], [0, 0, 1]]),
    pt(384, 1, &[[1, 0, 0], [1, 0, 2], [0, 1, 0]]),
    pt(384, 1, &[[1, 0, 0], [1, 1, 1], [0, 1, 0]]),
    pt(-384, 1, &[[1, 0, 0], [1, 1, 2], [0, 1, 0]]),
    pt(-384, 1, &[[1, 0, 0], [1, 0, 1], [0, 1, 0]]),
    pt(384, 1, &[[2, 0, 0], [0, 1, 0], [0, 1, 1]]),
    pt(-384, 1, &[[2, 0, 0], [0, 1, 0], [0, 1, 2]]),
    pt(480, 1, &[[1, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]]),
    pt(480, 1, &[[1, 0, 0], [1, 0, 0], [0, 2, 0], [0, 0, 2]]),
    pt(768, 1, &[[1, 1, 0], [1, 0, 1], [0, 1, 0]]),
    pt(-768, 1, &[[1, 1, 1], [1, 0, 1], [0, 1, 0]]),
    pt(-768, 1, &[[1, 1, 0], [1, 0, 2], [0, 1, 0]]),
    pt(-768, 1, &[[1, 1, 0], [1, 0, 1], [0, 1, 1]]),
    pt(-960, 1, &[[1, 0, 0], [0, 1, 0], [0, 1, 0], [0, 0, 2]]),
    pt(-1920, 1, &[[1, 0, 0], [1, 0, 1], [0, 1, 0], [0, 1, 0]]),
    pt(1920, 1, &[[1, 0, 0], [1, 0, 2], [0, 1, 0], [0, 1, 0]]),
    pt(2880, 1, &[[1, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1], [0, 0, 1]]),
    pt(6720, 1, &[[1, 0, 0], [1, 0, 0], [0, 1, 0], [0, 1, 0], [0, 0, 1], [0, 0, 1]]),
    pt(-2880, 1, &[[1, 0, 0], [1, 0, 0], [0, 1, 0], [0, 1, 0], [0, 0, 2]]),
    pt(1280, 1, &[[1, 0, 0], [1, 1, 1], [0, 1, 0], [0, 0, 1]]),
    pt(-1920, 1, &[[1, 0, 0], [1, 1, 0], [0, 1, 0], [0, 0, 1]]),
    pt(1920, 1, &[[2, 0, 0], [0, 1, 0], [0, 1, 1], [0, 0, 1]]),
    pt(3840, 1, &[[1, 0, 0], [1, 0, 1], [0, 1, 0], [0, 1, 1]]),
    pt(-11520, 1, &[[1, 0, 0], [1, 0, 1], [0, 1, 0], [0, 1, 0], [0, 0, 1]]),
];
static A4_FULL: PrintedFormula = PrintedFormula {
    constant: 1,
    groups: &[
        (Symmetrizer::Addt1, &A4_SINGLE),
        (Symmetrizer::Addt2, &A4_PAIR),
        (Symmetrizer::Addt3, &A4_TRIPLE),
    ],
};

// ---------------------------------------------------------------------------
// Permutation expansion of the term tables
// ---------------------------------------------------------------------------

fn rat(num: i64, den: i64) -> BigRational {
    BigRational::new(BigInt::from(num), BigInt::from(den))
}

fn permute_key(idx: MomentKey, pos: &[usize; 3]) -> MomentKey {
    let mut out = [0u8; 3];
    for j in 0..3 {
        out[pos[j]] += idx[j];
    }
    out
}

/// Exact expansion of a printed formula into merged terms keyed by the
/// sorted factor multiset (the term id).
fn expand_exact(f: &PrintedFormula) -> BTreeMap<Vec<MomentKey>, BigRational> {
    let mut acc: BTreeMap<Vec<MomentKey>, BigRational> = BTreeMap::new();
    if f.constant != 0 {
        acc.insert(Vec::new(), rat(f.constant, 1));
    }
    for (symm, terms) in f.groups {
        for perm in symm.perms() {
            for t in *terms {
                let mut factors: Vec<MomentKey> =
                    t.factors.iter().map(|k| permute_key(*k, perm)).collect();
                factors.sort();
                let entry = acc.entry(factors).or_insert_with(|| rat(0, 1));
                *entry += rat(t.num, t.den);
            }
        }
    }
    acc.retain(|_, c| *c != rat(0, 1));
    acc
}

/// Numeric term table in the deterministic (sorted-by-term-id) order.
type TermTable = Vec<(f64, Vec<MomentKey>)>;

fn compile_table(f: &PrintedFormula) -> TermTable {
    expand_exact(f)
        .into_iter()
        .map(|(factors, c)| (crate::symbolic::rational_to_f64(&c), factors))
        .collect()
}

fn a1_table() -> &'static TermTable {
    static T: OnceLock<TermTable> = OnceLock::new();
    T.get_or_init(|| compile_table(&A1_MEAS))
}
fn a2_table() -> &'static TermTable {
    static T: OnceLock<TermTable> = OnceLock::new();
    T.get_or_init(|| compile_table(&A2_MEAS))
}
fn a4_table() -> &'static TermTable {
    static T: OnceLock<TermTable> = OnceLock::new();
    T.get_or_init(|| compile_table(&A4_FULL))
}

fn eval_table(table: &TermTable, get: &dyn Fn(MomentKey) -> Result<f64>) -> Result<f64> {
    let mut acc = 0.0;
    for (c, factors) in table {
        let mut prod = *c;
        for f in factors {
            prod *= get(*f)?;
        }
        acc += prod;
    }
    Ok(acc)
}

// ---------------------------------------------------------------------------
// Moment getters (plain, vacuum-padded, pair-remapped, orbit-averaged)
// ---------------------------------------------------------------------------

fn getter3(m: &IntensityMoments) -> impl Fn(MomentKey) -> Result<f64> + '_ {
    move |idx| m.get(idx)
}

/// Two-beam moments viewed as three-beam moments with beam 3 in vacuum
/// (any factor of W₃ annihilates the moment).
fn getter_padded(m: &IntensityMoments) -> impl Fn(MomentKey) -> Result<f64> + '_ {
    move |idx| {
        if idx[2] > 0 {
            Ok(0.0)
        } else {
            m.get(idx)
        }
    }
}

/// Three-beam moments restricted to the pair (j,k), vacuum elsewhere; the
/// formula's placeholder beams (0,1) map onto (j,k).
fn getter_pair(m: &IntensityMoments, j: usize, k: usize) -> impl Fn(MomentKey) -> Result<f64> + '_ {
    move |idx| {
        if idx[2] > 0 {
            return Ok(0.0);
        }
        let mut g = [0u8; 3];
        g[j] = idx[0];
        g[k] = idx[1];
        m.get(g)
    }
}

/// Orbit average over the six beam permutations (identity on symmetric
/// moment sets; makes the symmetric-state bounds well-defined otherwise).
fn getter_symmetrized(m: &IntensityMoments) -> impl Fn(MomentKey) -> Result<f64> + '_ {
    move |idx| {
        let mut acc = 0.0;
        for perm in &ALL_PERMS {
            acc += m.get(permute_key(idx, perm))?;
        }
        Ok(acc / 6.0)
    }
}

// ---------------------------------------------------------------------------
// Residue polynomials in the Gaussian parameters (for oracles and bounds)
// ---------------------------------------------------------------------------

/// Complex polynomial pair for assembling residue expressions.
#[derive(Clone)]
struct CPoly {
    re: Poly,
    im: Poly,
}

impl CPoly {
    fn conj(&self) -> Self {
        CPoly {
            re: self.re.clone(),
            im: self.im.neg(),
        }
    }
    fn mul(&self, o: &CPoly) -> Self {
        CPoly {
            re: self.re.mul(&o.re).sub(&self.im.mul(&o.im)),
            im: self.re.mul(&o.im).add(&self.im.mul(&o.re)),
        }
    }
    fn norm2(&self) -> Poly {
        self.re.mul(&self.re).add(&self.im.mul(&self.im))
    }
}

fn p_b(j: usize) -> Poly {
    Poly::symbol(sym::b(j))
}
fn c_c(j: usize) -> CPoly {
    CPoly {
        re: Poly::symbol(sym::c_re(j)),
        im: Poly::symbol(sym::c_im(j)),
    }
}
fn c_d(j: usize, k: usize) -> CPoly {
    // D is symmetric: D_kj = D_jk.
    let (a, b) = if j < k { (j, k) } else { (k, j) };
    CPoly {
        re: Poly::symbol(sym::d_re(a, b)),
        im: Poly::symbol(sym::d_im(a, b)),
    }
}
fn c_dbar(j: usize, k: usize) -> CPoly {
    // D̄ is Hermitian in its indices: D̄_kj = D̄*_jk.
    if j < k {
        CPoly {
            re: Poly::symbol(sym::dbar_re(j, k)),
            im: Poly::symbol(sym::dbar_im(j, k)),
        }
    } else {
        c_dbar(k, j).conj()
    }
}

fn scaled(p: Poly, num: i64, den: i64) -> Poly {
    p.scale(&rat(num, den))
}

/// Residue of the two-beam first QUI: `8(|D₁₂|² − |D̄₁₂|²)`.
fn r21_poly() -> Poly {
    scaled(c_d(0, 1).norm2().sub(&c_dbar(0, 1).norm2()), 8, 1)
}

/// Residue of the three-beam first QUI: `addt₂{4(|D₀₁|² − |D̄₀₁|²)}`.
fn r31_poly() -> Poly {
    let base = scaled(c_d(0, 1).norm2().sub(&c_dbar(0, 1).norm2()), 4, 1);
    let mut acc = Poly::zero();
    for perm in &ALL_PERMS {
        acc = acc.add(&base.apply_perm(perm));
    }
    acc
}

/// Residue of the three-beam second QUI (Appendix-A closed form in the
/// Gaussian parameters, symmetrized over ordered pairs and triples).
fn r32_poly() -> Poly {
    let pair_base = scaled(c_d(0, 1).norm2(), 8, 1);

    let q = |j: usize, k: usize| c_d(j, k).norm2().sub(&c_dbar(j, k).norm2());
    let re = |x: CPoly| x.re;
    let b0 = p_b(0);
    let triple_base = {
        let mut t = Poly::zero();
        // 16 (B₀ + B₀² − |C₀|²)(|D₁₂|² − |D̄₁₂|²)
        t = t.add(&scaled(
            b0.add(&b0.mul(&b0)).sub(&c_c(0).norm2()).mul(&q(1, 2)),
            16,
            1,
        ));
        // 16 Re{D₀₁ D₀₂* D̄₁₂}
        t = t.add(&scaled(
            re(c_d(0, 1).mul(&c_d(0, 2).conj()).mul(&c_dbar(1, 2))),
            16,
            1,
        ));
        // 32 (B₀ + B₁ − B₂) Re{D̄₀₁ D₁₂* D₀₂}
        t = t.add(&scaled(
            p_b(0)
                .add(&p_b(1))
                .sub(&p_b(2))
                .mul(&re(c_dbar(0, 1).mul(&c_d(1, 2).conj()).mul(&c_d(0, 2)))),
            32,
            1,
        ));
        // −16 (2B₀ + 1) Re{D̄₀₁ D̄₀₂* D̄₁₂}
        t = t.sub(&scaled(
            scaled(p_b(0), 2, 1)
                .add(&Poly::from_i64(1))
                .mul(&re(c_dbar(0, 1).mul(&c_dbar(0, 2).conj()).mul(&c_dbar(1, 2)))),
            16,
            1,
        ));
        // −16 (|D₀₁|² − |D̄₀₁|²)(|D₀₂|² − |D̄₀₂|²)
        t = t.sub(&scaled(q(0, 1).mul(&q(0, 2)), 16, 1));
        // 32 (Re{C₀ D₀₁* D₀₂* D₁₂} + Re{C₀ D̄₀₁ D̄₀₂ D₁₂*})
        t = t.add(&scaled(
            re(c_c(0)
                .mul(&c_d(0, 1).conj())
                .mul(&c_d(0, 2).conj())
                .mul(&c_d(1, 2)))
            .add(&re(c_c(0)
                .mul(&c_dbar(0, 1))
                .mul(&c_dbar(0, 2))
                .mul(&c_d(1, 2).conj()))),
            32,
            1,
        ));
        // −64 Re{C₁ D̄₀₂ D̄₀₁* D₁₂*}
        t = t.sub(&scaled(
            re(c_c(1)
                .mul(&c_dbar(0, 2))
                .mul(&c_dbar(0, 1).conj())
                .mul(&c_d(1, 2).conj())),
            64,
            1,
        ));
        t
    };

    let mut acc = Poly::zero();
    for perm in &ALL_PERMS {
        acc = acc.add(&pair_base.apply_perm(perm));
        acc = acc.add(&triple_base.apply_perm(perm));
    }
    acc
}

fn compiled_r21() -> &'static CompiledPoly {
    static P: OnceLock<CompiledPoly> = OnceLock::new();
    P.get_or_init(|| CompiledPoly::compile(&r21_poly()))
}
fn compiled_r31() -> &'static CompiledPoly {
    static P: OnceLock<CompiledPoly> = OnceLock::new();
    P.get_or_init(|| CompiledPoly::compile(&r31_poly()))
}
fn compiled_r32() -> &'static CompiledPoly {
    static P: OnceLock<CompiledPoly> = OnceLock::new();
    P.get_or_init(|| CompiledPoly::compile(&r32_poly()))
}

/// Parameter-true residue of the two-beam first QUI.
pub fn residue21_from_params(p: &GaussianStateParams) -> f64 {
    compiled_r21().eval(&symbol_values(p))
}

/// Parameter-true residue of the three-beam first QUI.
pub fn residue31_from_params(p: &GaussianStateParams) -> f64 {
    compiled_r31().eval(&symbol_values(p))
}

/// Parameter-true residue of the three-beam second QUI.
pub fn residue32_from_params(p: &GaussianStateParams) -> f64 {
    compiled_r32().eval(&symbol_values(p))
}

/// Symmetric-state closed form of the Δ³₂ residue (Appendix-B route),
/// kept separate as an algebraic cross-check of the general expression.
pub fn residue32_symmetric_from_params(p: &GaussianStateParams) -> f64 {
    let b = p.b(0);
    let c = p.c(0);
    let d = p.d(0, 1);
    let e = p.d_bar(0, 1);
    let q = d.norm_sqr() - e.norm_sqr();
    48.0 * d.norm_sqr() + 96.0 * (b + b * b - c.norm_sqr()) * q - 96.0 * q * q
        + 192.0 * b * e.re * q
        + 96.0 * e.re * q
        + 192.0 * (c * d.conj()).re * q
}

// ---------------------------------------------------------------------------
// Residue bounds
// ---------------------------------------------------------------------------

/// Pair covariance `⟨W_jW_k⟩ − ⟨W_j⟩⟨W_k⟩`, clamped at 0 (it equals
/// `|D|²+|D̄|² ≥ 0` exactly; clamping guards measured noise).
fn pair_variance(get: &dyn Fn(MomentKey) -> Result<f64>) -> Result<f64> {
    let v = get([1, 1, 0])? - get([1, 0, 0])? * get([0, 1, 0])?;
    Ok(v.max(0.0))
}

/// Bounds on the residue of the pair QUI for the pair mapped into slots
/// (0,1) of `get`: upper from the covariance identity, lower sharpened by
/// the pair uncertainty relation Δ²₂ − Δ²₁ + 1 ≥ 0 when fourth-order
/// moments are available.
fn pair_residue_bounds(get: &dyn Fn(MomentKey) -> Result<f64>) -> Result<(f64, f64)> {
    let upper = 8.0 * pair_variance(get)?;
    let sharp = (|| -> Result<f64> {
        let d22 = eval_table(a4_table(), get)?;
        let d21w = eval_table(a1_table(), get)? - 1.0;
        Ok(-d22 + d21w - 1.0)
    })();
    let lower = match sharp {
        Ok(s) => s.max(-upper),
        Err(Error::MissingMoment { .. }) => -upper,
        Err(e) => return Err(e),
    };
    Ok((lower, upper))
}

/// The explicit triangle-inequality upper bound on |Δ³₂,r| (Appendix-B
/// closed form for symmetric states; evaluated on orbit-averaged moments).
fn b2_upper(get: &dyn Fn(MomentKey) -> Result<f64>) -> Result<f64> {
    let w1 = get([1, 0, 0])?;
    let w1s = get([2, 0, 0])?;
    let w2 = get([0, 1, 0])?;
    let w3 = get([0, 0, 1])?;
    let w12 = get([1, 1, 0])?;
    let w13 = get([1, 0, 1])?;
    let w23 = get([0, 1, 1])?;
    let w123 = get([1, 1, 1])?;
    let w1s2 = get([2, 1, 0])?;
    let w1s3 = get([2, 0, 1])?;
    let w1s23 = get([2, 1, 1])?;
    let v = (w12 - w1 * w2).max(0.0);

    let t2 = (w1 + 3.0 * w1 * w1 - w1s).abs();
    let t4 = (w1.powi(3) + 3.0 * w1 * w12 - w123 - 3.0 * w1 * w1 * w2).abs();
    let t6 = (4.0 * w1s23 - 8.0 * w12 * w13 - w1s3 * w2 - 2.0 * w1s * w23 - w1s2 * w3
        + 2.0 * w1s * w2 * w3
        + 4.0 * w1
            * (2.0 * w1.powi(3) + 6.0 * w1 * w12 - 2.0 * w123 + w13 * w2 - 6.0 * w1 * w1 * w2
                + w12 * w3))
        .abs();
    let t7 = (-w1s2 + 4.0 * w1 * w12 - 4.0 * w1 * w1 * w2 + w1s * w2).abs();

    Ok(48.0 * v + 96.0 * t2 * v + 96.0 * v * v + 96.0 * w1 * t4 + 48.0 * t4 + 48.0 * t6
        + 48.0 * v.sqrt() * t7)
}

/// Lower bound on Δ³₂,r from the three-beam uncertainty relation
/// Δ³₃ − Δ³₂ + Δ³₁ − 1 ≥ 0 plus the per-pair lower bounds on Δ³₁,r.
fn b3_lower(m: &IntensityMoments) -> Result<f64> {
    let get = getter3(m);
    let d33 = eval_table(a4_table(), &get)?;
    let d32w = eval_table(a2_table(), &get)?;
    let d31w = eval_table(a1_table(), &get)?;
    let mut pair_sum = 0.0;
    for (j, k) in [(0usize, 1usize), (0, 2), (1, 2)] {
        let pg = getter_pair(m, j, k);
        let (lo, _) = pair_residue_bounds(&pg)?;
        pair_sum += lo;
    }
    Ok(-d33 + d32w - d31w + 1.0 + pair_sum)
}

// ---------------------------------------------------------------------------
// Public closed forms
// ---------------------------------------------------------------------------

fn require_beams(m: &IntensityMoments, n: usize, what: &str) -> Result<()> {
    if m.n_beams != n {
        return Err(Error::validation(format!(
            "{what} expects {n}-beam moments, got {} beams",
            m.n_beams
        )));
    }
    Ok(())
}

/// Single-beam QUI `Δ¹₁ = 1 + 4⟨W₁⟩ + 12⟨W₁⟩² − 4⟨W₁²⟩` (exact).
pub fn delta11_from_moments(m: &IntensityMoments) -> Result<f64> {
    require_beams(m, 1, "delta11")?;
    let w1 = m.get([1, 0, 0])?;
    let w1s = m.get([2, 0, 0])?;
    Ok(1.0 + 4.0 * w1 + 12.0 * w1 * w1 - 4.0 * w1s)
}

/// First two-beam QUI: measurable part plus residue bracket.
pub fn delta21_from_moments(m: &IntensityMoments) -> Result<QuiFromMomentsResult> {
    require_beams(m, 2, "delta21")?;
    let get = getter_padded(m);
    let measurable = eval_table(a1_table(), &get)? - 1.0;
    let (lower, upper) = pair_residue_bounds(&get)?;
    Ok(QuiFromMomentsResult {
        k: 1,
        n_beams: 2,
        measurable_part: measurable,
        residue_lower: lower,
        residue_upper: upper,
        exact: false,
    })
}

/// Second two-beam QUI (exact), via the three-beam machinery on beams {1,2}.
pub fn delta22_from_moments(m: &IntensityMoments) -> Result<f64> {
    require_beams(m, 2, "delta22")?;
    eval_table(a4_table(), &getter_padded(m))
}

/// First three-beam QUI: measurable part plus residue bracket (bounds are
/// the sum of per-pair brackets).
pub fn delta31_from_moments(m: &IntensityMoments) -> Result<QuiFromMomentsResult> {
    require_beams(m, 3, "delta31")?;
    let measurable = eval_table(a1_table(), &getter3(m))?;
    let mut lower = 0.0;
    let mut upper = 0.0;
    for (j, k) in [(0usize, 1usize), (0, 2), (1, 2)] {
        let pg = getter_pair(m, j, k);
        let (lo, up) = pair_residue_bounds(&pg)?;
        lower += lo;
        upper += up;
    }
    Ok(QuiFromMomentsResult {
        k: 1,
        n_beams: 3,
        measurable_part: measurable,
        residue_lower: lower,
        residue_upper: upper,
        exact: false,
    })
}

/// Second three-beam QUI: measurable part plus residue bracket (upper from
/// the Appendix-B triangle bound, lower from the uncertainty-relation route
/// combined with `−upper`).
pub fn delta32_from_moments(m: &IntensityMoments) -> Result<QuiFromMomentsResult> {
    require_beams(m, 3, "delta32")?;
    let measurable = eval_table(a2_table(), &getter3(m))?;
    let upper = b2_upper(&getter_symmetrized(m))?;
    let lower = match b3_lower(m) {
        Ok(s) => s.max(-upper),
        Err(Error::MissingMoment { .. }) => -upper,
        Err(e) => return Err(e),
    };
    Ok(QuiFromMomentsResult {
        k: 2,
        n_beams: 3,
        measurable_part: measurable,
        residue_lower: lower,
        residue_upper: upper,
        exact: false,
    })
}

/// Third three-beam QUI (exact, no residue).
pub fn delta33_from_moments(m: &IntensityMoments) -> Result<f64> {
    require_beams(m, 3, "delta33")?;
    eval_table(a4_table(), &getter3(m))
}

/// Residue bounds for Δ³₂,r of a (nominally) symmetric three-beam state.
/// Checks approximate beam-exchange symmetry; asymmetry above 1% warns, or
/// fails hard in strict mode.
pub fn residue_bounds_symmetric(m: &IntensityMoments, strict: bool) -> Result<(f64, f64)> {
    require_beams(m, 3, "residue_bounds_symmetric")?;
    let mut worst: f64 = 0.0;
    let mut worst_idx = [0u8; 3];
    for (idx, _) in m.iter() {
        let orbit: Vec<f64> = ALL_PERMS
            .iter()
            .map(|p| m.get(permute_key(*idx, p)))
            .collect::<Result<_>>()?;
        let max = orbit.iter().cloned().fold(f64::MIN, f64::max);
        let min = orbit.iter().cloned().fold(f64::MAX, f64::min);
        let mean: f64 = orbit.iter().sum::<f64>() / orbit.len() as f64;
        let spread = (max - min) / mean.abs().max(1e-12);
        if spread > worst {
            worst = spread;
            worst_idx = *idx;
        }
    }
    if worst > 0.01 {
        let msg = format!(
            "moments asymmetric under beam exchange: {:.2}% spread at index {:?}",
            100.0 * worst,
            worst_idx
        );
        if strict {
            return Err(Error::validation(msg));
        }
        log::warn!("{msg}");
    }
    let upper = b2_upper(&getter_symmetrized(m))?;
    let lower = match b3_lower(m) {
        Ok(s) => s.max(-upper),
        Err(Error::MissingMoment { .. }) => -upper,
        Err(e) => return Err(e),
    };
    Ok((lower, upper))
}

// ---------------------------------------------------------------------------
// Exact symbolic forms (used by the validation tests and qui_derive checks)
// ---------------------------------------------------------------------------

/// The measurable part as an exact polynomial in the Gaussian parameters.
#[cfg(test)]
fn formula_poly(f: &PrintedFormula) -> Result<Poly> {
    let mut acc = Poly::zero();
    for (factors, coeff) in expand_exact(f) {
        let mut prod = Poly::constant(rat(1, 1));
        for key in &factors {
            prod = prod.mul(expand_moment_symbolic(key)?.as_ref());
        }
        acc.add_assign_scaled(&prod, &coeff);
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gauss::{build_covariance, qui_from_covariance};
    use crate::moments::{moments_from_params, IntensityMoments, Provenance};
    use crate::sample::{random_physical_state, random_symmetric_state};
    use crate::symbolic::minors::expand_qui_symbolic;
    use num_complex::Complex64;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn assert_poly_eq(lhs: &Poly, rhs: &Poly, what: &str) {
        let diff = lhs.sub(rhs);
        if !diff.is_zero() {
            panic!("{what}: polynomial mismatch, difference = {diff:?}");
        }
    }

    #[test]
    fn delta11_matches_minor_expansion() {
        // 1 + 4⟨W₁⟩ + 12⟨W₁⟩² − 4⟨W₁²⟩ with the repaired +4 sign.
        let w1 = expand_moment_symbolic(&[1, 0, 0]).unwrap();
        let w1s = expand_moment_symbolic(&[2, 0, 0]).unwrap();
        let mut lhs = Poly::from_i64(1);
        lhs.add_assign_scaled(&w1, &rat(4, 1));
        lhs.add_assign_scaled(&w1.mul(&w1), &rat(12, 1));
        lhs.add_assign_scaled(&w1s, &rat(-4, 1));
        assert_poly_eq(&lhs, &expand_qui_symbolic(1, 1).unwrap(), "Δ¹₁");
    }

    #[test]
    fn a1_minus_residue_is_delta31() {
        let lhs = formula_poly(&A1_MEAS).unwrap().sub(&r31_poly());
        assert_poly_eq(&lhs, &expand_qui_symbolic(3, 1).unwrap(), "Δ³₁");
    }

    #[test]
    fn a2_minus_residue_is_delta32() {
        let lhs = formula_poly(&A2_MEAS).unwrap().sub(&r32_poly());
        assert_poly_eq(&lhs, &expand_qui_symbolic(3, 2).unwrap(), "Δ³₂");
    }

    #[test]
    fn a4_is_delta33_exactly() {
        let lhs = formula_poly(&A4_FULL).unwrap();
        assert_poly_eq(&lhs, &expand_qui_symbolic(3, 3).unwrap(), "Δ³₃");
    }

    #[test]
    fn derive_residue_matches_r21() {
        let derived = crate::symbolic::derive::derive(2, 1).unwrap();
        assert_poly_eq(&derived.residue, &r21_poly(), "Δ²₁ residue vs derivation");
    }

    fn moments_of(p: &GaussianStateParams, order: u32) -> IntensityMoments {
        moments_from_params(p, order).unwrap()
    }

    #[test]
    fn vacuum_trivials() {
        let v1 = moments_of(&GaussianStateParams::vacuum(1).unwrap(), 2);
        assert_eq!(delta11_from_moments(&v1).unwrap(), 1.0);

        let v2 = moments_of(&GaussianStateParams::vacuum(2).unwrap(), 4);
        let r = delta21_from_moments(&v2).unwrap();
        assert_eq!(r.measurable_part, 2.0);
        assert_eq!((r.residue_lower, r.residue_upper), (0.0, 0.0));
        assert_eq!(delta22_from_moments(&v2).unwrap(), 1.0);

        let v3 = moments_of(&GaussianStateParams::vacuum(3).unwrap(), 6);
        assert_eq!(delta31_from_moments(&v3).unwrap().measurable_part, 3.0);
        let r32 = delta32_from_moments(&v3).unwrap();
        assert_eq!(r32.measurable_part, 3.0);
        assert_eq!((r32.residue_lower, r32.residue_upper), (0.0, 0.0));
        assert_eq!(delta33_from_moments(&v3).unwrap(), 1.0);
        assert_eq!(residue_bounds_symmetric(&v3, true).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn published_examples() {
        // Thermal b = 0.5: ⟨W⟩ = 0.5, ⟨W²⟩ = 0.5 → Δ¹₁ = 4 = (1+2b)².
        let mut m = IntensityMoments::new(1, 2, Provenance::Measured);
        m.set([1, 0, 0], 0.5);
        m.set([2, 0, 0], 0.5);
        assert!((delta11_from_moments(&m).unwrap() - 4.0).abs() < 1e-12);

        // Squeezed thermal B=1, C=0.5: ⟨W⟩ = 1, ⟨W²⟩ = 2B²+|C|² = 2.25 → 8.
        let mut m = IntensityMoments::new(1, 2, Provenance::Measured);
        m.set([1, 0, 0], 1.0);
        m.set([2, 0, 0], 2.25);
        assert!((delta11_from_moments(&m).unwrap() - 8.0).abs() < 1e-12);

        // Pure pair state D₁₂ = 0.3: residue_upper = 8·0.09 = 0.72.
        let mut p = GaussianStateParams::vacuum(2).unwrap();
        p.set_d(0, 1, Complex64::new(0.3, 0.0));
        let m = moments_of(&p, 4);
        let r = delta21_from_moments(&m).unwrap();
        assert!((r.residue_upper - 0.72).abs() < 1e-12);

        // Three independent thermals b = 0.5 → Δ³₃ = ((1+2b)²)³ = 64.
        let mut p = GaussianStateParams::vacuum(3).unwrap();
        for j in 0..3 {
            p.set_b(j, 0.5);
        }
        let m = moments_of(&p, 6);
        assert!((delta33_from_moments(&m).unwrap() - 64.0).abs() < 1e-9);
    }

    #[test]
    fn master_oracle_small() {
        // Measurable − residue(params) vs principal minors (light version of
        // the acceptance run).
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..200 {
            let p1 = random_physical_state(1, &mut rng).unwrap();
            let m1 = moments_of(&p1, 2);
            let cm1 = build_covariance(&p1).unwrap();
            let d11 = delta11_from_moments(&m1).unwrap();
            let oracle = qui_from_covariance(&cm1, 1).unwrap();
            assert!((d11 - oracle).abs() <= 1e-9 * oracle.abs().max(1.0));

            let p2 = random_physical_state(2, &mut rng).unwrap();
            let m2 = moments_of(&p2, 4);
            let cm2 = build_covariance(&p2).unwrap();
            let r21 = delta21_from_moments(&m2).unwrap();
            let o21 = qui_from_covariance(&cm2, 1).unwrap();
            let v21 = r21.measurable_part - residue21_from_params(&p2);
            assert!((v21 - o21).abs() <= 1e-9 * o21.abs().max(1.0));
            let d22 = delta22_from_moments(&m2).unwrap();
            let o22 = qui_from_covariance(&cm2, 2).unwrap();
            assert!((d22 - o22).abs() <= 1e-9 * o22.abs().max(1.0));

            let p3 = random_physical_state(3, &mut rng).unwrap();
            let m3 = moments_of(&p3, 6);
            let cm3 = build_covariance(&p3).unwrap();
            let r31 = delta31_from_moments(&m3).unwrap();
            let o31 = qui_from_covariance(&cm3, 1).unwrap();
            assert!(
                (r31.measurable_part - residue31_from_params(&p3) - o31).abs()
                    <= 1e-9 * o31.abs().max(1.0)
            );
            let r32 = delta32_from_moments(&m3).unwrap();
            let o32 = qui_from_covariance(&cm3, 2).unwrap();
            assert!(
                (r32.measurable_part - residue32_from_params(&p3) - o32).abs()
                    <= 1e-9 * o32.abs().max(1.0)
            );
            let d33 = delta33_from_moments(&m3).unwrap();
            let o33 = qui_from_covariance(&cm3, 3).unwrap();
            assert!((d33 - o33).abs() <= 1e-8 * o33.abs().max(1.0));
        }
    }

    #[test]
    fn residue_sandwich_two_beam() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..300 {
            let p = random_physical_state(2, &mut rng).unwrap();
            let m = moments_of(&p, 4);
            let r = delta21_from_moments(&m).unwrap();
            let true_res = residue21_from_params(&p);
            assert!(
                r.residue_lower - 1e-9 <= true_res && true_res <= r.residue_upper + 1e-9,
                "{true_res} outside [{}, {}]",
                r.residue_lower,
                r.residue_upper
            );
        }
    }

    #[test]
    fn residue_sandwich_three_beam_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..300 {
            let p = random_symmetric_state(&mut rng).unwrap();
            let m = moments_of(&p, 6);
            let r31 = delta31_from_moments(&m).unwrap();
            let t31 = residue31_from_params(&p);
            assert!(
                r31.residue_lower - 1e-9 <= t31 && t31 <= r31.residue_upper + 1e-9,
                "Δ³₁,r = {t31} outside [{}, {}]",
                r31.residue_lower,
                r31.residue_upper
            );
            let (lo, up) = residue_bounds_symmetric(&m, true).unwrap();
            let t32 = residue32_from_params(&p);
            assert!(
                lo - 1e-9 <= t32 && t32 <= up + 1e-9,
                "Δ³₂,r = {t32} outside [{lo}, {up}]"
            );
            assert!(lo <= up + 1e-12);
        }
    }

    #[test]
    fn zero_dbar_residue_saturates_upper_bound() {
        // Noisy twin beams (D̄ ≡ 0): the Δ²₁ residue equals its upper bound.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let mut p = random_physical_state(2, &mut rng).unwrap();
            p.set_d_bar(0, 1, Complex64::new(0.0, 0.0));
            let m = moments_of(&p, 4);
            let r = delta21_from_moments(&m).unwrap();
            let true_res = residue21_from_params(&p);
            assert!(
                (true_res - r.residue_upper).abs() < 1e-10,
                "{true_res} vs upper {}",
                r.residue_upper
            );
        }
    }

    #[test]
    fn symmetric_residue_closed_form_matches_general() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..200 {
            let p = random_symmetric_state(&mut rng).unwrap();
            let general = residue32_from_params(&p);
            let symmetric = residue32_symmetric_from_params(&p);
            assert!(
                (general - symmetric).abs() <= 1e-9 * general.abs().max(1.0),
                "{general} vs {symmetric}"
            );
        }
    }

    #[test]
    fn missing_moments_error() {
        let p = GaussianStateParams::vacuum(3).unwrap();
        let m = moments_of(&p, 4); // order 6 missing
        assert!(matches!(
            delta33_from_moments(&m),
            Err(Error::MissingMoment { .. })
        ));
    }

    #[test]
    fn asymmetry_strict_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let p = random_symmetric_state(&mut rng).unwrap();
        let mut m = moments_of(&p, 6);
        let w1 = m.get([1, 0, 0]).unwrap();
        m.set([1, 0, 0], w1 * 1.05);
        assert!(residue_bounds_symmetric(&m, true).is_err());
        // Non-strict mode warns but still produces ordered bounds.
        let (lo, up) = residue_bounds_symmetric(&m, false).unwrap();
        assert!(lo <= up);
    }

    #[test]
    fn deterministic_term_order() {
        // The expanded tables are sorted by term id, so repeated evaluation
        // is bit-identical.
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let p = random_physical_state(3, &mut rng).unwrap();
        let m = moments_of(&p, 6);
        let a = delta33_from_moments(&m).unwrap();
        let b = delta33_from_moments(&m).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }
}
