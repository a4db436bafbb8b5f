//! Exact-rational symbolic engine over the Gaussian-state parameter symbols.
//!
//! The ring has 21 fixed real symbols (enough for three beams):
//! `B_j`, `ReC_j`, `ImC_j` per beam and `ReD_jk`, `ImD_jk`, `ReD̄_jk`,
//! `ImD̄_jk` per unordered pair.  Everything downstream — the symbolic Wick
//! expansion of intensity moments, the symbolic principal minors of `ΩA`,
//! and the linear-system derivation of measurable QUI forms — works in this
//! ring with `BigRational` coefficients, so every identity is checked
//! exactly rather than numerically.

pub mod derive;
pub mod minors;
pub mod wick;

use std::collections::BTreeMap;
use std::fmt;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, Zero};

use crate::gauss::GaussianStateParams;

/// Number of real parameter symbols (3 beams, 3 pairs).
pub const N_SYMBOLS: usize = 21;

/// Pair slot for 0-based beams `j < k` among 3 beams: (0,1)→0, (0,2)→1, (1,2)→2.
pub fn pair_slot3(j: usize, k: usize) -> usize {
    debug_assert!(j < k && k < 3);
    j + k - 1
}

/// Symbol ids, grouped by kind.
pub mod sym {
    use super::pair_slot3;

    pub fn b(j: usize) -> u8 {
        j as u8
    }
    pub fn c_re(j: usize) -> u8 {
        3 + j as u8
    }
    pub fn c_im(j: usize) -> u8 {
        6 + j as u8
    }
    pub fn d_re(j: usize, k: usize) -> u8 {
        9 + pair_slot3(j, k) as u8
    }
    pub fn d_im(j: usize, k: usize) -> u8 {
        12 + pair_slot3(j, k) as u8
    }
    pub fn dbar_re(j: usize, k: usize) -> u8 {
        15 + pair_slot3(j, k) as u8
    }
    pub fn dbar_im(j: usize, k: usize) -> u8 {
        18 + pair_slot3(j, k) as u8
    }
}

/// Human-readable symbol name (1-based beam labels, e.g. `ReD12`).
pub fn symbol_name(id: u8) -> String {
    let pair_label = |slot: u8| -> String {
        match slot {
            0 => "12".into(),
            1 => "13".into(),
            _ => "23".into(),
        }
    };
    match id {
        0..=2 => format!("B{}", id + 1),
        3..=5 => format!("ReC{}", id - 2),
        6..=8 => format!("ImC{}", id - 5),
        9..=11 => format!("ReD{}", pair_label(id - 9)),
        12..=14 => format!("ImD{}", pair_label(id - 12)),
        15..=17 => format!("ReDbar{}", pair_label(id - 15)),
        _ => format!("ImDbar{}", pair_label(id - 18)),
    }
}

/// Numeric values of all symbols for a parameter set (unused slots zero).
pub fn symbol_values(params: &GaussianStateParams) -> [f64; N_SYMBOLS] {
    let mut v = [0.0; N_SYMBOLS];
    let n = params.n_beams();
    for j in 0..n {
        v[sym::b(j) as usize] = params.b(j);
        v[sym::c_re(j) as usize] = params.c(j).re;
        v[sym::c_im(j) as usize] = params.c(j).im;
    }
    for j in 0..n {
        for k in (j + 1)..n {
            let d = params.d(j, k);
            let e = params.d_bar(j, k);
            v[sym::d_re(j, k) as usize] = d.re;
            v[sym::d_im(j, k) as usize] = d.im;
            v[sym::dbar_re(j, k) as usize] = e.re;
            v[sym::dbar_im(j, k) as usize] = e.im;
        }
    }
    v
}

/// A monomial: exponent per symbol.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Mono(pub [u8; N_SYMBOLS]);

impl Mono {
    pub fn one() -> Self {
        Mono([0; N_SYMBOLS])
    }

    pub fn symbol(id: u8) -> Self {
        let mut m = Self::one();
        m.0[id as usize] = 1;
        m
    }

    pub fn degree(&self) -> u32 {
        self.0.iter().map(|&e| e as u32).sum()
    }

    pub fn mul(&self, other: &Mono) -> Mono {
        let mut out = *self;
        for i in 0..N_SYMBOLS {
            out.0[i] += other.0[i];
        }
        out
    }

    pub fn eval(&self, vals: &[f64; N_SYMBOLS]) -> f64 {
        let mut acc = 1.0;
        for i in 0..N_SYMBOLS {
            for _ in 0..self.0[i] {
                acc *= vals[i];
            }
        }
        acc
    }

    /// Relabels beams by `perm` (beam `i` of the image carries symbols of
    /// beam `perm⁻¹(i)`; equivalently symbol of beam j maps to beam pos[j]).
    /// Returns the image monomial and a sign: `ImD̄` flips sign when the
    /// ordered pair it refers to is reversed (`D̄_kj = D̄*_jk`).
    pub fn apply_perm(&self, pos: &[usize; 3]) -> (Mono, i8) {
        let mut out = Mono::one();
        let mut sign = 1i8;
        for id in 0..N_SYMBOLS as u8 {
            let e = self.0[id as usize];
            if e == 0 {
                continue;
            }
            let (new_id, flips) = map_symbol(id, pos);
            out.0[new_id as usize] += e;
            if flips && e % 2 == 1 {
                sign = -sign;
            }
        }
        (out, sign)
    }
}

/// Maps one symbol under a beam relabeling; the flag reports whether the
/// symbol picks up a sign flip (only `ImD̄` can).
fn map_symbol(id: u8, pos: &[usize; 3]) -> (u8, bool) {
    let map_pair = |slot: u8| -> (usize, usize, bool) {
        let (j, k) = match slot {
            0 => (0, 1),
            1 => (0, 2),
            _ => (1, 2),
        };
        let (a, b) = (pos[j], pos[k]);
        if a < b {
            (a, b, false)
        } else {
            (b, a, true)
        }
    };
    match id {
        0..=2 => (sym::b(pos[id as usize]), false),
        3..=5 => (sym::c_re(pos[(id - 3) as usize]), false),
        6..=8 => (sym::c_im(pos[(id - 6) as usize]), false),
        9..=11 => {
            let (a, b, _) = map_pair(id - 9);
            (sym::d_re(a, b), false)
        }
        12..=14 => {
            let (a, b, _) = map_pair(id - 12);
            (sym::d_im(a, b), false)
        }
        15..=17 => {
            let (a, b, _) = map_pair(id - 15);
            (sym::dbar_re(a, b), false)
        }
        _ => {
            let (a, b, rev) = map_pair(id - 18);
            (sym::dbar_im(a, b), rev)
        }
    }
}

impl fmt::Debug for Mono {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.degree() == 0 {
            return write!(f, "1");
        }
        let mut first = true;
        for i in 0..N_SYMBOLS {
            if self.0[i] > 0 {
                if !first {
                    write!(f, "·")?;
                }
                first = false;
                write!(f, "{}", symbol_name(i as u8))?;
                if self.0[i] > 1 {
                    write!(f, "^{}", self.0[i])?;
                }
            }
        }
        Ok(())
    }
}

/// Sparse polynomial with exact rational coefficients and a canonical
/// (BTreeMap) monomial order.
#[derive(Clone, PartialEq, Eq, Default)]
pub struct Poly {
    pub terms: BTreeMap<Mono, BigRational>,
}

impl Poly {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn constant(c: BigRational) -> Self {
        let mut p = Self::zero();
        if !c.is_zero() {
            p.terms.insert(Mono::one(), c);
        }
        p
    }

    pub fn from_i64(c: i64) -> Self {
        Self::constant(BigRational::from_integer(BigInt::from(c)))
    }

    pub fn symbol(id: u8) -> Self {
        let mut p = Self::zero();
        p.terms.insert(Mono::symbol(id), BigRational::one());
        p
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn add_term(&mut self, m: Mono, c: BigRational) {
        if c.is_zero() {
            return;
        }
        let entry = self.terms.entry(m).or_insert_with(BigRational::zero);
        *entry += c;
        if entry.is_zero() {
            self.terms.remove(&m);
        }
    }

    pub fn add_assign_scaled(&mut self, other: &Poly, scale: &BigRational) {
        if scale.is_zero() {
            return;
        }
        for (m, c) in &other.terms {
            self.add_term(*m, c * scale);
        }
    }

    pub fn add(&self, other: &Poly) -> Poly {
        let mut out = self.clone();
        out.add_assign_scaled(other, &BigRational::one());
        out
    }

    pub fn sub(&self, other: &Poly) -> Poly {
        let mut out = self.clone();
        out.add_assign_scaled(other, &-BigRational::one());
        out
    }

    pub fn neg(&self) -> Poly {
        let mut out = Poly::zero();
        out.add_assign_scaled(self, &-BigRational::one());
        out
    }

    pub fn mul(&self, other: &Poly) -> Poly {
        let mut out = Poly::zero();
        for (ma, ca) in &self.terms {
            for (mb, cb) in &other.terms {
                out.add_term(ma.mul(mb), ca * cb);
            }
        }
        out
    }

    pub fn scale(&self, s: &BigRational) -> Poly {
        let mut out = Poly::zero();
        out.add_assign_scaled(self, s);
        out
    }

    pub fn degree(&self) -> u32 {
        self.terms.keys().map(Mono::degree).max().unwrap_or(0)
    }

    pub fn eval_f64(&self, vals: &[f64; N_SYMBOLS]) -> f64 {
        self.terms
            .iter()
            .map(|(m, c)| rational_to_f64(c) * m.eval(vals))
            .sum()
    }

    /// Image under a beam relabeling (with the `ImD̄` sign rule).
    pub fn apply_perm(&self, pos: &[usize; 3]) -> Poly {
        let mut out = Poly::zero();
        for (m, c) in &self.terms {
            let (img, sign) = m.apply_perm(pos);
            let coeff = if sign < 0 { -c.clone() } else { c.clone() };
            out.add_term(img, coeff);
        }
        out
    }

    /// True when invariant under every permutation in `perms`.
    pub fn is_symmetric(&self, perms: &[[usize; 3]]) -> bool {
        perms.iter().all(|p| &self.apply_perm(p) == self)
    }
}

impl fmt::Debug for Poly {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_zero() {
            return write!(f, "0");
        }
        let mut first = true;
        for (m, c) in &self.terms {
            if !first {
                write!(f, " + ")?;
            }
            first = false;
            write!(f, "{c}·{m:?}")?;
        }
        Ok(())
    }
}

pub fn rational_to_f64(r: &BigRational) -> f64 {
    // Exact for the small integers produced by Wick counting; falls back to
    // a quotient of approximations for general rationals.
    let num = r.numer();
    let den = r.denom();
    bigint_to_f64(num) / bigint_to_f64(den)
}

fn bigint_to_f64(x: &BigInt) -> f64 {
    // BigInt implements ToPrimitive.
    use num_traits::ToPrimitive;
    x.to_f64().unwrap_or_else(|| {
        if x.is_negative() {
            f64::NEG_INFINITY
        } else {
            f64::INFINITY
        }
    })
}

/// A polynomial compiled to flat f64 terms for fast repeated evaluation.
#[derive(Debug, Clone)]
pub struct CompiledPoly {
    /// (coefficient, [(symbol id, power)…]) per term, in canonical order.
    pub terms: Vec<(f64, Vec<(u8, u8)>)>,
}

impl CompiledPoly {
    pub fn compile(p: &Poly) -> Self {
        let terms = p
            .terms
            .iter()
            .map(|(m, c)| {
                let mono: Vec<(u8, u8)> = (0..N_SYMBOLS as u8)
                    .filter(|&i| m.0[i as usize] > 0)
                    .map(|i| (i, m.0[i as usize]))
                    .collect();
                (rational_to_f64(c), mono)
            })
            .collect();
        CompiledPoly { terms }
    }

    pub fn eval(&self, vals: &[f64; N_SYMBOLS]) -> f64 {
        let mut acc = 0.0;
        for (c, mono) in &self.terms {
            let mut t = *c;
            for &(id, pow) in mono {
                let v = vals[id as usize];
                t *= match pow {
                    1 => v,
                    2 => v * v,
                    3 => v * v * v,
                    _ => v.powi(pow as i32),
                };
            }
            acc += t;
        }
        acc
    }
}

/// All beam permutations relevant for `n_beams` (as position maps over 3
/// slots; unused beams stay fixed).
pub fn beam_permutations(n_beams: usize) -> Vec<[usize; 3]> {
    match n_beams {
        1 => vec![[0, 1, 2]],
        2 => vec![[0, 1, 2], [1, 0, 2]],
        3 => vec![
            [0, 1, 2],
            [0, 2, 1],
            [1, 0, 2],
            [1, 2, 0],
            [2, 0, 1],
            [2, 1, 0],
        ],
        _ => panic!("n_beams {n_beams} unsupported"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mono_ordering_and_mul() {
        let a = Mono::symbol(sym::b(0));
        let b = Mono::symbol(sym::b(1));
        // Exponent-vector lexicographic order: B1 sorts after B2.
        assert!(a > b);
        let ab = a.mul(&b);
        assert_eq!(ab.degree(), 2);
    }

    #[test]
    fn poly_arithmetic() {
        let p = Poly::symbol(sym::b(0)).add(&Poly::from_i64(2));
        let q = p.mul(&p);
        // (B1 + 2)² = B1² + 4B1 + 4.
        let mut vals = [0.0; N_SYMBOLS];
        vals[0] = 3.0;
        assert_eq!(q.eval_f64(&vals), 25.0);
        assert_eq!(q.terms.len(), 3);
    }

    #[test]
    fn imdbar_sign_flip_under_swap() {
        let p = Poly::symbol(sym::dbar_im(0, 1));
        let swapped = p.apply_perm(&[1, 0, 2]);
        assert_eq!(swapped, p.neg());
        let re = Poly::symbol(sym::dbar_re(0, 1));
        assert_eq!(re.apply_perm(&[1, 0, 2]), re);
    }

    #[test]
    fn compiled_matches_exact() {
        let p = Poly::symbol(sym::c_re(1))
            .mul(&Poly::symbol(sym::c_re(1)))
            .add(&Poly::symbol(sym::d_im(0, 2)).scale(&BigRational::from_integer(7.into())));
        let c = CompiledPoly::compile(&p);
        let mut vals = [0.0; N_SYMBOLS];
        vals[sym::c_re(1) as usize] = 1.5;
        vals[sym::d_im(0, 2) as usize] = -0.25;
        assert_eq!(p.eval_f64(&vals), c.eval(&vals));
    }
}
