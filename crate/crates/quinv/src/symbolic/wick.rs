//! Symbolic Wick/Isserlis expansion of normally ordered intensity moments.
//!
//! `⟨W₁^{l₁}⋯W_N^{l_N}⟩` is the Gaussian expectation of a product of
//! `2Σl_j` zero-mean fluctuation operators; by the Isserlis theorem it is a
//! sum over perfect pairings with the pair contractions
//! `⟨Δa_j†Δa_j⟩ = B_j`, `⟨Δa_j²⟩ = C_j`, `⟨Δa_jΔa_k⟩ = D_jk`,
//! `⟨Δa_j†Δa_k⟩ = −D̄_jk`.  The expansion is exact (integer pairing counts)
//! and memoized per moment index.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use num_bigint::BigInt;
use num_rational::BigRational;

use super::{sym, Mono, Poly};
use crate::{Error, Result};

/// Moment index `(l₁,l₂,l₃)`; unused trailing entries are zero.
pub type MomentKey = [u8; 3];

pub fn key_order(key: &MomentKey) -> u32 {
    key.iter().map(|&l| l as u32).sum()
}

/// One summand of a complex-linear contraction value.
#[derive(Clone, Copy)]
struct FactorTerm {
    re: i64,
    im: i64,
    symbol: u8,
}

/// Contraction value of an unordered operator pair, as 1–2 linear terms.
fn contraction(a: (u8, bool), b: (u8, bool)) -> Vec<FactorTerm> {
    let t = |re, im, symbol| FactorTerm { re, im, symbol };
    let ((u, du), (v, dv)) = (a, b);
    if u == v {
        let j = u as usize;
        match (du, dv) {
            (true, false) | (false, true) => vec![t(1, 0, sym::b(j))],
            (false, false) => vec![t(1, 0, sym::c_re(j)), t(0, 1, sym::c_im(j))],
            (true, true) => vec![t(1, 0, sym::c_re(j)), t(0, -1, sym::c_im(j))],
        }
    } else {
        let (j, k) = (u.min(v) as usize, u.max(v) as usize);
        match (du, dv) {
            (false, false) => vec![t(1, 0, sym::d_re(j, k)), t(0, 1, sym::d_im(j, k))],
            (true, true) => vec![t(1, 0, sym::d_re(j, k)), t(0, -1, sym::d_im(j, k))],
            (true, false) | (false, true) => {
                // ⟨Δa_p† Δa_q⟩ = −D̄_pq where p carries the dagger;
                // D̄ is stored for p < q, with D̄_qp = D̄*_pq.
                let p = if du { u } else { v };
                let q = if du { v } else { u };
                let conj = p > q;
                let s = if conj { 1 } else { -1 };
                vec![
                    t(-1, 0, sym::dbar_re(j, k)),
                    t(0, s, sym::dbar_im(j, k)),
                ]
            }
        }
    }
}

fn enumerate_pairings(
    ops: &[(u8, bool)],
    used: &mut [bool],
    coeff: (i64, i64),
    mono: Mono,
    acc: &mut HashMap<Mono, (i64, i64)>,
) {
    let first = match used.iter().position(|&u| !u) {
        Some(i) => i,
        None => {
            let e = acc.entry(mono).or_insert((0, 0));
            e.0 += coeff.0;
            e.1 += coeff.1;
            return;
        }
    };
    used[first] = true;
    for j in (first + 1)..ops.len() {
        if used[j] {
            continue;
        }
        used[j] = true;
        for term in contraction(ops[first], ops[j]) {
            let c = (
                coeff.0 * term.re - coeff.1 * term.im,
                coeff.0 * term.im + coeff.1 * term.re,
            );
            let mut m = mono;
            m.0[term.symbol as usize] += 1;
            enumerate_pairings(ops, used, c, m, acc);
        }
        used[j] = false;
    }
    used[first] = false;
}

fn expand_uncached(key: &MomentKey) -> Result<Poly> {
    let order = key_order(key);
    if order == 0 {
        return Ok(Poly::constant(BigRational::from_integer(BigInt::from(1))));
    }
    if order > 6 {
        return Err(Error::validation(format!(
            "moment order {order} exceeds the supported maximum 6"
        )));
    }
    let mut ops: Vec<(u8, bool)> = Vec::with_capacity(2 * order as usize);
    for (beam, &l) in key.iter().enumerate() {
        for _ in 0..l {
            ops.push((beam as u8, true));
        }
    }
    for (beam, &l) in key.iter().enumerate() {
        for _ in 0..l {
            ops.push((beam as u8, false));
        }
    }
    let mut acc = HashMap::new();
    let mut used = vec![false; ops.len()];
    enumerate_pairings(&ops, &mut used, (1, 0), Mono::one(), &mut acc);
    let mut poly = Poly::zero();
    for (mono, (re, im)) in acc {
        if im != 0 {
            return Err(Error::numerical(format!(
                "Wick expansion of {key:?} produced an imaginary component {im} on {mono:?}"
            )));
        }
        poly.add_term(mono, BigRational::from_integer(BigInt::from(re)));
    }
    Ok(poly)
}

/// Exact symbolic intensity moment `⟨W₁^{l₁}W₂^{l₂}W₃^{l₃}⟩` as a polynomial
/// in the Gaussian parameters; memoized.
pub fn expand_moment_symbolic(key: &MomentKey) -> Result<Arc<Poly>> {
    static CACHE: OnceLock<Mutex<HashMap<MomentKey, Arc<Poly>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(p) = cache.lock().expect("wick cache lock").get(key) {
        return Ok(p.clone());
    }
    let poly = Arc::new(expand_uncached(key)?);
    cache
        .lock()
        .expect("wick cache lock")
        .insert(*key, poly.clone());
    Ok(poly)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::symbolic::{symbol_values, N_SYMBOLS};
    use num_traits::ToPrimitive;

    fn coeff(p: &Poly, mono: Mono) -> f64 {
        p.terms
            .get(&mono)
            .map(|c| c.to_f64().unwrap())
            .unwrap_or(0.0)
    }

    #[test]
    fn first_order_is_b() {
        let p = expand_moment_symbolic(&[1, 0, 0]).unwrap();
        assert_eq!(p.terms.len(), 1);
        assert_eq!(coeff(&p, Mono::symbol(sym::b(0))), 1.0);
    }

    #[test]
    fn second_order_single_beam() {
        // ⟨W₁²⟩ = 2B₁² + ReC₁² + ImC₁².
        let p = expand_moment_symbolic(&[2, 0, 0]).unwrap();
        let b2 = Mono::symbol(sym::b(0)).mul(&Mono::symbol(sym::b(0)));
        let cr2 = Mono::symbol(sym::c_re(0)).mul(&Mono::symbol(sym::c_re(0)));
        let ci2 = Mono::symbol(sym::c_im(0)).mul(&Mono::symbol(sym::c_im(0)));
        assert_eq!(coeff(&p, b2), 2.0);
        assert_eq!(coeff(&p, cr2), 1.0);
        assert_eq!(coeff(&p, ci2), 1.0);
        assert_eq!(p.terms.len(), 3);
    }

    #[test]
    fn cross_second_order() {
        // ⟨W₁W₂⟩ = B₁B₂ + |D₁₂|² + |D̄₁₂|².
        let p = expand_moment_symbolic(&[1, 1, 0]).unwrap();
        let bb = Mono::symbol(sym::b(0)).mul(&Mono::symbol(sym::b(1)));
        let dr2 = Mono::symbol(sym::d_re(0, 1)).mul(&Mono::symbol(sym::d_re(0, 1)));
        let er2 = Mono::symbol(sym::dbar_re(0, 1)).mul(&Mono::symbol(sym::dbar_re(0, 1)));
        assert_eq!(coeff(&p, bb), 1.0);
        assert_eq!(coeff(&p, dr2), 1.0);
        assert_eq!(coeff(&p, er2), 1.0);
        assert_eq!(p.terms.len(), 5);
    }

    #[test]
    fn order_six_expands() {
        let p = expand_moment_symbolic(&[2, 2, 2]).unwrap();
        assert!(p.degree() == 6);
        // Spot numeric check at a random-ish point against nothing blowing up.
        let params = {
            use num_complex::Complex64;
            let mut q = crate::gauss::GaussianStateParams::vacuum(3).unwrap();
            q.set_b(0, 0.3);
            q.set_b(1, 0.2);
            q.set_b(2, 0.1);
            q.set_c(0, Complex64::new(0.05, -0.02));
            q.set_d(0, 1, Complex64::new(0.04, 0.01));
            q.set_d_bar(1, 2, Complex64::new(0.02, 0.03));
            q
        };
        let vals: [f64; N_SYMBOLS] = symbol_values(&params);
        assert!(p.eval_f64(&vals).is_finite());
    }

    #[test]
    fn order_guard() {
        assert!(expand_moment_symbolic(&[4, 3, 0]).is_err());
    }
}
