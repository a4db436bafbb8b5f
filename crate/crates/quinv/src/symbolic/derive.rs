//! The generic four-step derivation: expand a QUI and all intensity-moment
//! products as exact polynomials in the Gaussian parameters, solve the
//! linear system for combination coefficients, and extract the residue that
//! no moment combination can reach.
//!
//! The moment-product ansatz (all products with total order ≤ 2k) is highly
//! degenerate, so the solver works with a deterministic reduced-echelon
//! elimination: columns in canonical order, free variables set to zero.
//! Because every QUI is symmetric under beam exchange, columns are grouped
//! into symmetry orbits first — this shrinks the (3,3) system by ~6× with
//! no loss of generality (averaging any solution over the group gives an
//! orbit-constant one).
//!
//! Inconsistent rows (parameter monomials no combination can reach) are
//! moved wholesale to the residue: every column touching them is discarded
//! and the remainder re-solved, until the system closes.  The residue is
//! reported in the convention `Δ = Δ_w − Δ_r`, i.e.
//! `target == combination − residue`.

use std::collections::{BTreeMap, BTreeSet};

use num_rational::BigRational;
use num_traits::{One, Zero};

use super::minors::expand_qui_symbolic;
use super::wick::{expand_moment_symbolic, key_order, MomentKey};
use super::{beam_permutations, Mono, Poly};
use crate::{Error, Result};

/// Outcome of a `(N,k)` derivation.
#[derive(Debug, Clone)]
pub struct DerivationResult {
    pub n_beams: usize,
    pub k: usize,
    /// Measurable combination: coefficient per moment product (a product is
    /// a sorted multiset of moment indices; the empty product is the
    /// constant term).
    pub coefficients: Vec<(Vec<MomentKey>, BigRational)>,
    /// Residue `Δᴺ_{k,r}` in the paper's sign convention
    /// (`Δᴺ_k = Δᴺ_{k,w} − Δᴺ_{k,r}`), as an exact parameter polynomial.
    pub residue: Poly,
    /// True when the residue is identically zero.
    pub solvable: bool,
}

fn product_total_order(p: &[MomentKey]) -> u32 {
    p.iter().map(key_order).sum()
}

/// All moment indices for `n_beams` with `1 ≤ order ≤ max_order`.
fn moment_keys(n_beams: usize, max_order: u32) -> Vec<MomentKey> {
    let mut keys = Vec::new();
    let lim = max_order as u8;
    for l1 in 0..=lim {
        for l2 in 0..=(if n_beams >= 2 { lim } else { 0 }) {
            for l3 in 0..=(if n_beams >= 3 { lim } else { 0 }) {
                let key = [l1, l2, l3];
                let o = key_order(&key);
                if o >= 1 && o <= max_order {
                    keys.push(key);
                }
            }
        }
    }
    keys.sort_by_key(|k| (key_order(k), *k));
    keys
}

/// All multisets of moment indices with total order ≤ max_total (including
/// the empty product).
fn moment_products(keys: &[MomentKey], max_total: u32) -> Vec<Vec<MomentKey>> {
    let mut out = Vec::new();
    let mut current: Vec<MomentKey> = Vec::new();
    fn rec(
        keys: &[MomentKey],
        start: usize,
        budget: u32,
        current: &mut Vec<MomentKey>,
        out: &mut Vec<Vec<MomentKey>>,
    ) {
        out.push(current.clone());
        for i in start..keys.len() {
            let o = key_order(&keys[i]);
            if o <= budget {
                current.push(keys[i]);
                rec(keys, i, budget - o, current, out);
                current.pop();
            }
        }
    }
    rec(keys, 0, max_total, &mut current, &mut out);
    out.sort_by(|a, b| {
        (product_total_order(a), a.as_slice()).cmp(&(product_total_order(b), b.as_slice()))
    });
    out
}

/// Image of a product under a beam relabeling, re-canonicalized.
fn permute_product(p: &[MomentKey], pos: &[usize; 3]) -> Vec<MomentKey> {
    let mut out: Vec<MomentKey> = p
        .iter()
        .map(|key| {
            let mut img = [0u8; 3];
            for (beam, &l) in key.iter().enumerate() {
                img[pos[beam]] = l;
            }
            img
        })
        .collect();
    out.sort_by_key(|k| (key_order(k), *k));
    out
}

/// A symmetry orbit of moment products.
struct Orbit {
    members: Vec<Vec<MomentKey>>,
}

fn group_orbits(products: Vec<Vec<MomentKey>>, perms: &[[usize; 3]]) -> Vec<Orbit> {
    let mut seen: BTreeSet<Vec<MomentKey>> = BTreeSet::new();
    let mut orbits = Vec::new();
    for p in products {
        if seen.contains(&p) {
            continue;
        }
        let mut members: BTreeSet<Vec<MomentKey>> = BTreeSet::new();
        for perm in perms {
            members.insert(permute_product(&p, perm));
        }
        for m in &members {
            seen.insert(m.clone());
        }
        orbits.push(Orbit {
            members: members.into_iter().collect(),
        });
    }
    orbits
}

fn product_poly(product: &[MomentKey]) -> Result<Poly> {
    let mut acc = Poly::from_i64(1);
    for key in product {
        acc = acc.mul(expand_moment_symbolic(key)?.as_ref());
    }
    Ok(acc)
}

/// One pivot of the running reduced-echelon factorization.
struct PivotCol {
    row: Mono,
    lead: BigRational,
    poly: Poly,
    /// Composition in terms of original orbit indices.
    comp: BTreeMap<usize, BigRational>,
}

fn comp_axpy(
    dst: &mut BTreeMap<usize, BigRational>,
    src: &BTreeMap<usize, BigRational>,
    scale: &BigRational,
) {
    for (idx, c) in src {
        let e = dst.entry(*idx).or_insert_with(BigRational::zero);
        *e += c * scale;
        if e.is_zero() {
            dst.remove(idx);
        }
    }
}

/// Reduces `poly`/`comp` against the pivots until no pivot row remains.
fn reduce_against(
    pivots: &[PivotCol],
    poly: &mut Poly,
    comp: &mut BTreeMap<usize, BigRational>,
) {
    loop {
        let mut hit = None;
        for (i, p) in pivots.iter().enumerate() {
            if poly.terms.contains_key(&p.row) {
                hit = Some(i);
                break;
            }
        }
        let Some(i) = hit else { break };
        let p = &pivots[i];
        let factor = &poly.terms[&p.row] / &p.lead;
        poly.add_assign_scaled(&p.poly, &-factor.clone());
        comp_axpy(comp, &p.comp, &-factor);
    }
}

/// Solves the orbit-column system for the target; returns per-orbit
/// coefficients and the unreachable remainder (target − combination).
fn solve_once(
    orbit_polys: &[(usize, Poly)],
    target: &Poly,
) -> (BTreeMap<usize, BigRational>, Poly) {
    let mut pivots: Vec<PivotCol> = Vec::new();
    for (orbit_idx, poly) in orbit_polys {
        let mut col = poly.clone();
        let mut comp = BTreeMap::new();
        comp.insert(*orbit_idx, BigRational::one());
        reduce_against(&pivots, &mut col, &mut comp);
        if col.is_zero() {
            continue; // dependent column: free variable fixed at zero
        }
        let row = *col.terms.keys().next().expect("nonzero column");
        let lead = col.terms[&row].clone();
        // Maintain full reduction: clear this row from existing pivots.
        for p in pivots.iter_mut() {
            if let Some(c) = p.poly.terms.get(&row).cloned() {
                let factor = c / lead.clone();
                p.poly.add_assign_scaled(&col, &-factor.clone());
                comp_axpy(&mut p.comp, &comp, &-factor);
            }
        }
        pivots.push(PivotCol {
            row,
            lead,
            poly: col,
            comp,
        });
    }
    let mut t = target.clone();
    let mut x: BTreeMap<usize, BigRational> = BTreeMap::new();
    loop {
        let mut hit = None;
        for p in &pivots {
            if t.terms.contains_key(&p.row) {
                hit = Some(p);
                break;
            }
        }
        let Some(p) = hit else { break };
        let factor = &t.terms[&p.row] / &p.lead;
        t.add_assign_scaled(&p.poly, &-factor.clone());
        comp_axpy(&mut x, &p.comp, &factor);
    }
    (x, t)
}

/// Runs the §III derivation for the QUI `Δᴺ_k`.
pub fn derive(n_beams: usize, k: usize) -> Result<DerivationResult> {
    if n_beams > 3 {
        return Err(Error::validation(
            "derivations are supported for n_beams ≤ 3".to_string(),
        ));
    }
    let target = expand_qui_symbolic(n_beams, k)?;
    let perms = beam_permutations(n_beams);
    debug_assert!(target.is_symmetric(&perms));

    let keys = moment_keys(n_beams, 2 * k as u32);
    let products = moment_products(&keys, 2 * k as u32);
    let orbits = group_orbits(products, &perms);
    let orbit_polys_full: Vec<Poly> = orbits
        .iter()
        .map(|o| {
            let mut acc = Poly::zero();
            for m in &o.members {
                acc = acc.add(&product_poly(m)?);
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;

    // Residue extraction loop: rows nobody can reach are frozen into the
    // residue set R, and every column whose (unreduced) polynomial touches R
    // is discarded before re-solving.
    let mut frozen: BTreeSet<Mono> = BTreeSet::new();
    let (x, remainder) = loop {
        let active: Vec<(usize, Poly)> = orbit_polys_full
            .iter()
            .enumerate()
            .filter(|(_, p)| p.terms.keys().all(|m| !frozen.contains(m)))
            .map(|(i, p)| (i, p.clone()))
            .collect();
        let (x, rem) = solve_once(&active, &target);
        let new_rows: Vec<Mono> = rem
            .terms
            .keys()
            .filter(|m| !frozen.contains(m))
            .cloned()
            .collect();
        if new_rows.is_empty() {
            break (x, rem);
        }
        frozen.extend(new_rows);
    };

    // Exact identity check: target == Σ x·orbit_poly + remainder.
    let mut check = remainder.clone();
    for (idx, c) in &x {
        check.add_assign_scaled(&orbit_polys_full[*idx], c);
    }
    if check != target {
        return Err(Error::numerical(format!(
            "derivation identity check failed for ({n_beams},{k})"
        )));
    }

    let mut coefficients = Vec::new();
    for (idx, c) in &x {
        if c.is_zero() {
            continue;
        }
        for member in &orbits[*idx].members {
            coefficients.push((member.clone(), c.clone()));
        }
    }
    coefficients.sort_by(|a, b| {
        (product_total_order(&a.0), a.0.as_slice()).cmp(&(product_total_order(&b.0), b.0.as_slice()))
    });

    let residue = remainder.neg();
    let solvable = residue.is_zero();
    Ok(DerivationResult {
        n_beams,
        k,
        coefficients,
        residue,
        solvable,
    })
}

impl DerivationResult {
    /// Evaluates the measurable combination given a moment lookup.
    pub fn eval_measurable(&self, moment: &dyn Fn(MomentKey) -> f64) -> f64 {
        self.coefficients
            .iter()
            .map(|(product, c)| {
                let p: f64 = product.iter().map(|&key| moment(key)).product();
                super::rational_to_f64(c) * p
            })
            .sum()
    }

    /// Deterministic content hash of the emitted table (FNV-1a over the
    /// canonical rendering).
    pub fn provenance_hash(&self) -> String {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        eat(format!("{}:{}", self.n_beams, self.k).as_bytes());
        for (product, c) in &self.coefficients {
            eat(format!("{product:?}={c}").as_bytes());
        }
        eat(format!("{:?}", self.residue).as_bytes());
        format!("{h:016x}")
    }
}

fn rational_pair(c: &BigRational) -> Result<(i64, i64)> {
    use num_traits::ToPrimitive;
    match (c.numer().to_i64(), c.denom().to_i64()) {
        (Some(n), Some(d)) => Ok((n, d)),
        _ => Err(Error::numerical(format!(
            "coefficient {c} does not fit the term-table integer range"
        ))),
    }
}

/// Machine-readable term table (measurable + residue sections).
pub fn emit_term_table(result: &DerivationResult) -> Result<serde_json::Value> {
    let mut measurable = Vec::new();
    for (product, c) in &result.coefficients {
        let (num, den) = rational_pair(c)?;
        measurable.push(serde_json::json!({
            "coefficient": [num, den],
            "factors": product.iter().map(|k| vec![k[0], k[1], k[2]]).collect::<Vec<_>>(),
        }));
    }
    let mut residue = Vec::new();
    for (mono, c) in &result.residue.terms {
        let (num, den) = rational_pair(c)?;
        let monomial: Vec<serde_json::Value> = (0..super::N_SYMBOLS as u8)
            .filter(|&i| mono.0[i as usize] > 0)
            .map(|i| serde_json::json!([super::symbol_name(i), mono.0[i as usize]]))
            .collect();
        residue.push(serde_json::json!({
            "coefficient": [num, den],
            "monomial": monomial,
        }));
    }
    Ok(serde_json::json!({
        "target": {"n_beams": result.n_beams, "k": result.k},
        "convention": "target = measurable - residue",
        "solvable": result.solvable,
        "measurable": measurable,
        "residue": residue,
        "provenance_hash": result.provenance_hash(),
    }))
}
