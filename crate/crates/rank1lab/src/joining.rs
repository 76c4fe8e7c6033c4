//! Self-joinings evaluated on products of tower-measurable sets, plus the
//! column and fat-diagonal combinatorics used by every search.
//!
//! Two evaluation routes coexist deliberately. `eval_joining` resolves
//! translates through deeper stages and returns certified intervals; the
//! counting evaluations (`conditional_offdiagonal`, `counting_offdiagonal`)
//! work purely combinatorially inside one stage. Their agreement on column
//! cells is a cross-check, not an accident, and the test suites exercise it.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coloring::ColoringFactor;
use crate::error::{Error, Result};
use crate::level_set::LevelSet;
use crate::rational::{Interval, Rational};
use crate::schedule::ScheduleKind;
use crate::tower::Construction;

/// A displacement of the acting group: integer steps for Z and Z^n, a real
/// (rational, admissibility-checked) time for flows.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Displacement {
    Steps(Vec<i64>),
    Time(Rational),
}

impl Displacement {
    pub fn zero(dim: usize, kind: ScheduleKind) -> Self {
        match kind {
            ScheduleKind::Flow => Displacement::Time(Rational::zero()),
            _ => Displacement::Steps(vec![0; dim]),
        }
    }

    pub fn neg(&self) -> Self {
        match self {
            Displacement::Steps(v) => Displacement::Steps(v.iter().map(|x| -x).collect()),
            Displacement::Time(t) => Displacement::Time(-t.clone()),
        }
    }

    /// Steps of the stage-w grid realizing this displacement, if integral.
    pub fn steps_at(&self, con: &Construction, w: usize) -> Option<Vec<i128>> {
        match self {
            Displacement::Steps(v) => {
                if v.len() == con.dim() {
                    Some(v.iter().map(|&x| x as i128).collect())
                } else {
                    None
                }
            }
            Displacement::Time(t) => {
                let ratio = t / con.step(w);
                ratio.to_i128_exact().map(|k| vec![k])
            }
        }
    }

    pub fn describe(&self) -> String {
        match self {
            Displacement::Steps(v) if v.len() == 1 => format!("{}", v[0]),
            Displacement::Steps(v) => format!(
                "({})",
                v.iter()
                    .map(|x| x.to_string())
                    .collect::<Vec<_>>()
                    .join(",")
            ),
            Displacement::Time(t) => t.to_string(),
        }
    }
}

/// A self-joining named by its construction.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum JoiningSpec {
    /// The off-diagonal joining: value on A x B is the measure of the
    /// intersection of A with the displaced B.
    OffDiagonal(Displacement),
    /// Graph of the commuting map given by a displacement; alias of the
    /// off-diagonal with opposite orientation.
    GraphOfAction(Displacement),
    Product,
    /// Relatively independent joining above a coloring factor.
    RelIndep(ColoringFactor),
}

impl JoiningSpec {
    pub fn describe(&self) -> String {
        match self {
            JoiningSpec::OffDiagonal(d) => format!("offdiagonal({})", d.describe()),
            JoiningSpec::GraphOfAction(d) => format!("graph({})", d.describe()),
            JoiningSpec::Product => "product".into(),
            JoiningSpec::RelIndep(c) => format!(
                "relindep(stage {}, {} colors)",
                c.reference_stage,
                c.n_colors()
            ),
        }
    }

    /// Pre-validate anything the evaluations depend on.
    pub fn validate(&self, con: &Construction, horizon: usize) -> Result<()> {
        if let JoiningSpec::RelIndep(col) = self {
            col.validate(con, horizon)?;
        }
        Ok(())
    }
}

/// Smallest stage >= `start` where the displacement is an in-range integer
/// number of grid steps.
fn working_stage(
    con: &Construction,
    t: &Displacement,
    start: usize,
    max_stage: usize,
) -> Result<(usize, Vec<i128>)> {
    let mut w = start;
    while w <= max_stage {
        con.check_stage(w)?;
        if let Some(steps) = t.steps_at(con, w) {
            let hw = con.heights(w);
            if steps
                .iter()
                .zip(hw)
                .all(|(s, &h)| s.unsigned_abs() < h as u128)
            {
                return Ok((w, steps));
            }
        }
        w += 1;
    }
    Err(Error::InadmissibleTime {
        time: t.describe(),
        max_stage,
    })
}

/// Certified value of mu(A intersect T_t B).
fn offdiag_value(
    con: &Construction,
    t: &Displacement,
    a: &LevelSet,
    b: &LevelSet,
    max_stage: usize,
) -> Result<Interval> {
    let start = a.stage().max(b.stage());
    let (w, steps) = working_stage(con, t, start, max_stage)?;
    let bw = con.refine(b, w)?;
    let tr = con.translate(&bw, &steps, max_stage)?;
    let x = tr.intersection_measure(con, a)?;
    let cap = con.measure(a)?.lo.min(con.measure(b)?.lo);
    let hi = (&x + &tr.lost_mass).min(cap);
    Ok(Interval::new(x.clone().min(hi.clone()), hi))
}

/// mu(E_j intersect T_u E_j) — the cell value shared by every cell of a
/// column under a translation-invariant joining.
pub fn base_autocorrelation(
    con: &Construction,
    j: usize,
    u: &Displacement,
    max_stage: usize,
) -> Result<Interval> {
    let e = LevelSet::origin(con, j)?;
    offdiag_value(con, u, &e, &e, max_stage)
}

/// Evaluate a self-joining on a product set, as a certified interval.
pub fn eval_joining(
    con: &Construction,
    nu: &JoiningSpec,
    a: &LevelSet,
    b: &LevelSet,
    max_stage: usize,
) -> Result<Interval> {
    match nu {
        JoiningSpec::OffDiagonal(t) => offdiag_value(con, t, a, b, max_stage),
        JoiningSpec::GraphOfAction(t) => offdiag_value(con, &t.neg(), a, b, max_stage),
        JoiningSpec::Product => {
            let ma = con.measure(a)?.lo;
            let mb = con.measure(b)?.lo;
            Ok(Interval::point(ma * mb))
        }
        JoiningSpec::RelIndep(col) => {
            let w = a.stage().max(b.stage()).max(col.reference_stage);
            col.validate(con, w)?;
            let aw = con.refine(a, w)?;
            let bw = con.refine(b, w)?;
            rel_indep_value(con, col, &aw, &bw)
        }
    }
}

/// Relatively independent joining over a validated coloring, evaluated at the
/// sets' (common) stage: a finite sum over colors of products of conditional
/// masses. Class denominators absorb the deficit as interval width because
/// future spacer mass may still join any class.
fn rel_indep_value(
    con: &Construction,
    col: &ColoringFactor,
    a: &LevelSet,
    b: &LevelSet,
) -> Result<Interval> {
    let w = a.stage();
    debug_assert_eq!(b.stage(), w);
    let ncol = col.n_colors();
    let mut count_a = vec![0u64; ncol as usize];
    let mut count_b = vec![0u64; ncol as usize];
    for &lvl in a.levels() {
        count_a[col.color_at(con, w, lvl)? as usize] += 1;
    }
    for &lvl in b.levels() {
        count_b[col.color_at(con, w, lvl)? as usize] += 1;
    }
    let mu = con.base_measure(w);
    let mu2 = mu * mu;
    let deficit = con.deficit(w);
    let mut lo = Rational::zero();
    let mut hi = Rational::zero();
    for c in 0..ncol {
        let pairs = count_a[c as usize] * count_b[c as usize];
        if pairs == 0 {
            continue;
        }
        let numer = mu2.scale_u64(pairs);
        let m_c = col.class_measure(con, w, c)?;
        if m_c.is_zero() {
            return Err(Error::ZeroMassColumn(format!("color class {c}")));
        }
        lo += &numer / &(&m_c + deficit);
        hi += numer / m_c;
    }
    Ok(Interval::new(lo, hi).clamp_unit())
}

// ---------------------------------------------------------------------------
// Columns and fat diagonals
// ---------------------------------------------------------------------------

fn check_offset(con: &Construction, j: usize, k: &[i64]) -> Result<Vec<u64>> {
    con.check_stage(j)?;
    let h = con.heights(j);
    if k.len() != h.len() {
        return Err(Error::OffsetOutOfRange(format!("{k:?}"), j));
    }
    let mut slack = Vec::with_capacity(k.len());
    for (ki, &hi) in k.iter().zip(h) {
        let a = ki.unsigned_abs();
        if a >= hi {
            return Err(Error::OffsetOutOfRange(format!("{k:?}"), j));
        }
        slack.push(hi - a);
    }
    Ok(slack)
}

/// Exact pair count of the column at offset `k`: the product over axes of
/// (height - |k|).
pub fn column_pairs(con: &Construction, j: usize, k: &[i64]) -> Result<u64> {
    Ok(check_offset(con, j, k)?.iter().product())
}

/// Exact off-diagonal mass of the column at offset `k`.
pub fn column_mass(con: &Construction, j: usize, k: &[i64]) -> Result<Rational> {
    Ok(con.base_measure(j).scale_u64(column_pairs(con, j, k)?))
}

/// Offsets of the fat diagonal: those whose column pair count is at least
/// (1 - delta) times the full tower cell count. For one axis this is exactly
/// |k| <= floor(delta * h). Lexicographically sorted.
pub fn fat_diagonal(con: &Construction, j: usize, delta: &Rational) -> Result<Vec<Vec<i64>>> {
    con.check_stage(j)?;
    if delta <= &Rational::zero() || delta >= &Rational::one() {
        return Err(Error::HypothesisViolated(format!(
            "0 < delta < 1 required, got {delta}"
        )));
    }
    let h = con.heights(j);
    if h.len() == 1 {
        let bound = (delta.scale_u64(h[0])).floor_i128()? as i64;
        let bound = bound.min(h[0] as i64 - 1);
        return Ok((-bound..=bound).map(|k| vec![k]).collect());
    }
    let full: u64 = h.iter().product();
    let threshold = delta.scale_u64(full); // keep k iff full - prod <= delta*full
    let mut out = Vec::new();
    let ranges: Vec<Vec<i64>> = h
        .iter()
        .map(|&hi| (-(hi as i64 - 1)..=(hi as i64 - 1)).collect())
        .collect();
    let mut idx = vec![0usize; h.len()];
    loop {
        let k: Vec<i64> = idx.iter().zip(&ranges).map(|(&i, r)| r[i]).collect();
        let prod: u64 = k
            .iter()
            .zip(h)
            .map(|(ki, &hi)| hi - ki.unsigned_abs())
            .product();
        // prod >= (1 - delta) * full  <=>  full - prod <= delta * full
        if Rational::from_u64(full - prod) <= threshold {
            out.push(k);
        }
        // advance mixed-radix index
        let mut ax = h.len();
        loop {
            if ax == 0 {
                return Ok(out);
            }
            ax -= 1;
            idx[ax] += 1;
            if idx[ax] < ranges[ax].len() {
                break;
            }
            idx[ax] = 0;
        }
    }
}

fn sub_offset(con: &Construction, j: usize, level: u64, k: &[i64]) -> Option<u64> {
    let coords = con.unflatten(j, level);
    let h = con.heights(j);
    let mut out = Vec::with_capacity(coords.len());
    for ax in 0..coords.len() {
        let t = coords[ax] as i128 - k[ax] as i128;
        if t < 0 || t >= h[ax] as i128 {
            return None;
        }
        out.push(t as u64);
    }
    Some(con.flatten(j, &out))
}

/// Number of cell pairs (r, l) with r in A, l in B, r - l = k.
pub fn pair_count(con: &Construction, j: usize, k: &[i64], a: &LevelSet, b: &LevelSet) -> u64 {
    a.levels()
        .iter()
        .filter_map(|&r| sub_offset(con, j, r, k))
        .filter(|l| b.contains(*l))
        .count() as u64
}

fn at_stage(con: &Construction, set: &LevelSet, j: usize) -> Result<LevelSet> {
    if set.stage() == j {
        Ok(set.clone())
    } else if set.stage() < j {
        con.refine(set, j)
    } else {
        Err(Error::StageNotBuilt {
            stage: j,
            built: set.stage(),
        })
    }
}

/// Cap on the brute-force pair enumeration in `pair_histogram`.
const MAX_PAIR_SCAN: u64 = 40_000_000;

/// Pair counts for every offset at once: maps k to
/// #{(r, l) in A x B : r - l = k}. The full-tower square is answered in
/// closed form; everything else is a direct product scan.
pub fn pair_histogram(
    con: &Construction,
    j: usize,
    a: &LevelSet,
    b: &LevelSet,
) -> Result<std::collections::BTreeMap<Vec<i64>, u64>> {
    let a = at_stage(con, a, j)?;
    let b = at_stage(con, b, j)?;
    let h = con.heights(j).to_vec();
    let total = con.total_height(j);
    let mut out = std::collections::BTreeMap::new();
    if a.len() == total && b.len() == total {
        if total > 2_000_000 {
            return Err(Error::SetTooLarge { cap: 2_000_000 });
        }
        // Full tower against itself: count(k) = prod (h_i - |k_i|).
        let mut k = vec![0i64; h.len()];
        fn rec(
            ax: usize,
            h: &[u64],
            k: &mut Vec<i64>,
            out: &mut std::collections::BTreeMap<Vec<i64>, u64>,
        ) {
            if ax == h.len() {
                let count: u64 = k
                    .iter()
                    .zip(h)
                    .map(|(ki, &hi)| hi - ki.unsigned_abs())
                    .product();
                out.insert(k.clone(), count);
                return;
            }
            for v in -(h[ax] as i64 - 1)..=(h[ax] as i64 - 1) {
                k[ax] = v;
                rec(ax + 1, h, k, out);
            }
        }
        rec(0, &h, &mut k, &mut out);
        return Ok(out);
    }
    if a.len().saturating_mul(b.len()) > MAX_PAIR_SCAN {
        return Err(Error::SetTooLarge {
            cap: MAX_PAIR_SCAN,
        });
    }
    let bs: Vec<Vec<u64>> = b.levels().iter().map(|&l| con.unflatten(j, l)).collect();
    for &ra in a.levels() {
        let rc = con.unflatten(j, ra);
        for lc in &bs {
            let k: Vec<i64> = rc
                .iter()
                .zip(lc)
                .map(|(&r, &l)| r as i64 - l as i64)
                .collect();
            *out.entry(k).or_insert(0) += 1;
        }
    }
    Ok(out)
}

/// Conditional off-diagonal mass of A x B given the column at offset `k`:
/// the exact pair-count ratio.
pub fn conditional_offdiagonal(
    con: &Construction,
    j: usize,
    k: &[i64],
    a: &LevelSet,
    b: &LevelSet,
) -> Result<Rational> {
    let pairs_all = column_pairs(con, j, k)?;
    if pairs_all == 0 {
        return Err(Error::ZeroMassColumn(format!("{k:?}")));
    }
    let a = at_stage(con, a, j)?;
    let b = at_stage(con, b, j)?;
    let hits = pair_count(con, j, k, &a, &b);
    Ok(Rational::from_u64(hits) / Rational::from_u64(pairs_all))
}

/// Stage-j counting approximation of the off-diagonal value on A x B:
/// matched pairs times the base measure. This is the xi_j-cell part of the
/// off-diagonal mass; translates that wrap beyond the stage are not counted.
pub fn counting_offdiagonal(
    con: &Construction,
    j: usize,
    k: &[i64],
    a: &LevelSet,
    b: &LevelSet,
) -> Result<Rational> {
    check_offset(con, j, k)?;
    let a = at_stage(con, a, j)?;
    let b = at_stage(con, b, j)?;
    Ok(con
        .base_measure(j)
        .scale_u64(pair_count(con, j, k, &a, &b)))
}

/// nu-mass of the column at offset `k`. For translation-invariant joinings
/// all cells of a column carry equal mass, so one cell value suffices for
/// the off-diagonal and product cases; the relatively independent case sums
/// cells by color.
pub fn nu_column_mass(
    con: &Construction,
    nu: &JoiningSpec,
    j: usize,
    k: &[i64],
    max_stage: usize,
) -> Result<Interval> {
    let pairs = column_pairs(con, j, k)?;
    if pairs == 0 {
        return Ok(Interval::zero());
    }
    match nu {
        JoiningSpec::Product => {
            let mu = con.base_measure(j);
            Ok(Interval::point((mu * mu).scale_u64(pairs)))
        }
        JoiningSpec::OffDiagonal(t) => {
            // All cells of the column carry the common value
            // mu(E_j intersect T_u E_j) with u = t - k * s_j.
            let u = match t {
                Displacement::Steps(v) => Displacement::Steps(
                    v.iter().zip(k).map(|(ti, ki)| ti - ki).collect(),
                ),
                Displacement::Time(t) => {
                    Displacement::Time(t.clone() - con.step(j).clone() * Rational::int(k[0]))
                }
            };
            let cell = base_autocorrelation(con, j, &u, max_stage)?;
            Ok(cell.scale(&Rational::from_u64(pairs)).clamp_unit())
        }
        JoiningSpec::GraphOfAction(t) => {
            nu_column_mass(con, &JoiningSpec::OffDiagonal(t.neg()), j, k, max_stage)
        }
        JoiningSpec::RelIndep(col) => {
            let mu = con.base_measure(j);
            let mu2 = mu * mu;
            let deficit = con.deficit(j);
            let h = con.heights(j);
            // Enumerate cells (r, l) with r - l = k via the per-axis slack.
            let slack: Vec<u64> = check_offset(con, j, k)?;
            let mut counts = std::collections::BTreeMap::new();
            let mut m = vec![0u64; h.len()];
            loop {
                let mut r = Vec::with_capacity(h.len());
                let mut l = Vec::with_capacity(h.len());
                for ax in 0..h.len() {
                    if k[ax] >= 0 {
                        r.push(m[ax] + k[ax] as u64);
                        l.push(m[ax]);
                    } else {
                        r.push(m[ax]);
                        l.push(m[ax] + (-k[ax]) as u64);
                    }
                }
                let cr = col.color_at(con, j, con.flatten(j, &r))?;
                let cl = col.color_at(con, j, con.flatten(j, &l))?;
                if cr == cl {
                    *counts.entry(cr).or_insert(0u64) += 1;
                }
                let mut ax = h.len();
                let mut done = false;
                loop {
                    if ax == 0 {
                        done = true;
                        break;
                    }
                    ax -= 1;
                    m[ax] += 1;
                    if m[ax] < slack[ax] {
                        break;
                    }
                    m[ax] = 0;
                }
                if done {
                    break;
                }
            }
            let mut lo = Rational::zero();
            let mut hi = Rational::zero();
            for (c, cnt) in counts {
                let numer = mu2.scale_u64(cnt);
                let m_c = col.class_measure(con, j, c)?;
                if m_c.is_zero() {
                    return Err(Error::ZeroMassColumn(format!("color class {c}")));
                }
                lo += &numer / &(&m_c + deficit);
                hi += numer / m_c;
            }
            Ok(Interval::new(lo, hi).clamp_unit())
        }
    }
}

/// nu-mass of the fat diagonal: the sum of the column masses over the fat
/// diagonal's offsets, as a certified interval.
pub fn fat_diagonal_mass(
    con: &Construction,
    nu: &JoiningSpec,
    j: usize,
    delta: &Rational,
    max_stage: usize,
) -> Result<Interval> {
    nu.validate(con, j)?;
    let offsets = fat_diagonal(con, j, delta)?;
    let parts: Result<Vec<Interval>> = offsets
        .par_iter()
        .map(|k| nu_column_mass(con, nu, j, k, max_stage))
        .collect();
    Ok(parts?.into_iter().sum::<Interval>().clamp_unit())
}

/// Exact almost-invariance defect of the conditional off-diagonal on the
/// column at offset `k`: shift both test-set coordinates by one step of the
/// stage-p grid (truncating at the tower boundary) and take the worst change
/// of the conditional value over the family.
pub fn invariance_defect(
    con: &Construction,
    j: usize,
    k: &[i64],
    p: usize,
    family: &[(LevelSet, LevelSet)],
) -> Result<Rational> {
    if p > j {
        return Err(Error::Config("invariance defect needs p <= j".into()));
    }
    let pairs_all = column_pairs(con, j, k)?;
    if pairs_all == 0 {
        return Err(Error::ZeroMassColumn(format!("{k:?}")));
    }
    let m = con.step_scale(p, j) as i64;
    let mut shift = vec![0i64; con.dim()];
    shift[0] = m;
    let h = con.heights(j).to_vec();
    let shift_set = |set: &LevelSet| -> Result<LevelSet> {
        let mut out = Vec::new();
        for &lvl in set.levels() {
            let coords = con.unflatten(j, lvl);
            let mut tgt = Vec::with_capacity(coords.len());
            let mut ok = true;
            for ax in 0..coords.len() {
                let t = coords[ax] as i128 + shift[ax] as i128;
                if t < 0 || t >= h[ax] as i128 {
                    ok = false;
                    break;
                }
                tgt.push(t as u64);
            }
            if ok {
                out.push(con.flatten(j, &tgt));
            }
        }
        LevelSet::new(con, j, out)
    };
    let mut worst = Rational::zero();
    for (a, b) in family {
        let a = at_stage(con, a, j)?;
        let b = at_stage(con, b, j)?;
        let before = Rational::from_u64(pair_count(con, j, k, &a, &b));
        let after = Rational::from_u64(pair_count(con, j, k, &shift_set(&a)?, &shift_set(&b)?));
        let d = (before - after).abs() / Rational::from_u64(pairs_all);
        worst = worst.max(d);
    }
    Ok(worst)
}
