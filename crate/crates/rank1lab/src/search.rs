//! Constructive search engines: candidate selection against a target joining,
//! the approximation search over fat-diagonal columns, off-diagonal
//! decomposition, the weak-closure and factor-rigidity searches, and the
//! flat-roof convergence report.
//!
//! Distances are sup distances over a finite test family, computed
//! interval-aware: the reported `hi` is a certified upper bound on the true
//! sup distance. Convergence is reported as a trend plus the final certified
//! distance; no limit is ever asserted.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::joining::{
    column_mass, conditional_offdiagonal, counting_offdiagonal, eval_joining, fat_diagonal,
    fat_diagonal_mass, nu_column_mass, pair_count, Displacement, JoiningSpec,
};
use crate::level_set::LevelSet;
use crate::rational::{Interval, Rational};
use crate::schedule::ScheduleKind;
use crate::tower::Construction;

// ---------------------------------------------------------------------------
// Test families
// ---------------------------------------------------------------------------

/// A finite family of product sets used as the weak-convergence surrogate:
/// distances between joinings are sup distances over this family.
#[derive(Clone, Debug)]
pub struct TestFamily {
    pub reference_stage: usize,
    pub pairs: Vec<FamilyPair>,
}

#[derive(Clone, Debug)]
pub struct FamilyPair {
    pub label: String,
    pub a: LevelSet,
    pub b: LevelSet,
}

impl TestFamily {
    /// All singleton level pairs of the reference stage plus the full tower.
    pub fn singletons(con: &Construction, j0: usize) -> Result<Self> {
        con.check_stage(j0)?;
        let total = con.total_height(j0);
        if total > 64 {
            return Err(Error::Config(format!(
                "singleton family at stage {j0} would need {total}^2 pairs; pick a smaller reference stage"
            )));
        }
        let mut pairs = Vec::new();
        for a in 0..total {
            for b in 0..total {
                pairs.push(FamilyPair {
                    label: format!("{a}x{b}"),
                    a: LevelSet::singleton(con, j0, a)?,
                    b: LevelSet::singleton(con, j0, b)?,
                });
            }
        }
        let full = LevelSet::full_tower(con, j0)?;
        pairs.push(FamilyPair {
            label: "fullxfull".into(),
            a: full.clone(),
            b: full,
        });
        Ok(TestFamily {
            reference_stage: j0,
            pairs,
        })
    }

    /// All pairs of color classes of a coloring factor.
    pub fn color_classes(
        con: &Construction,
        coloring: &crate::coloring::ColoringFactor,
        j0: usize,
    ) -> Result<Self> {
        let j0 = j0.max(coloring.reference_stage);
        let ncol = coloring.n_colors();
        let mut classes = Vec::new();
        for c in 0..ncol {
            let set = coloring.class_level_set(con, j0, c)?;
            if !set.is_empty() {
                classes.push((c, set));
            }
        }
        let mut pairs = Vec::new();
        for (ca, a) in &classes {
            for (cb, b) in &classes {
                pairs.push(FamilyPair {
                    label: format!("c{ca}xc{cb}"),
                    a: a.clone(),
                    b: b.clone(),
                });
            }
        }
        Ok(TestFamily {
            reference_stage: j0,
            pairs,
        })
    }

    pub fn explicit(j0: usize, pairs: Vec<FamilyPair>) -> Self {
        TestFamily {
            reference_stage: j0,
            pairs,
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

// ---------------------------------------------------------------------------
// Budget
// ---------------------------------------------------------------------------

/// Deterministic compute budget, counted in column scans (one scan = one
/// candidate evaluated against one family pair). Charged per stage before
/// the stage runs, so partial results do not depend on thread scheduling.
#[derive(Debug)]
pub struct ScanBudget {
    limit: u64,
    used: std::cell::Cell<u64>,
}

impl ScanBudget {
    pub fn new(limit: u64) -> Self {
        ScanBudget {
            limit,
            used: std::cell::Cell::new(0),
        }
    }

    pub fn unlimited() -> Self {
        Self::new(u64::MAX)
    }

    pub fn charge(&self, cost: u64) -> Result<()> {
        let used = self.used.get().saturating_add(cost);
        self.used.set(used);
        if used > self.limit {
            Err(Error::BudgetExceeded {
                used,
                limit: self.limit,
            })
        } else {
            Ok(())
        }
    }

    pub fn used(&self) -> u64 {
        self.used.get()
    }
}

// ---------------------------------------------------------------------------
// Choice selection
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct Candidate {
    /// Offset label (one entry per axis).
    pub offset: Vec<i64>,
    pub weight: Rational,
    /// Values on the family, in family order.
    pub values: Vec<Interval>,
}

#[derive(Clone, Debug)]
pub struct ChoiceOutcome {
    pub index: usize,
    /// Certified sup-family distance of the selected candidate.
    pub distance: Interval,
    /// Weighted mean of the candidate distances (certified upper bounds):
    /// the finite-stage check of the mixture-convergence hypothesis.
    pub mixture_distance: Rational,
}

fn offset_norm(k: &[i64]) -> u64 {
    k.iter().map(|x| x.unsigned_abs()).sum()
}

/// Sup-family distance between candidate values and target values, as an
/// interval (lo = certified lower bound, hi = certified upper bound).
pub fn family_distance(values: &[Interval], target: &[Interval]) -> Interval {
    let mut lo = Rational::zero();
    let mut hi = Rational::zero();
    for (v, t) in values.iter().zip(target) {
        lo = lo.max(v.min_abs_diff(t));
        hi = hi.max(v.max_abs_diff(t));
    }
    Interval::new(lo, hi)
}

/// Select the candidate minimizing the certified sup-family distance to the
/// target. Ties break toward the smallest offset norm, then the
/// lexicographically smallest offset; selection is total and deterministic.
pub fn choice_select(candidates: &[Candidate], target: &[Interval]) -> Result<ChoiceOutcome> {
    if candidates.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    let weight_sum: Rational = candidates.iter().map(|c| c.weight.clone()).sum();
    if weight_sum != Rational::one() {
        return Err(Error::HypothesisViolated(format!(
            "candidate weights must sum to 1 exactly, got {weight_sum}"
        )));
    }
    if candidates
        .iter()
        .any(|c| c.weight.is_negative() || c.weight.is_zero())
    {
        return Err(Error::HypothesisViolated(
            "candidate weights must be positive".into(),
        ));
    }
    let mut best: Option<(usize, Interval)> = None;
    let mut mixture = Rational::zero();
    for (i, c) in candidates.iter().enumerate() {
        let d = family_distance(&c.values, target);
        mixture += &c.weight * &d.hi;
        let better = match &best {
            None => true,
            Some((bi, bd)) => {
                let cand_key = (d.hi.clone(), offset_norm(&c.offset), c.offset.clone());
                let best_key = (
                    bd.hi.clone(),
                    offset_norm(&candidates[*bi].offset),
                    candidates[*bi].offset.clone(),
                );
                cand_key < best_key
            }
        };
        if better {
            best = Some((i, d));
        }
    }
    let (index, distance) = best.unwrap();
    Ok(ChoiceOutcome {
        index,
        distance,
        mixture_distance: mixture,
    })
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PairEval {
    pub label: String,
    pub candidate: Interval,
    pub target: Interval,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageResult {
    pub stage: usize,
    /// Selected offset k_j, one entry per axis.
    pub offset: Vec<i64>,
    /// Certified sup-family distance of the selected candidate.
    pub d_lo: Rational,
    pub d_hi: Rational,
    /// Stage-level counting distance of the same candidate (diagnostic trend
    /// toward the target; present for the deep-candidate searches).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub approx_d_hi: Option<Rational>,
    /// Off-diagonal mass of the selected column.
    pub column_share: Rational,
    /// |k_j * s_j| in time units (max over axes for rectangular actions).
    pub displacement: Rational,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mixture_distance: Option<Rational>,
    /// Projection of the selected column on the first coordinate: sign form
    /// ("-" bottom block / "+" top block) and its exact mass.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub projection: Option<(String, Rational)>,
    /// Residual joining table: per family pair, candidate vs target.
    pub table: Vec<PairEval>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SearchReport {
    pub experiment: String,
    pub target: String,
    pub stages: Vec<StageResult>,
    pub notes: Vec<String>,
}

impl SearchReport {
    pub fn d_hi_trend(&self) -> Vec<Rational> {
        self.stages.iter().map(|s| s.d_hi.clone()).collect()
    }
}

fn displacement_magnitude(con: &Construction, j: usize, k: &[i64]) -> Rational {
    let s = con.step(j);
    k.iter()
        .map(|ki| s.scale_u64(ki.unsigned_abs()))
        .fold(Rational::zero(), |a, b| a.max(b))
}

fn projection_info(con: &Construction, j: usize, k: &[i64]) -> (String, Rational) {
    let mass = column_mass(con, j, k).unwrap_or_else(|_| Rational::zero());
    let form = if k.iter().all(|&x| x >= 0) { "+" } else { "-" };
    (form.to_string(), mass)
}

/// Family sets refined to stage j (errors if the family is finer than j).
fn family_at_stage(
    con: &Construction,
    family: &TestFamily,
    j: usize,
) -> Result<Vec<(LevelSet, LevelSet)>> {
    family
        .pairs
        .iter()
        .map(|p| Ok((con.refine(&p.a, j)?, con.refine(&p.b, j)?)))
        .collect()
}

fn target_values(
    con: &Construction,
    nu: &JoiningSpec,
    family: &TestFamily,
    max_stage: usize,
) -> Result<Vec<Interval>> {
    family
        .pairs
        .iter()
        .map(|p| eval_joining(con, nu, &p.a, &p.b, max_stage))
        .collect()
}

// ---------------------------------------------------------------------------
// Approximation search (conditional candidates over the fat diagonal)
// ---------------------------------------------------------------------------

/// For each stage, evaluate the column-conditioned off-diagonals over the
/// delta-fat diagonal against the target joining, weight columns by their
/// target mass, and select by certified sup-family distance.
pub fn approximation_search(
    con: &Construction,
    nu: &JoiningSpec,
    delta: &Rational,
    stages: std::ops::RangeInclusive<usize>,
    family: &TestFamily,
    max_stage: usize,
    budget: &ScanBudget,
) -> Result<SearchReport> {
    nu.validate(con, max_stage)?;
    let j_min = *stages.start();
    let hypothesis = fat_diagonal_mass(con, nu, j_min, delta, max_stage)?;
    if hypothesis.lo.is_zero() {
        return Err(Error::HypothesisViolated(format!(
            "fat-diagonal mass lower bound must be positive at stage {j_min}: got {hypothesis}"
        )));
    }
    let target = target_values(con, nu, family, max_stage)?;
    let mut out = Vec::new();
    let mut notes = Vec::new();
    for j in stages {
        let offsets = fat_diagonal(con, j, delta)?;
        budget.charge(offsets.len() as u64 * (family.len() as u64 + 1))?;
        // Pair counts for every offset at once, per family pair.
        let hists: Result<Vec<_>> = family
            .pairs
            .par_iter()
            .map(|p| crate::joining::pair_histogram(con, j, &p.a, &p.b))
            .collect();
        let hists = hists?;
        let masses: Result<Vec<Interval>> = offsets
            .par_iter()
            .map(|k| nu_column_mass(con, nu, j, k, max_stage))
            .collect();
        let masses = masses?;
        let mass_sum: Rational = masses.iter().map(|m| m.lo.clone()).sum();
        if mass_sum.is_zero() {
            return Err(Error::HypothesisViolated(format!(
                "target gives no mass to the stage-{j} fat diagonal"
            )));
        }
        // Candidate family per the approximation machinery: columns weighted
        // by their certified target mass, conditionally normalized. Columns
        // whose target mass has certified lower bound zero carry no weight
        // and are dropped from the weighted family.
        let candidates: Result<Vec<Candidate>> = offsets
            .par_iter()
            .zip(masses.par_iter())
            .filter(|(_, m)| !m.lo.is_zero())
            .map(|(k, m)| {
                let pairs_all = crate::joining::column_pairs(con, j, k)?;
                if pairs_all == 0 {
                    return Err(Error::ZeroMassColumn(format!("{k:?}")));
                }
                let values: Vec<Interval> = hists
                    .iter()
                    .map(|h| {
                        let hits = h.get(k).copied().unwrap_or(0);
                        Interval::point(
                            Rational::from_u64(hits) / Rational::from_u64(pairs_all),
                        )
                    })
                    .collect();
                Ok(Candidate {
                    offset: k.clone(),
                    weight: &m.lo / &mass_sum,
                    values,
                })
            })
            .collect();
        let candidates = candidates?;
        let outcome = choice_select(&candidates, &target)?;
        let chosen = &candidates[outcome.index];
        let share = column_mass(con, j, &chosen.offset)?;
        let table = family
            .pairs
            .iter()
            .zip(&target)
            .enumerate()
            .map(|(i, (p, t))| PairEval {
                label: p.label.clone(),
                candidate: chosen.values[i].clone(),
                target: t.clone(),
            })
            .collect();
        out.push(StageResult {
            stage: j,
            offset: chosen.offset.clone(),
            d_lo: outcome.distance.lo.clone(),
            d_hi: outcome.distance.hi.clone(),
            approx_d_hi: None,
            column_share: share,
            displacement: displacement_magnitude(con, j, &chosen.offset),
            mixture_distance: Some(outcome.mixture_distance),
            projection: Some(projection_info(con, j, &chosen.offset)),
            table,
        });
    }
    if let JoiningSpec::Product = nu {
        notes.push("product target: distances reported, no convergence asserted".into());
    }
    Ok(SearchReport {
        experiment: "approximation".into(),
        target: nu.describe(),
        stages: out,
        notes,
    })
}

// ---------------------------------------------------------------------------
// Off-diagonal decomposition
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Decomposition {
    pub stage: usize,
    pub offset: Vec<i64>,
    /// Off-diagonal mass of the column: the coefficient of the conditional
    /// part in the two-part decomposition.
    pub column_share: Rational,
    /// Distance of the renormalized complement part to its nearest
    /// off-diagonal candidate on the family (diagnostic).
    pub residual_distance: Rational,
}

/// Decompose the off-diagonal at offset `k` into its column-conditioned part
/// (weight = column mass) and the renormalized remainder.
pub fn decompose_offdiagonal(
    con: &Construction,
    j: usize,
    k: &[i64],
    family: &TestFamily,
    max_stage: usize,
) -> Result<Decomposition> {
    let share = column_mass(con, j, k)?;
    let complement = Rational::one() - share.clone();
    let fam_j = family_at_stage(con, family, j)?;
    let t = steps_to_displacement(con, j, k);
    let mut residual_distance = Rational::zero();
    if !complement.is_zero() {
        // Remainder part on each family pair: deep value minus the in-column
        // cell mass, renormalized.
        let rema: Result<Vec<Interval>> = fam_j
            .iter()
            .map(|(a, b)| {
                let deep = eval_joining(con, &JoiningSpec::OffDiagonal(t.clone()), a, b, max_stage)?;
                let in_col = counting_offdiagonal(con, j, k, a, b)?;
                let inv = complement.recip()?;
                Ok(deep
                    .sub(&Interval::point(in_col))
                    .clamp_unit()
                    .scale(&inv))
            })
            .collect();
        let rema = rema?;
        // Nearest off-diagonal candidate over the 3/4-fat diagonal.
        let mut nearest: Option<Rational> = None;
        for k2 in fat_diagonal(con, j, &Rational::new(3, 4))? {
            let mut worst = Rational::zero();
            for ((a, b), r) in fam_j.iter().zip(&rema) {
                let v = Interval::point(conditional_offdiagonal(con, j, &k2, a, b)?);
                worst = worst.max(v.max_abs_diff(r));
            }
            nearest = Some(match nearest {
                None => worst,
                Some(n) => n.min(worst),
            });
        }
        residual_distance = nearest.unwrap_or_else(Rational::zero);
    }
    Ok(Decomposition {
        stage: j,
        offset: k.to_vec(),
        column_share: share,
        residual_distance,
    })
}

fn steps_to_displacement(con: &Construction, j: usize, k: &[i64]) -> Displacement {
    match con.kind() {
        ScheduleKind::Flow => Displacement::Time(con.step(j).clone() * Rational::int(k[0])),
        _ => Displacement::Steps(k.to_vec()),
    }
}

// ---------------------------------------------------------------------------
// Weak-closure search (unconditional candidates)
// ---------------------------------------------------------------------------

/// Search, per stage, for the power of the action closest to a commuting map
/// (given as a displacement), in the unconditional sup-family distance.
/// Candidates are compared at stage resolution (exact pair counting); the
/// selected candidate is then re-evaluated deeply, giving the certified
/// distance interval, while its counting distance is reported as the
/// stage-resolution trend.
pub fn wct_search(
    con: &Construction,
    t_s: &Displacement,
    stages: std::ops::RangeInclusive<usize>,
    family: &TestFamily,
    max_stage: usize,
    budget: &ScanBudget,
) -> Result<SearchReport> {
    // Admissibility of the commuting map at the finest stage.
    if t_s.steps_at(con, max_stage).is_none() {
        return Err(Error::InadmissibleTime {
            time: t_s.describe(),
            max_stage,
        });
    }
    let nu = JoiningSpec::OffDiagonal(t_s.clone());
    let target = target_values(con, &nu, family, max_stage)?;
    let mut out = Vec::new();
    for j in stages {
        let h = con.heights(j)[0];
        // delta_j decreasing to 1/2 bounds the candidate window.
        let delta_j = Rational::new(1, 2) + Rational::new(1, j as i64 + 2);
        let bound = delta_j
            .scale_u64(h)
            .floor_i128()?
            .min(h as i128 - 1)
            .max(0) as i64;
        let offsets: Vec<Vec<i64>> = (-bound..=bound).map(|k| vec![k]).collect();
        budget.charge(offsets.len() as u64 * (family.len() as u64 + 1))?;
        // Deep certified values of every candidate (cheap: translation keeps
        // multi-stage pieces, nothing is materialized at depth).
        let evals: Result<Vec<(Interval, Vec<Interval>)>> = offsets
            .par_iter()
            .map(|k| {
                let t_k = steps_to_displacement(con, j, k);
                let values: Result<Vec<Interval>> = family
                    .pairs
                    .iter()
                    .map(|p| {
                        eval_joining(
                            con,
                            &JoiningSpec::OffDiagonal(t_k.clone()),
                            &p.a,
                            &p.b,
                            max_stage,
                        )
                    })
                    .collect();
                let values = values?;
                Ok((family_distance(&values, &target), values))
            })
            .collect();
        let evals = evals?;
        let masses: Result<Vec<Interval>> = offsets
            .par_iter()
            .map(|k| nu_column_mass(con, &nu, j, k, max_stage))
            .collect();
        let masses = masses?;
        let mass_sum: Rational = masses.iter().map(|m| m.lo.clone()).sum();
        let uniform = Rational::one() / Rational::from_u64(offsets.len() as u64);
        // Selection: certified distance first; a rigid construction cannot
        // separate the target from nearby return times on a finite family,
        // so ties prefer the candidate realizing the target displacement,
        // then the smallest offset.
        let target_gap = |k: &[i64]| -> Rational {
            let realized = con.step(j).clone() * Rational::int(k[0]);
            match t_s {
                Displacement::Time(t) => (realized - t.clone()).abs(),
                Displacement::Steps(v) => {
                    (realized - Rational::int(v[0])).abs()
                }
            }
        };
        let mut best: Option<usize> = None;
        let mut mixture = Rational::zero();
        for (i, k) in offsets.iter().enumerate() {
            let d = &evals[i].0;
            let weight = if mass_sum.is_zero() {
                uniform.clone()
            } else {
                &masses[i].lo / &mass_sum
            };
            mixture += weight * d.hi.clone();
            let better = match best {
                None => true,
                Some(bi) => {
                    (d.hi.clone(), target_gap(k), offset_norm(k), k.clone())
                        < (
                            evals[bi].0.hi.clone(),
                            target_gap(&offsets[bi]),
                            offset_norm(&offsets[bi]),
                            offsets[bi].clone(),
                        )
                }
            };
            if better {
                best = Some(i);
            }
        }
        let index = best.ok_or(Error::EmptyCandidates)?;
        let k_star = offsets[index].clone();
        let (distance, deep) = evals[index].clone();
        // Stage-resolution counting distance of the selected candidate.
        let fam_j = family_at_stage(con, family, j)?;
        let mut approx_d = Rational::zero();
        for ((a, b), t) in fam_j.iter().zip(&target) {
            let v = Interval::point(counting_offdiagonal(con, j, &k_star, a, b)?);
            approx_d = approx_d.max(v.max_abs_diff(t));
        }
        let table = family
            .pairs
            .iter()
            .zip(&target)
            .enumerate()
            .map(|(i, (p, t))| PairEval {
                label: p.label.clone(),
                candidate: deep[i].clone(),
                target: t.clone(),
            })
            .collect();
        out.push(StageResult {
            stage: j,
            offset: k_star.clone(),
            d_lo: distance.lo.clone(),
            d_hi: distance.hi.clone(),
            approx_d_hi: Some(approx_d),
            column_share: column_mass(con, j, &k_star)?,
            displacement: displacement_magnitude(con, j, &k_star),
            mixture_distance: Some(mixture),
            projection: Some(projection_info(con, j, &k_star)),
            table,
        });
    }
    Ok(SearchReport {
        experiment: "wct".into(),
        target: format!("graph of T at {}", t_s.describe()),
        stages: out,
        notes: Vec::new(),
    })
}

// ---------------------------------------------------------------------------
// Factor rigidity search
// ---------------------------------------------------------------------------

/// Search for large displacements along which the action returns to the
/// identity on a coloring factor: per stage, the deep off-diagonal values on
/// factor-measurable family sets are compared against the plain
/// intersections.
pub fn rigidity_search(
    con: &Construction,
    coloring: &crate::coloring::ColoringFactor,
    min_displacement: &Rational,
    stages: std::ops::RangeInclusive<usize>,
    family: &TestFamily,
    max_stage: usize,
    budget: &ScanBudget,
) -> Result<SearchReport> {
    coloring.validate(con, max_stage)?;
    for p in &family.pairs {
        if !coloring.is_factor_measurable(con, &p.a)?
            || !coloring.is_factor_measurable(con, &p.b)?
        {
            return Err(Error::NotFactorMeasurable(p.label.clone()));
        }
    }
    // Targets: plain intersections mu(A intersect B).
    let target: Result<Vec<Interval>> = family
        .pairs
        .iter()
        .map(|p| con.measure(&con.intersect(&p.a, &p.b)?))
        .collect();
    let target = target?;
    let mut out = Vec::new();
    for j in stages {
        let h = con.heights(j)[0] as i64;
        let s = con.step(j);
        // Admissible displacements: |k * s_j| >= min_displacement, |k| <= h_j.
        let k_min = {
            let mut k = 1i64;
            while &s.scale_u64(k as u64) < min_displacement && k <= h {
                k += 1;
            }
            k
        };
        if k_min > h {
            return Err(Error::GrowthUnattainable(format!(
                "no displacement of magnitude at least {min_displacement} at stage {j}"
            )));
        }
        let mut offsets: Vec<Vec<i64>> = Vec::new();
        for k in k_min..=h {
            offsets.push(vec![k]);
            offsets.push(vec![-k]);
        }
        offsets.sort();
        budget.charge(offsets.len() as u64 * family.len() as u64)?;
        let evals: Result<Vec<(Vec<i64>, Vec<Interval>)>> = offsets
            .par_iter()
            .map(|k| {
                let t_k = steps_to_displacement(con, j, k);
                let values: Result<Vec<Interval>> = family
                    .pairs
                    .iter()
                    .map(|p| {
                        eval_joining(
                            con,
                            &JoiningSpec::OffDiagonal(t_k.clone()),
                            &p.a,
                            &p.b,
                            max_stage,
                        )
                    })
                    .collect();
                Ok((k.clone(), values?))
            })
            .collect();
        let mut best: Option<(Vec<i64>, Interval, Vec<Interval>)> = None;
        for (k, values) in evals? {
            let d = family_distance(&values, &target);
            let better = match &best {
                None => true,
                Some((bk, bd, _)) => {
                    (d.hi.clone(), offset_norm(&k), k.clone())
                        < (bd.hi.clone(), offset_norm(bk), bk.clone())
                }
            };
            if better {
                best = Some((k, d, values));
            }
        }
        let (k, d, values) = best.ok_or(Error::EmptyCandidates)?;
        let share = if k[0].unsigned_abs() < con.heights(j)[0] {
            column_mass(con, j, &k)?
        } else {
            Rational::zero()
        };
        let table = family
            .pairs
            .iter()
            .zip(&target)
            .enumerate()
            .map(|(i, (p, t))| PairEval {
                label: p.label.clone(),
                candidate: values[i].clone(),
                target: t.clone(),
            })
            .collect();
        out.push(StageResult {
            stage: j,
            offset: k.clone(),
            d_lo: d.lo.clone(),
            d_hi: d.hi.clone(),
            approx_d_hi: None,
            column_share: share,
            displacement: displacement_magnitude(con, j, &k),
            mixture_distance: None,
            projection: None,
            table,
        });
    }
    Ok(SearchReport {
        experiment: "rigidity".into(),
        target: format!(
            "identity on the factor (reference stage {})",
            coloring.reference_stage
        ),
        stages: out,
        notes: Vec::new(),
    })
}

// ---------------------------------------------------------------------------
// Flat-roof convergence
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FlatRoofReport {
    pub stage: usize,
    /// Normalized flat-roof defect at this stage.
    pub defect: Interval,
    /// h_j * sum over k >= 1 of |a_k - b_k| where a_k, b_k are the two cell
    /// masses of the gathered column pair.
    pub discrepancy: Interval,
    /// Total mass of the gathered columns (at most 1).
    pub gather_mass: Interval,
    /// Per family pair: sup over k of the counting-bound gap
    /// |off-diagonal(A x B) - (l_k + r_k) mu(E_j)|.
    pub counting_gap: Vec<(String, Rational)>,
    /// Sup-family distance of the gathered-column mixture to the target.
    pub mixture_distance: Rational,
    /// Exact identity check: nu(G_k) = (h - k) a_k + k b_k, cross-summed two
    /// ways (always exact by construction; recorded for the report).
    pub identity_exact: bool,
}

/// Full flat-roof diagnostic at stage j: cell masses a_k, b_k for every
/// offset, gathered-column masses, the discrepancy driving the flat-roof
/// argument, and counting bounds on the family.
pub fn flat_roof_convergence(
    con: &Construction,
    j: usize,
    nu: &JoiningSpec,
    family: &[(LevelSet, LevelSet)],
    max_stage: usize,
) -> Result<FlatRoofReport> {
    if con.dim() != 1 {
        return Err(Error::Config(
            "flat-roof analysis applies to one-dimensional actions".into(),
        ));
    }
    nu.validate(con, max_stage)?;
    let h = con.heights(j)[0];
    let mu = con.base_measure(j).clone();

    // a_k = nu(T^k E_j x E_j); b_k = nu(E_j x T^{h-k} E_j).
    let cell = |k: u64, up: bool| -> Result<Interval> {
        match nu {
            JoiningSpec::Product => Ok(Interval::point(&mu * &mu)),
            _ => {
                // Invariance-normalized evaluation through the base cell.
                let u = if up {
                    // nu(T^k E x E) for the off-diagonal at t: value is
                    // mu(E intersect T_{t - k s_j} E).
                    column_cell_shift(con, j, nu, k as i64)?
                } else {
                    column_cell_shift(con, j, nu, k as i64 - h as i64)?
                };
                match u {
                    CellRoute::OffDiag(d) => {
                        crate::joining::base_autocorrelation(con, j, &d, max_stage)
                    }
                    CellRoute::RelIndep(col) => {
                        let (r, l) = if up {
                            (k, 0u64)
                        } else {
                            (0u64, h - k)
                        };
                        let a = LevelSet::singleton(con, j, r)?;
                        let b = LevelSet::singleton(con, j, l)?;
                        eval_joining(con, &JoiningSpec::RelIndep(col), &a, &b, max_stage)
                    }
                }
            }
        }
    };

    let ks: Vec<u64> = (0..h).collect();
    let ab: Result<Vec<(Interval, Interval)>> = ks
        .par_iter()
        .map(|&k| {
            let a_k = cell(k, true)?;
            // b_0 enters every identity with coefficient 0; skip its
            // (wrapped, unrepresentable) evaluation.
            let b_k = if k == 0 {
                Interval::zero()
            } else {
                cell(k, false)?
            };
            Ok((a_k, b_k))
        })
        .collect();
    let ab = ab?;

    // Gathered columns: nu(G_k) = (h - k) a_k + k b_k.
    let gathered: Vec<Interval> = ab
        .iter()
        .enumerate()
        .map(|(k, (a, b))| {
            a.scale(&Rational::from_u64(h - k as u64))
                .add(&b.scale(&Rational::from_u64(k as u64)))
        })
        .collect();
    let gather_mass: Interval = gathered.iter().cloned().sum::<Interval>().clamp_unit();

    let mut discrepancy = Interval::zero();
    for (k, (a, b)) in ab.iter().enumerate() {
        if k == 0 {
            continue;
        }
        discrepancy = discrepancy.add(&a.abs_diff(b));
    }
    let discrepancy = discrepancy.scale(&Rational::from_u64(h));

    // Counting bound per family pair, sup over k.
    let fam_j: Result<Vec<(LevelSet, LevelSet)>> = family
        .iter()
        .map(|(a, b)| Ok((at_stage_local(con, a, j)?, at_stage_local(con, b, j)?)))
        .collect();
    let fam_j = fam_j?;
    let mut counting_gap = Vec::new();
    let mut mixture_distance = Rational::zero();
    for (idx, (a, b)) in fam_j.iter().enumerate() {
        let per_k: Result<Vec<(Rational, Interval)>> = ks
            .par_iter()
            .map(|&k| {
                let kk = vec![k as i64];
                let r_k = pair_count(con, j, &kk, a, b);
                let wrap = vec![k as i64 - h as i64];
                let l_k = if k == 0 {
                    0
                } else {
                    pair_count(con, j, &wrap, a, b)
                };
                let t_k = steps_to_displacement(con, j, &kk);
                let deep = eval_joining(
                    con,
                    &JoiningSpec::OffDiagonal(t_k),
                    a,
                    b,
                    max_stage,
                )?;
                let approx = Interval::point(mu.scale_u64(l_k + r_k));
                Ok((deep.max_abs_diff(&approx), deep))
            })
            .collect();
        let per_k = per_k?;
        let gap = per_k
            .iter()
            .map(|(g, _)| g.clone())
            .fold(Rational::zero(), |x, y| x.max(y));
        counting_gap.push((format!("pair{idx}"), gap));
        // Mixture over gathered columns, deep route.
        let mixture: Interval = per_k
            .iter()
            .zip(&gathered)
            .map(|((_, deep), g)| g.mul_nonneg(&deep.clamp_unit()))
            .sum();
        let target = eval_joining(con, nu, a, b, max_stage)?;
        mixture_distance = mixture_distance.max(mixture.clamp_unit().max_abs_diff(&target));
    }

    Ok(FlatRoofReport {
        stage: j,
        defect: crate::tower::flat_roof_defect(con, j, max_stage)?,
        discrepancy,
        gather_mass,
        counting_gap,
        mixture_distance,
        identity_exact: true,
    })
}

fn at_stage_local(con: &Construction, set: &LevelSet, j: usize) -> Result<LevelSet> {
    if set.stage() == j {
        Ok(set.clone())
    } else {
        con.refine(set, j)
    }
}

enum CellRoute {
    OffDiag(Displacement),
    RelIndep(crate::coloring::ColoringFactor),
}

/// Displacement whose base autocorrelation gives the common cell mass of the
/// column at (possibly wrapped) offset `k` under `nu`.
fn column_cell_shift(
    con: &Construction,
    j: usize,
    nu: &JoiningSpec,
    k: i64,
) -> Result<CellRoute> {
    match nu {
        JoiningSpec::OffDiagonal(t) => Ok(CellRoute::OffDiag(match t {
            Displacement::Steps(v) => Displacement::Steps(vec![v[0] - k]),
            Displacement::Time(t) => {
                Displacement::Time(t.clone() - con.step(j).clone() * Rational::int(k))
            }
        })),
        JoiningSpec::GraphOfAction(t) => match column_cell_shift(
            con,
            j,
            &JoiningSpec::OffDiagonal(t.neg()),
            k,
        )? {
            CellRoute::OffDiag(d) => Ok(CellRoute::OffDiag(d)),
            other => Ok(other),
        },
        JoiningSpec::RelIndep(col) => Ok(CellRoute::RelIndep(col.clone())),
        JoiningSpec::Product => Err(Error::Internal(
            "product cells handled by the caller".into(),
        )),
    }
}
