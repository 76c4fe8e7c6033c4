//! Rectangular-tower analogues for Z^n actions: the fat-diagonal lower bound
//! with its explicit constant, the partial weak-closure search with the
//! 1/2^n column-share guarantee, and the two-step partial-rigidity
//! composition with the 1/2^(2n) constant.

use serde::{Deserialize, Serialize};

use crate::coloring::ColoringFactor;
use crate::error::{Error, Result};
use crate::joining::{
    column_mass, eval_joining, fat_diagonal, fat_diagonal_mass, nu_column_mass, Displacement,
    JoiningSpec,
};
use crate::rational::{Interval, Rational};
use crate::search::{
    choice_select, family_distance, Candidate, PairEval, ScanBudget, SearchReport, StageResult,
    TestFamily,
};
use crate::tower::Construction;

use rayon::prelude::*;

/// Largest rational epsilon = p/q with q <= `max_denom` satisfying
/// (1/2 - eps)^n > 1 - delta, if any.
pub fn largest_epsilon(n: u32, delta: &Rational, max_denom: u64) -> Option<Rational> {
    let one = Rational::one();
    let half = Rational::new(1, 2);
    let gap = &one - delta; // 1 - delta
    if gap.is_negative() {
        return None;
    }
    let mut best: Option<Rational> = None;
    for q in 1..=max_denom {
        // Largest p with (1/2 - p/q)^n > 1 - delta and 0 < p/q < 1/2.
        let mut lo = 0u64;
        let mut hi = q / 2 + 1;
        while lo + 1 < hi {
            let mid = (lo + hi) / 2;
            let eps = Rational::from_big(mid.into(), q.into());
            let ok = eps < half && (&half - &eps).pow(n) > gap;
            if ok {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        if lo > 0 {
            let eps = Rational::from_big(lo.into(), q.into());
            best = Some(match best {
                None => eps,
                Some(b) => b.max(eps),
            });
        }
    }
    best
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FatDiagonalBound {
    pub stage: usize,
    pub delta: Rational,
    pub epsilon: Rational,
    /// The asymptotic constant (2 eps)^n.
    pub bound: Rational,
    /// Finite-stage provable bound: mass of the central strip minus deficit.
    pub finite_bound: Rational,
    pub achieved: Interval,
    /// achieved.lo >= finite_bound (always provable for true joinings).
    pub finite_ok: bool,
    /// achieved.lo >= bound - deficit.
    pub asymptotic_ok: bool,
}

/// Certified fat-diagonal lower bound: checks the delta/epsilon inequalities,
/// computes the central-strip witness mass, and compares with the achieved
/// fat-diagonal mass of the given joining.
pub fn zn_fat_diag_lower_bound(
    con: &Construction,
    nu: &JoiningSpec,
    j: usize,
    delta: &Rational,
    epsilon: &Rational,
    max_stage: usize,
) -> Result<FatDiagonalBound> {
    con.check_stage(j)?;
    let n = con.dim() as u32;
    let one = Rational::one();
    let half = Rational::new(1, 2);
    let corner = &one - &Rational::new(1, 2).pow(n); // 1 - 1/2^n
    if delta <= &corner {
        return Err(Error::HypothesisViolated(format!(
            "delta > 1 - 1/2^n required: {delta} <= {corner}"
        )));
    }
    if epsilon.is_zero() || epsilon.is_negative() || epsilon >= &half {
        return Err(Error::HypothesisViolated(format!(
            "0 < epsilon < 1/2 required, got {epsilon}"
        )));
    }
    if (&half - epsilon).pow(n) <= &one - delta {
        return Err(Error::HypothesisViolated(format!(
            "(1/2 - epsilon)^n > 1 - delta required: ({})^{n} <= {}",
            &half - epsilon,
            &one - delta
        )));
    }
    let bound = (epsilon + epsilon).pow(n);
    // Central strip: per axis, integers r with (1/2-eps) h < r < (1/2+eps) h.
    // Every column through a strip cell lies inside the fat diagonal, so the
    // strip mass (minus the deficit) lower-bounds nu(D) for mu-marginals.
    let h = con.heights(j);
    let mut strip_cells = 1i128;
    for &hi in h {
        let lo_b = (&half - epsilon).scale_u64(hi);
        let hi_b = (&half + epsilon).scale_u64(hi);
        // integers strictly between lo_b and hi_b
        let lo_i = lo_b.floor_i128()? + 1;
        let mut hi_i = hi_b.floor_i128()?;
        if Rational::int(hi_i as i64) == hi_b {
            hi_i -= 1;
        }
        strip_cells *= (hi_i - lo_i + 1).max(0);
    }
    let strip_mass = Rational::int(strip_cells as i64) * con.base_measure(j).clone();
    let finite_bound = (&strip_mass - con.deficit(j)).max(Rational::zero());
    let achieved = fat_diagonal_mass(con, nu, j, delta, max_stage)?;
    let finite_ok = achieved.lo >= finite_bound;
    let asymptotic_ok = achieved.lo >= (&bound - con.deficit(j)).max(Rational::zero());
    Ok(FatDiagonalBound {
        stage: j,
        delta: delta.clone(),
        epsilon: epsilon.clone(),
        bound,
        finite_bound,
        achieved,
        finite_ok,
        asymptotic_ok,
    })
}

fn zn_delta_schedule(n: u32, j: usize) -> Rational {
    // Decreasing toward 1 - 1/2^n, staying strictly below 1.
    let corner = Rational::one() - Rational::new(1, 2).pow(n);
    let slack = Rational::new(1, 2).pow(n) * Rational::new(1, j as i64 + 2);
    corner + slack
}

/// Partial weak-closure search for Z^n: per stage, conditional off-diagonal
/// candidates over a fat diagonal shrinking toward 1 - 1/2^n, against the
/// graph joining of a commuting element. The selected column's share is
/// certified against the 1/2^n constant.
pub fn zn_partial_wct_search(
    con: &Construction,
    k_s: &[i64],
    stages: std::ops::RangeInclusive<usize>,
    family: &TestFamily,
    max_stage: usize,
    budget: &ScanBudget,
) -> Result<SearchReport> {
    let n = con.dim() as u32;
    let nu = JoiningSpec::OffDiagonal(Displacement::Steps(k_s.to_vec()));
    let target: Result<Vec<Interval>> = family
        .pairs
        .iter()
        .map(|p| eval_joining(con, &nu, &p.a, &p.b, max_stage))
        .collect();
    let target = target?;
    let mut out = Vec::new();
    for j in stages {
        let delta_j = zn_delta_schedule(n, j);
        let offsets = fat_diagonal(con, j, &delta_j)?;
        budget.charge(offsets.len() as u64 * (family.len() as u64 + 1))?;
        let hists: Result<Vec<_>> = family
            .pairs
            .par_iter()
            .map(|p| crate::joining::pair_histogram(con, j, &p.a, &p.b))
            .collect();
        let hists = hists?;
        let masses: Result<Vec<Interval>> = offsets
            .par_iter()
            .map(|k| nu_column_mass(con, &nu, j, k, max_stage))
            .collect();
        let masses = masses?;
        let mass_sum: Rational = masses.iter().map(|m| m.lo.clone()).sum();
        if mass_sum.is_zero() {
            return Err(Error::HypothesisViolated(format!(
                "target gives no mass to the stage-{j} fat diagonal"
            )));
        }
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
        // Certified by construction: the chosen offset lies in the
        // delta_j-fat diagonal, so its share is at least
        // (1 - delta_j)(1 - deficit).
        let floor = (Rational::one() - delta_j.clone())
            * (Rational::one() - con.deficit(j).clone());
        if share < floor {
            return Err(Error::Internal(format!(
                "column share {share} below fat-diagonal floor {floor}"
            )));
        }
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
            displacement: Rational::from_u64(
                chosen.offset.iter().map(|x| x.unsigned_abs()).max().unwrap_or(0),
            ),
            mixture_distance: Some(outcome.mixture_distance),
            projection: None,
            table,
        });
    }
    Ok(SearchReport {
        experiment: "zn-partial-wct".into(),
        target: nu.describe(),
        stages: out,
        notes: vec![format!("column share floor: 1/2^{n} along the schedule")],
    })
}

// ---------------------------------------------------------------------------
// Partial rigidity composition
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CompositionStep {
    pub index: usize,
    pub stage_small: usize,
    pub stage_large: usize,
    pub k_small: Vec<i64>,
    pub k_large: Vec<i64>,
    /// Composed displacement k_large - k_small.
    pub k_composed: Vec<i64>,
    pub epsilon: Rational,
    /// Certified constant (1/2^n - epsilon)^2.
    pub constant: Rational,
    /// Per family pair: achieved lower bound vs required bound.
    pub certificates: Vec<(String, Rational, Rational, bool)>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RigidityComposition {
    pub steps: Vec<CompositionStep>,
    pub all_passed: bool,
    pub notes: Vec<String>,
}

fn norm_inf(k: &[i64]) -> u64 {
    k.iter().map(|x| x.unsigned_abs()).max().unwrap_or(0)
}

/// The rigidity target for the composition: either the graph joining of a
/// commuting element (which cannot produce growing displacements and is
/// rejected with a growth error) or a coloring factor.
pub enum RigidityTarget<'a> {
    CommutingElement(&'a [i64]),
    Factor(&'a ColoringFactor),
}

/// Two-step partial-rigidity composition. A displacement sequence (k_j) is
/// found per stage with escalating minimum norm; consecutive picks are
/// composed as k' = k_large - k_small under the growth condition
/// |k_large| > 2 |k_small|, and the composed off-diagonal is certified
/// against (1/2^n - eps)^2 mu(A intersect B) minus the interval slack.
/// `epsilons` overrides the default slack sequence 1/(l+4).
pub fn zn_partial_rigidity_check(
    con: &Construction,
    target: RigidityTarget<'_>,
    stages: &[usize],
    family: &TestFamily,
    slack: &Rational,
    epsilons: Option<&[Rational]>,
    max_stage: usize,
    budget: &ScanBudget,
) -> Result<RigidityComposition> {
    let n = con.dim() as u32;
    if stages.len() < 2 {
        return Err(Error::Config(
            "the composition needs at least two stages".into(),
        ));
    }
    // Find per-stage displacements.
    let picks: Vec<(usize, Vec<i64>)> = match target {
        RigidityTarget::CommutingElement(k_s) => {
            // The graph target selects the same displacement at every stage;
            // the growth condition can never hold.
            let picks: Vec<(usize, Vec<i64>)> =
                stages.iter().map(|&j| (j, k_s.to_vec())).collect();
            let growth_possible = picks
                .windows(2)
                .any(|w| norm_inf(&w[1].1) > 2 * norm_inf(&w[0].1));
            if !growth_possible {
                return Err(Error::GrowthUnattainable(
                    "a commuting element inside the action yields a constant displacement sequence"
                        .into(),
                ));
            }
            picks
        }
        RigidityTarget::Factor(coloring) => {
            coloring.validate(con, max_stage)?;
            for p in &family.pairs {
                if !coloring.is_factor_measurable(con, &p.a)?
                    || !coloring.is_factor_measurable(con, &p.b)?
                {
                    return Err(Error::NotFactorMeasurable(p.label.clone()));
                }
            }
            let targets: Result<Vec<Interval>> = family
                .pairs
                .iter()
                .map(|p| con.measure(&con.intersect(&p.a, &p.b)?))
                .collect();
            let targets = targets?;
            let mut picks = Vec::new();
            let mut min_norm = 1u64;
            for &j in stages {
                con.check_stage(j)?;
                let h = con.heights(j).to_vec();
                if h.iter().any(|&hi| min_norm >= hi) {
                    return Err(Error::GrowthUnattainable(format!(
                        "stage {j} cannot reach displacement norm {min_norm}"
                    )));
                }
                // Candidates: offsets with max-norm in [min_norm, h-1],
                // scanned on the axis-aligned shell of minimal cost: all
                // offsets with every |k(i)| either 0 or in range, norm
                // constraint on the max.
                let mut offsets: Vec<Vec<i64>> = Vec::new();
                let per_axis: Vec<Vec<i64>> = h
                    .iter()
                    .map(|&hi| {
                        let mut v: Vec<i64> = Vec::new();
                        let mut m = min_norm;
                        while m < hi {
                            v.push(m as i64);
                            v.push(-(m as i64));
                            m *= 2;
                        }
                        v.sort();
                        v
                    })
                    .collect();
                let mut idx = vec![0usize; h.len()];
                loop {
                    let k: Vec<i64> =
                        idx.iter().zip(&per_axis).map(|(&i, v)| v[i]).collect();
                    if norm_inf(&k) >= min_norm {
                        offsets.push(k);
                    }
                    let mut ax = h.len();
                    let mut done = false;
                    loop {
                        if ax == 0 {
                            done = true;
                            break;
                        }
                        ax -= 1;
                        idx[ax] += 1;
                        if idx[ax] < per_axis[ax].len() {
                            break;
                        }
                        idx[ax] = 0;
                    }
                    if done {
                        break;
                    }
                }
                offsets.sort();
                offsets.dedup();
                if offsets.is_empty() {
                    return Err(Error::GrowthUnattainable(format!(
                        "no candidate displacement at stage {j} with norm at least {min_norm}"
                    )));
                }
                budget.charge(offsets.len() as u64 * family.len() as u64)?;
                let evals: Result<Vec<(Vec<i64>, Rational)>> = offsets
                    .par_iter()
                    .map(|k| {
                        let values: Result<Vec<Interval>> = family
                            .pairs
                            .iter()
                            .map(|p| {
                                eval_joining(
                                    con,
                                    &JoiningSpec::OffDiagonal(Displacement::Steps(k.clone())),
                                    &p.a,
                                    &p.b,
                                    max_stage,
                                )
                            })
                            .collect();
                        Ok((k.clone(), family_distance(&values?, &targets).hi))
                    })
                    .collect();
                let mut best: Option<(Vec<i64>, Rational)> = None;
                for (k, d) in evals? {
                    let better = match &best {
                        None => true,
                        Some((bk, bd)) => {
                            (d.clone(), norm_inf(&k), k.clone())
                                < (bd.clone(), norm_inf(bk), bk.clone())
                        }
                    };
                    if better {
                        best = Some((k, d));
                    }
                }
                let (k, _) = best.unwrap();
                min_norm = 2 * norm_inf(&k) + 1;
                picks.push((j, k));
            }
            picks
        }
    };

    // Compose consecutive picks.
    let constant_base = Rational::new(1, 2).pow(n); // 1/2^n
    let mut steps = Vec::new();
    let mut all_passed = true;
    for (ell, w) in picks.windows(2).enumerate() {
        let (j1, k1) = &w[0];
        let (j2, k2) = &w[1];
        if norm_inf(k2) <= 2 * norm_inf(k1) {
            return Err(Error::GrowthUnattainable(format!(
                "|k_{j2}| = {} must exceed 2 |k_{j1}| = {}",
                norm_inf(k2),
                2 * norm_inf(k1)
            )));
        }
        let k_comp: Vec<i64> = k2.iter().zip(k1).map(|(a, b)| a - b).collect();
        // Composition arithmetic: |k'| >= |k2| - |k1| > |k1|.
        debug_assert!(norm_inf(&k_comp) >= norm_inf(k2) - norm_inf(k1));
        let eps = match epsilons {
            Some(e) => e
                .get(ell)
                .cloned()
                .unwrap_or_else(|| Rational::new(1, ell as i64 + 4)),
            None => Rational::new(1, ell as i64 + 4),
        };
        let constant = (&constant_base - &eps).max(Rational::zero()).pow(2);
        let mut certificates = Vec::new();
        for p in &family.pairs {
            let achieved = eval_joining(
                con,
                &JoiningSpec::OffDiagonal(Displacement::Steps(k_comp.clone())),
                &p.a,
                &p.b,
                max_stage,
            )?;
            let base = con.measure(&con.intersect(&p.a, &p.b)?)?.lo;
            let required = (&(&constant * &base) - slack).max(Rational::zero());
            let ok = achieved.lo >= required;
            all_passed &= ok;
            certificates.push((p.label.clone(), achieved.lo.clone(), required, ok));
        }
        steps.push(CompositionStep {
            index: ell,
            stage_small: *j1,
            stage_large: *j2,
            k_small: k1.clone(),
            k_large: k2.clone(),
            k_composed: k_comp,
            epsilon: eps,
            constant,
            certificates,
        });
    }
    Ok(RigidityComposition {
        steps,
        all_passed,
        notes: vec![format!(
            "certified constant floor 1/2^(2n) = {}",
            constant_base.pow(2)
        )],
    })
}
