//! Built tower stages: exact heights, steps, base measures, deficits, and the
//! refinement geometry connecting consecutive stages.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rational::{Interval, Rational};
use crate::schedule::{Schedule, ScheduleKind, StageRule};

/// Exact data for one constructed stage.
#[derive(Clone, Debug)]
pub struct StageInfo {
    pub stage: usize,
    /// Step duration s_j (1 for Z and Z^n actions).
    pub step: Rational,
    /// Heights per axis (length 1 for Z and flows).
    pub heights: Vec<u64>,
    /// Measure of the base cell E_j.
    pub base_measure: Rational,
    /// Mass of the space not yet inside the stage-j tower.
    pub deficit: Rational,
}

impl StageInfo {
    pub fn total_height(&self) -> u64 {
        self.heights.iter().product()
    }

    pub fn tower_mass(&self) -> Rational {
        self.base_measure.scale_u64(self.total_height())
    }
}

/// Per-stage refinement geometry: where each cut column of stage j lands in
/// the stage j+1 index space, per axis, plus the step subdivision count.
#[derive(Clone, Debug)]
pub(crate) struct StageGeom {
    pub info: StageInfo,
    /// Mixed-radix strides for flattening n-dim level coordinates.
    pub strides: Vec<u64>,
    /// `offsets[ax][c]` = stage-(j+1) start index of column c on that axis.
    pub offsets: Vec<Vec<u64>>,
    /// Step subdivision q_j (axis 0 only; 1 elsewhere and for Z/Z^n).
    pub substeps: u64,
}

/// An immutable built construction: the schedule plus stages `0..=built`.
/// All level-set operations borrow this; it is freely shareable across
/// threads.
#[derive(Clone, Debug)]
pub struct Construction {
    schedule: Schedule,
    stages: Vec<StageGeom>,
}

impl Construction {
    /// Build stages 0..=`upto`. Stage building is sequential by stage; the
    /// result is immutable.
    pub fn build(schedule: &Schedule, upto: usize) -> Result<Self> {
        schedule.validate_shape()?;
        if upto > schedule.horizon() {
            return Err(Error::StageNotBuilt {
                stage: upto,
                built: schedule.horizon(),
            });
        }
        let n = schedule.n;
        let mut stages: Vec<StageGeom> = Vec::with_capacity(upto + 1);
        let mut step = schedule.s0.clone();
        let mut heights = vec![1u64; n];
        let mut base = &schedule.m0 / &schedule.total_mass;
        let mut deficit = Rational::one() - base.clone();
        if deficit.is_negative() {
            return Err(Error::InvalidSchedule("m0 exceeds total mass".into()));
        }
        for j in 0..=upto {
            let strides = strides_for(&heights).ok_or(Error::TowerTooLarge(j))?;
            let (offsets, substeps) = if j < schedule.horizon() {
                geometry(schedule, &schedule.stages[j], &heights)
            } else {
                (vec![Vec::new(); n], 1)
            };
            stages.push(StageGeom {
                info: StageInfo {
                    stage: j,
                    step: step.clone(),
                    heights: heights.clone(),
                    base_measure: base.clone(),
                    deficit: deficit.clone(),
                },
                strides,
                offsets,
                substeps,
            });
            if j == upto {
                break;
            }
            let rule = &schedule.stages[j];
            let mut shrink = 1u64;
            let mut old_cells = 1u64;
            let mut new_cells = 1u64;
            for ax in 0..n {
                let rq = rule.r[ax] as u64 * if ax == 0 { rule.q as u64 } else { 1 };
                shrink = shrink.checked_mul(rq).ok_or(Error::TowerTooLarge(j))?;
                let grown = heights[ax].checked_mul(rq).ok_or(Error::TowerTooLarge(j))?;
                let extra = match schedule.kind {
                    ScheduleKind::Rect => rule.sigma[ax],
                    _ if ax == 0 => rule.sigma.iter().sum(),
                    _ => 0,
                };
                old_cells = old_cells
                    .checked_mul(grown)
                    .ok_or(Error::TowerTooLarge(j))?;
                heights[ax] = grown.checked_add(extra).ok_or(Error::TowerTooLarge(j))?;
                new_cells = new_cells
                    .checked_mul(heights[ax])
                    .ok_or(Error::TowerTooLarge(j))?;
            }
            step = step / Rational::from_u64(rule.q as u64);
            base = base / Rational::from_u64(shrink);
            let spacer_mass = base.scale_u64(new_cells - old_cells);
            if spacer_mass > deficit {
                return Err(Error::SpacerBudgetExceeded {
                    stage: j,
                    remaining: deficit.to_string(),
                    requested: spacer_mass.to_string(),
                });
            }
            deficit -= spacer_mass;
            // Conservation: total height * base + deficit = 1 exactly.
            debug_assert_eq!(
                base.scale_u64(heights.iter().product()) + deficit.clone(),
                Rational::one()
            );
        }
        Ok(Construction {
            schedule: schedule.clone(),
            stages,
        })
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn kind(&self) -> ScheduleKind {
        self.schedule.kind
    }

    pub fn dim(&self) -> usize {
        self.schedule.n
    }

    /// Index of the deepest built stage.
    pub fn last_stage(&self) -> usize {
        self.stages.len() - 1
    }

    pub fn check_stage(&self, j: usize) -> Result<()> {
        if j < self.stages.len() {
            Ok(())
        } else {
            Err(Error::StageNotBuilt {
                stage: j,
                built: self.last_stage(),
            })
        }
    }

    pub fn stage_info(&self, j: usize) -> Result<&StageInfo> {
        self.check_stage(j)?;
        Ok(&self.stages[j].info)
    }

    pub fn heights(&self, j: usize) -> &[u64] {
        &self.stages[j].info.heights
    }

    pub fn step(&self, j: usize) -> &Rational {
        &self.stages[j].info.step
    }

    pub fn base_measure(&self, j: usize) -> &Rational {
        &self.stages[j].info.base_measure
    }

    pub fn deficit(&self, j: usize) -> &Rational {
        &self.stages[j].info.deficit
    }

    pub fn total_height(&self, j: usize) -> u64 {
        self.stages[j].info.total_height()
    }

    /// Step subdivision count for the transition j -> j+1 on the time axis.
    pub fn substeps(&self, j: usize) -> u64 {
        self.stages[j].substeps
    }

    pub fn flatten(&self, j: usize, coords: &[u64]) -> u64 {
        let g = &self.stages[j];
        coords
            .iter()
            .zip(&g.strides)
            .map(|(c, s)| c * s)
            .sum::<u64>()
    }

    pub fn unflatten(&self, j: usize, mut level: u64) -> Vec<u64> {
        let g = &self.stages[j];
        let mut out = Vec::with_capacity(g.strides.len());
        for s in &g.strides {
            out.push(level / s);
            level %= s;
        }
        out
    }

    /// Parent of a stage-w cell in the stage-(w-1) index space; `None` for
    /// cells sitting on spacer mass introduced at that transition.
    pub fn parent_cell(&self, w: usize, coords: &[u64]) -> Option<Vec<u64>> {
        debug_assert!(w >= 1);
        let g = &self.stages[w - 1];
        let mut parent = Vec::with_capacity(coords.len());
        for ax in 0..coords.len() {
            let offs = &g.offsets[ax];
            let q = if ax == 0 { g.substeps } else { 1 };
            let span = g.info.heights[ax] * q;
            // Rightmost column start at or below the coordinate.
            let c = match offs.binary_search(&coords[ax]) {
                Ok(i) => i,
                Err(0) => return None,
                Err(i) => i - 1,
            };
            let rel = coords[ax] - offs[c];
            if rel >= span {
                return None; // spacer inserted above column c
            }
            parent.push(rel / q);
        }
        Some(parent)
    }

    /// Ancestor of a stage-w level at a coarser stage, if the cell descends
    /// from tower mass already present there.
    pub fn ancestor_level(&self, w: usize, level: u64, to_stage: usize) -> Option<u64> {
        debug_assert!(to_stage <= w);
        let mut coords = self.unflatten(w, level);
        let mut stage = w;
        while stage > to_stage {
            coords = self.parent_cell(stage, &coords)?;
            stage -= 1;
        }
        Some(self.flatten(to_stage, &coords))
    }

    /// Children of a stage-j cell in the stage-(j+1) index space.
    pub(crate) fn children(&self, j: usize, coords: &[u64]) -> Vec<Vec<u64>> {
        let g = &self.stages[j];
        let n = coords.len();
        let mut axis_choices: Vec<Vec<u64>> = Vec::with_capacity(n);
        for ax in 0..n {
            let q = if ax == 0 { g.substeps } else { 1 };
            let mut v = Vec::with_capacity(g.offsets[ax].len() * q as usize);
            for &off in &g.offsets[ax] {
                for u in 0..q {
                    v.push(off + coords[ax] * q + u);
                }
            }
            axis_choices.push(v);
        }
        cartesian(&axis_choices)
    }

    /// Number of stage-(j+1) children per stage-j cell.
    pub fn children_per_cell(&self, j: usize) -> u64 {
        let g = &self.stages[j];
        g.offsets
            .iter()
            .enumerate()
            .map(|(ax, offs)| offs.len() as u64 * if ax == 0 { g.substeps } else { 1 })
            .product()
    }

    /// Steps of the stage-w grid that one stage-j step spans (flows: product
    /// of the step ratios; 1-per-stage for Z and Z^n).
    pub fn step_scale(&self, j: usize, w: usize) -> u64 {
        (j..w).map(|i| self.stages[i].substeps).product()
    }
}

fn strides_for(heights: &[u64]) -> Option<Vec<u64>> {
    let mut strides = vec![1u64; heights.len()];
    for ax in (0..heights.len().saturating_sub(1)).rev() {
        strides[ax] = strides[ax + 1].checked_mul(heights[ax + 1])?;
    }
    // Total size must also be representable.
    strides[0].checked_mul(heights[0])?;
    Some(strides)
}

fn geometry(schedule: &Schedule, rule: &StageRule, heights: &[u64]) -> (Vec<Vec<u64>>, u64) {
    let n = heights.len();
    let substeps = rule.q as u64;
    let mut offsets = Vec::with_capacity(n);
    for ax in 0..n {
        let r = rule.r[ax] as u64;
        let span = heights[ax] * if ax == 0 { substeps } else { 1 };
        let mut offs = Vec::with_capacity(r as usize);
        let mut pos = 0u64;
        for c in 0..r {
            offs.push(pos);
            pos += span;
            // Per-column spacers land above column c (Z/flows only).
            if schedule.kind != ScheduleKind::Rect && ax == 0 {
                pos += rule.sigma[c as usize];
            }
        }
        offsets.push(offs);
    }
    (offsets, substeps)
}

fn cartesian(choices: &[Vec<u64>]) -> Vec<Vec<u64>> {
    let mut out: Vec<Vec<u64>> = vec![Vec::new()];
    for axis in choices {
        let mut next = Vec::with_capacity(out.len() * axis.len());
        for prefix in &out {
            for &v in axis {
                let mut p = prefix.clone();
                p.push(v);
                next.push(p);
            }
        }
        out = next;
    }
    out
}

// ---------------------------------------------------------------------------
// Schedule acceleration (re-basing coarse stages on deeper fine stages)
// ---------------------------------------------------------------------------

/// One re-based stage: the stage-j partition keeps its step but its base is
/// the union of the first `block` levels of the source stage, stacked into
/// `height` blocks.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AccelStage {
    pub stage: usize,
    pub source_stage: usize,
    /// block length = s_j / s_{source}.
    pub block: u64,
    /// Re-based height: floor(h_{source} / block).
    pub height: u64,
    pub step: Rational,
    /// Mass not covered by the re-based tower (source deficit plus the
    /// truncated top remainder).
    pub deficit: Rational,
}

#[derive(Clone, Debug)]
pub struct AcceleratedSchedule {
    pub stages: Vec<AccelStage>,
}

impl AcceleratedSchedule {
    /// The re-based level `i` of stage `j` as a set of source-stage levels.
    pub fn level_range(&self, j: usize, i: u64) -> (usize, std::ops::Range<u64>) {
        let st = &self.stages[j];
        (st.source_stage, (i * st.block)..((i + 1) * st.block))
    }
}

/// Re-base each stage j on the smallest stage n >= j making
/// `s_j^2 * height` reach `targets[j]`. Requires the base schedule to pass
/// the `s_j h_j` growth validation first.
pub fn accelerate_schedule(
    con: &Construction,
    targets: &[Rational],
) -> Result<AcceleratedSchedule> {
    if con.kind() != ScheduleKind::Flow {
        return Err(Error::InvalidSchedule(
            "acceleration applies to flow schedules".into(),
        ));
    }
    let report = crate::schedule::validate_schedule(con.schedule(), con.last_stage())?;
    let growth = report
        .check("s_j h_j -> infinity")
        .map(|c| c.status == crate::schedule::CheckStatus::Pass)
        .unwrap_or(false);
    if !growth {
        return Err(Error::HypothesisViolated(
            "s_j h_j -> infinity must hold before acceleration".into(),
        ));
    }
    let horizon = con.last_stage();
    let mut out = Vec::new();
    for (j, target) in targets.iter().enumerate() {
        if j > horizon {
            return Err(Error::StageNotBuilt {
                stage: j,
                built: horizon,
            });
        }
        let sj = con.step(j).clone();
        let sj2 = &sj * &sj;
        let mut found = None;
        for n in j..=horizon {
            let block = con.step_scale(j, n);
            let height = con.heights(n)[0] / block;
            if height == 0 {
                continue;
            }
            let value = sj2.scale_u64(height);
            if &value >= target {
                let src = con.stage_info(n)?;
                let remainder = src.heights[0] - height * block;
                found = Some(AccelStage {
                    stage: j,
                    source_stage: n,
                    block,
                    height,
                    step: sj.clone(),
                    deficit: src.deficit.clone() + src.base_measure.scale_u64(remainder),
                });
                break;
            }
        }
        match found {
            Some(st) => out.push(st),
            None => {
                return Err(Error::NoAdmissibleStage { stage: j, horizon });
            }
        }
    }
    Ok(AcceleratedSchedule { stages: out })
}

// ---------------------------------------------------------------------------
// Flat-roof defect
// ---------------------------------------------------------------------------

/// Normalized flat-roof defect at stage j, resolved through stage `max_stage`:
/// the measure of the symmetric difference between the base and its translate
/// by one full tower height, divided by the base measure. Certified interval;
/// unresolved overflow becomes width.
pub fn flat_roof_defect(con: &Construction, j: usize, max_stage: usize) -> Result<Interval> {
    con.check_stage(max_stage)?;
    con.check_stage(j)?;
    if max_stage <= j {
        return Err(Error::InvalidSchedule(
            "flat-roof defect needs at least one stage beyond j".into(),
        ));
    }
    let base = crate::level_set::LevelSet::origin(con, j)?;
    let h = con.heights(j)[0];
    // Work one stage deeper so the full-height shift is in range.
    let work = j + 1;
    let base_work = con.refine(&base, work)?;
    let shift = (h as i128) * con.step_scale(j, work) as i128;
    if shift.unsigned_abs() >= con.heights(work)[0] as u128 {
        return Err(Error::ShiftOutOfRange {
            stage: work,
            shift,
            height: con.heights(work)[0],
        });
    }
    let mut shift_vec = vec![0i128; con.dim()];
    shift_vec[0] = shift;
    let tr = con.translate(&base_work, &shift_vec, max_stage)?;
    // mu(A sym diff B) = mu(A) + mu(B) - 2 mu(A intersect B), with the lost
    // mass contributing width on both sides.
    let mu_base = con.base_measure(j).clone();
    let inter = tr.intersection_measure(con, &base)?;
    let sym = &(&mu_base + &tr.measure(con)) - &(&inter + &inter);
    let lo = (&sym - &tr.lost_mass).max(Rational::zero());
    let hi = &sym + &tr.lost_mass;
    let inv = mu_base.recip()?;
    Ok(Interval::new(lo, hi).scale(&inv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rational::rat;
    use crate::schedule::preset;

    #[test]
    fn odometer_stage_three() {
        let s = preset("odometer", Some(8)).unwrap();
        let con = Construction::build(&s, 8).unwrap();
        let st = con.stage_info(3).unwrap();
        assert_eq!(st.heights, vec![8]);
        assert_eq!(st.base_measure, rat("1/8"));
        assert_eq!(st.deficit, rat("0"));
    }

    #[test]
    fn chacon_heights_and_deficit() {
        let s = preset("chacon", Some(6)).unwrap();
        let con = Construction::build(&s, 4).unwrap();
        let hs: Vec<u64> = (0..=3).map(|j| con.heights(j)[0]).collect();
        assert_eq!(hs, vec![1, 4, 13, 40]);
        assert_eq!(con.base_measure(1), &rat("2/9"));
        // deficit_j = 3^-(j+1)
        assert_eq!(con.deficit(0), &rat("1/3"));
        assert_eq!(con.deficit(2), &rat("1/27"));
    }

    #[test]
    fn flow_odometer_step_and_height() {
        let s = preset("flow-odometer", Some(4)).unwrap();
        let con = Construction::build(&s, 4).unwrap();
        assert_eq!(con.step(2), &rat("1/4"));
        assert_eq!(con.heights(2), &[64]);
        let sh = con.step(2).scale_u64(64);
        assert_eq!(sh, rat("16"));
    }

    #[test]
    fn flat_staircase_heights_match_closed_form() {
        let s = preset("flat-staircase", Some(8)).unwrap();
        let con = Construction::build(&s, 8).unwrap();
        // h_j = 2*(j+1)! - 1
        let mut fact = 1u64;
        for j in 0..=8u64 {
            fact *= j + 1;
            assert_eq!(con.heights(j as usize)[0], 2 * fact - 1);
        }
        assert_eq!(con.deficit(3), &rat("1/48")); // 1 / (2 * 4!)
    }

    #[test]
    fn conservation_on_all_presets() {
        for name in ["odometer", "chacon", "flat-staircase", "flow-odometer"] {
            let s = preset(name, Some(8)).unwrap();
            let con = Construction::build(&s, 8).unwrap();
            for j in 0..=8 {
                let st = con.stage_info(j).unwrap();
                assert_eq!(
                    st.tower_mass() + st.deficit.clone(),
                    rat("1"),
                    "conservation at stage {j} of {name}"
                );
            }
        }
    }

    #[test]
    fn grid_odometer_dimensions() {
        let s = preset("grid-odometer-2", Some(5)).unwrap();
        let con = Construction::build(&s, 5).unwrap();
        assert_eq!(con.heights(5), &[32, 32]);
        assert_eq!(con.base_measure(5), &rat("1/1024"));
        assert_eq!(con.total_height(5), 1024);
    }

    #[test]
    fn spacer_budget_enforced() {
        // One column of width 1 with an immediate huge spacer burst.
        let s = Schedule::z(
            rat("9/10"),
            rat("1"),
            vec![StageRule {
                r: vec![2],
                q: 1,
                sigma: vec![0, 5],
            }],
        )
        .unwrap();
        assert!(matches!(
            Construction::build(&s, 1),
            Err(Error::SpacerBudgetExceeded { .. })
        ));
    }

    #[test]
    fn accelerate_q2_r2_flow() {
        // s_j = 2^-j, h_j = 4^j: s_j^2 h_j constant, s_j h_j doubling.
        let s = Schedule::flow(
            rat("1"),
            rat("1"),
            rat("1"),
            (0..16)
                .map(|_| StageRule {
                    r: vec![2],
                    q: 2,
                    sigma: vec![0, 0],
                })
                .collect(),
        )
        .unwrap();
        let con = Construction::build(&s, 16).unwrap();
        // Block-length ratio between declared steps: s_2 / s_5 = 8.
        assert_eq!(con.step_scale(2, 5), 8);
        let targets: Vec<Rational> = (0..=6).map(Rational::int).collect();
        let acc = accelerate_schedule(&con, &targets).unwrap();
        for (j, st) in acc.stages.iter().enumerate() {
            let sj2 = con.step(j) * con.step(j);
            assert!(
                sj2.scale_u64(st.height) >= Rational::int(j as i64),
                "threshold at stage {j}"
            );
        }
        // Already-satisfied stages re-base on themselves.
        assert_eq!(acc.stages[0].source_stage, 0);
        assert_eq!(acc.stages[0].block, 1);
    }

    #[test]
    fn flat_roof_defect_examples() {
        // Dyadic odometer: the base translate nearly closes; at J = 8 the
        // certified interval sits inside [0, 2^-5].
        let odo = Construction::build(&preset("odometer", Some(10)).unwrap(), 10).unwrap();
        let d = flat_roof_defect(&odo, 2, 8).unwrap();
        assert!(d.lo >= rat("0") && d.hi <= rat("1/32"), "{d:?}");

        // Trivial tower at stage 0 on the spacerless preset: everything
        // resolves up to the cascade tail.
        let d0 = flat_roof_defect(&odo, 0, 9).unwrap();
        assert_eq!(d0.lo, rat("0"));
        assert!(d0.hi <= rat("1/32"), "{d0:?}");

        // Chacon: one of the three base copies lands on the spacer level;
        // the defect stays at least 1/2.
        let ch = Construction::build(&preset("chacon", Some(8)).unwrap(), 8).unwrap();
        let d = flat_roof_defect(&ch, 2, 6).unwrap();
        assert!(d.lo >= rat("1/2"), "{d:?}");

        // Staircase: exactly 2/(j+2), resolved fully one stage up.
        let st = Construction::build(&preset("flat-staircase", Some(8)).unwrap(), 8).unwrap();
        for j in 2..=6 {
            let d = flat_roof_defect(&st, j, j + 1).unwrap();
            assert_eq!(d.lo, d.hi);
            assert_eq!(d.hi, Rational::new(2, j as i64 + 2));
        }
    }

    #[test]
    fn flat_roof_defect_shrinks_with_depth() {
        let odo = Construction::build(&preset("odometer", Some(12)).unwrap(), 12).unwrap();
        let mut prev: Option<Interval> = None;
        for max_stage in 3..=12 {
            let d = flat_roof_defect(&odo, 2, max_stage).unwrap();
            if let Some(p) = &prev {
                assert!(
                    p.lo <= d.lo && d.hi <= p.hi,
                    "interval widened at depth {max_stage}"
                );
            }
            prev = Some(d);
        }
    }

    #[test]
    fn accelerated_levels_are_exact_coarsenings() {
        let s = Schedule::flow(
            rat("1"),
            rat("1"),
            rat("1"),
            (0..12)
                .map(|_| StageRule {
                    r: vec![2],
                    q: 2,
                    sigma: vec![0, 0],
                })
                .collect(),
        )
        .unwrap();
        let con = Construction::build(&s, 12).unwrap();
        let targets: Vec<Rational> = (0..=4).map(Rational::int).collect();
        let acc = accelerate_schedule(&con, &targets).unwrap();
        for (j, st) in acc.stages.iter().enumerate() {
            // Each re-based level is an exact union of source-stage levels:
            // measure equality and pairwise disjointness across levels.
            let mut seen: Vec<u64> = Vec::new();
            let take = st.height.min(8);
            for i in 0..take {
                let (src, range) = acc.level_range(j, i);
                let set = crate::level_set::LevelSet::new(
                    &con,
                    src,
                    range.clone().collect(),
                )
                .unwrap();
                assert_eq!(
                    con.measure(&set).unwrap().lo,
                    con.base_measure(src).scale_u64(st.block),
                    "level measure at stage {j}"
                );
                for l in range {
                    assert!(!seen.contains(&l), "levels overlap");
                    seen.push(l);
                }
            }
            // Conservation of the re-based stage.
            let covered = con.base_measure(st.source_stage).scale_u64(st.block * st.height);
            assert_eq!(covered + st.deficit.clone(), rat("1"));
        }
    }

    #[test]
    fn accelerate_requires_growth() {
        let s = Schedule::flow(
            rat("1"),
            rat("1"),
            rat("1"),
            (0..6)
                .map(|_| StageRule {
                    r: vec![1],
                    q: 2,
                    sigma: vec![0],
                })
                .collect(),
        )
        .unwrap();
        let con = Construction::build(&s, 6).unwrap();
        assert!(matches!(
            accelerate_schedule(&con, &[Rational::int(1)]),
            Err(Error::HypothesisViolated(_))
        ));
    }
}
