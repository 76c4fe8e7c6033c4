//! Tower-measurable sets as finite sets of level indices at a stage, and the
//! exact set operations on them: measure, cross-stage refinement, translation
//! by the action with overflow tracking, and symmetric differences.
//!
//! Translation is the one operation that can leave the finite tower: levels
//! whose translate does not resolve inside any tower up to `max_stage` are
//! counted into an exact "lost" mass. Downstream evaluations turn that lost
//! mass into interval width, never into an error.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::rational::{Interval, Rational};
use crate::tower::Construction;

/// Cap on materialized level counts; guards against accidental deep refines.
pub const MAX_LEVELS: u64 = 8_000_000;

/// A tower-measurable set: a finite set of (flattened) level indices at one
/// stage. Indices are kept sorted and unique.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LevelSet {
    stage: usize,
    levels: Vec<u64>,
}

impl LevelSet {
    pub fn new(con: &Construction, stage: usize, mut levels: Vec<u64>) -> Result<Self> {
        con.check_stage(stage)?;
        let total = con.total_height(stage);
        levels.sort_unstable();
        levels.dedup();
        if let Some(&max) = levels.last() {
            if max >= total {
                return Err(Error::OffsetOutOfRange(format!("level {max}"), stage));
            }
        }
        Ok(LevelSet { stage, levels })
    }

    /// The base cell E_j as a singleton set.
    pub fn origin(con: &Construction, stage: usize) -> Result<Self> {
        LevelSet::new(con, stage, vec![0])
    }

    pub fn singleton(con: &Construction, stage: usize, level: u64) -> Result<Self> {
        LevelSet::new(con, stage, vec![level])
    }

    /// The whole stage-j tower (every level). Materialized; sized-capped.
    pub fn full_tower(con: &Construction, stage: usize) -> Result<Self> {
        con.check_stage(stage)?;
        let total = con.total_height(stage);
        if total > MAX_LEVELS {
            return Err(Error::SetTooLarge { cap: MAX_LEVELS });
        }
        Ok(LevelSet {
            stage,
            levels: (0..total).collect(),
        })
    }

    pub fn stage(&self) -> usize {
        self.stage
    }

    pub fn levels(&self) -> &[u64] {
        &self.levels
    }

    pub fn len(&self) -> u64 {
        self.levels.len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn contains(&self, level: u64) -> bool {
        self.levels.binary_search(&level).is_ok()
    }
}

/// Result of translating a level set: the resolved image, kept as one sparse
/// piece per stage (overflow resolves deeper without forcing the shallow bulk
/// to be re-materialized), plus the exact mass still unresolved at the
/// maximum stage.
#[derive(Clone, Debug)]
pub struct Translated {
    /// Resolved pieces in ascending stage order; mutually disjoint.
    pub pieces: Vec<LevelSet>,
    pub lost_mass: Rational,
    pub lost_cells: u64,
}

impl Translated {
    pub fn deepest_stage(&self) -> Option<usize> {
        self.pieces.last().map(|p| p.stage)
    }

    /// Exact total measure of the resolved image.
    pub fn measure(&self, con: &Construction) -> Rational {
        self.pieces
            .iter()
            .map(|p| con.base_measure(p.stage).scale_u64(p.len()))
            .sum()
    }

    /// Exact measure of the intersection with a tower-measurable set whose
    /// stage is at most every piece's stage. Computed by ancestor lookup;
    /// nothing is materialized at deep stages.
    pub fn intersection_measure(&self, con: &Construction, set: &LevelSet) -> Result<Rational> {
        let mut total = Rational::zero();
        for piece in &self.pieces {
            if piece.stage < set.stage {
                return Err(Error::StageNotBuilt {
                    stage: piece.stage,
                    built: set.stage,
                });
            }
            let mut hits = 0u64;
            for &lvl in &piece.levels {
                if let Some(anc) = con.ancestor_level(piece.stage, lvl, set.stage) {
                    if set.contains(anc) {
                        hits += 1;
                    }
                }
            }
            total += con.base_measure(piece.stage).scale_u64(hits);
        }
        Ok(total)
    }

    /// Single-stage image at the deepest piece stage. Intended for small
    /// examples; capped like any refinement.
    pub fn materialize(&self, con: &Construction) -> Result<LevelSet> {
        let Some(stage) = self.deepest_stage() else {
            return LevelSet::new(con, 0, vec![]);
        };
        let mut levels: Vec<u64> = Vec::new();
        for piece in &self.pieces {
            let refined = con.refine(piece, stage)?;
            levels.extend(refined.levels);
        }
        levels.sort_unstable();
        levels.dedup();
        Ok(LevelSet { stage, levels })
    }
}

impl Construction {
    /// Exact measure of a tower-measurable set, as a (point) interval.
    pub fn measure(&self, set: &LevelSet) -> Result<Interval> {
        self.check_stage(set.stage)?;
        Ok(Interval::point(
            self.base_measure(set.stage).scale_u64(set.len()),
        ))
    }

    /// Exact measure of the complement of an in-tower set. The complement is
    /// never materialized as levels; its mass is exact because the space has
    /// total mass 1.
    pub fn complement_measure(&self, set: &LevelSet) -> Result<Rational> {
        let m = self.measure(set)?;
        Ok(Rational::one() - m.lo)
    }

    /// Refine a set to a finer stage; the result is measure-identical.
    pub fn refine(&self, set: &LevelSet, to_stage: usize) -> Result<LevelSet> {
        self.check_stage(to_stage)?;
        if to_stage < set.stage {
            return Err(Error::StageNotBuilt {
                stage: to_stage,
                built: set.stage,
            });
        }
        let mut levels = set.levels.clone();
        for w in set.stage..to_stage {
            let per = self.children_per_cell(w);
            let projected = levels.len() as u64 * per;
            if projected > MAX_LEVELS {
                return Err(Error::SetTooLarge { cap: MAX_LEVELS });
            }
            let mut next = Vec::with_capacity(projected as usize);
            for &lvl in &levels {
                let coords = self.unflatten(w, lvl);
                for child in self.children(w, &coords) {
                    next.push(self.flatten(w + 1, &child));
                }
            }
            next.sort_unstable();
            levels = next;
        }
        Ok(LevelSet {
            stage: to_stage,
            levels,
        })
    }

    /// Translate a set by `shift` steps of the stage grid (per axis), resolving
    /// overflow through deeper stages up to `max_stage`. Conservation holds
    /// exactly: measure(set) = measure(image) + lost_mass.
    pub fn translate(
        &self,
        set: &LevelSet,
        shift: &[i128],
        max_stage: usize,
    ) -> Result<Translated> {
        self.check_stage(max_stage)?;
        self.check_stage(set.stage)?;
        if shift.len() != self.dim() {
            return Err(Error::Internal("shift dimension mismatch".into()));
        }
        if max_stage < set.stage {
            return Err(Error::StageNotBuilt {
                stage: max_stage,
                built: set.stage,
            });
        }
        let h0 = self.heights(set.stage);
        for (ax, &s) in shift.iter().enumerate() {
            if s.unsigned_abs() >= h0[ax] as u128 {
                return Err(Error::ShiftOutOfRange {
                    stage: set.stage,
                    shift: s,
                    height: h0[ax],
                });
            }
        }

        let mut resolved: BTreeMap<usize, Vec<u64>> = BTreeMap::new();
        let mut pending: Vec<Vec<u64>> = set
            .levels
            .iter()
            .map(|&l| self.unflatten(set.stage, l))
            .collect();
        let mut shift_now: Vec<i128> = shift.to_vec();
        let mut lost_cells = 0u64;
        let mut w = set.stage;
        loop {
            let hw = self.heights(w);
            let mut next_pending: Vec<Vec<u64>> = Vec::new();
            for cell in pending {
                let mut target = Vec::with_capacity(cell.len());
                let mut inside = true;
                for ax in 0..cell.len() {
                    let t = cell[ax] as i128 + shift_now[ax];
                    if t < 0 || t >= hw[ax] as i128 {
                        inside = false;
                        break;
                    }
                    target.push(t as u64);
                }
                if inside {
                    resolved
                        .entry(w)
                        .or_default()
                        .push(self.flatten(w, &target));
                } else if w == max_stage {
                    lost_cells += 1;
                } else {
                    next_pending.extend(self.children(w, &cell));
                }
            }
            if w == max_stage || next_pending.is_empty() {
                break;
            }
            let q = self.substeps(w) as i128;
            shift_now[0] *= q;
            pending = next_pending;
            w += 1;
            if pending.len() as u64 > MAX_LEVELS {
                return Err(Error::SetTooLarge { cap: MAX_LEVELS });
            }
        }

        let pieces: Vec<LevelSet> = resolved
            .into_iter()
            .map(|(stage, mut levels)| {
                levels.sort_unstable();
                levels.dedup();
                LevelSet { stage, levels }
            })
            .collect();
        let lost_mass = if lost_cells > 0 {
            self.base_measure(max_stage).scale_u64(lost_cells)
        } else {
            Rational::zero()
        };
        let out = Translated {
            pieces,
            lost_mass,
            lost_cells,
        };
        debug_assert_eq!(
            out.measure(self) + out.lost_mass.clone(),
            self.measure(set)?.lo,
            "translation conservation"
        );
        Ok(out)
    }

    /// Refine both sets to their common (finer) stage.
    pub fn align(&self, a: &LevelSet, b: &LevelSet) -> Result<(LevelSet, LevelSet)> {
        let stage = a.stage.max(b.stage);
        Ok((self.refine(a, stage)?, self.refine(b, stage)?))
    }

    pub fn intersect(&self, a: &LevelSet, b: &LevelSet) -> Result<LevelSet> {
        let (a, b) = self.align(a, b)?;
        let levels = a
            .levels
            .iter()
            .filter(|l| b.levels.binary_search(l).is_ok())
            .copied()
            .collect();
        Ok(LevelSet {
            stage: a.stage,
            levels,
        })
    }

    pub fn union(&self, a: &LevelSet, b: &LevelSet) -> Result<LevelSet> {
        let (a, mut b) = self.align(a, b)?;
        let mut levels = a.levels;
        levels.append(&mut b.levels);
        levels.sort_unstable();
        levels.dedup();
        Ok(LevelSet {
            stage: a.stage,
            levels,
        })
    }

    /// Exact measure of the symmetric difference (auto-refined to the common
    /// stage).
    pub fn symm_diff_measure(&self, a: &LevelSet, b: &LevelSet) -> Result<Interval> {
        let (a, b) = self.align(a, b)?;
        let mut only = 0u64;
        let (mut i, mut j) = (0usize, 0usize);
        while i < a.levels.len() && j < b.levels.len() {
            match a.levels[i].cmp(&b.levels[j]) {
                std::cmp::Ordering::Less => {
                    only += 1;
                    i += 1;
                }
                std::cmp::Ordering::Greater => {
                    only += 1;
                    j += 1;
                }
                std::cmp::Ordering::Equal => {
                    i += 1;
                    j += 1;
                }
            }
        }
        only += (a.levels.len() - i) as u64 + (b.levels.len() - j) as u64;
        Ok(Interval::point(
            self.base_measure(a.stage).scale_u64(only),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rational::rat;
    use crate::schedule::preset;

    fn odometer(upto: usize) -> Construction {
        Construction::build(&preset("odometer", Some(upto)).unwrap(), upto).unwrap()
    }

    fn chacon(upto: usize) -> Construction {
        Construction::build(&preset("chacon", Some(upto)).unwrap(), upto).unwrap()
    }

    #[test]
    fn measure_examples() {
        let con = odometer(4);
        let set = LevelSet::origin(&con, 3).unwrap();
        assert_eq!(con.measure(&set).unwrap(), Interval::point(rat("1/8")));
        let empty = LevelSet::new(&con, 2, vec![]).unwrap();
        assert_eq!(con.measure(&empty).unwrap(), Interval::point(rat("0")));

        let ch = chacon(3);
        let e1 = LevelSet::origin(&ch, 1).unwrap();
        assert_eq!(ch.measure(&e1).unwrap(), Interval::point(rat("2/9")));
    }

    #[test]
    fn refine_examples() {
        let con = odometer(4);
        let set = LevelSet::origin(&con, 1).unwrap();
        let refined = con.refine(&set, 2).unwrap();
        assert_eq!(refined.levels(), &[0, 2]);
        // Identity refinement.
        assert_eq!(con.refine(&set, 1).unwrap(), set);

        // Chacon stage 0 -> 1: three columns, spacer above the middle one.
        let ch = chacon(2);
        let e0 = LevelSet::origin(&ch, 0).unwrap();
        assert_eq!(ch.refine(&e0, 1).unwrap().levels(), &[0, 1, 3]);
    }

    #[test]
    fn refine_preserves_measure() {
        let ch = chacon(6);
        let set = LevelSet::new(&ch, 1, vec![0, 2, 3]).unwrap();
        let m0 = ch.measure(&set).unwrap();
        for j in 2..=6 {
            let r = ch.refine(&set, j).unwrap();
            assert_eq!(ch.measure(&r).unwrap(), m0);
        }
    }

    #[test]
    fn translate_interior() {
        let con = odometer(3);
        let set = LevelSet::singleton(&con, 2, 1).unwrap();
        let tr = con.translate(&set, &[1], 2).unwrap();
        assert_eq!(tr.pieces.len(), 1);
        assert_eq!(tr.pieces[0].levels(), &[2]);
        assert_eq!(tr.pieces[0].stage(), 2);
        assert_eq!(tr.lost_mass, rat("0"));
    }

    #[test]
    fn translate_identity() {
        let con = odometer(3);
        let set = LevelSet::new(&con, 2, vec![0, 3]).unwrap();
        let tr = con.translate(&set, &[0], 3).unwrap();
        assert_eq!(tr.pieces, vec![set]);
        assert_eq!(tr.lost_mass, rat("0"));
    }

    #[test]
    fn translate_overflow_cascade() {
        // Level 3 at stage 2 embeds as {3, 7} at stage 3; 3 -> 4 resolves,
        // 7 -> 8 overflows again and resolves one stage deeper.
        let con = odometer(4);
        let set = LevelSet::singleton(&con, 2, 3).unwrap();

        let tr3 = con.translate(&set, &[1], 3).unwrap();
        let img3 = tr3.materialize(&con).unwrap();
        assert_eq!(img3.stage(), 3);
        assert_eq!(img3.levels(), &[4]);
        assert_eq!(tr3.lost_mass, rat("1/8"));

        let tr4 = con.translate(&set, &[1], 4).unwrap();
        let img4 = tr4.materialize(&con).unwrap();
        assert_eq!(img4.stage(), 4);
        assert_eq!(img4.levels(), &[4, 8, 12]);
        assert_eq!(tr4.lost_mass, rat("1/16"));
        // Conservation.
        assert_eq!(tr4.measure(&con) + tr4.lost_mass.clone(), rat("1/4"));
    }

    #[test]
    fn translate_rejects_out_of_range() {
        let con = odometer(3);
        let set = LevelSet::singleton(&con, 2, 0).unwrap();
        assert!(matches!(
            con.translate(&set, &[4], 3),
            Err(Error::ShiftOutOfRange { .. })
        ));
    }

    #[test]
    fn translate_negative_shift() {
        let con = odometer(4);
        let set = LevelSet::singleton(&con, 2, 0).unwrap();
        let tr = con.translate(&set, &[-1], 4).unwrap();
        // Underflow cascades: {0,4,8,12}@4 shifted down by 1.
        assert_eq!(tr.measure(&con) + tr.lost_mass.clone(), rat("1/4"));
        let img = tr.materialize(&con).unwrap();
        assert!(img.levels().iter().all(|&l| [3, 7, 11].contains(&l)));
    }

    #[test]
    fn symm_diff_basics() {
        let con = odometer(6);
        let a = LevelSet::new(&con, 3, vec![1, 5]).unwrap();
        assert_eq!(
            con.symm_diff_measure(&a, &a).unwrap(),
            Interval::point(rat("0"))
        );
        let b = LevelSet::singleton(&con, 3, 2).unwrap();
        let c = LevelSet::singleton(&con, 3, 6).unwrap();
        assert_eq!(
            con.symm_diff_measure(&b, &c).unwrap(),
            Interval::point(rat("1/4"))
        );
    }

    #[test]
    fn symm_diff_with_translate_overflow() {
        // E_2 vs its translate by h_2 = 4, resolved through stage 6: the
        // composite bound (symmetric difference plus lost mass) is at most
        // 2^-4.
        let con = odometer(6);
        let e2 = LevelSet::origin(&con, 2).unwrap();
        let e2w = con.refine(&e2, 3).unwrap();
        let tr = con.translate(&e2w, &[4], 6).unwrap();
        let inter = tr.intersection_measure(&con, &e2).unwrap();
        let sym = rat("1/4") + tr.measure(&con) - (inter.clone() + inter);
        let hi = sym + tr.lost_mass;
        assert!(hi <= rat("1/16"));
    }

    #[test]
    fn zn_translate_per_axis() {
        let s = preset("grid-odometer-2", Some(4)).unwrap();
        let con = Construction::build(&s, 4).unwrap();
        // Stage 2: heights (4,4); cell (1,2) shifted by (1,-2) -> (2,0).
        let lvl = con.flatten(2, &[1, 2]);
        let set = LevelSet::singleton(&con, 2, lvl).unwrap();
        let tr = con.translate(&set, &[1, -2], 2).unwrap();
        assert_eq!(tr.pieces[0].levels(), &[con.flatten(2, &[2, 0])]);
        // Overflow on one axis cascades the whole cell.
        let top = con.flatten(2, &[3, 0]);
        let set = LevelSet::singleton(&con, 2, top).unwrap();
        let tr = con.translate(&set, &[1, 0], 4).unwrap();
        assert_eq!(
            tr.measure(&con) + tr.lost_mass.clone(),
            con.measure(&set).unwrap().lo
        );
        assert!(tr.lost_cells > 0);
    }

    #[test]
    fn interval_soundness_monotone_in_depth() {
        // Deeper resolution never widens the certified intersection value.
        let con = odometer(12);
        let e2 = LevelSet::origin(&con, 2).unwrap();
        let mut prev: Option<Interval> = None;
        for max_stage in 3..=12 {
            let base = con.refine(&e2, 3).unwrap();
            let tr = con.translate(&base, &[4], max_stage).unwrap();
            let x = tr.intersection_measure(&con, &e2).unwrap();
            let value = Interval::new(x.clone(), x + tr.lost_mass);
            if let Some(p) = &prev {
                assert!(p.contains_interval(&value), "widened at {max_stage}");
            }
            prev = Some(value);
        }
    }
}
