//! Property tests for the exactness invariants: conservation, refinement
//! consistency, translation conservation, interval soundness, the column
//! pair-counting identity, the invariance-defect bound, and selection
//! determinism, over randomized schedules and sets.

use proptest::prelude::*;

use rank1lab::joining::{column_pairs, invariance_defect, pair_histogram};
use rank1lab::rational::{rat, Interval, Rational};
use rank1lab::search::{choice_select, Candidate};
use rank1lab::{Construction, LevelSet, Schedule, StageRule};

/// Random small Z-schedule with a controlled spacer budget: base width 1/2,
/// total mass 1, spacers drawn small enough that the budget never runs out
/// within the horizon.
fn arb_schedule() -> impl Strategy<Value = Schedule> {
    (2usize..=5, proptest::collection::vec((2u32..=4, 0u64..=2), 5)).prop_map(
        |(stages, rules)| {
            let rules: Vec<StageRule> = rules
                .into_iter()
                .take(stages)
                .map(|(r, extra)| {
                    let mut sigma = vec![0u64; r as usize];
                    // One spacer batch above the last column keeps the mass
                    // ledger easy to respect.
                    sigma[r as usize - 1] = extra;
                    StageRule {
                        r: vec![r],
                        q: 1,
                        sigma,
                    }
                })
                .collect();
            Schedule::z(rat("1/2"), rat("1"), rules).unwrap()
        },
    )
}

fn buildable(s: &Schedule) -> Option<Construction> {
    Construction::build(s, s.horizon()).ok()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conservation_holds_exactly(s in arb_schedule()) {
        prop_assume!(buildable(&s).is_some());
        let con = buildable(&s).unwrap();
        for j in 0..=con.last_stage() {
            let st = con.stage_info(j).unwrap();
            prop_assert_eq!(st.tower_mass() + st.deficit.clone(), rat("1"));
        }
    }

    #[test]
    fn refinement_preserves_measure(s in arb_schedule(), seed in 0u64..1000) {
        prop_assume!(buildable(&s).is_some());
        let con = buildable(&s).unwrap();
        let j = (seed as usize) % con.last_stage();
        let total = con.total_height(j);
        let levels: Vec<u64> = (0..total).filter(|l| (l * 7 + seed) % 3 == 0).collect();
        let set = LevelSet::new(&con, j, levels).unwrap();
        let m = con.measure(&set).unwrap();
        for to in j..=con.last_stage() {
            let r = con.refine(&set, to).unwrap();
            prop_assert_eq!(con.measure(&r).unwrap(), m.clone());
        }
    }

    #[test]
    fn translation_conserves_mass(s in arb_schedule(), seed in 0u64..1000) {
        prop_assume!(buildable(&s).is_some());
        let con = buildable(&s).unwrap();
        let j = (seed as usize) % con.last_stage();
        let h = con.heights(j)[0];
        let total = con.total_height(j);
        let levels: Vec<u64> = (0..total).filter(|l| (l + seed) % 2 == 0).collect();
        prop_assume!(!levels.is_empty());
        let set = LevelSet::new(&con, j, levels).unwrap();
        let k = ((seed % (2 * h - 1)) as i128) - (h as i128 - 1);
        let tr = con.translate(&set, &[k], con.last_stage()).unwrap();
        prop_assert_eq!(
            tr.measure(&con) + tr.lost_mass.clone(),
            con.measure(&set).unwrap().lo
        );
    }

    // Increasing the resolution depth never widens the certified value of
    // mu(A intersect T^k B), and the endpoints move monotonically.
    #[test]
    fn interval_soundness(s in arb_schedule(), seed in 0u64..1000) {
        prop_assume!(buildable(&s).is_some());
        let con = buildable(&s).unwrap();
        prop_assume!(con.last_stage() >= 2);
        let j = 1 + (seed as usize) % (con.last_stage() - 1);
        let h = con.heights(j)[0];
        let a = LevelSet::origin(&con, j).unwrap();
        let k = 1 + (seed % (h - 1).max(1)) as i128;
        let mut prev: Option<Interval> = None;
        for max_stage in j..=con.last_stage() {
            let tr = con.translate(&a, &[k], max_stage).unwrap();
            let x = tr.intersection_measure(&con, &a).unwrap();
            let v = Interval::new(x.clone(), x + tr.lost_mass);
            if let Some(p) = &prev {
                prop_assert!(p.contains_interval(&v));
            }
            prev = Some(v);
        }
    }

    #[test]
    fn column_pair_identity(s in arb_schedule()) {
        prop_assume!(buildable(&s).is_some());
        let con = buildable(&s).unwrap();
        for j in 0..=con.last_stage() {
            let h = con.heights(j)[0];
            if h > 64 { break; }
            let total: u64 = (-(h as i64 - 1)..=(h as i64 - 1))
                .map(|k| column_pairs(&con, j, &[k]).unwrap())
                .sum();
            prop_assert_eq!(total, h * h);
        }
    }

    // The almost-invariance defect of any column is bounded by
    // 2 (s_p / s_j) / (h_j - |k|) on arbitrary test sets.
    #[test]
    fn invariance_defect_bound(s in arb_schedule(), seed in 0u64..1000) {
        prop_assume!(buildable(&s).is_some());
        let con = buildable(&s).unwrap();
        let j = con.last_stage().min(3);
        let h = con.heights(j)[0];
        let k = (seed % (h / 2).max(1)) as i64;
        let total = con.total_height(j);
        let a = LevelSet::new(&con, j, (0..total).filter(|l| l % 2 == 0).collect()).unwrap();
        let b = LevelSet::new(&con, j, (0..total).filter(|l| (l + seed) % 3 != 0).collect()).unwrap();
        let fam = vec![(a, b)];
        let d = invariance_defect(&con, j, &[k], j, &fam).unwrap();
        let bound = Rational::int(2) / Rational::from_u64(h - k.unsigned_abs());
        prop_assert!(d <= bound, "defect {} > {}", d, bound);
    }

    // The histogram route and the single-offset counting route agree.
    #[test]
    fn histogram_matches_pair_counts(s in arb_schedule(), seed in 0u64..1000) {
        prop_assume!(buildable(&s).is_some());
        let con = buildable(&s).unwrap();
        let j = con.last_stage().min(2);
        let total = con.total_height(j);
        let a = LevelSet::new(&con, j, (0..total).filter(|l| (l ^ seed) % 2 == 0).collect()).unwrap();
        let b = LevelSet::new(&con, j, (0..total).filter(|l| l % 3 == seed % 3).collect()).unwrap();
        let hist = pair_histogram(&con, j, &a, &b).unwrap();
        let h = con.heights(j)[0] as i64;
        for k in [-h + 1, -1, 0, 1, h - 1] {
            let direct = rank1lab::joining::pair_count(&con, j, &[k], &a, &b);
            prop_assert_eq!(hist.get(&vec![k]).copied().unwrap_or(0), direct);
        }
        let total_pairs: u64 = hist.values().sum();
        prop_assert_eq!(total_pairs, a.len() * b.len());
    }

    // Selection is deterministic and never beats the weighted mixture when
    // weights are exact.
    #[test]
    fn selection_deterministic_and_dominated(
        values in proptest::collection::vec((0u32..100, 0u32..100), 2..8),
        weights in proptest::collection::vec(1u32..10, 2..8),
    ) {
        let n = values.len().min(weights.len());
        let total: u32 = weights[..n].iter().sum();
        let target = vec![Interval::point(rat("1/2"))];
        let candidates: Vec<Candidate> = (0..n)
            .map(|i| Candidate {
                offset: vec![i as i64],
                weight: Rational::new(weights[i] as i64, total as i64),
                values: vec![Interval::point(Rational::new(values[i].0 as i64, 100))],
            })
            .collect();
        let out1 = choice_select(&candidates, &target).unwrap();
        let out2 = choice_select(&candidates, &target).unwrap();
        prop_assert_eq!(out1.index, out2.index);
        prop_assert!(out1.distance.hi <= out1.mixture_distance);
    }
}
