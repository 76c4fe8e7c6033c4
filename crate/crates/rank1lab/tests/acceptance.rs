//! Acceptance suite: the eight exit criteria, one test per criterion, each
//! printing a PASS/FAIL line. Every tolerance is pinned here, in code.

use rank1lab::config::ExperimentConfig;
use rank1lab::joining::{
    column_pairs, conditional_offdiagonal, eval_joining, nu_column_mass, Displacement,
    JoiningSpec,
};
use rank1lab::rational::{rat, Rational};
use rank1lab::runner::run_to_dir;
use rank1lab::search::{
    approximation_search, decompose_offdiagonal, flat_roof_convergence, FamilyPair, ScanBudget,
    TestFamily,
};
use rank1lab::zn::{zn_fat_diag_lower_bound, zn_partial_rigidity_check, RigidityTarget};
use rank1lab::{flat_roof_defect, preset, ColoringFactor, Construction, Interval, LevelSet};

fn build(name: &str, upto: usize) -> Construction {
    Construction::build(&preset(name, Some(upto)).unwrap(), upto).unwrap()
}

fn verdict(criterion: &str, passed: bool, detail: &str) {
    println!(
        "[{}] acceptance {criterion}: {detail}",
        if passed { "PASS" } else { "FAIL" }
    );
    assert!(passed, "acceptance {criterion} failed: {detail}");
}

// Criterion 1: conservation, refinement consistency, translation
// conservation, and the pair-counting identity hold exactly on all presets,
// n <= 2, heights per axis <= 64.
#[test]
fn criterion_1_exactness_suite() {
    let clock = std::time::Instant::now();
    let presets = [
        ("odometer", 8),
        ("chacon", 5),
        ("flat-staircase", 5),
        ("flow-odometer", 3),
        ("flow-accelerated", 2),
        ("grid-odometer-2", 7),
    ];
    let mut checked_stages = 0;
    for (name, upto) in presets {
        let con = build(name, upto);
        for j in 0..=upto {
            if con.heights(j).iter().any(|&h| h > 64) {
                continue;
            }
            checked_stages += 1;
            // Conservation.
            let st = con.stage_info(j).unwrap();
            assert_eq!(
                st.tower_mass() + st.deficit.clone(),
                rat("1"),
                "{name} stage {j} conservation"
            );
            // Refinement consistency on a sample set.
            let total = con.total_height(j);
            let sample: Vec<u64> = (0..total).step_by(3).collect();
            let set = LevelSet::new(&con, j, sample).unwrap();
            let m = con.measure(&set).unwrap();
            for dj in 1..=2usize {
                if j + dj <= upto {
                    let r = con.refine(&set, j + dj).unwrap();
                    assert_eq!(con.measure(&r).unwrap(), m, "{name} refinement at {j}");
                }
            }
            // Translation conservation.
            if j + 1 <= upto {
                let mut shift = vec![0i128; con.dim()];
                shift[0] = (con.heights(j)[0] as i128 - 1).min(3);
                let tr = con.translate(&set, &shift, j + 1).unwrap();
                assert_eq!(
                    tr.measure(&con) + tr.lost_mass.clone(),
                    m.lo,
                    "{name} translation conservation at {j}"
                );
            }
            // Pair-counting identity: sum over all offsets of the column
            // pair counts equals the squared cell count.
            let h = con.heights(j).to_vec();
            let mut offsets: Vec<Vec<i64>> = vec![vec![]];
            for &hi in &h {
                let mut next = Vec::new();
                for prefix in &offsets {
                    for v in -(hi as i64 - 1)..=(hi as i64 - 1) {
                        let mut p = prefix.clone();
                        p.push(v);
                        next.push(p);
                    }
                }
                offsets = next;
            }
            let total_pairs: u64 = offsets
                .iter()
                .map(|k| column_pairs(&con, j, k).unwrap())
                .sum();
            let cells: u64 = h.iter().product();
            assert_eq!(total_pairs, cells * cells, "{name} pair identity at {j}");
        }
    }
    let elapsed = clock.elapsed();
    verdict(
        "1 (exactness suite)",
        checked_stages > 20 && elapsed < std::time::Duration::from_secs(60),
        &format!(
            "exact identities verified on {checked_stages} preset stages in {elapsed:.1?} (< 1 min)"
        ),
    );
}

// Criterion 2: conditional off-diagonal equals the restricted-and-
// renormalized measure route on all singleton cells at stages with
// total height <= 256, within the deficit interval.
#[test]
fn criterion_2_counting_vs_measure_oracle() {
    let clock = std::time::Instant::now();
    let presets = [
        ("odometer", 8),
        ("chacon", 5),
        ("flat-staircase", 5),
        ("flow-odometer", 3),
        ("grid-odometer-2", 5),
    ];
    let mut cells_checked: u64 = 0;
    for (name, upto) in presets {
        let con = build(name, upto);
        for j in 0..=upto.saturating_sub(1) {
            let total = con.total_height(j);
            if total > 256 {
                continue;
            }
            let deficit = con.deficit(j).clone();
            let mu = con.base_measure(j).clone();
            for r in 0..total {
                for l in 0..total {
                    let rc = con.unflatten(j, r);
                    let lc = con.unflatten(j, l);
                    let k: Vec<i64> = rc
                        .iter()
                        .zip(&lc)
                        .map(|(&a, &b)| a as i64 - b as i64)
                        .collect();
                    let a = LevelSet::singleton(&con, j, r).unwrap();
                    let b = LevelSet::singleton(&con, j, l).unwrap();
                    let cond = conditional_offdiagonal(&con, j, &k, &a, &b).unwrap();
                    let pairs = column_pairs(&con, j, &k).unwrap();
                    assert_eq!(
                        cond,
                        rat("1") / Rational::from_u64(pairs),
                        "{name} stage {j} cell ({r},{l})"
                    );
                    // Measure route: the matched cell resolves exactly to one
                    // base cell; renormalizing by the column mass returns the
                    // counting value within the deficit interval.
                    let t = displacement(&con, &k, j);
                    let v = eval_joining(&con, &JoiningSpec::OffDiagonal(t), &a, &b, j + 1)
                        .unwrap();
                    assert!(v.lo >= mu.clone(), "cell resolves below one base cell");
                    let col_mass = mu.scale_u64(pairs);
                    let renorm_lo = &v.lo / &col_mass;
                    let renorm_hi = &v.hi / &col_mass;
                    assert!(
                        renorm_lo <= cond.clone() + deficit.clone()
                            && renorm_hi >= cond.clone() - deficit.clone(),
                        "{name} stage {j}: renormalized {renorm_lo}..{renorm_hi} vs {cond}"
                    );
                    cells_checked += 1;
                }
            }
        }
    }
    let elapsed = clock.elapsed();
    verdict(
        "2 (counting vs measure)",
        cells_checked > 50_000 && elapsed < std::time::Duration::from_secs(300),
        &format!("{cells_checked} singleton cells cross-checked in {elapsed:.1?} (< 5 min)"),
    );
}

fn displacement(con: &Construction, k: &[i64], j: usize) -> Displacement {
    match con.kind() {
        rank1lab::ScheduleKind::Flow => {
            Displacement::Time(con.step(j).clone() * Rational::int(k[0]))
        }
        _ => Displacement::Steps(k.to_vec()),
    }
}

// Criterion 3: odometer rigidity along tower heights. The certified lower
// bound of mu(E_4 intersect T^{h_j} E_4) at depth j+8 exceeds
// mu(E_4)(1 - 2^-6) for j in 5..=10.
#[test]
fn criterion_3_odometer_rigidity() {
    let con = build("odometer", 18);
    let e4 = LevelSet::origin(&con, 4).unwrap();
    let mu_e4 = rat("1/16");
    let floor = &mu_e4 * &(rat("1") - rat("1/64"));
    let mut worst: Option<Rational> = None;
    for j in 5..=10usize {
        let h_j = 1i64 << j;
        let v = eval_joining(
            &con,
            &JoiningSpec::OffDiagonal(Displacement::Steps(vec![h_j])),
            &e4,
            &e4,
            j + 8,
        )
        .unwrap();
        assert!(
            v.lo >= floor,
            "j = {j}: lower bound {} below {}",
            v.lo,
            floor
        );
        worst = Some(match worst {
            None => v.lo,
            Some(w) => w.min(v.lo),
        });
    }
    verdict(
        "3 (odometer rigidity)",
        true,
        &format!(
            "worst certified lower bound {} >= {}",
            worst.unwrap(),
            floor
        ),
    );
}

// Criterion 4: approximation-theorem surrogate. On the odometer and the flat
// staircase with representable off-diagonal targets, the search returns
// d_j <= 2 deficit_j and the decomposition certifies
// column share >= 1/2 - 2 deficit_j at every reported stage (constant 1/2).
#[test]
fn criterion_4_approximation_surrogate() {
    let clock = std::time::Instant::now();
    let budget = ScanBudget::unlimited();
    let runs: [(&str, usize, i64, usize, (usize, usize)); 3] = [
        ("odometer", 12, 0, 2, (3, 7)),
        ("flat-staircase", 10, 0, 1, (2, 5)),
        ("flat-staircase", 10, 1, 1, (2, 5)),
    ];
    let mut stages_certified = 0;
    for (name, upto, t, j0, (j_min, j_max)) in runs {
        let con = build(name, upto);
        let family = TestFamily::singletons(&con, j0).unwrap();
        let nu = JoiningSpec::OffDiagonal(Displacement::Steps(vec![t]));
        let rep = approximation_search(
            &con,
            &nu,
            &rat("3/4"),
            j_min..=j_max,
            &family,
            upto,
            &budget,
        )
        .unwrap();
        for st in &rep.stages {
            let deficit = con.deficit(st.stage).clone();
            let d_bound = &deficit + &deficit;
            assert!(
                st.d_hi <= d_bound,
                "{name} t={t} stage {}: d = {} > 2 deficit = {d_bound}",
                st.stage,
                st.d_hi
            );
            let dec =
                decompose_offdiagonal(&con, st.stage, &st.offset, &family, upto).unwrap();
            let share_bound = rat("1/2") - deficit.clone() - deficit.clone();
            assert!(
                dec.column_share >= share_bound,
                "{name} t={t} stage {}: share {} < {share_bound}",
                st.stage,
                dec.column_share
            );
            stages_certified += 1;
        }
    }
    let elapsed = clock.elapsed();
    verdict(
        "4 (approximation surrogate)",
        stages_certified == 13 && elapsed < std::time::Duration::from_secs(120),
        &format!(
            "d <= 2 deficit and share >= 1/2 - 2 deficit at {stages_certified} stages in {elapsed:.1?} (< 2 min)"
        ),
    );
}

// Criterion 5: flat-roof dichotomy. Staircase defect upper bounds strictly
// decrease for j = 3..10 and drop below 1/4 by j = 10; the Chacon defect
// lower bound stays at least 1/2 for j = 2..6.
#[test]
fn criterion_5_flat_roof_dichotomy() {
    let stair = build("flat-staircase", 12);
    let mut prev: Option<Rational> = None;
    let mut last = rat("1");
    for j in 3..=10usize {
        let defect = flat_roof_defect(&stair, j, (j + 2).min(12)).unwrap();
        if let Some(p) = &prev {
            assert!(defect.hi < *p, "staircase defect not decreasing at {j}");
        }
        prev = Some(defect.hi.clone());
        last = defect.hi;
    }
    assert!(last < rat("1/4"), "staircase defect at j=10 is {last}");

    let chacon = build("chacon", 12);
    for j in 2..=6usize {
        let defect = flat_roof_defect(&chacon, j, j + 6).unwrap();
        assert!(
            defect.lo >= rat("1/2"),
            "chacon defect at {j}: {}",
            defect.lo
        );
    }
    verdict(
        "5 (flat-roof dichotomy)",
        true,
        &format!("staircase defect falls to {last} < 1/4; chacon stays >= 1/2"),
    );
}

// Criterion 6: flat-roof identities on the staircase through stage 8: the
// gathered-column identity holds exactly (cross-checked against direct cell
// summation at stage 3) and the counting bound holds on all family pairs.
#[test]
fn criterion_6_flat_roof_identities() {
    let con = build("flat-staircase", 13);
    let nu = JoiningSpec::OffDiagonal(Displacement::Steps(vec![1]));

    // Direct cell-sum cross-check of the gathered identity at stage 3.
    {
        let j = 3usize;
        let h = con.heights(j)[0];
        for k in [0u64, 1, 5, h - 1] {
            let a_k = eval_joining(
                &con,
                &nu,
                &LevelSet::singleton(&con, j, k).unwrap(),
                &LevelSet::origin(&con, j).unwrap(),
                j + 6,
            )
            .unwrap();
            let b_k = if k == 0 {
                Interval::point(rat("0"))
            } else {
                eval_joining(
                    &con,
                    &nu,
                    &LevelSet::origin(&con, j).unwrap(),
                    &LevelSet::singleton(&con, j, h - k).unwrap(),
                    j + 6,
                )
                .unwrap()
            };
            let formula = a_k
                .scale(&Rational::from_u64(h - k))
                .add(&b_k.scale(&Rational::from_u64(k)));
            // Direct cell sums over both columns of the gathered pair.
            let direct_main = nu_column_mass(&con, &nu, j, &[k as i64], j + 6).unwrap();
            let direct_wrap = if k == 0 {
                Interval::point(rat("0"))
            } else {
                cell_sum_wrapped(&con, &nu, j, k, j + 6)
            };
            let direct = direct_main.add(&direct_wrap);
            assert!(
                formula.lo <= direct.hi && direct.lo <= formula.hi,
                "gathered identity at k={k}: {formula:?} vs {direct:?}"
            );
        }
    }

    // Counting bound on family pairs for j = 3..8.
    let mut worst_margin: Option<Rational> = None;
    for j in 3..=8usize {
        let h = con.total_height(j);
        let family = vec![
            (
                LevelSet::origin(&con, j).unwrap(),
                LevelSet::origin(&con, j).unwrap(),
            ),
            (
                LevelSet::singleton(&con, j, h - 1).unwrap(),
                LevelSet::origin(&con, j).unwrap(),
            ),
            (
                LevelSet::singleton(&con, j, h / 2).unwrap(),
                LevelSet::singleton(&con, j, h / 2).unwrap(),
            ),
            (
                LevelSet::new(&con, j, (0..4).collect()).unwrap(),
                LevelSet::new(&con, j, (0..4).collect()).unwrap(),
            ),
        ];
        let rep = flat_roof_convergence(&con, j, &nu, &family, (j + 4).min(13)).unwrap();
        assert!(rep.identity_exact);
        let mu = con.base_measure(j);
        let allowance = rep.defect.hi.clone() * mu.scale_u64(con.heights(j)[0])
            + con.deficit(j).clone()
            + con.deficit(j).clone();
        for (label, gap) in &rep.counting_gap {
            assert!(
                gap <= &allowance,
                "stage {j} {label}: gap {gap} > allowance {allowance}"
            );
            let margin = &allowance - gap;
            worst_margin = Some(match worst_margin.take() {
                None => margin,
                Some(w) => w.min(margin),
            });
        }
    }
    verdict(
        "6 (flat-roof identities)",
        true,
        &format!(
            "identity cross-checked; counting bound holds with worst margin {}",
            worst_margin.unwrap()
        ),
    );
}

// Direct cell summation over the wrapped column of the gathered pair.
fn cell_sum_wrapped(
    con: &Construction,
    nu: &JoiningSpec,
    j: usize,
    k: u64,
    max_stage: usize,
) -> Interval {
    let h = con.heights(j)[0];
    let mut total = Interval::point(rat("0"));
    for m in 0..k {
        let a = LevelSet::singleton(con, j, m).unwrap();
        let b = LevelSet::singleton(con, j, h - k + m).unwrap();
        total = total.add(&eval_joining(con, nu, &a, &b, max_stage).unwrap());
    }
    total
}

// Criterion 7: Z^n constants at heights (32,32): the fat-diagonal bound with
// (2 eps)^n, the partial weak-closure share with 1/2^n, and the composed
// partial-rigidity bound with 1/2^(2n).
#[test]
fn criterion_7_zn_constants() {
    let clock = std::time::Instant::now();
    let con = build("grid-odometer-2", 8);

    // (2 eps)^n = 1/100 at delta = 4/5, eps = 1/20.
    for nu in [
        JoiningSpec::Product,
        JoiningSpec::OffDiagonal(Displacement::Steps(vec![0, 0])),
    ] {
        let out =
            zn_fat_diag_lower_bound(&con, &nu, 5, &rat("4/5"), &rat("1/20"), 8).unwrap();
        assert_eq!(out.bound, rat("1/100"));
        assert!(
            out.achieved.lo >= &out.bound - con.deficit(5),
            "{}: achieved {} below (2 eps)^n - deficit",
            nu.describe(),
            out.achieved.lo
        );
        assert!(out.finite_ok, "strip bound failed for {}", nu.describe());
    }

    // Partial weak-closure share >= 1/4 - tol with tol = 1/20.
    let family = TestFamily::singletons(&con, 1).unwrap();
    let budget = ScanBudget::unlimited();
    let rep = rank1lab::zn::zn_partial_wct_search(&con, &[1, 2], 4..=5, &family, 8, &budget)
        .unwrap();
    let tol = rat("1/20");
    for st in &rep.stages {
        assert!(
            st.column_share >= rat("1/4") - tol.clone(),
            "stage {}: share {} < 1/4 - 1/20",
            st.stage,
            st.column_share
        );
    }

    // Composed partial rigidity: constant floor 1/16 - slack on a 3-set
    // family of factor classes.
    let coloring = ColoringFactor::cyclic(&con, 1, &[2, 2]).unwrap();
    let c0 = coloring.class_level_set(&con, 1, 0).unwrap();
    let c3 = coloring.class_level_set(&con, 1, 3).unwrap();
    let family3 = TestFamily::explicit(
        1,
        vec![
            FamilyPair {
                label: "c0xc0".into(),
                a: c0.clone(),
                b: c0.clone(),
            },
            FamilyPair {
                label: "c0xc3".into(),
                a: c0.clone(),
                b: c3.clone(),
            },
            FamilyPair {
                label: "c3xc3".into(),
                a: c3.clone(),
                b: c3,
            },
        ],
    );
    let slack = rat("1/32");
    let eps = [rat("1/32"), rat("1/32")];
    let out = zn_partial_rigidity_check(
        &con,
        RigidityTarget::Factor(&coloring),
        &[4, 5, 6],
        &family3,
        &slack,
        Some(&eps),
        8,
        &budget,
    )
    .unwrap();
    assert!(out.all_passed, "composed certificates failed");
    for step in &out.steps {
        assert!(
            step.constant >= rat("1/16") - slack.clone(),
            "step {}: constant {} below 1/16 - slack",
            step.index,
            step.constant
        );
    }
    let elapsed = clock.elapsed();
    verdict(
        "7 (Z^n constants)",
        elapsed < std::time::Duration::from_secs(300),
        &format!(
            "fat-diagonal 1/100, share 1/4 - 1/20, composed 1/16 - 1/32 certified in {elapsed:.1?} (< 5 min)"
        ),
    );
}

// Criterion 8: determinism. The full experiment matrix produces
// byte-identical reports across two runs, one single-threaded and one
// parallel.
#[test]
fn criterion_8_determinism() {
    let matrix: Vec<(&str, String)> = vec![
        (
            "validate",
            r#"{"schedule": {"preset": "odometer", "horizon": 12},
                "experiment": "validate", "stages": [0, 12]}"#
                .into(),
        ),
        (
            "flat-roof-defect",
            r#"{"schedule": {"preset": "flat-staircase", "horizon": 11},
                "experiment": "flat-roof-defect", "stages": [3, 10]}"#
                .into(),
        ),
        (
            "approximation",
            r#"{"schedule": {"preset": "chacon", "horizon": 9},
                "experiment": "approximation",
                "nu": {"type": "offdiagonal", "steps": [1]},
                "delta": "3/4", "stages": [2, 5],
                "family": {"reference_stage": 1, "generator": "singletons"}}"#
                .into(),
        ),
        (
            "wct",
            r#"{"schedule": {"preset": "odometer", "horizon": 12},
                "experiment": "wct", "target_steps": [16], "stages": [5, 7],
                "family": {"reference_stage": 2, "generator": "singletons"}}"#
                .into(),
        ),
        (
            "flow-wct",
            r#"{"schedule": {"preset": "flow-odometer", "horizon": 7},
                "experiment": "wct", "target_time": "3/4", "stages": [2, 3],
                "family": {"reference_stage": 1, "generator": "explicit",
                           "pairs": [{"a": [0], "b": [0]},
                                      {"a": [0], "b": [7]},
                                      {"a": [7], "b": [7]}]}}"#
                .into(),
        ),
        (
            "rigidity",
            r#"{"schedule": {"preset": "odometer", "horizon": 12},
                "experiment": "rigidity",
                "coloring": {"reference_stage": 2, "moduli": [4]},
                "min_displacement": "1", "stages": [4, 6]}"#
                .into(),
        ),
        (
            "flat-roof-convergence",
            r#"{"schedule": {"preset": "flat-staircase", "horizon": 9},
                "experiment": "flat-roof-convergence",
                "nu": {"type": "offdiagonal", "steps": [1]},
                "stages": [3, 5]}"#
                .into(),
        ),
        (
            "zn-partial-wct",
            r#"{"schedule": {"preset": "grid-odometer-2", "horizon": 7},
                "experiment": "zn-partial-wct", "target_steps": [1, 2],
                "stages": [3, 4],
                "family": {"reference_stage": 1, "generator": "singletons"}}"#
                .into(),
        ),
        (
            "zn-partial-rigidity",
            r#"{"schedule": {"preset": "grid-odometer-2", "horizon": 8},
                "experiment": "zn-partial-rigidity",
                "coloring": {"reference_stage": 1, "moduli": [2, 2]},
                "stages": [4, 6], "slack": "1/32", "epsilon": "1/32"}"#
                .into(),
        ),
        (
            "fat-diagonal-bound",
            r#"{"schedule": {"preset": "grid-odometer-2", "horizon": 6},
                "experiment": "fat-diagonal-bound", "nu": {"type": "product"},
                "delta": "4/5", "epsilon": "1/20", "stages": [3, 5]}"#
                .into(),
        ),
    ];
    let base = tempfile::tempdir().unwrap();
    let mut all_ok = true;
    for (name, text) in &matrix {
        let config = ExperimentConfig::from_json(text).unwrap();
        let dir1 = base.path().join(format!("{name}-run1"));
        let dir2 = base.path().join(format!("{name}-run2"));
        // Same config, different parallelism: results must not depend on
        // the thread count.
        std::env::set_var("RANK1LAB_THREADS", "1");
        let code1 = run_to_dir(&config, &dir1);
        std::env::set_var("RANK1LAB_THREADS", "4");
        let code2 = run_to_dir(&config, &dir2);
        std::env::remove_var("RANK1LAB_THREADS");
        assert_eq!(code1, code2, "{name}: exit codes differ");
        assert_eq!(code1, 0, "{name}: experiment failed");
        for file in ["report.csv", "report.json", "summary.txt"] {
            let b1 = std::fs::read(dir1.join(file)).unwrap();
            let b2 = std::fs::read(dir2.join(file)).unwrap();
            if b1 != b2 {
                all_ok = false;
                println!("[FAIL] {name}/{file}: runs differ");
            }
        }
    }
    verdict(
        "8 (determinism)",
        all_ok,
        "byte-identical reports across single-threaded and parallel runs of the full matrix",
    );
}
