//! Config-driven experiment runner: build the construction, run the named
//! experiment stage by stage, certify the experiment's inequalities, and
//! write report.csv / report.json / summary.txt.
//!
//! Exit codes: 0 all hard assertions passed; 2 hypothesis violation or a
//! failed certification; 3 compute budget exceeded (partial report written);
//! 1 internal error. Reports are byte-reproducible for a fixed config.

use std::path::Path;

use serde_json::json;

use crate::config::{check_preconditions, Experiment, ExperimentConfig};
use crate::error::{Error, Result};
use crate::level_set::LevelSet;
use crate::rational::Rational;
use crate::report::{
    interval_cells, rational_cells, search_csv, summary_text, table_csv, Certification,
};
use crate::schedule::{validate_schedule, CheckStatus};
use crate::search::{
    approximation_search, decompose_offdiagonal, flat_roof_convergence, rigidity_search,
    wct_search, ScanBudget, SearchReport, TestFamily,
};
use crate::tower::{flat_roof_defect, Construction};
use crate::zn::{zn_fat_diag_lower_bound, zn_partial_rigidity_check, zn_partial_wct_search};

#[derive(Debug)]
pub struct RunArtifacts {
    pub csv: String,
    pub json: serde_json::Value,
    pub summary: String,
    pub certifications: Vec<Certification>,
    pub partial: bool,
}

impl RunArtifacts {
    pub fn exit_code(&self) -> i32 {
        if self.partial {
            3
        } else if self.certifications.iter().all(|c| c.passed) {
            0
        } else {
            2
        }
    }
}

/// Run an experiment and write the three report files into `out_dir`.
/// Returns the process exit code.
pub fn run_to_dir(config: &ExperimentConfig, out_dir: &Path) -> i32 {
    let threads = std::env::var("RANK1LAB_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .or(config.threads);
    let result = match threads {
        Some(n) if n > 0 => {
            match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
                Ok(pool) => pool.install(|| run_config(config)),
                Err(e) => Err(Error::Internal(e.to_string())),
            }
        }
        _ => run_config(config),
    };
    match result {
        Ok(artifacts) => {
            if let Err(e) = write_artifacts(&artifacts, config, out_dir) {
                eprintln!("error writing reports: {e}");
                return 1;
            }
            println!("{}", artifacts.summary);
            artifacts.exit_code()
        }
        Err(e) => {
            eprintln!("error: {e}");
            let _ = std::fs::create_dir_all(out_dir);
            let _ = std::fs::write(
                out_dir.join("summary.txt"),
                format!("error: {e}\nexit: {}\n", e.exit_code()),
            );
            e.exit_code()
        }
    }
}

fn write_artifacts(
    artifacts: &RunArtifacts,
    config: &ExperimentConfig,
    out_dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("report.csv"), &artifacts.csv)?;
    let full = json!({
        "experiment": config.experiment.name(),
        "config": serde_json::to_value(config)?,
        "report": artifacts.json,
        "certifications": serde_json::to_value(&artifacts.certifications)?,
        "partial": artifacts.partial,
    });
    std::fs::write(
        out_dir.join("report.json"),
        serde_json::to_string_pretty(&full)?,
    )?;
    std::fs::write(out_dir.join("summary.txt"), &artifacts.summary)?;
    Ok(())
}

/// Run an experiment in-process.
pub fn run_config(config: &ExperimentConfig) -> Result<RunArtifacts> {
    // Fail fast on named precondition inequalities.
    let pre = check_preconditions(config)?;
    if let Some(bad) = pre.iter().find(|c| !c.passed) {
        return Err(Error::HypothesisViolated(format!(
            "{} ({})",
            bad.form, bad.detail
        )));
    }
    let schedule = config.schedule()?;
    let horizon = schedule.horizon();
    let max_stage = config.max_stage.unwrap_or(horizon).min(horizon);
    let con = Construction::build(&schedule, max_stage)?;
    let budget = ScanBudget::new(config.budget_column_scans.unwrap_or(u64::MAX));
    match config.experiment {
        Experiment::Validate => run_validate(config, &con, max_stage),
        Experiment::FlatRoofDefect => run_flat_roof_defect(config, &con, max_stage),
        Experiment::Approximation => run_approximation(config, &con, max_stage, &budget),
        Experiment::Wct => run_wct(config, &con, max_stage, &budget),
        Experiment::Rigidity => run_rigidity(config, &con, max_stage, &budget),
        Experiment::FlatRoofConvergence => run_flat_roof_convergence(config, &con, max_stage),
        Experiment::ZnPartialWct => run_zn_wct(config, &con, max_stage, &budget),
        Experiment::ZnPartialRigidity => run_zn_rigidity(config, &con, max_stage, &budget),
        Experiment::FatDiagonalBound => run_fat_diag_bound(config, &con, max_stage),
    }
}

fn run_validate(
    config: &ExperimentConfig,
    con: &Construction,
    max_stage: usize,
) -> Result<RunArtifacts> {
    let (lo, hi) = config.stage_range([0, max_stage]);
    let report = validate_schedule(con.schedule(), max_stage)?;
    let mut rows = Vec::new();
    for j in lo..=hi.min(max_stage) {
        let st = con.stage_info(j)?;
        let mut row = vec![j.to_string()];
        for ax in 0..con.dim() {
            row.push(st.heights[ax].to_string());
        }
        let (s, s_dec) = rational_cells(&st.step);
        let (m, m_dec) = rational_cells(&st.base_measure);
        let (d, d_dec) = rational_cells(&st.deficit);
        row.extend([s, s_dec, m, m_dec, d, d_dec]);
        rows.push(row);
    }
    let mut header: Vec<String> = vec!["j".into()];
    for ax in 1..=con.dim() {
        header.push(format!("h{ax}"));
    }
    header.extend(
        ["s", "s_dec", "mu_E", "mu_E_dec", "deficit", "deficit_dec"].map(String::from),
    );
    let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    let csv = table_csv(&header_refs, &rows);
    let certifications: Vec<Certification> = report
        .checks
        .iter()
        .map(|c| {
            Certification::new(
                &c.name,
                format!("{:?}", c.status),
                c.detail.clone(),
                c.status != CheckStatus::Fail,
            )
        })
        .collect();
    let summary = summary_text(
        &format!("validate: {}", describe_schedule(con)),
        &certifications,
        &[("stage table".into(), csv.clone())],
    );
    Ok(RunArtifacts {
        csv,
        json: serde_json::to_value(&report)?,
        summary,
        certifications,
        partial: false,
    })
}

fn run_flat_roof_defect(
    config: &ExperimentConfig,
    con: &Construction,
    max_stage: usize,
) -> Result<RunArtifacts> {
    let (lo, hi) = config.stage_range([1, max_stage.saturating_sub(1)]);
    let mut rows = Vec::new();
    let mut json_rows = Vec::new();
    for j in lo..=hi.min(max_stage - 1) {
        let defect = flat_roof_defect(con, j, max_stage)?;
        let mut row = vec![j.to_string()];
        row.extend(interval_cells(&defect));
        rows.push(row);
        json_rows.push(json!({"stage": j, "defect": defect}));
    }
    let csv = table_csv(
        &["j", "defect_lo", "defect_lo_dec", "defect_hi", "defect_hi_dec"],
        &rows,
    );
    let summary = summary_text(
        &format!("flat-roof defect: {}", describe_schedule(con)),
        &[],
        &[("defect table".into(), csv.clone())],
    );
    Ok(RunArtifacts {
        csv,
        json: serde_json::Value::Array(json_rows),
        summary,
        certifications: Vec::new(),
        partial: false,
    })
}

/// Stage-by-stage driver so a budget exhaustion still yields the completed
/// prefix as a partial report.
fn staged<F>(lo: usize, hi: usize, mut step: F) -> Result<(Vec<SearchReport>, bool)>
where
    F: FnMut(usize) -> Result<SearchReport>,
{
    let mut parts = Vec::new();
    for j in lo..=hi {
        match step(j) {
            Ok(r) => parts.push(r),
            Err(Error::BudgetExceeded { .. }) => return Ok((parts, true)),
            Err(e) => return Err(e),
        }
    }
    Ok((parts, false))
}

fn merge_reports(mut parts: Vec<SearchReport>) -> SearchReport {
    let mut merged = parts.remove(0);
    for p in parts {
        merged.stages.extend(p.stages);
    }
    merged
}

fn run_approximation(
    config: &ExperimentConfig,
    con: &Construction,
    max_stage: usize,
    budget: &ScanBudget,
) -> Result<RunArtifacts> {
    let nu = config.resolve_nu(con)?;
    let delta = config
        .delta
        .clone()
        .ok_or_else(|| Error::Config("approximation requires `delta`".into()))?;
    let (lo, hi) = config.stage_range([2, max_stage.saturating_sub(2)]);
    let family = config.resolve_family(con, lo.min(2))?;
    let (parts, partial) = staged(lo, hi, |j| {
        approximation_search(con, &nu, &delta, j..=j, &family, max_stage, budget)
    })?;
    if parts.is_empty() {
        return Err(Error::BudgetExceeded {
            used: budget.used(),
            limit: 0,
        });
    }
    let report = merge_reports(parts);
    let mut certifications = Vec::new();
    for st in &report.stages {
        let deficit = con.deficit(st.stage).clone();
        // Column-share floor from the fat diagonal itself.
        let floor = (Rational::one() - delta.clone()) * (Rational::one() - deficit.clone());
        certifications.push(Certification::new(
            "fat-diagonal column share",
            format!(
                "stage {}: share >= (1 - delta)(1 - deficit) = {floor}",
                st.stage
            ),
            format!("share = {}", st.column_share),
            st.column_share >= floor,
        ));
        // Approximation-theorem surrogate with tol = the certified distance.
        let rhs = Rational::new(1, 2)
            - (&st.d_hi + &st.d_hi)
            - deficit.clone();
        certifications.push(Certification::new(
            "approximation surrogate",
            format!(
                "stage {}: share >= 1/2 - 2 d_hi - deficit = {rhs}",
                st.stage
            ),
            format!("share = {}, d_hi = {}", st.column_share, st.d_hi),
            st.column_share >= rhs,
        ));
        // Residual decomposition (diagnostic).
        let _ = decompose_offdiagonal(con, st.stage, &st.offset, &family, max_stage);
    }
    finish_search(config, con, report, certifications, partial)
}

fn run_wct(
    config: &ExperimentConfig,
    con: &Construction,
    max_stage: usize,
    budget: &ScanBudget,
) -> Result<RunArtifacts> {
    let target = config.resolve_target(con)?;
    let (lo, hi) = config.stage_range([2, max_stage.saturating_sub(2)]);
    let family = config.resolve_family(con, lo.min(2))?;
    let (parts, partial) = staged(lo, hi, |j| {
        wct_search(con, &target, j..=j, &family, max_stage, budget)
    })?;
    if parts.is_empty() {
        return Err(Error::BudgetExceeded {
            used: budget.used(),
            limit: 0,
        });
    }
    let report = merge_reports(parts);
    let mut certifications = Vec::new();
    for st in &report.stages {
        // The commuting map is inside the action, so wherever it is
        // representable the certified distance must have lower bound zero.
        if let Some(steps) = target.steps_at(con, st.stage) {
            let h = con.heights(st.stage);
            if steps
                .iter()
                .zip(h)
                .all(|(s, &hh)| s.unsigned_abs() < hh as u128)
            {
                certifications.push(Certification::new(
                    "in-action target reached",
                    format!(
                        "stage {}: certified distance lower bound is 0",
                        st.stage
                    ),
                    format!("d = [{}, {}]", st.d_lo, st.d_hi),
                    st.d_lo.is_zero(),
                ));
            }
        }
    }
    finish_search(config, con, report, certifications, partial)
}

fn run_rigidity(
    config: &ExperimentConfig,
    con: &Construction,
    max_stage: usize,
    budget: &ScanBudget,
) -> Result<RunArtifacts> {
    let coloring = config.resolve_coloring(con)?;
    let min_disp = config
        .min_displacement
        .clone()
        .unwrap_or_else(Rational::one);
    let (lo, hi) = config.stage_range([2, max_stage.saturating_sub(2)]);
    let family = match &config.family {
        Some(_) => config.resolve_family(con, lo.min(2))?,
        None => TestFamily::color_classes(con, &coloring, coloring.reference_stage)?,
    };
    let (parts, partial) = staged(lo, hi, |j| {
        rigidity_search(con, &coloring, &min_disp, j..=j, &family, max_stage, budget)
    })?;
    if parts.is_empty() {
        return Err(Error::BudgetExceeded {
            used: budget.used(),
            limit: 0,
        });
    }
    let report = merge_reports(parts);
    let mut certifications = Vec::new();
    for st in &report.stages {
        certifications.push(Certification::new(
            "displacement floor",
            format!(
                "stage {}: |k s_j| >= min displacement {min_disp}",
                st.stage
            ),
            format!("displacement = {}", st.displacement),
            st.displacement >= min_disp,
        ));
    }
    finish_search(config, con, report, certifications, partial)
}

fn finish_search(
    config: &ExperimentConfig,
    con: &Construction,
    report: SearchReport,
    certifications: Vec<Certification>,
    partial: bool,
) -> Result<RunArtifacts> {
    let csv = search_csv(&report, con.dim());
    let mut extra = vec![("stage table".into(), csv.clone())];
    if partial {
        extra.push((
            "budget".into(),
            "compute budget exhausted: partial report".into(),
        ));
    }
    let summary = summary_text(
        &format!(
            "{}: {} (target {})",
            config.experiment.name(),
            describe_schedule(con),
            report.target
        ),
        &certifications,
        &extra,
    );
    Ok(RunArtifacts {
        csv,
        json: serde_json::to_value(&report)?,
        summary,
        certifications,
        partial,
    })
}

fn default_stage_family(con: &Construction, j: usize) -> Result<Vec<(LevelSet, LevelSet)>> {
    let h = con.total_height(j);
    let mut sets = vec![
        LevelSet::origin(con, j)?,
        LevelSet::singleton(con, j, h - 1)?,
        LevelSet::singleton(con, j, h / 2)?,
    ];
    if h >= 4 {
        sets.push(LevelSet::new(con, j, (0..4).collect())?);
    }
    Ok(sets
        .iter()
        .flat_map(|a| sets.iter().map(move |b| (a.clone(), b.clone())))
        .collect())
}

fn run_flat_roof_convergence(
    config: &ExperimentConfig,
    con: &Construction,
    max_stage: usize,
) -> Result<RunArtifacts> {
    let nu = config.resolve_nu(con)?;
    let (lo, hi) = config.stage_range([2, max_stage.saturating_sub(2)]);
    let mut rows = Vec::new();
    let mut json_rows = Vec::new();
    let mut certifications = Vec::new();
    for j in lo..=hi {
        let family = default_stage_family(con, j)?;
        let rep = flat_roof_convergence(con, j, &nu, &family, max_stage)?;
        let gap_max = rep
            .counting_gap
            .iter()
            .map(|(_, g)| g.clone())
            .fold(Rational::zero(), |a, b| a.max(b));
        // Counting bound: the gap is controlled by the unnormalized roof
        // defect times the height plus twice the deficit.
        let mu = con.base_measure(j);
        let roof = rep.defect.hi.clone() * mu.scale_u64(con.heights(j)[0]);
        let allowance = roof + con.deficit(j).clone() + con.deficit(j).clone();
        certifications.push(Certification::new(
            "counting bound",
            format!("stage {j}: sup_k gap <= h mu(roof sym diff) + 2 deficit = {allowance}"),
            format!("gap = {gap_max}"),
            gap_max <= allowance,
        ));
        certifications.push(Certification::new(
            "gathered mass",
            format!("stage {j}: certified lower bound of the gathered mass <= 1"),
            format!("mass = {}", rep.gather_mass),
            rep.gather_mass.lo <= Rational::one(),
        ));
        let mut row = vec![j.to_string()];
        row.extend(interval_cells(&rep.defect));
        row.extend(interval_cells(&rep.discrepancy));
        row.extend(interval_cells(&rep.gather_mass));
        row.push(gap_max.to_string());
        row.push(rep.mixture_distance.to_string());
        rows.push(row);
        json_rows.push(serde_json::to_value(&rep)?);
    }
    let csv = table_csv(
        &[
            "j",
            "defect_lo",
            "defect_lo_dec",
            "defect_hi",
            "defect_hi_dec",
            "discrepancy_lo",
            "discrepancy_lo_dec",
            "discrepancy_hi",
            "discrepancy_hi_dec",
            "gather_lo",
            "gather_lo_dec",
            "gather_hi",
            "gather_hi_dec",
            "counting_gap",
            "mixture_distance",
        ],
        &rows,
    );
    let summary = summary_text(
        &format!(
            "flat-roof convergence: {} (target {})",
            describe_schedule(con),
            nu.describe()
        ),
        &certifications,
        &[("stage table".into(), csv.clone())],
    );
    Ok(RunArtifacts {
        csv,
        json: serde_json::Value::Array(json_rows),
        summary,
        certifications,
        partial: false,
    })
}

fn run_zn_wct(
    config: &ExperimentConfig,
    con: &Construction,
    max_stage: usize,
    budget: &ScanBudget,
) -> Result<RunArtifacts> {
    let k_s = config
        .target_steps
        .clone()
        .ok_or_else(|| Error::Config("zn-partial-wct requires `target_steps`".into()))?;
    let (lo, hi) = config.stage_range([2, max_stage.saturating_sub(2)]);
    let family = config.resolve_family(con, lo.min(1))?;
    let (parts, partial) = staged(lo, hi, |j| {
        zn_partial_wct_search(con, &k_s, j..=j, &family, max_stage, budget)
    })?;
    if parts.is_empty() {
        return Err(Error::BudgetExceeded {
            used: budget.used(),
            limit: 0,
        });
    }
    let report = merge_reports(parts);
    let n = con.dim() as u32;
    let corner = Rational::new(1, 2).pow(n);
    let mut certifications = Vec::new();
    for st in &report.stages {
        let tol = &corner * &Rational::new(1, st.stage as i64 + 2)
            + con.deficit(st.stage).clone()
            + st.d_hi.clone();
        let rhs = (&corner - &tol).max(Rational::zero());
        certifications.push(Certification::new(
            "partial weak-closure share",
            format!("stage {}: share >= 1/2^{n} - tol = {rhs}", st.stage),
            format!("share = {}, tol = {tol}", st.column_share),
            st.column_share >= rhs,
        ));
    }
    finish_search(config, con, report, certifications, partial)
}

fn run_zn_rigidity(
    config: &ExperimentConfig,
    con: &Construction,
    max_stage: usize,
    budget: &ScanBudget,
) -> Result<RunArtifacts> {
    let (lo, hi) = config.stage_range([2, max_stage.saturating_sub(2)]);
    let stages: Vec<usize> = (lo..=hi).collect();
    let slack = config
        .slack
        .clone()
        .unwrap_or_else(|| Rational::new(1, 32));
    let epsilons: Option<Vec<Rational>> = config
        .epsilon
        .clone()
        .map(|e| vec![e; stages.len().saturating_sub(1)]);
    let coloring;
    let target = if let Some(k_s) = &config.target_steps {
        crate::zn::RigidityTarget::CommutingElement(k_s)
    } else {
        coloring = config.resolve_coloring(con)?;
        crate::zn::RigidityTarget::Factor(&coloring)
    };
    let family = match (&config.family, &config.coloring) {
        (None, Some(_)) => {
            let c = config.resolve_coloring(con)?;
            TestFamily::color_classes(con, &c, c.reference_stage)?
        }
        _ => config.resolve_family(con, lo.min(1))?,
    };
    let out = zn_partial_rigidity_check(
        con,
        target,
        &stages,
        &family,
        &slack,
        epsilons.as_deref(),
        max_stage,
        budget,
    )?;
    let mut rows = Vec::new();
    let mut certifications = Vec::new();
    let n = con.dim() as u32;
    for step in &out.steps {
        for (label, achieved, required, ok) in &step.certificates {
            certifications.push(Certification::new(
                "partial rigidity",
                format!(
                    "step {}: mu(A intersect T_k' B) >= (1/2^{n} - eps)^2 mu(A intersect B) - slack = {required} [{label}]",
                    step.index
                ),
                format!("achieved lower bound = {achieved}"),
                *ok,
            ));
        }
        let mut row = vec![
            step.index.to_string(),
            step.stage_small.to_string(),
            step.stage_large.to_string(),
            format!("{:?}", step.k_small),
            format!("{:?}", step.k_large),
            format!("{:?}", step.k_composed),
        ];
        let (c, c_dec) = rational_cells(&step.constant);
        row.push(c);
        row.push(c_dec);
        rows.push(row);
    }
    let csv = table_csv(
        &[
            "step",
            "j_small",
            "j_large",
            "k_small",
            "k_large",
            "k_composed",
            "constant",
            "constant_dec",
        ],
        &rows,
    );
    let summary = summary_text(
        &format!("zn-partial-rigidity: {}", describe_schedule(con)),
        &certifications,
        &[("composition table".into(), csv.clone())],
    );
    Ok(RunArtifacts {
        csv,
        json: serde_json::to_value(&out)?,
        summary,
        certifications,
        partial: false,
    })
}

fn run_fat_diag_bound(
    config: &ExperimentConfig,
    con: &Construction,
    max_stage: usize,
) -> Result<RunArtifacts> {
    let nu = config.resolve_nu(con)?;
    let delta = config
        .delta
        .clone()
        .ok_or_else(|| Error::Config("fat-diagonal-bound requires `delta`".into()))?;
    let epsilon = match &config.epsilon {
        Some(e) => e.clone(),
        None => crate::zn::largest_epsilon(con.dim() as u32, &delta, 1000).ok_or_else(|| {
            Error::HypothesisViolated("no epsilon satisfies (1/2 - epsilon)^n > 1 - delta".into())
        })?,
    };
    let (lo, hi) = config.stage_range([2, max_stage.saturating_sub(1)]);
    let mut rows = Vec::new();
    let mut json_rows = Vec::new();
    let mut certifications = Vec::new();
    for j in lo..=hi {
        let out = zn_fat_diag_lower_bound(con, &nu, j, &delta, &epsilon, max_stage)?;
        certifications.push(Certification::new(
            "strip lower bound",
            format!(
                "stage {j}: achieved fat-diagonal mass >= central strip mass - deficit = {}",
                out.finite_bound
            ),
            format!("achieved = {}", out.achieved),
            out.finite_ok,
        ));
        certifications.push(Certification::new(
            "asymptotic constant",
            format!(
                "stage {j}: achieved >= (2 epsilon)^n - deficit = {}",
                (&out.bound - con.deficit(j)).max(Rational::zero())
            ),
            format!("achieved = {}", out.achieved),
            out.asymptotic_ok,
        ));
        let mut row = vec![j.to_string()];
        let (b, b_dec) = rational_cells(&out.bound);
        let (f, f_dec) = rational_cells(&out.finite_bound);
        row.extend([b, b_dec, f, f_dec]);
        row.extend(interval_cells(&out.achieved));
        rows.push(row);
        json_rows.push(serde_json::to_value(&out)?);
    }
    let csv = table_csv(
        &[
            "j",
            "bound",
            "bound_dec",
            "finite_bound",
            "finite_bound_dec",
            "achieved_lo",
            "achieved_lo_dec",
            "achieved_hi",
            "achieved_hi_dec",
        ],
        &rows,
    );
    let summary = summary_text(
        &format!(
            "fat-diagonal bound: {} (target {}, delta {delta}, epsilon {epsilon})",
            describe_schedule(con),
            nu.describe()
        ),
        &certifications,
        &[("bound table".into(), csv.clone())],
    );
    Ok(RunArtifacts {
        csv,
        json: serde_json::Value::Array(json_rows),
        summary,
        certifications,
        partial: false,
    })
}

fn describe_schedule(con: &Construction) -> String {
    match &con.schedule().preset {
        Some(p) => p.clone(),
        None => format!("{:?} schedule", con.kind()),
    }
}

/// Text listing of the built-in presets.
pub fn list_presets() -> String {
    let mut out = String::from("available presets:\n");
    for (name, desc) in crate::schedule::preset_descriptions() {
        out.push_str(&format!("  {name:<18} {desc}\n"));
    }
    out
}
