//! Cutting-and-stacking schedules for Z-actions, flows, and Z^n-actions.
//!
//! A schedule fully determines the system: per stage, the number of cuts,
//! the step-ratio (flows), and the spacer counts. Stage j+1 is obtained by
//! cutting the stage-j tower into columns, refining the time step (flows),
//! inserting spacers, and stacking. Spacer convention: `sigma[i]` spacer
//! levels go directly above column `i` before column `i+1` is stacked; for
//! rectangular schedules spacers are per-axis slabs above the last column.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rational::Rational;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Z,
    Flow,
    Rect,
}

/// One stage transition. For Z and Rect schedules `q` is always 1.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRule {
    /// Cut counts per axis (length 1 for Z/flows). Accepts a bare integer
    /// in JSON for the one-dimensional case; serializes canonically as an
    /// array.
    #[serde(deserialize_with = "scalar_or_vec")]
    pub r: Vec<u32>,
    /// Step ratio s_j / s_{j+1} (flows only; 1 otherwise).
    #[serde(default = "one_u32")]
    pub q: u32,
    /// Spacer counts: per column for Z/flows (length `r[0]`); per-axis top
    /// slabs for rectangular schedules (length = dim).
    pub sigma: Vec<u64>,
}

fn one_u32() -> u32 {
    1
}

fn scalar_or_vec<'de, D: serde::Deserializer<'de>>(
    d: D,
) -> std::result::Result<Vec<u32>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        One(u32),
        Many(Vec<u32>),
    }
    Ok(match Raw::deserialize(d)? {
        Raw::One(r) => vec![r],
        Raw::Many(v) => v,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub n: usize,
    /// Initial base width m_0 (un-normalized; the space has total mass M).
    pub m0: Rational,
    /// Declared total mass M of the space.
    #[serde(rename = "M")]
    pub total_mass: Rational,
    /// Initial step s_0 (flows; 1 for Z/Rect).
    #[serde(default = "rational_one")]
    pub s0: Rational,
    pub stages: Vec<StageRule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
}

fn rational_one() -> Rational {
    Rational::one()
}

impl Schedule {
    pub fn z(m0: Rational, total_mass: Rational, stages: Vec<StageRule>) -> Result<Self> {
        let s = Schedule {
            kind: ScheduleKind::Z,
            n: 1,
            m0,
            total_mass,
            s0: Rational::one(),
            stages,
            preset: None,
        };
        s.validate_shape()?;
        Ok(s)
    }

    pub fn flow(
        m0: Rational,
        total_mass: Rational,
        s0: Rational,
        stages: Vec<StageRule>,
    ) -> Result<Self> {
        let s = Schedule {
            kind: ScheduleKind::Flow,
            n: 1,
            m0,
            total_mass,
            s0,
            stages,
            preset: None,
        };
        s.validate_shape()?;
        Ok(s)
    }

    pub fn rect(
        n: usize,
        m0: Rational,
        total_mass: Rational,
        stages: Vec<StageRule>,
    ) -> Result<Self> {
        let s = Schedule {
            kind: ScheduleKind::Rect,
            n,
            m0,
            total_mass,
            s0: Rational::one(),
            stages,
            preset: None,
        };
        s.validate_shape()?;
        Ok(s)
    }

    /// Structural well-formedness; trend checks live in [`validate_schedule`].
    pub fn validate_shape(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidSchedule(msg));
        if self.n == 0 {
            return fail("dimension must be at least 1".into());
        }
        if self.kind != ScheduleKind::Rect && self.n != 1 {
            return fail("Z and flow schedules are one-dimensional".into());
        }
        if self.m0.is_zero() || self.m0.is_negative() {
            return fail("base width m0 must be positive".into());
        }
        if self.total_mass < self.m0 {
            return fail("total mass M must be at least m0".into());
        }
        if self.s0.is_zero() || self.s0.is_negative() {
            return fail("initial step must be positive".into());
        }
        if self.kind != ScheduleKind::Flow && self.s0 != Rational::one() {
            return fail("only flows may declare an initial step".into());
        }
        for (j, rule) in self.stages.iter().enumerate() {
            if rule.r.len() != self.n {
                return fail(format!("stage {j}: expected {} cut counts", self.n));
            }
            if rule.r.contains(&0) {
                return fail(format!("stage {j}: cut count must be positive"));
            }
            if self.kind == ScheduleKind::Z && rule.r[0] < 2 {
                return fail(format!("stage {j}: Z schedules need at least 2 cuts"));
            }
            if rule.q == 0 {
                return fail(format!("stage {j}: step ratio must be positive"));
            }
            if self.kind != ScheduleKind::Flow && rule.q != 1 {
                return fail(format!("stage {j}: only flows may refine the step"));
            }
            let want = match self.kind {
                ScheduleKind::Rect => self.n,
                _ => rule.r[0] as usize,
            };
            if rule.sigma.len() != want {
                return fail(format!(
                    "stage {j}: expected {want} spacer counts, got {}",
                    rule.sigma.len()
                ));
            }
        }
        Ok(())
    }

    /// Number of buildable stages (stage indices 0..=horizon).
    pub fn horizon(&self) -> usize {
        self.stages.len()
    }
}

// ---------------------------------------------------------------------------
// Presets
// ---------------------------------------------------------------------------

pub const PRESET_NAMES: [&str; 6] = [
    "odometer",
    "chacon",
    "flat-staircase",
    "flow-odometer",
    "flow-accelerated",
    "grid-odometer-n",
];

pub fn preset_descriptions() -> Vec<(String, String)> {
    vec![
        (
            "odometer".into(),
            "dyadic adding machine: 2 cuts, no spacers, zero deficit".into(),
        ),
        (
            "chacon".into(),
            "3 cuts with one spacer above the middle column; m0 = 2/3".into(),
        ),
        (
            "flat-staircase".into(),
            "j+2 cuts with j+1 spacers above the last column; flat-roof defect 2/(j+2)".into(),
        ),
        (
            "flow-odometer".into(),
            "flow: step ratio 2, 4 cuts, no spacers; s_j^2 h_j grows".into(),
        ),
        (
            "flow-accelerated".into(),
            "flow: step ratio 2, 8 cuts, no spacers; fast s_j^2 h_j growth".into(),
        ),
        (
            "grid-odometer-n".into(),
            "Z^n product doubling schedule, e.g. grid-odometer-2; no spacers".into(),
        ),
    ]
}

/// Build a named preset. `horizon` overrides the default number of stages.
pub fn preset(name: &str, horizon: Option<usize>) -> Result<Schedule> {
    let mut schedule = match name {
        "odometer" => {
            let h = horizon.unwrap_or(32).min(60);
            Schedule::z(
                Rational::one(),
                Rational::one(),
                (0..h)
                    .map(|_| StageRule {
                        r: vec![2],
                        q: 1,
                        sigma: vec![0, 0],
                    })
                    .collect(),
            )?
        }
        "chacon" => {
            let h = horizon.unwrap_or(20).min(37);
            Schedule::z(
                Rational::new(2, 3),
                Rational::one(),
                (0..h)
                    .map(|_| StageRule {
                        r: vec![3],
                        q: 1,
                        sigma: vec![0, 1, 0],
                    })
                    .collect(),
            )?
        }
        "flat-staircase" => {
            // h_j = 2*(j+1)! - 1; keep heights within u64.
            let h = horizon.unwrap_or(14).min(19);
            Schedule::z(
                Rational::new(1, 2),
                Rational::one(),
                (0..h)
                    .map(|j| {
                        let r = j as u32 + 2;
                        let mut sigma = vec![0u64; r as usize];
                        sigma[r as usize - 1] = j as u64 + 1;
                        StageRule {
                            r: vec![r],
                            q: 1,
                            sigma,
                        }
                    })
                    .collect(),
            )?
        }
        "flow-odometer" => {
            let h = horizon.unwrap_or(12).min(20);
            Schedule::flow(
                Rational::one(),
                Rational::one(),
                Rational::one(),
                (0..h)
                    .map(|_| StageRule {
                        r: vec![4],
                        q: 2,
                        sigma: vec![0; 4],
                    })
                    .collect(),
            )?
        }
        "flow-accelerated" => {
            let h = horizon.unwrap_or(10).min(15);
            Schedule::flow(
                Rational::one(),
                Rational::one(),
                Rational::one(),
                (0..h)
                    .map(|_| StageRule {
                        r: vec![8],
                        q: 2,
                        sigma: vec![0; 8],
                    })
                    .collect(),
            )?
        }
        other => {
            if let Some(n) = other.strip_prefix("grid-odometer-") {
                let n: usize = n
                    .parse()
                    .map_err(|_| Error::UnknownPreset(other.to_string()))?;
                if n == 0 || n > 4 {
                    return Err(Error::UnknownPreset(other.to_string()));
                }
                let h = horizon.unwrap_or(if n <= 2 { 16 } else { 8 }).min(60 / n);
                Schedule::rect(
                    n,
                    Rational::one(),
                    Rational::one(),
                    (0..h)
                        .map(|_| StageRule {
                            r: vec![2; n],
                            q: 1,
                            sigma: vec![0; n],
                        })
                        .collect(),
                )?
            } else {
                return Err(Error::UnknownPreset(other.to_string()));
            }
        }
    };
    schedule.preset = Some(name.to_string());
    Ok(schedule)
}

// ---------------------------------------------------------------------------
// Validation report
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckStatus {
    Pass,
    Fail,
    /// Non-fatal: schedule is usable but the flagged trend will not support
    /// the corresponding limit statement (e.g. candidate for acceleration).
    Flag,
    NotApplicable,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub status: CheckStatus,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ValidationReport {
    pub horizon: usize,
    pub checks: Vec<Check>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.status != CheckStatus::Fail)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Trend {
    Increasing,
    Constant,
    Decreasing,
    Mixed,
}

fn classify_trend(values: &[Rational]) -> Trend {
    let mut up = false;
    let mut down = false;
    for w in values.windows(2) {
        if w[1] > w[0] {
            up = true;
        } else if w[1] < w[0] {
            down = true;
        }
    }
    match (up, down) {
        (true, false) => Trend::Increasing,
        (false, true) => Trend::Decreasing,
        (false, false) => Trend::Constant,
        (true, true) => Trend::Mixed,
    }
}

/// Finite-horizon trend checks over stages `0..=horizon`.
pub fn validate_schedule(schedule: &Schedule, horizon: usize) -> Result<ValidationReport> {
    schedule.validate_shape()?;
    let horizon = horizon.min(schedule.horizon());
    let mut checks = Vec::new();

    // Exact per-stage quantities.
    let mut step = schedule.s0.clone();
    let mut heights: Vec<u64> = vec![1; schedule.n];
    let mut base = &schedule.m0 / &schedule.total_mass;
    let mut sh = Vec::new(); // s_j * h_j
    let mut s2h = Vec::new(); // s_j^2 * h_j
    let mut tower_mass = Vec::new();
    let mut overflow = false;
    for j in 0..=horizon {
        let total: Option<u64> = heights.iter().try_fold(1u64, |a, &h| a.checked_mul(h));
        let Some(total) = total else {
            overflow = true;
            break;
        };
        let hr = Rational::from_u64(heights[0]);
        sh.push(&step * &hr);
        s2h.push(&(&step * &step) * &hr);
        tower_mass.push(base.scale_u64(total));
        if j < horizon {
            let rule = &schedule.stages[j];
            let mut shrink = 1u64;
            for (ax, h) in heights.iter_mut().enumerate() {
                let rq = rule.r[ax] as u64 * if ax == 0 { rule.q as u64 } else { 1 };
                shrink = shrink.saturating_mul(rq);
                let grown = h.checked_mul(rq).and_then(|v| {
                    let extra = match schedule.kind {
                        ScheduleKind::Rect => rule.sigma[ax],
                        _ if ax == 0 => rule.sigma.iter().sum(),
                        _ => 0,
                    };
                    v.checked_add(extra)
                });
                match grown {
                    Some(v) => *h = v,
                    None => {
                        overflow = true;
                        break;
                    }
                }
            }
            if overflow {
                break;
            }
            step = step / Rational::from_u64(rule.q as u64);
            base = base / Rational::from_u64(shrink);
        }
    }

    if overflow {
        checks.push(Check {
            name: "representable".into(),
            status: CheckStatus::Fail,
            detail: "heights exceed u64 within the horizon".into(),
        });
        return Ok(ValidationReport { horizon, checks });
    }

    // Integer step ratios: guaranteed by the schedule type; reported anyway.
    checks.push(Check {
        name: "integer step ratios".into(),
        status: if schedule.kind == ScheduleKind::Flow {
            CheckStatus::Pass
        } else {
            CheckStatus::NotApplicable
        },
        detail: "s_j/s_{j+1} is an integer at every stage by construction".into(),
    });

    // Step decay.
    checks.push(match schedule.kind {
        ScheduleKind::Flow => {
            let stuck: Vec<usize> = schedule.stages[..horizon]
                .iter()
                .enumerate()
                .filter(|(_, rule)| rule.q < 2)
                .map(|(j, _)| j)
                .collect();
            if stuck.is_empty() {
                Check {
                    name: "step -> 0".into(),
                    status: CheckStatus::Pass,
                    detail: "every step ratio is at least 2".into(),
                }
            } else {
                Check {
                    name: "step -> 0".into(),
                    status: CheckStatus::Flag,
                    detail: format!("step does not shrink at stages {stuck:?}"),
                }
            }
        }
        _ => Check {
            name: "step -> 0".into(),
            status: CheckStatus::NotApplicable,
            detail: "step is constant for this action".into(),
        },
    });

    // s_j h_j growth (monotone strictly increasing over the horizon).
    let sh_trend = classify_trend(&sh);
    checks.push(Check {
        name: "s_j h_j -> infinity".into(),
        status: if sh.len() <= 1 || sh_trend == Trend::Increasing {
            CheckStatus::Pass
        } else {
            CheckStatus::Fail
        },
        detail: format!(
            "trend {:?} over stages 0..={}; values {}..{}",
            sh_trend,
            horizon,
            sh.first().map(|v| v.to_string()).unwrap_or_default(),
            sh.last().map(|v| v.to_string()).unwrap_or_default()
        ),
    });

    // Mass budget feasibility.
    let budget_ok = tower_mass.windows(2).all(|w| w[1] >= w[0])
        && tower_mass.iter().all(|m| m <= &Rational::one());
    checks.push(Check {
        name: "mass budget".into(),
        status: if budget_ok {
            CheckStatus::Pass
        } else {
            CheckStatus::Fail
        },
        detail: format!(
            "tower mass grows from {} to {} within total mass {}",
            tower_mass
                .first()
                .map(|v| v.to_string())
                .unwrap_or_default(),
            tower_mass.last().map(|v| v.to_string()).unwrap_or_default(),
            schedule.total_mass
        ),
    });

    // s_j^2 h_j trend (flows; needed by the factor-rigidity machinery).
    checks.push(match schedule.kind {
        ScheduleKind::Flow => {
            let t = classify_trend(&s2h);
            Check {
                name: "s_j^2 h_j trend".into(),
                status: if t == Trend::Increasing {
                    CheckStatus::Pass
                } else {
                    CheckStatus::Flag
                },
                detail: match t {
                    Trend::Increasing => "increasing".into(),
                    Trend::Constant => "constant; flagged for acceleration".into(),
                    Trend::Decreasing => "decreasing; flagged for acceleration".into(),
                    Trend::Mixed => "mixed; flagged for acceleration".into(),
                },
            }
        }
        _ => Check {
            name: "s_j^2 h_j trend".into(),
            status: CheckStatus::NotApplicable,
            detail: "step is constant for this action".into(),
        },
    });

    // Base shrinkage: with no cuts the partition cannot converge.
    let lazy: Vec<usize> = schedule.stages[..horizon]
        .iter()
        .enumerate()
        .filter(|(_, rule)| rule.r.iter().all(|&r| r < 2))
        .map(|(j, _)| j)
        .collect();
    checks.push(Check {
        name: "cuts".into(),
        status: if lazy.is_empty() {
            CheckStatus::Pass
        } else {
            CheckStatus::Flag
        },
        detail: if lazy.is_empty() {
            "every stage cuts at least once on some axis".into()
        } else {
            format!("no cutting at stages {lazy:?}; base width cannot shrink")
        },
    });

    Ok(ValidationReport { horizon, checks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rational::rat;

    #[test]
    fn preset_odometer_fields() {
        let s = preset("odometer", Some(8)).unwrap();
        assert_eq!(s.m0, rat("1"));
        assert_eq!(s.total_mass, rat("1"));
        assert!(s.stages.iter().all(|r| r.sigma.iter().all(|&x| x == 0)));
    }

    #[test]
    fn preset_chacon_fields() {
        let s = preset("chacon", Some(8)).unwrap();
        assert_eq!(s.m0, rat("2/3"));
        assert_eq!(s.total_mass, rat("1"));
        assert!(s
            .stages
            .iter()
            .all(|r| r.sigma == vec![0, 1, 0] && r.r == vec![3]));
    }

    #[test]
    fn unknown_preset_rejected() {
        assert!(matches!(
            preset("nonesuch", None),
            Err(Error::UnknownPreset(_))
        ));
        assert!(preset("grid-odometer-2", None).is_ok());
        assert!(preset("grid-odometer-0", None).is_err());
    }

    #[test]
    fn validate_odometer_passes() {
        let s = preset("odometer", Some(10)).unwrap();
        let rep = validate_schedule(&s, 10).unwrap();
        assert!(rep.passed());
        assert_eq!(
            rep.check("s_j^2 h_j trend").unwrap().status,
            CheckStatus::NotApplicable
        );
    }

    // A flow that only refines time (no cutting) keeps s_j h_j constant and
    // fails the growth check.
    #[test]
    fn validate_lazy_flow_fails_growth() {
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
        let rep = validate_schedule(&s, 6).unwrap();
        assert_eq!(
            rep.check("s_j h_j -> infinity").unwrap().status,
            CheckStatus::Fail
        );
        assert_eq!(rep.check("cuts").unwrap().status, CheckStatus::Flag);
    }

    // Two cuts with step ratio 2: s_j h_j doubles (passes) while s_j^2 h_j
    // stays constant (flagged for acceleration).
    #[test]
    fn validate_flow_flags_s2h() {
        let s = Schedule::flow(
            rat("1"),
            rat("1"),
            rat("1"),
            (0..6)
                .map(|_| StageRule {
                    r: vec![2],
                    q: 2,
                    sigma: vec![0, 0],
                })
                .collect(),
        )
        .unwrap();
        let rep = validate_schedule(&s, 6).unwrap();
        assert!(rep.passed());
        let c = rep.check("s_j^2 h_j trend").unwrap();
        assert_eq!(c.status, CheckStatus::Flag);
        assert!(c.detail.contains("constant"));
    }

    #[test]
    fn scalar_cut_counts_accepted() {
        let s: StageRule = serde_json::from_str(r#"{"r": 3, "sigma": [0,1,0]}"#).unwrap();
        assert_eq!(s.r, vec![3]);
        assert_eq!(s.q, 1);
        let s: StageRule = serde_json::from_str(r#"{"r": [2,2], "sigma": [0,0]}"#).unwrap();
        assert_eq!(s.r, vec![2, 2]);
    }

    #[test]
    fn schedule_json_round_trip_is_bit_exact() {
        for name in ["odometer", "chacon", "flat-staircase", "flow-odometer"] {
            let s = preset(name, Some(6)).unwrap();
            let j1 = serde_json::to_string(&s).unwrap();
            let back: Schedule = serde_json::from_str(&j1).unwrap();
            let j2 = serde_json::to_string(&back).unwrap();
            assert_eq!(j1, j2);
            assert_eq!(s, back);
        }
    }
}
