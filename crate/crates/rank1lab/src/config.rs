//! Experiment configuration: JSON schema, parsing, and fail-fast
//! precondition checks with the violated inequality named.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::coloring::ColoringFactor;
use crate::error::{Error, Result};
use crate::joining::{Displacement, JoiningSpec};
use crate::rational::Rational;
use crate::schedule::{preset, Schedule, ScheduleKind};
use crate::search::{FamilyPair, TestFamily};
use crate::tower::Construction;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Validate,
    FlatRoofDefect,
    Approximation,
    Wct,
    Rigidity,
    FlatRoofConvergence,
    ZnPartialWct,
    ZnPartialRigidity,
    FatDiagonalBound,
}

impl Experiment {
    pub fn name(&self) -> &'static str {
        match self {
            Experiment::Validate => "validate",
            Experiment::FlatRoofDefect => "flat-roof-defect",
            Experiment::Approximation => "approximation",
            Experiment::Wct => "wct",
            Experiment::Rigidity => "rigidity",
            Experiment::FlatRoofConvergence => "flat-roof-convergence",
            Experiment::ZnPartialWct => "zn-partial-wct",
            Experiment::ZnPartialRigidity => "zn-partial-rigidity",
            Experiment::FatDiagonalBound => "fat-diagonal-bound",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScheduleSource {
    Preset {
        preset: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        horizon: Option<usize>,
    },
    Inline(Schedule),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum NuSpec {
    Offdiagonal {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        time: Option<Rational>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        steps: Option<Vec<i64>>,
    },
    Graph {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        time: Option<Rational>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        steps: Option<Vec<i64>>,
    },
    Product,
    Relindep,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ColoringSpec {
    pub reference_stage: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moduli: Option<Vec<u64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub colors: Option<Vec<u32>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExplicitPair {
    pub a: Vec<u64>,
    pub b: Vec<u64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FamilySpec {
    pub reference_stage: usize,
    /// "singletons" | "color-classes" | "explicit"
    pub generator: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pairs: Option<Vec<ExplicitPair>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub schedule: ScheduleSource,
    pub experiment: Experiment,
    /// Inclusive stage range [j_min, j_max].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stages: Option<[usize; 2]>,
    /// Resolution depth for certified evaluations.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_stage: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nu: Option<NuSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<Rational>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<Rational>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_displacement: Option<Rational>,
    /// Commuting-map displacement for wct / zn experiments.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_time: Option<Rational>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_steps: Option<Vec<i64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coloring: Option<ColoringSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<FamilySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slack: Option<Rational>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget_column_scans: Option<u64>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn schedule(&self) -> Result<Schedule> {
        match &self.schedule {
            ScheduleSource::Preset {
                preset: name,
                horizon,
            } => preset(name, *horizon),
            ScheduleSource::Inline(s) => {
                s.validate_shape()?;
                Ok(s.clone())
            }
        }
    }

    pub fn stage_range(&self, default: [usize; 2]) -> (usize, usize) {
        let [a, b] = self.stages.unwrap_or(default);
        (a, b.max(a))
    }

    pub fn resolve_nu(&self, con: &Construction) -> Result<JoiningSpec> {
        let spec = self
            .nu
            .as_ref()
            .ok_or_else(|| Error::Config("experiment requires a target joining `nu`".into()))?;
        let displacement = |time: &Option<Rational>, steps: &Option<Vec<i64>>| {
            displacement_from(con, time, steps)
        };
        Ok(match spec {
            NuSpec::Offdiagonal { time, steps } => {
                JoiningSpec::OffDiagonal(displacement(time, steps)?)
            }
            NuSpec::Graph { time, steps } => JoiningSpec::GraphOfAction(displacement(time, steps)?),
            NuSpec::Product => JoiningSpec::Product,
            NuSpec::Relindep => JoiningSpec::RelIndep(self.resolve_coloring(con)?),
        })
    }

    pub fn resolve_coloring(&self, con: &Construction) -> Result<ColoringFactor> {
        let spec = self
            .coloring
            .as_ref()
            .ok_or_else(|| Error::Config("experiment requires a `coloring`".into()))?;
        let coloring = match (&spec.moduli, &spec.colors) {
            (Some(m), None) => ColoringFactor::cyclic(con, spec.reference_stage, m)?,
            (None, Some(c)) => ColoringFactor::new(spec.reference_stage, c.clone()),
            _ => {
                return Err(Error::Config(
                    "coloring needs exactly one of `moduli` or `colors`".into(),
                ))
            }
        };
        Ok(coloring)
    }

    pub fn resolve_target(&self, con: &Construction) -> Result<Displacement> {
        displacement_from(con, &self.target_time, &self.target_steps)
    }

    pub fn resolve_family(&self, con: &Construction, default_stage: usize) -> Result<TestFamily> {
        let spec = match &self.family {
            Some(f) => f.clone(),
            None => FamilySpec {
                reference_stage: default_stage,
                generator: "singletons".into(),
                pairs: None,
            },
        };
        match spec.generator.as_str() {
            "singletons" => TestFamily::singletons(con, spec.reference_stage),
            "color-classes" => {
                let coloring = self.resolve_coloring(con)?;
                TestFamily::color_classes(con, &coloring, spec.reference_stage)
            }
            "explicit" => {
                let pairs = spec
                    .pairs
                    .ok_or_else(|| Error::Config("explicit family needs `pairs`".into()))?;
                let mut out = Vec::new();
                for (i, p) in pairs.iter().enumerate() {
                    out.push(FamilyPair {
                        label: format!("pair{i}"),
                        a: crate::level_set::LevelSet::new(
                            con,
                            spec.reference_stage,
                            p.a.clone(),
                        )?,
                        b: crate::level_set::LevelSet::new(
                            con,
                            spec.reference_stage,
                            p.b.clone(),
                        )?,
                    });
                }
                Ok(TestFamily::explicit(spec.reference_stage, out))
            }
            other => Err(Error::Config(format!("unknown family generator {other:?}"))),
        }
    }
}

fn displacement_from(
    con: &Construction,
    time: &Option<Rational>,
    steps: &Option<Vec<i64>>,
) -> Result<Displacement> {
    match (time, steps, con.kind()) {
        (Some(t), None, ScheduleKind::Flow) => Ok(Displacement::Time(t.clone())),
        (None, Some(k), ScheduleKind::Z | ScheduleKind::Rect) => {
            if k.len() != con.dim() {
                return Err(Error::Config(format!(
                    "displacement needs {} components",
                    con.dim()
                )));
            }
            Ok(Displacement::Steps(k.clone()))
        }
        (Some(t), None, ScheduleKind::Z) if con.dim() == 1 => {
            // Step 1 actions accept times that are integers.
            let k = t
                .to_i128_exact()
                .ok_or_else(|| Error::Config(format!("non-integer displacement {t} for a Z-action")))?;
            Ok(Displacement::Steps(vec![k as i64]))
        }
        _ => Err(Error::Config(
            "displacement: give `time` for flows or `steps` for Z / Z^n".into(),
        )),
    }
}

/// Named precondition inequalities for `check`: each is re-evaluated and
/// printed with its mathematical form.
#[derive(Clone, Debug, Serialize)]
pub struct PreconditionCheck {
    pub form: String,
    pub detail: String,
    pub passed: bool,
}

pub fn check_preconditions(config: &ExperimentConfig) -> Result<Vec<PreconditionCheck>> {
    let schedule = config.schedule()?;
    let mut checks = Vec::new();
    let n = schedule.n as u32;
    let mut push = |form: &str, detail: String, passed: bool| {
        checks.push(PreconditionCheck {
            form: form.into(),
            detail,
            passed,
        });
    };
    match config.experiment {
        Experiment::FatDiagonalBound | Experiment::ZnPartialWct | Experiment::ZnPartialRigidity => {
            if let Some(delta) = &config.delta {
                let corner = Rational::one() - Rational::new(1, 2).pow(n);
                push(
                    "delta > 1 - 1/2^n",
                    format!("{delta} vs {corner}"),
                    delta > &corner,
                );
                if let Some(eps) = &config.epsilon {
                    let lhs = (Rational::new(1, 2) - eps.clone()).pow(n);
                    let rhs = Rational::one() - delta.clone();
                    push(
                        "(1/2 - epsilon)^n > 1 - delta",
                        format!("{lhs} vs {rhs}"),
                        lhs > rhs,
                    );
                }
            }
        }
        Experiment::Approximation => {
            if let Some(delta) = &config.delta {
                push(
                    "0 < delta < 1",
                    format!("{delta}"),
                    delta > &Rational::zero() && delta < &Rational::one(),
                );
            } else {
                push("0 < delta < 1", "delta missing".into(), false);
            }
        }
        _ => {}
    }
    if let Some([a, b]) = config.stages {
        push(
            "stage range within horizon",
            format!("[{a}, {b}] within 0..={}", schedule.horizon()),
            a <= b && b <= schedule.horizon(),
        );
    }
    Ok(checks)
}
