//! Serde representation of the scenario file.
//!
//! ```json
//! {
//!   "agents": [{"id": "a1", "kind": "autonomous", "dim": 1}],
//!   "edges": [],
//!   "costs": {"a1": {"type": "quadratic", "weight": [[1.0]]}},
//!   "constraint": {"rows": 1, "a_blocks": {"a1": [[1.0]]}, "b_blocks": {}, "c": [-1.0]},
//!   "human_models": {},
//!   "solver": {"dt": 0.001}
//! }
//! ```
//!
//! Matrices are row-major nested lists.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{
    CostFunction, CouplingConstraint, InitialGuess, QuadraticCost, Scenario, ScenarioParts,
    SolverOptions,
};
use crate::error::{Error, Result};
use crate::human::{
    attitude_preset, ApproximationSchedule, AttitudeKind, HumanResponseModel, ResponseFamily,
};
use crate::reformulation::SplitPolicy;
use crate::scalar::{lit, wide, Scalar};
use crate::topology::NetworkTopology;

pub type MatrixDoc = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioDocument {
    pub agents: Vec<AgentDoc>,
    #[serde(default)]
    pub edges: Vec<(String, String)>,
    pub costs: BTreeMap<String, CostDoc>,
    pub constraint: ConstraintDoc,
    #[serde(default)]
    pub human_models: BTreeMap<String, HumanModelDoc>,
    #[serde(default)]
    pub solver: SolverDoc,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<InitialDoc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKindDoc {
    Autonomous,
    Human,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentDoc {
    pub id: String,
    pub kind: AgentKindDoc,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum CostDoc {
    Quadratic { weight: MatrixDoc },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintDoc {
    pub rows: usize,
    pub a_blocks: BTreeMap<String, MatrixDoc>,
    #[serde(default)]
    pub b_blocks: BTreeMap<String, MatrixDoc>,
    pub c: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyDoc {
    Affine,
    SoftplusAffine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AttitudeDoc {
    Preset { kind: String, magnitude: f64 },
    Alpha { alpha: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HumanModelDoc {
    pub family: FamilyDoc,
    pub base: Vec<f64>,
    pub gains: BTreeMap<String, MatrixDoc>,
    pub attitude: AttitudeDoc,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<ScheduleDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleDoc {
    pub delta: ScheduleDeltaDoc,
    pub settle_time: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleDeltaDoc {
    #[serde(default)]
    pub gains: BTreeMap<String, MatrixDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverDoc {
    pub dt: f64,
    pub tolerance: f64,
    pub max_time: f64,
    pub split_policy: SplitPolicy,
    pub record_stride: usize,
    pub check_slater: bool,
}

impl Default for SolverDoc {
    fn default() -> Self {
        SolverOptions::default().into()
    }
}

impl From<SolverOptions> for SolverDoc {
    fn from(o: SolverOptions) -> Self {
        Self {
            dt: o.dt,
            tolerance: o.tolerance,
            max_time: o.max_time,
            split_policy: o.split_policy,
            record_stride: o.record_stride,
            check_slater: o.check_slater,
        }
    }
}

impl From<&SolverDoc> for SolverOptions {
    fn from(d: &SolverDoc) -> Self {
        Self {
            dt: d.dt,
            tolerance: d.tolerance,
            max_time: d.max_time,
            split_policy: d.split_policy,
            record_stride: d.record_stride,
            check_slater: d.check_slater,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitialDoc {
    pub x: BTreeMap<String, Vec<f64>>,
    pub z: BTreeMap<String, Vec<f64>>,
    pub lambda: BTreeMap<String, Vec<f64>>,
}

fn matrix<T: Scalar>(what: &str, rows: &MatrixDoc) -> Result<DMatrix<T>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Schema(format!("{what}: ragged matrix rows")));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Schema(format!("{what}: non-finite matrix entry")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| lit(rows[i][j])))
}

fn vector<T: Scalar>(what: &str, v: &[f64]) -> Result<DVector<T>> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Schema(format!("{what}: non-finite vector entry")));
    }
    Ok(DVector::from_iterator(v.len(), v.iter().map(|&x| lit(x))))
}

fn matrix_doc<T: Scalar>(m: &DMatrix<T>) -> MatrixDoc {
    m.row_iter()
        .map(|r| r.iter().map(|&v| wide(v)).collect())
        .collect()
}

fn vector_doc<T: Scalar>(v: &DVector<T>) -> Vec<f64> {
    v.iter().map(|&x| wide(x)).collect()
}

fn vector_map<T: Scalar>(
    what: &str,
    m: &BTreeMap<String, Vec<f64>>,
) -> Result<BTreeMap<String, DVector<T>>> {
    m.iter()
        .map(|(k, v)| Ok((k.clone(), vector(&format!("{what}.{k}"), v)?)))
        .collect()
}

pub(super) fn build<T: Scalar>(doc: &ScenarioDocument) -> Result<Scenario<T>> {
    let mut auto = Vec::new();
    let mut hum = Vec::new();
    let mut dims = BTreeMap::new();
    for a in &doc.agents {
        if dims.insert(a.id.clone(), a.dim).is_some() {
            return Err(Error::DuplicateId(a.id.clone()));
        }
        match a.kind {
            AgentKindDoc::Autonomous => auto.push(a.id.as_str()),
            AgentKindDoc::Human => hum.push(a.id.as_str()),
        }
    }
    let topology = NetworkTopology::new(
        auto,
        hum,
        doc.edges.iter().map(|(a, b)| (a.as_str(), b.as_str())),
    )?;

    let mut costs = BTreeMap::new();
    for (id, c) in &doc.costs {
        let CostDoc::Quadratic { weight } = c;
        let w = matrix(&format!("costs.{id}.weight"), weight)?;
        costs.insert(id.clone(), CostFunction::Quadratic(QuadraticCost::new(id, w)?));
    }

    let cd = &doc.constraint;
    if cd.c.len() != cd.rows {
        return Err(Error::Schema(format!(
            "constraint.c has {} entries but rows = {}",
            cd.c.len(),
            cd.rows
        )));
    }
    let block_map = |what: &str, m: &BTreeMap<String, MatrixDoc>| -> Result<_> {
        m.iter()
            .map(|(k, v)| Ok((k.clone(), matrix::<T>(&format!("{what}.{k}"), v)?)))
            .collect::<Result<BTreeMap<_, _>>>()
    };
    let constraint = CouplingConstraint {
        a_blocks: block_map("constraint.a_blocks", &cd.a_blocks)?,
        b_blocks: block_map("constraint.b_blocks", &cd.b_blocks)?,
        c: vector("constraint.c", &cd.c)?,
    };

    let mut human_models = BTreeMap::new();
    let mut schedules = BTreeMap::new();
    for (id, md) in &doc.human_models {
        let invalid = |detail: String| Error::InvalidHumanModel {
            id: id.clone(),
            detail,
        };
        let gains = md
            .gains
            .iter()
            .map(|(n, g)| Ok((n.clone(), matrix::<T>(&format!("human_models.{id}.gains.{n}"), g)?)))
            .collect::<Result<Vec<_>>>()?;
        let alpha = match &md.attitude {
            AttitudeDoc::Preset { kind, magnitude } => {
                let kind: AttitudeKind = kind.parse()?;
                if gains.iter().flat_map(|(_, g)| g.iter()).any(|&v| v < T::zero()) {
                    return Err(invalid(
                        "attitude presets require elementwise nonnegative gains".into(),
                    ));
                }
                attitude_preset(kind, lit::<T>(*magnitude))?
            }
            AttitudeDoc::Alpha { alpha } => lit(*alpha),
        };
        let family = match (md.family, md.beta) {
            (FamilyDoc::Affine, None) => ResponseFamily::Affine,
            (FamilyDoc::Affine, Some(_)) => {
                return Err(invalid("beta is only valid for softplus_affine".into()))
            }
            (FamilyDoc::SoftplusAffine, Some(b)) => ResponseFamily::SoftplusAffine { beta: lit(b) },
            (FamilyDoc::SoftplusAffine, None) => {
                return Err(invalid("softplus_affine requires beta".into()))
            }
        };
        let base = vector(&format!("human_models.{id}.base"), &md.base)?;
        human_models.insert(
            id.clone(),
            HumanResponseModel::new(id.clone(), family, base, gains, alpha)?,
        );
        if let Some(sd) = &md.schedule {
            if !(sd.settle_time.is_finite() && sd.settle_time >= 0.0) {
                return Err(invalid("schedule settle_time must be finite and nonnegative".into()));
            }
            let gain_deltas = sd
                .delta
                .gains
                .iter()
                .map(|(n, g)| Ok((n.clone(), matrix::<T>(&format!("schedule.{id}.{n}"), g)?)))
                .collect::<Result<BTreeMap<_, _>>>()?;
            let base_delta = sd
                .delta
                .base
                .as_ref()
                .map(|b| vector(&format!("schedule.{id}.base"), b))
                .transpose()?;
            schedules.insert(
                id.clone(),
                ApproximationSchedule {
                    gain_deltas,
                    base_delta,
                    settle_time: lit(sd.settle_time),
                },
            );
        }
    }

    let initial = doc
        .initial
        .as_ref()
        .map(|i| -> Result<InitialGuess<T>> {
            Ok(InitialGuess {
                x: vector_map("initial.x", &i.x)?,
                z: vector_map("initial.z", &i.z)?,
                lambda: vector_map("initial.lambda", &i.lambda)?,
            })
        })
        .transpose()?;

    Scenario::new(ScenarioParts {
        topology,
        dims,
        costs,
        constraint,
        human_models,
        schedules,
        solver: (&doc.solver).into(),
        initial,
    })
}

pub(super) fn export<T: Scalar>(s: &Scenario<T>) -> ScenarioDocument {
    let topo = s.topology();
    let layout = s.dimensions();
    let agents = topo
        .ids()
        .iter()
        .enumerate()
        .map(|(idx, id)| AgentDoc {
            id: id.clone(),
            kind: if idx < layout.m {
                AgentKindDoc::Autonomous
            } else {
                AgentKindDoc::Human
            },
            dim: s.cost(idx).dim(),
        })
        .collect();
    let edges = topo
        .edges()
        .map(|(a, b)| (topo.id_at(a).to_owned(), topo.id_at(b).to_owned()))
        .collect();
    let costs = topo
        .ids()
        .iter()
        .enumerate()
        .filter_map(|(idx, id)| {
            s.cost(idx).as_quadratic().map(|q| {
                (
                    id.clone(),
                    CostDoc::Quadratic {
                        weight: matrix_doc(q.weight()),
                    },
                )
            })
        })
        .collect();
    let a_blocks = (0..layout.m)
        .map(|i| (topo.id_at(i).to_owned(), matrix_doc(s.a_block(i))))
        .collect();
    let b_blocks = (0..layout.h)
        .map(|k| (topo.id_at(layout.m + k).to_owned(), matrix_doc(s.b_block(k))))
        .collect();
    let human_models = (0..layout.h)
        .map(|k| {
            let m = s.human_model(k);
            let (family, beta) = match m.family() {
                ResponseFamily::Affine => (FamilyDoc::Affine, None),
                ResponseFamily::SoftplusAffine { beta } => {
                    (FamilyDoc::SoftplusAffine, Some(wide(beta)))
                }
            };
            let schedule = s.schedule(k).map(|sc| ScheduleDoc {
                delta: ScheduleDeltaDoc {
                    gains: sc.gain_deltas.iter().map(|(n, d)| (n.clone(), matrix_doc(d))).collect(),
                    base: sc.base_delta.as_ref().map(vector_doc),
                },
                settle_time: wide(sc.settle_time),
            });
            (
                m.human_id().to_owned(),
                HumanModelDoc {
                    family,
                    base: vector_doc(m.base()),
                    gains: m
                        .neighbor_ids()
                        .iter()
                        .zip(m.gains())
                        .map(|(n, g)| (n.clone(), matrix_doc(g)))
                        .collect(),
                    attitude: AttitudeDoc::Alpha {
                        alpha: wide(m.attitude()),
                    },
                    beta,
                    schedule,
                },
            )
        })
        .collect();
    let to_map = |m: &BTreeMap<String, DVector<T>>| {
        m.iter().map(|(k, v)| (k.clone(), vector_doc(v))).collect()
    };
    ScenarioDocument {
        agents,
        edges,
        costs,
        constraint: ConstraintDoc {
            rows: layout.rows,
            a_blocks,
            b_blocks,
            c: vector_doc(s.offset()),
        },
        human_models,
        solver: s.solver().clone().into(),
        initial: s.initial().map(|i| InitialDoc {
            x: to_map(&i.x),
            z: to_map(&i.z),
            lambda: to_map(&i.lambda),
        }),
    }
}
