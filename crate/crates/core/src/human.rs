//! Differentiable human response models `y_k = q_k(x_{N_k})`.
//!
//! A model maps the states of a human's autonomous neighbors to the human's
//! own state. Two families are provided:
//!
//! * `Affine`: `y = base + α Σ_j G_j x_j`
//! * `SoftplusAffine`: `y = softplus_β(base + α Σ_j G_j x_j)` elementwise,
//!   with `softplus_β(u) = ln(1 + e^{βu}) / β`, which keeps `y > 0`.
//!
//! The attitude `α ∈ [-1, 1]` encodes risk preference: with nonnegative gains a
//! negative `α` (risk seeking) lowers the human's workload as neighbor activity
//! rises, a positive `α` (risk averse) raises it.
//!
//! An [`ApproximationSchedule`] models a proxy whose estimate of the model is
//! wrong at first and settles linearly onto the true parameters by time `T`.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, DVectorView};

use crate::error::{Error, Result};
use crate::scalar::{lit, wide, Scalar};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ResponseFamily<T> {
    Affine,
    SoftplusAffine { beta: T },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttitudeKind {
    RiskSeeking,
    RiskAverse,
}

impl FromStr for AttitudeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "risk_seeking" => Ok(Self::RiskSeeking),
            "risk_averse" => Ok(Self::RiskAverse),
            other => Err(Error::InvalidArgument(format!("unknown attitude kind `{other}`"))),
        }
    }
}

impl AttitudeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::RiskSeeking => "risk_seeking",
            Self::RiskAverse => "risk_averse",
        }
    }
}

/// Signed attitude parameter for a preset kind.
pub fn attitude_preset<T: Scalar>(kind: AttitudeKind, magnitude: T) -> Result<T> {
    if !(magnitude > T::zero() && magnitude <= T::one()) {
        return Err(Error::AttitudeRange(wide(magnitude)));
    }
    Ok(match kind {
        AttitudeKind::RiskSeeking => -magnitude,
        AttitudeKind::RiskAverse => magnitude,
    })
}

/// Lookup of autonomous neighbor states by id.
pub trait NeighborStates<T> {
    fn state(&self, id: &str) -> Option<&[T]>;
}

impl<T: Scalar> NeighborStates<T> for BTreeMap<String, DVector<T>> {
    fn state(&self, id: &str) -> Option<&[T]> {
        self.get(id).map(|v| v.as_slice())
    }
}

impl<T: Scalar> NeighborStates<T> for HashMap<String, DVector<T>> {
    fn state(&self, id: &str) -> Option<&[T]> {
        self.get(id).map(|v| v.as_slice())
    }
}

/// Parameter perturbation that decays linearly to zero at `settle_time`.
#[derive(Debug, Clone, PartialEq)]
pub struct ApproximationSchedule<T> {
    /// Additive gain perturbation per neighbor; absent neighbors are unperturbed.
    pub gain_deltas: BTreeMap<String, DMatrix<T>>,
    pub base_delta: Option<DVector<T>>,
    pub settle_time: T,
}

impl<T: Scalar> ApproximationSchedule<T> {
    /// Weight on the perturbation at time `t`: `1 - t/T` before `T`, exactly zero after.
    pub fn blend(&self, t: T) -> T {
        if self.settle_time <= T::zero() || t >= self.settle_time {
            T::zero()
        } else {
            T::one() - t / self.settle_time
        }
    }

    /// Schedule perturbing every gain by `fraction` of its true value.
    pub fn relative_gain_perturbation(
        model: &HumanResponseModel<T>,
        fraction: T,
        settle_time: T,
    ) -> Self {
        let gain_deltas = model
            .neighbor_ids
            .iter()
            .zip(&model.gains)
            .map(|(id, g)| (id.clone(), g * fraction))
            .collect();
        Self {
            gain_deltas,
            base_delta: None,
            settle_time,
        }
    }
}

/// Response value plus Jacobian blocks aligned with the model's neighbor order.
#[derive(Debug, Clone)]
pub struct ResponseEval<T: Scalar> {
    pub y: DVector<T>,
    pub jacobian: Vec<DMatrix<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HumanResponseModel<T: Scalar> {
    human_id: String,
    neighbor_ids: Vec<String>,
    gains: Vec<DMatrix<T>>,
    base: DVector<T>,
    attitude: T,
    family: ResponseFamily<T>,
}

impl<T: Scalar> HumanResponseModel<T> {
    /// Builds a model. Neighbor order is canonicalized (sorted by id).
    pub fn new(
        human_id: impl Into<String>,
        family: ResponseFamily<T>,
        base: DVector<T>,
        gains: impl IntoIterator<Item = (String, DMatrix<T>)>,
        attitude: T,
    ) -> Result<Self> {
        let human_id = human_id.into();
        let invalid = |detail: String| Error::InvalidHumanModel {
            id: human_id.clone(),
            detail,
        };
        if base.is_empty() {
            return Err(invalid("base vector is empty".into()));
        }
        if !(attitude >= -T::one() && attitude <= T::one()) {
            return Err(invalid(format!("attitude {attitude} outside [-1, 1]")));
        }
        if let ResponseFamily::SoftplusAffine { beta } = family {
            if !(beta > T::zero()) {
                return Err(invalid(format!("softplus sharpness {beta} must be positive")));
            }
        }
        let mut pairs: Vec<(String, DMatrix<T>)> = gains.into_iter().collect();
        pairs.sort_by(|a, b| a.0.cmp(&b.0));
        for w in pairs.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(invalid(format!("duplicate gain block for `{}`", w[0].0)));
            }
        }
        for (id, g) in &pairs {
            if g.nrows() != base.len() {
                return Err(Error::DimensionMismatch {
                    id: human_id.clone(),
                    detail: format!(
                        "gain block for `{id}` has {} rows, base has {}",
                        g.nrows(),
                        base.len()
                    ),
                });
            }
            if g.iter().any(|v| !v.is_finite()) || base.iter().any(|v| !v.is_finite()) {
                return Err(invalid("non-finite parameter".into()));
            }
        }
        let (neighbor_ids, gains) = pairs.into_iter().unzip();
        Ok(Self {
            human_id,
            neighbor_ids,
            gains,
            base,
            attitude,
            family,
        })
    }

    pub fn human_id(&self) -> &str {
        &self.human_id
    }

    pub fn neighbor_ids(&self) -> &[String] {
        &self.neighbor_ids
    }

    pub fn gains(&self) -> &[DMatrix<T>] {
        &self.gains
    }

    pub fn gain(&self, neighbor: &str) -> Option<&DMatrix<T>> {
        self.neighbor_ids
            .iter()
            .position(|n| n == neighbor)
            .map(|i| &self.gains[i])
    }

    pub fn base(&self) -> &DVector<T> {
        &self.base
    }

    pub fn attitude(&self) -> T {
        self.attitude
    }

    pub fn family(&self) -> ResponseFamily<T> {
        self.family
    }

    /// Output dimension `s_k`.
    pub fn output_dim(&self) -> usize {
        self.base.len()
    }

    /// Same model with a different attitude parameter.
    pub fn with_attitude(&self, attitude: T) -> Result<Self> {
        Self::new(
            self.human_id.clone(),
            self.family,
            self.base.clone(),
            self.neighbor_ids.iter().cloned().zip(self.gains.iter().cloned()),
            attitude,
        )
    }

    fn effective<'a>(
        &'a self,
        t: T,
        schedule: Option<&ApproximationSchedule<T>>,
    ) -> (Cow<'a, [DMatrix<T>]>, Cow<'a, DVector<T>>) {
        let Some(s) = schedule else {
            return (Cow::Borrowed(&self.gains), Cow::Borrowed(&self.base));
        };
        let w = s.blend(t);
        if w == T::zero() {
            return (Cow::Borrowed(&self.gains), Cow::Borrowed(&self.base));
        }
        let gains = self
            .neighbor_ids
            .iter()
            .zip(&self.gains)
            .map(|(id, g)| match s.gain_deltas.get(id) {
                Some(d) => g + d * w,
                None => g.clone(),
            })
            .collect::<Vec<_>>();
        let base = match &s.base_delta {
            Some(d) => &self.base + d * w,
            None => self.base.clone(),
        };
        (Cow::Owned(gains), Cow::Owned(base))
    }

    fn resolve<'s, S: NeighborStates<T>>(&self, x: &'s S) -> Result<Vec<&'s [T]>> {
        self.neighbor_ids
            .iter()
            .map(|id| x.state(id).ok_or_else(|| Error::MissingNeighbor(id.clone())))
            .collect()
    }

    /// Evaluates the response and its Jacobian from neighbor blocks given in
    /// `neighbor_ids()` order.
    pub fn evaluate_blocks(
        &self,
        blocks: &[&[T]],
        t: T,
        schedule: Option<&ApproximationSchedule<T>>,
    ) -> Result<ResponseEval<T>> {
        if blocks.len() != self.neighbor_ids.len() {
            return Err(Error::DimensionMismatch {
                id: self.human_id.clone(),
                detail: format!(
                    "expected {} neighbor blocks, got {}",
                    self.neighbor_ids.len(),
                    blocks.len()
                ),
            });
        }
        let (gains, base) = self.effective(t, schedule);
        let mut pre = base.into_owned();
        for ((g, xb), id) in gains.iter().zip(blocks).zip(&self.neighbor_ids) {
            if g.ncols() != xb.len() {
                return Err(Error::DimensionMismatch {
                    id: id.clone(),
                    detail: format!(
                        "state block has length {}, gain of `{}` expects {}",
                        xb.len(),
                        self.human_id,
                        g.ncols()
                    ),
                });
            }
            pre.gemv(self.attitude, g, &DVectorView::from_slice(xb, xb.len()), T::one());
        }
        match self.family {
            ResponseFamily::Affine => Ok(ResponseEval {
                y: pre,
                jacobian: gains.iter().map(|g| g * self.attitude).collect(),
            }),
            ResponseFamily::SoftplusAffine { beta } => {
                let y = pre.map(|u| softplus(u, beta));
                let slope = pre.map(|u| logistic(beta * u));
                let jacobian = gains
                    .iter()
                    .map(|g| {
                        let mut j = g * self.attitude;
                        for (mut row, s) in j.row_iter_mut().zip(slope.iter()) {
                            row *= *s;
                        }
                        j
                    })
                    .collect();
                Ok(ResponseEval { y, jacobian })
            }
        }
    }

    pub fn evaluate<S: NeighborStates<T>>(
        &self,
        x: &S,
        t: T,
        schedule: Option<&ApproximationSchedule<T>>,
    ) -> Result<ResponseEval<T>> {
        let blocks = self.resolve(x)?;
        self.evaluate_blocks(&blocks, t, schedule)
    }

    /// `y_k` at time `t`, using the scheduled parameters when a schedule is given.
    pub fn respond<S: NeighborStates<T>>(
        &self,
        x: &S,
        t: T,
        schedule: Option<&ApproximationSchedule<T>>,
    ) -> Result<DVector<T>> {
        self.evaluate(x, t, schedule).map(|e| e.y)
    }

    /// Jacobian of [`respond`](Self::respond) with respect to each neighbor block.
    pub fn response_jacobian<S: NeighborStates<T>>(
        &self,
        x: &S,
        t: T,
        schedule: Option<&ApproximationSchedule<T>>,
    ) -> Result<BTreeMap<String, DMatrix<T>>> {
        let eval = self.evaluate(x, t, schedule)?;
        Ok(self.neighbor_ids.iter().cloned().zip(eval.jacobian).collect())
    }
}

/// `ln(1 + e^{βu}) / β`, evaluated without overflow.
pub fn softplus<T: Scalar>(u: T, beta: T) -> T {
    let v = beta * u;
    let s = if v > T::zero() {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    };
    s / beta
}

pub fn logistic<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Half-width of the central-difference stencil used by the crate's
/// finite-difference checks.
pub(crate) fn fd_step<T: Scalar>() -> T {
    lit(1e-6)
}
