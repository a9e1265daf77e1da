//! Rewriting the coupled constraint as per-agent constraints over the graph.
//!
//! The coupled constraint `Σ A_i x_i + Σ B_k y_k + c ≤ 0` holds if and only if
//! some `z ∈ ℝ^{r(m+h)}` satisfies
//!
//! ```text
//! [Ā x; B̄ y] + L̄ z + C ≤ 0,     Ā = diag{A_i}, B̄ = diag{B_k}, L̄ = L ⊗ I_r,
//! ```
//!
//! where the `r`-blocks of `C` sum to `c`. Block `v` of the left-hand side
//! only involves node `v` and its neighbors, so each agent can check its own
//! piece locally.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Scenario;
use crate::scalar::{lit, wide, Scalar};
use crate::topology::{laplacian_lift, NetworkTopology};

/// How the offset `c` is distributed over node blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitPolicy {
    /// The whole offset sits in the first autonomous agent's block.
    #[default]
    FirstAgent,
    /// Every node gets `c / (m + h)`.
    Uniform,
}

impl std::str::FromStr for SplitPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "first_agent" => Ok(Self::FirstAgent),
            "uniform" => Ok(Self::Uniform),
            other => Err(Error::InvalidArgument(format!("unknown split policy `{other}`"))),
        }
    }
}

/// Splits `c` into `m + h` blocks whose sum is `c`.
pub fn split_offset<T: Scalar>(
    c: &DVector<T>,
    topology: &NetworkTopology,
    policy: SplitPolicy,
) -> DVector<T> {
    let r = c.len();
    let nodes = topology.node_count();
    let mut out = DVector::zeros(r * nodes);
    match policy {
        SplitPolicy::FirstAgent => out.rows_mut(0, r).copy_from(c),
        SplitPolicy::Uniform => {
            let share = c / lit::<T>(nodes as f64);
            for v in 0..nodes {
                out.rows_mut(v * r, r).copy_from(&share);
            }
        }
    }
    out
}

/// Sums the `r`-blocks of a stacked vector: `(1ᵀ ⊗ I_r) v`.
pub fn block_sum<T: Scalar>(v: &DVector<T>, r: usize) -> DVector<T> {
    let mut out = DVector::zeros(r);
    for chunk in v.as_slice().chunks(r) {
        for (o, x) in out.iter_mut().zip(chunk) {
            *o += *x;
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct DecoupledConstraint<T: Scalar> {
    a_bar: DMatrix<T>,
    b_bar: DMatrix<T>,
    l_bar: DMatrix<T>,
    c_split: DVector<T>,
    rows: usize,
    m: usize,
    neighbors: Vec<Vec<usize>>,
    laplacian_pinv: DMatrix<T>,
}

impl<T: Scalar> DecoupledConstraint<T> {
    pub fn a_bar(&self) -> &DMatrix<T> {
        &self.a_bar
    }

    pub fn b_bar(&self) -> &DMatrix<T> {
        &self.b_bar
    }

    pub fn l_bar(&self) -> &DMatrix<T> {
        &self.l_bar
    }

    pub fn c_split(&self) -> &DVector<T> {
        &self.c_split
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn nodes(&self) -> usize {
        self.neighbors.len()
    }

    pub fn c_block(&self, node: usize) -> nalgebra::DVectorView<'_, T> {
        self.c_split.rows(node * self.rows, self.rows)
    }

    fn check(&self, x: &DVector<T>, y: &DVector<T>) -> Result<()> {
        if x.len() != self.a_bar.ncols() || y.len() != self.b_bar.ncols() {
            return Err(Error::DimensionMismatch {
                id: "x/y".into(),
                detail: format!(
                    "expected lengths {}/{}, got {}/{}",
                    self.a_bar.ncols(),
                    self.b_bar.ncols(),
                    x.len(),
                    y.len()
                ),
            });
        }
        Ok(())
    }

    fn check_z(&self, z: &DVector<T>) -> Result<()> {
        if z.len() != self.l_bar.nrows() {
            return Err(Error::DimensionMismatch {
                id: "z".into(),
                detail: format!("expected length {}, got {}", self.l_bar.nrows(), z.len()),
            });
        }
        Ok(())
    }

    /// `[Ā x; B̄ y] + C`.
    pub fn stacked(&self, x: &DVector<T>, y: &DVector<T>) -> Result<DVector<T>> {
        self.check(x, y)?;
        let split = self.m * self.rows;
        let mut s = self.c_split.clone();
        s.rows_mut(0, split).gemv(T::one(), &self.a_bar, x, T::one());
        let hum_len = s.len() - split;
        s.rows_mut(split, hum_len).gemv(T::one(), &self.b_bar, y, T::one());
        Ok(s)
    }

    /// Minimum-norm `z` solving `L̄ z = -rhs`, checked to `1e-8` (scaled).
    pub fn solve_laplacian(&self, rhs: &DVector<T>) -> Result<DVector<T>> {
        self.check_z(rhs)?;
        let r = self.rows;
        let n = self.nodes();
        // rhs laid out node-major: entry (v, j) lives at v * r + j.
        let rhs_mat = DMatrix::from_fn(n, r, |v, j| rhs[v * r + j]);
        let z_mat = -(&self.laplacian_pinv * rhs_mat);
        let z = DVector::from_fn(n * r, |idx, _| z_mat[(idx / r, idx % r)]);
        let resid = (&self.l_bar * &z + rhs).amax();
        let scale = rhs.amax().max(T::one());
        if resid > lit::<T>(1e-8) * scale {
            return Err(Error::Consistency(format!(
                "laplacian least-squares residual {:e} exceeds tolerance; right-hand side \
                 is not in image(L̄)",
                wide(resid)
            )));
        }
        Ok(z)
    }
}

/// Pseudo-inverse of a symmetric PSD matrix via its eigendecomposition.
fn psd_pinv<T: Scalar>(l: &DMatrix<T>) -> DMatrix<T> {
    let eig = SymmetricEigen::new(l.clone());
    let cutoff = lit::<T>(1e-9) * eig.eigenvalues.amax().max(T::one());
    let mut out = DMatrix::zeros(l.nrows(), l.ncols());
    for (idx, &ev) in eig.eigenvalues.iter().enumerate() {
        if ev > cutoff {
            let u = eig.eigenvectors.column(idx);
            out += (u * u.transpose()) / ev;
        }
    }
    out
}

fn block_diag<T: Scalar>(blocks: &[&DMatrix<T>]) -> DMatrix<T> {
    let rows = blocks.iter().map(|b| b.nrows()).sum();
    let cols = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let (mut r0, mut c0) = (0, 0);
    for b in blocks {
        out.view_mut((r0, c0), b.shape()).copy_from(*b);
        r0 += b.nrows();
        c0 += b.ncols();
    }
    out
}

/// Assembles `Ā`, `B̄`, `L̄` and the split offset for a scenario.
pub fn build_decoupled<T: Scalar>(
    scenario: &Scenario<T>,
    policy: SplitPolicy,
) -> DecoupledConstraint<T> {
    let dims = scenario.dimensions();
    let topo = scenario.topology();
    let a: Vec<_> = (0..dims.m).map(|i| scenario.a_block(i)).collect();
    let b: Vec<_> = (0..dims.h).map(|k| scenario.b_block(k)).collect();
    let mut b_bar = block_diag(&b);
    if dims.h == 0 {
        b_bar = DMatrix::zeros(0, 0);
    }
    let lap = topo.laplacian::<T>();
    DecoupledConstraint {
        a_bar: block_diag(&a),
        b_bar,
        l_bar: laplacian_lift(&lap, dims.rows).expect("rows validated positive"),
        c_split: split_offset(scenario.offset(), topo, policy),
        rows: dims.rows,
        m: dims.m,
        neighbors: (0..topo.node_count())
            .map(|v| topo.neighbor_indices(v).to_vec())
            .collect(),
        laplacian_pinv: psd_pinv(&lap),
    }
}

/// `Σ A_i x_i + Σ B_k y_k + c`; feasible iff every entry is `≤ 0`.
pub fn coupled_residual<T: Scalar>(
    scenario: &Scenario<T>,
    x: &DVector<T>,
    y: &DVector<T>,
) -> Result<DVector<T>> {
    let dims = scenario.dimensions();
    if x.len() != dims.total_x || y.len() != dims.total_y {
        return Err(Error::DimensionMismatch {
            id: "x/y".into(),
            detail: format!(
                "expected lengths {}/{}, got {}/{}",
                dims.total_x,
                dims.total_y,
                x.len(),
                y.len()
            ),
        });
    }
    let mut s = scenario.offset().clone();
    for i in 0..dims.m {
        let xi = x.rows(dims.x_offsets[i], dims.x_range(i).len());
        s.gemv(T::one(), scenario.a_block(i), &xi, T::one());
    }
    for k in 0..dims.h {
        let yk = y.rows(dims.y_offsets[k], dims.y_range(k).len());
        s.gemv(T::one(), scenario.b_block(k), &yk, T::one());
    }
    Ok(s)
}

/// `[Ā x; B̄ y] + L̄ z + C`, computed with the assembled matrices.
pub fn decoupled_residual<T: Scalar>(
    dc: &DecoupledConstraint<T>,
    x: &DVector<T>,
    y: &DVector<T>,
    z: &DVector<T>,
) -> Result<DVector<T>> {
    dc.check_z(z)?;
    let mut s = dc.stacked(x, y)?;
    s.gemv(T::one(), &dc.l_bar, z, T::one());
    Ok(s)
}

/// Residual of node `v`'s local constraint, built from neighbor differences:
/// `own + Σ_{u ∈ N_v} (z_v - z_u) + c_v`, where `own` is `A_i x_i` or `B_k y_k`.
pub fn local_residual<T: Scalar>(
    dc: &DecoupledConstraint<T>,
    node: usize,
    own: &DVector<T>,
    z: &DVector<T>,
) -> DVector<T> {
    let r = dc.rows;
    let zv = z.rows(node * r, r);
    let mut out = own + dc.c_block(node);
    for &u in &dc.neighbors[node] {
        out += zv - z.rows(u * r, r);
    }
    out
}

/// Decoupled residual computed block by block from the per-agent constraints.
pub fn decoupled_residual_blockwise<T: Scalar>(
    scenario: &Scenario<T>,
    dc: &DecoupledConstraint<T>,
    x: &DVector<T>,
    y: &DVector<T>,
    z: &DVector<T>,
) -> Result<DVector<T>> {
    dc.check(x, y)?;
    dc.check_z(z)?;
    let dims = scenario.dimensions();
    let r = dc.rows;
    let mut out = DVector::zeros(z.len());
    for v in 0..dc.nodes() {
        let own = if v < dims.m {
            scenario.a_block(v) * x.rows(dims.x_offsets[v], dims.x_range(v).len())
        } else {
            let k = v - dims.m;
            scenario.b_block(k) * y.rows(dims.y_offsets[k], dims.y_range(k).len())
        };
        out.rows_mut(v * r, r).copy_from(&local_residual(dc, v, &own, z));
    }
    Ok(out)
}

/// Solves `L̄ z = -(s_blocks + p)` for a slack vector `p ≥ 0` whose blocks
/// cancel the coupled residual.
pub fn certificate_from_slack<T: Scalar>(
    dc: &DecoupledConstraint<T>,
    s_blocks: &DVector<T>,
    slack: &DVector<T>,
) -> Result<DVector<T>> {
    dc.solve_laplacian(&(s_blocks + slack))
}

/// Recovers a `z` certifying decoupled feasibility of a coupled-feasible
/// `(x, y)`; `None` when `coupled_s` has a positive entry.
///
/// All slack is placed in the first agent's block, so the returned `z` makes
/// every block residual zero except that one, which equals `coupled_s`.
pub fn find_certificate_z<T: Scalar>(
    dc: &DecoupledConstraint<T>,
    x: &DVector<T>,
    y: &DVector<T>,
    coupled_s: &DVector<T>,
) -> Result<Option<DVector<T>>> {
    if coupled_s.len() != dc.rows {
        return Err(Error::DimensionMismatch {
            id: "coupled_s".into(),
            detail: format!("expected length {}, got {}", dc.rows, coupled_s.len()),
        });
    }
    if coupled_s.iter().any(|&s| s > T::zero()) {
        return Ok(None);
    }
    let s_blocks = dc.stacked(x, y)?;
    if dc.nodes() == 1 {
        return Ok(Some(DVector::zeros(dc.rows)));
    }
    let mut slack = DVector::zeros(s_blocks.len());
    slack.rows_mut(0, dc.rows).copy_from(&(-coupled_s));
    certificate_from_slack(dc, &s_blocks, &slack).map(Some)
}
