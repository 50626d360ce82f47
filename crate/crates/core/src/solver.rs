//! Factor graph, linearized system assembly and the Gauss-Newton loop.

use nalgebra::Vector3;
use thiserror::Error;

use crate::geometry::{GeometryError, Landmark2, Pose2, StateLayout, StateVector, VarId};
use crate::models::{
    measurement_jacobian, measurement_predict, motion_delta_unchecked, odometry_jacobian,
    odometry_residual_from_delta, prior_residual, WheelOdometry,
};
use crate::sparse::{self, CsrMatrix, Ordering, SparseError};

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("factor {factor} references {var}, which is not in the layout")]
    UnregisteredVar { factor: usize, var: VarId },
    #[error("factor {factor} references {var}, which has the wrong kind")]
    WrongVarKind { factor: usize, var: VarId },
    #[error("estimate dimension {got} does not match layout dimension {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("initial estimate is not finite")]
    NonFinite,
    #[error("system is singular: {var} is unconstrained")]
    Singular { var: VarId },
    #[error("normal equations are singular at column {column}")]
    SingularColumn { column: usize },
    #[error("linear solve failed: {0}")]
    Linear(SparseError),
    #[error("Gauss-Newton diverged (damping exceeded 1e8); best cost {:e}", .best.final_cost())]
    Diverged { best: Box<SolveResult> },
}

impl From<GeometryError> for SolveError {
    fn from(e: GeometryError) -> Self {
        match e {
            GeometryError::DimensionMismatch { expected, got } => SolveError::Dimension { expected, got },
            GeometryError::UnknownVar(var) => SolveError::UnregisteredVar { factor: usize::MAX, var },
            GeometryError::NonFinite(_) => SolveError::NonFinite,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Factor {
    Prior {
        var: VarId,
        value: Pose2,
        sigma: [f64; 3],
    },
    Odometry {
        prev: VarId,
        curr: VarId,
        odom: WheelOdometry,
        wheel_base: f64,
        sigma: [f64; 3],
    },
    Measurement {
        pose: VarId,
        landmark: VarId,
        z: [f64; 2],
        sigma: [f64; 2],
    },
}

impl Factor {
    pub fn dim(&self) -> usize {
        match self {
            Factor::Prior { .. } | Factor::Odometry { .. } => 3,
            Factor::Measurement { .. } => 2,
        }
    }

    fn vars(&self) -> Vec<VarId> {
        match self {
            Factor::Prior { var, .. } => vec![*var],
            Factor::Odometry { prev, curr, .. } => vec![*prev, *curr],
            Factor::Measurement { pose, landmark, .. } => vec![*pose, *landmark],
        }
    }

    fn expected_kinds(&self) -> &'static [bool] {
        // true = pose, false = landmark
        match self {
            Factor::Prior { .. } => &[true],
            Factor::Odometry { .. } => &[true, true],
            Factor::Measurement { .. } => &[true, false],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FactorGraph {
    layout: StateLayout,
    factors: Vec<Factor>,
}

impl FactorGraph {
    pub fn new(layout: StateLayout) -> Self {
        Self {
            layout,
            factors: Vec::new(),
        }
    }

    pub fn layout(&self) -> &StateLayout {
        &self.layout
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    /// Adds a factor after checking that its variables exist with the right kind.
    pub fn add(&mut self, factor: Factor) -> Result<(), SolveError> {
        let index = self.factors.len();
        for (var, &is_pose) in factor.vars().iter().zip(factor.expected_kinds()) {
            if !self.layout.contains(*var) {
                return Err(SolveError::UnregisteredVar { factor: index, var: *var });
            }
            if matches!(var, VarId::Pose { .. }) != is_pose {
                return Err(SolveError::WrongVarKind { factor: index, var: *var });
            }
        }
        self.factors.push(factor);
        Ok(())
    }

    pub fn residual_rows(&self) -> usize {
        self.factors.iter().map(Factor::dim).sum()
    }

    pub fn count(&self, pred: impl Fn(&Factor) -> bool) -> usize {
        self.factors.iter().filter(|f| pred(f)).count()
    }

    pub fn priors(&self) -> usize {
        self.count(|f| matches!(f, Factor::Prior { .. }))
    }

    pub fn odometry(&self) -> usize {
        self.count(|f| matches!(f, Factor::Odometry { .. }))
    }

    pub fn measurements(&self) -> usize {
        self.count(|f| matches!(f, Factor::Measurement { .. }))
    }

    /// Copy of the graph with factors reordered by `order` (indices into `factors`).
    pub fn reordered(&self, order: &[usize]) -> Self {
        Self {
            layout: self.layout.clone(),
            factors: order.iter().map(|&i| self.factors[i].clone()).collect(),
        }
    }

    /// Squared norm of the whitened residual at `x`.
    pub fn cost(&self, x: &StateVector) -> Result<f64, SolveError> {
        let mut total = 0.0;
        for (i, f) in self.factors.iter().enumerate() {
            let (r, sigma) = linearize(f, x, i, None)?.residual_only();
            total += r
                .iter()
                .zip(sigma)
                .map(|(r, s)| (r / s) * (r / s))
                .sum::<f64>();
        }
        Ok(total)
    }
}

/// Whitened linear system `A Δ ≈ b`, one row per residual component in factor order.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSystem {
    pub a: CsrMatrix,
    pub b: Vec<f64>,
}

struct Linearized {
    residual: Vec<f64>,
    sigma: Vec<f64>,
    /// Per row: (state column, Jacobian entry) pairs.
    rows: Vec<Vec<(usize, f64)>>,
}

impl Linearized {
    fn residual_only(self) -> (Vec<f64>, Vec<f64>) {
        (self.residual, self.sigma)
    }
}

fn pose_at(x: &StateVector, var: VarId, factor: usize) -> Result<(usize, Pose2), SolveError> {
    let o = x
        .index_of(var)
        .map_err(|_| SolveError::UnregisteredVar { factor, var })?;
    let v = x.values();
    Ok((o, Pose2 { x: v[o], y: v[o + 1], theta: v[o + 2] }))
}

fn landmark_at(x: &StateVector, var: VarId, factor: usize) -> Result<(usize, Landmark2), SolveError> {
    let o = x
        .index_of(var)
        .map_err(|_| SolveError::UnregisteredVar { factor, var })?;
    let tag = match var {
        VarId::Landmark(t) => t,
        VarId::Pose { .. } => return Err(SolveError::WrongVarKind { factor, var }),
    };
    let v = x.values();
    Ok((o, Landmark2::new(tag, v[o], v[o + 1])))
}

/// How the odometry factor's Jacobian treats the heading used in the predicted displacement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OdometryLinearization {
    /// Adds the derivative of the predicted displacement with respect to the previous heading.
    #[default]
    Full,
    /// Uses only the constant difference block; the heading enters through the residual alone.
    Constant,
}

fn linearize(
    f: &Factor,
    x: &StateVector,
    index: usize,
    jacobians: Option<OdometryLinearization>,
) -> Result<Linearized, SolveError> {
    let mut rows = Vec::new();
    let (residual, sigma) = match f {
        Factor::Prior { var, value, sigma } => {
            let (o, p) = pose_at(x, *var, index)?;
            if jacobians.is_some() {
                rows = (0..3).map(|k| vec![(o + k, 1.0)]).collect();
            }
            let r = prior_residual(&p, value);
            (vec![r.x, r.y, r.z], sigma.to_vec())
        }
        Factor::Odometry {
            prev,
            curr,
            odom,
            wheel_base,
            sigma,
        } => {
            let (op, xp) = pose_at(x, *prev, index)?;
            let (oc, xc) = pose_at(x, *curr, index)?;
            // Heading for the predicted displacement is taken from the current iterate.
            let z: Vector3<f64> = motion_delta_unchecked(odom.v_l, odom.v_r, xp.theta, *wheel_base);
            let r = odometry_residual_from_delta(&xp, &xc, &z);
            if let Some(mode) = jacobians {
                let mut j = odometry_jacobian();
                if mode == OdometryLinearization::Full {
                    let forward = 0.5 * (odom.v_l + odom.v_r);
                    let (s, c) = xp.theta.sin_cos();
                    j[(0, 2)] = forward * s;
                    j[(1, 2)] = -forward * c;
                }
                rows = (0..3)
                    .map(|k| {
                        (0..3)
                            .map(|c| (op + c, j[(k, c)]))
                            .chain((0..3).map(|c| (oc + c, j[(k, 3 + c)])))
                            .collect()
                    })
                    .collect();
            }
            (vec![r.x, r.y, r.z], sigma.to_vec())
        }
        Factor::Measurement { pose, landmark, z, sigma } => {
            let (op, p) = pose_at(x, *pose, index)?;
            let (ol, l) = landmark_at(x, *landmark, index)?;
            let h = measurement_predict(&p, &l);
            if jacobians.is_some() {
                let j = measurement_jacobian(&p, &l);
                rows = (0..2)
                    .map(|k| {
                        (0..3)
                            .map(|c| (op + c, j[(k, c)]))
                            .chain((0..2).map(|c| (ol + c, j[(k, 3 + c)])))
                            .collect()
                    })
                    .collect();
            }
            (vec![z[0] - h.x, z[1] - h.y], sigma.to_vec())
        }
    };
    Ok(Linearized { residual, sigma, rows })
}

/// Builds the whitened system at `x0`: each factor contributes its prediction
/// Jacobian and `z - h(x0)`, both divided by the per-component sigma.
pub fn assemble(graph: &FactorGraph, x0: &StateVector) -> Result<SparseSystem, SolveError> {
    assemble_with(graph, x0, OdometryLinearization::default())
}

pub fn assemble_with(
    graph: &FactorGraph,
    x0: &StateVector,
    mode: OdometryLinearization,
) -> Result<SparseSystem, SolveError> {
    if x0.dim() != graph.layout.dim() {
        return Err(SolveError::Dimension {
            expected: graph.layout.dim(),
            got: x0.dim(),
        });
    }
    let nrows = graph.residual_rows();
    let mut a = CsrMatrix::with_capacity(graph.layout.dim(), nrows, nrows * 5);
    let mut b = Vec::with_capacity(nrows);
    for (i, f) in graph.factors.iter().enumerate() {
        let lin = linearize(f, x0, i, Some(mode))?;
        for ((row, r), s) in lin.rows.into_iter().zip(lin.residual).zip(lin.sigma) {
            a.push_row(row.into_iter().map(|(c, v)| (c, v / s)));
            b.push(r / s);
        }
    }
    Ok(SparseSystem { a, b })
}

/// Least-squares step of `sys` via sparse Cholesky on `AᵀA`.
pub fn solve_normal_equations(sys: &SparseSystem) -> Result<Vec<f64>, SolveError> {
    sparse::solve_least_squares(&sys.a, &sys.b, 0.0, Ordering::MinimumDegree).map_err(|e| match e {
        SparseError::NotPositiveDefinite { column, .. } => SolveError::SingularColumn { column },
        other => SolveError::Linear(other),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveConfig {
    pub max_iterations: usize,
    /// Stop when the relative decrease of the squared whitened residual falls below this.
    pub rel_tol: f64,
    /// Stop when the squared whitened residual itself falls below this.
    pub abs_tol: f64,
    pub damping_init: f64,
    pub damping_factor: f64,
    pub ordering: Ordering,
    pub linearization: OdometryLinearization,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            rel_tol: 1e-6,
            abs_tol: 1e-20,
            damping_init: 0.0,
            damping_factor: 10.0,
            ordering: Ordering::MinimumDegree,
            linearization: OdometryLinearization::Full,
        }
    }
}

const MIN_DAMPING: f64 = 1e-6;
const MAX_DAMPING: f64 = 1e8;

#[derive(Debug, Clone, PartialEq)]
pub struct SolveResult {
    pub estimate: StateVector,
    /// Accepted Gauss-Newton steps.
    pub iterations: usize,
    /// Cost at the initial estimate followed by the cost after each accepted step.
    pub residual_history: Vec<f64>,
    pub converged: bool,
}

impl SolveResult {
    pub fn final_cost(&self) -> f64 {
        self.residual_history.last().copied().unwrap_or(f64::NAN)
    }
}

fn damped_step(
    graph: &FactorGraph,
    sys: &SparseSystem,
    damping: f64,
    ordering: Ordering,
) -> Result<Vec<f64>, SolveError> {
    sparse::solve_least_squares(&sys.a, &sys.b, damping, ordering).map_err(|e| match e {
        SparseError::NotPositiveDefinite { column, .. } => match graph.layout.var_at(column) {
            Some(var) => SolveError::Singular { var },
            None => SolveError::SingularColumn { column },
        },
        other => SolveError::Linear(other),
    })
}

/// `‖b - AΔ‖²`, the cost the linearized model predicts after taking `delta`.
fn linear_cost(sys: &SparseSystem, delta: &[f64]) -> f64 {
    sys.a
        .mul_vec(delta)
        .iter()
        .zip(&sys.b)
        .map(|(ad, b)| (b - ad) * (b - ad))
        .sum()
}

/// Gauss-Newton with a Levenberg fallback when a full step increases the cost.
pub fn optimize(graph: &FactorGraph, init: StateVector, cfg: &SolveConfig) -> Result<SolveResult, SolveError> {
    if init.dim() != graph.layout.dim() {
        return Err(SolveError::Dimension {
            expected: graph.layout.dim(),
            got: init.dim(),
        });
    }
    if !init.is_finite() {
        return Err(SolveError::NonFinite);
    }
    let mut x = init;
    let mut cost = graph.cost(&x)?;
    let mut result = SolveResult {
        estimate: x.clone(),
        iterations: 0,
        residual_history: vec![cost],
        converged: false,
    };
    let mut damping = cfg.damping_init;

    while result.iterations < cfg.max_iterations {
        let sys = assemble_with(graph, &x, cfg.linearization)?;
        loop {
            let delta = damped_step(graph, &sys, damping, cfg.ordering)?;
            if damping == 0.0 && result.iterations > 0 {
                // The linear model predicts no useful decrease: already stationary.
                let predicted = cost - linear_cost(&sys, &delta);
                if predicted <= cfg.rel_tol * cost {
                    result.converged = true;
                    return Ok(result);
                }
            }
            let mut candidate = x.clone();
            candidate.retract(&delta);
            let new_cost = graph.cost(&candidate)?;
            if new_cost.is_finite() && (new_cost <= cost || new_cost <= cfg.abs_tol) {
                let decrease = cost - new_cost;
                x = candidate;
                result.iterations += 1;
                result.residual_history.push(new_cost);
                result.estimate = x.clone();
                let done = new_cost <= cfg.abs_tol || decrease <= cfg.rel_tol * cost;
                cost = new_cost;
                if damping > 0.0 {
                    damping /= cfg.damping_factor;
                    if damping < MIN_DAMPING.max(cfg.damping_init) {
                        damping = cfg.damping_init;
                    }
                }
                if done {
                    result.converged = true;
                    return Ok(result);
                }
                break;
            }
            if new_cost.is_finite() && new_cost - cost <= cfg.rel_tol * cost {
                // The step changes the cost by less than the tolerance: stationary.
                result.converged = true;
                return Ok(result);
            }
            damping = (damping * cfg.damping_factor).max(MIN_DAMPING.max(cfg.damping_init));
            if damping > MAX_DAMPING {
                return Err(SolveError::Diverged { best: Box::new(result) });
            }
        }
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_pose_graph() -> (FactorGraph, StateVector) {
        let layout = StateLayout::new(&[(0, 2)], []);
        let mut g = FactorGraph::new(layout.clone());
        g.add(Factor::Prior {
            var: VarId::pose(0, 0),
            value: Pose2::identity(),
            sigma: [1.0; 3],
        })
        .unwrap();
        g.add(Factor::Odometry {
            prev: VarId::pose(0, 0),
            curr: VarId::pose(0, 1),
            odom: WheelOdometry { state_id: 0, v_l: 1.0, v_r: 1.0 },
            wheel_base: 0.5,
            sigma: [1.0, 1.0, 1.0],
        })
        .unwrap();
        (g, StateVector::zeros(layout))
    }

    #[test]
    fn prior_at_estimate_gives_zero_rhs() {
        let layout = StateLayout::new(&[(0, 1)], []);
        let mut x = StateVector::zeros(layout.clone());
        x.set_pose(0, 0, Pose2::new(1.0, 2.0, 0.3)).unwrap();
        let mut g = FactorGraph::new(layout);
        g.add(Factor::Prior {
            var: VarId::pose(0, 0),
            value: Pose2::new(1.0, 2.0, 0.3),
            sigma: [0.1; 3],
        })
        .unwrap();
        let sys = assemble(&g, &x).unwrap();
        assert!(sys.b.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn two_pose_system_layout() {
        let (g, x) = two_pose_graph();
        let sys = assemble_with(&g, &x, OdometryLinearization::Constant).unwrap();
        assert_eq!((sys.a.nrows(), sys.a.ncols()), (6, 6));
        let d = sys.a.to_dense();
        let j = odometry_jacobian();
        for r in 0..3 {
            for c in 0..6 {
                assert_eq!(d[3 + r][c], j[(r, c)]);
            }
        }
        assert_eq!(sys.b[3], 1.0);

        // Heading coupling at theta = 0 with 1 m forward: d(dy)/d(theta_prev) = 1.
        let full = assemble(&g, &x).unwrap().a.to_dense();
        assert_eq!(full[3][2], 0.0);
        assert_eq!(full[4][2], -1.0);
        for (r, row) in full.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                if (r, c) != (4, 2) {
                    assert_eq!(*v, d[r][c]);
                }
            }
        }
    }

    #[test]
    fn unregistered_variable_rejected() {
        let (mut g, _) = two_pose_graph();
        let err = g
            .add(Factor::Prior {
                var: VarId::pose(0, 2),
                value: Pose2::identity(),
                sigma: [1.0; 3],
            })
            .unwrap_err();
        assert!(matches!(err, SolveError::UnregisteredVar { factor: 2, .. }));
        let err = g
            .add(Factor::Measurement {
                pose: VarId::pose(0, 0),
                landmark: VarId::pose(0, 1),
                z: [0.0; 2],
                sigma: [1.0; 2],
            })
            .unwrap_err();
        assert!(matches!(err, SolveError::WrongVarKind { .. }));
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let (g, _) = two_pose_graph();
        let other = StateVector::zeros(StateLayout::new(&[(0, 3)], []));
        assert!(matches!(assemble(&g, &other), Err(SolveError::Dimension { .. })));
    }

    #[test]
    fn linear_chain_solves_in_one_step() {
        let (g, x) = two_pose_graph();
        let res = optimize(&g, x, &SolveConfig::default()).unwrap();
        assert!(res.converged);
        assert_eq!(res.iterations, 1);
        let p = res.estimate.pose(0, 1).unwrap();
        assert!((p.x - 1.0).abs() < 1e-12 && p.y.abs() < 1e-12);
    }

    #[test]
    fn missing_anchor_is_singular() {
        let layout = StateLayout::new(&[(0, 2)], []);
        let mut g = FactorGraph::new(layout.clone());
        g.add(Factor::Odometry {
            prev: VarId::pose(0, 0),
            curr: VarId::pose(0, 1),
            odom: WheelOdometry { state_id: 0, v_l: 1.0, v_r: 1.0 },
            wheel_base: 0.5,
            sigma: [1.0; 3],
        })
        .unwrap();
        let err = optimize(&g, StateVector::zeros(layout), &SolveConfig::default()).unwrap_err();
        assert!(matches!(err, SolveError::Singular { var: VarId::Pose { robot: 0, .. } }));
    }
}
