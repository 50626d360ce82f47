//! Single-robot and joint multi-robot graph construction and solving.
//!
//! Robot 1's frame is the global frame: its first pose carries a prior at the
//! origin. Robot 2's first pose carries a prior at the estimated inter-map
//! transform. Landmarks are shared by tag id, so each tag is a single variable
//! no matter how many robots observe it.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::geometry::{GeometryError, Landmark2, Pose2, Se2Transform, StateLayout, StateVector, VarId};
use crate::io::Dataset;
use crate::models::{dead_reckon, landmark_init, ModelError, NoiseModel};
use crate::solver::{optimize, Factor, FactorGraph, SolveConfig, SolveError};

#[derive(Debug, Error)]
pub enum MergeError {
    #[error("dataset for robot {0} has no odometry")]
    EmptyDataset(u32),
    #[error("robot {robot}: measurement at state {state} is beyond the trajectory ({poses} poses)")]
    MeasurementOutOfRange { robot: u32, state: usize, poses: usize },
    #[error("prior transform is not finite")]
    NonFinitePrior,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Solve(SolveError),
    #[error("solver diverged; best estimate has cost {:e}", .best.final_cost)]
    Diverged { best: Box<GlobalMap> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub robot_id: u32,
    pub poses: Vec<Pose2>,
}

/// Solved map: one trajectory per robot plus each landmark exactly once.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalMap {
    pub trajectories: Vec<Trajectory>,
    /// Sorted by tag id.
    pub landmarks: Vec<Landmark2>,
    /// Distance between the first two robots' origins; 0 for a single robot.
    pub origin_distance: f64,
    pub converged: bool,
    pub iterations: usize,
    pub final_cost: f64,
}

impl GlobalMap {
    pub fn new(trajectories: Vec<Trajectory>, mut landmarks: Vec<Landmark2>, converged: bool) -> Self {
        landmarks.sort_by_key(|l| l.tag_id);
        let origin_distance = origin_distance(&trajectories);
        Self {
            trajectories,
            landmarks,
            origin_distance,
            converged,
            iterations: 0,
            final_cost: f64::NAN,
        }
    }

    pub fn landmark(&self, tag: u32) -> Option<&Landmark2> {
        self.landmarks
            .binary_search_by_key(&tag, |l| l.tag_id)
            .ok()
            .map(|i| &self.landmarks[i])
    }

    pub fn tags(&self) -> BTreeSet<u32> {
        self.landmarks.iter().map(|l| l.tag_id).collect()
    }
}

pub fn origin_distance(trajectories: &[Trajectory]) -> f64 {
    match trajectories {
        [a, b, ..] => match (a.poses.first(), b.poses.first()) {
            (Some(p), Some(q)) => p.distance_to(q),
            _ => 0.0,
        },
        _ => 0.0,
    }
}

/// Two robots to merge, with robot 2's origin expressed in robot 1's frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MergePlan {
    pub robot1: Dataset,
    pub robot2: Dataset,
    pub prior2: Se2Transform,
    pub shared_tags: BTreeSet<u32>,
}

impl MergePlan {
    pub fn new(robot1: Dataset, robot2: Dataset, prior2: Se2Transform) -> Self {
        let shared_tags = robot1.tags().intersection(&robot2.tags()).copied().collect();
        Self {
            robot1,
            robot2,
            prior2,
            shared_tags,
        }
    }
}

/// One robot's contribution to a joint graph.
struct RobotTerm<'a> {
    dataset: &'a Dataset,
    origin: Pose2,
}

fn check_dataset(d: &Dataset) -> Result<(), MergeError> {
    if d.odometry.is_empty() {
        return Err(MergeError::EmptyDataset(d.robot_id));
    }
    d.params.validate()?;
    let poses = d.pose_count();
    if let Some(m) = d.measurements.iter().find(|m| m.state_id >= poses) {
        return Err(MergeError::MeasurementOutOfRange {
            robot: d.robot_id,
            state: m.state_id,
            poses,
        });
    }
    Ok(())
}

/// Graph over robots keyed `0..n` in slice order. Factor order: for each robot,
/// its origin prior, then odometry, then measurements.
fn build_graph(robots: &[RobotTerm<'_>], noise: &NoiseModel) -> Result<FactorGraph, MergeError> {
    noise.validate()?;
    let mut blocks = Vec::with_capacity(robots.len());
    let mut tags = BTreeSet::new();
    for (key, r) in robots.iter().enumerate() {
        check_dataset(r.dataset)?;
        blocks.push((key as u32, r.dataset.pose_count()));
        tags.extend(r.dataset.tags());
    }
    let mut graph = FactorGraph::new(StateLayout::new(&blocks, tags));
    for (key, r) in robots.iter().enumerate() {
        let key = key as u32;
        let d = r.dataset;
        graph
            .add(Factor::Prior {
                var: VarId::pose(key, 0),
                value: r.origin,
                sigma: noise.sigma_prior,
            })
            .map_err(MergeError::Solve)?;
        for (k, odom) in d.odometry.iter().enumerate() {
            graph
                .add(Factor::Odometry {
                    prev: VarId::pose(key, k),
                    curr: VarId::pose(key, k + 1),
                    odom: *odom,
                    wheel_base: d.params.wheel_base,
                    sigma: noise.sigma_odom,
                })
                .map_err(MergeError::Solve)?;
        }
        for m in &d.measurements {
            graph
                .add(Factor::Measurement {
                    pose: VarId::pose(key, m.state_id),
                    landmark: VarId::Landmark(m.tag_id),
                    z: [m.dx, m.dy],
                    sigma: noise.sigma_meas,
                })
                .map_err(MergeError::Solve)?;
        }
    }
    Ok(graph)
}

/// Dead reckoning from each robot's origin; each landmark initialized from the
/// first measurement of the lowest-keyed robot that observed it.
fn initial_estimate(robots: &[RobotTerm<'_>], layout: &StateLayout) -> Result<StateVector, MergeError> {
    let mut x = StateVector::zeros(layout.clone());
    let mut seen = BTreeSet::new();
    for (key, r) in robots.iter().enumerate() {
        let poses = dead_reckon(r.origin, &r.dataset.odometry, &r.dataset.params)?;
        for (step, p) in poses.iter().enumerate() {
            x.set_pose(key as u32, step, *p)?;
        }
        for m in &r.dataset.measurements {
            if seen.insert(m.tag_id) {
                let l = landmark_init(&poses[m.state_id], m);
                x.set_landmark(m.tag_id, l.x, l.y)?;
            }
        }
    }
    Ok(x)
}

fn map_from_estimate(robots: &[RobotTerm<'_>], x: &StateVector, converged: bool) -> GlobalMap {
    let trajectories = robots
        .iter()
        .enumerate()
        .map(|(key, r)| Trajectory {
            robot_id: r.dataset.robot_id,
            poses: x.trajectory(key as u32),
        })
        .collect();
    GlobalMap::new(trajectories, x.landmarks(), converged)
}

fn solve_terms(robots: &[RobotTerm<'_>], noise: &NoiseModel, cfg: &SolveConfig) -> Result<GlobalMap, MergeError> {
    let graph = build_graph(robots, noise)?;
    let init = initial_estimate(robots, graph.layout())?;
    match optimize(&graph, init, cfg) {
        Ok(res) => {
            let mut map = map_from_estimate(robots, &res.estimate, res.converged);
            map.iterations = res.iterations;
            map.final_cost = res.final_cost();
            Ok(map)
        }
        Err(SolveError::Diverged { best }) => {
            let mut map = map_from_estimate(robots, &best.estimate, false);
            map.iterations = best.iterations;
            map.final_cost = best.final_cost();
            Err(MergeError::Diverged { best: Box::new(map) })
        }
        Err(e) => Err(MergeError::Solve(e)),
    }
}

/// Graph for a single robot anchored at the origin.
pub fn build_local_graph(dataset: &Dataset, noise: &NoiseModel) -> Result<FactorGraph, MergeError> {
    build_graph(&[RobotTerm { dataset, origin: Pose2::identity() }], noise)
}

/// Dead-reckoned initial estimate matching [`build_local_graph`].
pub fn local_initial_estimate(dataset: &Dataset, layout: &StateLayout) -> Result<StateVector, MergeError> {
    initial_estimate(&[RobotTerm { dataset, origin: Pose2::identity() }], layout)
}

/// Full SLAM for one robot in its own frame.
pub fn solve_local(dataset: &Dataset, noise: &NoiseModel, cfg: &SolveConfig) -> Result<GlobalMap, MergeError> {
    solve_terms(&[RobotTerm { dataset, origin: Pose2::identity() }], noise, cfg)
}

fn plan_terms(plan: &MergePlan) -> Result<[RobotTerm<'_>; 2], MergeError> {
    if !plan.prior2.is_finite() {
        return Err(MergeError::NonFinitePrior);
    }
    Ok([
        RobotTerm {
            dataset: &plan.robot1,
            origin: Pose2::identity(),
        },
        RobotTerm {
            dataset: &plan.robot2,
            origin: plan.prior2.as_pose(),
        },
    ])
}

/// Joint graph: robot 1 (key 0) anchored at the origin, robot 2 (key 1) with its
/// origin prior at `prior2`. Measurements stay in robot-centric frames.
pub fn build_global_graph(plan: &MergePlan, noise: &NoiseModel) -> Result<FactorGraph, MergeError> {
    build_graph(&plan_terms(plan)?, noise)
}

pub fn global_initial_estimate(plan: &MergePlan, layout: &StateLayout) -> Result<StateVector, MergeError> {
    initial_estimate(&plan_terms(plan)?, layout)
}

pub fn solve_global(plan: &MergePlan, noise: &NoiseModel, cfg: &SolveConfig) -> Result<GlobalMap, MergeError> {
    solve_terms(&plan_terms(plan)?, noise, cfg)
}

/// Per-tag landmark positions, convenient for comparisons.
pub fn landmark_table(landmarks: &[Landmark2]) -> BTreeMap<u32, [f64; 2]> {
    landmarks.iter().map(|l| (l.tag_id, [l.x, l.y])).collect()
}
