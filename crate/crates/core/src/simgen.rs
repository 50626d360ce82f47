//! Synthetic multi-robot datasets with ground truth.
//!
//! Robots follow world-frame waypoint paths using the differential-drive model
//! in reverse: each run of `odom_per_measurement` raw odometry rows drives
//! straight, and the last row of the run turns toward the next waypoint. This
//! keeps summed intervals exact under subsampling. Measurements are emitted
//! only at run boundaries, for landmarks within range in the front half-plane.
//!
//! Ground truth is expressed in robot 0's starting frame, which is the global
//! frame used by the solver.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{wrapped, Landmark2, Pose2, Se2Transform};
use crate::io::Dataset;
use crate::models::{
    measurement_predict, motion_delta_unchecked, wheels_for, LandmarkMeasurement, NoiseModel, RobotParams,
    WheelOdometry,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("robot {0} has an empty path")]
    EmptyPath(usize),
    #[error("robot {0} needs at least two distinct waypoints")]
    TooFewWaypoints(usize),
    #[error("no robot paths configured")]
    NoRobots,
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LandmarkLayout {
    /// Uniform over `[0, w] × [0, h]`.
    Uniform,
    /// Spread along the robot paths with a lateral offset of up to `half_width`.
    Corridor { half_width: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub n_landmarks: usize,
    pub world_extent: [f64; 2],
    pub landmark_layout: LandmarkLayout,
    /// World-frame waypoints per robot; each robot starts at its first waypoint
    /// facing the second.
    pub paths: Vec<Vec<[f64; 2]>>,
    pub sensor_range: f64,
    pub noise: NoiseModel,
    pub wheel_base: f64,
    /// Distance driven per raw odometry row.
    pub step_length: f64,
    /// Raw odometry rows per measurement epoch; also the subsample factor.
    pub odom_per_measurement: usize,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    /// A loop and an overlapping hallway run whose starts are about 38 m apart.
    fn default() -> Self {
        Self {
            n_landmarks: 50,
            world_extent: [40.0, 40.0],
            landmark_layout: LandmarkLayout::Corridor { half_width: 2.5 },
            paths: vec![
                vec![[2.0, 2.0], [26.0, 2.0], [26.0, 18.0], [2.0, 18.0], [2.0, 2.0], [10.0, 2.0]],
                vec![[38.0, 14.0], [38.0, 26.0], [26.0, 26.0], [26.0, 18.0], [2.0, 18.0], [2.0, 8.0]],
            ],
            sensor_range: 6.0,
            noise: NoiseModel::default(),
            wheel_base: 0.5,
            step_length: 0.2,
            odom_per_measurement: 5,
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let invalid = |m: &str| Err(SimError::Invalid(m.to_string()));
        if self.paths.is_empty() {
            return Err(SimError::NoRobots);
        }
        for (r, path) in self.paths.iter().enumerate() {
            if path.is_empty() {
                return Err(SimError::EmptyPath(r));
            }
            if path.iter().flatten().any(|v| !v.is_finite()) {
                return invalid("non-finite waypoint");
            }
            if path.windows(2).all(|w| w[0] == w[1]) {
                return Err(SimError::TooFewWaypoints(r));
            }
        }
        if !(self.sensor_range > 0.0 && self.sensor_range.is_finite()) {
            return invalid("sensor_range must be positive");
        }
        if !(self.wheel_base > 0.0 && self.wheel_base.is_finite()) {
            return invalid("wheel_base must be positive");
        }
        if !(self.step_length > 0.0 && self.step_length.is_finite()) {
            return invalid("step_length must be positive");
        }
        if self.odom_per_measurement == 0 {
            return invalid("odom_per_measurement must be at least 1");
        }
        if self.world_extent.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return invalid("world_extent must be non-negative");
        }
        if let LandmarkLayout::Corridor { half_width } = self.landmark_layout {
            if !(half_width >= 0.0 && half_width.is_finite()) {
                return invalid("corridor half_width must be non-negative");
            }
        }
        let noise_ok = self
            .noise
            .sigma_odom
            .iter()
            .chain(&self.noise.sigma_meas)
            .all(|s| s.is_finite() && *s >= 0.0);
        if !noise_ok {
            return invalid("noise standard deviations must be non-negative");
        }
        Ok(())
    }

    pub fn robot_params(&self) -> RobotParams {
        RobotParams {
            wheel_base: self.wheel_base,
            odom_subsample: self.odom_per_measurement,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// True poses per robot, one per raw odometry state, in the global frame.
    pub poses: Vec<Vec<Pose2>>,
    pub landmarks: Vec<Landmark2>,
    /// Each robot's start pose in the global frame; the first is the identity.
    pub starts: Vec<Se2Transform>,
    pub origin_distance: f64,
    /// Raw rows per subsampled interval.
    pub subsample: usize,
}

impl GroundTruth {
    /// True poses at the states that survive subsampling.
    pub fn synchronized_poses(&self, robot: usize) -> Vec<Pose2> {
        self.poses[robot].iter().step_by(self.subsample).copied().collect()
    }

    /// Robot 2's origin in robot 1's frame: the ideal merge prior.
    pub fn true_offset(&self) -> Se2Transform {
        self.starts.get(1).copied().unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    /// Raw datasets; `params.odom_subsample` is set to the measurement ratio.
    pub datasets: Vec<Dataset>,
    pub truth: GroundTruth,
}

impl Simulation {
    pub fn synchronized(&self) -> Vec<Dataset> {
        self.datasets
            .iter()
            .map(|d| d.synchronized().expect("simulated datasets are consistent"))
            .collect()
    }
}

fn place_landmarks(cfg: &ScenarioConfig, rng: &mut ChaCha8Rng) -> Vec<[f64; 2]> {
    match cfg.landmark_layout {
        LandmarkLayout::Uniform => (0..cfg.n_landmarks)
            .map(|_| {
                [
                    rng.random::<f64>() * cfg.world_extent[0],
                    rng.random::<f64>() * cfg.world_extent[1],
                ]
            })
            .collect(),
        LandmarkLayout::Corridor { half_width } => {
            let segments: Vec<([f64; 2], [f64; 2], f64)> = cfg
                .paths
                .iter()
                .flat_map(|p| p.windows(2))
                .map(|w| (w[0], w[1], (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1])))
                .filter(|s| s.2 > 0.0)
                .collect();
            let total: f64 = segments.iter().map(|s| s.2).sum();
            (0..cfg.n_landmarks)
                .map(|_| {
                    let mut at = rng.random::<f64>() * total;
                    let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    let lateral = side * half_width * (0.2 + 0.8 * rng.random::<f64>());
                    for &(a, b, len) in &segments {
                        if at <= len {
                            let (ux, uy) = ((b[0] - a[0]) / len, (b[1] - a[1]) / len);
                            return [a[0] + ux * at - uy * lateral, a[1] + uy * at + ux * lateral];
                        }
                        at -= len;
                    }
                    let &(_, b, _) = segments.last().expect("validated paths have length");
                    b
                })
                .collect()
        }
    }
}

/// World-frame trajectory and noiseless wheel displacements for one path.
fn drive(path: &[[f64; 2]], cfg: &ScenarioConfig) -> (Vec<Pose2>, Vec<(f64, f64)>) {
    let mut waypoints: Vec<[f64; 2]> = Vec::with_capacity(path.len());
    for &w in path {
        if waypoints.last() != Some(&w) {
            waypoints.push(w);
        }
    }
    let start = waypoints[0];
    let heading = (waypoints[1][1] - start[1]).atan2(waypoints[1][0] - start[0]);
    let mut pose = Pose2::new(start[0], start[1], heading);
    let mut poses = vec![pose];
    let mut controls = Vec::new();
    let runs = cfg.odom_per_measurement;
    let chunk = cfg.step_length * runs as f64;
    let mut target = 1;
    while target < waypoints.len() {
        let goal = waypoints[target];
        let remaining = (goal[0] - pose.x).hypot(goal[1] - pose.y);
        if remaining < 1e-9 {
            target += 1;
            continue;
        }
        let travel = remaining.min(chunk);
        let arrived = travel == remaining;
        let forward = travel / runs as f64;
        // End-of-run position is independent of the turn, which happens last.
        let (s, c) = pose.theta.sin_cos();
        let end = [pose.x + travel * c, pose.y + travel * s];
        if arrived {
            target += 1;
        }
        let turn = match waypoints.get(target) {
            Some(next) => wrapped((next[1] - end[1]).atan2(next[0] - end[0]) - pose.theta),
            None => 0.0,
        };
        for k in 0..runs {
            let w = if k + 1 == runs { turn } else { 0.0 };
            let (v_l, v_r) = wheels_for(forward, w, cfg.wheel_base);
            let d = motion_delta_unchecked(v_l, v_r, pose.theta, cfg.wheel_base);
            pose = Pose2::new(pose.x + d.x, pose.y + d.y, pose.theta + d.z);
            poses.push(pose);
            controls.push((v_l, v_r));
        }
    }
    (poses, controls)
}

/// Simulates every configured robot. Deterministic per `cfg.seed`.
pub fn generate(cfg: &ScenarioConfig) -> Result<Simulation, SimError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let world_landmarks = place_landmarks(cfg, &mut rng);

    let runs = cfg.odom_per_measurement;
    let odo_scale = 1.0 / (runs as f64).sqrt();
    let mut world_poses = Vec::with_capacity(cfg.paths.len());
    let mut datasets = Vec::with_capacity(cfg.paths.len());
    for (r, path) in cfg.paths.iter().enumerate() {
        let (poses, controls) = drive(path, cfg);
        let mut odometry = Vec::with_capacity(controls.len());
        for (k, &(v_l, v_r)) in controls.iter().enumerate() {
            let forward = 0.5 * (v_l + v_r);
            let turn = (v_r - v_l) / cfg.wheel_base;
            let n_f: f64 = rng.sample(StandardNormal);
            let n_t: f64 = rng.sample(StandardNormal);
            let (v_l, v_r) = wheels_for(
                forward + n_f * cfg.noise.sigma_odom[0] * odo_scale,
                turn + n_t * cfg.noise.sigma_odom[2] * odo_scale,
                cfg.wheel_base,
            );
            odometry.push(WheelOdometry { state_id: k, v_l, v_r });
        }
        let mut measurements = Vec::new();
        for (state, pose) in poses.iter().enumerate().step_by(runs) {
            for (tag, &[x, y]) in world_landmarks.iter().enumerate() {
                if (x - pose.x).hypot(y - pose.y) > cfg.sensor_range {
                    continue;
                }
                let z = measurement_predict(pose, &Landmark2::new(tag as u32, x, y));
                if z.x < 0.0 {
                    continue;
                }
                let n_x: f64 = rng.sample(StandardNormal);
                let n_y: f64 = rng.sample(StandardNormal);
                measurements.push(LandmarkMeasurement {
                    state_id: state,
                    tag_id: tag as u32,
                    dx: z.x + n_x * cfg.noise.sigma_meas[0],
                    dy: z.y + n_y * cfg.noise.sigma_meas[1],
                });
            }
        }
        datasets.push(Dataset {
            robot_id: r as u32,
            odometry,
            measurements,
            params: cfg.robot_params(),
        });
        world_poses.push(poses);
    }

    let to_global = Se2Transform::from_pose(&world_poses[0][0]).inverse();
    let poses: Vec<Vec<Pose2>> = world_poses
        .iter()
        .map(|traj| traj.iter().map(|p| to_global.apply_pose(p)).collect())
        .collect();
    let starts: Vec<Se2Transform> = poses.iter().map(|t| Se2Transform::from_pose(&t[0])).collect();
    let landmarks = world_landmarks
        .iter()
        .enumerate()
        .map(|(tag, &p)| {
            let [x, y] = to_global.apply(p);
            Landmark2::new(tag as u32, x, y)
        })
        .collect();
    let origin_distance = match &starts[..] {
        [_, b, ..] => b.t_x.hypot(b.t_y),
        _ => 0.0,
    };
    Ok(Simulation {
        datasets,
        truth: GroundTruth {
            poses,
            landmarks,
            starts,
            origin_distance,
            subsample: runs,
        },
    })
}
