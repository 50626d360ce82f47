//! Odometry, landmark-measurement and pose-prior models with their Jacobians.
//!
//! All factors follow the convention `residual = z - h(x)`, where `h` is the
//! prediction and the stored Jacobian is `∂h/∂x`.

use nalgebra::{SMatrix, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{wrapped, Landmark2, Pose2};

pub type OdometryJacobian = SMatrix<f64, 3, 6>;
pub type MeasurementJacobian = SMatrix<f64, 2, 5>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("wheel base must be positive and finite, got {0}")]
    WheelBase(f64),
    #[error("odometry subsample factor must be at least 1")]
    Subsample,
    #[error("noise standard deviations must be positive and finite ({0})")]
    Noise(&'static str),
}

/// Per-interval wheel displacements (velocity already multiplied by the interval).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WheelOdometry {
    pub state_id: usize,
    pub v_l: f64,
    pub v_r: f64,
}

/// Landmark offset observed from the robot at `state_id`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LandmarkMeasurement {
    pub state_id: usize,
    pub tag_id: u32,
    pub dx: f64,
    pub dy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseModel {
    pub sigma_odom: [f64; 3],
    pub sigma_meas: [f64; 2],
    pub sigma_prior: [f64; 3],
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            sigma_odom: [0.05, 0.05, 0.02],
            sigma_meas: [0.10, 0.10],
            sigma_prior: [1e-3, 1e-3, 1e-3],
        }
    }
}

impl NoiseModel {
    pub fn validate(&self) -> Result<(), ModelError> {
        let ok = |s: &[f64]| s.iter().all(|v| v.is_finite() && *v > 0.0);
        if !ok(&self.sigma_odom) {
            return Err(ModelError::Noise("sigma_odom"));
        }
        if !ok(&self.sigma_meas) {
            return Err(ModelError::Noise("sigma_meas"));
        }
        if !ok(&self.sigma_prior) {
            return Err(ModelError::Noise("sigma_prior"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobotParams {
    pub wheel_base: f64,
    pub odom_subsample: usize,
}

impl Default for RobotParams {
    fn default() -> Self {
        Self {
            wheel_base: 0.5,
            odom_subsample: 5,
        }
    }
}

impl RobotParams {
    pub fn new(wheel_base: f64, odom_subsample: usize) -> Result<Self, ModelError> {
        let p = Self {
            wheel_base,
            odom_subsample,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.wheel_base.is_finite() && self.wheel_base > 0.0) {
            return Err(ModelError::WheelBase(self.wheel_base));
        }
        if self.odom_subsample == 0 {
            return Err(ModelError::Subsample);
        }
        Ok(())
    }
}

/// Pose change produced by one odometry interval, driven along heading `theta`.
pub fn motion_delta(
    odom: &WheelOdometry,
    theta: f64,
    params: &RobotParams,
) -> Result<Vector3<f64>, ModelError> {
    if !(params.wheel_base.is_finite() && params.wheel_base > 0.0) {
        return Err(ModelError::WheelBase(params.wheel_base));
    }
    Ok(motion_delta_unchecked(odom.v_l, odom.v_r, theta, params.wheel_base))
}

pub(crate) fn motion_delta_unchecked(v_l: f64, v_r: f64, theta: f64, wheel_base: f64) -> Vector3<f64> {
    let forward = 0.5 * (v_r + v_l);
    let (s, c) = theta.sin_cos();
    Vector3::new(forward * c, forward * s, (v_r - v_l) / wheel_base)
}

/// Inverse of the motion model: wheel displacements producing a forward
/// distance and a heading change.
pub fn wheels_for(forward: f64, turn: f64, wheel_base: f64) -> (f64, f64) {
    let half = 0.5 * turn * wheel_base;
    (forward - half, forward + half)
}

/// Integrates odometry from `start`; returns one pose per state (`odometry.len() + 1`).
pub fn dead_reckon(
    start: Pose2,
    odometry: &[WheelOdometry],
    params: &RobotParams,
) -> Result<Vec<Pose2>, ModelError> {
    params.validate()?;
    let mut poses = Vec::with_capacity(odometry.len() + 1);
    let mut p = start;
    poses.push(p);
    for o in odometry {
        let d = motion_delta_unchecked(o.v_l, o.v_r, p.theta, params.wheel_base);
        p = Pose2::new(p.x + d.x, p.y + d.y, p.theta + d.z);
        poses.push(p);
    }
    Ok(poses)
}

/// `motion_delta(θ_lin) - (x_curr - x_prev)`, heading component wrapped.
/// `theta_lin` is held fixed: the derivative w.r.t. the poses is the constant
/// block of [`odometry_jacobian`].
pub fn odometry_residual(
    x_prev: &Pose2,
    x_curr: &Pose2,
    odom: &WheelOdometry,
    params: &RobotParams,
    theta_lin: f64,
) -> Result<Vector3<f64>, ModelError> {
    let z = motion_delta(odom, theta_lin, params)?;
    Ok(odometry_residual_from_delta(x_prev, x_curr, &z))
}

pub(crate) fn odometry_residual_from_delta(x_prev: &Pose2, x_curr: &Pose2, z: &Vector3<f64>) -> Vector3<f64> {
    Vector3::new(
        z.x - (x_curr.x - x_prev.x),
        z.y - (x_curr.y - x_prev.y),
        wrapped(z.z - (x_curr.theta - x_prev.theta)),
    )
}

/// `∂h/∂(x_prev, x_curr)` of the pose-difference prediction.
pub fn odometry_jacobian() -> OdometryJacobian {
    OdometryJacobian::from_row_slice(&[
        -1.0, 0.0, 0.0, 1.0, 0.0, 0.0, //
        0.0, -1.0, 0.0, 0.0, 1.0, 0.0, //
        0.0, 0.0, -1.0, 0.0, 0.0, 1.0,
    ])
}

/// Predicted robot-frame offset of a landmark. The lateral axis points to the
/// robot's right, matching [`landmark_init`].
pub fn measurement_predict(pose: &Pose2, lm: &Landmark2) -> Vector2<f64> {
    let (s, c) = pose.theta.sin_cos();
    let (ex, ey) = (lm.x - pose.x, lm.y - pose.y);
    Vector2::new(c * ex + s * ey, s * ex - c * ey)
}

/// Columns ordered `(r_x, r_y, r_θ, l_x, l_y)`.
pub fn measurement_jacobian(pose: &Pose2, lm: &Landmark2) -> MeasurementJacobian {
    let (s, c) = pose.theta.sin_cos();
    let (ex, ey) = (lm.x - pose.x, lm.y - pose.y);
    MeasurementJacobian::from_row_slice(&[
        -c, -s, -s * ex + c * ey, c, s, //
        -s, c, c * ex + s * ey, s, -c,
    ])
}

/// Landmark position implied by a measurement taken at `pose`.
pub fn landmark_init(pose: &Pose2, z: &LandmarkMeasurement) -> Landmark2 {
    let (s, c) = pose.theta.sin_cos();
    Landmark2::new(
        z.tag_id,
        pose.x + z.dx * c + z.dy * s,
        pose.y + z.dx * s - z.dy * c,
    )
}

/// `prior - x`, heading wrapped. The prediction Jacobian is `I₃`.
pub fn prior_residual(x: &Pose2, prior: &Pose2) -> Vector3<f64> {
    Vector3::new(prior.x - x.x, prior.y - x.y, wrapped(prior.theta - x.theta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn params() -> RobotParams {
        RobotParams::new(0.5, 1).unwrap()
    }

    fn odo(v_l: f64, v_r: f64) -> WheelOdometry {
        WheelOdometry {
            state_id: 0,
            v_l,
            v_r,
        }
    }

    fn meas(dx: f64, dy: f64) -> LandmarkMeasurement {
        LandmarkMeasurement {
            state_id: 0,
            tag_id: 1,
            dx,
            dy,
        }
    }

    #[test]
    fn motion_delta_examples() {
        let d = motion_delta(&odo(1.0, 1.0), 0.0, &params()).unwrap();
        assert_eq!((d.x, d.y, d.z), (1.0, 0.0, 0.0));
        let d = motion_delta(&odo(0.0, 0.0), 1.3, &params()).unwrap();
        assert_eq!(d.norm(), 0.0);
        let d = motion_delta(&odo(-1.0, 1.0), 0.0, &params()).unwrap();
        assert_eq!((d.x, d.y, d.z), (0.0, 0.0, 4.0));
        let bad = RobotParams {
            wheel_base: 0.0,
            odom_subsample: 1,
        };
        assert_eq!(
            motion_delta(&odo(1.0, 1.0), 0.0, &bad),
            Err(ModelError::WheelBase(0.0))
        );
    }

    #[test]
    fn motion_delta_travel_is_heading_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let (l, r, th) = (
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-PI..PI),
            );
            let d = motion_delta(&odo(l, r), th, &params()).unwrap();
            assert_abs_diff_eq!(d.xy().norm(), (l + r).abs() / 2.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn wheels_for_inverts_motion_delta() {
        let (l, r) = wheels_for(0.7, -0.3, 0.5);
        let d = motion_delta(&odo(l, r), 0.0, &params()).unwrap();
        assert_abs_diff_eq!(d.x, 0.7, epsilon = 1e-15);
        assert_abs_diff_eq!(d.z, -0.3, epsilon = 1e-15);
    }

    #[test]
    fn odometry_residual_examples() {
        let p = params();
        let zero = Pose2::identity();
        let r = odometry_residual(&zero, &zero, &odo(0.0, 0.0), &p, 0.0).unwrap();
        assert_eq!(r, Vector3::zeros());
        let r = odometry_residual(&zero, &Pose2::new(1.0, 0.0, 0.0), &odo(1.0, 1.0), &p, 0.0).unwrap();
        assert_eq!(r, Vector3::zeros());
        let r = odometry_residual(&zero, &Pose2::new(0.9, 0.0, 0.0), &odo(1.0, 1.0), &p, 0.0).unwrap();
        assert_abs_diff_eq!(r.x, 0.1, epsilon = 1e-12);
        assert_eq!((r.y, r.z), (0.0, 0.0));
    }

    #[test]
    fn odometry_residual_depends_only_on_difference() {
        let p = params();
        let o = odo(0.4, 0.6);
        let a = Pose2::new(1.0, 2.0, 0.3);
        let b = Pose2::new(1.5, 2.2, 0.7);
        let shift = |q: &Pose2| Pose2::new(q.x + 7.0, q.y - 3.0, q.theta + 0.2);
        let r0 = odometry_residual(&a, &b, &o, &p, 0.3).unwrap();
        let r1 = odometry_residual(&shift(&a), &shift(&b), &o, &p, 0.3).unwrap();
        assert!((r0 - r1).abs().max() < 1e-12);
    }

    #[test]
    fn odometry_jacobian_is_difference_operator() {
        let j = odometry_jacobian();
        assert_eq!(j[(0, 0)], -1.0);
        assert_eq!(j[(2, 5)], 1.0);
        assert_eq!(j.iter().filter(|v| **v != 0.0).count(), 6);
        let stacked = nalgebra::SVector::<f64, 6>::from_row_slice(&[1.0, 2.0, 3.0, 5.0, 7.0, 11.0]);
        assert_eq!(j * stacked, Vector3::new(4.0, 5.0, 8.0));
    }

    #[test]
    fn measurement_examples() {
        let z = measurement_predict(&Pose2::identity(), &Landmark2::new(0, 2.0, 1.0));
        assert_eq!((z.x, z.y), (2.0, -1.0));
        let z = measurement_predict(&Pose2::new(3.0, -1.0, 0.4), &Landmark2::new(0, 3.0, -1.0));
        assert_eq!(z.norm(), 0.0);
        let z = measurement_predict(&Pose2::new(0.0, 0.0, FRAC_PI_2), &Landmark2::new(0, 0.0, 2.0));
        assert_abs_diff_eq!(z.x, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(z.y, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn measurement_jacobian_at_zero_heading() {
        let j = measurement_jacobian(&Pose2::identity(), &Landmark2::new(0, 2.0, 1.0));
        assert_eq!(j[(0, 0)], -1.0);
        assert_eq!(j[(1, 1)], 1.0);
        assert_eq!(j[(1, 4)], -1.0);
        assert_eq!(j[(0, 2)], 1.0);
    }

    #[test]
    fn landmark_init_examples() {
        let l = landmark_init(&Pose2::identity(), &meas(2.0, -1.0));
        assert_eq!((l.x, l.y), (2.0, 1.0));
        let pose = Pose2::new(4.0, -2.0, 1.1);
        let l = landmark_init(&pose, &meas(0.0, 0.0));
        assert_eq!((l.x, l.y), (4.0, -2.0));
    }

    #[test]
    fn landmark_init_round_trips_through_prediction() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let pose = Pose2::new(
                rng.random_range(-10.0..10.0),
                rng.random_range(-10.0..10.0),
                rng.random_range(-PI..PI),
            );
            let m = meas(rng.random_range(-8.0..8.0), rng.random_range(-8.0..8.0));
            let z = measurement_predict(&pose, &landmark_init(&pose, &m));
            assert_abs_diff_eq!(z.x, m.dx, epsilon = 1e-9);
            assert_abs_diff_eq!(z.y, m.dy, epsilon = 1e-9);
        }
    }

    #[test]
    fn prior_residual_examples() {
        let p = Pose2::new(1.0, 2.0, 0.1);
        assert_eq!(prior_residual(&p, &p), Vector3::zeros());
        let r = prior_residual(&Pose2::identity(), &p);
        assert_eq!((r.x, r.y, r.z), (1.0, 2.0, 0.1));
        let a = Pose2 {
            x: 0.0,
            y: 0.0,
            theta: -PI,
        };
        let b = Pose2 {
            x: 0.0,
            y: 0.0,
            theta: PI,
        };
        assert_abs_diff_eq!(prior_residual(&a, &b).z, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(RobotParams::new(-1.0, 5).is_err());
        assert!(RobotParams::new(0.5, 0).is_err());
        let mut n = NoiseModel::default();
        assert!(n.validate().is_ok());
        n.sigma_meas[1] = 0.0;
        assert_eq!(n.validate(), Err(ModelError::Noise("sigma_meas")));
    }
}
