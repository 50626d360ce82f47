//! Planar geometry primitives and the flat state vector layout.

use std::collections::BTreeMap;
use std::f64::consts::{PI, TAU};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("non-finite input: {0}")]
    NonFinite(f64),
    #[error("unknown variable {0}")]
    UnknownVar(VarId),
    #[error("state vector has dimension {got}, layout expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Wraps an angle into `(-π, π]`, rejecting non-finite input.
pub fn wrap_angle(a: f64) -> Result<f64, GeometryError> {
    if !a.is_finite() {
        return Err(GeometryError::NonFinite(a));
    }
    Ok(wrapped(a))
}

/// Infallible form of [`wrap_angle`]; non-finite input propagates as NaN.
pub fn wrapped(a: f64) -> f64 {
    if (-PI..=PI).contains(&a) && a != -PI {
        return a;
    }
    let mut r = a.rem_euclid(TAU);
    if r > PI {
        r -= TAU;
    }
    // Values a rounding error above -π belong to the closed end of the range.
    let snap = 4.0 * f64::EPSILON * a.abs().max(1.0);
    if r <= -PI + snap {
        r = PI;
    }
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose2 {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: wrapped(theta),
        }
    }

    pub fn identity() -> Self {
        Self::default()
    }

    pub fn position(&self) -> [f64; 2] {
        [self.x, self.y]
    }

    pub fn distance_to(&self, other: &Pose2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.theta.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Landmark2 {
    pub tag_id: u32,
    pub x: f64,
    pub y: f64,
}

impl Landmark2 {
    pub fn new(tag_id: u32, x: f64, y: f64) -> Self {
        Self { tag_id, x, y }
    }

    pub fn position(&self) -> [f64; 2] {
        [self.x, self.y]
    }
}

/// Rigid planar transform `p ↦ R(θ)·p + t`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Se2Transform {
    pub theta: f64,
    pub t_x: f64,
    pub t_y: f64,
}

impl Se2Transform {
    pub fn new(theta: f64, t_x: f64, t_y: f64) -> Self {
        Self {
            theta: wrapped(theta),
            t_x,
            t_y,
        }
    }

    pub fn identity() -> Self {
        Self::default()
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        apply_transform(self, p)
    }

    /// Pose composition: the pose `p` expressed in this transform's target frame.
    pub fn apply_pose(&self, p: &Pose2) -> Pose2 {
        let [x, y] = self.apply([p.x, p.y]);
        Pose2::new(x, y, self.theta + p.theta)
    }

    /// `self ∘ other`: first apply `other`, then `self`.
    pub fn compose(&self, other: &Se2Transform) -> Se2Transform {
        let [t_x, t_y] = self.apply([other.t_x, other.t_y]);
        Se2Transform::new(self.theta + other.theta, t_x, t_y)
    }

    pub fn inverse(&self) -> Se2Transform {
        let (s, c) = self.theta.sin_cos();
        Se2Transform::new(
            -self.theta,
            -(c * self.t_x + s * self.t_y),
            s * self.t_x - c * self.t_y,
        )
    }

    pub fn as_pose(&self) -> Pose2 {
        Pose2::new(self.t_x, self.t_y, self.theta)
    }

    pub fn from_pose(p: &Pose2) -> Self {
        Self::new(p.theta, p.x, p.y)
    }

    pub fn is_finite(&self) -> bool {
        self.theta.is_finite() && self.t_x.is_finite() && self.t_y.is_finite()
    }
}

pub fn apply_transform(t: &Se2Transform, p: [f64; 2]) -> [f64; 2] {
    let (s, c) = t.theta.sin_cos();
    [c * p[0] - s * p[1] + t.t_x, s * p[0] + c * p[1] + t.t_y]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum VarId {
    Pose { robot: u32, step: usize },
    Landmark(u32),
}

impl VarId {
    pub fn pose(robot: u32, step: usize) -> Self {
        VarId::Pose { robot, step }
    }

    pub fn dim(&self) -> usize {
        match self {
            VarId::Pose { .. } => 3,
            VarId::Landmark(_) => 2,
        }
    }
}

impl fmt::Display for VarId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VarId::Pose { robot, step } => write!(f, "pose(robot {robot}, step {step})"),
            VarId::Landmark(tag) => write!(f, "landmark(tag {tag})"),
        }
    }
}

/// Offsets of every variable in the flat state vector: all pose blocks ordered by
/// robot id, then landmark pairs ordered by tag id.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct StateLayout {
    robots: Vec<RobotBlock>,
    landmarks: BTreeMap<u32, usize>,
    dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct RobotBlock {
    robot: u32,
    poses: usize,
    offset: usize,
}

impl StateLayout {
    /// `robots` lists `(robot_id, pose_count)`; duplicates are merged by taking the
    /// larger count.
    pub fn new(robots: &[(u32, usize)], tags: impl IntoIterator<Item = u32>) -> Self {
        let mut counts = BTreeMap::new();
        for &(robot, poses) in robots {
            let entry = counts.entry(robot).or_insert(0);
            *entry = (*entry).max(poses);
        }
        let mut offset = 0;
        let robots = counts
            .into_iter()
            .map(|(robot, poses)| {
                let block = RobotBlock {
                    robot,
                    poses,
                    offset,
                };
                offset += 3 * poses;
                block
            })
            .collect();
        let mut landmarks = BTreeMap::new();
        for tag in tags {
            landmarks.entry(tag).or_insert(0);
        }
        for slot in landmarks.values_mut() {
            *slot = offset;
            offset += 2;
        }
        Self {
            robots,
            landmarks,
            dim: offset,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn robot_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.robots.iter().map(|b| b.robot)
    }

    pub fn pose_count(&self, robot: u32) -> usize {
        self.block(robot).map_or(0, |b| b.poses)
    }

    pub fn total_poses(&self) -> usize {
        self.robots.iter().map(|b| b.poses).sum()
    }

    pub fn tags(&self) -> impl Iterator<Item = u32> + '_ {
        self.landmarks.keys().copied()
    }

    pub fn landmark_count(&self) -> usize {
        self.landmarks.len()
    }

    pub fn contains(&self, id: VarId) -> bool {
        self.index_of(id).is_ok()
    }

    fn block(&self, robot: u32) -> Option<&RobotBlock> {
        self.robots
            .binary_search_by_key(&robot, |b| b.robot)
            .ok()
            .map(|i| &self.robots[i])
    }

    pub fn index_of(&self, id: VarId) -> Result<usize, GeometryError> {
        match id {
            VarId::Pose { robot, step } => self
                .block(robot)
                .filter(|b| step < b.poses)
                .map(|b| b.offset + 3 * step)
                .ok_or(GeometryError::UnknownVar(id)),
            VarId::Landmark(tag) => self
                .landmarks
                .get(&tag)
                .copied()
                .ok_or(GeometryError::UnknownVar(id)),
        }
    }

    /// Inverse of [`index_of`](Self::index_of): the variable owning a scalar offset.
    pub fn var_at(&self, offset: usize) -> Option<VarId> {
        if offset >= self.dim {
            return None;
        }
        for b in &self.robots {
            if offset < b.offset + 3 * b.poses {
                return Some(VarId::pose(b.robot, (offset - b.offset) / 3));
            }
        }
        self.landmarks
            .iter()
            .find(|(_, &o)| offset < o + 2)
            .map(|(&tag, _)| VarId::Landmark(tag))
    }

    /// All variables in offset order.
    pub fn vars(&self) -> impl Iterator<Item = VarId> + '_ {
        self.robots
            .iter()
            .flat_map(|b| (0..b.poses).map(move |s| VarId::pose(b.robot, s)))
            .chain(self.landmarks.keys().map(|&t| VarId::Landmark(t)))
    }

    /// Offsets of the heading components, which are wrapped after each update.
    pub fn angle_offsets(&self) -> impl Iterator<Item = usize> + '_ {
        self.robots
            .iter()
            .flat_map(|b| (0..b.poses).map(move |s| b.offset + 3 * s + 2))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    layout: StateLayout,
    values: Vec<f64>,
}

impl StateVector {
    pub fn zeros(layout: StateLayout) -> Self {
        let values = vec![0.0; layout.dim()];
        Self { layout, values }
    }

    pub fn from_values(layout: StateLayout, values: Vec<f64>) -> Result<Self, GeometryError> {
        if values.len() != layout.dim() {
            return Err(GeometryError::DimensionMismatch {
                expected: layout.dim(),
                got: values.len(),
            });
        }
        Ok(Self { layout, values })
    }

    pub fn layout(&self) -> &StateLayout {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn index_of(&self, id: VarId) -> Result<usize, GeometryError> {
        self.layout.index_of(id)
    }

    pub fn pose(&self, robot: u32, step: usize) -> Result<Pose2, GeometryError> {
        let o = self.layout.index_of(VarId::pose(robot, step))?;
        Ok(Pose2 {
            x: self.values[o],
            y: self.values[o + 1],
            theta: self.values[o + 2],
        })
    }

    pub fn set_pose(&mut self, robot: u32, step: usize, p: Pose2) -> Result<(), GeometryError> {
        let o = self.layout.index_of(VarId::pose(robot, step))?;
        self.values[o] = p.x;
        self.values[o + 1] = p.y;
        self.values[o + 2] = wrapped(p.theta);
        Ok(())
    }

    pub fn landmark(&self, tag: u32) -> Result<Landmark2, GeometryError> {
        let o = self.layout.index_of(VarId::Landmark(tag))?;
        Ok(Landmark2::new(tag, self.values[o], self.values[o + 1]))
    }

    pub fn set_landmark(&mut self, tag: u32, x: f64, y: f64) -> Result<(), GeometryError> {
        let o = self.layout.index_of(VarId::Landmark(tag))?;
        self.values[o] = x;
        self.values[o + 1] = y;
        Ok(())
    }

    pub fn trajectory(&self, robot: u32) -> Vec<Pose2> {
        (0..self.layout.pose_count(robot))
            .map(|s| self.pose(robot, s).expect("step within layout"))
            .collect()
    }

    pub fn landmarks(&self) -> Vec<Landmark2> {
        self.layout
            .tags()
            .map(|t| self.landmark(t).expect("tag within layout"))
            .collect()
    }

    /// `x ← x + delta` with headings re-wrapped.
    pub fn retract(&mut self, delta: &[f64]) {
        assert_eq!(delta.len(), self.values.len());
        for (v, d) in self.values.iter_mut().zip(delta) {
            *v += d;
        }
        let angles: Vec<usize> = self.layout.angle_offsets().collect();
        for o in angles {
            self.values[o] = wrapped(self.values[o]);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn wrap_examples() {
        assert_eq!(wrap_angle(0.0).unwrap(), 0.0);
        assert_abs_diff_eq!(wrap_angle(3.0 * PI).unwrap(), PI, epsilon = 1e-12);
        assert_abs_diff_eq!(wrap_angle(-3.5 * PI).unwrap(), 0.5 * PI, epsilon = 1e-12);
        assert_eq!(wrap_angle(-PI).unwrap(), PI);
        assert_eq!(wrap_angle(PI).unwrap(), PI);
        assert!(wrap_angle(f64::NAN).is_err());
        assert!(wrap_angle(f64::INFINITY).is_err());
    }

    #[test]
    fn wrap_is_idempotent_on_random_angles() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10_000 {
            let a: f64 = rng.random_range(-100.0..100.0);
            let w = wrapped(a);
            assert_eq!(wrapped(w), w);
            assert!(w > -PI && w <= PI);
            let k = ((a - w) / TAU).round();
            assert_abs_diff_eq!(a - w, k * TAU, epsilon = 1e-12);
        }
    }

    #[test]
    fn transform_examples() {
        let id = Se2Transform::identity();
        assert_eq!(apply_transform(&id, [3.0, 4.0]), [3.0, 4.0]);
        let rot = Se2Transform::new(FRAC_PI_2, 0.0, 0.0);
        let p = apply_transform(&rot, [1.0, 0.0]);
        assert_abs_diff_eq!(p[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], 1.0, epsilon = 1e-15);
        let shift = Se2Transform::new(0.0, 1.0, 1.0);
        assert_eq!(apply_transform(&shift, [2.0, 1.0]), [3.0, 2.0]);
    }

    #[test]
    fn index_examples() {
        let layout = StateLayout::new(&[(0, 4), (1, 6)], [9, 2]);
        assert_eq!(layout.index_of(VarId::pose(0, 0)).unwrap(), 0);
        assert_eq!(layout.index_of(VarId::pose(0, 1)).unwrap(), 3);
        assert_eq!(layout.index_of(VarId::pose(1, 0)).unwrap(), 12);
        // tags are keyed, not inserted: tag 2 comes first.
        assert_eq!(layout.index_of(VarId::Landmark(2)).unwrap(), 3 * 10);
        assert_eq!(layout.index_of(VarId::Landmark(9)).unwrap(), 3 * 10 + 2);
        assert_eq!(layout.dim(), 34);
        assert!(matches!(
            layout.index_of(VarId::pose(0, 4)),
            Err(GeometryError::UnknownVar(_))
        ));
        assert!(layout.index_of(VarId::Landmark(5)).is_err());
        assert!(layout.index_of(VarId::pose(7, 0)).is_err());
    }

    #[test]
    fn var_at_inverts_index_of() {
        let layout = StateLayout::new(&[(3, 2), (0, 1)], [4, 1, 8]);
        for v in layout.vars() {
            let o = layout.index_of(v).unwrap();
            for k in 0..v.dim() {
                assert_eq!(layout.var_at(o + k), Some(v));
            }
        }
        assert_eq!(layout.var_at(layout.dim()), None);
    }

    proptest! {
        #[test]
        fn transform_preserves_distances(
            th in -10.0f64..10.0, tx in -50.0f64..50.0, ty in -50.0f64..50.0,
            px in -50.0f64..50.0, py in -50.0f64..50.0, qx in -50.0f64..50.0, qy in -50.0f64..50.0,
        ) {
            let t = Se2Transform::new(th, tx, ty);
            let (a, b) = (t.apply([px, py]), t.apply([qx, qy]));
            let d0 = (px - qx).hypot(py - qy);
            let d1 = (a[0] - b[0]).hypot(a[1] - b[1]);
            prop_assert!((d0 - d1).abs() < 1e-9);
        }

        #[test]
        fn compose_with_inverse_is_identity(
            th in -10.0f64..10.0, tx in -100.0f64..100.0, ty in -100.0f64..100.0,
        ) {
            let t = Se2Transform::new(th, tx, ty);
            for c in [t.compose(&t.inverse()), t.inverse().compose(&t)] {
                prop_assert!(wrapped(c.theta).abs() < 1e-12);
                prop_assert!(c.t_x.abs() < 1e-12 * (1.0 + tx.abs() + ty.abs()));
                prop_assert!(c.t_y.abs() < 1e-12 * (1.0 + tx.abs() + ty.abs()));
            }
        }

        #[test]
        fn index_map_is_a_bijection(
            poses in proptest::collection::vec(1usize..20, 1..4),
            tags in proptest::collection::btree_set(0u32..1000, 0..20),
        ) {
            let robots: Vec<(u32, usize)> =
                poses.iter().enumerate().map(|(r, &n)| (r as u32, n)).collect();
            let layout = StateLayout::new(&robots, tags.iter().copied());
            let mut offsets: Vec<(usize, usize)> = layout
                .vars()
                .map(|v| (layout.index_of(v).unwrap(), v.dim()))
                .collect();
            offsets.sort();
            let mut next = 0;
            for (o, d) in offsets {
                prop_assert_eq!(o, next);
                next += d;
            }
            prop_assert_eq!(next, layout.dim());
            prop_assert_eq!(layout.dim(), 3 * poses.iter().sum::<usize>() + 2 * tags.len());
        }
    }
}
