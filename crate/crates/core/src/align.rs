//! SE(2) alignment of two landmark maps from tag-id correspondences (RANSAC).

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::{wrapped, Landmark2, Se2Transform};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AlignError {
    #[error("need at least 2 correspondences, got {0}")]
    InsufficientData(usize),
    #[error("degenerate sample: pair separation {0:.3e} m below the minimum")]
    DegenerateSample(f64),
    #[error("all points coincide; rotation is undetermined")]
    Degenerate,
    #[error("no hypothesis gathered 2 or more inliers")]
    NoConsensus,
    #[error("invalid RANSAC configuration: {0}")]
    Config(&'static str),
}

/// A tag observed in both maps: `p1` in map 1, `p2` in map 2.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub tag_id: u32,
    pub p1: [f64; 2],
    pub p2: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacConfig {
    pub iterations: usize,
    pub inlier_threshold: f64,
    pub min_pair_separation: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            inlier_threshold: 0.5,
            min_pair_separation: 0.2,
            seed: 0,
        }
    }
}

impl RansacConfig {
    fn validate(&self) -> Result<(), AlignError> {
        if self.iterations == 0 {
            return Err(AlignError::Config("iterations must be at least 1"));
        }
        if !(self.inlier_threshold > 0.0 && self.inlier_threshold.is_finite()) {
            return Err(AlignError::Config("inlier_threshold must be positive"));
        }
        if !(self.min_pair_separation > 0.0 && self.min_pair_separation.is_finite()) {
            return Err(AlignError::Config("min_pair_separation must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentResult {
    /// Maps map-2 coordinates into the map-1 frame.
    pub transform: Se2Transform,
    /// Ascending tag ids.
    pub inlier_ids: Vec<u32>,
    pub mean_inlier_error: f64,
}

/// Tags present in both maps, in ascending tag order. Duplicate tags within a
/// map keep their last occurrence.
pub fn find_correspondences(map1: &[Landmark2], map2: &[Landmark2]) -> Vec<Correspondence> {
    let first: BTreeMap<u32, [f64; 2]> = map1.iter().map(|l| (l.tag_id, l.position())).collect();
    let second: BTreeMap<u32, [f64; 2]> = map2.iter().map(|l| (l.tag_id, l.position())).collect();
    first
        .iter()
        .filter_map(|(&tag_id, &p1)| second.get(&tag_id).map(|&p2| Correspondence { tag_id, p1, p2 }))
        .collect()
}

fn sub(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

fn norm(v: [f64; 2]) -> f64 {
    v[0].hypot(v[1])
}

/// Rotation taking the direction `a→b` in map 2 onto the same direction in map 1.
pub fn estimate_rotation(a: &Correspondence, b: &Correspondence, min_pair_separation: f64) -> Result<f64, AlignError> {
    let d1 = sub(b.p1, a.p1);
    let d2 = sub(b.p2, a.p2);
    let sep = norm(d1).min(norm(d2));
    #[allow(clippy::neg_cmp_op_on_partial_ord)] // rejects NaN too
    if !(sep >= min_pair_separation) {
        return Err(AlignError::DegenerateSample(sep));
    }
    Ok(wrapped(d1[1].atan2(d1[0]) - d2[1].atan2(d2[0])))
}

/// Translation that maps `c.p2` exactly onto `c.p1` after rotating by `theta`.
pub fn estimate_translation(theta: f64, c: &Correspondence) -> [f64; 2] {
    let r = Se2Transform::new(theta, 0.0, 0.0).apply(c.p2);
    [c.p1[0] - r[0], c.p1[1] - r[1]]
}

pub fn alignment_error(t: &Se2Transform, c: &Correspondence) -> f64 {
    norm(sub(c.p1, t.apply(c.p2)))
}

/// Closed-form least-squares rigid fit minimizing `Σ‖p1 − T(p2)‖²`.
pub fn refit_inliers(inliers: &[Correspondence]) -> Result<Se2Transform, AlignError> {
    if inliers.len() < 2 {
        return Err(AlignError::InsufficientData(inliers.len()));
    }
    let n = inliers.len() as f64;
    let mean = |f: fn(&Correspondence) -> [f64; 2]| {
        let s = inliers.iter().map(f).fold([0.0, 0.0], |acc, p| [acc[0] + p[0], acc[1] + p[1]]);
        [s[0] / n, s[1] / n]
    };
    let c1 = mean(|c| c.p1);
    let c2 = mean(|c| c.p2);
    let (mut dot, mut cross, mut spread1, mut spread2) = (0.0, 0.0, 0.0, 0.0);
    for c in inliers {
        let q1 = sub(c.p1, c1);
        let q2 = sub(c.p2, c2);
        dot += q2[0] * q1[0] + q2[1] * q1[1];
        cross += q2[0] * q1[1] - q2[1] * q1[0];
        spread1 += q1[0] * q1[0] + q1[1] * q1[1];
        spread2 += q2[0] * q2[0] + q2[1] * q2[1];
    }
    let scale = spread1.max(spread2).max(f64::MIN_POSITIVE);
    if spread1.min(spread2) <= 1e-24 * scale.max(1.0) || dot.hypot(cross) <= 1e-24 {
        return Err(AlignError::Degenerate);
    }
    let theta = cross.atan2(dot);
    let r = Se2Transform::new(theta, 0.0, 0.0).apply(c2);
    Ok(Se2Transform::new(theta, c1[0] - r[0], c1[1] - r[1]))
}

struct Hypothesis {
    transform: Se2Transform,
    inliers: Vec<usize>,
    error_sum: f64,
}

fn score(t: Se2Transform, corrs: &[Correspondence], threshold: f64) -> Hypothesis {
    let mut inliers = Vec::new();
    let mut error_sum = 0.0;
    for (i, c) in corrs.iter().enumerate() {
        let e = alignment_error(&t, c);
        if e <= threshold {
            inliers.push(i);
            error_sum += e;
        }
    }
    Hypothesis {
        transform: t,
        inliers,
        error_sum,
    }
}

/// More inliers wins; equal counts fall back to the smaller error sum; full ties
/// keep the earlier hypothesis.
fn better(candidate: &Hypothesis, best: &Hypothesis) -> bool {
    candidate.inliers.len() > best.inliers.len()
        || (candidate.inliers.len() == best.inliers.len() && candidate.error_sum < best.error_sum)
}

/// Two-point RANSAC over correspondences followed by a least-squares refit on
/// the consensus set. Deterministic for a fixed `cfg.seed`.
pub fn ransac_align(corrs: &[Correspondence], cfg: &RansacConfig) -> Result<AlignmentResult, AlignError> {
    cfg.validate()?;
    if corrs.len() < 2 {
        return Err(AlignError::InsufficientData(corrs.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<Hypothesis> = None;
    for _ in 0..cfg.iterations {
        let pick = rand::seq::index::sample(&mut rng, corrs.len(), 2);
        let (a, b) = (&corrs[pick.index(0)], &corrs[pick.index(1)]);
        let Ok(theta) = estimate_rotation(a, b, cfg.min_pair_separation) else {
            continue;
        };
        let [t_x, t_y] = estimate_translation(theta, a);
        let h = score(Se2Transform::new(theta, t_x, t_y), corrs, cfg.inlier_threshold);
        if h.inliers.len() < 2 {
            continue;
        }
        if best.as_ref().is_none_or(|b| better(&h, b)) {
            best = Some(h);
        }
    }
    let best = best.ok_or(AlignError::NoConsensus)?;

    let consensus: Vec<Correspondence> = best.inliers.iter().map(|&i| corrs[i]).collect();
    let chosen = match refit_inliers(&consensus) {
        Ok(t) => {
            let refit = score(t, corrs, cfg.inlier_threshold);
            if refit.inliers.len() >= best.inliers.len() {
                refit
            } else {
                best
            }
        }
        Err(_) => best,
    };
    let n = chosen.inliers.len() as f64;
    Ok(AlignmentResult {
        transform: chosen.transform,
        inlier_ids: chosen.inliers.iter().map(|&i| corrs[i].tag_id).collect(),
        mean_inlier_error: chosen.error_sum / n,
    })
}
