use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::p3p::solve_p3p;
use super::{refine_pose, CameraIntrinsics, Correspondence2D3D, GeometryError, RigidPose};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RansacConfig {
    pub hypothesis_count: usize,
    pub inlier_threshold_px: f64,
    pub refinement_iterations: usize,
    pub rng_seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            hypothesis_count: 64,
            inlier_threshold_px: 10.0,
            refinement_iterations: 100,
            rng_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacOutcome {
    pub pose: RigidPose,
    pub inliers: Vec<bool>,
}

impl RansacOutcome {
    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|&&b| b).count()
    }
}

fn inlier_mask(
    pose: &RigidPose,
    corrs: &[Correspondence2D3D],
    k: &CameraIntrinsics,
    threshold: f64,
) -> Vec<bool> {
    let r = pose.rotation_matrix();
    let thr2 = threshold * threshold;
    corrs
        .iter()
        .map(|c| {
            let pc = r * c.point + pose.translation;
            if pc.z <= 0.0 {
                return false;
            }
            let du = k.fx * pc.x / pc.z + k.cx - c.pixel.x;
            let dv = k.fy * pc.y / pc.z + k.cy - c.pixel.y;
            du * du + dv * dv < thr2
        })
        .collect()
}

/// Hypothesize-and-verify pose estimation.
///
/// Each hypothesis draws a minimal three-point sample; every root of the
/// minimal solver is scored by its inlier count (Euclidean residual below
/// the threshold, positive depth), which also resolves the root ambiguity.
/// The winner (ties to the lowest hypothesis index) is refined on its
/// inliers, and the inlier set is re-evaluated after refinement.
pub fn ransac_pnp(
    corrs: &[Correspondence2D3D],
    k: &CameraIntrinsics,
    cfg: &RansacConfig,
) -> Result<RansacOutcome, GeometryError> {
    if corrs.len() < 4 {
        return Err(GeometryError::LocalizationFailure { inliers: 0 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let bearings: Vec<_> = corrs.iter().map(|c| k.unproject(&c.pixel)).collect();

    let mut best: Option<(usize, RigidPose)> = None;
    for _ in 0..cfg.hypothesis_count.max(1) {
        let idx = sample(&mut rng, corrs.len(), 3);
        let (i0, i1, i2) = (idx.index(0), idx.index(1), idx.index(2));
        let world = [corrs[i0].point, corrs[i1].point, corrs[i2].point];
        let rays = [bearings[i0], bearings[i1], bearings[i2]];
        let Ok(candidates) = solve_p3p(&world, &rays) else {
            continue;
        };
        for pose in candidates {
            let count = inlier_mask(&pose, corrs, k, cfg.inlier_threshold_px)
                .iter()
                .filter(|&&b| b)
                .count();
            if best.as_ref().is_none_or(|(c, _)| count > *c) {
                best = Some((count, pose));
            }
        }
    }

    let Some((count, pose)) = best else {
        return Err(GeometryError::LocalizationFailure { inliers: 0 });
    };
    if count < 4 {
        return Err(GeometryError::LocalizationFailure { inliers: count });
    }

    let mut pose = pose;
    let mut mask = inlier_mask(&pose, corrs, k, cfg.inlier_threshold_px);
    for _ in 0..3 {
        let inliers: Vec<_> = corrs
            .iter()
            .zip(&mask)
            .filter(|(_, &m)| m)
            .map(|(c, _)| *c)
            .collect();
        let refined = refine_pose(&pose, &inliers, k, cfg.refinement_iterations);
        let new_mask = inlier_mask(&refined, corrs, k, cfg.inlier_threshold_px);
        let new_count = new_mask.iter().filter(|&&b| b).count();
        if new_count < 4 {
            break;
        }
        pose = refined;
        if new_mask == mask {
            break;
        }
        mask = new_mask;
    }
    let mask = inlier_mask(&pose, corrs, k, cfg.inlier_threshold_px);
    Ok(RansacOutcome {
        pose,
        inliers: mask,
    })
}
