//! Query-time path: predict scene coordinates for an image's observations,
//! estimate its pose with RANSAC, and aggregate pose-error metrics.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encodings::GlobalEncoding;
use crate::geometry::{
    pose_error, ransac_pnp, reprojection_error, CameraIntrinsics, Correspondence2D3D, RansacConfig,
    RigidPose,
};
use crate::regressor::{RegressorError, SceneRegressor, TrainingBuffer};
use crate::scene_sim::ObservationRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalizationStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalizationResult {
    /// Identity when the frame failed.
    pub pose: RigidPose,
    pub inlier_count: usize,
    pub translation_error_m: Option<f64>,
    pub rotation_error_deg: Option<f64>,
    pub status: LocalizationStatus,
}

impl LocalizationResult {
    fn failed(inlier_count: usize, has_gt: bool) -> Self {
        let inf = has_gt.then_some(f64::INFINITY);
        Self {
            pose: RigidPose::identity(),
            inlier_count,
            translation_error_m: inf,
            rotation_error_deg: inf,
            status: LocalizationStatus::Failed,
        }
    }

    /// Errors for metric purposes: failures and missing ground truth count
    /// as infinite.
    pub fn errors(&self) -> (f64, f64) {
        match self.status {
            LocalizationStatus::Failed => (f64::INFINITY, f64::INFINITY),
            LocalizationStatus::Ok => (
                self.translation_error_m.unwrap_or(f64::INFINITY),
                self.rotation_error_deg.unwrap_or(f64::INFINITY),
            ),
        }
    }
}

/// A pose-accuracy tier: a frame passes when both errors are at or below
/// the bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub translation_m: f64,
    pub rotation_deg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRate {
    pub threshold: Threshold,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub ransac: RansacConfig,
    /// Multiplies the translation bound of the finest (5 cm, 5°) tier.
    pub scene_scale: f64,
    /// Extra tiers, used verbatim.
    pub tiers: Vec<Threshold>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let t = |translation_m, rotation_deg| Threshold {
            translation_m,
            rotation_deg,
        };
        Self {
            ransac: RansacConfig::default(),
            scene_scale: 1.0,
            tiers: vec![t(0.25, 2.0), t(0.5, 5.0), t(5.0, 10.0)],
        }
    }
}

impl EvalConfig {
    pub fn thresholds(&self) -> Vec<Threshold> {
        let mut all = vec![Threshold {
            translation_m: 0.05 * self.scene_scale,
            rotation_deg: 5.0,
        }];
        all.extend(self.tiers.iter().copied());
        all
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub median_translation_m: f64,
    pub median_rotation_deg: f64,
    pub threshold_rates: Vec<ThresholdRate>,
    pub per_frame: Vec<LocalizationResult>,
}

impl EvalReport {
    pub fn failure_count(&self) -> usize {
        self.per_frame
            .iter()
            .filter(|r| r.status == LocalizationStatus::Failed)
            .count()
    }

    pub fn rate(&self, t: Threshold) -> Option<f64> {
        self.threshold_rates
            .iter()
            .find(|r| r.threshold == t)
            .map(|r| r.rate)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("frame,status,inliers,translation_error_m,rotation_error_deg\n");
        for (i, r) in self.per_frame.iter().enumerate() {
            let (t, a) = r.errors();
            let status = match r.status {
                LocalizationStatus::Ok => "ok",
                LocalizationStatus::Failed => "failed",
            };
            let _ = writeln!(s, "{i},{status},{},{t},{a}", r.inlier_count);
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "frames: {} ({} failed)",
            self.per_frame.len(),
            self.failure_count()
        );
        let _ = writeln!(
            s,
            "median translation error: {:.4} m",
            self.median_translation_m
        );
        let _ = writeln!(
            s,
            "median rotation error: {:.4} deg",
            self.median_rotation_deg
        );
        for r in &self.threshold_rates {
            let _ = writeln!(
                s,
                "within ({} m, {} deg): {:.1}%",
                r.threshold.translation_m,
                r.threshold.rotation_deg,
                100.0 * r.rate
            );
        }
        s
    }

    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("eval.csv"), self.to_csv())?;
        fs::write(dir.join("eval_summary.txt"), self.summary())
    }
}

/// One query image.
#[derive(Debug, Clone, PartialEq)]
pub struct TestFrame {
    pub observations: Vec<ObservationRecord>,
    pub global: GlobalEncoding,
    pub intrinsics: CameraIntrinsics,
    pub gt_pose: Option<RigidPose>,
}

/// One correspondence per observation, in order. Global encodings are used
/// as given; nothing is diffused at query time.
pub fn predict_correspondences(
    model: &SceneRegressor,
    observations: &[ObservationRecord],
    global: &GlobalEncoding,
) -> Result<Vec<Correspondence2D3D>, RegressorError> {
    let locals: Vec<&[f64]> = observations
        .iter()
        .map(|o| o.local_encoding.as_slice())
        .collect();
    let points = model.predict(&locals, global)?;
    Ok(observations
        .iter()
        .zip(points)
        .map(|(o, p)| Correspondence2D3D::new(o.pixel, p))
        .collect())
}

/// RANSAC pose from given correspondences.
pub fn localize_correspondences(
    corrs: &[Correspondence2D3D],
    k: &CameraIntrinsics,
    cfg: &RansacConfig,
    gt_pose: Option<&RigidPose>,
) -> LocalizationResult {
    match ransac_pnp(corrs, k, cfg) {
        Ok(out) if out.inlier_count() >= 4 => {
            let errs = gt_pose.map(|gt| pose_error(&out.pose, gt));
            LocalizationResult {
                pose: out.pose,
                inlier_count: out.inlier_count(),
                translation_error_m: errs.map(|e| e.0),
                rotation_error_deg: errs.map(|e| e.1),
                status: LocalizationStatus::Ok,
            }
        }
        Ok(out) => LocalizationResult::failed(out.inlier_count(), gt_pose.is_some()),
        Err(_) => LocalizationResult::failed(0, gt_pose.is_some()),
    }
}

pub fn localize(
    model: &SceneRegressor,
    observations: &[ObservationRecord],
    global: &GlobalEncoding,
    k: &CameraIntrinsics,
    cfg: &RansacConfig,
    gt_pose: Option<&RigidPose>,
) -> Result<LocalizationResult, RegressorError> {
    let corrs = predict_correspondences(model, observations, global)?;
    Ok(localize_correspondences(&corrs, k, cfg, gt_pose))
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        let (a, b) = (v[n / 2 - 1], v[n / 2]);
        if a == b {
            a
        } else {
            0.5 * (a + b)
        }
    }
}

/// Medians and tier rates over per-frame results.
pub fn summarize(per_frame: Vec<LocalizationResult>, thresholds: &[Threshold]) -> EvalReport {
    let errs: Vec<(f64, f64)> = per_frame.iter().map(|r| r.errors()).collect();
    let n = errs.len().max(1) as f64;
    let threshold_rates = thresholds
        .iter()
        .map(|&t| ThresholdRate {
            threshold: t,
            rate: errs
                .iter()
                .filter(|(te, re)| *te <= t.translation_m && *re <= t.rotation_deg)
                .count() as f64
                / n,
        })
        .collect();
    EvalReport {
        median_translation_m: median(errs.iter().map(|e| e.0).collect()),
        median_rotation_deg: median(errs.iter().map(|e| e.1).collect()),
        threshold_rates,
        per_frame,
    }
}

/// Frame `i` runs RANSAC with seed `cfg.ransac.rng_seed + i`, so the report
/// does not depend on scheduling.
pub fn evaluate_with<F>(
    frames: &[TestFrame],
    cfg: &EvalConfig,
    predict: F,
) -> Result<EvalReport, RegressorError>
where
    F: Fn(&TestFrame) -> Result<Vec<Correspondence2D3D>, RegressorError> + Sync,
{
    let per_frame = frames
        .par_iter()
        .enumerate()
        .map(|(i, f)| {
            let corrs = predict(f)?;
            let ransac = RansacConfig {
                rng_seed: cfg.ransac.rng_seed.wrapping_add(i as u64),
                ..cfg.ransac
            };
            Ok(localize_correspondences(
                &corrs,
                &f.intrinsics,
                &ransac,
                f.gt_pose.as_ref(),
            ))
        })
        .collect::<Result<Vec<_>, RegressorError>>()?;
    Ok(summarize(per_frame, &cfg.thresholds()))
}

pub fn evaluate(
    model: &SceneRegressor,
    frames: &[TestFrame],
    cfg: &EvalConfig,
) -> Result<EvalReport, RegressorError> {
    evaluate_with(frames, cfg, |f| {
        predict_correspondences(model, &f.observations, &f.global)
    })
}

/// A predicted point that survived the reprojection filter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconPoint {
    pub position: Vector3<f64>,
    pub landmark_id: usize,
}

/// Predicted coordinates of every buffer record whose L1 reprojection error
/// under the ground-truth pose is below `threshold_px` (all records when the
/// threshold is infinite).
pub fn export_reconstruction(
    model: &SceneRegressor,
    buffer: &TrainingBuffer,
    threshold_px: f64,
) -> Result<Vec<ReconPoint>, RegressorError> {
    let mut out = Vec::new();
    for (&image, global) in &buffer.global_table {
        let obs: Vec<&ObservationRecord> = buffer
            .records
            .iter()
            .filter(|r| r.image_index == image)
            .collect();
        let locals: Vec<&[f64]> = obs.iter().map(|o| o.local_encoding.as_slice()).collect();
        let points = model.predict(&locals, global)?;
        for (o, p) in obs.iter().zip(points) {
            let e = reprojection_error(&o.pixel, &p, &o.gt_pose, &o.intrinsics);
            if e < threshold_px || threshold_px == f64::INFINITY {
                out.push(ReconPoint {
                    position: p,
                    landmark_id: o.landmark_id,
                });
            }
        }
    }
    Ok(out)
}

/// `x y z id`, one point per line.
pub fn write_point_list(path: &Path, points: &[ReconPoint]) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    for p in points {
        writeln!(
            w,
            "{} {} {} {}",
            p.position.x, p.position.y, p.position.z, p.landmark_id
        )?;
    }
    w.flush()
}
