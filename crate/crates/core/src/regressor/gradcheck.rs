use nalgebra::{Vector2, Vector3};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{
    predict_rows, reprojection_batch, tau_schedule, DecoderParams, HeadConfig, LossSchedule,
    RegressorError, RegressorHead, ReprojectionTarget,
};
use crate::geometry::{project, CameraIntrinsics, RigidPose};

/// Finite-difference step.
pub const GRADCHECK_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub seed: u64,
    pub params_checked: usize,
    pub max_relative_error: f64,
    pub valid_fraction: f64,
}

/// `|a − n| / max(|a|, |n|, 1e-6)`. The floor keeps parameters whose true
/// gradient is below finite-difference roundoff from dominating.
pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Analytic gradients of the mean batch loss (head, decoder, robust loss)
/// against central finite differences, for every parameter of a small
/// random head on a 3-sample batch. Two samples are observed a few pixels
/// off the current prediction and land in the valid branch; the third sees
/// it from inside the near plane and lands in the pseudo-target branch.
pub fn gradient_check(seed: u64) -> Result<GradCheckReport, RegressorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..3)
        .map(|_| {
            vec![
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            ]
        })
        .collect();
    let decoder = DecoderParams::with_defaults(centers)?;
    let cfg = HeadConfig {
        input_width: 8,
        hidden_width: 12,
        residual_blocks: 1,
        output_width: decoder.raw_width(),
    };
    let mut head = RegressorHead::random(cfg, rng.random());
    for p in head.params.iter_mut() {
        *p *= 0.5;
    }
    let n = 3;
    let x = Array2::from_shape_fn((n, cfg.input_width), |_| rng.random_range(-1.0..1.0));
    let y = predict_rows(&head, &decoder, &x)?;
    let intrinsics = CameraIntrinsics::from_fov(640.0, 480.0, 60.0);
    let mut targets = Vec::with_capacity(n);
    for (i, yi) in y.iter().enumerate() {
        let yi = Vector3::new(yi[0], yi[1], yi[2]);
        let dir = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-0.3..0.3),
            1.0,
        )
        .normalize();
        let pose = if i + 1 < n {
            let center = yi - dir * rng.random_range(3.0..8.0);
            let aim = yi
                + Vector3::new(
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.5..0.5),
                    0.0,
                );
            RigidPose::look_at(&center, &aim, &Vector3::y())
        } else {
            // closer than the near plane
            let center = yi - dir * rng.random_range(0.02..0.08);
            RigidPose::look_at(&center, &yi, &Vector3::y())
        };
        let pixel = match project(&intrinsics, &pose, &yi) {
            Ok(p) => p + Vector2::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)),
            Err(_) => Vector2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0)),
        };
        targets.push(ReprojectionTarget {
            pixel,
            pose,
            intrinsics,
        });
    }
    let sched = LossSchedule::default();
    let tau = tau_schedule(rng.random_range(0.0..1.0), &sched);

    let mut analytic = vec![0.0; head.param_count()];
    let stats = reprojection_batch(
        &head,
        &decoder,
        &x,
        &targets,
        tau,
        &sched,
        Some(&mut analytic),
    )?;
    let mut max_err: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let orig = head.params[i];
        head.params[i] = orig + GRADCHECK_EPS;
        let plus = reprojection_batch(&head, &decoder, &x, &targets, tau, &sched, None)?.mean_loss;
        head.params[i] = orig - GRADCHECK_EPS;
        let minus = reprojection_batch(&head, &decoder, &x, &targets, tau, &sched, None)?.mean_loss;
        head.params[i] = orig;
        let numeric = (plus - minus) / (2.0 * GRADCHECK_EPS);
        max_err = max_err.max(relative_error(a, numeric));
    }
    Ok(GradCheckReport {
        seed,
        params_checked: head.param_count(),
        max_relative_error: max_err,
        valid_fraction: stats.valid_fraction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analytic_matches_finite_differences() {
        for seed in 0..3 {
            let r = gradient_check(seed).unwrap();
            assert!(r.max_relative_error < 1e-4, "{r:?}");
            assert!(r.valid_fraction > 0.5 && r.valid_fraction < 1.0, "{r:?}");
        }
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.0001) - 1e-4 / 1.0001).abs() < 1e-12);
        assert!((relative_error(1e-9, 2e-9) - 1e-3).abs() < 1e-12);
    }
}
