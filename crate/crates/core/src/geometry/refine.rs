use nalgebra::{Matrix2x3, Matrix6, SMatrix, UnitQuaternion, Vector3, Vector6};

use super::{CameraIntrinsics, Correspondence2D3D, RigidPose};

/// Mean of squared Euclidean reprojection residuals. Points behind the
/// camera make the cost infinite.
pub fn mean_squared_reprojection(
    pose: &RigidPose,
    corrs: &[Correspondence2D3D],
    k: &CameraIntrinsics,
) -> f64 {
    if corrs.is_empty() {
        return 0.0;
    }
    let mut sum = 0.0;
    for c in corrs {
        let pc = pose.transform(&c.point);
        if pc.z <= 0.0 {
            return f64::INFINITY;
        }
        let du = k.fx * pc.x / pc.z + k.cx - c.pixel.x;
        let dv = k.fy * pc.y / pc.z + k.cy - c.pixel.y;
        sum += du * du + dv * dv;
    }
    sum / corrs.len() as f64
}

/// Levenberg–Marquardt on squared pixel residuals. The rotation is updated
/// multiplicatively (`R ← exp(ω)·R`) and renormalized as a unit quaternion
/// after every step; a step is only accepted if it lowers the cost, so the
/// result is never worse than the input.
pub fn refine_pose(
    pose: &RigidPose,
    inliers: &[Correspondence2D3D],
    k: &CameraIntrinsics,
    iterations: usize,
) -> RigidPose {
    if iterations == 0 || inliers.len() < 3 {
        return *pose;
    }
    let mut current = *pose;
    let mut cost = mean_squared_reprojection(&current, inliers, k);
    if !cost.is_finite() {
        return *pose;
    }
    let mut lambda = 1e-3;

    for _ in 0..iterations {
        if cost <= 1e-30 {
            break;
        }
        let mut jtj = Matrix6::<f64>::zeros();
        let mut jtr = Vector6::<f64>::zeros();
        let r = current.rotation_matrix();
        for c in inliers {
            let rp = r * c.point;
            let pc = rp + current.translation;
            let iz = 1.0 / pc.z;
            let res = nalgebra::Vector2::new(
                k.fx * pc.x * iz + k.cx - c.pixel.x,
                k.fy * pc.y * iz + k.cy - c.pixel.y,
            );
            let dproj = Matrix2x3::new(
                k.fx * iz,
                0.0,
                -k.fx * pc.x * iz * iz,
                0.0,
                k.fy * iz,
                -k.fy * pc.y * iz * iz,
            );
            // d(pc)/d(omega) = -[R p]_x, d(pc)/d(t) = I
            let skew = -rp.cross_matrix();
            let mut j = SMatrix::<f64, 2, 6>::zeros();
            j.fixed_view_mut::<2, 3>(0, 0).copy_from(&(dproj * skew));
            j.fixed_view_mut::<2, 3>(0, 3).copy_from(&dproj);
            jtj += j.transpose() * j;
            jtr += j.transpose() * res;
        }

        let mut improved = false;
        for _ in 0..10 {
            let mut a = jtj;
            for d in 0..6 {
                a[(d, d)] += lambda * (jtj[(d, d)].max(1e-12));
            }
            let Some(step) = a.cholesky().map(|ch| ch.solve(&(-jtr))) else {
                lambda *= 10.0;
                continue;
            };
            let omega = Vector3::new(step[0], step[1], step[2]);
            let dt = Vector3::new(step[3], step[4], step[5]);
            let dq = UnitQuaternion::from_scaled_axis(omega);
            let q = (dq * current.rotation).into_inner();
            let cand = RigidPose {
                rotation: UnitQuaternion::new_normalize(q),
                translation: current.translation + dt,
            };
            let cand_cost = mean_squared_reprojection(&cand, inliers, k);
            if cand_cost < cost {
                current = cand;
                let rel = (cost - cand_cost) / cost;
                cost = cand_cost;
                lambda = (lambda * 0.1).max(1e-12);
                improved = true;
                if rel < 1e-15 {
                    return current;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    current
}
