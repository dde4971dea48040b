use nalgebra::{DMatrix, Matrix3, Vector2, Vector3};

use super::{CameraIntrinsics, GeometryError, RigidPose};

/// Linear (DLT) triangulation in normalized image coordinates followed by
/// Gauss–Newton on the squared pixel residuals.
pub fn triangulate_dlt(
    observations: &[(Vector2<f64>, CameraIntrinsics, RigidPose)],
) -> Result<Vector3<f64>, GeometryError> {
    if observations.len() < 2 {
        return Err(GeometryError::Degenerate("need at least two observations"));
    }
    let centers: Vec<Vector3<f64>> = observations.iter().map(|(_, _, h)| h.center()).collect();
    let baseline = centers
        .iter()
        .flat_map(|a| centers.iter().map(move |b| (a - b).norm()))
        .fold(0.0, f64::max);
    let extent = centers.iter().map(|c| c.norm()).fold(1.0, f64::max);
    if baseline <= 1e-9 * extent {
        return Err(GeometryError::Degenerate("zero baseline"));
    }

    let mut a = DMatrix::<f64>::zeros(2 * observations.len(), 4);
    for (i, (px, k, h)) in observations.iter().enumerate() {
        let ray = k.unproject(px);
        let r = h.rotation_matrix();
        let t = h.translation;
        // rows of the normalized projection matrix [R | t]
        let p0 = [r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x];
        let p1 = [r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y];
        let p2 = [r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z];
        for c in 0..4 {
            a[(2 * i, c)] = ray.x * p2[c] - p0[c];
            a[(2 * i + 1, c)] = ray.y * p2[c] - p1[c];
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or(GeometryError::Degenerate("SVD failed"))?;
    let sv = &svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&i, &j| sv[j].total_cmp(&sv[i]));
    let smallest = order[order.len() - 1];
    let second = order[order.len() - 2];
    if sv[second] <= 1e-12 * sv[order[0]] {
        return Err(GeometryError::Degenerate(
            "rank-deficient triangulation system",
        ));
    }
    let x = v_t.row(smallest);
    if x[3].abs() <= 1e-14 * x.norm() {
        return Err(GeometryError::Degenerate("point at infinity"));
    }
    let mut point = Vector3::new(x[0] / x[3], x[1] / x[3], x[2] / x[3]);

    // Gauss–Newton on pixel residuals
    let cost = |p: &Vector3<f64>| -> f64 {
        observations
            .iter()
            .map(|(px, k, h)| {
                let pc = h.transform(p);
                if pc.z <= 0.0 {
                    return f64::INFINITY;
                }
                let du = k.fx * pc.x / pc.z + k.cx - px.x;
                let dv = k.fy * pc.y / pc.z + k.cy - px.y;
                du * du + dv * dv
            })
            .sum()
    };
    let mut current = cost(&point);
    if current.is_finite() {
        for _ in 0..20 {
            let mut jtj = Matrix3::<f64>::zeros();
            let mut jtr = Vector3::<f64>::zeros();
            for (px, k, h) in observations {
                let r = h.rotation_matrix();
                let pc = h.transform(&point);
                let iz = 1.0 / pc.z;
                let res = Vector2::new(
                    k.fx * pc.x * iz + k.cx - px.x,
                    k.fy * pc.y * iz + k.cy - px.y,
                );
                let dproj = nalgebra::Matrix2x3::new(
                    k.fx * iz,
                    0.0,
                    -k.fx * pc.x * iz * iz,
                    0.0,
                    k.fy * iz,
                    -k.fy * pc.y * iz * iz,
                );
                let j = dproj * r;
                jtj += j.transpose() * j;
                jtr += j.transpose() * res;
            }
            let Some(step) = jtj.cholesky().map(|c| c.solve(&(-jtr))) else {
                break;
            };
            let cand = point + step;
            let cand_cost = cost(&cand);
            if !(cand_cost < current) {
                break;
            }
            let done = current - cand_cost <= 1e-16 * current.max(1e-300);
            point = cand;
            current = cand_cost;
            if done {
                break;
            }
        }
    }
    Ok(point)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::project;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn cams(n: usize) -> Vec<(CameraIntrinsics, RigidPose)> {
        let k = CameraIntrinsics::from_fov(640.0, 480.0, 60.0);
        (0..n)
            .map(|i| {
                let a = i as f64 / n as f64 * 1.2 - 0.6;
                let c = Vector3::new(4.0 * a.sin(), 0.3 * i as f64 / n as f64, -4.0 * a.cos());
                (
                    k,
                    RigidPose::look_at(
                        &c,
                        &Vector3::new(0.0, 0.0, 2.0),
                        &Vector3::new(0.0, 1.0, 0.0),
                    ),
                )
            })
            .collect()
    }

    #[test]
    fn exact_two_view() {
        let y = Vector3::new(0.4, -0.3, 2.5);
        let obs: Vec<_> = cams(2)
            .into_iter()
            .map(|(k, h)| (project(&k, &h, &y).unwrap(), k, h))
            .collect();
        let p = triangulate_dlt(&obs).unwrap();
        assert!((p - y).norm() < 1e-8);
    }

    #[test]
    fn zero_baseline_is_degenerate() {
        let k = CameraIntrinsics::from_fov(640.0, 480.0, 60.0);
        let c = Vector3::new(1.0, 0.0, 0.0);
        let y = Vector3::new(1.2, 0.1, 5.0);
        let h1 = RigidPose::look_at(
            &c,
            &Vector3::new(1.0, 0.0, 5.0),
            &Vector3::new(0.0, 1.0, 0.0),
        );
        let h2 = RigidPose::look_at(
            &c,
            &Vector3::new(1.5, 0.3, 5.0),
            &Vector3::new(0.0, 1.0, 0.0),
        );
        let obs = vec![
            (project(&k, &h1, &y).unwrap(), k, h1),
            (project(&k, &h2, &y).unwrap(), k, h2),
        ];
        assert!(matches!(
            triangulate_dlt(&obs),
            Err(GeometryError::Degenerate(_))
        ));
    }

    /// Monte Carlo oracle: 100 noisy draws give the estimator covariance;
    /// the mean must be unbiased within 3 standard errors, and fresh draws
    /// must land within 5 standard deviations of the true point per axis.
    #[test]
    fn noisy_five_view_within_monte_carlo_tolerance() {
        let y = Vector3::new(0.2, 0.1, 2.0);
        let cams = cams(5);
        let noise = Normal::new(0.0, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let draw = |rng: &mut ChaCha8Rng| {
            let obs: Vec<_> = cams
                .iter()
                .map(|(k, h)| {
                    let px = project(k, h, &y).unwrap()
                        + Vector2::new(noise.sample(rng), noise.sample(rng));
                    (px, *k, *h)
                })
                .collect();
            triangulate_dlt(&obs).unwrap()
        };
        let estimates: Vec<Vector3<f64>> = (0..100).map(|_| draw(&mut rng)).collect();
        let mean: Vector3<f64> = estimates.iter().sum::<Vector3<f64>>() / 100.0;
        let var: Vector3<f64> = estimates
            .iter()
            .map(|e| (e - mean).component_mul(&(e - mean)))
            .sum::<Vector3<f64>>()
            / 99.0;
        let sd = var.map(f64::sqrt);
        for ax in 0..3 {
            assert!(
                (mean[ax] - y[ax]).abs() < 3.0 * sd[ax] / 10.0,
                "axis {ax} biased"
            );
        }
        for _ in 0..20 {
            let e = draw(&mut rng);
            for ax in 0..3 {
                assert!((e[ax] - y[ax]).abs() < 5.0 * sd[ax]);
            }
        }
    }
}
