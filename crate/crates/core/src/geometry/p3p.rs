//! Three-point absolute pose via the Lambda Twist reduction: the three
//! distance constraints between bearing rays are combined into a singular
//! conic pencil, whose degenerate member is found from a single cubic root.

use nalgebra::{Matrix3, Vector3};

use super::{project, CameraIntrinsics, Correspondence2D3D, GeometryError, RigidPose};

/// Candidate poses from 3 or 4 correspondences.
///
/// With three correspondences every real root is returned (up to four).
/// With four, the fourth correspondence ranks the roots: candidates come back
/// sorted by its reprojection error, best first.
pub fn pnp_minimal(
    corrs: &[Correspondence2D3D],
    k: &CameraIntrinsics,
) -> Result<Vec<RigidPose>, GeometryError> {
    if corrs.len() != 3 && corrs.len() != 4 {
        return Err(GeometryError::Degenerate(
            "minimal solver needs 3 or 4 points",
        ));
    }
    let world = [corrs[0].point, corrs[1].point, corrs[2].point];
    let bearings = [
        k.unproject(&corrs[0].pixel),
        k.unproject(&corrs[1].pixel),
        k.unproject(&corrs[2].pixel),
    ];
    let mut poses = solve_p3p(&world, &bearings)?;
    if poses.is_empty() {
        return Err(GeometryError::NoSolution);
    }
    if let Some(fourth) = corrs.get(3) {
        let mut scored: Vec<(f64, RigidPose)> = poses
            .into_iter()
            .map(|p| {
                let e = project(k, &p, &fourth.point)
                    .map(|x| (x - fourth.pixel).norm())
                    .unwrap_or(f64::INFINITY);
                (e, p)
            })
            .collect();
        scored.sort_by(|a, b| a.0.total_cmp(&b.0));
        poses = scored.into_iter().map(|(_, p)| p).collect();
    }
    Ok(poses)
}

/// Core solver on world points and (unnormalized) bearing vectors.
pub(crate) fn solve_p3p(
    world: &[Vector3<f64>; 3],
    bearings: &[Vector3<f64>; 3],
) -> Result<Vec<RigidPose>, GeometryError> {
    let d12 = world[0] - world[1];
    let d13 = world[0] - world[2];
    let d23 = world[1] - world[2];
    let normal = d12.cross(&d13);
    let scale = d12.norm() * d13.norm();
    if scale == 0.0 || normal.norm() <= 1e-10 * scale {
        return Err(GeometryError::Degenerate("collinear world points"));
    }

    let f1 = bearings[0].normalize();
    let f2 = bearings[1].normalize();
    let f3 = bearings[2].normalize();

    let a12 = d12.norm_squared();
    let a13 = d13.norm_squared();
    let a23 = d23.norm_squared();

    let c12 = f1.dot(&f2);
    let c23 = f2.dot(&f3);
    let c31 = f3.dot(&f1);
    let blob = c12 * c23 * c31 - 1.0;

    let s12_sq = 1.0 - c12 * c12;
    let s23_sq = 1.0 - c23 * c23;
    let s31_sq = 1.0 - c31 * c31;

    let b12 = -2.0 * c12;
    let b13 = -2.0 * c31;
    let b23 = -2.0 * c23;

    // Cubic whose root makes the conic pencil D1 + g·D2 singular.
    let p3 = a13 * (a23 * s31_sq - a13 * s23_sq);
    let p2 = 2.0 * blob * a23 * a13 + a13 * (2.0 * a12 + a13) * s23_sq + a23 * (a23 - a12) * s31_sq;
    let p1 =
        a23 * (a13 - a23) * s12_sq - a12 * a12 * s23_sq - 2.0 * a12 * (blob * a23 + a13 * s23_sq);
    let p0 = a12 * (a12 * s23_sq - a23 * s12_sq);
    if p3.abs() < 1e-300 {
        return Err(GeometryError::NoSolution);
    }
    let g = cubic_root(p2 / p3, p1 / p3, p0 / p3);

    let d0 = Matrix3::new(
        a23 * (1.0 - g),
        -(a23 * c12),
        a23 * c31 * g,
        -(a23 * c12),
        a23 - a12 + a13 * g,
        -c23 * (a13 * g - a12),
        a23 * c31 * g,
        -c23 * (a13 * g - a12),
        g * (a13 - a23) - a12,
    );
    let (e, eigvals) = eigen_singular_symmetric(&d0);
    let v = (-eigvals[1] / eigvals[0]).max(0.0).sqrt();

    let mut lambdas: Vec<Vector3<f64>> = Vec::with_capacity(4);
    for s in [v, -v] {
        let denom = s * e[(0, 1)] - e[(0, 0)];
        if denom.abs() < 1e-300 {
            continue;
        }
        let w2 = 1.0 / denom;
        let w0 = (e[(1, 0)] - s * e[(1, 1)]) * w2;
        let w1 = (e[(2, 0)] - s * e[(2, 1)]) * w2;

        let a_den = (a13 - a12) * w1 * w1 - a12 * b13 * w1 - a12;
        if a_den.abs() < 1e-300 {
            continue;
        }
        let a = 1.0 / a_den;
        let b = (a13 * b12 * w1 - a12 * b13 * w0 - 2.0 * w0 * w1 * (a12 - a13)) * a;
        let c = ((a13 - a12) * w0 * w0 + a13 * b12 * w0 + a13) * a;

        if let Some((tau1, tau2)) = real_quadratic_roots(b, c) {
            for tau in [tau1, tau2] {
                if tau <= 0.0 {
                    continue;
                }
                let d = a23 / (tau * (b23 + tau) + 1.0);
                if d <= 0.0 {
                    continue;
                }
                let l2 = d.sqrt();
                let l3 = tau * l2;
                let l1 = w0 * l2 + w1 * l3;
                if l1 >= 0.0 {
                    lambdas.push(refine_lambda(
                        Vector3::new(l1, l2, l3),
                        a12,
                        a13,
                        a23,
                        b12,
                        b13,
                        b23,
                    ));
                }
            }
        }
    }

    let x = Matrix3::from_columns(&[d12, d13, normal]);
    let x_inv = x
        .try_inverse()
        .ok_or(GeometryError::Degenerate("collinear world points"))?;

    let mut poses = Vec::with_capacity(lambdas.len());
    for l in lambdas {
        let ry1 = f1 * l.x;
        let ry2 = f2 * l.y;
        let ry3 = f3 * l.z;
        let yd1 = ry1 - ry2;
        let yd2 = ry1 - ry3;
        let y = Matrix3::from_columns(&[yd1, yd2, yd1.cross(&yd2)]);
        let r = y * x_inv;
        if !r.iter().all(|v| v.is_finite()) {
            continue;
        }
        let t = ry1 - r * world[0];
        // Snap to the nearest proper rotation before converting.
        let svd = r.svd(true, true);
        let (Some(u), Some(vt)) = (svd.u, svd.v_t) else {
            continue;
        };
        let r_orth = u * vt;
        if r_orth.determinant() < 0.0 {
            continue;
        }
        if (r_orth - r).norm() > 1e-3 {
            // not a rotation: spurious root
            continue;
        }
        poses.push(RigidPose::from_matrix(&r_orth, t));
    }
    Ok(poses)
}

fn real_quadratic_roots(b: f64, c: f64) -> Option<(f64, f64)> {
    let disc = b * b - 4.0 * c;
    if disc < 0.0 {
        return None;
    }
    let y = disc.sqrt();
    if b < 0.0 {
        Some((0.5 * (-b + y), 2.0 * c / (-b + y)))
    } else if b > 0.0 {
        Some((2.0 * c / (-b - y), 0.5 * (-b - y)))
    } else {
        Some((0.5 * y, -0.5 * y))
    }
}

/// One real root of `r^3 + b r^2 + c r + d`, chosen where the derivative is
/// large, polished by Newton iterations.
fn cubic_root(b: f64, c: f64, d: f64) -> f64 {
    let mut r0;
    if b * b >= 3.0 * c {
        let v = (b * b - 3.0 * c).sqrt();
        let t1 = (-b - v) / 3.0;
        let k = ((t1 + b) * t1 + c) * t1 + d;
        if k > 0.0 {
            r0 = t1 - (-k / (3.0 * t1 + b)).sqrt();
        } else {
            let t2 = (-b + v) / 3.0;
            let k = ((t2 + b) * t2 + c) * t2 + d;
            r0 = t2 + (-k / (3.0 * t2 + b)).sqrt();
        }
    } else {
        r0 = -b / 3.0;
        if ((3.0 * r0 + 2.0 * b) * r0 + c).abs() < 1e-4 {
            r0 += 1.0;
        }
    }
    for i in 0..50 {
        let fx = ((r0 + b) * r0 + c) * r0 + d;
        if i >= 7 && fx.abs() <= 1e-15 {
            break;
        }
        let fpx = (3.0 * r0 + 2.0 * b) * r0 + c;
        if fpx == 0.0 {
            break;
        }
        r0 -= fx / fpx;
    }
    r0
}

/// Eigen-decomposition of a symmetric 3×3 matrix known to have one zero
/// eigenvalue. Columns of the returned matrix are eigenvectors; the first two
/// eigenvalues are sorted by decreasing magnitude, the third is zero.
fn eigen_singular_symmetric(x: &Matrix3<f64>) -> (Matrix3<f64>, [f64; 3]) {
    let r0 = x.row(0).transpose();
    let r1 = x.row(1).transpose();
    let mut v3 = r0.cross(&r1);
    if v3.norm() < 1e-300 {
        v3 = r0.cross(&x.row(2).transpose());
    }
    let v3 = v3.normalize();

    let m11 = x[(0, 0)];
    let m12 = x[(0, 1)];
    let m13 = x[(0, 2)];
    let m22 = x[(1, 1)];
    let m23 = x[(1, 2)];
    let m33 = x[(2, 2)];

    let b = -m11 - m22 - m33;
    let c = -m12 * m12 - m13 * m13 - m23 * m23 + m11 * (m22 + m33) + m22 * m33;
    let (mut e1, mut e2) = match real_quadratic_roots(b, c) {
        Some(r) => r,
        None => (-0.5 * b, -0.5 * b),
    };
    if e1.abs() < e2.abs() {
        std::mem::swap(&mut e1, &mut e2);
    }

    let mx0011 = -m11 * m22;
    let prec0 = m12 * m23 - m13 * m22;
    let prec1 = m12 * m13 - m11 * m23;
    let eigvec = |e: f64| {
        let tmp = 1.0 / (e * (m11 + m22) + mx0011 - e * e + m12 * m12);
        let a1 = -(e * m13 + prec0) * tmp;
        let a2 = -(e * m23 + prec1) * tmp;
        let rnorm = 1.0 / (a1 * a1 + a2 * a2 + 1.0).sqrt();
        Vector3::new(a1 * rnorm, a2 * rnorm, rnorm)
    };
    let v1 = eigvec(e1);
    let v2 = eigvec(e2);
    (Matrix3::from_columns(&[v1, v2, v3]), [e1, e2, 0.0])
}

/// Gauss–Newton polish of the three ray depths against the distance constraints.
#[allow(clippy::too_many_arguments)]
fn refine_lambda(
    lambda: Vector3<f64>,
    a12: f64,
    a13: f64,
    a23: f64,
    b12: f64,
    b13: f64,
    b23: f64,
) -> Vector3<f64> {
    let residual = |l: &Vector3<f64>| {
        Vector3::new(
            l.x * l.x + l.y * l.y + b12 * l.x * l.y - a12,
            l.x * l.x + l.z * l.z + b13 * l.x * l.z - a13,
            l.y * l.y + l.z * l.z + b23 * l.y * l.z - a23,
        )
    };
    let mut l = lambda;
    let mut res = residual(&l);
    for _ in 0..5 {
        if res.abs().sum() < 1e-14 * (a12 + a13 + a23) {
            break;
        }
        let j = Matrix3::new(
            2.0 * l.x + b12 * l.y,
            2.0 * l.y + b12 * l.x,
            0.0,
            2.0 * l.x + b13 * l.z,
            0.0,
            2.0 * l.z + b13 * l.x,
            0.0,
            2.0 * l.y + b23 * l.z,
            2.0 * l.z + b23 * l.y,
        );
        let Some(j_inv) = j.try_inverse() else { break };
        let cand = l - j_inv * res;
        let cand_res = residual(&cand);
        if cand_res.abs().sum() > res.abs().sum() {
            break;
        }
        l = cand;
        res = cand_res;
    }
    l
}
