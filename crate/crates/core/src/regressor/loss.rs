use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::geometry::{CameraIntrinsics, RigidPose};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSchedule {
    pub tau_min: f64,
    pub tau_max: f64,
    pub z_near: f64,
    pub z_far: f64,
    /// Largest L1 reprojection error (px) still treated as valid.
    pub e_max: f64,
    /// Depth at which invalid predictions are pulled onto the pixel ray.
    pub z_pseudo: f64,
}

impl Default for LossSchedule {
    fn default() -> Self {
        Self {
            tau_min: 1.0,
            tau_max: 50.0,
            z_near: 0.1,
            z_far: 1000.0,
            e_max: 1000.0,
            z_pseudo: 10.0,
        }
    }
}

impl LossSchedule {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.tau_min > 0.0 && self.tau_max > 0.0 && self.tau_min <= self.tau_max) {
            return Err("need 0 < tau_min <= tau_max".into());
        }
        if !(self.z_near < self.z_far) {
            return Err("need z_near < z_far".into());
        }
        if !(self.e_max > 0.0 && self.z_pseudo > 0.0) {
            return Err("e_max and z_pseudo must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossBranch {
    Valid,
    Pseudo,
}

/// `τ(t) = √(1 − t²)·τ_max + τ_min`, with `t` clamped to [0, 1].
pub fn tau_schedule(t: f64, sched: &LossSchedule) -> f64 {
    let t = t.clamp(0.0, 1.0);
    (1.0 - t * t).sqrt() * sched.tau_max + sched.tau_min
}

/// The pixel's ray point at depth `z_pseudo`, in world coordinates.
pub fn pseudo_target(
    x: &Vector2<f64>,
    h: &RigidPose,
    k: &CameraIntrinsics,
    z_pseudo: f64,
) -> Vector3<f64> {
    h.inverse().transform(&(k.unproject(x) * z_pseudo))
}

fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn robust_loss(
    x: &Vector2<f64>,
    y: &Vector3<f64>,
    h: &RigidPose,
    k: &CameraIntrinsics,
    tau: f64,
    sched: &LossSchedule,
) -> (f64, LossBranch) {
    let (l, b, _) = robust_loss_grad(x, y, h, k, tau, sched);
    (l, b)
}

/// Loss, branch, and dL/dy. The pseudo target is a constant, and the L1
/// subgradient at an exactly zero residual is zero.
pub fn robust_loss_grad(
    x: &Vector2<f64>,
    y: &Vector3<f64>,
    h: &RigidPose,
    k: &CameraIntrinsics,
    tau: f64,
    sched: &LossSchedule,
) -> (f64, LossBranch, Vector3<f64>) {
    let r = h.rotation_matrix();
    let pc = r * y + h.translation;
    let z = pc.z;
    if z >= sched.z_near && z <= sched.z_far {
        let du = k.fx * pc.x / z + k.cx - x.x;
        let dv = k.fy * pc.y / z + k.cy - x.y;
        let e = du.abs() + dv.abs();
        if e < sched.e_max {
            let th = (e / tau).tanh();
            let loss = tau * th;
            let de = 1.0 - th * th;
            let (su, sv) = (sign0(du), sign0(dv));
            // d(u, v)/d(pc)
            let g_pc = Vector3::new(
                de * su * k.fx / z,
                de * sv * k.fy / z,
                -de * (su * k.fx * pc.x + sv * k.fy * pc.y) / (z * z),
            );
            return (loss, LossBranch::Valid, r.transpose() * g_pc);
        }
    }
    let target = pseudo_target(x, h, k, sched.z_pseudo);
    let diff = y - target;
    (diff.abs().sum(), LossBranch::Pseudo, diff.map(sign0))
}
