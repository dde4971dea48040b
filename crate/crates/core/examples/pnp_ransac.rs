//! Recovers a camera pose from 2D-3D matches where half the matches are
//! wrong.

use nalgebra::{UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scenereg::geometry::{
    pose_error, ransac_pnp, CameraIntrinsics, Correspondence2D3D, RansacConfig, RigidPose,
};

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let k = CameraIntrinsics::from_fov(640.0, 480.0, 60.0);
    let gt = RigidPose::new(
        UnitQuaternion::from_euler_angles(0.1, -0.4, 0.2),
        Vector3::new(0.5, -0.2, 3.0),
    );
    let to_world = gt.inverse();

    let corrs: Vec<Correspondence2D3D> = (0..200)
        .map(|i| {
            let pixel = Vector2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
            let point = if i % 2 == 0 {
                to_world.transform(&(k.unproject(&pixel) * rng.random_range(2.0..8.0)))
            } else {
                Vector3::new(
                    rng.random_range(-10.0..10.0),
                    rng.random_range(-10.0..10.0),
                    rng.random_range(-10.0..10.0),
                )
            };
            Correspondence2D3D::new(pixel, point)
        })
        .collect();

    let out = ransac_pnp(&corrs, &k, &RansacConfig::default()).expect("pose found");
    let (t, r) = pose_error(&out.pose, &gt);
    println!("{} of {} matches kept", out.inlier_count(), corrs.len());
    println!("translation error {t:.2e} m, rotation error {r:.2e} deg");
}
