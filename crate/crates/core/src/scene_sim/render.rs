use nalgebra::Vector2;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::SyntheticScene;
use crate::geometry::{project, CameraIntrinsics, RigidPose};

/// One training sample: where a landmark was seen and what its local
/// encoding looked like in that view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationRecord {
    pub pixel: Vector2<f64>,
    pub local_encoding: Vec<f64>,
    pub image_index: usize,
    pub intrinsics: CameraIntrinsics,
    pub gt_pose: RigidPose,
    /// Simulator ground truth; never fed to the regressor.
    pub landmark_id: usize,
}

fn truncated_normal(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    loop {
        let e: f64 = rng.sample(StandardNormal);
        if e.abs() <= 3.0 {
            return sigma * e;
        }
    }
}

/// Observations of every visible landmark in one camera, uniformly
/// subsampled to at most `samples_per_image` records (kept in landmark
/// order). Each camera draws from its own stream of the seeded generator.
pub fn render_observations(
    scene: &SyntheticScene,
    camera_index: usize,
    samples_per_image: usize,
    seed: u64,
) -> Vec<ObservationRecord> {
    let cam = &scene.cameras[camera_index];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(camera_index as u64);

    let mut visible = scene.visible_landmarks(camera_index);
    if visible.len() > samples_per_image {
        let mut keep: Vec<usize> = sample(&mut rng, visible.len(), samples_per_image).into_vec();
        keep.sort_unstable();
        visible = keep.into_iter().map(|i| visible[i]).collect();
    }

    let w = scene.options.image_width;
    let h = scene.options.image_height;
    let jitter = scene.options.pixel_jitter_sigma;
    let noise = scene.ambiguity.descriptor_noise_sigma;
    visible
        .into_iter()
        .map(|l| {
            let lm = &scene.landmarks[l];
            let clean = project(&cam.intrinsics, &cam.pose, &lm.position)
                .expect("visible landmark is in front");
            let mut pixel = clean;
            pixel.x = (pixel.x + truncated_normal(&mut rng, jitter)).clamp(0.0, w - 1e-9);
            pixel.y = (pixel.y + truncated_normal(&mut rng, jitter)).clamp(0.0, h - 1e-9);
            let local_encoding = if noise == 0.0 {
                lm.descriptor.clone()
            } else {
                lm.descriptor
                    .iter()
                    .map(|d| d + noise * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            };
            ObservationRecord {
                pixel,
                local_encoding,
                image_index: cam.image_index,
                intrinsics: cam.intrinsics,
                gt_pose: cam.pose,
                landmark_id: l,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::reprojection_error;
    use crate::scene_sim::{generate_scene, AmbiguityConfig, Layout, SceneOptions};
    use nalgebra::Vector3;

    fn scene(noise: f64, jitter: f64, frac: f64) -> SyntheticScene {
        let opts = SceneOptions {
            descriptor_dim: 8,
            pixel_jitter_sigma: jitter,
            ..Default::default()
        };
        let amb = AmbiguityConfig {
            duplicate_fraction: frac,
            group_size: 2,
            descriptor_noise_sigma: noise,
        };
        generate_scene(Layout::SingleRegion, 120, 10, &amb, &opts, 21).unwrap()
    }

    #[test]
    fn noiseless_encodings_match_across_views() {
        let s = scene(0.0, 0.0, 0.0);
        let a = render_observations(&s, 0, 1024, 1);
        let b = render_observations(&s, 1, 1024, 1);
        let mut shared = 0;
        for ra in &a {
            for rb in b.iter().filter(|rb| rb.landmark_id == ra.landmark_id) {
                assert_eq!(ra.local_encoding, rb.local_encoding);
                shared += 1;
            }
        }
        assert!(shared > 0);
    }

    #[test]
    fn behind_camera_landmark_is_absent() {
        let mut s = scene(0.0, 0.0, 0.0);
        let cam = s.cameras[0].pose;
        // place landmark 0 two meters behind camera 0
        s.landmarks[0].position = cam.inverse().transform(&Vector3::new(0.0, 0.0, -2.0));
        let obs = render_observations(&s, 0, 1024, 3);
        assert!(obs.iter().all(|o| o.landmark_id != 0));
    }

    #[test]
    fn subsamples_to_requested_count() {
        let s = scene(0.0, 0.0, 0.0);
        let all = render_observations(&s, 2, usize::MAX, 5);
        assert!(all.len() > 20);
        let sub = render_observations(&s, 2, 20, 5);
        assert_eq!(sub.len(), 20);
        assert!(sub.windows(2).all(|w| w[0].landmark_id < w[1].landmark_id));
    }

    #[test]
    fn records_reproject_within_jitter_bound() {
        for jitter in [0.0, 1.5] {
            let s = scene(0.1, jitter, 0.2);
            for c in 0..s.cameras.len() {
                for o in render_observations(&s, c, 1024, 9) {
                    let e = reprojection_error(
                        &o.pixel,
                        &s.landmarks[o.landmark_id].position,
                        &o.gt_pose,
                        &o.intrinsics,
                    );
                    assert!(e <= s.jitter_bound() + 1e-9, "e={e}");
                    assert!((0.0..640.0).contains(&o.pixel.x) && (0.0..480.0).contains(&o.pixel.y));
                    assert!(o.local_encoding.iter().all(|x| x.is_finite()));
                }
            }
        }
    }

    #[test]
    fn duplicates_indistinguishable_without_noise() {
        let s = scene(0.0, 0.0, 0.4);
        let obs: Vec<ObservationRecord> = (0..s.cameras.len())
            .flat_map(|c| render_observations(&s, c, 1024, 4))
            .collect();
        let mut checked = 0;
        for a in &obs {
            for b in &obs {
                let (la, lb) = (&s.landmarks[a.landmark_id], &s.landmarks[b.landmark_id]);
                if a.landmark_id != b.landmark_id && la.group_id == lb.group_id {
                    assert_eq!(a.local_encoding, b.local_encoding);
                    checked += 1;
                }
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn bitwise_deterministic() {
        let s = scene(0.3, 1.0, 0.2);
        assert_eq!(
            render_observations(&s, 3, 50, 8),
            render_observations(&s, 3, 50, 8)
        );
    }
}
