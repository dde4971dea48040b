//! Synthetic scenes that stand in for real mapping images: landmarks with
//! canonical descriptors, posed cameras, controllable perceptual aliasing,
//! and per-image global embeddings fitted to co-visibility.

mod global;
mod io;
mod layout;
mod render;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CameraIntrinsics, RigidPose};

pub use global::{simulate_global_encoding, simulate_global_encoding_with, GlobalFitConfig};
pub use io::{load_scene, save_scene, SceneFile, SCENE_FORMAT_VERSION};
pub use layout::generate_scene;
pub use render::{render_observations, ObservationRecord};

#[derive(Debug, Error)]
pub enum SceneError {
    #[error(
        "infeasible layout: landmark {landmark} not visible in 3 cameras after {attempts} attempts"
    )]
    InfeasibleLayout { landmark: usize, attempts: usize },
    #[error("invalid scene parameters: {0}")]
    InvalidParameters(String),
    #[error("global encoding fit failed: co-visible mean {covisible_deg:.2}° is not below non-co-visible mean {other_deg:.2}°")]
    FitFailure { covisible_deg: f64, other_deg: f64 },
    #[error("unsupported scene format version {0}")]
    UnsupportedVersion(u32),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Layout {
    /// One open region viewed from an arc of cameras.
    SingleRegion,
    /// Closed 5 m rooms on a 2-D grid; nothing is visible across rooms.
    GridOfRooms { rooms: usize },
    /// Cameras driving around a circular street lined with facades.
    StreetLoop,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AmbiguityConfig {
    pub duplicate_fraction: f64,
    pub group_size: usize,
    pub descriptor_noise_sigma: f64,
}

impl Default for AmbiguityConfig {
    fn default() -> Self {
        Self {
            duplicate_fraction: 0.0,
            group_size: 2,
            descriptor_noise_sigma: 0.0,
        }
    }
}

impl AmbiguityConfig {
    pub fn validate(&self) -> Result<(), SceneError> {
        if !(0.0..=1.0).contains(&self.duplicate_fraction) {
            return Err(SceneError::InvalidParameters(format!(
                "duplicate_fraction {} outside [0, 1]",
                self.duplicate_fraction
            )));
        }
        if self.group_size < 2 {
            return Err(SceneError::InvalidParameters(
                "group_size must be at least 2".into(),
            ));
        }
        if !(self.descriptor_noise_sigma >= 0.0) {
            return Err(SceneError::InvalidParameters(
                "descriptor_noise_sigma must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Knobs beyond the layout itself. Defaults are a 640×480 image with a 60°
/// horizontal field of view and 512-dimensional descriptors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneOptions {
    pub image_width: f64,
    pub image_height: f64,
    pub hfov_deg: f64,
    pub descriptor_dim: usize,
    pub pixel_jitter_sigma: f64,
    /// Distance between neighbouring room origins in a grid of rooms; the
    /// room size (rooms share walls) or more.
    pub room_spacing: f64,
}

impl Default for SceneOptions {
    fn default() -> Self {
        Self {
            image_width: 640.0,
            image_height: 480.0,
            hfov_deg: 60.0,
            descriptor_dim: 512,
            pixel_jitter_sigma: 0.0,
            room_spacing: layout::ROOM_SIZE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub position: Vector3<f64>,
    pub descriptor: Vec<f64>,
    pub group_id: usize,
    /// Coarse spatial region (room, street segment, quadrant).
    pub region: usize,
    /// Facade normal; a landmark with a normal is only seen from its front.
    pub normal: Option<Vector3<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneCamera {
    pub pose: RigidPose,
    pub intrinsics: CameraIntrinsics,
    pub image_index: usize,
    pub region: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub layout: Layout,
    pub landmarks: Vec<Landmark>,
    pub cameras: Vec<SceneCamera>,
    pub options: SceneOptions,
    pub ambiguity: AmbiguityConfig,
    /// Landmarks further than this from a camera are invisible to it.
    pub max_range: Option<f64>,
    /// Visibility requires the camera and landmark to share a region.
    pub regions_are_closed: bool,
    pub seed: u64,
}

impl SyntheticScene {
    /// Whether landmark `l` is seen by camera `c`: positive depth, inside the
    /// image, plus the layout's occlusion rules.
    pub fn is_visible(&self, c: usize, l: usize) -> bool {
        let cam = &self.cameras[c];
        let lm = &self.landmarks[l];
        self.visible_from(cam, &lm.position, lm.region, lm.normal.as_ref())
    }

    pub(crate) fn visible_from(
        &self,
        cam: &SceneCamera,
        position: &Vector3<f64>,
        region: usize,
        normal: Option<&Vector3<f64>>,
    ) -> bool {
        if self.regions_are_closed && cam.region != region {
            return false;
        }
        let center = cam.pose.center();
        if let Some(r) = self.max_range {
            if (position - center).norm() > r {
                return false;
            }
        }
        if let Some(n) = normal {
            if n.dot(&(center - position)) <= 0.0 {
                return false;
            }
        }
        let pc = cam.pose.transform(position);
        if pc.z <= 1e-6 {
            return false;
        }
        let k = &cam.intrinsics;
        let u = k.fx * pc.x / pc.z + k.cx;
        let v = k.fy * pc.y / pc.z + k.cy;
        (0.0..self.options.image_width).contains(&u)
            && (0.0..self.options.image_height).contains(&v)
    }

    /// Indices of landmarks visible in camera `c`, ascending.
    pub fn visible_landmarks(&self, c: usize) -> Vec<usize> {
        (0..self.landmarks.len())
            .filter(|&l| self.is_visible(c, l))
            .collect()
    }

    /// Visibility matrix, one row per camera.
    pub fn visibility(&self) -> Vec<Vec<bool>> {
        (0..self.cameras.len())
            .map(|c| {
                (0..self.landmarks.len())
                    .map(|l| self.is_visible(c, l))
                    .collect()
            })
            .collect()
    }

    pub fn group_count(&self) -> usize {
        self.landmarks
            .iter()
            .map(|l| l.group_id + 1)
            .max()
            .unwrap_or(0)
    }

    /// Number of descriptor groups with more than one member.
    pub fn ambiguous_group_count(&self) -> usize {
        let mut sizes = vec![0usize; self.group_count()];
        for l in &self.landmarks {
            sizes[l.group_id] += 1;
        }
        sizes.iter().filter(|&&s| s > 1).count()
    }

    /// Diagonal of the bounding box of all landmarks and camera centers.
    pub fn diameter(&self) -> f64 {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        let pts = self
            .landmarks
            .iter()
            .map(|l| l.position)
            .chain(self.cameras.iter().map(|c| c.pose.center()));
        for p in pts {
            lo = lo.inf(&p);
            hi = hi.sup(&p);
        }
        (hi - lo).norm()
    }

    pub fn camera_centers(&self) -> Vec<Vector3<f64>> {
        self.cameras.iter().map(|c| c.pose.center()).collect()
    }

    /// Upper bound on the L1 pixel error introduced by jitter (each axis is
    /// truncated at three standard deviations).
    pub fn jitter_bound(&self) -> f64 {
        6.0 * self.options.pixel_jitter_sigma
    }
}

/// Landmarks visible in both cameras.
pub fn covisibility_count(scene: &SyntheticScene, i: usize, j: usize) -> usize {
    (0..scene.landmarks.len())
        .filter(|&l| scene.is_visible(i, l) && scene.is_visible(j, l))
        .count()
}

/// All pairwise co-visibility counts from a precomputed visibility matrix.
pub fn covisibility_matrix(scene: &SyntheticScene) -> Vec<Vec<usize>> {
    let vis = scene.visibility();
    let n = vis.len();
    let mut out = vec![vec![0usize; n]; n];
    for i in 0..n {
        for j in i..n {
            let c = vis[i]
                .iter()
                .zip(&vis[j])
                .filter(|(a, b)| **a && **b)
                .count();
            out[i][j] = c;
            out[j][i] = c;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small(layout: Layout, frac: f64, seed: u64) -> SyntheticScene {
        let opts = SceneOptions {
            descriptor_dim: 16,
            ..Default::default()
        };
        let amb = AmbiguityConfig {
            duplicate_fraction: frac,
            ..Default::default()
        };
        generate_scene(layout, 60, 12, &amb, &opts, seed).unwrap()
    }

    #[test]
    fn covis_self_equals_visible_count() {
        let s = small(Layout::SingleRegion, 0.0, 1);
        for c in 0..s.cameras.len() {
            assert_eq!(covisibility_count(&s, c, c), s.visible_landmarks(c).len());
        }
    }

    #[test]
    fn covis_is_symmetric_and_matches_matrix() {
        let s = small(Layout::StreetLoop, 0.0, 2);
        let m = covisibility_matrix(&s);
        for i in 0..s.cameras.len() {
            for j in 0..s.cameras.len() {
                assert_eq!(covisibility_count(&s, i, j), covisibility_count(&s, j, i));
                assert_eq!(m[i][j], covisibility_count(&s, i, j));
            }
        }
    }

    #[test]
    fn opposite_cameras_share_nothing() {
        let mut s = small(Layout::SingleRegion, 0.0, 3);
        let k = s.cameras[0].intrinsics;
        let c = Vector3::new(0.0, 0.0, 0.0);
        let up = Vector3::new(0.0, 1.0, 0.0);
        s.cameras.truncate(2);
        s.cameras[0].pose = RigidPose::look_at(&c, &Vector3::new(0.0, 0.0, 1.0), &up);
        s.cameras[1].pose = RigidPose::look_at(&c, &Vector3::new(0.0, 0.0, -1.0), &up);
        s.cameras[1].intrinsics = k;
        assert_eq!(covisibility_count(&s, 0, 1), 0);
    }

    #[test]
    fn identical_poses_have_equal_counts() {
        let mut s = small(Layout::SingleRegion, 0.0, 4);
        s.cameras[1].pose = s.cameras[0].pose;
        assert_eq!(covisibility_count(&s, 0, 1), covisibility_count(&s, 0, 0));
        assert_eq!(covisibility_count(&s, 1, 0), covisibility_count(&s, 1, 1));
    }
}
