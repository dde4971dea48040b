use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{
    AmbiguityConfig, Landmark, Layout, SceneCamera, SceneError, SceneOptions, SyntheticScene,
};
use crate::geometry::{CameraIntrinsics, RigidPose};

pub const ROOM_SIZE: f64 = 5.0;
const ROOM_HEIGHT: f64 = 3.0;
const PLACEMENT_ATTEMPTS: usize = 1000;
const MIN_VIEWS: usize = 3;

const UP: Vector3<f64> = Vector3::new(0.0, 1.0, 0.0);

/// Number of grid columns used for `rooms` rooms.
pub fn room_columns(rooms: usize) -> usize {
    (rooms as f64).sqrt().ceil().max(1.0) as usize
}

/// Lower corner (x, z) of a room's 5 m cell.
pub fn room_origin(room: usize, rooms: usize, spacing: f64) -> (f64, f64) {
    let cols = room_columns(rooms);
    (
        (room % cols) as f64 * spacing,
        (room / cols) as f64 * spacing,
    )
}

fn street_radius(n_cameras: usize) -> f64 {
    (3.0 * n_cameras as f64 / (2.0 * PI)).max(12.0)
}

const STREET_HALF_WIDTH: f64 = 6.0;
const STREET_SEGMENTS: usize = 8;

/// Generates a scene whose every landmark is visible from at least three
/// cameras. Deterministic per seed.
pub fn generate_scene(
    layout: Layout,
    n_landmarks: usize,
    n_cameras: usize,
    ambiguity: &AmbiguityConfig,
    options: &SceneOptions,
    seed: u64,
) -> Result<SyntheticScene, SceneError> {
    if n_landmarks < 10 {
        return Err(SceneError::InvalidParameters(
            "need at least 10 landmarks".into(),
        ));
    }
    if n_cameras < 2 {
        return Err(SceneError::InvalidParameters(
            "need at least 2 cameras".into(),
        ));
    }
    if let Layout::GridOfRooms { rooms } = layout {
        if rooms == 0 {
            return Err(SceneError::InvalidParameters(
                "grid_of_rooms needs at least one room".into(),
            ));
        }
        if !(options.room_spacing >= ROOM_SIZE) {
            return Err(SceneError::InvalidParameters(format!(
                "room_spacing {} is below the room size {ROOM_SIZE}",
                options.room_spacing
            )));
        }
    }
    ambiguity.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = CameraIntrinsics::from_fov(options.image_width, options.image_height, options.hfov_deg);

    let cameras: Vec<SceneCamera> = (0..n_cameras)
        .map(|i| {
            let (pose, region) = place_camera(layout, i, n_cameras, options.room_spacing, &mut rng);
            SceneCamera {
                pose,
                intrinsics: k,
                image_index: i,
                region,
            }
        })
        .collect();

    let mut scene = SyntheticScene {
        layout,
        landmarks: Vec::with_capacity(n_landmarks),
        cameras,
        options: *options,
        ambiguity: *ambiguity,
        max_range: match layout {
            Layout::StreetLoop => Some(30.0),
            _ => None,
        },
        regions_are_closed: matches!(layout, Layout::GridOfRooms { .. }),
        seed,
    };

    for l in 0..n_landmarks {
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let (position, region, normal) =
                sample_landmark(layout, l, n_cameras, options.room_spacing, &mut rng);
            let views = scene
                .cameras
                .iter()
                .filter(|c| scene.visible_from(c, &position, region, normal.as_ref()))
                .take(MIN_VIEWS)
                .count();
            if views >= MIN_VIEWS {
                placed = Some((position, region, normal));
                break;
            }
        }
        let Some((position, region, normal)) = placed else {
            return Err(SceneError::InfeasibleLayout {
                landmark: l,
                attempts: PLACEMENT_ATTEMPTS,
            });
        };
        let descriptor = (0..options.descriptor_dim)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        scene.landmarks.push(Landmark {
            position,
            descriptor,
            group_id: l,
            region,
            normal,
        });
    }

    assign_duplicates(&mut scene, &mut rng)?;
    Ok(scene)
}

fn place_camera(
    layout: Layout,
    i: usize,
    n: usize,
    spacing: f64,
    rng: &mut ChaCha8Rng,
) -> (RigidPose, usize) {
    match layout {
        Layout::SingleRegion => {
            let theta = (-60.0 + 120.0 * (i as f64 + 0.5) / n as f64 + rng.random_range(-2.0..2.0))
                .to_radians();
            let c = Vector3::new(
                12.0 * theta.sin(),
                rng.random_range(-1.0..1.0),
                -12.0 * theta.cos(),
            );
            let target = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-0.5..0.5),
                rng.random_range(-1.0..1.0),
            );
            (RigidPose::look_at(&c, &target, &UP), quadrant(&c))
        }
        Layout::GridOfRooms { rooms } => {
            // cameras stand back from a corner and look into it, covering two walls
            let room = i % rooms;
            let slot = i / rooms;
            let (x0, z0) = room_origin(room, rooms, spacing);
            // corners rotate with a shift every four slots, so any every-n-th subset still sees all four
            let corner = (slot + slot / 4) % 4;
            let yaw = PI / 4.0 + PI / 2.0 * corner as f64 + rng.random_range(-0.35..0.35);
            let h = Vector3::new(yaw.cos(), 0.0, yaw.sin());
            let c = Vector3::new(x0 + 0.5 * ROOM_SIZE, 1.5, z0 + 0.5 * ROOM_SIZE) - 1.3 * h
                + Vector3::new(
                    rng.random_range(-0.4..0.4),
                    rng.random_range(-0.2..0.2),
                    rng.random_range(-0.4..0.4),
                );
            let dir = h + Vector3::new(0.0, rng.random_range(-0.15..0.15), 0.0);
            (RigidPose::look_at(&c, &(c + dir), &UP), room)
        }
        Layout::StreetLoop => {
            let r = street_radius(n);
            let phi = 2.0 * PI * (i as f64 + rng.random_range(-0.3..0.3)) / n as f64;
            let c = Vector3::new(r * phi.cos(), 1.6, r * phi.sin());
            let forward = if i.is_multiple_of(2) { 1.0 } else { -1.0 };
            let yaw = rng.random_range(-15f64..15.0).to_radians();
            let tangent = Vector3::new(-phi.sin(), 0.0, phi.cos()) * forward;
            let radial = Vector3::new(phi.cos(), 0.0, phi.sin());
            let dir = tangent * yaw.cos() + radial * yaw.sin();
            (RigidPose::look_at(&c, &(c + dir), &UP), street_segment(phi))
        }
    }
}

fn quadrant(p: &Vector3<f64>) -> usize {
    usize::from(p.x >= 0.0) + 2 * usize::from(p.z >= 0.0)
}

fn street_segment(phi: f64) -> usize {
    let a = phi.rem_euclid(2.0 * PI);
    ((a / (2.0 * PI) * STREET_SEGMENTS as f64) as usize).min(STREET_SEGMENTS - 1)
}

fn sample_landmark(
    layout: Layout,
    l: usize,
    n_cameras: usize,
    spacing: f64,
    rng: &mut ChaCha8Rng,
) -> (Vector3<f64>, usize, Option<Vector3<f64>>) {
    match layout {
        Layout::SingleRegion => {
            let p = Vector3::new(
                rng.random_range(-4.0..4.0),
                rng.random_range(-2.5..2.5),
                rng.random_range(-4.0..4.0),
            );
            (p, quadrant(&p), None)
        }
        Layout::GridOfRooms { rooms } => {
            let room = l % rooms;
            let (x0, z0) = room_origin(room, rooms, spacing);
            let along = rng.random_range(0.0..ROOM_SIZE);
            let y = rng.random_range(0.2..ROOM_HEIGHT - 0.2);
            let (p, n) = match rng.random_range(0..4) {
                0 => (Vector3::new(x0, y, z0 + along), Vector3::x()),
                1 => (Vector3::new(x0 + ROOM_SIZE, y, z0 + along), -Vector3::x()),
                2 => (Vector3::new(x0 + along, y, z0), Vector3::z()),
                _ => (Vector3::new(x0 + along, y, z0 + ROOM_SIZE), -Vector3::z()),
            };
            (p, room, Some(n))
        }
        Layout::StreetLoop => {
            let r = street_radius(n_cameras);
            let phi = rng.random_range(0.0..2.0 * PI);
            let radial = Vector3::new(phi.cos(), 0.0, phi.sin());
            let (rad, n) = if rng.random_bool(0.5) {
                (r - STREET_HALF_WIDTH, radial)
            } else {
                (r + STREET_HALF_WIDTH, -radial)
            };
            let p = Vector3::new(rad * phi.cos(), rng.random_range(0.0..8.0), rad * phi.sin());
            (p, street_segment(phi), Some(n))
        }
    }
}

/// Turns a share of landmarks into descriptor-aliased groups whose members
/// come from pairwise distinct regions, then renumbers group ids densely.
fn assign_duplicates(scene: &mut SyntheticScene, rng: &mut ChaCha8Rng) -> Result<(), SceneError> {
    let n = scene.landmarks.len();
    let amb = scene.ambiguity;
    let target = (amb.duplicate_fraction * n as f64).round() as usize;
    let groups = target / amb.group_size;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut used = vec![false; n];
    let mut membership: Vec<Option<usize>> = vec![None; n];

    for g in 0..groups {
        let mut members: Vec<usize> = Vec::with_capacity(amb.group_size);
        for &l in &order {
            if members.len() == amb.group_size {
                break;
            }
            if used[l] {
                continue;
            }
            let region = scene.landmarks[l].region;
            if members.iter().any(|&m| scene.landmarks[m].region == region) {
                continue;
            }
            members.push(l);
        }
        if members.len() < amb.group_size {
            return Err(SceneError::InvalidParameters(format!(
                "cannot form {groups} duplicate groups of size {} from distinct regions",
                amb.group_size
            )));
        }
        let source = scene.landmarks[members[0]].descriptor.clone();
        for &m in &members {
            used[m] = true;
            membership[m] = Some(g);
            scene.landmarks[m].descriptor = source.clone();
        }
    }

    let mut dense: Vec<Option<usize>> = vec![None; groups];
    let mut next = 0;
    for l in 0..n {
        let id = match membership[l] {
            Some(g) => *dense[g].get_or_insert_with(|| {
                next += 1;
                next - 1
            }),
            None => {
                next += 1;
                next - 1
            }
        };
        scene.landmarks[l].group_id = id;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts() -> SceneOptions {
        SceneOptions {
            descriptor_dim: 8,
            ..Default::default()
        }
    }

    fn amb(frac: f64, group_size: usize) -> AmbiguityConfig {
        AmbiguityConfig {
            duplicate_fraction: frac,
            group_size,
            descriptor_noise_sigma: 0.0,
        }
    }

    #[test]
    fn every_landmark_seen_three_times() {
        for (layout, n) in [
            (Layout::SingleRegion, 24),
            (Layout::GridOfRooms { rooms: 4 }, 48),
            (Layout::StreetLoop, 24),
        ] {
            let s = generate_scene(layout, 80, n, &amb(0.0, 2), &opts(), 5).unwrap();
            for l in 0..s.landmarks.len() {
                let views = (0..s.cameras.len()).filter(|&c| s.is_visible(c, l)).count();
                assert!(views >= 3, "{layout:?} landmark {l} seen {views} times");
            }
            let idx: Vec<usize> = s.cameras.iter().map(|c| c.image_index).collect();
            assert_eq!(idx, (0..n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn no_duplicates_means_singleton_groups() {
        let s = generate_scene(Layout::SingleRegion, 50, 10, &amb(0.0, 2), &opts(), 1).unwrap();
        let mut ids: Vec<usize> = s.landmarks.iter().map(|l| l.group_id).collect();
        ids.sort();
        assert_eq!(ids, (0..50).collect::<Vec<_>>());
        assert_eq!(s.ambiguous_group_count(), 0);
    }

    #[test]
    fn half_duplicates_in_pairs() {
        let s = generate_scene(Layout::StreetLoop, 100, 30, &amb(0.5, 2), &opts(), 2).unwrap();
        assert_eq!(s.ambiguous_group_count(), 50 / 2);
        for a in &s.landmarks {
            for b in &s.landmarks {
                if !std::ptr::eq(a, b) && a.group_id == b.group_id {
                    assert_ne!(a.region, b.region);
                    assert_eq!(a.descriptor, b.descriptor);
                }
            }
        }
    }

    #[test]
    fn nineteen_rooms_are_disjoint_cells() {
        let s = generate_scene(
            Layout::GridOfRooms { rooms: 19 },
            190,
            152,
            &amb(0.0, 2),
            &opts(),
            3,
        )
        .unwrap();
        let mut occupied = std::collections::BTreeSet::new();
        for cam in &s.cameras {
            let c = cam.pose.center();
            let cell = (
                (c.x / ROOM_SIZE).floor() as i64,
                (c.z / ROOM_SIZE).floor() as i64,
            );
            let (x0, z0) = room_origin(cam.region, 19, ROOM_SIZE);
            assert_eq!(cell, ((x0 / ROOM_SIZE) as i64, (z0 / ROOM_SIZE) as i64));
            occupied.insert(cell);
        }
        assert_eq!(occupied.len(), 19);
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_scene(Layout::StreetLoop, 40, 16, &amb(0.3, 2), &opts(), 11).unwrap();
        let b = generate_scene(Layout::StreetLoop, 40, 16, &amb(0.3, 2), &opts(), 11).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(Layout::StreetLoop, 40, 16, &amb(0.3, 2), &opts(), 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(generate_scene(Layout::SingleRegion, 5, 10, &amb(0.0, 2), &opts(), 0).is_err());
        assert!(generate_scene(Layout::SingleRegion, 20, 1, &amb(0.0, 2), &opts(), 0).is_err());
        assert!(generate_scene(Layout::SingleRegion, 20, 5, &amb(1.5, 2), &opts(), 0).is_err());
    }

    #[test]
    fn unreachable_layout_is_infeasible() {
        // two rooms but a single camera per room can never give three views
        let r = generate_scene(
            Layout::GridOfRooms { rooms: 2 },
            10,
            2,
            &amb(0.0, 2),
            &opts(),
            0,
        );
        assert!(matches!(r, Err(SceneError::InfeasibleLayout { .. })));
    }
}
