use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{SceneError, SyntheticScene};
use crate::encodings::GlobalEncoding;

pub const SCENE_FORMAT_VERSION: u32 = 1;

/// On-disk container: a scene plus optional fitted global encodings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFile {
    pub format_version: u32,
    pub scene: SyntheticScene,
    pub encodings: Option<Vec<GlobalEncoding>>,
}

impl SceneFile {
    pub fn new(scene: SyntheticScene, encodings: Option<Vec<GlobalEncoding>>) -> Self {
        Self {
            format_version: SCENE_FORMAT_VERSION,
            scene,
            encodings,
        }
    }
}

/// Writes JSON; floats use shortest round-trip formatting so a reload is
/// bitwise identical.
pub fn save_scene(path: &Path, file: &SceneFile) -> Result<(), SceneError> {
    fs::write(path, serde_json::to_vec(file)?)?;
    Ok(())
}

pub fn load_scene(path: &Path) -> Result<SceneFile, SceneError> {
    let bytes = fs::read(path)?;
    let value: serde_json::Value = serde_json::from_slice(&bytes)?;
    let version = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .unwrap_or(0) as u32;
    if version != SCENE_FORMAT_VERSION {
        return Err(SceneError::UnsupportedVersion(version));
    }
    Ok(serde_json::from_slice(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene_sim::{
        generate_scene, simulate_global_encoding, AmbiguityConfig, Layout, SceneOptions,
    };

    #[test]
    fn round_trip_is_bitwise() {
        let opts = SceneOptions {
            descriptor_dim: 8,
            pixel_jitter_sigma: 0.7,
            ..Default::default()
        };
        let amb = AmbiguityConfig {
            duplicate_fraction: 0.3,
            group_size: 2,
            descriptor_noise_sigma: 0.05,
        };
        let s = generate_scene(Layout::GridOfRooms { rooms: 4 }, 40, 48, &amb, &opts, 17).unwrap();
        let enc = simulate_global_encoding(&s, 8, 20, 1).unwrap();
        let file = SceneFile::new(s, Some(enc));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scene.json");
        save_scene(&path, &file).unwrap();
        let back = load_scene(&path).unwrap();
        assert_eq!(back, file);
        // bitwise: float bit patterns survive
        for (a, b) in back.scene.landmarks.iter().zip(&file.scene.landmarks) {
            for d in 0..3 {
                assert_eq!(a.position[d].to_bits(), b.position[d].to_bits());
            }
        }
        save_scene(&dir.path().join("again.json"), &back).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(dir.path().join("again.json")).unwrap()
        );
    }

    #[test]
    fn wrong_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(&path, br#"{"format_version": 99}"#).unwrap();
        assert!(matches!(
            load_scene(&path),
            Err(SceneError::UnsupportedVersion(99))
        ));
    }
}
