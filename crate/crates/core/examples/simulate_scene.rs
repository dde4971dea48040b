//! Generates a four-room scene with duplicated landmarks, fits global
//! encodings to it and prints how the encodings relate to co-visibility.

use scenereg::encodings::angular_distance;
use scenereg::scene_sim::{
    covisibility_count, generate_scene, simulate_global_encoding, AmbiguityConfig, Layout,
    SceneOptions,
};

fn main() {
    let ambiguity = AmbiguityConfig {
        duplicate_fraction: 0.3,
        ..AmbiguityConfig::default()
    };
    let scene = generate_scene(
        Layout::GridOfRooms { rooms: 4 },
        400,
        64,
        &ambiguity,
        &SceneOptions::default(),
        7,
    )
    .expect("valid scene parameters");
    println!(
        "{} landmarks, {} cameras, {} ambiguous groups, diameter {:.1} m",
        scene.landmarks.len(),
        scene.cameras.len(),
        scene.ambiguous_group_count(),
        scene.diameter()
    );

    let encodings = simulate_global_encoding(&scene, 64, 200, 7).expect("fit succeeds");
    let (mut near, mut far) = (Vec::new(), Vec::new());
    for i in 0..scene.cameras.len() {
        for j in i + 1..scene.cameras.len() {
            let d = angular_distance(&encodings[i], &encodings[j]);
            if covisibility_count(&scene, i, j) > 0 {
                near.push(d);
            } else {
                far.push(d);
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    println!(
        "co-visible pairs: {} at {:.1} deg mean",
        near.len(),
        mean(&near)
    );
    println!(
        "other pairs:      {} at {:.1} deg mean",
        far.len(),
        mean(&far)
    );
}
