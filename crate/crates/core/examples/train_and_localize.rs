//! Trains a scene regressor on a small two-room scene and localizes the
//! held-out cameras.

use scenereg::config::ExperimentConfig;
use scenereg::experiments::{evaluate_cameras, prepare, simulate, train_on};

const CONFIG: &str = r#"
[scene]
layout = { kind = "grid_of_rooms", rooms = 2 }
landmarks = 200
cameras = 32
samples_per_image = 256
[encoding]
dim = 32
[train]
iterations = 600
[loss]
tau_max = 300.0
"#;

fn main() {
    let cfg = ExperimentConfig::from_toml_str(CONFIG).expect("valid config");
    let file = simulate(&cfg).expect("scene");
    let p = prepare(&cfg, &file, cfg.variant).expect("split");
    let trained = train_on(&cfg, &file.scene, &p).expect("training");
    let last = trained.trace.last().expect("at least one iteration");
    println!(
        "{} training records, final loss {:.3}",
        trained.buffer.len(),
        last.mean_loss
    );

    let report =
        evaluate_cameras(&cfg, &file.scene, &p, &trained.model, &p.test_cams).expect("evaluation");
    print!("{}", report.summary());
}
