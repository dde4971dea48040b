//! Planar regression over many separated tiles, decoded around one center
//! versus one center per tile, followed by samples from both decoder priors.

use scenereg::config::ExperimentConfig;
use scenereg::experiments::prior_study;
use scenereg::regressor::TrainConfig;
use scenereg::toy2d::{build_toy2d, train_toy2d};

fn main() {
    let cfg = ExperimentConfig::default();
    let data = build_toy2d(&cfg.toy.data, 0).expect("toy data");
    let train = TrainConfig {
        iterations: 400,
        ..cfg.toy.train
    };
    for k in [1, data.tiles.len()] {
        let mae = train_toy2d(&data, k, &train, &cfg.toy.head).expect("training");
        println!("k = {k:2}: MAE {mae:.3} grid units");
    }

    let prior = prior_study(&cfg).expect("prior");
    println!(
        "\nprior with one center peaks {:.2} from it; {} centers covered at {:.0}%",
        prior.peak_distance,
        prior.multi.k(),
        100.0 * prior.coverage
    );
}
