//! Histograms of encoding distance for co-visible and unrelated image pairs
//! on a street loop, and how the co-visibility rate falls with distance.

use scenereg::config::ExperimentConfig;
use scenereg::covis_analysis::bins_to_csv;
use scenereg::experiments::{covis_study, simulate};
use scenereg::scene_sim::Layout;

fn main() {
    let mut cfg = ExperimentConfig::default();
    cfg.scene.layout = Layout::StreetLoop;
    cfg.covis.bins = 12;
    let file = simulate(&cfg).expect("scene");
    let (stats, levels) = covis_study(&cfg, &file).expect("analysis");
    println!("{} image pairs", stats.rows.len());
    for l in &levels {
        println!(
            "\nthreshold {} shared landmarks: co-visible {:.1} deg, other {:.1} deg, rank correlation {:.3}",
            l.threshold,
            l.covisible.mean_deg,
            l.other.mean_deg,
            l.spearman.unwrap_or(f64::NAN)
        );
        print!("{}", bins_to_csv(&l.rate_curve));
    }
}
