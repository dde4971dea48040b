use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{covisibility_matrix, SceneError, SyntheticScene};
use crate::encodings::{angular_distance, norm, GlobalEncoding};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GlobalFitConfig {
    pub dim: usize,
    /// Passes over all anchor images.
    pub iterations: usize,
    pub margin: f64,
    /// Pairs sharing at least this many landmarks are positives.
    pub min_positive_covis: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for GlobalFitConfig {
    fn default() -> Self {
        Self {
            dim: 256,
            iterations: 200,
            margin: 0.1,
            min_positive_covis: 5,
            learning_rate: 0.05,
            seed: 0,
        }
    }
}

/// Fits one unit embedding per image with default fitting knobs.
pub fn simulate_global_encoding(
    scene: &SyntheticScene,
    dim: usize,
    fit_iterations: usize,
    seed: u64,
) -> Result<Vec<GlobalEncoding>, SceneError> {
    simulate_global_encoding_with(
        scene,
        &GlobalFitConfig {
            dim,
            iterations: fit_iterations,
            seed,
            ..Default::default()
        },
    )
}

/// Stochastic projected gradient descent on the triplet margin loss.
/// Positives share at least `min_positive_covis` landmarks with the anchor,
/// negatives share none. Anchors without negatives are only pulled toward a
/// positive. Vectors are projected back onto the sphere after every step.
/// The result is indexed by image index.
pub fn simulate_global_encoding_with(
    scene: &SyntheticScene,
    cfg: &GlobalFitConfig,
) -> Result<Vec<GlobalEncoding>, SceneError> {
    if cfg.dim < 8 {
        return Err(SceneError::InvalidParameters(
            "global encoding dimension must be at least 8".into(),
        ));
    }
    let n = scene.cameras.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut emb: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            GlobalEncoding::random(cfg.dim, &mut rng)
                .as_slice()
                .to_vec()
        })
        .collect();

    let covis = covisibility_matrix(scene);
    let positives: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| j != i && covis[i][j] >= cfg.min_positive_covis)
                .collect()
        })
        .collect();
    let negatives: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| covis[i][j] == 0).collect())
        .collect();

    let lr = cfg.learning_rate;
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..cfg.iterations {
        order.shuffle(&mut rng);
        for &q in &order {
            if positives[q].is_empty() {
                continue;
            }
            let p = positives[q][rng.random_range(0..positives[q].len())];
            let neg = (!negatives[q].is_empty())
                .then(|| negatives[q][rng.random_range(0..negatives[q].len())]);
            let d_qp = sq_dist(&emb[q], &emb[p]);
            match neg {
                Some(nn) => {
                    let d_qn = sq_dist(&emb[q], &emb[nn]);
                    if d_qp - d_qn + cfg.margin <= 0.0 {
                        continue;
                    }
                    // ∂/∂q = 2(n − p), ∂/∂p = 2(p − q), ∂/∂n = 2(q − n)
                    let (eq, ep, en) = (emb[q].clone(), emb[p].clone(), emb[nn].clone());
                    for d in 0..cfg.dim {
                        emb[q][d] -= lr * 2.0 * (en[d] - ep[d]);
                        emb[p][d] -= lr * 2.0 * (ep[d] - eq[d]);
                        emb[nn][d] -= lr * 2.0 * (eq[d] - en[d]);
                    }
                    normalize(&mut emb[nn]);
                }
                None => {
                    let (eq, ep) = (emb[q].clone(), emb[p].clone());
                    for d in 0..cfg.dim {
                        emb[q][d] -= lr * 2.0 * (eq[d] - ep[d]);
                        emb[p][d] -= lr * 2.0 * (ep[d] - eq[d]);
                    }
                }
            }
            normalize(&mut emb[q]);
            normalize(&mut emb[p]);
        }
    }

    let out: Vec<GlobalEncoding> = emb
        .into_iter()
        .map(|v| GlobalEncoding::from_vec(v).expect("embedding stays on the sphere"))
        .collect();

    let (mut cv, mut nc) = ((0.0, 0usize), (0.0, 0usize));
    for i in 0..n {
        for j in i + 1..n {
            let d = angular_distance(&out[i], &out[j]);
            if covis[i][j] >= cfg.min_positive_covis {
                cv = (cv.0 + d, cv.1 + 1);
            } else if covis[i][j] == 0 {
                nc = (nc.0 + d, nc.1 + 1);
            }
        }
    }
    if cv.1 > 0 && nc.1 > 0 {
        let (a, b) = (cv.0 / cv.1 as f64, nc.0 / nc.1 as f64);
        if !(a < b) {
            return Err(SceneError::FitFailure {
                covisible_deg: a,
                other_deg: b,
            });
        }
    }
    Ok(out)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn normalize(v: &mut [f64]) {
    let n = norm(v);
    v.iter_mut().for_each(|x| *x /= n);
}
