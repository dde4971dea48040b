//! A 2D stand-in for the full pipeline: image tiles laid out on a grid,
//! patch encodings regressed directly to their global 2D position, used to
//! compare a single-center decoder against one center per tile.

use std::fmt::Write as _;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::regressor::{
    batch_step, decode_row, predict_rows, AdamW, DecoderParams, HeadConfig, RegressorError,
    RegressorHead, TrainConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    /// Number of tiles g.
    pub tiles: usize,
    pub samples_per_tile: usize,
    /// Tile extent in grid units (one unit is 100 px of a 640×480 image).
    pub tile_width: f64,
    pub tile_height: f64,
    /// Empty space between neighbouring tiles.
    pub gap: f64,
    pub encoding_dim: usize,
    /// Spatial frequency (cycles per tile) of the random encoding features.
    pub frequency: f64,
    /// Share of each encoding that is identical across tiles, in [0, 1].
    pub aliasing: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            tiles: 19,
            samples_per_tile: 256,
            tile_width: 6.4,
            tile_height: 4.8,
            gap: 1.6,
            encoding_dim: 32,
            frequency: 1.5,
            aliasing: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tile {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Tile {
    pub fn center(&self) -> [f64; 2] {
        [
            0.5 * (self.min[0] + self.max[0]),
            0.5 * (self.min[1] + self.max[1]),
        ]
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        (0..2).all(|d| p[d] >= self.min[d] && p[d] <= self.max[d])
    }

    pub fn overlaps(&self, other: &Tile) -> bool {
        (0..2).all(|d| self.min[d] < other.max[d] && other.min[d] < self.max[d])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToySample {
    pub encoding: Vec<f64>,
    pub target: [f64; 2],
    pub tile: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Toy2DDataset {
    pub tiles: Vec<Tile>,
    pub samples: Vec<ToySample>,
    pub cluster_centers: Vec<[f64; 2]>,
}

impl Toy2DDataset {
    /// Centroid of the tile centers.
    pub fn grid_center(&self) -> [f64; 2] {
        let n = self.cluster_centers.len() as f64;
        let s = self
            .cluster_centers
            .iter()
            .fold([0.0, 0.0], |a, c| [a[0] + c[0], a[1] + c[1]]);
        [s[0] / n, s[1] / n]
    }
}

/// Random cosine features of a tile-local position.
struct FeatureMap {
    freqs: Vec<[f64; 2]>,
    phases: Vec<f64>,
}

impl FeatureMap {
    fn new(dim: usize, frequency: f64, rng: &mut ChaCha8Rng) -> Self {
        let tau = std::f64::consts::TAU;
        Self {
            freqs: (0..dim)
                .map(|_| {
                    [
                        tau * frequency * rng.sample::<f64, _>(StandardNormal),
                        tau * frequency * rng.sample::<f64, _>(StandardNormal),
                    ]
                })
                .collect(),
            phases: (0..dim).map(|_| rng.random_range(0.0..tau)).collect(),
        }
    }

    fn eval(&self, uv: [f64; 2], weight: f64, out: &mut [f64]) {
        let scale = weight * 2f64.sqrt();
        for ((o, f), p) in out.iter_mut().zip(&self.freqs).zip(&self.phases) {
            *o += scale * (f[0] * uv[0] + f[1] * uv[1] + p).cos();
        }
    }
}

/// Tiles in row-major order on a grid with `ceil(√g)` columns; each tile
/// gets its own feature map, blended with a shared one by `aliasing`.
pub fn build_toy2d(cfg: &ToyConfig, seed: u64) -> Result<Toy2DDataset, RegressorError> {
    if cfg.tiles == 0 || cfg.samples_per_tile == 0 || cfg.encoding_dim == 0 {
        return Err(RegressorError::InvalidConfig(
            "tiles, samples_per_tile and encoding_dim must be positive".into(),
        ));
    }
    if !(0.0..=1.0).contains(&cfg.aliasing)
        || cfg.tile_width <= 0.0
        || cfg.tile_height <= 0.0
        || cfg.gap < 0.0
    {
        return Err(RegressorError::InvalidConfig(
            "invalid tile geometry or aliasing".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cols = (cfg.tiles as f64).sqrt().ceil() as usize;
    let tiles: Vec<Tile> = (0..cfg.tiles)
        .map(|t| {
            let (r, c) = (t / cols, t % cols);
            let min = [
                c as f64 * (cfg.tile_width + cfg.gap),
                r as f64 * (cfg.tile_height + cfg.gap),
            ];
            Tile {
                min,
                max: [min[0] + cfg.tile_width, min[1] + cfg.tile_height],
            }
        })
        .collect();
    let shared = FeatureMap::new(cfg.encoding_dim, cfg.frequency, &mut rng);
    let mut samples = Vec::with_capacity(cfg.tiles * cfg.samples_per_tile);
    for (t, tile) in tiles.iter().enumerate() {
        let own = FeatureMap::new(cfg.encoding_dim, cfg.frequency, &mut rng);
        for _ in 0..cfg.samples_per_tile {
            let uv = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
            let mut encoding = vec![0.0; cfg.encoding_dim];
            own.eval(uv, (1.0 - cfg.aliasing).sqrt(), &mut encoding);
            shared.eval(uv, cfg.aliasing.sqrt(), &mut encoding);
            samples.push(ToySample {
                encoding,
                target: [
                    tile.min[0] + uv[0] * cfg.tile_width,
                    tile.min[1] + uv[1] * cfg.tile_height,
                ],
                tile: t,
            });
        }
    }
    let cluster_centers = tiles.iter().map(Tile::center).collect();
    Ok(Toy2DDataset {
        tiles,
        samples,
        cluster_centers,
    })
}

/// Head shape for the toy regressor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyHead {
    pub hidden_width: usize,
    pub residual_blocks: usize,
}

impl Default for ToyHead {
    fn default() -> Self {
        Self {
            hidden_width: 64,
            residual_blocks: 1,
        }
    }
}

/// The 2D decoder for `k = 1` (grid centroid) or `k = g` (tile centers).
pub fn toy_decoder(data: &Toy2DDataset, k: usize) -> Result<DecoderParams, RegressorError> {
    let g = data.cluster_centers.len();
    let centers: Vec<Vec<f64>> = if k == 1 {
        vec![data.grid_center().to_vec()]
    } else if k == g {
        data.cluster_centers.iter().map(|c| c.to_vec()).collect()
    } else {
        return Err(RegressorError::InvalidConfig(format!(
            "k must be 1 or {g}, got {k}"
        )));
    };
    DecoderParams::with_defaults(centers)
}

fn sign0(v: f64) -> f64 {
    if v == 0.0 {
        0.0
    } else {
        v.signum()
    }
}

/// Trains under direct L1 supervision and returns the mean absolute
/// coordinate error over the training samples, in grid units.
pub fn train_toy2d(
    data: &Toy2DDataset,
    k: usize,
    cfg: &TrainConfig,
    head: &ToyHead,
) -> Result<f64, RegressorError> {
    cfg.validate()?;
    if data.samples.is_empty() {
        return Err(RegressorError::InvalidConfig("empty toy dataset".into()));
    }
    let decoder = toy_decoder(data, k)?;
    let width = data.samples[0].encoding.len();
    let mut net = RegressorHead::new(
        HeadConfig {
            input_width: width,
            hidden_width: head.hidden_width,
            residual_blocks: head.residual_blocks,
            output_width: decoder.raw_width(),
        },
        cfg.seed,
    );
    let mut opt = AdamW::new(net.param_count(), cfg.weight_decay);
    let lr = cfg.lr_schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x746f_7932);
    let mut streak = 0;
    for it in 0..cfg.iterations {
        let idx: Vec<usize> = (0..cfg.batch_size)
            .map(|_| rng.random_range(0..data.samples.len()))
            .collect();
        let x = Array2::from_shape_fn((idx.len(), width), |(r, c)| {
            data.samples[idx[r]].encoding[c]
        });
        let mut grads = vec![0.0; net.param_count()];
        let loss = |r: usize, y: &[f64]| {
            let t = data.samples[idx[r]].target;
            let d = [y[0] - t[0], y[1] - t[1]];
            (
                d[0].abs() + d[1].abs(),
                vec![sign0(d[0]), sign0(d[1])],
                true,
            )
        };
        match batch_step(&net, &decoder, &x, loss, Some(&mut grads)) {
            Ok(s) if s.mean_loss.is_finite() => {
                streak = 0;
                opt.update(&mut net.params, &grads, lr.lr(it));
            }
            Ok(_) | Err(RegressorError::NonFiniteGradient) => {
                streak += 1;
                if streak >= 10 {
                    return Err(RegressorError::Diverged { iteration: it });
                }
            }
            Err(e) => return Err(e),
        }
    }
    let x = Array2::from_shape_fn((data.samples.len(), width), |(r, c)| {
        data.samples[r].encoding[c]
    });
    let pred = predict_rows(&net, &decoder, &x)?;
    let total: f64 = pred
        .iter()
        .zip(&data.samples)
        .map(|(y, s)| (y[0] - s.target[0]).abs() + (y[1] - s.target[1]).abs())
        .sum();
    Ok(total / (2 * data.samples.len()) as f64)
}

/// Decoded positions of `n` raw outputs whose logits, offset and scale
/// channels are i.i.d. standard normal.
pub fn sample_decoder_prior(decoder: &DecoderParams, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut row = vec![0.0; decoder.raw_width()];
    (0..n)
        .map(|_| {
            for v in row.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            decode_row(&row, decoder)
        })
        .collect()
}

/// Median length of the decoded offset `ḋ / w` under the same standard
/// normal draws as [`sample_decoder_prior`].
pub fn prior_offset_scale(decoder: &DecoderParams, n: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = decoder.k();
    let dim = decoder.dim();
    let mut row = vec![0.0; decoder.raw_width()];
    let mut norms: Vec<f64> = (0..n)
        .map(|_| {
            for v in row.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            let w = crate::regressor::scale_transform(row[k + dim], decoder);
            row[k..k + dim]
                .iter()
                .map(|d| (d / w) * (d / w))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    norms.sort_by(f64::total_cmp);
    norms.get(n / 2).copied().unwrap_or(0.0)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// The sample whose `m`-th nearest neighbour is closest, i.e. the peak of
/// a nearest-neighbour density estimate. Candidates are every `stride`-th
/// sample; neighbours are searched among all samples.
pub fn density_peak(samples: &[Vec<f64>], m: usize, stride: usize) -> Option<Vec<f64>> {
    let mut best: Option<(f64, usize)> = None;
    let mut d = Vec::with_capacity(samples.len());
    for i in (0..samples.len()).step_by(stride.max(1)) {
        d.clear();
        d.extend(samples.iter().map(|s| dist(s, &samples[i])));
        let m = m.min(d.len() - 1);
        let (_, r, _) = d.select_nth_unstable_by(m, f64::total_cmp);
        let r = *r;
        if best.is_none_or(|(b, _)| r < b) {
            best = Some((r, i));
        }
    }
    best.map(|(_, i)| samples[i].clone())
}

/// Fraction of centers with at least one sample within `radius`.
pub fn center_coverage(decoder: &DecoderParams, samples: &[Vec<f64>], radius: f64) -> f64 {
    let covered = decoder
        .centers
        .iter()
        .filter(|c| samples.iter().any(|s| dist(s, c) <= radius))
        .count();
    covered as f64 / decoder.k() as f64
}

/// `seed,k,mae` rows.
pub fn mae_csv(rows: &[(u64, usize, f64)]) -> String {
    let mut s = String::from("seed,k,mae\n");
    for (seed, k, mae) in rows {
        let _ = writeln!(s, "{seed},{k},{mae}");
    }
    s
}

/// `x y` per line (extra coordinates appended).
pub fn points_ascii(points: &[Vec<f64>]) -> String {
    let mut s = String::new();
    for p in points {
        let line: Vec<String> = p.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "{}", line.join(" "));
    }
    s
}
