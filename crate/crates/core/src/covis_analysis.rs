//! How global-encoding distance relates to co-visibility: distance
//! histograms split by co-visibility class, and the co-visibility rate as a
//! function of distance.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encodings::{angular_distance, GlobalEncoding};
use crate::scene_sim::{covisibility_matrix, SyntheticScene};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CovisError {
    #[error("{given} encodings for {images} images")]
    MissingEncodings { given: usize, images: usize },
    #[error("need at least 2 bins, got {0}")]
    TooFewBins(usize),
    #[error("the {0} class has no pairs")]
    EmptyClass(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairRow {
    pub image_i: usize,
    pub image_j: usize,
    pub covis_count: usize,
    pub angular_distance_deg: f64,
}

/// Every unordered image pair, ordered lexicographically by `(i, j)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairStats {
    pub rows: Vec<PairRow>,
}

pub fn compute_pair_stats(
    scene: &SyntheticScene,
    encodings: &[GlobalEncoding],
) -> Result<PairStats, CovisError> {
    let n = scene.cameras.len();
    if encodings.len() < n {
        return Err(CovisError::MissingEncodings {
            given: encodings.len(),
            images: n,
        });
    }
    let covis = covisibility_matrix(scene);
    let mut rows = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            rows.push(PairRow {
                image_i: i,
                image_j: j,
                covis_count: covis[i][j],
                angular_distance_deg: angular_distance(&encodings[i], &encodings[j]),
            });
        }
    }
    Ok(PairStats { rows })
}

/// Paper-scale co-visibility thresholds adapted to a scene with
/// `landmarks` points, relative to a `reference_landmarks` reconstruction.
pub fn scaled_threshold(n: usize, landmarks: usize, reference_landmarks: usize) -> usize {
    ((n as f64 * landmarks as f64 / reference_landmarks.max(1) as f64).round() as usize).max(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub low_deg: f64,
    pub high_deg: f64,
    /// Normalized mass for histograms; co-visible fraction for rate curves
    /// (`None` when the bin is empty).
    pub value: Option<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bins: Vec<Bin>,
    /// Mean of the raw distances in this class.
    pub mean_deg: f64,
    pub total: usize,
}

fn bin_index(d: f64, bins: usize) -> usize {
    ((d / 180.0 * bins as f64).floor() as usize).min(bins - 1)
}

fn bin_edges(b: usize, bins: usize) -> (f64, f64) {
    let w = 180.0 / bins as f64;
    (b as f64 * w, (b + 1) as f64 * w)
}

fn histogram(values: &[f64], bins: usize) -> Histogram {
    let mut counts = vec![0usize; bins];
    for &d in values {
        counts[bin_index(d, bins)] += 1;
    }
    let total = values.len();
    Histogram {
        bins: counts
            .iter()
            .enumerate()
            .map(|(b, &c)| {
                let (low_deg, high_deg) = bin_edges(b, bins);
                Bin {
                    low_deg,
                    high_deg,
                    value: Some(c as f64 / total as f64),
                    count: c,
                }
            })
            .collect(),
        mean_deg: values.iter().sum::<f64>() / total as f64,
        total,
    }
}

/// Distance histograms over [0, 180] for pairs with `covis ≥ n` (first) and
/// `covis < n` (second), each normalized to unit mass.
pub fn distance_histogram_given_covis(
    stats: &PairStats,
    n: usize,
    bins: usize,
) -> Result<(Histogram, Histogram), CovisError> {
    if bins < 2 {
        return Err(CovisError::TooFewBins(bins));
    }
    let (covis, other): (Vec<&PairRow>, Vec<&PairRow>) =
        stats.rows.iter().partition(|r| r.covis_count >= n);
    if covis.is_empty() {
        return Err(CovisError::EmptyClass("co-visible"));
    }
    if other.is_empty() {
        return Err(CovisError::EmptyClass("non-co-visible"));
    }
    let d = |rows: &[&PairRow]| {
        rows.iter()
            .map(|r| r.angular_distance_deg)
            .collect::<Vec<_>>()
    };
    Ok((histogram(&d(&covis), bins), histogram(&d(&other), bins)))
}

/// Fraction of pairs with `covis ≥ n` in each distance bin. Empty bins have
/// no value.
pub fn covis_rate_given_distance(
    stats: &PairStats,
    n: usize,
    bins: usize,
) -> Result<Vec<Bin>, CovisError> {
    if bins < 2 {
        return Err(CovisError::TooFewBins(bins));
    }
    let mut hits = vec![0usize; bins];
    let mut counts = vec![0usize; bins];
    for r in &stats.rows {
        let b = bin_index(r.angular_distance_deg, bins);
        counts[b] += 1;
        hits[b] += usize::from(r.covis_count >= n);
    }
    Ok((0..bins)
        .map(|b| {
            let (low_deg, high_deg) = bin_edges(b, bins);
            Bin {
                low_deg,
                high_deg,
                value: (counts[b] > 0).then(|| hits[b] as f64 / counts[b] as f64),
                count: counts[b],
            }
        })
        .collect())
}

/// Ranks with ties sharing their average rank (1-based).
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation (Pearson correlation of tie-averaged ranks).
/// `None` when either input is constant or shorter than 2.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Spearman correlation between bin centre and rate over populated bins.
pub fn curve_trend(curve: &[Bin]) -> Option<f64> {
    let (x, y): (Vec<f64>, Vec<f64>) = curve
        .iter()
        .filter_map(|b| b.value.map(|v| (0.5 * (b.low_deg + b.high_deg), v)))
        .unzip();
    spearman(&x, &y)
}

/// `bin_low_deg,bin_high_deg,value,count`; absent values are left empty.
pub fn bins_to_csv(bins: &[Bin]) -> String {
    let mut s = String::from("bin_low_deg,bin_high_deg,value,count\n");
    for b in bins {
        let v = b.value.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{},{},{},{}", b.low_deg, b.high_deg, v, b.count);
    }
    s
}

pub fn pair_stats_to_csv(stats: &PairStats) -> String {
    let mut s = String::from("image_i,image_j,covis_count,angular_distance_deg\n");
    for r in &stats.rows {
        let _ = writeln!(
            s,
            "{},{},{},{}",
            r.image_i, r.image_j, r.covis_count, r.angular_distance_deg
        );
    }
    s
}

pub fn write_bins_csv(path: &Path, bins: &[Bin]) -> std::io::Result<()> {
    std::fs::write(path, bins_to_csv(bins))
}
