use serde::{Deserialize, Serialize};

use super::RegressorError;

/// Cluster centers plus scale bounds for the homogeneous-offset decoder.
/// The dimension of the decoded position is the dimension of the centers
/// (3 for scenes, 2 for the planar toy).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderParams {
    pub centers: Vec<Vec<f64>>,
    pub s_min: f64,
    pub s_max: f64,
}

/// Head output split into its parts.
#[derive(Debug, Clone, PartialEq)]
pub struct RawOutput {
    pub logits: Vec<f64>,
    pub d_dot: Vec<f64>,
    pub w_hat: f64,
}

impl RawOutput {
    pub fn from_slice(row: &[f64], k: usize) -> Self {
        let dim = row.len() - k - 1;
        Self {
            logits: row[..k].to_vec(),
            d_dot: row[k..k + dim].to_vec(),
            w_hat: row[k + dim],
        }
    }
}

impl DecoderParams {
    pub const DEFAULT_S_MIN: f64 = 0.1;
    pub const DEFAULT_S_MAX: f64 = 100.0;

    pub fn new(centers: Vec<Vec<f64>>, s_min: f64, s_max: f64) -> Result<Self, RegressorError> {
        if centers.is_empty() {
            return Err(RegressorError::InvalidDecoder(
                "at least one center required".into(),
            ));
        }
        let dim = centers[0].len();
        if dim == 0 || centers.iter().any(|c| c.len() != dim) {
            return Err(RegressorError::InvalidDecoder(
                "centers must share a positive dimension".into(),
            ));
        }
        if !(s_min > 0.0 && s_min < s_max && s_max > 1.0) {
            return Err(RegressorError::InvalidDecoder(format!(
                "need 0 < s_min < s_max and s_max > 1, got {s_min}, {s_max}"
            )));
        }
        Ok(Self {
            centers,
            s_min,
            s_max,
        })
    }

    pub fn with_defaults(centers: Vec<Vec<f64>>) -> Result<Self, RegressorError> {
        Self::new(centers, Self::DEFAULT_S_MIN, Self::DEFAULT_S_MAX)
    }

    pub fn from_points3(centers: &[nalgebra::Vector3<f64>]) -> Result<Self, RegressorError> {
        Self::with_defaults(centers.iter().map(|c| vec![c.x, c.y, c.z]).collect())
    }

    pub fn k(&self) -> usize {
        self.centers.len()
    }

    pub fn dim(&self) -> usize {
        self.centers[0].len()
    }

    /// Width of the head output this decoder consumes: logits, offset, scale.
    pub fn raw_width(&self) -> usize {
        self.k() + self.dim() + 1
    }

    pub fn beta(&self) -> f64 {
        std::f64::consts::LN_2 / (1.0 - 1.0 / self.s_max)
    }
}

/// `ln((1 + e^z) / 2)`, i.e. softplus(z) − ln 2, evaluated without overflow
/// and exactly zero at `z = 0`.
fn centered_softplus(z: f64) -> f64 {
    z.max(0.0) + ((-z.abs()).exp_m1() / 2.0).ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `min(1/S_min, softplus(β ŵ)/β + 1/S_max)`. Written as
/// `1 + (softplus(β ŵ) − ln 2)/β`, which is the same expression because
/// `ln 2/β = 1 − 1/S_max`, and makes `w(0) = 1` hold exactly.
pub fn scale_transform(w_hat: f64, p: &DecoderParams) -> f64 {
    scale_with_grad(w_hat, p).0
}

/// Scale and its derivative with respect to ŵ (zero on the clamped branch).
pub(crate) fn scale_with_grad(w_hat: f64, p: &DecoderParams) -> (f64, f64) {
    let beta = p.beta();
    let z = beta * w_hat;
    let w = 1.0 + centered_softplus(z) / beta;
    let cap = 1.0 / p.s_min;
    if w >= cap {
        (cap, 0.0)
    } else {
        (w, sigmoid(z))
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// `ŷ = ḋ / w(ŵ) + Σ softmax(s)_i c_i`.
pub fn decode_position(raw: &RawOutput, p: &DecoderParams) -> Vec<f64> {
    let mut row = raw.logits.clone();
    row.extend_from_slice(&raw.d_dot);
    row.push(raw.w_hat);
    decode_row(&row, p)
}

/// Decodes one head output row laid out as `[logits | ḋ | ŵ]`.
pub fn decode_row(row: &[f64], p: &DecoderParams) -> Vec<f64> {
    let k = p.k();
    let dim = p.dim();
    let probs = softmax(&row[..k]);
    let (w, _) = scale_with_grad(row[k + dim], p);
    (0..dim)
        .map(|d| {
            row[k + d] / w
                + probs
                    .iter()
                    .zip(&p.centers)
                    .map(|(pi, c)| pi * c[d])
                    .sum::<f64>()
        })
        .collect()
}

/// Pulls dL/dŷ back to dL/d(row) for one output row.
pub(crate) fn decode_backward(row: &[f64], p: &DecoderParams, g_y: &[f64], g_row: &mut [f64]) {
    let k = p.k();
    let dim = p.dim();
    let probs = softmax(&row[..k]);
    let (w, dw) = scale_with_grad(row[k + dim], p);
    let base: Vec<f64> = (0..dim)
        .map(|d| probs.iter().zip(&p.centers).map(|(pi, c)| pi * c[d]).sum())
        .collect();
    for j in 0..k {
        let dot: f64 = (0..dim).map(|d| (p.centers[j][d] - base[d]) * g_y[d]).sum();
        g_row[j] = probs[j] * dot;
    }
    let mut off_dot_g = 0.0;
    for d in 0..dim {
        g_row[k + d] = g_y[d] / w;
        off_dot_g += row[k + d] * g_y[d];
    }
    g_row[k + dim] = -off_dot_g / (w * w) * dw;
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p1(c: Vec<f64>) -> DecoderParams {
        DecoderParams::with_defaults(vec![c]).unwrap()
    }

    #[test]
    fn scale_identity_at_zero() {
        for s_max in [2.0, 10.0, 100.0, 1e4] {
            let p = DecoderParams::new(vec![vec![0.0; 3]], 0.1, s_max).unwrap();
            assert_eq!(scale_transform(0.0, &p), 1.0);
        }
    }

    #[test]
    fn scale_limits() {
        let p = p1(vec![0.0; 3]);
        assert!((scale_transform(-1e6, &p) - 0.01).abs() < 1e-15);
        assert_eq!(scale_transform(1e6, &p), 10.0);
        assert_eq!(scale_with_grad(1e6, &p).1, 0.0);
    }

    #[test]
    fn scale_matches_direct_formula() {
        let p = p1(vec![0.0; 3]);
        let beta = p.beta();
        for w_hat in [-5.0, -0.3, 0.7, 2.0, 8.0] {
            let direct =
                (1.0 / p.s_min).min((1.0 + (beta * w_hat).exp()).ln() / beta + 1.0 / p.s_max);
            assert!((scale_transform(w_hat, &p) - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn single_center_zero_offset() {
        let p = p1(vec![1.0, -2.0, 3.0]);
        let raw = RawOutput {
            logits: vec![0.4],
            d_dot: vec![0.0; 3],
            w_hat: 0.3,
        };
        assert_eq!(decode_position(&raw, &p), vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn two_centers_midpoint() {
        let p = DecoderParams::with_defaults(vec![vec![0.0; 3], vec![10.0, 0.0, 0.0]]).unwrap();
        let raw = RawOutput {
            logits: vec![0.0, 0.0],
            d_dot: vec![0.0; 3],
            w_hat: 0.0,
        };
        assert_eq!(decode_position(&raw, &p), vec![5.0, 0.0, 0.0]);
    }

    #[test]
    fn unit_scale_offset() {
        let p = p1(vec![0.0; 3]);
        let raw = RawOutput {
            logits: vec![0.0],
            d_dot: vec![1.0, 0.0, 0.0],
            w_hat: 0.0,
        };
        assert_eq!(decode_position(&raw, &p), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(DecoderParams::new(vec![], 0.1, 100.0).is_err());
        assert!(DecoderParams::new(vec![vec![0.0; 3]], 10.0, 1.0).is_err());
        assert!(DecoderParams::new(vec![vec![0.0; 3], vec![0.0; 2]], 0.1, 100.0).is_err());
    }

    #[test]
    fn decode_backward_matches_finite_differences() {
        let p = DecoderParams::with_defaults(vec![
            vec![0.0, 1.0, 2.0],
            vec![-3.0, 0.5, 1.0],
            vec![4.0, 4.0, -1.0],
        ])
        .unwrap();
        let row = vec![0.2, -0.7, 1.1, 0.3, -1.2, 2.2, 0.4];
        let g_y = [0.3, -1.0, 0.7];
        let f = |r: &[f64]| {
            decode_row(r, &p)
                .iter()
                .zip(&g_y)
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let mut g = vec![0.0; row.len()];
        decode_backward(&row, &p, &g_y, &mut g);
        for i in 0..row.len() {
            let mut a = row.clone();
            a[i] += 1e-6;
            let mut b = row.clone();
            b[i] -= 1e-6;
            let num = (f(&a) - f(&b)) / 2e-6;
            assert!((num - g[i]).abs() < 1e-7, "{i}: {num} vs {}", g[i]);
        }
    }

    proptest! {
        #[test]
        fn k1_is_homogeneous_offset(c in prop::array::uniform3(-50.0f64..50.0), d in prop::array::uniform3(-20.0f64..20.0), w_hat in -10.0f64..10.0, s in -5.0f64..5.0) {
            let p = p1(c.to_vec());
            let y = decode_position(&RawOutput { logits: vec![s], d_dot: d.to_vec(), w_hat }, &p);
            let w = scale_transform(w_hat, &p);
            for i in 0..3 {
                prop_assert!(((y[i] - c[i]) - d[i] / w).abs() <= 1e-12 * (1.0 + c[i].abs()));
            }
        }

        #[test]
        fn scale_monotone_and_bounded(a in -30.0f64..30.0, b in -30.0f64..30.0) {
            let p = p1(vec![0.0; 3]);
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let (wl, wh) = (scale_transform(lo, &p), scale_transform(hi, &p));
            prop_assert!(wl <= wh);
            prop_assert!(wl > 1.0 / p.s_max && wh <= 1.0 / p.s_min);
        }

        #[test]
        fn softmax_is_a_distribution(logits in prop::collection::vec(-30.0f64..30.0, 1..8)) {
            let pr = softmax(&logits);
            prop_assert!(pr.iter().all(|&x| x > 0.0));
            prop_assert!((pr.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn base_point_in_convex_hull(logits in prop::collection::vec(-10.0f64..10.0, 3..=3), seed in 0u64..1000) {
            // barycentric check against a triangle of centers in the z = 0 plane
            let t = seed as f64;
            let centers = vec![vec![t.sin() * 5.0, 0.0, 0.0], vec![0.0, 4.0 + t.cos(), 0.0], vec![-3.0, -2.0, 0.0]];
            let p = DecoderParams::with_defaults(centers.clone()).unwrap();
            let y = decode_position(&RawOutput { logits: logits.clone(), d_dot: vec![0.0; 3], w_hat: 0.0 }, &p);
            let (a, b, c) = (&centers[0], &centers[1], &centers[2]);
            let det = (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]);
            let l1 = ((y[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (y[1] - a[1])) / det;
            let l2 = ((b[0] - a[0]) * (y[1] - a[1]) - (y[0] - a[0]) * (b[1] - a[1])) / det;
            let l0 = 1.0 - l1 - l2;
            for l in [l0, l1, l2] {
                prop_assert!(l >= -1e-12);
            }
        }
    }
}
