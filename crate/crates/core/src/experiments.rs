//! End-to-end runs shared by the command line and the acceptance suite:
//! simulate a scene, train one global-encoding variant, evaluate it on
//! training and held-out cameras.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{ConfigError, ExperimentConfig};
use crate::covis_analysis::{
    compute_pair_stats, covis_rate_given_distance, curve_trend, distance_histogram_given_covis,
    scaled_threshold, Bin, Histogram, PairStats,
};
use crate::encodings::{
    cluster_encode, fit_encoding_clusters, kmeans_pp, EncodingError, GlobalEncoding,
};
use crate::localizer::{evaluate, EvalReport, LocalizationStatus, TestFrame, Threshold};
use crate::regressor::{
    fill_buffer, DecoderParams, RegressorError, SceneRegressor, TraceRow, TrainConfig, Trainer,
    TrainingBuffer,
};
use crate::scene_sim::{
    generate_scene, render_observations, simulate_global_encoding_with, SceneError, SceneFile,
    SyntheticScene,
};
use crate::toy2d::{
    build_toy2d, center_coverage, density_peak, prior_offset_scale, sample_decoder_prior,
    train_toy2d,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Regressor(#[from] RegressorError),
    #[error(transparent)]
    Encoding(#[from] EncodingError),
    #[error(transparent)]
    Covis(#[from] crate::covis_analysis::CovisError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Incompatible(String),
}

impl ExperimentError {
    /// 2 for configuration problems, 3 for numerical failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Scene(SceneError::InvalidParameters(_)) => 2,
            Self::Regressor(RegressorError::InvalidConfig(_)) => 2,
            Self::Scene(SceneError::FitFailure { .. } | SceneError::InfeasibleLayout { .. }) => 3,
            Self::Regressor(
                RegressorError::Diverged { .. } | RegressorError::NonFiniteGradient,
            ) => 3,
            Self::Incompatible(_) | Self::Regressor(RegressorError::DimensionMismatch { .. }) => 2,
            _ => 1,
        }
    }
}

/// Generates the configured scene and fits its global encodings.
pub fn simulate(cfg: &ExperimentConfig) -> Result<SceneFile, ExperimentError> {
    let s = &cfg.scene;
    let scene = generate_scene(
        s.layout,
        s.landmarks,
        s.cameras,
        &s.ambiguity,
        &s.options,
        cfg.seed,
    )?;
    let encodings = simulate_global_encoding_with(&scene, &cfg.fit_config())?;
    Ok(SceneFile::new(scene, Some(encodings)))
}

/// What the regressor sees as its global input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlobalVariant {
    /// Local encodings only.
    NoGlobal,
    /// The fitted encoding, concatenated as is.
    NaiveConcat,
    /// The nearest of K spherical k-means centers fitted on training images.
    Clusters(usize),
    /// The fitted encoding with fresh Gaussian diffusion at every step.
    Diffusion,
}

impl GlobalVariant {
    pub fn label(&self) -> String {
        match self {
            Self::NoGlobal => "no_global".into(),
            Self::NaiveConcat => "naive_concat".into(),
            Self::Clusters(k) => format!("clusters_{k}"),
            Self::Diffusion => "diffusion".into(),
        }
    }

    pub fn all(cluster_ks: &[usize], include_no_global: bool) -> Vec<Self> {
        let mut v = Vec::new();
        if include_no_global {
            v.push(Self::NoGlobal);
        }
        v.push(Self::NaiveConcat);
        v.extend(cluster_ks.iter().map(|&k| Self::Clusters(k)));
        v.push(Self::Diffusion);
        v
    }
}

/// K-means++ over the training camera centers; `k` is capped at the number
/// of training cameras.
pub fn camera_decoder(
    scene: &SyntheticScene,
    train_cams: &[usize],
    k: usize,
    seed: u64,
) -> Result<DecoderParams, ExperimentError> {
    let centers: Vec<_> = train_cams
        .iter()
        .map(|&c| scene.cameras[c].pose.center())
        .collect();
    let k = k.clamp(1, centers.len().max(1));
    let model = kmeans_pp(&centers, k, 100, seed)?;
    Ok(DecoderParams::with_defaults(model.centers)?)
}

/// Global encodings per camera as seen by `variant`, the diffusion sigma to
/// train with, and the input width of the global part.
pub fn variant_inputs(
    variant: GlobalVariant,
    encodings: &[GlobalEncoding],
    train_cams: &[usize],
    sigma: f64,
    seed: u64,
) -> Result<(Vec<GlobalEncoding>, f64, usize), ExperimentError> {
    let dim = encodings.first().map_or(0, |g| g.dim());
    Ok(match variant {
        GlobalVariant::NoGlobal => (encodings.to_vec(), 0.0, 0),
        GlobalVariant::NaiveConcat => (encodings.to_vec(), 0.0, dim),
        GlobalVariant::Diffusion => (encodings.to_vec(), sigma, dim),
        GlobalVariant::Clusters(k) => {
            let train: Vec<GlobalEncoding> =
                train_cams.iter().map(|&c| encodings[c].clone()).collect();
            let k = k.clamp(1, train.len().max(1));
            let model = fit_encoding_clusters(&train, k, 100, seed)?;
            let mapped = encodings
                .iter()
                .map(|g| cluster_encode(g, &model))
                .collect::<Result<Vec<_>, _>>()?;
            (mapped, 0.0, dim)
        }
    })
}

/// One query per camera, rendered with a different subsample than the
/// training buffer.
pub fn frames_for(
    scene: &SyntheticScene,
    globals: &[GlobalEncoding],
    cams: &[usize],
    samples_per_image: usize,
    seed: u64,
) -> Vec<TestFrame> {
    cams.iter()
        .map(|&c| TestFrame {
            observations: render_observations(
                scene,
                c,
                samples_per_image,
                seed.wrapping_add(0x5eed),
            ),
            global: globals[c].clone(),
            intrinsics: scene.cameras[c].intrinsics,
            gt_pose: Some(scene.cameras[c].pose),
        })
        .collect()
}

/// Everything a variant needs besides the network: per-camera global
/// inputs, the split, and the diffusion sigma.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub globals: Vec<GlobalEncoding>,
    pub sigma: f64,
    pub global_dim: usize,
    pub train_cams: Vec<usize>,
    pub test_cams: Vec<usize>,
}

pub fn prepare(
    cfg: &ExperimentConfig,
    scene_file: &SceneFile,
    variant: GlobalVariant,
) -> Result<Prepared, ExperimentError> {
    let encodings = scene_file.encodings.as_ref().ok_or_else(|| {
        ExperimentError::Incompatible("scene file has no global encodings".into())
    })?;
    let (train_cams, test_cams) = cfg.split(&scene_file.scene);
    let (globals, sigma, global_dim) =
        variant_inputs(variant, encodings, &train_cams, cfg.train.sigma, cfg.seed)?;
    Ok(Prepared {
        globals,
        sigma,
        global_dim,
        train_cams,
        test_cams,
    })
}

pub fn training_buffer(
    cfg: &ExperimentConfig,
    scene: &SyntheticScene,
    p: &Prepared,
) -> Result<TrainingBuffer, ExperimentError> {
    Ok(fill_buffer(
        scene,
        &p.globals,
        &p.train_cams,
        cfg.scene.samples_per_image,
        cfg.seed,
    )?)
}

/// A freshly initialized model and optimizer state.
pub fn new_trainer(
    cfg: &ExperimentConfig,
    scene: &SyntheticScene,
    p: &Prepared,
) -> Result<Trainer, ExperimentError> {
    let decoder = camera_decoder(scene, &p.train_cams, cfg.head.clusters, cfg.seed)?;
    let model = SceneRegressor::new(
        scene.options.descriptor_dim,
        p.global_dim,
        cfg.head.hidden_width,
        cfg.head.residual_blocks,
        decoder,
        cfg.seed,
    );
    let train = TrainConfig {
        sigma: p.sigma,
        ..cfg.train_config()
    };
    Ok(Trainer::new(model, train, cfg.loss)?)
}

/// Rejects a model whose input widths do not match the scene and variant.
pub fn check_compatible(
    model: &SceneRegressor,
    scene: &SyntheticScene,
    p: &Prepared,
) -> Result<(), ExperimentError> {
    for (expected, got) in [
        (scene.options.descriptor_dim, model.local_dim),
        (p.global_dim, model.global_dim),
    ] {
        if expected != got {
            return Err(RegressorError::DimensionMismatch { expected, got }.into());
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: SceneRegressor,
    pub trace: Vec<TraceRow>,
    pub buffer: TrainingBuffer,
}

/// Fills the buffer from the training cameras and runs the optimizer.
pub fn train_on(
    cfg: &ExperimentConfig,
    scene: &SyntheticScene,
    p: &Prepared,
) -> Result<TrainedModel, ExperimentError> {
    let buffer = training_buffer(cfg, scene, p)?;
    let mut trainer = new_trainer(cfg, scene, p)?;
    trainer.run(&buffer)?;
    let trace = trainer.trace().to_vec();
    Ok(TrainedModel {
        model: trainer.model,
        trace,
        buffer,
    })
}

/// Localizes every camera of `cams` with `model`.
pub fn evaluate_cameras(
    cfg: &ExperimentConfig,
    scene: &SyntheticScene,
    p: &Prepared,
    model: &SceneRegressor,
    cams: &[usize],
) -> Result<EvalReport, ExperimentError> {
    let frames = frames_for(
        scene,
        &p.globals,
        cams,
        cfg.scene.samples_per_image,
        cfg.seed,
    );
    Ok(evaluate(model, &frames, &cfg.eval_config())?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantOutcome {
    pub variant: GlobalVariant,
    pub seed: u64,
    pub train: EvalReport,
    pub heldout: EvalReport,
}

/// Trains `variant` on the training cameras of `scene_file` and evaluates
/// it on both splits.
pub fn run_variant(
    cfg: &ExperimentConfig,
    scene_file: &SceneFile,
    variant: GlobalVariant,
) -> Result<VariantOutcome, ExperimentError> {
    let scene = &scene_file.scene;
    let p = prepare(cfg, scene_file, variant)?;
    let trained = train_on(cfg, scene, &p)?;
    Ok(VariantOutcome {
        variant,
        seed: cfg.seed,
        train: evaluate_cameras(cfg, scene, &p, &trained.model, &p.train_cams)?,
        heldout: evaluate_cameras(cfg, scene, &p, &trained.model, &p.test_cams)?,
    })
}

/// Every variant for every configured seed offset; the scene is regenerated
/// per seed and shared by all variants of that seed.
pub fn run_ablation(cfg: &ExperimentConfig) -> Result<Vec<VariantOutcome>, ExperimentError> {
    let variants = GlobalVariant::all(&cfg.ablation.cluster_ks, cfg.ablation.include_no_global);
    let mut out = Vec::new();
    for &offset in &cfg.ablation.seeds {
        let seeded = cfg.clone().with_seed(cfg.seed.wrapping_add(offset));
        let scene = simulate(&seeded)?;
        for &v in &variants {
            out.push(run_variant(&seeded, &scene, v)?);
        }
    }
    Ok(out)
}

pub fn ablation_csv(rows: &[VariantOutcome]) -> String {
    let mut s = String::from(
        "variant,seed,heldout_median_translation_m,heldout_median_rotation_deg,train_median_translation_m,train_median_rotation_deg,heldout_failed,heldout_frames\n",
    );
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.variant.label(),
            r.seed,
            r.heldout.median_translation_m,
            r.heldout.median_rotation_deg,
            r.train.median_translation_m,
            r.train.median_rotation_deg,
            r.heldout.failure_count(),
            r.heldout.per_frame.len()
        ));
    }
    s
}

/// Success rate per scene region for the frames of `cams` (in report
/// order). Regions with no frames are omitted.
pub fn per_region_success(
    scene: &SyntheticScene,
    cams: &[usize],
    report: &EvalReport,
    threshold: Threshold,
) -> BTreeMap<usize, (f64, usize)> {
    let mut acc: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (&c, r) in cams.iter().zip(&report.per_frame) {
        let (t, a) = r.errors();
        let ok = r.status == LocalizationStatus::Ok
            && t <= threshold.translation_m
            && a <= threshold.rotation_deg;
        let e = acc.entry(scene.cameras[c].region).or_default();
        e.0 += usize::from(ok);
        e.1 += 1;
    }
    acc.into_iter()
        .map(|(region, (hit, n))| (region, (hit as f64 / n as f64, n)))
        .collect()
}

/// Distance statistics at one co-visibility threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovisLevel {
    /// Threshold as configured (reference scale).
    pub nominal: usize,
    /// Threshold scaled to this scene's landmark count.
    pub threshold: usize,
    pub covisible: Histogram,
    pub other: Histogram,
    pub rate_curve: Vec<Bin>,
    pub spearman: Option<f64>,
}

impl CovisLevel {
    /// Co-visible pairs are closer on average and the rate curve falls.
    pub fn passes(&self, max_spearman: f64) -> bool {
        self.covisible.mean_deg < self.other.mean_deg
            && self.spearman.is_some_and(|r| r < max_spearman)
    }
}

pub fn covis_study(
    cfg: &ExperimentConfig,
    scene_file: &SceneFile,
) -> Result<(PairStats, Vec<CovisLevel>), ExperimentError> {
    let encodings = scene_file.encodings.as_ref().ok_or_else(|| {
        ExperimentError::Incompatible("scene file has no global encodings".into())
    })?;
    let scene = &scene_file.scene;
    let stats = compute_pair_stats(scene, encodings)?;
    let c = &cfg.covis;
    let levels = c
        .thresholds
        .iter()
        .map(|&nominal| {
            let threshold = scaled_threshold(nominal, scene.landmarks.len(), c.reference_landmarks);
            let (covisible, other) = distance_histogram_given_covis(&stats, threshold, c.bins)?;
            let rate_curve = covis_rate_given_distance(&stats, threshold, c.bins)?;
            let spearman = curve_trend(&rate_curve);
            Ok(CovisLevel {
                nominal,
                threshold,
                covisible,
                other,
                rate_curve,
                spearman,
            })
        })
        .collect::<Result<Vec<_>, ExperimentError>>()?;
    Ok((stats, levels))
}

/// `(seed, k, mae)` for k = 1 and k = tile count on every configured seed.
pub fn toy_study(cfg: &ExperimentConfig) -> Result<Vec<(u64, usize, f64)>, ExperimentError> {
    let t = &cfg.toy;
    let mut rows = Vec::new();
    for &offset in &t.seeds {
        let seed = cfg.seed.wrapping_add(offset);
        let data = build_toy2d(&t.data, seed)?;
        for k in [1, data.tiles.len()] {
            let train = TrainConfig { seed, ..t.train };
            rows.push((seed, k, train_toy2d(&data, k, &train, &t.head)?));
        }
    }
    Ok(rows)
}

/// Median MAE per k over seeds.
pub fn toy_medians(rows: &[(u64, usize, f64)]) -> BTreeMap<usize, f64> {
    let mut by_k: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for &(_, k, mae) in rows {
        by_k.entry(k).or_default().push(mae);
    }
    by_k.into_iter().map(|(k, v)| (k, median(v))).collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorOutcome {
    /// Median decoded offset length; the unit for both checks.
    pub offset_scale: f64,
    pub single_center: Vec<f64>,
    pub single_samples: Vec<Vec<f64>>,
    /// Distance from the k = 1 density peak to its center.
    pub peak_distance: f64,
    pub multi: DecoderParams,
    pub multi_samples: Vec<Vec<f64>>,
    /// Fraction of the k-center decoder's centers with a sample within two
    /// offset scales.
    pub coverage: f64,
}

impl PriorOutcome {
    pub fn passes(&self) -> bool {
        self.peak_distance <= self.offset_scale && self.coverage == 1.0
    }
}

/// Decodes standard normal raw outputs through a one-center decoder at the
/// origin and through `prior_clusters` centers spread uniformly over the
/// square of half-width `prior_spread`.
pub fn prior_study(cfg: &ExperimentConfig) -> Result<PriorOutcome, ExperimentError> {
    let t = &cfg.toy;
    let single = DecoderParams::with_defaults(vec![vec![0.0, 0.0]])?;
    let offset_scale = prior_offset_scale(&single, t.prior_samples, cfg.seed);
    let single_samples = sample_decoder_prior(&single, t.prior_samples, cfg.seed);
    let peak = density_peak(&single_samples, 50, 10).unwrap_or_else(|| vec![f64::INFINITY; 2]);
    let peak_distance = peak.iter().map(|v| v * v).sum::<f64>().sqrt();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let centers = (0..t.prior_clusters)
        .map(|_| {
            vec![
                rng.random_range(-t.prior_spread..=t.prior_spread),
                rng.random_range(-t.prior_spread..=t.prior_spread),
            ]
        })
        .collect();
    let multi = DecoderParams::with_defaults(centers)?;
    let multi_samples = sample_decoder_prior(&multi, t.prior_samples, cfg.seed);
    let coverage = center_coverage(&multi, &multi_samples, 2.0 * offset_scale);
    Ok(PriorOutcome {
        offset_scale,
        single_center: vec![0.0, 0.0],
        single_samples,
        peak_distance,
        multi,
        multi_samples,
        coverage,
    })
}
