//! Experiment configuration, read from a single TOML file. Every section
//! has defaults and unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::experiments::GlobalVariant;
use crate::localizer::EvalConfig;
use crate::regressor::{LossSchedule, TrainConfig};
use crate::scene_sim::{AmbiguityConfig, GlobalFitConfig, Layout, SceneOptions, SyntheticScene};
use crate::toy2d::{ToyConfig, ToyHead};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSection {
    pub layout: Layout,
    pub landmarks: usize,
    pub cameras: usize,
    /// Within each region, every n-th camera in index order is held out for
    /// evaluation.
    pub heldout_every: usize,
    pub samples_per_image: usize,
    pub options: SceneOptions,
    pub ambiguity: AmbiguityConfig,
}

impl Default for SceneSection {
    fn default() -> Self {
        Self {
            layout: Layout::GridOfRooms { rooms: 4 },
            landmarks: 400,
            cameras: 64,
            heldout_every: 4,
            samples_per_image: 1024,
            options: SceneOptions {
                descriptor_dim: 64,
                ..SceneOptions::default()
            },
            ambiguity: AmbiguityConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadSection {
    pub hidden_width: usize,
    pub residual_blocks: usize,
    /// Decoder cluster count k over training camera positions.
    pub clusters: usize,
}

impl Default for HeadSection {
    fn default() -> Self {
        Self {
            hidden_width: 128,
            residual_blocks: 2,
            clusters: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    /// K values for the hard-clustered global encoding variants.
    pub cluster_ks: Vec<usize>,
    /// Offsets added to the top-level seed, one run per entry and variant.
    pub seeds: Vec<u64>,
    pub include_no_global: bool,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self {
            cluster_ks: vec![4, 32, 128],
            seeds: vec![0],
            include_no_global: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CovisSection {
    /// Co-visibility thresholds at the scale of `reference_landmarks`.
    pub thresholds: Vec<usize>,
    pub reference_landmarks: usize,
    pub bins: usize,
    /// Required rank correlation of the co-visibility rate curve.
    pub max_spearman: f64,
}

impl Default for CovisSection {
    fn default() -> Self {
        Self {
            thresholds: vec![15, 100],
            reference_landmarks: 2000,
            bins: 36,
            max_spearman: -0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToySection {
    pub data: ToyConfig,
    pub head: ToyHead,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub prior_samples: usize,
    /// Cluster count for the prior-sampling comparison.
    pub prior_clusters: usize,
    /// Prior-sampling centers are uniform in [−spread, spread]².
    pub prior_spread: f64,
}

impl Default for ToySection {
    fn default() -> Self {
        Self {
            data: ToyConfig::default(),
            head: ToyHead::default(),
            train: TrainConfig {
                batch_size: 256,
                iterations: 1000,
                sigma: 0.0,
                ..TrainConfig::default()
            },
            seeds: vec![0, 1, 2, 3, 4],
            prior_samples: 10_000,
            prior_clusters: 50,
            prior_spread: 5.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckSection {
    pub seeds: u64,
    pub tolerance: f64,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        Self {
            seeds: 20,
            tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReconSection {
    pub threshold_px: f64,
}

impl Default for ReconSection {
    fn default() -> Self {
        Self { threshold_px: 5.0 }
    }
}

/// The whole experiment. The top-level `seed` replaces the seeds inside
/// the `encoding`, `train` and `eval.ransac` sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Global input used by `train`, `evaluate` and `export-recon`.
    pub variant: GlobalVariant,
    pub scene: SceneSection,
    pub encoding: GlobalFitConfig,
    pub head: HeadSection,
    pub loss: LossSchedule,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub ablation: AblationSection,
    pub covis: CovisSection,
    pub toy: ToySection,
    pub gradcheck: GradcheckSection,
    pub recon: ReconSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            variant: GlobalVariant::Diffusion,
            scene: SceneSection::default(),
            encoding: GlobalFitConfig {
                dim: 64,
                ..GlobalFitConfig::default()
            },
            head: HeadSection::default(),
            loss: LossSchedule::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            ablation: AblationSection::default(),
            covis: CovisSection::default(),
            toy: ToySection::default(),
            gradcheck: GradcheckSection::default(),
            recon: ReconSection::default(),
        }
    }
}

impl ExperimentConfig {
    /// Keys missing from `text` keep the experiment defaults, including
    /// inside partially specified sections.
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let user: toml::Table = toml::from_str(text)?;
        let mut merged = toml::Table::try_from(Self::default()).expect("config serializes");
        merge(&mut merged, user);
        let cfg = Self::deserialize(toml::Value::Table(merged))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml_string().as_bytes()))
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        let s = &self.scene;
        if s.cameras < 2 || s.landmarks < 10 || s.samples_per_image == 0 {
            return bad(
                "scene needs >= 2 cameras, >= 10 landmarks and samples_per_image >= 1".into(),
            );
        }
        if s.heldout_every < 2 {
            return bad("scene.heldout_every must be at least 2".into());
        }
        s.ambiguity
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.head.hidden_width == 0 || self.head.clusters == 0 {
            return bad("head.hidden_width and head.clusters must be positive".into());
        }
        if self.encoding.dim == 0 {
            return bad("encoding.dim must be positive".into());
        }
        self.loss.validate().map_err(ConfigError::Invalid)?;
        self.train
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.toy
            .train
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.covis.bins < 2 {
            return bad("covis.bins must be at least 2".into());
        }
        if self.ablation.seeds.is_empty() || self.toy.seeds.is_empty() {
            return bad("seed lists must not be empty".into());
        }
        Ok(())
    }

    pub fn fit_config(&self) -> GlobalFitConfig {
        GlobalFitConfig {
            seed: self.seed,
            ..self.encoding
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        let mut e = self.eval.clone();
        e.ransac.rng_seed = self.seed;
        e
    }

    /// Training and held-out camera indices of `scene`.
    pub fn split(&self, scene: &SyntheticScene) -> (Vec<usize>, Vec<usize>) {
        let n = self.scene.heldout_every;
        let mut seen: BTreeMap<usize, usize> = BTreeMap::new();
        (0..scene.cameras.len()).partition(|&i| {
            let j = seen.entry(scene.cameras[i].region).or_default();
            *j += 1;
            !j.is_multiple_of(n)
        })
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(
            ExperimentConfig::from_toml_str("").unwrap(),
            ExperimentConfig::default()
        );
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 64);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = ExperimentConfig::from_toml_str("[train]\nbatch_sise = 3\n").unwrap_err();
        assert!(err.to_string().contains("batch_sise"), "{err}");
        let err = ExperimentConfig::from_toml_str("sed = 3\n").unwrap_err();
        assert!(err.to_string().contains("sed"), "{err}");
    }

    #[test]
    fn partial_sections_keep_experiment_defaults() {
        let cfg =
            ExperimentConfig::from_toml_str("[encoding]\nmargin = 0.5\n[toy.train]\nseed = 3\n")
                .unwrap();
        assert_eq!(cfg.encoding.dim, 64);
        assert_eq!(cfg.encoding.margin, 0.5);
        assert_eq!(cfg.toy.train.batch_size, 256);
        assert_eq!(cfg.toy.train.seed, 3);
    }

    #[test]
    fn nested_sections_parse() {
        let cfg = ExperimentConfig::from_toml_str(
            "seed = 9\n[scene]\nlayout = { kind = \"street_loop\" }\n[scene.ambiguity]\nduplicate_fraction = 0.3\n",
        )
        .unwrap();
        assert_eq!(cfg.scene.layout, Layout::StreetLoop);
        assert_eq!(cfg.scene.ambiguity.duplicate_fraction, 0.3);
        assert_eq!(cfg.train_config().seed, 9);
        assert_eq!(cfg.eval_config().ransac.rng_seed, 9);
        let cfg = ExperimentConfig::from_toml_str("variant = { clusters = 32 }\n").unwrap();
        assert_eq!(cfg.variant, GlobalVariant::Clusters(32));
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(ExperimentConfig::from_toml_str("[scene]\nheldout_every = 1\n").is_err());
        assert!(ExperimentConfig::from_toml_str("[train]\nbatch_size = 0\n").is_err());
        assert!(
            ExperimentConfig::from_toml_str("[scene.ambiguity]\nduplicate_fraction = 2.0\n")
                .is_err()
        );
    }

    #[test]
    fn split_is_disjoint_and_covers_every_region() {
        let cfg = ExperimentConfig::default();
        let s = &cfg.scene;
        let scene =
            crate::scene_sim::generate_scene(s.layout, 40, s.cameras, &s.ambiguity, &s.options, 0)
                .unwrap();
        let (train, test) = cfg.split(&scene);
        assert_eq!(train.len() + test.len(), s.cameras);
        assert_eq!(test.len(), s.cameras / s.heldout_every);
        assert!(test.iter().all(|t| !train.contains(t)));
        for &t in &test {
            let region = scene.cameras[t].region;
            assert!(train.iter().any(|&c| scene.cameras[c].region == region));
        }
    }
}
