use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    reprojection_batch, tau_schedule, AdamW, LossSchedule, OneCycle, RegressorError,
    ReprojectionTarget, SceneRegressor,
};
use crate::encodings::{diffuse_into, GlobalEncoding};
use crate::scene_sim::{
    render_observations, simulate_global_encoding, ObservationRecord, SceneError, SyntheticScene,
};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Consecutive non-finite iterations tolerated before giving up.
const DIVERGENCE_STREAK: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub iterations: usize,
    pub lr_start: f64,
    pub lr_peak: f64,
    pub lr_end: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    /// Diffusion noise std on the global encoding; 0 disables diffusion.
    pub sigma: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 512,
            iterations: 2000,
            lr_start: 2e-4,
            lr_peak: 5e-3,
            lr_end: 2e-8,
            warmup_fraction: 0.3,
            weight_decay: 0.01,
            sigma: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), RegressorError> {
        let bad = |m: &str| Err(RegressorError::InvalidConfig(m.into()));
        if self.batch_size == 0 || self.iterations == 0 {
            return bad("batch_size and iterations must be at least 1");
        }
        if !(self.lr_start > 0.0 && self.lr_peak > 0.0 && self.lr_end > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return bad("warmup_fraction must lie in [0, 1]");
        }
        if !(self.weight_decay >= 0.0 && self.sigma >= 0.0) {
            return bad("weight_decay and sigma must be non-negative");
        }
        Ok(())
    }

    pub fn lr_schedule(&self) -> OneCycle {
        OneCycle {
            start: self.lr_start,
            peak: self.lr_peak,
            end: self.lr_end,
            warmup_fraction: self.warmup_fraction,
            iterations: self.iterations,
        }
    }
}

/// Cached observations plus one global encoding per image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingBuffer {
    pub records: Vec<ObservationRecord>,
    pub global_table: BTreeMap<usize, GlobalEncoding>,
}

impl TrainingBuffer {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// The same records with every global encoding replaced by `f(image, g)`.
    pub fn map_globals(&self, mut f: impl FnMut(usize, &GlobalEncoding) -> GlobalEncoding) -> Self {
        Self {
            records: self.records.clone(),
            global_table: self
                .global_table
                .iter()
                .map(|(&i, g)| (i, f(i, g)))
                .collect(),
        }
    }
}

/// Observations from the given cameras, with global encodings looked up in
/// `encodings` (indexed by image).
pub fn fill_buffer(
    scene: &SyntheticScene,
    encodings: &[GlobalEncoding],
    cameras: &[usize],
    samples_per_image: usize,
    seed: u64,
) -> Result<TrainingBuffer, SceneError> {
    let mut records = Vec::new();
    let mut global_table = BTreeMap::new();
    for &c in cameras {
        let g = encodings.get(c).ok_or_else(|| {
            SceneError::InvalidParameters(format!(
                "no global encoding for image {c} ({} given)",
                encodings.len()
            ))
        })?;
        global_table.insert(c, g.clone());
        records.extend(render_observations(scene, c, samples_per_image, seed));
    }
    Ok(TrainingBuffer {
        records,
        global_table,
    })
}

/// Buffer over every camera, with simulated global encodings.
pub fn fill_buffer_all(
    scene: &SyntheticScene,
    global_dim: usize,
    samples_per_image: usize,
    seed: u64,
) -> Result<TrainingBuffer, SceneError> {
    let encodings = simulate_global_encoding(scene, global_dim, 200, seed)?;
    let cameras: Vec<usize> = (0..scene.cameras.len()).collect();
    fill_buffer(scene, &encodings, &cameras, samples_per_image, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub lr: f64,
    pub tau: f64,
    /// NaN for a skipped (non-finite) iteration.
    #[serde(with = "nan_as_null")]
    pub mean_loss: f64,
    pub valid_fraction: f64,
}

mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_some(v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

pub fn write_trace_csv(path: &Path, trace: &[TraceRow]) -> Result<(), RegressorError> {
    let mut w = csv::Writer::from_path(path)?;
    for row in trace {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Exact position of a ChaCha stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Stored as a decimal string since JSON numbers cannot hold a u128.
    #[serde(with = "u128_string")]
    pub word_pos: u128,
}

mod u128_string {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u128, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u128, D::Error> {
        String::deserialize(d)?.parse().map_err(D::Error::custom)
    }
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Everything needed to continue training bit-for-bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model: SceneRegressor,
    pub config: TrainConfig,
    pub schedule: LossSchedule,
    pub optimizer: AdamW,
    pub rng: RngState,
    pub iteration: usize,
    pub nonfinite_streak: usize,
    pub trace: Vec<TraceRow>,
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), RegressorError> {
    serde_json::to_writer(BufWriter::new(File::create(path)?), ckpt)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, RegressorError> {
    let value: serde_json::Value = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    let version = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .unwrap_or(0) as u32;
    if version != CHECKPOINT_FORMAT_VERSION {
        return Err(RegressorError::UnsupportedVersion(version));
    }
    Ok(serde_json::from_value(value)?)
}

/// The optimization loop: sample a batch with replacement, look up and
/// diffuse global encodings, take one AdamW step on the robust loss.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: SceneRegressor,
    pub config: TrainConfig,
    pub schedule: LossSchedule,
    optimizer: AdamW,
    rng: ChaCha8Rng,
    iteration: usize,
    nonfinite_streak: usize,
    trace: Vec<TraceRow>,
}

impl Trainer {
    pub fn new(
        model: SceneRegressor,
        config: TrainConfig,
        schedule: LossSchedule,
    ) -> Result<Self, RegressorError> {
        config.validate()?;
        schedule.validate().map_err(RegressorError::InvalidConfig)?;
        let optimizer = AdamW::new(model.head.param_count(), config.weight_decay);
        Ok(Self {
            model,
            config,
            schedule,
            optimizer,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            iteration: 0,
            nonfinite_streak: 0,
            trace: Vec::new(),
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self, RegressorError> {
        ckpt.config.validate()?;
        if ckpt.optimizer.m.len() != ckpt.model.head.param_count() {
            return Err(RegressorError::DimensionMismatch {
                expected: ckpt.model.head.param_count(),
                got: ckpt.optimizer.m.len(),
            });
        }
        Ok(Self {
            rng: ckpt.rng.restore(),
            model: ckpt.model,
            config: ckpt.config,
            schedule: ckpt.schedule,
            optimizer: ckpt.optimizer,
            iteration: ckpt.iteration,
            nonfinite_streak: ckpt.nonfinite_streak,
            trace: ckpt.trace,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            model: self.model.clone(),
            config: self.config,
            schedule: self.schedule,
            optimizer: self.optimizer.clone(),
            rng: RngState::capture(&self.rng),
            iteration: self.iteration,
            nonfinite_streak: self.nonfinite_streak,
            trace: self.trace.clone(),
        }
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn trace(&self) -> &[TraceRow] {
        &self.trace
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.config.iterations
    }

    fn check_buffer(&self, buffer: &TrainingBuffer) -> Result<(), RegressorError> {
        if buffer.is_empty() {
            return Err(RegressorError::InvalidConfig(
                "empty training buffer".into(),
            ));
        }
        if let Some(r) = buffer
            .records
            .iter()
            .find(|r| !buffer.global_table.contains_key(&r.image_index))
        {
            return Err(RegressorError::InvalidConfig(format!(
                "image {} has no global encoding",
                r.image_index
            )));
        }
        Ok(())
    }

    /// One iteration. A non-finite loss or gradient skips the update; ten in
    /// a row is reported as divergence.
    pub fn step(&mut self, buffer: &TrainingBuffer) -> Result<TraceRow, RegressorError> {
        let it = self.iteration;
        let lr = self.config.lr_schedule().lr(it);
        let tau = tau_schedule(it as f64 / self.config.iterations as f64, &self.schedule);
        let (x, targets) = self.sample_batch(buffer)?;
        let mut grads = vec![0.0; self.model.head.param_count()];
        let result = reprojection_batch(
            &self.model.head,
            &self.model.decoder,
            &x,
            &targets,
            tau,
            &self.schedule,
            Some(&mut grads),
        );
        let row = match result {
            Ok(stats) if stats.mean_loss.is_finite() => {
                self.nonfinite_streak = 0;
                self.optimizer
                    .update(&mut self.model.head.params, &grads, lr);
                TraceRow {
                    iteration: it,
                    lr,
                    tau,
                    mean_loss: stats.mean_loss,
                    valid_fraction: stats.valid_fraction,
                }
            }
            Ok(_) | Err(RegressorError::NonFiniteGradient) => {
                self.nonfinite_streak += 1;
                if self.nonfinite_streak >= DIVERGENCE_STREAK {
                    return Err(RegressorError::Diverged { iteration: it });
                }
                TraceRow {
                    iteration: it,
                    lr,
                    tau,
                    mean_loss: f64::NAN,
                    valid_fraction: 0.0,
                }
            }
            Err(e) => return Err(e),
        };
        self.iteration += 1;
        self.trace.push(row);
        Ok(row)
    }

    /// Runs until `until` iterations are complete (capped at the configured
    /// total).
    pub fn run_until(
        &mut self,
        buffer: &TrainingBuffer,
        until: usize,
    ) -> Result<(), RegressorError> {
        self.check_buffer(buffer)?;
        let until = until.min(self.config.iterations);
        while self.iteration < until {
            self.step(buffer)?;
        }
        Ok(())
    }

    pub fn run(&mut self, buffer: &TrainingBuffer) -> Result<(), RegressorError> {
        self.run_until(buffer, self.config.iterations)
    }

    fn sample_batch(
        &mut self,
        buffer: &TrainingBuffer,
    ) -> Result<(Array2<f64>, Vec<ReprojectionTarget>), RegressorError> {
        let n = self.config.batch_size;
        let width = self.model.input_width();
        let mut x = Array2::<f64>::zeros((n, width));
        let mut targets = Vec::with_capacity(n);
        let mut diffused = vec![0.0; self.model.global_dim];
        for b in 0..n {
            let r = &buffer.records[self.rng.random_range(0..buffer.len())];
            let g = buffer.global_table.get(&r.image_index).ok_or_else(|| {
                RegressorError::InvalidConfig(format!(
                    "image {} has no global encoding",
                    r.image_index
                ))
            })?;
            if self.model.global_dim > 0 {
                if self.config.sigma > 0.0 {
                    diffuse_into(
                        g.as_slice(),
                        self.config.sigma,
                        &mut self.rng,
                        &mut diffused,
                    );
                } else {
                    diffused.copy_from_slice(g.as_slice());
                }
            }
            let row = x.row_mut(b).into_slice().expect("contiguous row");
            self.model.write_input(&r.local_encoding, &diffused, row)?;
            targets.push(ReprojectionTarget {
                pixel: r.pixel,
                pose: r.gt_pose,
                intrinsics: r.intrinsics,
            });
        }
        Ok((x, targets))
    }
}

/// Trains `model` on `buffer` for the configured number of iterations.
pub fn train(
    buffer: &TrainingBuffer,
    model: SceneRegressor,
    config: TrainConfig,
    schedule: LossSchedule,
) -> Result<(SceneRegressor, Vec<TraceRow>), RegressorError> {
    let mut trainer = Trainer::new(model, config, schedule)?;
    trainer.run(buffer)?;
    Ok((trainer.model, trainer.trace))
}
