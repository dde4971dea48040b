//! The trainable head: residual MLP, position decoder, robust reprojection
//! loss, reverse-mode gradients, training buffer and optimization loop.

mod decoder;
mod gradcheck;
mod loss;
mod mlp;
mod optim;
mod train;

use nalgebra::{Vector2, Vector3};
use ndarray::{s, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encodings::GlobalEncoding;
use crate::geometry::{CameraIntrinsics, RigidPose};

pub use decoder::{
    decode_position, decode_row, scale_transform, softmax, DecoderParams, RawOutput,
};
pub use gradcheck::{gradient_check, relative_error, GradCheckReport, GRADCHECK_EPS};
pub use loss::{
    pseudo_target, robust_loss, robust_loss_grad, tau_schedule, LossBranch, LossSchedule,
};
pub use mlp::{ForwardCache, HeadConfig, RegressorHead};
pub use optim::{AdamW, OneCycle};
pub use train::{
    fill_buffer, fill_buffer_all, load_checkpoint, save_checkpoint, train, write_trace_csv,
    Checkpoint, RngState, TraceRow, TrainConfig, Trainer, TrainingBuffer,
    CHECKPOINT_FORMAT_VERSION,
};

pub(crate) use decoder::decode_backward;

#[derive(Debug, Error)]
pub enum RegressorError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid decoder: {0}")]
    InvalidDecoder(String),
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error(
        "training diverged at iteration {iteration}: loss non-finite for 10 consecutive iterations"
    )]
    Diverged { iteration: usize },
    #[error("invalid training setup: {0}")]
    InvalidConfig(String),
    #[error("unsupported checkpoint format version {0}")]
    UnsupportedVersion(u32),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Head, decoder, and the encoding widths the head was built for. A
/// `global_dim` of zero means the head sees local encodings only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRegressor {
    pub head: RegressorHead,
    pub decoder: DecoderParams,
    pub local_dim: usize,
    pub global_dim: usize,
}

impl SceneRegressor {
    pub fn new(
        local_dim: usize,
        global_dim: usize,
        hidden_width: usize,
        residual_blocks: usize,
        decoder: DecoderParams,
        seed: u64,
    ) -> Self {
        let config = HeadConfig {
            input_width: local_dim + global_dim,
            hidden_width,
            residual_blocks,
            output_width: decoder.raw_width(),
        };
        Self {
            head: RegressorHead::new(config, seed),
            decoder,
            local_dim,
            global_dim,
        }
    }

    pub fn input_width(&self) -> usize {
        self.local_dim + self.global_dim
    }

    /// Writes `local ++ global` (global omitted when `global_dim == 0`).
    pub fn write_input(
        &self,
        local: &[f64],
        global: &[f64],
        row: &mut [f64],
    ) -> Result<(), RegressorError> {
        if local.len() != self.local_dim {
            return Err(RegressorError::DimensionMismatch {
                expected: self.local_dim,
                got: local.len(),
            });
        }
        row[..self.local_dim].copy_from_slice(local);
        if self.global_dim > 0 {
            if global.len() != self.global_dim {
                return Err(RegressorError::DimensionMismatch {
                    expected: self.global_dim,
                    got: global.len(),
                });
            }
            row[self.local_dim..].copy_from_slice(global);
        }
        Ok(())
    }

    /// Predicted scene coordinates for a batch of local encodings sharing one
    /// (undiffused) global encoding.
    pub fn predict(
        &self,
        locals: &[&[f64]],
        global: &GlobalEncoding,
    ) -> Result<Vec<Vector3<f64>>, RegressorError> {
        if locals.is_empty() {
            return Ok(Vec::new());
        }
        let mut x = Array2::zeros((locals.len(), self.input_width()));
        for (i, l) in locals.iter().enumerate() {
            self.write_input(
                l,
                global.as_slice(),
                x.row_mut(i).as_slice_mut().expect("contiguous row"),
            )?;
        }
        let out = predict_rows(&self.head, &self.decoder, &x)?;
        Ok(out
            .into_iter()
            .map(|y| Vector3::new(y[0], y[1], y[2]))
            .collect())
    }
}

/// Decoded positions for every input row.
pub fn predict_rows(
    head: &RegressorHead,
    decoder: &DecoderParams,
    x: &Array2<f64>,
) -> Result<Vec<Vec<f64>>, RegressorError> {
    let mut rows = Vec::with_capacity(x.nrows());
    for chunk in 0..x.nrows().div_ceil(CHUNK) {
        let lo = chunk * CHUNK;
        let hi = (lo + CHUNK).min(x.nrows());
        let (out, _) = head.forward_batch(&x.slice(s![lo..hi, ..]).to_owned())?;
        for r in 0..out.nrows() {
            rows.push(decode_row(
                out.row(r).as_slice().expect("contiguous row"),
                decoder,
            ));
        }
    }
    Ok(rows)
}

/// Reprojection supervision for one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReprojectionTarget {
    pub pixel: Vector2<f64>,
    pub pose: RigidPose,
    pub intrinsics: CameraIntrinsics,
}

/// Summary of one batch evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchStats {
    pub mean_loss: f64,
    pub valid_fraction: f64,
}

/// Rows per work chunk. Chunking is fixed so that the reduction order, and
/// hence the result, does not depend on the number of threads.
const CHUNK: usize = 128;

/// Mean loss over a batch and, when `grads` is given, its gradient with
/// respect to every head parameter (added into `grads`). `loss_fn` maps a
/// row index and decoded position to (loss, dL/dy, counted-as-valid).
pub fn batch_step<F>(
    head: &RegressorHead,
    decoder: &DecoderParams,
    x: &Array2<f64>,
    loss_fn: F,
    grads: Option<&mut [f64]>,
) -> Result<BatchStats, RegressorError>
where
    F: Fn(usize, &[f64]) -> (f64, Vec<f64>, bool) + Sync,
{
    let n = x.nrows();
    if n == 0 {
        return Err(RegressorError::InvalidConfig("empty batch".into()));
    }
    let want_grads = grads.is_some();
    let chunks: Vec<usize> = (0..n.div_ceil(CHUNK)).collect();
    let parts: Vec<Result<(f64, usize, Option<Vec<f64>>), RegressorError>> = chunks
        .par_iter()
        .map(|&c| {
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(n);
            let xc = x.slice(s![lo..hi, ..]).to_owned();
            let (out, cache) = head.forward_batch(&xc)?;
            let width = out.ncols();
            let mut d_out = Array2::<f64>::zeros((hi - lo, width));
            let mut loss_sum = 0.0;
            let mut valid = 0;
            for r in 0..hi - lo {
                let row = out.row(r);
                let row = row.as_slice().expect("contiguous row");
                let y = decode_row(row, decoder);
                let (l, g_y, ok) = loss_fn(lo + r, &y);
                loss_sum += l;
                valid += usize::from(ok);
                if want_grads {
                    let g_y: Vec<f64> = g_y.iter().map(|g| g / n as f64).collect();
                    decode_backward(
                        row,
                        decoder,
                        &g_y,
                        d_out.row_mut(r).as_slice_mut().expect("contiguous row"),
                    );
                }
            }
            let g = want_grads.then(|| {
                let mut g = vec![0.0; head.param_count()];
                head.backward(&cache, &d_out, &mut g);
                g
            });
            Ok((loss_sum, valid, g))
        })
        .collect();

    let mut loss_sum = 0.0;
    let mut valid = 0;
    let mut grads = grads;
    for part in parts {
        let (l, v, g) = part?;
        loss_sum += l;
        valid += v;
        if let (Some(acc), Some(g)) = (grads.as_deref_mut(), g) {
            for (a, b) in acc.iter_mut().zip(&g) {
                *a += b;
            }
        }
    }
    if let Some(acc) = grads {
        if acc.iter().any(|g| !g.is_finite()) {
            return Err(RegressorError::NonFiniteGradient);
        }
    }
    Ok(BatchStats {
        mean_loss: loss_sum / n as f64,
        valid_fraction: valid as f64 / n as f64,
    })
}

/// Batch reprojection loss with the robust schedule at bandwidth `tau`.
pub fn reprojection_batch(
    head: &RegressorHead,
    decoder: &DecoderParams,
    x: &Array2<f64>,
    targets: &[ReprojectionTarget],
    tau: f64,
    sched: &LossSchedule,
    grads: Option<&mut [f64]>,
) -> Result<BatchStats, RegressorError> {
    if targets.len() != x.nrows() {
        return Err(RegressorError::DimensionMismatch {
            expected: x.nrows(),
            got: targets.len(),
        });
    }
    batch_step(
        head,
        decoder,
        x,
        |i, y| {
            let t = &targets[i];
            let (l, branch, g) = robust_loss_grad(
                &t.pixel,
                &Vector3::new(y[0], y[1], y[2]),
                &t.pose,
                &t.intrinsics,
                tau,
                sched,
            );
            (l, vec![g.x, g.y, g.z], branch == LossBranch::Valid)
        },
        grads,
    )
}
