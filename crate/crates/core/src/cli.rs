//! Subcommands of the `scenereg` binary. Every command writes its artifacts
//! and a `manifest.json` into `--out`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::covis_analysis::{bins_to_csv, pair_stats_to_csv};
use crate::experiments::{
    ablation_csv, check_compatible, covis_study, evaluate_cameras, frames_for, new_trainer,
    prepare, prior_study, run_ablation, simulate, toy_medians, toy_study, training_buffer,
    ExperimentError,
};
use crate::geometry::Correspondence2D3D;
use crate::localizer::{evaluate_with, export_reconstruction, write_point_list};
use crate::regressor::{
    gradient_check, load_checkpoint, save_checkpoint, write_trace_csv, Trainer,
    CHECKPOINT_FORMAT_VERSION,
};
use crate::scene_sim::{load_scene, save_scene, SCENE_FORMAT_VERSION};
use crate::toy2d::{mae_csv, points_ascii};

pub const EXIT_OK: i32 = 0;
pub const EXIT_GRADCHECK: i32 = 4;
pub const EXIT_COVIS: i32 = 5;
pub const EXIT_TOY2D: i32 = 6;

#[derive(Debug, Parser)]
#[command(
    name = "scenereg",
    version,
    about = "Scene coordinate regression experiments on synthetic scenes"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config's top-level seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Single worker thread.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Heldout,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Generate a scene and fit its global encodings.
    Simulate,
    /// Train a regressor on the training cameras.
    Train {
        /// Defaults to `<out>/scene.json`.
        #[arg(long)]
        scene: Option<PathBuf>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Localize one split and report pose errors.
    Evaluate {
        /// Defaults to `<out>/checkpoint.json`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "heldout")]
        split: Split,
        /// Use ground-truth landmark positions instead of the network.
        #[arg(long)]
        oracle: bool,
    },
    /// Train and evaluate every global-input variant.
    Ablate,
    /// Distance statistics of global encodings against co-visibility.
    AnalyzeCovis {
        /// Simulate from the config when omitted.
        #[arg(long)]
        scene: Option<PathBuf>,
    },
    /// The 2-D tile task and the decoder prior samples.
    Toy2d,
    /// Analytic against finite-difference gradients.
    Gradcheck,
    /// Point list of training predictions that pass a reprojection filter.
    ExportRecon {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        scene: Option<PathBuf>,
        /// Pixels; defaults to the config's `recon.threshold_px`.
        #[arg(long)]
        threshold: Option<f64>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Self::Simulate => "simulate",
            Self::Train { .. } => "train",
            Self::Evaluate { .. } => "evaluate",
            Self::Ablate => "ablate",
            Self::AnalyzeCovis { .. } => "analyze-covis",
            Self::Toy2d => "toy2d",
            Self::Gradcheck => "gradcheck",
            Self::ExportRecon { .. } => "export-recon",
        }
    }
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config_sha256: String,
    seed: u64,
    scene_format_version: u32,
    checkpoint_format_version: u32,
    crate_version: &'a str,
    outputs: Vec<String>,
    /// SHA-256 of each output, same order.
    output_sha256: Vec<String>,
}

/// Output directory plus the artifacts written so far, for the manifest.
pub struct Outputs {
    dir: PathBuf,
    files: Vec<PathBuf>,
}

impl Outputs {
    pub fn new(dir: PathBuf) -> Self {
        Self {
            dir,
            files: Vec::new(),
        }
    }

    pub fn files(&self) -> &[PathBuf] {
        &self.files
    }

    fn path(&mut self, name: &str) -> PathBuf {
        let p = self.dir.join(name);
        self.files.push(p.clone());
        p
    }

    fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<(), ExperimentError> {
        let p = self.path(name);
        fs::write(p, contents)?;
        Ok(())
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<i32, ExperimentError> {
    let g = &cli.global;
    let mut cfg = match &g.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = g.seed {
        cfg = cfg.with_seed(seed);
    }
    let threads = if g.deterministic { Some(1) } else { g.threads };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| ExperimentError::Incompatible(e.to_string()))?;
    fs::create_dir_all(&g.out)?;
    let mut out = Outputs::new(g.out.clone());
    let code = pool.install(|| dispatch(&cli.command, &cfg, &mut out))?;
    write_manifest(cli.command.name(), &cfg, &out)?;
    Ok(code)
}

fn write_manifest(
    command: &str,
    cfg: &ExperimentConfig,
    out: &Outputs,
) -> Result<(), ExperimentError> {
    let mut outputs = Vec::new();
    let mut output_sha256 = Vec::new();
    for f in &out.files {
        outputs.push(
            f.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
        );
        output_sha256.push(hex::encode(Sha256::digest(fs::read(f)?)));
    }
    let m = Manifest {
        command,
        config_sha256: cfg.hash(),
        seed: cfg.seed,
        scene_format_version: SCENE_FORMAT_VERSION,
        checkpoint_format_version: CHECKPOINT_FORMAT_VERSION,
        crate_version: env!("CARGO_PKG_VERSION"),
        outputs,
        output_sha256,
    };
    fs::write(
        out.dir.join("manifest.json"),
        serde_json::to_string_pretty(&m)?,
    )?;
    Ok(())
}

fn or_default(p: &Option<PathBuf>, out: &Path, name: &str) -> PathBuf {
    p.clone().unwrap_or_else(|| out.join(name))
}

fn dispatch(
    cmd: &Command,
    cfg: &ExperimentConfig,
    out: &mut Outputs,
) -> Result<i32, ExperimentError> {
    let dir = out.dir.clone();
    match cmd {
        Command::Simulate => cmd_simulate(cfg, out),
        Command::Train { scene, resume } => cmd_train(
            cfg,
            &or_default(scene, &dir, "scene.json"),
            resume.as_deref(),
            out,
        ),
        Command::Evaluate {
            checkpoint,
            scene,
            split,
            oracle,
        } => cmd_evaluate(
            cfg,
            &or_default(checkpoint, &dir, "checkpoint.json"),
            &or_default(scene, &dir, "scene.json"),
            *split,
            *oracle,
            out,
        ),
        Command::Ablate => cmd_ablate(cfg, out),
        Command::AnalyzeCovis { scene } => cmd_analyze_covis(cfg, scene.as_deref(), out),
        Command::Toy2d => cmd_toy2d(cfg, out),
        Command::Gradcheck => cmd_gradcheck(cfg, out),
        Command::ExportRecon {
            checkpoint,
            scene,
            threshold,
        } => cmd_export_recon(
            cfg,
            &or_default(checkpoint, &dir, "checkpoint.json"),
            &or_default(scene, &dir, "scene.json"),
            threshold.unwrap_or(cfg.recon.threshold_px),
            out,
        ),
    }
}

pub fn cmd_simulate(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<i32, ExperimentError> {
    let file = simulate(cfg)?;
    save_scene(&out.path("scene.json"), &file)?;
    let s = &file.scene;
    println!(
        "landmarks {}  cameras {}  ambiguity groups {}",
        s.landmarks.len(),
        s.cameras.len(),
        s.ambiguous_group_count()
    );
    Ok(EXIT_OK)
}

pub fn cmd_train(
    cfg: &ExperimentConfig,
    scene_path: &Path,
    resume: Option<&Path>,
    out: &mut Outputs,
) -> Result<i32, ExperimentError> {
    let file = load_scene(scene_path)?;
    let p = prepare(cfg, &file, cfg.variant)?;
    let buffer = training_buffer(cfg, &file.scene, &p)?;
    let mut trainer = match resume {
        Some(path) => {
            let t = Trainer::from_checkpoint(load_checkpoint(path)?)?;
            check_compatible(&t.model, &file.scene, &p)?;
            t
        }
        None => new_trainer(cfg, &file.scene, &p)?,
    };
    let start = trainer.iteration();
    trainer.run(&buffer)?;
    save_checkpoint(&out.path("checkpoint.json"), &trainer.checkpoint())?;
    write_trace_csv(&out.path("loss.csv"), trainer.trace())?;
    let last = trainer.trace().last();
    println!(
        "iterations {start}..{}  final loss {}",
        trainer.iteration(),
        last.map_or(f64::NAN, |r| r.mean_loss)
    );
    Ok(EXIT_OK)
}

pub fn cmd_evaluate(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    scene_path: &Path,
    split: Split,
    oracle: bool,
    out: &mut Outputs,
) -> Result<i32, ExperimentError> {
    let file = load_scene(scene_path)?;
    let scene = &file.scene;
    let p = prepare(cfg, &file, cfg.variant)?;
    let cams = match split {
        Split::Train => &p.train_cams,
        Split::Heldout => &p.test_cams,
    };
    assert!(
        p.test_cams.iter().all(|c| !p.train_cams.contains(c)),
        "held-out cameras overlap training cameras"
    );
    let report = if oracle {
        let frames = frames_for(
            scene,
            &p.globals,
            cams,
            cfg.scene.samples_per_image,
            cfg.seed,
        );
        evaluate_with(&frames, &cfg.eval_config(), |f| {
            Ok(f.observations
                .iter()
                .map(|o| Correspondence2D3D::new(o.pixel, scene.landmarks[o.landmark_id].position))
                .collect())
        })?
    } else {
        let model = load_checkpoint(checkpoint)?.model;
        check_compatible(&model, scene, &p)?;
        evaluate_cameras(cfg, scene, &p, &model, cams)?
    };
    out.write("eval.csv", report.to_csv())?;
    out.write("eval_summary.txt", report.summary())?;
    print!("{}", report.summary());
    Ok(EXIT_OK)
}

pub fn cmd_ablate(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<i32, ExperimentError> {
    let rows = run_ablation(cfg)?;
    let csv = ablation_csv(&rows);
    out.write("ablation.csv", &csv)?;
    print!("{csv}");
    Ok(EXIT_OK)
}

pub fn cmd_analyze_covis(
    cfg: &ExperimentConfig,
    scene_path: Option<&Path>,
    out: &mut Outputs,
) -> Result<i32, ExperimentError> {
    let file = match scene_path {
        Some(p) => load_scene(p)?,
        None => simulate(cfg)?,
    };
    let (stats, levels) = covis_study(cfg, &file)?;
    out.write("pairs.csv", pair_stats_to_csv(&stats))?;
    let mut ok = true;
    for l in &levels {
        let n = l.nominal;
        out.write(
            &format!("hist_covis_n{n}.csv"),
            bins_to_csv(&l.covisible.bins),
        )?;
        out.write(&format!("hist_other_n{n}.csv"), bins_to_csv(&l.other.bins))?;
        out.write(&format!("rate_n{n}.csv"), bins_to_csv(&l.rate_curve))?;
        let pass = l.passes(cfg.covis.max_spearman);
        ok &= pass;
        println!(
            "N={n} (scaled {}): mean distance co-visible {:.2} deg, other {:.2} deg, spearman {}  {}",
            l.threshold,
            l.covisible.mean_deg,
            l.other.mean_deg,
            l.spearman.map_or("n/a".into(), |r| format!("{r:.3}")),
            if pass { "ok" } else { "FAILED" }
        );
    }
    Ok(if ok { EXIT_OK } else { EXIT_COVIS })
}

pub fn cmd_toy2d(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<i32, ExperimentError> {
    let rows = toy_study(cfg)?;
    out.write("toy2d_mae.csv", mae_csv(&rows))?;
    let med = toy_medians(&rows);
    let (k1, kg) = (med.first_key_value(), med.last_key_value());
    let prior = prior_study(cfg)?;
    out.write("prior_k1.txt", points_ascii(&prior.single_samples))?;
    out.write(
        &format!("prior_k{}.txt", prior.multi.k()),
        points_ascii(&prior.multi_samples),
    )?;
    out.write("prior_centers.txt", points_ascii(&prior.multi.centers))?;
    let mae_ok = match (k1, kg) {
        (Some((_, a)), Some((k, b))) if *k > 1 => {
            println!("median mae k=1 {a:.4}  k={k} {b:.4}");
            b < a
        }
        _ => false,
    };
    println!(
        "prior: offset scale {:.3}, k=1 peak {:.3} from center, k={} coverage {:.3}",
        prior.offset_scale,
        prior.peak_distance,
        prior.multi.k(),
        prior.coverage
    );
    Ok(if mae_ok && prior.passes() {
        EXIT_OK
    } else {
        EXIT_TOY2D
    })
}

pub fn cmd_gradcheck(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<i32, ExperimentError> {
    let mut csv = String::from("seed,params,max_relative_error\n");
    let mut worst = 0.0f64;
    for i in 0..cfg.gradcheck.seeds {
        let r = gradient_check(cfg.seed.wrapping_add(i))?;
        csv.push_str(&format!(
            "{},{},{}\n",
            r.seed, r.params_checked, r.max_relative_error
        ));
        worst = worst.max(r.max_relative_error);
    }
    out.write("gradcheck.csv", &csv)?;
    println!(
        "max relative error {worst:.3e} over {} seeds",
        cfg.gradcheck.seeds
    );
    Ok(if worst < cfg.gradcheck.tolerance {
        EXIT_OK
    } else {
        EXIT_GRADCHECK
    })
}

pub fn cmd_export_recon(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    scene_path: &Path,
    threshold_px: f64,
    out: &mut Outputs,
) -> Result<i32, ExperimentError> {
    let file = load_scene(scene_path)?;
    let p = prepare(cfg, &file, cfg.variant)?;
    let model = load_checkpoint(checkpoint)?.model;
    check_compatible(&model, &file.scene, &p)?;
    let buffer = training_buffer(cfg, &file.scene, &p)?;
    let points = export_reconstruction(&model, &buffer, threshold_px)?;
    write_point_list(&out.path("points.txt"), &points)?;
    println!(
        "{} of {} predictions within {threshold_px} px",
        points.len(),
        buffer.len()
    );
    Ok(EXIT_OK)
}
