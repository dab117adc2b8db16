//! Run orchestration behind the CLI: output directories, run manifests,
//! CSV artifacts, and the pretrain / personalize / sample / eval / sweep
//! entry points.
//!
//! Every run directory holds exactly one `manifest.json` whose config echo
//! and seed are sufficient to reproduce the run's checkpoint hashes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::csvfmt::format_float;
use crate::datagen::{
    new_class_dataset, pentagon_dataset, pentagon_mean, LabeledDataset, NEW_CLASS_ID,
    PENTAGON_CLASSES,
};
use crate::diffusion::ancestral_sample;
use crate::error::{Error, Result};
use crate::metrics::{make_drift_report, DriftReport, EvalConfig};
use crate::rng::Rng;
use crate::trainer::{personalize, pretrain, sweep, LambdaAggregate, Method, TrainLog};

/// Environment variable overriding the output root (the `--out` flag wins).
pub const ENV_OUT_ROOT: &str = "DRIFTGUARD_OUT";
pub const DEFAULT_OUT_ROOT: &str = "runs";

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const DATASET_FILE: &str = "dataset.csv";
pub const SWEEP_CSV_FILE: &str = "sweep.csv";
pub const CELLS_CSV_FILE: &str = "cells.csv";

// ── directories and hashing ──────────────────────────────────────────────────

/// Output root: `--out` flag, then DRIFTGUARD_OUT, then `runs/`.
pub fn out_root(cli_out: Option<&Path>) -> PathBuf {
    if let Some(p) = cli_out {
        return p.to_path_buf();
    }
    if let Ok(env) = std::env::var(ENV_OUT_ROOT) {
        if !env.is_empty() {
            return PathBuf::from(env);
        }
    }
    PathBuf::from(DEFAULT_OUT_ROOT)
}

/// Creates a fresh timestamped run directory under `root`.
pub fn fresh_run_dir(root: &Path, prefix: &str) -> Result<PathBuf> {
    fs::create_dir_all(root)?;
    let stamp = chrono::Utc::now().format("%Y%m%d-%H%M%S");
    for attempt in 0..1000 {
        let name = if attempt == 0 {
            format!("{prefix}-{stamp}")
        } else {
            format!("{prefix}-{stamp}-{attempt}")
        };
        let dir = root.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e.into()),
        }
    }
    Err(Error::Internal("cannot allocate a fresh run directory".into()))
}

pub fn sha256_hex(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

// ── manifest ─────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FileRef {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CellRecord {
    pub lambda: f64,
    pub seed: u64,
    pub ok: bool,
    pub error: Option<String>,
    pub dir: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunManifest {
    pub command: String,
    /// Verbatim text of the config file the run was started from.
    pub config_echo: String,
    pub seed: u64,
    pub method: Option<String>,
    pub lambda: Option<f64>,
    pub input_checkpoint: Option<FileRef>,
    pub output_checkpoint: Option<FileRef>,
    pub started_at: String,
    pub finished_at: String,
    pub artifacts: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub cells: Option<Vec<CellRecord>>,
}

impl RunManifest {
    pub fn save(&self, dir: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Internal(format!("manifest serialization: {e}")))?;
        fs::write(dir.join(MANIFEST_FILE), json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Integrity(format!("malformed manifest {}: {e}", path.display())))
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339()
}

// ── dataset construction from config ─────────────────────────────────────────

/// Pentagon pretraining data from the `[data]` section; the generation stream
/// is keyed by the data seed, not the training seed, so every phase of an
/// experiment sees the same points.
pub fn pentagon_from(cfg: &ExperimentConfig) -> Result<LabeledDataset> {
    pentagon_dataset(
        cfg.data.n_per_class,
        cfg.data.radius,
        cfg.data.std,
        &mut Rng::for_phase(cfg.data.seed, "data/pentagon"),
    )
}

/// New-class personalization data (label 5) from the `[data]` section.
pub fn new_class_from(cfg: &ExperimentConfig) -> Result<LabeledDataset> {
    new_class_dataset(
        cfg.data.n_per_class,
        cfg.data.new_class_mean,
        cfg.data.std,
        NEW_CLASS_ID,
        &mut Rng::for_phase(cfg.data.seed, "data/new-class"),
    )
}

/// Evaluation geometry matching the `[data]` section.
pub fn eval_config_from(cfg: &ExperimentConfig) -> EvalConfig {
    EvalConfig {
        class_means: (0..PENTAGON_CLASSES)
            .map(|k| pentagon_mean(k, cfg.data.radius))
            .collect(),
        new_class: Some((NEW_CLASS_ID, cfg.data.new_class_mean)),
        ..EvalConfig::toy()
    }
}

// ── CSV artifacts ────────────────────────────────────────────────────────────

pub fn write_dataset_csv(path: &Path, ds: &LabeledDataset) -> Result<()> {
    let mut out = String::from("x,y,label\n");
    for (p, l) in ds.points.iter().zip(&ds.labels) {
        out.push_str(&format!("{},{},{l}\n", format_float(p[0]), format_float(p[1])));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn write_train_log_csv(path: &Path, log: &TrainLog) -> Result<()> {
    let mut out = String::from("step,denoise,prior,lipschitz,total,delta_theta_l2\n");
    for r in &log.records {
        let delta = r.delta_theta_l2.map(format_float).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{delta}\n",
            r.step,
            format_float(r.loss.denoise),
            format_float(r.loss.prior),
            format_float(r.loss.lipschitz),
            format_float(r.loss.total),
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Appends one drift-report row, writing the header when the file is new.
pub fn append_report_csv(path: &Path, method: &str, report: &DriftReport) -> Result<()> {
    let mut text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(e.into()),
    };
    if text.is_empty() {
        text.push_str(DriftReport::csv_header());
        text.push('\n');
    }
    text.push_str(&report.to_csv_row(method));
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn write_sweep_csv(path: &Path, aggregates: &[LambdaAggregate]) -> Result<()> {
    let mut out = String::from(
        "lambda,cells,mean_delta_theta_l2,std_delta_theta_l2,mean_delta_eps,std_delta_eps,\
mean_kl,std_kl,mean_coverage,mean_new_class_fit\n",
    );
    for a in aggregates {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            format_float(a.lambda),
            a.cells,
            format_float(a.mean_delta_theta_l2),
            format_float(a.std_delta_theta_l2),
            format_float(a.mean_delta_eps),
            format_float(a.std_delta_eps),
            format_float(a.mean_kl),
            format_float(a.std_kl),
            format_float(a.mean_coverage),
            format_float(a.mean_new_class_fit),
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

// ── command implementations ──────────────────────────────────────────────────

fn checkpoint_ref(dir: &Path, name: &str) -> Result<FileRef> {
    Ok(FileRef {
        path: name.to_string(),
        sha256: sha256_hex(&dir.join(name))?,
    })
}

/// Trains the base model from a config file; writes dataset, train log,
/// checkpoint and manifest into a fresh run directory.
pub fn run_pretrain(
    config_path: &Path,
    out: Option<&Path>,
    seed_override: Option<u64>,
) -> Result<PathBuf> {
    let cfg = ExperimentConfig::load(config_path)?;
    let mut tc = cfg.pretrain_config();
    if let Some(seed) = seed_override {
        tc.seed = seed;
    }
    tc.validate()?;

    let started_at = now();
    let dataset = pentagon_from(&cfg)?;
    let (params, log) = pretrain(&tc, &dataset)?;

    let dir = fresh_run_dir(&out_root(out), "pretrain")?;
    write_dataset_csv(&dir.join(DATASET_FILE), &dataset)?;
    write_train_log_csv(&dir.join(TRAIN_LOG_FILE), &log)?;
    Checkpoint::new(params, cfg.schedule, tc.seed).save(&dir.join(CHECKPOINT_FILE))?;

    RunManifest {
        command: "pretrain".into(),
        config_echo: cfg.raw_text.clone(),
        seed: tc.seed,
        method: Some(Method::Vanilla.to_string()),
        lambda: None,
        input_checkpoint: None,
        output_checkpoint: Some(checkpoint_ref(&dir, CHECKPOINT_FILE)?),
        started_at,
        finished_at: now(),
        artifacts: vec![
            DATASET_FILE.into(),
            TRAIN_LOG_FILE.into(),
            CHECKPOINT_FILE.into(),
        ],
        cells: None,
    }
    .save(&dir)?;
    Ok(dir)
}

fn check_base_matches_config(cfg: &ExperimentConfig, base: &Checkpoint) -> Result<()> {
    if base.params.arch != cfg.arch {
        return Err(Error::Config(format!(
            "base checkpoint architecture {:?} does not match config {:?}",
            base.params.arch, cfg.arch
        )));
    }
    if base.schedule != cfg.schedule {
        return Err(Error::Config(
            "base checkpoint schedule does not match config".into(),
        ));
    }
    Ok(())
}

/// Personalizes a base checkpoint on the new class under the configured
/// objective; writes checkpoint, train log and manifest.
pub fn run_personalize(
    config_path: &Path,
    base_path: &Path,
    out: Option<&Path>,
    seed_override: Option<u64>,
    norm_override: Option<crate::objectives::Norm>,
) -> Result<PathBuf> {
    let cfg = ExperimentConfig::load(config_path)?;
    let mut tc = cfg.personalize_config();
    if let Some(seed) = seed_override {
        tc.seed = seed;
    }
    if let Some(norm) = norm_override {
        tc.norm = norm;
    }
    tc.validate()?;
    if tc.arch.num_classes <= NEW_CLASS_ID {
        return Err(Error::Config(format!(
            "personalization needs num_classes > {NEW_CLASS_ID} for the new class"
        )));
    }

    let base = Checkpoint::load(base_path)?;
    check_base_matches_config(&cfg, &base)?;

    let started_at = now();
    let target = new_class_from(&cfg)?;
    let prior;
    let prior_ref = if tc.method == Method::Prior {
        prior = pentagon_from(&cfg)?.filter_class(0);
        Some(&prior)
    } else {
        None
    };
    let (params, log) = personalize(&tc, &base.params, &target, prior_ref)?;

    let dir = fresh_run_dir(&out_root(out), "personalize")?;
    write_train_log_csv(&dir.join(TRAIN_LOG_FILE), &log)?;
    Checkpoint::new(params, cfg.schedule, tc.seed).save(&dir.join(CHECKPOINT_FILE))?;

    RunManifest {
        command: "personalize".into(),
        config_echo: cfg.raw_text.clone(),
        seed: tc.seed,
        method: Some(tc.method.to_string()),
        lambda: Some(tc.lambda),
        input_checkpoint: Some(FileRef {
            path: base_path.display().to_string(),
            sha256: sha256_hex(base_path)?,
        }),
        output_checkpoint: Some(checkpoint_ref(&dir, CHECKPOINT_FILE)?),
        started_at,
        finished_at: now(),
        artifacts: vec![TRAIN_LOG_FILE.into(), CHECKPOINT_FILE.into()],
        cells: None,
    }
    .save(&dir)?;
    Ok(dir)
}

/// Draws class-conditional samples from a checkpoint into a CSV.
pub fn run_sample(
    ckpt_path: &Path,
    class: usize,
    n: usize,
    seed: u64,
    out_csv: &Path,
) -> Result<()> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    if class >= ckpt.params.arch.num_classes {
        return Err(Error::Input(format!(
            "class {class} out of range 0..{}",
            ckpt.params.arch.num_classes
        )));
    }
    let sched = ckpt.schedule.build()?;
    let mut rng = Rng::for_phase(seed, "sample");
    let points = ancestral_sample(&ckpt.params, class, n, &sched, &mut rng)?;
    let mut out = String::from("x,y,label\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{class}\n",
            format_float(p[0]),
            format_float(p[1])
        ));
    }
    fs::write(out_csv, out)?;
    Ok(())
}

/// Evaluates drift of `per` against `base` and appends one report row.
pub fn run_eval(
    base_path: &Path,
    per_path: &Path,
    seed: u64,
    lambda: f64,
    method: &str,
    out_csv: &Path,
) -> Result<DriftReport> {
    let base = Checkpoint::load(base_path)?;
    let per = Checkpoint::load(per_path)?;
    let sched = base.schedule.build()?;
    let mut rng = Rng::for_phase(seed, "eval");
    let report = make_drift_report(
        &base.params,
        &per.params,
        &sched,
        &EvalConfig::toy(),
        lambda,
        seed,
        &mut rng,
    )?;
    append_report_csv(out_csv, method, &report)?;
    Ok(report)
}

/// Runs the lambda sweep from a config file against a base checkpoint;
/// writes per-cell artifacts, the cell report CSV, the per-lambda aggregate
/// CSV, and a manifest marking failed cells.
pub fn run_sweep(
    config_path: &Path,
    base_override: Option<&Path>,
    out: Option<&Path>,
    jobs_override: Option<usize>,
) -> Result<PathBuf> {
    let cfg = ExperimentConfig::load(config_path)?;
    if cfg.sweep.lambdas.is_empty() {
        return Err(Error::Config("sweep lambda list is empty".into()));
    }
    let base_path = base_override
        .map(Path::to_path_buf)
        .or_else(|| cfg.sweep.base.clone())
        .ok_or_else(|| {
            Error::Config("sweep needs a base checkpoint (--base or [sweep] base=...)".into())
        })?;
    let base = Checkpoint::load(&base_path)?;
    check_base_matches_config(&cfg, &base)?;

    let mut tc = cfg.personalize_config();
    tc.method = Method::Lipschitz;
    tc.validate()?;
    let jobs = jobs_override.unwrap_or(cfg.sweep.jobs).max(1);

    let started_at = now();
    let target = new_class_from(&cfg)?;
    let eval_cfg = eval_config_from(&cfg);
    let report = sweep(
        &tc,
        &cfg.sweep.lambdas,
        &cfg.sweep.seeds,
        &base.params,
        &target,
        &eval_cfg,
        jobs,
    )?;

    let dir = fresh_run_dir(&out_root(out), "sweep")?;
    let cells_dir = dir.join("cells");
    fs::create_dir_all(&cells_dir)?;
    let mut records = Vec::new();
    for cell in &report.cells {
        match &cell.outcome {
            Ok(success) => {
                let cell_name = format!("l{}_s{}", cell.lambda, cell.seed);
                let cell_dir = cells_dir.join(&cell_name);
                fs::create_dir_all(&cell_dir)?;
                write_train_log_csv(&cell_dir.join(TRAIN_LOG_FILE), &success.log)?;
                Checkpoint::new(success.params.clone(), cfg.schedule, cell.seed)
                    .save(&cell_dir.join(CHECKPOINT_FILE))?;
                append_report_csv(
                    &dir.join(CELLS_CSV_FILE),
                    Method::Lipschitz.as_str(),
                    &success.report,
                )?;
                records.push(CellRecord {
                    lambda: cell.lambda,
                    seed: cell.seed,
                    ok: true,
                    error: None,
                    dir: Some(format!("cells/{cell_name}")),
                });
            }
            Err(msg) => records.push(CellRecord {
                lambda: cell.lambda,
                seed: cell.seed,
                ok: false,
                error: Some(msg.clone()),
                dir: None,
            }),
        }
    }
    write_sweep_csv(&dir.join(SWEEP_CSV_FILE), &report.aggregates)?;

    RunManifest {
        command: "sweep".into(),
        config_echo: cfg.raw_text.clone(),
        seed: 0,
        method: Some(Method::Lipschitz.to_string()),
        lambda: None,
        input_checkpoint: Some(FileRef {
            path: base_path.display().to_string(),
            sha256: sha256_hex(&base_path)?,
        }),
        output_checkpoint: None,
        started_at,
        finished_at: now(),
        artifacts: vec![SWEEP_CSV_FILE.into(), CELLS_CSV_FILE.into()],
        cells: Some(records),
    }
    .save(&dir)?;
    Ok(dir)
}
