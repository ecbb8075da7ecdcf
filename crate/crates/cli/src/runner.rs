//! Single-run orchestration: pretrain-if-missing, attach, tracked
//! fine-tuning, artifact emission.

use std::path::{Path, PathBuf};

use ftlab::data::{make_task, SyntheticTask};
use ftlab::model::{Checkpoint, Params};
use ftlab::peft::attach;
use ftlab::tracking::{self, EvalPlan, RunOutcome};
use ftlab::{Error, Result};

use crate::config::ExperimentConfig;

pub const MANIFEST_VERSION: u32 = 1;

fn fnv1a_hex(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    format!("{h:016x}")
}

/// Cache key for a pre-trained backbone: everything that determines it.
fn pretrain_key(cfg: &ExperimentConfig) -> Result<String> {
    let cfg_up = cfg.model.with_classes(cfg.task.num_classes_upstream);
    let key = serde_json::json!({
        "model": cfg_up,
        "task": cfg.task,
        "steps": cfg.training.pretrain_steps,
        "lr": cfg.training.pretrain_lr,
        "weight_decay": cfg.training.weight_decay,
        "batch_size": cfg.training.batch_size,
        "seed": cfg.training.seed,
    });
    Ok(fnv1a_hex(serde_json::to_string(&key)?.as_bytes()))
}

/// Load the cached upstream model or pretrain and cache it.
pub fn ensure_pretrained(
    cache_dir: &Path,
    cfg: &ExperimentConfig,
    task: &SyntheticTask,
) -> Result<Params> {
    let cfg_up = cfg.model.with_classes(cfg.task.num_classes_upstream);
    let path = cache_dir.join(format!("{}.json", pretrain_key(cfg)?));
    if path.exists() {
        let ckpt = Checkpoint::load(&path)?;
        if ckpt.config == cfg_up {
            return Ok(ckpt.params());
        }
    }
    let params = tracking::pretrain(&cfg_up, &task.upstream, &cfg.training)?;
    std::fs::create_dir_all(cache_dir)?;
    Checkpoint::new(&cfg_up, &params).save(&path)?;
    Ok(params)
}

pub struct CompletedRun {
    pub dir: PathBuf,
    pub outcome: RunOutcome,
    pub trainable_scalars: usize,
    pub trainable_fraction: f64,
}

/// Execute one experiment into `dir`: manifest.json, track.csv,
/// checkpoints/. Returns the outcome (partial when diverged).
pub fn run_experiment(
    cfg: &ExperimentConfig,
    dir: &Path,
    pretrain_cache: &Path,
) -> Result<CompletedRun> {
    cfg.validate()?;
    std::fs::create_dir_all(dir)?;
    let task = make_task(&cfg.task)?;
    for w in &task.warnings {
        eprintln!("warning: {w}");
    }
    let backbone = ensure_pretrained(pretrain_cache, cfg, &task)?;
    let cfg_down = cfg.model.with_classes(cfg.task.num_classes_downstream);
    let w0 = tracking::reshape_head(&backbone, &cfg_down, cfg.training.seed ^ 0x68656164)?;
    let mut attachment = attach(&cfg.peft, &cfg_down, &w0, cfg.training.seed)?;
    let trainable_scalars = attachment.trainable_scalars(&w0);
    let trainable_fraction = attachment.trainable_fraction(&w0);

    let plan = match cfg.schedule_mode {
        tracking::ScheduleMode::Adversarial => EvalPlan::Adversarial(cfg.attack.clone()),
        tracking::ScheduleMode::Ood => EvalPlan::Ood(cfg.ood_shifts()),
    };
    let outcome = tracking::run_tracked(
        &cfg_down,
        &w0,
        &mut attachment,
        &task,
        &plan,
        &cfg.schedule(),
        &cfg.training,
        cfg.eval_subset,
        Some(dir),
    )?;

    std::fs::write(dir.join("track.csv"), tracking::write_track_csv(&outcome.records))?;
    // reporting convention: one epoch is ceil(|train| / batch) steps
    let steps_per_epoch = task.train.len().div_ceil(cfg.training.batch_size);
    let manifest = serde_json::json!({
        "version": MANIFEST_VERSION,
        "config": cfg,
        "eval_train_indices": outcome.train_indices,
        "eval_test_indices": outcome.test_indices,
        "records": outcome.records.len(),
        "steps_per_epoch": steps_per_epoch,
        "diverged": outcome.diverged,
        "trainable_scalars": trainable_scalars,
        "trainable_fraction": trainable_fraction,
    });
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(CompletedRun {
        dir: dir.to_path_buf(),
        outcome,
        trainable_scalars,
        trainable_fraction,
    })
}

/// Load a run directory's manifest config and track records.
pub fn load_run(dir: &Path) -> Result<(ExperimentConfig, Vec<tracking::TrackRecord>, bool)> {
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    let cfg: ExperimentConfig = serde_json::from_value(manifest["config"].clone())
        .map_err(|e| Error::Config(format!("{}: bad manifest config: {e}", dir.display())))?;
    let diverged = manifest["diverged"].as_bool().unwrap_or(false);
    let csv_path = dir.join("track.csv");
    let text = std::fs::read_to_string(&csv_path)?;
    let records = tracking::read_track_csv(&text, &csv_path.display().to_string())?;
    Ok((cfg, records, diverged))
}
