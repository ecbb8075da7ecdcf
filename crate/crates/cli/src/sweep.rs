//! Sweep orchestration: one independent run per axis value, pooled
//! workers, joined summary.

use std::path::Path;

use ftlab::peft::PeftMethod;
use ftlab::tracking::{detect_peak, SeriesKey, DEFAULT_DECLINE_TAU};
use ftlab::{Error, Result};
use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::runner::{run_experiment, CompletedRun};

const AXES: [&str; 6] = ["lr", "rank", "reduction_factor", "method", "separation", "seed"];

fn apply_axis(cfg: &mut ExperimentConfig, axis: &str, value: &str) -> Result<()> {
    let parse_f64 = |v: &str| -> Result<f64> {
        v.parse()
            .map_err(|_| Error::Config(format!("sweep value `{v}` is not a number")))
    };
    let parse_usize = |v: &str| -> Result<usize> {
        v.parse()
            .map_err(|_| Error::Config(format!("sweep value `{v}` is not an integer")))
    };
    match axis {
        "lr" => cfg.training.lr = parse_f64(value)?,
        "rank" => cfg.peft.rank = parse_usize(value)?,
        "reduction_factor" => cfg.peft.reduction_factor = parse_usize(value)?,
        "method" => {
            cfg.peft.method = PeftMethod::parse(value)?;
            cfg.peft.locations = None; // method defaults
        }
        "separation" => cfg.task.separation = parse_f64(value)?,
        "seed" => {
            let seed = parse_usize(value)? as u64;
            cfg.training.seed = seed;
            cfg.task.seed = seed;
        }
        other => {
            return Err(Error::Config(format!(
                "unknown sweep axis `{other}` (expected one of {AXES:?})"
            )))
        }
    }
    Ok(())
}

/// Run every member config; returns whether any member diverged.
pub fn sweep(base: &ExperimentConfig, axis: &str, values: &[String], out: &Path) -> Result<bool> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    // validate all member configs before any work starts
    let mut members = Vec::with_capacity(values.len());
    for value in values {
        let mut cfg = base.clone();
        apply_axis(&mut cfg, axis, value)?;
        cfg.validate()?;
        members.push((value.clone(), cfg));
    }
    std::fs::create_dir_all(out)?;
    let cache = out.join("pretrained");

    let results: Vec<(String, CompletedRun)> = members
        .par_iter()
        .map(|(value, cfg)| -> Result<(String, CompletedRun)> {
            let dir = out.join(format!("{axis}={value}"));
            let completed = run_experiment(cfg, &dir, &cache)?;
            Ok((value.clone(), completed))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut summary = String::from(
        "axis,value,run_dir,steps,final_train_acc,final_test_acc,final_robustness,\
         peak_robustness,peak_step,declined,trainable_scalars,trainable_fraction,diverged\n",
    );
    let mut any_diverged = false;
    for (value, run) in &results {
        let records = &run.outcome.records;
        let last = records.last();
        let robustness = |r: &ftlab::tracking::TrackRecord| {
            r.adv_acc.unwrap_or_else(|| {
                if r.ood_acc.is_empty() {
                    f64::NAN
                } else {
                    r.ood_acc.values().sum::<f64>() / r.ood_acc.len() as f64
                }
            })
        };
        let key = if records.first().map(|r| r.adv_acc.is_some()).unwrap_or(false) {
            SeriesKey::AdvAcc
        } else {
            SeriesKey::TestAcc
        };
        let peak = detect_peak(records, &key, DEFAULT_DECLINE_TAU).ok();
        any_diverged |= run.outcome.diverged;
        summary.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            axis,
            value,
            run.dir.display(),
            last.map(|r| r.step).unwrap_or(0),
            last.map(|r| r.train_acc).unwrap_or(f64::NAN),
            last.map(|r| r.test_acc).unwrap_or(f64::NAN),
            last.map(robustness).unwrap_or(f64::NAN),
            peak.as_ref().map(|p| p.peak_value).unwrap_or(f64::NAN),
            peak.as_ref().map(|p| p.peak_step).unwrap_or(0),
            peak.as_ref().map(|p| p.declined).unwrap_or(false),
            run.trainable_scalars,
            run.trainable_fraction,
            run.outcome.diverged,
        ));
    }
    std::fs::write(out.join("summary.csv"), summary)?;
    Ok(any_diverged)
}
