//! Cross-run trade-off analysis: frontiers, AUC table, peaks, plot data.

use std::path::Path;

use ftlab::analysis::{auc, frontier_slope_profile, pareto_frontier, relative_auc, ParetoPoint};
use ftlab::tracking::{detect_peak, SeriesKey, TrackRecord, DEFAULT_DECLINE_TAU};
use ftlab::{Error, Result};

use crate::runner::load_run;

/// Robustness coordinate of a record: adversarial accuracy when tracked,
/// otherwise the mean accuracy across OOD domains.
fn robustness_of(r: &TrackRecord) -> Option<f64> {
    if let Some(adv) = r.adv_acc {
        return Some(adv);
    }
    if r.ood_acc.is_empty() {
        return None;
    }
    Some(r.ood_acc.values().sum::<f64>() / r.ood_acc.len() as f64)
}

fn run_id(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

pub fn analyze(run_dirs: &[std::path::PathBuf], out: &Path) -> Result<()> {
    if run_dirs.is_empty() {
        return Err(Error::Config("analyze needs at least one run directory".into()));
    }
    std::fs::create_dir_all(out.join("plotdata"))?;

    let mut pareto_csv = String::from("run,method,step,accuracy,robustness\n");
    let mut peaks_csv =
        String::from("run,method,series,peak_step,peak_value,final_value,declined\n");
    let mut auc_rows: Vec<(String, String, f64, f64, f64)> = Vec::new(); // run, method, auc, max_slope, curve_len

    for dir in run_dirs {
        let (cfg, records, _) = load_run(dir)?;
        let id = run_id(dir);
        let method = cfg.peft.method.name().to_string();

        // the full trade-off space: every tracked state of the run
        let points: Vec<ParetoPoint> = records
            .iter()
            .filter_map(|r| {
                robustness_of(r).map(|rob| ParetoPoint::new(r.test_acc, rob, r.step, id.clone()))
            })
            .collect();
        if points.is_empty() {
            return Err(Error::Analysis(format!(
                "{}: no robustness series in track.csv",
                dir.display()
            )));
        }
        let frontier = pareto_frontier(&points)?;
        let area = auc(&frontier)?;
        let profile = frontier_slope_profile(&frontier);
        auc_rows.push((
            id.clone(),
            method.clone(),
            area,
            profile.max_abs_slope,
            profile.curve_length,
        ));

        let mut frontier_csv = String::from("accuracy,robustness,step\n");
        for p in frontier.points() {
            pareto_csv.push_str(&format!(
                "{},{},{},{},{}\n",
                id, method, p.step, p.accuracy, p.robustness
            ));
            frontier_csv.push_str(&format!("{},{},{}\n", p.accuracy, p.robustness, p.step));
        }
        std::fs::write(out.join("plotdata").join(format!("frontier_{id}.csv")), frontier_csv)?;

        // peak reports for every tracked series
        let mut keys = vec![
            ("test_acc".to_string(), SeriesKey::TestAcc),
            ("train_acc".to_string(), SeriesKey::TrainAcc),
        ];
        if records.iter().any(|r| r.adv_acc.is_some()) {
            keys.push(("adv_acc".to_string(), SeriesKey::AdvAcc));
        }
        if let Some(first) = records.first() {
            for domain in first.ood_acc.keys() {
                keys.push((format!("ood_{domain}"), SeriesKey::Ood(domain.clone())));
            }
        }
        for (label, key) in keys {
            if let Ok(report) = detect_peak(&records, &key, DEFAULT_DECLINE_TAU) {
                peaks_csv.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    id,
                    method,
                    label,
                    report.peak_step,
                    report.peak_value,
                    report.final_value,
                    report.declined
                ));
            }
        }

        // per-run curve data (training curves figure)
        let curves = ftlab::tracking::write_track_csv(&records);
        std::fs::write(out.join("plotdata").join(format!("curves_{id}.csv")), curves)?;
    }

    let mut auc_csv = String::from("run,method,auc,relative_pct,max_abs_slope,curve_length\n");
    let by_method: Vec<(String, f64)> = auc_rows
        .iter()
        .map(|(id, _, a, _, _)| (id.clone(), *a))
        .collect();
    let relative: std::collections::BTreeMap<String, f64> = if by_method.len() >= 2 {
        relative_auc(&by_method)?.into_iter().collect()
    } else {
        by_method.iter().map(|(id, _)| (id.clone(), 0.0)).collect()
    };
    for (id, method, area, slope, len) in &auc_rows {
        auc_csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            id, method, area, relative[id], slope, len
        ));
    }

    std::fs::write(out.join("pareto.csv"), pareto_csv)?;
    std::fs::write(out.join("auc_table.csv"), auc_csv)?;
    std::fs::write(out.join("peaks.csv"), peaks_csv)?;
    Ok(())
}
