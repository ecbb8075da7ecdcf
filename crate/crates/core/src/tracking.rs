//! Adaptive evaluation scheduling and the step-level robustness tracking
//! loop: train, snapshot at scheduled backpropagation steps, evaluate
//! clean/adversarial/OOD accuracy on the frozen snapshot.
//!
//! Training randomness and evaluation randomness come from independent
//! streams keyed by step, so tracking density never alters the training
//! trajectory.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attack::{robust_accuracy, AttackConfig};
use crate::autodiff::{Tape, Tensor};
use crate::data::{apply_shift, Dataset, DomainShift, SyntheticTask};
use crate::error::{Error, Result};
use crate::model::{
    self, AdamState, Checkpoint, ModelConfig, ModelTarget, OptimConfig, Params,
};
use crate::peft::PeftAttachment;
use crate::rng;

pub const DEFAULT_DECLINE_TAU: f64 = 0.02;
pub const DEFAULT_EVAL_SUBSET: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    Adversarial,
    Ood,
}

/// A contiguous stride table. Steps are emitted inside each half-open
/// range `(start, end]` whenever the step is a multiple of the stride;
/// step 0 and the final step are always included.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Schedule {
    pub mode: ScheduleMode,
    /// (range_start, range_end, stride); `None` end means unbounded.
    pub ranges: Vec<(u64, Option<u64>, u64)>,
}

impl Schedule {
    /// The adversarial-tracking stride table: every 50 steps to 700, every
    /// 1,000 to 3,000, every 6,000 beyond.
    pub fn adversarial() -> Self {
        Schedule {
            mode: ScheduleMode::Adversarial,
            ranges: vec![
                (0, Some(700), 50),
                (700, Some(3_000), 1_000),
                (3_000, None, 6_000),
            ],
        }
    }

    /// The OOD stride table: every 200 steps to 1,000, 2,000 to 3,000,
    /// 4,000 to 10,000, 6,000 to 30,000, 20,000 beyond.
    pub fn ood() -> Self {
        Schedule {
            mode: ScheduleMode::Ood,
            ranges: vec![
                (0, Some(1_000), 200),
                (1_000, Some(3_000), 2_000),
                (3_000, Some(10_000), 4_000),
                (10_000, Some(30_000), 6_000),
                (30_000, None, 20_000),
            ],
        }
    }

    pub fn standard(mode: ScheduleMode) -> Self {
        match mode {
            ScheduleMode::Adversarial => Schedule::adversarial(),
            ScheduleMode::Ood => Schedule::ood(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ranges.is_empty() {
            return Err(Error::Config("schedule has no ranges".into()));
        }
        let mut expected_start = 0;
        for (i, &(start, end, stride)) in self.ranges.iter().enumerate() {
            if stride == 0 {
                return Err(Error::Config(format!("schedule range {i} has zero stride")));
            }
            if start != expected_start {
                return Err(Error::Config(format!(
                    "schedule range {i} starts at {start}, expected {expected_start}"
                )));
            }
            match end {
                Some(e) if e <= start => {
                    return Err(Error::Config(format!("schedule range {i} is empty")));
                }
                Some(e) => expected_start = e,
                None => {
                    if i + 1 != self.ranges.len() {
                        return Err(Error::Config(
                            "only the last schedule range may be unbounded".into(),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    /// All evaluation steps for a training budget, strictly increasing.
    pub fn eval_steps(&self, total_steps: u64) -> Vec<u64> {
        let mut steps = vec![0];
        for &(start, end, stride) in &self.ranges {
            let hi = end.unwrap_or(u64::MAX).min(total_steps);
            // multiples of the stride inside (start, hi]
            let mut s = (start / stride + 1) * stride;
            while s <= hi {
                if s > start {
                    steps.push(s);
                }
                s += stride;
            }
        }
        if *steps.last().unwrap() != total_steps {
            steps.push(total_steps);
        }
        steps.dedup();
        steps
    }
}

/// One evaluation snapshot.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrackRecord {
    pub step: u64,
    pub train_acc: f64,
    pub test_acc: f64,
    /// Adversarial accuracy (adversarial mode).
    pub adv_acc: Option<f64>,
    /// Per-domain accuracy under shift (OOD mode).
    pub ood_acc: BTreeMap<String, f64>,
    pub train_loss: f64,
    pub checkpoint_id: String,
}

/// What to measure at each snapshot.
#[derive(Debug, Clone)]
pub enum EvalPlan {
    Adversarial(AttackConfig),
    Ood(Vec<DomainShift>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub seed: u64,
    #[serde(default = "default_pretrain_steps")]
    pub pretrain_steps: u64,
    #[serde(default = "default_pretrain_lr")]
    pub pretrain_lr: f64,
}

fn default_pretrain_steps() -> u64 {
    400
}

fn default_pretrain_lr() -> f64 {
    1e-3
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("training.batch_size must be positive".into()));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::Config("training.lr must be non-negative".into()));
        }
        Ok(())
    }
}

/// Epoch-shuffled batch index stream.
struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: rand_chacha::ChaCha8Rng,
}

impl BatchSampler {
    fn new(n: usize, seed: u64, label: &str) -> Self {
        BatchSampler {
            order: (0..n).collect(),
            pos: n, // force a shuffle on first use
            rng: rng::stream(seed, label),
        }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        use rand::seq::SliceRandom;
        let mut batch = Vec::with_capacity(size);
        while batch.len() < size {
            if self.pos >= self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            batch.push(self.order[self.pos]);
            self.pos += 1;
        }
        batch
    }
}

/// Accuracy and mean loss over a dataset, batched.
fn accuracy_and_loss(
    cfg: &ModelConfig,
    params: &Params,
    peft: Option<&PeftAttachment>,
    data: &Dataset,
) -> Result<(f64, f64)> {
    use rayon::prelude::*;
    let totals = data
        .samples
        .par_chunks(32)
        .map(|chunk| -> Result<(usize, f64)> {
            let images: Vec<Tensor> = chunk.iter().map(|(x, _)| x.clone()).collect();
            let labels: Vec<usize> = chunk.iter().map(|(_, y)| *y).collect();
            let logits = model::forward_logits(cfg, params, peft, &images)?;
            let correct = labels
                .iter()
                .enumerate()
                .filter(|(i, y)| logits.argmax_row(*i) == **y)
                .count();
            let mut tape = Tape::new();
            let lv = tape.constant(logits);
            let loss = tape.cross_entropy(lv, &labels)?;
            Ok((correct, tape.value(loss).item() * labels.len() as f64))
        })
        .try_reduce(|| (0, 0.0), |a, b| Ok((a.0 + b.0, a.1 + b.1)))?;
    let n = data.len() as f64;
    Ok((totals.0 as f64 / n, totals.1 / n))
}

/// Fixed evaluation pools plus pre-shifted OOD views, built once per run.
pub struct Evaluator {
    cfg: ModelConfig,
    train_eval: Dataset,
    test_eval: Dataset,
    shifted: Vec<(String, Dataset)>,
    attack: Option<AttackConfig>,
    seed: u64,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

impl Evaluator {
    pub fn new(
        cfg: &ModelConfig,
        task: &SyntheticTask,
        plan: &EvalPlan,
        subset_size: usize,
        seed: u64,
    ) -> Result<Self> {
        let train_indices = pick_subset(task.train.len(), subset_size, seed, "eval-train-subset");
        let test_indices = pick_subset(task.test.len(), subset_size, seed, "eval-test-subset");
        let train_eval = task.train.subset(&train_indices);
        let test_eval = task.test.subset(&test_indices);
        let mut shifted = Vec::new();
        let mut attack = None;
        match plan {
            EvalPlan::Adversarial(cfg_attack) => {
                cfg_attack.validate()?;
                attack = Some(cfg_attack.clone());
            }
            EvalPlan::Ood(shifts) => {
                for shift in shifts {
                    shifted.push((
                        shift.kind.name().to_string(),
                        apply_shift(&test_eval, shift, seed)?,
                    ));
                }
            }
        }
        Ok(Evaluator {
            cfg: cfg.clone(),
            train_eval,
            test_eval,
            shifted,
            attack,
            seed,
            train_indices,
            test_indices,
        })
    }

    /// Evaluate a frozen snapshot. Depends only on (snapshot, step, seed),
    /// so re-evaluating a reloaded checkpoint reproduces the record.
    pub fn evaluate(
        &self,
        params: &Params,
        peft: Option<&PeftAttachment>,
        step: u64,
    ) -> Result<TrackRecord> {
        let (train_acc, train_loss) =
            accuracy_and_loss(&self.cfg, params, peft, &self.train_eval)?;
        let (test_acc, _) = accuracy_and_loss(&self.cfg, params, peft, &self.test_eval)?;
        let mut adv_acc = None;
        let mut ood_acc = BTreeMap::new();
        if let Some(attack_cfg) = &self.attack {
            let target = ModelTarget {
                cfg: &self.cfg,
                params,
                peft,
            };
            let data: Vec<(Tensor, i64)> = self
                .test_eval
                .samples
                .iter()
                .map(|(x, y)| (x.clone(), *y as i64))
                .collect();
            let attack_seed = self.seed ^ step.wrapping_mul(0x9e3779b97f4a7c15);
            adv_acc = Some(robust_accuracy(&target, &data, attack_cfg, attack_seed)?);
        }
        for (name, shifted) in &self.shifted {
            let (acc, _) = accuracy_and_loss(&self.cfg, params, peft, shifted)?;
            ood_acc.insert(name.clone(), acc);
        }
        Ok(TrackRecord {
            step,
            train_acc,
            test_acc,
            adv_acc,
            ood_acc,
            train_loss,
            checkpoint_id: checkpoint_id(step),
        })
    }
}

fn pick_subset(n: usize, size: usize, seed: u64, label: &str) -> Vec<usize> {
    use rand::seq::SliceRandom;
    if size >= n {
        return (0..n).collect();
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut r = rng::stream(seed, label);
    order.shuffle(&mut r);
    order.truncate(size);
    order.sort_unstable();
    order
}

pub fn checkpoint_id(step: u64) -> String {
    format!("step_{step:08}")
}

#[derive(Debug)]
pub struct RunOutcome {
    pub records: Vec<TrackRecord>,
    pub diverged: bool,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

/// Train with the attachment's trainable set while evaluating scheduled
/// snapshots. Evaluation never touches training state. Divergence aborts
/// the loop and flags the partial log. When `out_dir` is given, every
/// evaluated snapshot is persisted to `checkpoints/`.
#[allow(clippy::too_many_arguments)]
pub fn run_tracked(
    cfg: &ModelConfig,
    w0: &Params,
    attachment: &mut PeftAttachment,
    task: &SyntheticTask,
    plan: &EvalPlan,
    schedule: &Schedule,
    training: &TrainingConfig,
    eval_subset: usize,
    out_dir: Option<&Path>,
) -> Result<RunOutcome> {
    schedule.validate()?;
    training.validate()?;
    model::validate_params(cfg, w0)?;
    let evaluator = Evaluator::new(cfg, task, plan, eval_subset, training.seed)?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir.join("checkpoints"))?;
    }

    let mut params = w0.clone();
    let trainable = attachment.trainable();
    let eval_at: HashSet<u64> = schedule
        .eval_steps(training.total_steps)
        .into_iter()
        .collect();
    let mut sampler = BatchSampler::new(task.train.len(), training.seed, "train-batches");
    let opt = OptimConfig {
        lr: training.lr,
        weight_decay: training.weight_decay,
    };
    let mut state = AdamState::new();
    let mut records = Vec::new();
    let mut diverged = false;

    for step in 0..=training.total_steps {
        if eval_at.contains(&step) {
            let record = evaluator.evaluate(&params, Some(attachment), step)?;
            if let Some(dir) = out_dir {
                let path = dir.join("checkpoints").join(format!("{}.json", record.checkpoint_id));
                Checkpoint::new(cfg, &params)
                    .with_attachment(attachment)
                    .save(&path)?;
            }
            records.push(record);
        }
        if step == training.total_steps {
            break;
        }
        let batch = sampler.next_batch(training.batch_size);
        let images: Vec<Tensor> = batch.iter().map(|&i| task.train.samples[i].0.clone()).collect();
        let labels: Vec<usize> = batch.iter().map(|&i| task.train.samples[i].1).collect();
        match model::train_step(
            cfg,
            &mut params,
            Some(attachment),
            &trainable,
            &images,
            &labels,
            &opt,
            &mut state,
        ) {
            Ok(_) => {}
            Err(Error::Diverged { .. }) => {
                diverged = true;
                break;
            }
            Err(e) => return Err(e),
        }
    }

    Ok(RunOutcome {
        records,
        diverged,
        train_indices: evaluator.train_indices.clone(),
        test_indices: evaluator.test_indices.clone(),
    })
}

/// Train every parameter on the upstream task, simulating pre-training;
/// returns W0.
pub fn pretrain(
    cfg_upstream: &ModelConfig,
    upstream: &Dataset,
    training: &TrainingConfig,
) -> Result<Params> {
    let mut params = model::init_params(cfg_upstream, training.seed)?;
    let trainable: BTreeSet<String> = model::census(cfg_upstream)
        .into_iter()
        .map(|(n, _)| n)
        .collect();
    let mut sampler = BatchSampler::new(upstream.len(), training.seed, "pretrain-batches");
    let opt = OptimConfig {
        lr: training.pretrain_lr,
        weight_decay: training.weight_decay,
    };
    let mut state = AdamState::new();
    for _ in 0..training.pretrain_steps {
        let batch = sampler.next_batch(training.batch_size);
        let images: Vec<Tensor> = batch.iter().map(|&i| upstream.samples[i].0.clone()).collect();
        let labels: Vec<usize> = batch.iter().map(|&i| upstream.samples[i].1).collect();
        model::train_step(
            cfg_upstream,
            &mut params,
            None,
            &trainable,
            &images,
            &labels,
            &opt,
            &mut state,
        )?;
    }
    Ok(params)
}

/// Swap the classification head for a downstream task: keep the backbone,
/// re-initialize `head.w`/`head.b` at the new class count.
pub fn reshape_head(pretrained: &Params, cfg_downstream: &ModelConfig, seed: u64) -> Result<Params> {
    let mut params = pretrained.clone();
    let fresh = model::init_params(cfg_downstream, seed)?;
    params.insert("head.w", fresh.get("head.w")?.clone());
    params.insert("head.b", fresh.get("head.b")?.clone());
    model::validate_params(cfg_downstream, &params)?;
    Ok(params)
}

/// Which tracked series to analyze.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SeriesKey {
    TrainAcc,
    TestAcc,
    AdvAcc,
    Ood(String),
}

impl SeriesKey {
    fn get(&self, r: &TrackRecord) -> Option<f64> {
        match self {
            SeriesKey::TrainAcc => Some(r.train_acc),
            SeriesKey::TestAcc => Some(r.test_acc),
            SeriesKey::AdvAcc => r.adv_acc,
            SeriesKey::Ood(domain) => r.ood_acc.get(domain).copied(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PeakReport {
    pub peak_step: u64,
    pub peak_value: f64,
    pub final_value: f64,
    /// true when peak - final exceeds the decline threshold.
    pub declined: bool,
}

/// Locate the series peak (earliest step on ties) and flag
/// rise-peak-decline when the final value sits more than `tau` below it.
pub fn detect_peak(records: &[TrackRecord], key: &SeriesKey, tau: f64) -> Result<PeakReport> {
    if records.len() < 3 {
        return Err(Error::Analysis(format!(
            "peak detection needs at least 3 records, got {}",
            records.len()
        )));
    }
    let series: Vec<(u64, f64)> = records
        .iter()
        .filter_map(|r| key.get(r).map(|v| (r.step, v)))
        .collect();
    if series.len() < 3 {
        return Err(Error::Analysis(format!(
            "series {key:?} present in only {} records",
            series.len()
        )));
    }
    let mut peak = series[0];
    for &(step, v) in &series[1..] {
        if v > peak.1 {
            peak = (step, v);
        }
    }
    let final_value = series.last().unwrap().1;
    Ok(PeakReport {
        peak_step: peak.0,
        peak_value: peak.1,
        final_value,
        declined: peak.1 - final_value > tau,
    })
}

/// Column layout of a track log, fixed by the mode and OOD domains.
fn csv_header(domains: &[String], adversarial: bool) -> String {
    let mut cols = vec!["step", "train_acc", "test_acc"];
    if adversarial {
        cols.push("adv_acc");
    }
    let domain_cols: Vec<String> = domains.iter().map(|d| format!("ood_{d}")).collect();
    let mut header: Vec<String> = cols.iter().map(|s| s.to_string()).collect();
    header.extend(domain_cols);
    header.push("train_loss".into());
    header.push("checkpoint_id".into());
    header.join(",")
}

/// Serialize records as the track-log CSV.
pub fn write_track_csv(records: &[TrackRecord]) -> String {
    let domains: Vec<String> = records
        .first()
        .map(|r| r.ood_acc.keys().cloned().collect())
        .unwrap_or_default();
    let adversarial = records.first().map(|r| r.adv_acc.is_some()).unwrap_or(false);
    let mut out = csv_header(&domains, adversarial);
    out.push('\n');
    for r in records {
        let mut cols = vec![r.step.to_string(), r.train_acc.to_string(), r.test_acc.to_string()];
        if adversarial {
            cols.push(r.adv_acc.unwrap_or(f64::NAN).to_string());
        }
        for d in &domains {
            cols.push(r.ood_acc.get(d).copied().unwrap_or(f64::NAN).to_string());
        }
        cols.push(r.train_loss.to_string());
        cols.push(r.checkpoint_id.clone());
        out.push_str(&cols.join(","));
        out.push('\n');
    }
    out
}

/// Parse a track-log CSV, reporting malformed rows by line number.
pub fn read_track_csv(text: &str, path: &str) -> Result<Vec<TrackRecord>> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Csv {
            path: path.to_string(),
            line: 1,
            msg: "empty file".into(),
        })?;
    let cols: Vec<&str> = header.split(',').collect();
    let field = |name: &str| cols.iter().position(|c| *c == name);
    let step_i = field("step").ok_or_else(|| Error::Csv {
        path: path.to_string(),
        line: 1,
        msg: "missing `step` column".into(),
    })?;
    let train_i = field("train_acc").ok_or_else(|| Error::Csv {
        path: path.to_string(),
        line: 1,
        msg: "missing `train_acc` column".into(),
    })?;
    let test_i = field("test_acc").ok_or_else(|| Error::Csv {
        path: path.to_string(),
        line: 1,
        msg: "missing `test_acc` column".into(),
    })?;
    let adv_i = field("adv_acc");
    let loss_i = field("train_loss");
    let ckpt_i = field("checkpoint_id");
    let ood_cols: Vec<(usize, String)> = cols
        .iter()
        .enumerate()
        .filter_map(|(i, c)| c.strip_prefix("ood_").map(|d| (i, d.to_string())))
        .collect();

    let mut records = Vec::new();
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(Error::Csv {
                path: path.to_string(),
                line: lineno + 1,
                msg: format!("expected {} fields, found {}", cols.len(), fields.len()),
            });
        }
        let parse_f = |i: usize| -> Result<f64> {
            fields[i].parse().map_err(|_| Error::Csv {
                path: path.to_string(),
                line: lineno + 1,
                msg: format!("`{}` is not a number", fields[i]),
            })
        };
        let step: u64 = fields[step_i].parse().map_err(|_| Error::Csv {
            path: path.to_string(),
            line: lineno + 1,
            msg: format!("`{}` is not a step index", fields[step_i]),
        })?;
        let mut ood_acc = BTreeMap::new();
        for (i, domain) in &ood_cols {
            ood_acc.insert(domain.clone(), parse_f(*i)?);
        }
        records.push(TrackRecord {
            step,
            train_acc: parse_f(train_i)?,
            test_acc: parse_f(test_i)?,
            adv_acc: adv_i.map(parse_f).transpose()?,
            ood_acc,
            train_loss: loss_i.map(parse_f).transpose()?.unwrap_or(f64::NAN),
            checkpoint_id: ckpt_i.map(|i| fields[i].to_string()).unwrap_or_default(),
        });
    }
    Ok(records)
}
