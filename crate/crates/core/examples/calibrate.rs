use ftlab::attack::AttackConfig;
use ftlab::data::{make_task, TaskSpec};
use ftlab::model::ModelConfig;
use ftlab::peft::{attach, PeftMethod, PeftSpec};
use ftlab::tracking::*;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let sep: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(0.8);
    let noise: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0.08);
    let eps: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0.02);
    let total: u64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(800);
    let seed: u64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(0);
    let lr: f64 = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let spc: usize = args.get(7).map(|s| s.parse().unwrap()).unwrap_or(16);
    let batch: usize = args.get(8).map(|s| s.parse().unwrap()).unwrap_or(16);
    let subset: usize = args.get(9).map(|s| s.parse().unwrap()).unwrap_or(96);
    let depth: usize = args.get(10).map(|s| s.parse().unwrap()).unwrap_or(4);

    let task = make_task(&TaskSpec {
        num_classes_upstream: 10, num_classes_downstream: 50, class_tree: None,
        separation: sep, image_size: 16, channels: 1, noise_std: noise,
        samples_per_class: spc, seed,
    }).unwrap();
    let cfg_up = ModelConfig { depth, embed_dim: 64, heads: 4, patch_size: 4, image_size: 16, channels: 1, num_classes: 10, ffn_ratio: 4 };
    let training = TrainingConfig { lr, weight_decay: 1e-4, batch_size: batch, total_steps: total, seed, pretrain_steps: 300, pretrain_lr: 1e-3 };
    let t0 = std::time::Instant::now();
    let backbone = pretrain(&cfg_up, &task.upstream, &training).unwrap();
    eprintln!("pretrain {:.1}s", t0.elapsed().as_secs_f64());
    let cfg = ModelConfig { num_classes: 50, ..cfg_up };
    let w0 = reshape_head(&backbone, &cfg, seed ^ 0xbeef).unwrap();
    let mut att = attach(&PeftSpec::new(PeftMethod::FullFt), &cfg, &w0, seed).unwrap();
    let attack = AttackConfig { epsilon: eps, alpha: eps / 4.0, steps: 8, random_start: false, clamp: (0.0, 1.0) };
    let t1 = std::time::Instant::now();
    let outcome = run_tracked(&cfg, &w0, &mut att, &task,
        &EvalPlan::Adversarial(attack), &Schedule::adversarial(),
        &training, subset, None).unwrap();
    eprintln!("tracked run {:.1}s", t1.elapsed().as_secs_f64());
    for r in &outcome.records {
        eprintln!("step {:4}  train {:.3}  test {:.3}  adv {:.3}  loss {:.4}",
            r.step, r.train_acc, r.test_acc, r.adv_acc.unwrap(), r.train_loss);
    }
    let peak = detect_peak(&outcome.records, &SeriesKey::AdvAcc, 0.02).unwrap();
    let test_at_peak = outcome.records.iter().find(|r| r.step == peak.peak_step).unwrap().test_acc;
    let final_test = outcome.records.last().unwrap().test_acc;
    eprintln!("PEAK step {} value {:.3} final {:.3} declined {}  | test@peak {:.3} final_test {:.3} improves {}",
        peak.peak_step, peak.peak_value, peak.final_value, peak.declined, test_at_peak, final_test, final_test > test_at_peak);
}
