use ftlab::data::{make_task, DomainShift, ShiftKind, TaskSpec};
use ftlab::model::ModelConfig;
use ftlab::peft::{attach, PeftMethod, PeftSpec};
use ftlab::tracking::*;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(0);
    let total: u64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(2000);
    let lr: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(1.5e-3);
    let task = make_task(&TaskSpec {
        num_classes_upstream: 10, num_classes_downstream: 50, class_tree: None,
        separation: 2.5, image_size: 16, channels: 1, noise_std: 0.05,
        samples_per_class: 8, seed,
    }).unwrap();
    let cfg_up = ModelConfig { depth: 4, embed_dim: 64, heads: 4, patch_size: 4, image_size: 16, channels: 1, num_classes: 10, ffn_ratio: 4 };
    let training = TrainingConfig { lr, weight_decay: 1e-4, batch_size: 8, total_steps: total, seed, pretrain_steps: 300, pretrain_lr: 1e-3 };
    let backbone = pretrain(&cfg_up, &task.upstream, &training).unwrap();
    let cfg = ModelConfig { num_classes: 50, ..cfg_up };
    let w0 = reshape_head(&backbone, &cfg, seed ^ 0xbeef).unwrap();
    let mut att = attach(&PeftSpec::new(PeftMethod::FullFt), &cfg, &w0, seed).unwrap();
    let outcome = run_tracked(&cfg, &w0, &mut att, &task,
        &EvalPlan::Ood(vec![DomainShift { kind: ShiftKind::EdgeSketch, strength: 0.5 }]),
        &Schedule::ood(), &training, 256, None).unwrap();
    for r in &outcome.records {
        eprintln!("step {:5}  train {:.3}  test {:.3}  ood {:.3}  loss {:.4}",
            r.step, r.train_acc, r.test_acc, r.ood_acc["edge_sketch"], r.train_loss);
    }
    let peak = detect_peak(&outcome.records, &SeriesKey::Ood("edge_sketch".into()), 0.02).unwrap();
    eprintln!("OOD seed {seed}: peak {:.3}@{} final {:.3} declined {}", peak.peak_value, peak.peak_step, peak.final_value, peak.declined);
}
