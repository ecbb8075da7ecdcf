//! Property-based invariants over the numeric substrate and the analysis
//! layer.

use ftlab::analysis::{auc, pareto_frontier, ParetoPoint};
use ftlab::autodiff::{Tape, Tensor};
use ftlab::theory::{adv_accuracy_closed, ft_accuracy_closed, TheoryParams};
use proptest::prelude::*;

fn tensor_strategy(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Tensor> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| {
        proptest::collection::vec(-10.0f64..10.0, r * c)
            .prop_map(move |data| Tensor::from_vec(vec![r, c], data).unwrap())
    })
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(x in tensor_strategy(4, 6)) {
        let mut tape = Tape::new();
        let cols = x.shape()[1];
        let v = tape.leaf(x);
        let s = tape.softmax(v, 1).unwrap();
        for row in tape.value(s).data().chunks(cols) {
            let total: f64 = row.iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-9);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn graph_evaluation_is_bit_deterministic(x in tensor_strategy(3, 5)) {
        let run = |t: &Tensor| {
            let mut tape = Tape::new();
            let v = tape.leaf(t.clone().requires_grad(true));
            let g = tape.gelu(v);
            let s = tape.softmax(g, 1).unwrap();
            let loss = tape.sum(s);
            tape.backward(loss).unwrap();
            (
                tape.value(s).data().to_vec(),
                tape.grad(v).unwrap().to_vec(),
            )
        };
        let (a_val, a_grad) = run(&x);
        let (b_val, b_grad) = run(&x);
        for (a, b) in a_val.iter().zip(&b_val) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
        for (a, b) in a_grad.iter().zip(&b_grad) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn frontier_never_keeps_a_dominated_point(
        coords in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..60)
    ) {
        let points: Vec<ParetoPoint> = coords
            .iter()
            .enumerate()
            .map(|(i, &(a, r))| ParetoPoint::new(a, r, i as u64, "p"))
            .collect();
        let frontier = pareto_frontier(&points).unwrap();
        for kept in frontier.points() {
            for other in &points {
                let strictly_better = other.accuracy >= kept.accuracy
                    && other.robustness >= kept.robustness
                    && (other.accuracy > kept.accuracy || other.robustness > kept.robustness);
                prop_assert!(!strictly_better, "kept point is dominated");
            }
        }
        // and every dropped point is dominated by something kept
        for p in &points {
            let on_frontier = frontier
                .points()
                .iter()
                .any(|k| k.accuracy == p.accuracy && k.robustness == p.robustness);
            if !on_frontier {
                let covered = frontier.points().iter().any(|k| {
                    k.accuracy >= p.accuracy && k.robustness >= p.robustness
                });
                prop_assert!(covered, "dropped point is not dominated");
            }
        }
    }

    #[test]
    fn auc_is_riemann_integrable(
        coords in proptest::collection::vec((0.01f64..1.0, 0.01f64..1.0), 1..40)
    ) {
        let points: Vec<ParetoPoint> = coords
            .iter()
            .enumerate()
            .map(|(i, &(a, r))| ParetoPoint::new(a, r, i as u64, "p"))
            .collect();
        let frontier = pareto_frontier(&points).unwrap();
        let analytic = auc(&frontier).unwrap();
        // fine-grid Riemann sum over the same step-extended curve
        let pts = frontier.points();
        let max_acc = frontier.max_accuracy();
        let n = 40_000usize;
        let h = max_acc / n as f64;
        let mut grid_sum = 0.0;
        for i in 0..n {
            let a = (i as f64 + 0.5) * h;
            // robustness of the extended curve at accuracy a
            let r = if a <= pts[0].accuracy {
                pts[0].robustness
            } else {
                let mut val = 0.0;
                for w in pts.windows(2) {
                    if a >= w[0].accuracy && a <= w[1].accuracy {
                        let t = (a - w[0].accuracy) / (w[1].accuracy - w[0].accuracy);
                        val = w[0].robustness + t * (w[1].robustness - w[0].robustness);
                        break;
                    }
                }
                val
            };
            grid_sum += r * h;
        }
        prop_assert!((analytic - grid_sum).abs() < 1e-4,
            "analytic {} vs grid {}", analytic, grid_sum);
    }

    #[test]
    fn closed_form_attack_never_helps(
        d in 1usize..300,
        k_frac in 0.0f64..=1.0,
        eta in 0.0f64..0.5,
        eps in 0.0f64..0.3
    ) {
        let k = (k_frac * d as f64) as usize;
        let params = TheoryParams { d, k, eta, p: 0.95 };
        let clean = ft_accuracy_closed(&params);
        let adv = adv_accuracy_closed(&params, eps);
        if eps == 0.0 {
            prop_assert_eq!(clean, adv);
        } else {
            prop_assert!(adv <= clean);
            // strictness is only observable before the CDF saturates
            if clean < 1.0 - 1e-12 {
                prop_assert!(adv < clean);
            }
        }
    }
}
