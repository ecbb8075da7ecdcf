//! Theory grid command: closed forms against Monte-Carlo estimates.

use std::path::Path;

use ftlab::theory::{
    adv_accuracy_closed, eta_lower_bound, ft_accuracy_closed, monte_carlo_accuracy,
    LinearFtClassifier, TheoryParams,
};
use ftlab::{Error, Result};

#[allow(clippy::too_many_arguments)]
pub fn theory(
    d_grid: &[usize],
    k_grid: &[usize],
    eta_arg: &str,
    target: f64,
    eps_grid: &[f64],
    n: usize,
    steps: usize,
    seed: u64,
    out: Option<&Path>,
) -> Result<()> {
    let fixed_eta: Option<f64> = match eta_arg {
        "auto" => None,
        v => Some(v.parse().map_err(|_| {
            Error::Config(format!("--eta must be a number or `auto`, got `{v}`"))
        })?),
    };

    let mut csv = String::from("d,k,eta,epsilon,closed_acc,closed_adv_acc,mc_acc,mc_adv_acc\n");
    for &d in d_grid {
        for &k in k_grid {
            if k > d {
                continue;
            }
            let eta = match fixed_eta {
                Some(v) => v,
                None => eta_lower_bound(k, d, target)?,
            };
            let params = TheoryParams { d, k, eta, p: 0.95 };
            params.validate()?;
            let classifier = LinearFtClassifier::new(&params)?;
            for &eps in eps_grid {
                let closed = ft_accuracy_closed(&params);
                let closed_adv = adv_accuracy_closed(&params, eps);
                let mc = monte_carlo_accuracy(&classifier, &params, n, 0.0, steps, seed)?;
                let mc_adv = if eps > 0.0 {
                    monte_carlo_accuracy(&classifier, &params, n, eps, steps, seed)?
                } else {
                    mc
                };
                println!(
                    "d = {d}, k = {k}, eta = {eta:.4}, eps = {eps:.4}: \
                     closed accuracy = {closed:.4} (mc {:.4} +- {:.4}), \
                     adversarial = {closed_adv:.4} (mc {:.4} +- {:.4})",
                    mc.accuracy, mc.stderr, mc_adv.accuracy, mc_adv.stderr
                );
                csv.push_str(&format!(
                    "{d},{k},{eta},{eps},{closed},{closed_adv},{},{}\n",
                    mc.accuracy, mc_adv.accuracy
                ));
            }
        }
    }
    if let Some(path) = out {
        std::fs::write(path, csv)?;
        eprintln!("grid written to {}", path.display());
    }
    Ok(())
}
