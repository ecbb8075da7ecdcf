//! Pareto-frontier extraction and the trade-off AUC metric.
//!
//! The AUC construction: extend the max-robustness endpoint horizontally
//! to accuracy 0, connect consecutive frontier points by straight
//! segments, drop vertically to robustness 0 from the max-accuracy
//! endpoint, and integrate robustness over accuracy. A single-point
//! frontier is therefore the rectangle accuracy x robustness. Absolute
//! AUC values depend on this construction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One tracked state in the accuracy/robustness trade-off space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub accuracy: f64,
    pub robustness: f64,
    pub step: u64,
    pub run: String,
}

impl ParetoPoint {
    pub fn new(accuracy: f64, robustness: f64, step: u64, run: impl Into<String>) -> Self {
        ParetoPoint {
            accuracy,
            robustness,
            step,
            run: run.into(),
        }
    }
}

/// Non-dominated points, ascending in accuracy with strictly descending
/// robustness.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Frontier {
    points: Vec<ParetoPoint>,
}

impl Frontier {
    pub fn points(&self) -> &[ParetoPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn max_accuracy(&self) -> f64 {
        self.points.last().map(|p| p.accuracy).unwrap_or(0.0)
    }

    pub fn max_robustness(&self) -> f64 {
        self.points.first().map(|p| p.robustness).unwrap_or(0.0)
    }
}

/// The maximal non-dominated subset; duplicate coordinates are kept once.
pub fn pareto_frontier(points: &[ParetoPoint]) -> Result<Frontier> {
    if points.is_empty() {
        return Err(Error::Analysis("pareto frontier of an empty set".into()));
    }
    if let Some(bad) = points
        .iter()
        .find(|p| !p.accuracy.is_finite() || !p.robustness.is_finite())
    {
        return Err(Error::Analysis(format!(
            "non-finite trade-off point at step {}",
            bad.step
        )));
    }
    // sweep by descending accuracy, keeping strictly rising robustness
    let mut sorted: Vec<&ParetoPoint> = points.iter().collect();
    sorted.sort_by(|a, b| {
        b.accuracy
            .partial_cmp(&a.accuracy)
            .unwrap()
            .then(b.robustness.partial_cmp(&a.robustness).unwrap())
            .then(a.step.cmp(&b.step))
    });
    let mut kept: Vec<ParetoPoint> = Vec::new();
    let mut best_rob = f64::NEG_INFINITY;
    for p in sorted {
        if p.robustness > best_rob {
            best_rob = p.robustness;
            kept.push(p.clone());
        }
    }
    kept.reverse(); // ascending accuracy
    Ok(Frontier { points: kept })
}

/// Area under the endpoint-extended frontier.
pub fn auc(frontier: &Frontier) -> Result<f64> {
    if frontier.is_empty() {
        return Err(Error::Analysis("auc of an empty frontier".into()));
    }
    let pts = frontier.points();
    // horizontal extension from accuracy 0 to the first (max-robustness) point
    let mut area = pts[0].accuracy * pts[0].robustness;
    for pair in pts.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        area += (b.accuracy - a.accuracy) * (a.robustness + b.robustness) / 2.0;
    }
    // the vertical drop at max accuracy encloses no further area
    Ok(area)
}

/// Percent above/below the mean AUC per method.
pub fn relative_auc(auc_by_method: &[(String, f64)]) -> Result<Vec<(String, f64)>> {
    if auc_by_method.len() < 2 {
        return Err(Error::Analysis(
            "relative AUC needs at least two methods".into(),
        ));
    }
    let mean: f64 =
        auc_by_method.iter().map(|(_, v)| v).sum::<f64>() / auc_by_method.len() as f64;
    if mean == 0.0 {
        return Err(Error::Analysis("relative AUC undefined at zero mean".into()));
    }
    Ok(auc_by_method
        .iter()
        .map(|(m, v)| (m.clone(), (v / mean - 1.0) * 100.0))
        .collect())
}

/// Per-segment slopes of the frontier, enabling flat/steep comparisons.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SlopeProfile {
    /// d(robustness)/d(accuracy) per consecutive pair, all <= 0.
    pub slopes: Vec<f64>,
    pub max_abs_slope: f64,
    pub curve_length: f64,
}

/// Empty profile for single-point frontiers.
pub fn frontier_slope_profile(frontier: &Frontier) -> SlopeProfile {
    let pts = frontier.points();
    if pts.len() < 2 {
        return SlopeProfile::default();
    }
    let mut slopes = Vec::with_capacity(pts.len() - 1);
    let mut max_abs: f64 = 0.0;
    let mut length = 0.0;
    for pair in pts.windows(2) {
        let da = pair[1].accuracy - pair[0].accuracy;
        let dr = pair[1].robustness - pair[0].robustness;
        let slope = if da == 0.0 { 0.0 } else { dr / da };
        max_abs = max_abs.max(slope.abs());
        length += (da * da + dr * dr).sqrt();
        slopes.push(slope);
    }
    SlopeProfile {
        slopes,
        max_abs_slope: max_abs,
        curve_length: length,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(a: f64, r: f64) -> ParetoPoint {
        ParetoPoint::new(a, r, 0, "t")
    }

    fn dominates(a: &ParetoPoint, b: &ParetoPoint) -> bool {
        a.accuracy >= b.accuracy
            && a.robustness >= b.robustness
            && (a.accuracy > b.accuracy || a.robustness > b.robustness)
    }

    /// O(n^2) pairwise-dominance oracle.
    pub fn brute_force_frontier(points: &[ParetoPoint]) -> Vec<(f64, f64)> {
        let mut kept: Vec<(f64, f64)> = Vec::new();
        for p in points {
            let dominated = points.iter().any(|q| dominates(q, p));
            if !dominated && !kept.contains(&(p.accuracy, p.robustness)) {
                kept.push((p.accuracy, p.robustness));
            }
        }
        kept.sort_by(|a, b| a.partial_cmp(b).unwrap());
        kept
    }

    #[test]
    fn mutually_nondominated_points_all_retained() {
        let f =
            pareto_frontier(&[pt(0.5, 0.2), pt(0.55, 0.15), pt(0.6, 0.1)]).unwrap();
        assert_eq!(f.len(), 3);
    }

    #[test]
    fn dominated_duplicate_accuracy_dropped() {
        let f = pareto_frontier(&[pt(0.5, 0.2), pt(0.5, 0.1)]).unwrap();
        assert_eq!(f.len(), 1);
        assert_eq!(f.points()[0].robustness, 0.2);
    }

    #[test]
    fn exact_duplicates_deduplicated() {
        let f = pareto_frontier(&[pt(0.5, 0.2), pt(0.5, 0.2), pt(0.5, 0.2)]).unwrap();
        assert_eq!(f.len(), 1);
    }

    #[test]
    fn frontier_matches_brute_force_on_random_sets() {
        use rand::Rng;
        let mut r = crate::rng::stream(3, "pareto-test");
        for _ in 0..50 {
            let pts: Vec<ParetoPoint> = (0..100)
                .map(|i| ParetoPoint::new(r.gen(), r.gen(), i, "x"))
                .collect();
            let fast: Vec<(f64, f64)> = pareto_frontier(&pts)
                .unwrap()
                .points()
                .iter()
                .map(|p| (p.accuracy, p.robustness))
                .collect();
            assert_eq!(fast, brute_force_frontier(&pts));
        }
    }

    #[test]
    fn frontier_is_idempotent() {
        use rand::Rng;
        let mut r = crate::rng::stream(4, "pareto-idem");
        let pts: Vec<ParetoPoint> = (0..60)
            .map(|i| ParetoPoint::new(r.gen(), r.gen(), i, "x"))
            .collect();
        let once = pareto_frontier(&pts).unwrap();
        let twice = pareto_frontier(once.points()).unwrap();
        assert_eq!(once.points(), twice.points());
    }

    #[test]
    fn single_point_auc_is_a_rectangle() {
        let f = pareto_frontier(&[pt(0.8, 0.25)]).unwrap();
        assert_eq!(auc(&f).unwrap(), 0.8 * 0.25);
    }

    #[test]
    fn two_point_auc_hand_integration() {
        let f = pareto_frontier(&[pt(0.5, 0.3), pt(0.9, 0.1)]).unwrap();
        let expected = 0.5 * 0.3 + 0.4 * (0.3 + 0.1) / 2.0;
        assert!((auc(&f).unwrap() - expected).abs() < 1e-15);
        assert!((auc(&f).unwrap() - 0.23).abs() < 1e-15);
    }

    #[test]
    fn auc_monotone_under_nondominated_insertion() {
        use rand::Rng;
        let mut r = crate::rng::stream(5, "auc-mono");
        for _ in 0..30 {
            let mut pts: Vec<ParetoPoint> =
                (0..20).map(|i| ParetoPoint::new(r.gen(), r.gen(), i, "x")).collect();
            let before = auc(&pareto_frontier(&pts).unwrap()).unwrap();
            pts.push(ParetoPoint::new(r.gen(), r.gen(), 99, "x"));
            let after = auc(&pareto_frontier(&pts).unwrap()).unwrap();
            assert!(after >= before - 1e-12);
        }
    }

    #[test]
    fn auc_bounded_by_enclosing_rectangle() {
        use rand::Rng;
        let mut r = crate::rng::stream(6, "auc-bound");
        let pts: Vec<ParetoPoint> =
            (0..40).map(|i| ParetoPoint::new(r.gen(), r.gen(), i, "x")).collect();
        let f = pareto_frontier(&pts).unwrap();
        assert!(auc(&f).unwrap() <= f.max_accuracy() * f.max_robustness() + 1e-12);
    }

    #[test]
    fn auc_scales_linearly_with_robustness() {
        use rand::Rng;
        let mut r = crate::rng::stream(7, "auc-scale");
        let pts: Vec<ParetoPoint> =
            (0..25).map(|i| ParetoPoint::new(r.gen(), r.gen(), i, "x")).collect();
        let base = auc(&pareto_frontier(&pts).unwrap()).unwrap();
        let scaled: Vec<ParetoPoint> = pts
            .iter()
            .map(|p| ParetoPoint::new(p.accuracy, p.robustness * 3.0, p.step, "x"))
            .collect();
        let tripled = auc(&pareto_frontier(&scaled).unwrap()).unwrap();
        assert!((tripled - 3.0 * base).abs() < 1e-12);
    }

    #[test]
    fn relative_auc_reproduces_published_percentages() {
        // CUB column of the published AUC table
        let cub = [
            ("bitfit", 0.14),
            ("adapter", 0.07),
            ("lora", 0.12),
            ("compacter", 0.15),
            ("ia3", 0.13),
            ("linear_probe", 0.08),
            ("full_ft", 0.09),
        ];
        let rel = relative_auc(
            &cub.iter().map(|(m, v)| (m.to_string(), *v)).collect::<Vec<_>>(),
        )
        .unwrap();
        let compacter = rel.iter().find(|(m, _)| m == "compacter").unwrap().1;
        assert!((compacter - 34.6).abs() < 0.05, "{compacter}");
    }

    #[test]
    fn relative_auc_zero_deviation_when_equal() {
        let rel = relative_auc(&[
            ("a".to_string(), 0.2),
            ("b".to_string(), 0.2),
            ("c".to_string(), 0.2),
        ])
        .unwrap();
        assert!(rel.iter().all(|(_, v)| v.abs() < 1e-12));
    }

    #[test]
    fn slope_profile_hand_case() {
        let f = pareto_frontier(&[pt(0.5, 0.3), pt(0.9, 0.1)]).unwrap();
        let prof = frontier_slope_profile(&f);
        assert_eq!(prof.slopes.len(), 1);
        assert!((prof.slopes[0] + 0.5).abs() < 1e-12);
        assert!((prof.max_abs_slope - 0.5).abs() < 1e-12);
    }

    #[test]
    fn flat_frontier_has_zero_max_slope() {
        // equal robustness collapses to a single frontier point, so the
        // profile is empty and its max slope is zero
        let f = pareto_frontier(&[pt(0.5, 0.3), pt(0.9, 0.3)]).unwrap();
        let prof = frontier_slope_profile(&f);
        assert_eq!(prof.max_abs_slope, 0.0);
    }

    #[test]
    fn empty_input_is_an_analysis_error() {
        assert!(matches!(
            pareto_frontier(&[]),
            Err(Error::Analysis(_))
        ));
    }
}
