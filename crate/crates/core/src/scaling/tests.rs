use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::*;

fn budgets() -> Vec<f64> {
    (0..12).map(|i| 1e15 * 3f64.powi(i)).collect()
}

fn record(model: &str, params: u64, flops: f64, ppl: f64) -> EvalRecord {
    EvalRecord {
        model: model.into(),
        step: (flops / 1e10) as u64,
        params,
        train_flops: flops,
        domain: "synthetic".into(),
        context_len: 2048,
        prefix_len: 1024,
        nll: ppl.ln(),
        ppl,
        rows: 1,
    }
}

#[test]
fn noiseless_power_law_is_recovered() {
    let xs = budgets();
    let ys: Vec<f64> = xs.iter().map(|c| 5.0 * c.powf(-0.22)).collect();
    let fit = fit_points("dec", Covariate::Flops, &xs, &ys, false).unwrap();
    assert!((fit.alpha - 0.22).abs() < 1e-6, "{}", fit.alpha);
    assert!((fit.a / 5.0 - 1.0).abs() < 1e-6);
    assert!(fit.rms_residual < 1e-10);
    assert_eq!(fit.e, None);
    for (&x, &y) in xs.iter().zip(&ys) {
        assert!((fit.predict(x) / y - 1.0).abs() < 1e-9);
    }
}

#[test]
fn one_percent_noise_keeps_alpha_within_tolerance() {
    let xs = budgets();
    let noise = Normal::new(0.0, 0.01).unwrap();
    let mut worst: f64 = 0.0;
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ys: Vec<f64> = xs.iter().map(|c| 5.0 * c.powf(-0.22) * (1.0 + noise.sample(&mut rng))).collect();
        let fit = fit_points("dec", Covariate::Flops, &xs, &ys, false).unwrap();
        worst = worst.max((fit.alpha - 0.22).abs());
    }
    assert!(worst < 0.02, "worst |d alpha| = {worst}");
}

#[test]
fn fits_are_scale_equivariant() {
    let xs = budgets();
    let ys: Vec<f64> = xs.iter().map(|c| 7.0 * c.powf(-0.17)).collect();
    let base = fit_points("red", Covariate::Flops, &xs, &ys, false).unwrap();
    for c in [1e-3, 2.5, 1e4] {
        let scaled: Vec<f64> = xs.iter().map(|x| x * c).collect();
        let fit = fit_points("red", Covariate::Flops, &scaled, &ys, false).unwrap();
        assert!((fit.alpha - base.alpha).abs() < 1e-9);
        assert!((fit.a / (base.a * c.powf(base.alpha)) - 1.0).abs() < 1e-9);
    }
}

#[test]
fn irreducible_term_is_found_by_the_search() {
    let xs: Vec<f64> = (0..15).map(|i| 1e6 * 2f64.powi(i)).collect();
    let ys: Vec<f64> = xs.iter().map(|x| 1.8 + 40.0 * x.powf(-0.3)).collect();
    let fit = fit_points("dec", Covariate::Params, &xs, &ys, true).unwrap();
    let e = fit.e.unwrap();
    assert!((e - 1.8).abs() < 1e-4, "e = {e}");
    assert!((fit.alpha - 0.3).abs() < 1e-3, "alpha = {}", fit.alpha);
    assert!(fit.rms_residual < 1e-6);
    // Bare power law: the search stays at e = 0 or very near it.
    let ys: Vec<f64> = xs.iter().map(|x| 40.0 * x.powf(-0.3)).collect();
    let fit = fit_points("dec", Covariate::Params, &xs, &ys, true).unwrap();
    assert!(fit.e.unwrap() < 1e-6 * ys.iter().cloned().fold(f64::INFINITY, f64::min));
    assert!((fit.alpha - 0.3).abs() < 1e-6);
}

#[test]
fn degenerate_covariates_are_rejected() {
    assert!(matches!(
        fit_points("x", Covariate::Flops, &[1.0, 1.0, 2.0, 2.0], &[3.0, 3.0, 2.0, 2.0], false),
        Err(Error::Degenerate(_))
    ));
    assert!(fit_points("x", Covariate::Flops, &[1.0, 2.0, 3.0], &[3.0, -1.0, 2.0], false).is_err());
}

#[test]
fn fit_from_records_uses_the_chosen_covariate() {
    let recs: Vec<_> = (1..6).map(|i| record("dec-x", 1000 * i, 1e12 * i as f64, 9.0 * (1000.0 * i as f64).powf(-0.1))).collect();
    let fit = fit_power_law("dec", &recs, Covariate::Params, false).unwrap();
    assert!((fit.alpha - 0.1).abs() < 1e-9);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("fit.json");
    write_fits(&path, std::slice::from_ref(&fit)).unwrap();
    assert_eq!(read_fits(&path).unwrap(), vec![fit]);
    let text = std::fs::read_to_string(&path).unwrap();
    for key in ["family", "covariate", "\"a\"", "alpha", "\"e\"", "rms_residual"] {
        assert!(text.contains(key), "{key}");
    }
}

/// Minimum over every record that costs no more than the budget.
fn brute_force_frontier(records: &[EvalRecord]) -> Vec<(f64, String, f64)> {
    let mut budgets: Vec<f64> = records.iter().map(|r| r.train_flops).collect();
    budgets.sort_by(f64::total_cmp);
    budgets.dedup();
    budgets
        .into_iter()
        .map(|b| {
            let best = records
                .iter()
                .filter(|r| r.train_flops <= b)
                .min_by(|x, y| x.ppl.total_cmp(&y.ppl).then(x.train_flops.total_cmp(&y.train_flops)))
                .unwrap();
            (b, best.model.clone(), best.ppl)
        })
        .collect()
}

fn crossing_curves() -> Vec<EvalRecord> {
    let mut recs = Vec::new();
    for i in 0..20 {
        let c = 2f64.powf(i as f64 + 0.5);
        recs.push(record("a", 1, c, 10.0 * c.powf(-0.1)));
        recs.push(record("b", 2, c, 20.0 * c.powf(-0.2)));
    }
    recs
}

#[test]
fn frontier_switches_at_the_crossing_budget() {
    let recs = crossing_curves();
    let f = pareto_frontier(&recs).unwrap();
    let oracle = brute_force_frontier(&recs);
    assert_eq!(f.len(), oracle.len());
    for (p, (b, m, ppl)) in f.iter().zip(&oracle) {
        assert_eq!((p.budget, &p.model, p.ppl), (*b, m, *ppl));
    }
    // The curves cross at 2^10.
    for p in &f {
        assert_eq!(p.model, if p.budget < 1024.0 { "a" } else { "b" });
    }
}

#[test]
fn dominated_and_single_model_frontiers() {
    let mut recs: Vec<_> = (1..8).map(|i| record("a", 1, i as f64, 10.0 / i as f64)).collect();
    let only_a = pareto_frontier(&recs).unwrap();
    assert!(only_a.iter().all(|p| p.model == "a"));
    recs.extend((1..8).map(|i| record("b", 2, i as f64, 20.0 / i as f64)));
    let f = pareto_frontier(&recs).unwrap();
    assert_eq!(f, only_a);
    assert!(pareto_frontier(&[]).is_err());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("frontier.csv");
    write_frontier(&path, &f).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().next().unwrap(), FRONTIER_HEADER);
    assert_eq!(text.lines().count(), f.len() + 1);
}

proptest! {
    #[test]
    fn frontier_is_monotone_subset_matching_brute_force(
        pts in prop::collection::vec((1u32..50, 1u32..1000, 0usize..3), 1..40)
    ) {
        let recs: Vec<EvalRecord> = pts
            .iter()
            .enumerate()
            .map(|(i, &(c, p, m))| record(["x", "y", "z"][m], 1, c as f64, p as f64 + i as f64 * 1e-6))
            .collect();
        let f = pareto_frontier(&recs).unwrap();
        let oracle = brute_force_frontier(&recs);
        prop_assert_eq!(f.len(), oracle.len());
        for (p, (b, m, ppl)) in f.iter().zip(&oracle) {
            prop_assert_eq!((p.budget, &p.model, p.ppl), (*b, m, *ppl));
            prop_assert!(recs.iter().any(|r| r.train_flops <= p.budget && r.ppl == p.ppl && r.model == p.model));
        }
        prop_assert!(f.windows(2).all(|w| w[1].ppl <= w[0].ppl));
    }
}

/// Loss surface `E + A/N^alpha + B/D^beta` with `D = C / (6N)`, written per
/// size as a power law in C.
fn synthetic_curve(n: f64, alpha: f64, beta: f64) -> SizeCurve {
    let (e, a, b) = (1.5, 400.0, 400.0);
    SizeCurve {
        model: format!("n{n}"),
        params: n,
        fit: PowerLawFit {
            family: "syn".into(),
            covariate: Covariate::Flops,
            a: b * (6.0 * n).powf(beta),
            alpha: beta,
            e: Some(e + a * n.powf(-alpha)),
            rms_residual: 0.0,
        },
        flops_min: 1e12,
        flops_max: 1e16,
    }
}

#[test]
fn isoflop_argmin_lands_on_the_constructed_optimum() {
    // With equal exponents and A = B the optimum is N* = sqrt(C / 6).
    let curves: Vec<_> = (10..31).map(|j| synthetic_curve(2f64.powi(j), 0.3, 0.3)).collect();
    let c = 6.0 * 2f64.powi(40);
    let s = &isoflop_slice("syn", &curves, &[c]).unwrap()[0];
    assert_eq!(s.points[s.argmin].params, 2f64.powi(20));
    assert!((s.optimal_params / 2f64.powi(20) - 1.0).abs() < 1e-9);
    assert!(!s.degenerate);

    let doubled = &isoflop_slice("syn", &curves, &[2.0 * c]).unwrap()[0];
    assert!(doubled.optimal_params > s.optimal_params);
    let ratio = doubled.optimal_params / s.optimal_params;
    assert!((ratio / 2f64.sqrt() - 1.0).abs() < 0.05, "ratio {ratio}");
}

#[test]
fn isoflop_flags_single_sizes_and_extrapolation() {
    let one = [synthetic_curve(1e6, 0.3, 0.3)];
    let s = isoflop_slice("syn", &one, &[1e14]).unwrap();
    assert!(s[0].degenerate);
    assert_eq!(s[0].points.len(), 1);
    assert!(!s[0].extrapolated);
    let far = isoflop_slice("syn", &one, &[1e20]).unwrap();
    assert!(far[0].extrapolated && far[0].points[0].extrapolated);
    assert!(isoflop_slice("syn", &[], &[1.0]).is_err());
}

#[test]
fn isoflop_through_fitted_size_curves() {
    let (e, a, b, alpha, beta) = (1.5, 400.0, 400.0, 0.3, 0.3);
    let loss = |n: f64, c: f64| e + a * n.powf(-alpha) + b * (c / (6.0 * n)).powf(-beta);
    let curves: Vec<SizeCurve> = (14..27)
        .map(|j| {
            let n = 2f64.powi(j);
            let recs: Vec<_> = (0..12)
                .map(|i| {
                    let c = 6.0 * n * n * 2f64.powf(-3.0 + 0.5 * i as f64);
                    record(&format!("n{j}"), n as u64, c, loss(n, c))
                })
                .collect();
            SizeCurve::from_records(&recs, true).unwrap()
        })
        .collect();
    let c = 6.0 * 2f64.powi(40);
    let s = &isoflop_slice("syn", &curves, &[c]).unwrap()[0];
    assert_eq!(s.points[s.argmin].params, 2f64.powi(20));
    assert!(!s.points[s.argmin].extrapolated);
}
