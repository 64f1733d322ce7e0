use macml::cml::CmlContext;
use macml::estimation::{godambe, sub_block, FitOptions, SensitivityEstimator};
use macml::harness::{fit_pair, simulate_dataset, DgpConfig};
use macml::model::PanelDataset;
use macml::selection::{information_criteria, solve_psi, ComparisonOptions, NestedComparison, SelectionRegistry, Verdict};

fn statistic(v: &Verdict) -> f64 {
    match v {
        Verdict::Test(t) => t.statistic,
        Verdict::Criterion { larger, smaller, .. } => larger.claic - smaller.claic + larger.clbic - smaller.clbic,
    }
}

fn comparison(data: &PanelDataset, cfg: &DgpConfig) -> NestedComparison {
    let (wide, narrow) = fit_pair(data, cfg, &CmlContext::default(), &FitOptions::default()).unwrap();
    NestedComparison::new(data, &wide, &narrow, &ComparisonOptions::default()).unwrap()
}

#[test]
fn statistics_ignore_the_order_of_individuals() {
    let cfg = DgpConfig::varsel(150, 0.2, 41);
    let data = simulate_dataset(&cfg).unwrap();
    let order: Vec<usize> = (0..data.n_individuals()).rev().collect();
    let shuffled = data.select(&order).unwrap();
    let (a, b) = (comparison(&data, &cfg), comparison(&shuffled, &cfg));
    let reg = SelectionRegistry::default();
    for name in reg.names() {
        let m = reg.get(name).unwrap();
        let (x, y) = (statistic(&m.evaluate(&a).unwrap()), statistic(&m.evaluate(&b).unwrap()));
        assert!((x - y).abs() <= 1e-6 * x.abs().max(1.0), "{name}: {x} vs {y}");
    }
}

#[test]
fn nested_statistics_are_nonnegative_and_multiplier_vanishes_at_the_fit() {
    for seed in 0..3 {
        let cfg = DgpConfig::varsel(150, 0.0, 60 + seed);
        let data = simulate_dataset(&cfg).unwrap();
        let cmp = comparison(&data, &cfg);
        assert!(cmp.clr >= 0.0);
        let reg = SelectionRegistry::default();
        for name in ["clr", "cclr1", "cclr2", "cclr3", "cclr3_hh", "el"] {
            let v = reg.get(name).unwrap().evaluate(&cmp).unwrap();
            let Verdict::Test(t) = v else { unreachable!() };
            assert!(t.statistic >= 0.0 && (0.0..=1.0).contains(&t.p_value), "{name}: {t:?}");
        }
        let at_fit = solve_psi(&cmp.scores_unrestricted).unwrap();
        let n = data.n_individuals() as f64;
        assert!(at_fit.psi.iter().map(|v| v.abs()).fold(0.0, f64::max) <= 1e-4, "{:?}", at_fit.psi);
        assert!(at_fit.el_value <= 1e-6 * n);
    }
}

#[test]
fn identical_fits_give_a_null_comparison() {
    let cfg = DgpConfig::varsel(60, 0.3, 8);
    let data = simulate_dataset(&cfg).unwrap();
    let (wide, _) = fit_pair(&data, &cfg, &CmlContext::default(), &FitOptions::default()).unwrap();
    let cmp = NestedComparison::new(&data, &wide, &wide, &ComparisonOptions::default()).unwrap();
    assert_eq!(cmp.p(), 0);
    let reg = SelectionRegistry::default();
    for name in ["clr", "cclr1", "cclr2", "cclr3", "el"] {
        let Verdict::Test(t) = reg.get(name).unwrap().evaluate(&cmp).unwrap() else { unreachable!() };
        assert_eq!(t.statistic, 0.0, "{name}");
        assert_eq!(t.p_value, 1.0, "{name}");
    }
}

#[test]
fn criteria_identities() {
    let cfg = DgpConfig::varsel(100, 0.3, 9);
    let data = simulate_dataset(&cfg).unwrap();
    let cmp = comparison(&data, &cfg);
    for ic in [&cmp.ic_unrestricted, &cmp.ic_restricted] {
        let lhs = ic.claic - ic.clbic;
        let rhs = (2.0 - (ic.n as f64).ln()) * ic.penalty_trace;
        assert!((lhs - rhs).abs() <= 1e-9 * ic.claic.abs(), "{lhs} vs {rhs}");
    }

    // when variability equals sensitivity the penalty counts free coordinates
    let (wide, _) = fit_pair(&data, &cfg, &CmlContext::default(), &FitOptions::default()).unwrap();
    let free = wide.free_indices();
    let h = sub_block(&cmp.godambe_restricted.h, &(0..free.len()).collect::<Vec<_>>(), &(0..free.len()).collect::<Vec<_>>());
    let g = godambe(h.clone(), h, SensitivityEstimator::PairwiseOuter, &[]).unwrap();
    let ic = information_criteria(&wide, &g).unwrap();
    let d = free.len() as f64;
    assert!((ic.penalty_trace - d).abs() < 1e-9);
    assert!((ic.claic - (-2.0 * wide.lcml_value + 2.0 * d)).abs() < 1e-8 * ic.claic.abs());
}

#[test]
fn ratio_grows_with_the_omitted_effect() {
    let median = |beta: f64| {
        let mut v: Vec<f64> = (0..50)
            .map(|rep| {
                let cfg = DgpConfig::varsel(120, beta, 3000 + rep);
                let data = simulate_dataset(&cfg).unwrap();
                let (w, n) = fit_pair(&data, &cfg, &CmlContext::default(), &FitOptions::default()).unwrap();
                2.0 * (w.lcml_value - n.lcml_value)
            })
            .collect();
        v.sort_by(f64::total_cmp);
        0.5 * (v[24] + v[25])
    };
    let (null, alt) = (median(0.0), median(0.5));
    assert!(alt > null, "median ratio {alt} under the alternative vs {null} under the null");
}
