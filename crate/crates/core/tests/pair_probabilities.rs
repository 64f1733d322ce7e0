use macml::cml::{pair_loglik, CmlContext};
use macml::gauss::{mvncdf_oracle, sj_mvncdf, SjConfig};
use macml::harness::{simulate_dataset, DgpConfig};
use macml::model::{build_pair_moments, pack, unpack, ModelSpec, PanelDataset};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Frequency with which direct simulation of the utility model reproduces the
/// observed choices of individual `n` on occasions `t` and `t2`.
fn simulated_pair_frequency(
    data: &PanelDataset,
    n: usize,
    t: usize,
    t2: usize,
    theta: &[f64],
    spec: &ModelSpec,
    draws: usize,
    seed: u64,
) -> (f64, f64) {
    let (beta, l) = unpack(theta, spec).unwrap();
    let q = l.nrows();
    let sd = spec.sigma_diag.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    let mut z = vec![0.0; q];
    let mut coef = vec![0.0; q];
    for _ in 0..draws {
        for v in z.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        for r in 0..q {
            coef[r] = (0..=r).map(|c| l[(r, c)] * z[c]).sum();
        }
        let mut ok = true;
        for occ in [t, t2] {
            let mut best = (f64::NEG_INFINITY, 0);
            for k in 0..data.n_alternatives() {
                let xf = data.x_fixed(n, occ, k);
                let xr = data.x_random(n, occ, k);
                let e: f64 = StandardNormal.sample(&mut rng);
                let u = xf.iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>()
                    + xr.iter().zip(&coef).map(|(a, b)| a * b).sum::<f64>()
                    + sd * e;
                if u > best.0 {
                    best = (u, k);
                }
            }
            ok &= best.1 == data.choice(n, occ);
        }
        hits += ok as usize;
    }
    let f = hits as f64 / draws as f64;
    (f, (f * (1.0 - f) / draws as f64).sqrt())
}

fn random_theta(spec: &ModelSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let beta: Vec<f64> = (0..spec.p_beta).map(|_| rng.random_range(-1.0..1.0)).collect();
    let q = spec.p_alpha;
    let l = DMatrix::from_fn(q, q, |r, c| if r == c { rng.random_range(0.5..1.5) } else { 0.0 });
    pack(&beta, &l, spec).unwrap().values
}

#[test]
fn moments_reproduce_simulated_pair_frequencies() {
    let mut cfg = DgpConfig::varsel(6, 0.3, 21);
    cfg.n_alternatives = 3;
    let data = simulate_dataset(&cfg).unwrap();
    let spec = cfg.model_spec();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let ctx = CmlContext::default();
    for case in 0..4 {
        let theta = random_theta(&spec, &mut rng);
        let n = case % data.n_individuals();
        let (t, t2) = (case % 3, 3 + case % 2);
        let (freq, se) = simulated_pair_frequency(&data, n, t, t2, &theta, &spec, 200_000, 100 + case as u64);
        let pm = build_pair_moments(&data, n, t, t2, &theta, &spec).unwrap();
        let (exact, ose) = mvncdf_oracle(&pm.b, &pm.r, 400_000, case as u64).unwrap();
        assert!(
            (exact - freq).abs() <= 3.0 * (se * se + ose * ose).sqrt() + 1e-3,
            "case {case}: moments {exact} vs simulation {freq}"
        );
        let sj = pair_loglik(&data, n, t, t2, &theta, &spec, &ctx).unwrap().exp();
        assert!((sj - freq).abs() <= 3.0 * se + 0.01, "case {case}: approximation {sj} vs simulation {freq}");
    }
}

#[test]
fn true_parameters_of_both_designs_match_simulation() {
    for cfg in [DgpConfig::varsel(4, 0.3, 31), DgpConfig::covstruct(4, 0.4, 32)] {
        let data = simulate_dataset(&cfg).unwrap();
        let spec = cfg.model_spec();
        let theta = cfg.true_theta().values;
        for n in 0..2 {
            let (freq, se) = simulated_pair_frequency(&data, n, 0, 1, &theta, &spec, 100_000, 7 + n as u64);
            let pm = build_pair_moments(&data, n, 0, 1, &theta, &spec).unwrap();
            let (exact, ose) = mvncdf_oracle(&pm.b, &pm.r, 200_000, 9).unwrap();
            assert!(
                (exact - freq).abs() <= 3.0 * (se * se + ose * ose).sqrt() + 1e-3,
                "{:?} n={n}: {exact} vs {freq}",
                cfg.family
            );
        }
    }
}

fn correlation(dim: usize, offdiag: &[f64]) -> DMatrix<f64> {
    // random loadings give a valid correlation matrix
    let mut a = DMatrix::from_fn(dim, dim, |r, c| offdiag[(r * dim + c) % offdiag.len()] * if r == c { 0.3 } else { 1.0 });
    for i in 0..dim {
        a[(i, i)] += 1.0;
    }
    let s = &a * a.transpose();
    DMatrix::from_fn(dim, dim, |r, c| s[(r, c)] / (s[(r, r)] * s[(c, c)]).sqrt())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    #[ignore = "the ordering-averaged approximation is not monotone everywhere; a saved counterexample reproduces"]
    fn approximation_is_monotone_in_each_limit(
        dim in 3usize..5,
        loads in prop::collection::vec(-0.6f64..0.6, 16),
        b in prop::collection::vec(-2.0f64..2.0, 4),
        which in 0usize..4,
        step in 0.01f64..0.5,
    ) {
        let r = correlation(dim, &loads);
        let b = &b[..dim];
        let mut up = b.to_vec();
        up[which % dim] += step;
        let cfg = SjConfig::all_permutations();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lo = sj_mvncdf(b, &r, &cfg, &mut rng).unwrap();
        let hi = sj_mvncdf(&up, &r, &cfg, &mut rng).unwrap();
        prop_assert!(hi >= lo - 1e-12, "{hi} < {lo}");
    }

    #[test]
    fn approximation_stays_in_unit_interval(
        dim in 3usize..7,
        loads in prop::collection::vec(-1.5f64..1.5, 36),
        b in prop::collection::vec(-4.0f64..4.0, 6),
        seed in 0u64..1000,
    ) {
        let r = correlation(dim, &loads);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = sj_mvncdf(&b[..dim], &r, &SjConfig::default(), &mut rng).unwrap();
        prop_assert!(p > 0.0 && p <= 1.0);
    }
}
