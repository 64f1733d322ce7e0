use std::time::Instant;

use macml::cml::CmlContext;
use macml::estimation::{fit, FitOptions};
use macml::harness::{simulate_dataset, DgpConfig};

fn main() {
    let n: usize = std::env::args().nth(1).map(|s| s.parse().unwrap()).unwrap_or(300);
    for cfg in [DgpConfig::varsel(n, 0.0, 1), DgpConfig::covstruct(n, 0.0, 1)] {
        let data = simulate_dataset(&cfg).unwrap();
        let spec = cfg.model_spec();
        let init = cfg.true_theta();
        let ctx = CmlContext::default();
        for restricted in [false, true] {
            let r = spec.narrow().restriction();
            let t0 = Instant::now();
            let f = fit(&data, &spec, &init, if restricted { Some(&r) } else { None }, &ctx, &FitOptions::default()).unwrap();
            println!(
                "{:?} restricted={restricted}: {:?} iters {} conv {} {:?} lcml {:.4} |g| {:.2e} tol {:.2e}",
                cfg.family, t0.elapsed(), f.n_iterations, f.converged, f.termination, f.lcml_value, f.grad_norm, f.grad_tolerance
            );
        }
    }
}
