use std::time::Instant;

use macml::cml::{lcml, lcml_and_gradient, CmlContext};
use macml::harness::{simulate_dataset, DgpConfig};

fn main() {
    for cfg in [DgpConfig::varsel(300, 0.0, 1), DgpConfig::covstruct(300, 0.0, 1)] {
        let data = simulate_dataset(&cfg).unwrap();
        let spec = cfg.model_spec();
        let theta = cfg.true_theta().values;
        let ctx = CmlContext::default();
        let t0 = Instant::now();
        let v = lcml(&data, &theta, &spec, &ctx).unwrap();
        let t1 = t0.elapsed();
        let t0 = Instant::now();
        let (_, g) = lcml_and_gradient(&data, &theta, &spec, &ctx).unwrap();
        let t2 = t0.elapsed();
        println!("{:?}: lcml {v:.4} in {t1:?}, gradient in {t2:?}, |g|inf {:.3}", cfg.family, g.iter().fold(0f64, |a, b| a.max(b.abs())));
    }
}
