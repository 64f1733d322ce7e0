use std::time::Instant;

use macml::harness::{run_experiment, DgpFamily, ExperimentConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let family = if args.get(1).map(|s| s.as_str()) == Some("cov") { DgpFamily::Covstruct } else { DgpFamily::Varsel };
    let n: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(300);
    let reps: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(20);
    let values = match family {
        DgpFamily::Varsel => vec![0.0, 0.3],
        DgpFamily::Covstruct => vec![0.0, 0.4],
    };
    let cfg = ExperimentConfig::new(
        family,
        vec![n],
        values,
        reps,
        &["clr", "cclr1", "cclr2", "cclr3", "cclr3_hh", "el", "claic", "clbic", "claic_select", "claic_avg", "omse_avg"],
    );
    let t0 = Instant::now();
    let res = run_experiment(&cfg).unwrap();
    for r in &res.rows {
        println!("{},{},{},{},{}", r.cell_id, r.method, r.metric, r.value, r.n_effective_reps);
    }
    let pen: Vec<_> = res.replications.iter().filter_map(|r| r.clr).collect();
    println!("clr: {:?}", &pen[..pen.len().min(10)]);
    eprintln!("elapsed {:?}", t0.elapsed());
}
