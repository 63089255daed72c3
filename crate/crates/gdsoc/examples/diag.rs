use gdsoc::closed_loop::*;
use gdsoc::config::*;
use gdsoc::pipeline::*;
use std::time::Instant;

fn main() {
    let base = std::fs::read_to_string("/tmp/case1.toml").unwrap();
    let t0 = Instant::now();
    // Case 1 design at 10%
    let cfg1 = ExperimentConfig::from_str(&base).unwrap();
    let opt1 = run_optimize(&cfg1).unwrap();
    let cells = run_design(&cfg1, &opt1).unwrap();
    println!("case1 ready {:.1?}", t0.elapsed());

    // Case 2: evaluate the case-1 H's on test sets at 5/10/20/40%
    for frac in ["0.05", "0.10", "0.20", "0.40"] {
        let text = base.replace("fraction = 0.10", &format!("fraction = {frac}"));
        let cfg = ExperimentConfig::from_str(&text).unwrap();
        let opt = run_optimize(&cfg).unwrap();
        let reactor = cfg.process.build().unwrap();
        let labeled: Vec<(String, &gdsoc::structure::CombinationMatrix)> = cells.iter()
            .map(|c| (c.result.method.as_str().to_string(), &c.result.h)).collect();
        let report = evaluate(&reactor, &labeled, &opt.test_scenarios, &opt.test_trajectories).unwrap();
        print!("case2 frac {frac}: ");
        for m in &report.methods { print!("{} {:.6} (f{}) ", m.label, m.avg_simulated, m.failures.len()); }
        println!();
    }

    // Case 3: design all structures with gdsocsc at 10%, test at 20% and 20%+cBin
    let text3 = base
        .replace("structures = [\"const_diag\"]", "structures = [\"lbt\", \"varying_diag\", \"const_diag\"]")
        .replace("methods = [\"ldsoc\", \"gdsoc\", \"gdsocsc\"]", "methods = [\"gdsocsc\"]");
    let cfg3 = ExperimentConfig::from_str(&text3).unwrap();
    let cells3 = run_design(&cfg3, &opt1).unwrap();
    for (label, extra) in [("20%", ""), ("20%+cBin", "\"c_B_in\", ")] {
        let text = text3
            .replace("fraction = 0.10", "fraction = 0.20")
            .replace("perturbed_params = [\"c_A0\"", &format!("perturbed_params = [{extra}\"c_A0\""));
        let cfg = ExperimentConfig::from_str(&text).unwrap();
        let opt = run_optimize(&cfg).unwrap();
        let reactor = cfg.process.build().unwrap();
        let labeled: Vec<(String, &gdsoc::structure::CombinationMatrix)> = cells3.iter()
            .map(|c| (format!("gdsocsc_{}", c.structure.as_str()), &c.result.h)).collect();
        let report = evaluate(&reactor, &labeled, &opt.test_scenarios, &opt.test_trajectories).unwrap();
        print!("case3 {label}: ");
        for m in &report.methods { print!("{} {:.6} (f{}) ", m.label, m.avg_simulated, m.failures.len()); }
        println!();
    }
    println!("total {:.1?}", t0.elapsed());
}
