//! Experiment orchestration shared by the CLI and the test suites: optimize
//! scenario batches, design combination matrices over the method/structure
//! grid, and evaluate closed-loop losses on the test set.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::closed_loop::{evaluate, simulate_closed_loop, LossReport};
use crate::config::ExperimentConfig;
use crate::design::{
    quadratic_loss, solve_gdsoc_numerical, solve_ldsoc_with_sensitivity, solve_shortcut_with_normal,
    DesignMethod, DesignResult, JccApprox, LossModel,
};
use crate::error::{Error, Result};
use crate::io::{
    ensure_dir, read_archive, read_matrix_csv, write_archive, write_matrix_csv, ArchiveIndex,
};
use crate::process::{BatchProcess, ProcessDims};
use crate::reactor::{derived_concentrations, FedBatchReactor, ReactorState};
use crate::scenario::{
    noise_covariance_diagonal, sample_scenarios, split_design_test, Scenario,
};
use crate::structure::{compile_structure, CombinationMatrix, CvDims, StructureTag};
use crate::trajopt::{
    solve_scenario_batch, OptimalTrajectory, OptimizeOptions,
};

/// Everything produced by the optimize stage, in memory.
#[derive(Debug)]
pub struct OptimizeOutput {
    pub nominal: OptimalTrajectory,
    pub design_scenarios: Vec<Scenario>,
    pub test_scenarios: Vec<Scenario>,
    pub design_trajectories: Vec<OptimalTrajectory>,
    pub test_trajectories: Vec<OptimalTrajectory>,
    pub failures: Vec<(usize, String)>,
    pub w2_diag: DVector<f64>,
}

impl OptimizeOutput {
    /// Converged design trajectories, the rows of the loss model.
    pub fn converged_design(&self) -> Vec<OptimalTrajectory> {
        self.design_trajectories
            .iter()
            .filter(|t| t.converged)
            .cloned()
            .collect()
    }
}

/// Default starting profile: 40% of the feed range above the lower bound.
pub fn default_init(process: &dyn BatchProcess) -> DVector<f64> {
    let dims = process.dims();
    let (lo, hi) = process.input_bounds();
    DVector::from_fn(dims.stacked_input_len(), |i, _| {
        let c = i % dims.n_u;
        lo[c] + 0.4 * (hi[c] - lo[c])
    })
}

/// Samples design and test scenarios and solves every trajectory
/// optimization (nominal first, warm-started thereafter).
pub fn run_optimize(cfg: &ExperimentConfig) -> Result<OptimizeOutput> {
    let reactor = cfg.process.build()?;
    let dims = reactor.dims();
    let n_design = cfg.experiment.n_design;
    let n_test = cfg.experiment.n_test;
    let sampled = sample_scenarios(&cfg.uncertainty, n_design + n_test, &dims)?;
    let (design, test) = split_design_test(&sampled, n_design)?;

    let mut batch_input = vec![Scenario::nominal(&dims)];
    batch_input.extend_from_slice(design);
    batch_input.extend_from_slice(test);
    let opts = OptimizeOptions::default();
    let solved = solve_scenario_batch(&reactor, &batch_input, &default_init(&reactor), &opts)?;

    let mut by_id: BTreeMap<usize, OptimalTrajectory> = solved
        .trajectories
        .into_iter()
        .map(|t| (t.scenario_id, t))
        .collect();
    let nominal = by_id
        .remove(&0)
        .ok_or_else(|| Error::Optimization("nominal trajectory missing from batch".into()))?;
    let collect = |ids: &[Scenario], map: &mut BTreeMap<usize, OptimalTrajectory>| {
        ids.iter().filter_map(|s| map.remove(&s.id)).collect::<Vec<_>>()
    };
    let design_trajectories = collect(design, &mut by_id);
    let test_trajectories = collect(test, &mut by_id);

    Ok(OptimizeOutput {
        nominal,
        design_scenarios: design.to_vec(),
        test_scenarios: test.to_vec(),
        design_trajectories,
        test_trajectories,
        failures: solved.failures,
        w2_diag: noise_covariance_diagonal(&cfg.uncertainty, &dims),
    })
}

/// Writes the optimize stage to `dir` as a trajectory archive.
pub fn write_optimize_output(
    dir: &Path,
    cfg: &ExperimentConfig,
    config_hash: &str,
    out: &OptimizeOutput,
) -> Result<()> {
    let reactor = cfg.process.build()?;
    let dims = reactor.dims();
    ensure_dir(dir)?;
    let index = ArchiveIndex {
        config_sha256: config_hash.to_string(),
        seed: cfg.uncertainty.seed,
        n_design: cfg.experiment.n_design,
        n_test: cfg.experiment.n_test,
        design_ids: out.design_scenarios.iter().map(|s| s.id).collect(),
        test_ids: out.test_scenarios.iter().map(|s| s.id).collect(),
        failures: out.failures.clone(),
    };
    let mut scenarios = vec![Scenario::nominal(&dims)];
    scenarios.extend(out.design_scenarios.iter().cloned());
    scenarios.extend(out.test_scenarios.iter().cloned());
    let mut trajectories = vec![out.nominal.clone()];
    trajectories.extend(out.design_trajectories.iter().cloned());
    trajectories.extend(out.test_trajectories.iter().cloned());
    write_archive(dir, &index, &scenarios, &trajectories, &dims)
}

/// Reads an optimize archive back into memory, revalidating the split.
pub fn read_optimize_output(dir: &Path, cfg: &ExperimentConfig) -> Result<OptimizeOutput> {
    let reactor = cfg.process.build()?;
    let dims = reactor.dims();
    let (index, scenarios, trajectories) = read_archive(dir, &dims)?;
    let mut scen_by_id: BTreeMap<usize, Scenario> =
        scenarios.into_iter().map(|s| (s.id, s)).collect();
    let mut traj_by_id: BTreeMap<usize, OptimalTrajectory> =
        trajectories.into_iter().map(|t| (t.scenario_id, t)).collect();
    let nominal = traj_by_id
        .remove(&0)
        .ok_or_else(|| Error::Parse("archive has no nominal trajectory".into()))?;
    let mut pick = |ids: &[usize]| -> (Vec<Scenario>, Vec<OptimalTrajectory>) {
        let scen = ids.iter().filter_map(|id| scen_by_id.remove(id)).collect();
        let traj = ids.iter().filter_map(|id| traj_by_id.remove(id)).collect();
        (scen, traj)
    };
    let (design_scenarios, design_trajectories) = pick(&index.design_ids);
    let (test_scenarios, test_trajectories) = pick(&index.test_ids);
    Ok(OptimizeOutput {
        nominal,
        design_scenarios,
        test_scenarios,
        design_trajectories,
        test_trajectories,
        failures: index.failures,
        w2_diag: noise_covariance_diagonal(&cfg.uncertainty, &dims),
    })
}

/// One designed matrix with its grid position.
#[derive(Debug, Clone)]
pub struct DesignCell {
    pub structure: StructureTag,
    pub result: DesignResult,
}

/// Runs the design grid: every requested method under every requested
/// structure, sharing the loss model, normal matrix, and the linearization
/// sensitivity across cells.
pub fn run_design(cfg: &ExperimentConfig, opt: &OptimizeOutput) -> Result<Vec<DesignCell>> {
    let reactor = cfg.process.build()?;
    let dims = CvDims::from_process(&reactor.dims());
    let design_trajs = opt.converged_design();
    if design_trajs.is_empty() {
        return Err(Error::Optimization("no converged design trajectories".into()));
    }
    let model = LossModel::from_trajectories(&opt.nominal, &design_trajs, opt.w2_diag.clone(), dims)?;
    let methods = cfg.methods()?;
    let structures = cfg.structures()?;

    let normal = model.normal_matrix()?;
    // The linearization sensitivity is method data, not structure data.
    let f_sens = if methods.contains(&DesignMethod::Ldsoc) {
        Some(crate::design::optimal_xi_disturbance_sensitivity(
            &reactor,
            &opt.nominal,
            &cfg.uncertainty.perturbed_indices(),
            1e-3,
            &OptimizeOptions::default(),
        )?)
    } else {
        None
    };

    let mut cells = Vec::new();
    for tag in structures {
        let cons = compile_structure(tag, &dims, true);
        let shortcut = solve_shortcut_with_normal(&model, &normal, &cons, Some(tag))?;
        for &method in &methods {
            let result = match method {
                DesignMethod::Gdsocsc => shortcut.clone(),
                DesignMethod::Gdsoc => solve_gdsoc_numerical(
                    &design_trajs,
                    &opt.w2_diag,
                    &cons,
                    dims,
                    Some(tag),
                    &shortcut.h.to_vec(),
                )?,
                DesignMethod::Ldsoc => solve_ldsoc_with_sensitivity(
                    &opt.nominal,
                    f_sens.as_ref().expect("sensitivity computed"),
                    &opt.design_scenarios,
                    &opt.w2_diag,
                    &cons,
                    Some(tag),
                    dims,
                )?,
            };
            cells.push(DesignCell {
                structure: tag,
                result,
            });
        }
    }
    Ok(cells)
}

/// Serialized design metadata stored next to each `H` matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DesignRecord {
    pub method: DesignMethod,
    pub structure: StructureTag,
    pub objective: f64,
    pub constraint_residual: f64,
    pub iterations: usize,
    pub ridge: f64,
    pub stationarity: f64,
    pub notes: Vec<String>,
    pub config_sha256: String,
    pub seed: u64,
}

pub fn design_file_stem(method: DesignMethod, structure: StructureTag) -> String {
    format!("{}_{}", method.as_str(), structure.as_str())
}

pub fn write_design_cells(
    dir: &Path,
    cfg: &ExperimentConfig,
    config_hash: &str,
    cells: &[DesignCell],
) -> Result<()> {
    ensure_dir(dir)?;
    for cell in cells {
        let stem = design_file_stem(cell.result.method, cell.structure);
        write_matrix_csv(&dir.join(format!("H_{stem}.csv")), &cell.result.h.matrix)?;
        let record = DesignRecord {
            method: cell.result.method,
            structure: cell.structure,
            objective: cell.result.objective,
            constraint_residual: cell.result.constraint_residual,
            iterations: cell.result.diagnostics.iterations,
            ridge: cell.result.diagnostics.ridge,
            stationarity: cell.result.diagnostics.stationarity,
            notes: cell.result.diagnostics.notes.clone(),
            config_sha256: config_hash.to_string(),
            seed: cfg.uncertainty.seed,
        };
        fs::write(
            dir.join(format!("design_{stem}.json")),
            serde_json::to_string_pretty(&record).map_err(|e| Error::Parse(e.to_string()))?,
        )?;
    }
    Ok(())
}

pub fn read_design_cells(dir: &Path, cfg: &ExperimentConfig) -> Result<Vec<DesignCell>> {
    let reactor = cfg.process.build()?;
    let dims = CvDims::from_process(&reactor.dims());
    let mut cells = Vec::new();
    for tag in cfg.structures()? {
        for method in cfg.methods()? {
            let stem = design_file_stem(method, tag);
            let json_path = dir.join(format!("design_{stem}.json"));
            let record: DesignRecord = serde_json::from_str(&fs::read_to_string(&json_path)?)
                .map_err(|e| Error::Parse(format!("{json_path:?}: {e}")))?;
            let matrix = read_matrix_csv(&dir.join(format!("H_{stem}.csv")))?;
            let h = CombinationMatrix::new(matrix, dims, Some(tag))?;
            cells.push(DesignCell {
                structure: tag,
                result: DesignResult {
                    h,
                    method,
                    objective: record.objective,
                    constraint_residual: record.constraint_residual,
                    diagnostics: crate::design::SolverDiagnostics {
                        iterations: record.iterations,
                        ridge: record.ridge,
                        stationarity: record.stationarity,
                        notes: record.notes,
                    },
                },
            });
        }
    }
    Ok(cells)
}

/// Per-scenario loss decomposition rows for the approximation-error analysis.
#[derive(Debug, Clone, Serialize)]
pub struct ApproxErrorRow {
    pub scenario_id: usize,
    pub method: DesignMethod,
    pub simulated: f64,
    pub quad_exact: f64,
    pub quad_gentler: f64,
    pub quad_frozen: f64,
}

/// Evaluation results for one structure.
#[derive(Debug)]
pub struct StructureEval {
    pub structure: StructureTag,
    pub report: LossReport,
    pub approx_rows: Vec<ApproxErrorRow>,
}

#[derive(Debug)]
pub struct EvalOutput {
    pub per_structure: Vec<StructureEval>,
}

/// Closed-loop evaluation of every design cell over the test set, plus the
/// quadratic-approximation variants used in the error analyses.
pub fn run_evaluate(
    cfg: &ExperimentConfig,
    opt: &OptimizeOutput,
    cells: &[DesignCell],
) -> Result<EvalOutput> {
    let reactor = cfg.process.build()?;
    let dims = reactor.dims();
    let v_bar = LossModel::from_trajectories(
        &opt.nominal,
        &[opt.nominal.clone()],
        opt.w2_diag.clone(),
        CvDims::from_process(&dims),
    )?
    .v_bar;

    let mut per_structure = Vec::new();
    for tag in cfg.structures()? {
        let structure_cells: Vec<&DesignCell> =
            cells.iter().filter(|c| c.structure == tag).collect();
        if structure_cells.is_empty() {
            continue;
        }
        let labeled: Vec<(String, &CombinationMatrix)> = structure_cells
            .iter()
            .map(|c| (c.result.method.as_str().to_string(), &c.result.h))
            .collect();
        let report = evaluate(
            &reactor,
            &labeled,
            &opt.test_scenarios,
            &opt.test_trajectories,
        )?;

        let mut approx_rows = Vec::new();
        for cell in &structure_cells {
            for scenario in &opt.test_scenarios {
                let Some(traj) = opt
                    .test_trajectories
                    .iter()
                    .find(|t| t.scenario_id == scenario.id)
                else {
                    continue;
                };
                let noise = scenario.noise_stacked(&dims);
                let run = simulate_closed_loop(&reactor, &cell.result.h, scenario, traj.j_opt);
                let Ok(run) = run else { continue };
                let quad_exact = quadratic_loss(&cell.result.h, traj, &noise, JccApprox::Exact)?;
                let quad_gentler =
                    quadratic_loss(&cell.result.h, traj, &noise, JccApprox::Gentler(&v_bar))?;
                let quad_frozen =
                    quadratic_loss(&cell.result.h, traj, &noise, JccApprox::FrozenIdentity)?;
                approx_rows.push(ApproxErrorRow {
                    scenario_id: scenario.id,
                    method: cell.result.method,
                    simulated: run.loss,
                    quad_exact,
                    quad_gentler,
                    quad_frozen,
                });
            }
        }
        per_structure.push(StructureEval {
            structure: tag,
            report,
            approx_rows,
        });
    }
    Ok(EvalOutput { per_structure })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalCellSummary {
    pub structure: String,
    pub method: String,
    pub n_scenarios: usize,
    pub n_failures: usize,
    pub avg_simulated: f64,
    pub std_simulated: f64,
    pub avg_quadratic: f64,
    pub std_quadratic: f64,
    pub clip_events: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSummary {
    pub config_sha256: String,
    pub seed: u64,
    pub fraction: f64,
    pub cells: Vec<EvalCellSummary>,
}

pub fn eval_summary(cfg: &ExperimentConfig, config_hash: &str, eval: &EvalOutput) -> EvalSummary {
    let mut cells = Vec::new();
    for se in &eval.per_structure {
        for m in &se.report.methods {
            cells.push(EvalCellSummary {
                structure: se.structure.as_str().to_string(),
                method: m.label.clone(),
                n_scenarios: m.per_scenario.len(),
                n_failures: m.failures.len(),
                avg_simulated: m.avg_simulated,
                std_simulated: m.std_simulated,
                avg_quadratic: m.avg_quadratic,
                std_quadratic: m.std_quadratic,
                clip_events: m.per_scenario.iter().map(|s| s.clip_events).sum(),
            });
        }
    }
    EvalSummary {
        config_sha256: config_hash.to_string(),
        seed: cfg.uncertainty.seed,
        fraction: cfg.uncertainty.fraction,
        cells,
    }
}

/// Writes the evaluation artifacts: per-scenario loss tables, the averaged
/// loss grid, approximation-error tables, closed-loop trajectory dumps, and
/// the JSON summary.
pub fn write_eval_output(
    dir: &Path,
    cfg: &ExperimentConfig,
    config_hash: &str,
    opt: &OptimizeOutput,
    cells: &[DesignCell],
    eval: &EvalOutput,
) -> Result<()> {
    ensure_dir(dir)?;
    let reactor = cfg.process.build()?;

    for se in &eval.per_structure {
        // Per-scenario losses: one row per scenario, sim/quad per method.
        let mut csv = String::from("scenario_id");
        for m in &se.report.methods {
            csv.push_str(&format!(",sim_{0},quad_{0}", m.label));
        }
        csv.push('\n');
        let ids: Vec<usize> = se
            .report
            .methods
            .first()
            .map(|m| m.per_scenario.iter().map(|s| s.scenario_id).collect())
            .unwrap_or_default();
        for id in &ids {
            csv.push_str(&id.to_string());
            for m in &se.report.methods {
                match m.per_scenario.iter().find(|s| s.scenario_id == *id) {
                    Some(s) => csv.push_str(&format!(",{},{}", s.simulated, s.quadratic)),
                    None => csv.push_str(",,"),
                }
            }
            csv.push('\n');
        }
        fs::write(
            dir.join(format!("losses_{}.csv", se.structure.as_str())),
            csv,
        )?;

        // Approximation errors per scenario and method.
        let mut acsv =
            String::from("scenario_id,method,simulated,quad_exact,quad_gentler,quad_frozen\n");
        for row in &se.approx_rows {
            acsv.push_str(&format!(
                "{},{},{},{},{},{}\n",
                row.scenario_id,
                row.method.as_str(),
                row.simulated,
                row.quad_exact,
                row.quad_gentler,
                row.quad_frozen
            ));
        }
        fs::write(
            dir.join(format!("approx_error_{}.csv", se.structure.as_str())),
            acsv,
        )?;
    }

    // Averaged loss grid: rows = structures, columns = methods.
    let methods = cfg.methods()?;
    let mut grid = String::from("structure");
    for m in &methods {
        grid.push_str(&format!(",{}", m.as_str()));
    }
    grid.push('\n');
    for se in &eval.per_structure {
        grid.push_str(se.structure.as_str());
        for m in &methods {
            let avg = se
                .report
                .methods
                .iter()
                .find(|c| c.label == m.as_str())
                .map(|c| c.avg_simulated)
                .unwrap_or(f64::NAN);
            grid.push_str(&format!(",{avg}"));
        }
        grid.push('\n');
    }
    fs::write(dir.join("table_avg_loss.csv"), grid)?;

    // Closed-loop trajectory dumps for the configured plot scenarios.
    let plot_ids: Vec<usize> = if cfg.experiment.plot_scenarios.is_empty() {
        opt.test_scenarios.first().map(|s| vec![s.id]).unwrap_or_default()
    } else {
        cfg.experiment.plot_scenarios.clone()
    };
    for id in plot_ids {
        let Some(scenario) = opt.test_scenarios.iter().find(|s| s.id == id) else {
            continue;
        };
        let Some(traj) = opt.test_trajectories.iter().find(|t| t.scenario_id == id) else {
            continue;
        };
        for cell in cells {
            let stem = design_file_stem(cell.result.method, cell.structure);
            let run = match simulate_closed_loop(&reactor, &cell.result.h, scenario, traj.j_opt) {
                Ok(run) => run,
                Err(_) => continue,
            };
            let csv = trajectory_dump_csv(&reactor, scenario, &run, &traj.u_opt)?;
            fs::write(dir.join(format!("trajectory_{stem}_scenario{id}.csv")), csv)?;
        }
    }

    let summary = eval_summary(cfg, config_hash, eval);
    fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(&summary).map_err(|e| Error::Parse(e.to_string()))?,
    )?;
    Ok(())
}

/// Stagewise dump of a closed-loop run: time, applied and optimal feed, and
/// the product/byproduct concentrations with the volume.
pub fn trajectory_dump_csv(
    reactor: &FedBatchReactor,
    scenario: &Scenario,
    run: &crate::closed_loop::ClosedLoopRun,
    u_opt: &DVector<f64>,
) -> Result<String> {
    let params = reactor.scenario_params(&scenario.offsets);
    let t_s = reactor.stage_duration_value();
    let mut csv = String::from("t,u_closed_loop,u_optimal,c_C,c_D,V\n");
    let x0 = ReactorState {
        c_a: params.c_a0,
        c_b: params.c_b0,
        v: params.v0,
    };
    let mut write_row = |t: f64, u_cl: f64, u_op: f64, s: ReactorState| -> Result<()> {
        let (c_c, c_d) = derived_concentrations(s, &params)?;
        csv.push_str(&format!("{t},{u_cl},{u_op},{c_c},{c_d},{}\n", s.v));
        Ok(())
    };
    write_row(0.0, run.u_applied[0], u_opt[0], x0)?;
    for k in 0..run.states.len() {
        let s = ReactorState::from_vector(&run.states[k]);
        // Step plot convention: the terminal row repeats the last feed value.
        let next = k + 1;
        let u_cl = run.u_applied[next.min(run.u_applied.len() - 1)];
        let u_op = u_opt[next.min(u_opt.len() - 1)];
        write_row((k + 1) as f64 * t_s, u_cl, u_op, s)?;
    }
    Ok(csv)
}

/// Collates several evaluation summaries into one CSV: a row per summary,
/// the average simulated loss per (structure, method) as columns.
pub fn collate_summaries(paths: &[std::path::PathBuf]) -> Result<String> {
    let mut rows = Vec::new();
    let mut columns: Vec<String> = Vec::new();
    for path in paths {
        let summary: EvalSummary = serde_json::from_str(&fs::read_to_string(path)?)
            .map_err(|e| Error::Parse(format!("{path:?}: {e}")))?;
        for cell in &summary.cells {
            let col = format!("{}_{}", cell.method, cell.structure);
            if !columns.contains(&col) {
                columns.push(col);
            }
        }
        rows.push((path.display().to_string(), summary));
    }
    let mut out = String::from("source,seed,fraction");
    for c in &columns {
        out.push_str(&format!(",{c}"));
    }
    out.push('\n');
    for (label, summary) in &rows {
        out.push_str(&format!("{label},{},{}", summary.seed, summary.fraction));
        for c in &columns {
            let v = summary
                .cells
                .iter()
                .find(|cell| format!("{}_{}", cell.method, cell.structure) == *c)
                .map(|cell| cell.avg_simulated.to_string())
                .unwrap_or_default();
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    Ok(out)
}
