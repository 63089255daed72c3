//! Plain-text artifact I/O: CSV matrices and vectors, scenario tables, and
//! the trajectory archive (CSV matrices plus a JSON index).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::process::ProcessDims;
use crate::reactor::PARAM_NAMES;
use crate::scenario::Scenario;
use crate::trajopt::OptimalTrajectory;

pub fn write_matrix_csv(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut out = String::new();
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            if c > 0 {
                out.push(',');
            }
            out.push_str(&format!("{}", m[(r, c)]));
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_matrix_csv(path: &Path) -> Result<DMatrix<f64>> {
    let text = fs::read_to_string(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|tok| {
                tok.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(format!("{path:?}:{}: {e}", lineno + 1)))
            })
            .collect::<Result<_>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::Parse(format!(
                    "{path:?}: ragged row {} ({} vs {} columns)",
                    lineno + 1,
                    row.len(),
                    first.len()
                )));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Parse(format!("{path:?}: empty matrix")));
    }
    let nrows = rows.len();
    let ncols = rows[0].len();
    Ok(DMatrix::from_fn(nrows, ncols, |r, c| rows[r][c]))
}

/// One scenario per row: id, parameter offsets, stacked measurement noise,
/// stacked input noise.
pub fn write_scenarios_csv(path: &Path, scenarios: &[Scenario], dims: &ProcessDims) -> Result<()> {
    let mut f = fs::File::create(path)?;
    let mut header = vec!["id".to_string()];
    for name in PARAM_NAMES.iter().take(dims.n_d) {
        header.push(format!("off_{name}"));
    }
    for i in 0..dims.n_y * dims.n_stages {
        header.push(format!("ny_{i}"));
    }
    for i in 0..dims.n_u * dims.n_stages {
        header.push(format!("nu_{i}"));
    }
    writeln!(f, "{}", header.join(","))?;
    for s in scenarios {
        let mut row = vec![s.id.to_string()];
        row.extend(s.offsets.iter().map(|v| format!("{v}")));
        row.extend(s.noise_y.iter().map(|v| format!("{v}")));
        row.extend(s.noise_u.iter().map(|v| format!("{v}")));
        writeln!(f, "{}", row.join(","))?;
    }
    Ok(())
}

pub fn read_scenarios_csv(path: &Path, dims: &ProcessDims) -> Result<Vec<Scenario>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Parse(format!("{path:?}: {e}")))?;
    let n_y = dims.n_y * dims.n_stages;
    let n_u = dims.n_u * dims.n_stages;
    let expected = 1 + dims.n_d + n_y + n_u;
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse(format!("{path:?}: {e}")))?;
        if record.len() != expected {
            return Err(Error::Parse(format!(
                "{path:?}: row has {} fields, expected {expected}",
                record.len()
            )));
        }
        let field = |i: usize| -> Result<f64> {
            record[i]
                .trim()
                .parse::<f64>()
                .map_err(|e| Error::Parse(format!("{path:?}: field {i}: {e}")))
        };
        let id: usize = record[0]
            .trim()
            .parse()
            .map_err(|e| Error::Parse(format!("{path:?}: id: {e}")))?;
        let mut offsets = DVector::zeros(dims.n_d);
        for i in 0..dims.n_d {
            offsets[i] = field(1 + i)?;
        }
        let mut noise_y = DVector::zeros(n_y);
        for i in 0..n_y {
            noise_y[i] = field(1 + dims.n_d + i)?;
        }
        let mut noise_u = DVector::zeros(n_u);
        for i in 0..n_u {
            noise_u[i] = field(1 + dims.n_d + n_y + i)?;
        }
        out.push(Scenario {
            id,
            offsets,
            noise_y,
            noise_u,
        });
    }
    Ok(out)
}

/// JSON index of a trajectory archive.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArchiveIndex {
    pub config_sha256: String,
    pub seed: u64,
    pub n_design: usize,
    pub n_test: usize,
    pub design_ids: Vec<usize>,
    pub test_ids: Vec<usize>,
    pub failures: Vec<(usize, String)>,
}

fn traj_summary_row(t: &OptimalTrajectory) -> String {
    format!(
        "{},{},{},{},{}",
        t.scenario_id,
        t.j_opt,
        t.converged as u8,
        t.kkt_residual,
        t.one_sided_coords.len()
    )
}

/// Writes a trajectory archive under `dir`: scenario table, per-scenario
/// optimum rows, and one Hessian/sensitivity CSV per scenario.
pub fn write_archive(
    dir: &Path,
    index: &ArchiveIndex,
    scenarios: &[Scenario],
    trajectories: &[OptimalTrajectory],
    dims: &ProcessDims,
) -> Result<()> {
    fs::create_dir_all(dir.join("juu"))?;
    fs::create_dir_all(dir.join("gxi"))?;
    fs::write(
        dir.join("index.json"),
        serde_json::to_string_pretty(index).map_err(|e| Error::Parse(e.to_string()))?,
    )?;
    write_scenarios_csv(&dir.join("scenarios.csv"), scenarios, dims)?;

    let mut summary = String::from("id,j_opt,converged,kkt_residual,one_sided\n");
    let mut u_rows = String::new();
    let mut xi_rows = String::new();
    for t in trajectories {
        summary.push_str(&traj_summary_row(t));
        summary.push('\n');
        u_rows.push_str(&format!(
            "{},{}\n",
            t.scenario_id,
            t.u_opt.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
        ));
        xi_rows.push_str(&format!(
            "{},{}\n",
            t.scenario_id,
            t.xi_opt.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
        ));
        write_matrix_csv(&dir.join("juu").join(format!("{}.csv", t.scenario_id)), &t.j_uu)?;
        write_matrix_csv(&dir.join("gxi").join(format!("{}.csv", t.scenario_id)), &t.g_xi)?;
    }
    fs::write(dir.join("summary.csv"), summary)?;
    fs::write(dir.join("u_opt.csv"), u_rows)?;
    fs::write(dir.join("xi_opt.csv"), xi_rows)?;
    Ok(())
}

fn parse_id_row(line: &str) -> Result<(usize, Vec<f64>)> {
    let mut parts = line.split(',');
    let id: usize = parts
        .next()
        .ok_or_else(|| Error::Parse("empty row".into()))?
        .trim()
        .parse()
        .map_err(|e| Error::Parse(format!("row id: {e}")))?;
    let values: Vec<f64> = parts
        .map(|t| t.trim().parse::<f64>().map_err(|e| Error::Parse(format!("row value: {e}"))))
        .collect::<Result<_>>()?;
    Ok((id, values))
}

/// Reads a trajectory archive back; inverse of [`write_archive`].
pub fn read_archive(
    dir: &Path,
    dims: &ProcessDims,
) -> Result<(ArchiveIndex, Vec<Scenario>, Vec<OptimalTrajectory>)> {
    let index: ArchiveIndex =
        serde_json::from_str(&fs::read_to_string(dir.join("index.json"))?)
            .map_err(|e| Error::Parse(format!("index.json: {e}")))?;
    let scenarios = read_scenarios_csv(&dir.join("scenarios.csv"), dims)?;

    let mut u_map = std::collections::BTreeMap::new();
    for line in fs::read_to_string(dir.join("u_opt.csv"))?.lines() {
        let (id, vals) = parse_id_row(line)?;
        u_map.insert(id, DVector::from_vec(vals));
    }
    let mut xi_map = std::collections::BTreeMap::new();
    for line in fs::read_to_string(dir.join("xi_opt.csv"))?.lines() {
        let (id, vals) = parse_id_row(line)?;
        xi_map.insert(id, DVector::from_vec(vals));
    }

    let mut trajectories = Vec::new();
    let summary = fs::read_to_string(dir.join("summary.csv"))?;
    for line in summary.lines().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::Parse(format!("summary.csv: bad row {line:?}")));
        }
        let id: usize = fields[0].parse().map_err(|e| Error::Parse(format!("summary id: {e}")))?;
        let j_opt: f64 = fields[1].parse().map_err(|e| Error::Parse(format!("summary j: {e}")))?;
        let converged = fields[2] == "1";
        let kkt_residual: f64 =
            fields[3].parse().map_err(|e| Error::Parse(format!("summary res: {e}")))?;
        let one_sided: usize =
            fields[4].parse().map_err(|e| Error::Parse(format!("summary flags: {e}")))?;
        let u_opt = u_map
            .remove(&id)
            .ok_or_else(|| Error::Parse(format!("u_opt.csv missing id {id}")))?;
        let xi_opt = xi_map
            .remove(&id)
            .ok_or_else(|| Error::Parse(format!("xi_opt.csv missing id {id}")))?;
        let j_uu = read_matrix_csv(&dir.join("juu").join(format!("{id}.csv")))?;
        let g_xi = read_matrix_csv(&dir.join("gxi").join(format!("{id}.csv")))?;
        trajectories.push(OptimalTrajectory {
            scenario_id: id,
            u_opt,
            xi_opt,
            j_opt,
            j_uu,
            g_xi,
            converged,
            kkt_residual,
            one_sided_coords: (0..one_sided).collect(),
        });
    }
    Ok((index, scenarios, trajectories))
}

/// Creates `dir` (and parents) and returns it as a `PathBuf`.
pub fn ensure_dir(dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    Ok(dir.to_path_buf())
}
