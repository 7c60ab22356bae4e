//! Cartesian sweeps over training-config keys.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{anyhow, Context};
use atdoc::io::write_atomic;
use atdoc::trainer::{run_with, RunOptions, TrainConfig};
use atdoc::{DomainDataset, RunResult};
use log::{info, warn};
use rayon::prelude::*;
use serde::Deserialize;
use serde_json::{Map, Value};

use crate::{config_failure, load_dataset, require_file, CliResult, Failure, SweepArgs};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepSpec {
    /// Config keys shared by every cell.
    #[serde(default)]
    base: Map<String, Value>,
    /// Config key -> values; cells are the cartesian product.
    axes: BTreeMap<String, Vec<Value>>,
}

/// One grid point: its file stem and full config.
#[derive(Debug)]
struct Cell {
    name: String,
    config: TrainConfig,
}

fn render(value: &Value) -> String {
    let raw = match value {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    };
    raw.chars().map(|c| if c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '_') { c } else { '_' }).collect()
}

/// Expands the grid, validating every cell's config before anything runs.
fn expand(spec: &SweepSpec) -> CliResult<Vec<Cell>> {
    if spec.axes.is_empty() {
        return Err(Failure::usage(anyhow!("sweep spec has no axes")));
    }
    if let Some((key, _)) = spec.axes.iter().find(|(_, v)| v.is_empty()) {
        return Err(Failure::usage(anyhow!("axis {key:?} has no values")));
    }
    let mut points: Vec<Vec<(&str, &Value)>> = vec![Vec::new()];
    for (key, values) in &spec.axes {
        points = points
            .into_iter()
            .flat_map(|p| {
                values.iter().map(move |v| {
                    let mut p = p.clone();
                    p.push((key.as_str(), v));
                    p
                })
            })
            .collect();
    }
    points
        .into_iter()
        .map(|point| {
            let mut obj = spec.base.clone();
            for (k, v) in &point {
                obj.insert((*k).to_string(), (*v).clone());
            }
            let name = point.iter().map(|(k, v)| format!("{k}={}", render(v))).collect::<Vec<_>>().join("__");
            let config = TrainConfig::from_json(&Value::Object(obj).to_string())
                .map_err(|e| config_failure(e, &format!("cell {name}")))?;
            Ok(Cell { name, config })
        })
        .collect()
}

fn finished(path: &Path) -> bool {
    fs::read_to_string(path).is_ok_and(|t| RunResult::from_json(&t).is_ok())
}

fn run_cell(cell: &Cell, ds: &DomainDataset, dir: &Path, opts: RunOptions) -> anyhow::Result<()> {
    let result = run_with(&cell.config, ds, opts)?;
    write_atomic(&dir.join(format!("{}.json", cell.name)), result.to_json().as_bytes())?;
    Ok(())
}

pub fn cmd_sweep(args: SweepArgs) -> CliResult<()> {
    require_file(&args.spec, "sweep spec")?;
    require_file(&args.data, "dataset")?;
    if args.jobs == 0 {
        return Err(Failure::usage(anyhow!("--jobs must be at least 1")));
    }
    let text = fs::read_to_string(&args.spec)
        .with_context(|| format!("reading {}", args.spec.display()))
        .map_err(Failure::usage)?;
    let spec: SweepSpec = serde_json::from_str(&text)
        .with_context(|| format!("invalid sweep spec {}", args.spec.display()))
        .map_err(Failure::usage)?;
    let cells = expand(&spec)?;
    let ds = load_dataset(&args.data)?;
    fs::create_dir_all(&args.output)
        .with_context(|| format!("creating {}", args.output.display()))
        .map_err(Failure::runtime)?;

    let pending: Vec<&Cell> = cells
        .iter()
        .filter(|c| {
            let done = args.resume && finished(&args.output.join(format!("{}.json", c.name)));
            if done {
                info!("skipping finished cell {}", c.name);
            }
            !done
        })
        .collect();
    let opts = RunOptions { record_timing: !args.no_timing };
    let pool =
        rayon::ThreadPoolBuilder::new().num_threads(args.jobs).build().map_err(|e| Failure::runtime(anyhow!(e)))?;
    let outcomes: Vec<(&Cell, anyhow::Result<()>)> = pool.install(|| {
        pending
            .par_iter()
            .map(|cell| {
                info!("running cell {}", cell.name);
                (*cell, run_cell(cell, &ds, &args.output, opts))
            })
            .collect()
    });

    let mut failed = 0;
    for (cell, outcome) in &outcomes {
        let marker = args.output.join(format!("{}.failed", cell.name));
        match outcome {
            Ok(()) => {
                let _ = fs::remove_file(&marker);
            }
            Err(e) => {
                failed += 1;
                warn!("cell {} failed: {e:#}", cell.name);
                write_atomic(&marker, format!("{e:#}\n").as_bytes()).map_err(Failure::runtime)?;
            }
        }
    }
    println!(
        "{} cells: {} run, {} skipped, {} failed -> {}",
        cells.len(),
        outcomes.len(),
        cells.len() - outcomes.len(),
        failed,
        args.output.display()
    );
    if failed > 0 {
        return Err(Failure::runtime(anyhow!("{failed} of {} cells failed", cells.len())));
    }
    Ok(())
}
