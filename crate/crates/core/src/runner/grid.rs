use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{run_single, RunConfig, RunManifest, RunMetrics};
use crate::error::{Error, Result};
use crate::io::{atomic_write, read_json};
use crate::optim::OptimizerConfig;

/// Header of the aggregate CSV.
pub const AGGREGATE_COLUMNS: [&str; 23] = [
    "cell",
    "seed",
    "status",
    "n",
    "eta",
    "beta",
    "batch_size",
    "iterations",
    "train_loss",
    "test_loss",
    "gen_gap",
    "gen_gap_stderr",
    "mean_sq_grad_norm",
    "window_sq_grad_norm",
    "b_proxy",
    "b_proxy_sqrt_n",
    "sgld_bound",
    "e1",
    "pmag_sqrt_n",
    "pmag_small",
    "lifetime_bound",
    "w2",
    "fid",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridAxes {
    pub eta: Vec<f64>,
    /// Ignored by Adam cells.
    pub beta: Vec<f64>,
    pub n: Vec<usize>,
    /// Batch sizes; absent means full batch.
    #[serde(default)]
    pub batch_size: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    /// Template for every cell; its seeds are the grid seeds.
    pub base: RunConfig,
    pub axes: GridAxes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub id: String,
    pub n: usize,
    pub eta: f64,
    pub beta: f64,
    pub batch_size: usize,
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        let a = &self.axes;
        if a.eta.is_empty() || a.beta.is_empty() || a.n.is_empty() || a.batch_size.as_ref().is_some_and(Vec::is_empty) {
            return Err(Error::Config("grid axes must be non-empty".into()));
        }
        self.base.validate()?;
        for cell in self.cells() {
            self.cell_config(&cell).validate()?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let config: Self = read_json(path).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Cross product in the order n, eta, beta, batch size.
    pub fn cells(&self) -> Vec<GridCell> {
        let a = &self.axes;
        let mut cells = Vec::new();
        for &n in &a.n {
            let batches = a.batch_size.clone().unwrap_or_else(|| vec![n]);
            for &eta in &a.eta {
                for &beta in &a.beta {
                    for &b in &batches {
                        cells.push(GridCell {
                            id: format!("n{n}_eta{eta}_beta{beta:e}_b{b}"),
                            n,
                            eta,
                            beta,
                            batch_size: b,
                        });
                    }
                }
            }
        }
        cells
    }

    pub fn cell_config(&self, cell: &GridCell) -> RunConfig {
        let mut c = self.base.clone();
        c.n = cell.n;
        c.optimizer = match &c.optimizer {
            OptimizerConfig::Sgld(s) => {
                let mut s = s.clone();
                s.eta = crate::optim::StepSizes::Constant(cell.eta);
                s.beta = cell.beta;
                s.batch_size = cell.batch_size;
                OptimizerConfig::Sgld(s)
            }
            OptimizerConfig::Adam(a) => {
                let mut a = a.clone();
                a.lr = crate::optim::StepSizes::Constant(cell.eta);
                a.batch_size = cell.batch_size;
                OptimizerConfig::Adam(a)
            }
        };
        c
    }
}

pub struct GridOutcome {
    pub cells: Vec<GridCell>,
    /// One entry per (cell, seed), in cell-major order.
    pub runs: Vec<(String, u64, std::result::Result<RunMetrics, String>)>,
    pub aggregate: PathBuf,
}

fn run_isolated(config: &RunConfig, seed: u64, dir: &Path) -> std::result::Result<RunMetrics, String> {
    match catch_unwind(AssertUnwindSafe(|| run_single(config, seed, dir))) {
        Ok(Ok(m)) => Ok(m),
        Ok(Err(e)) => Err(e.to_string()),
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into())),
    }
}

fn aggregate_csv(runs: &[(String, u64, std::result::Result<RunMetrics, String>)]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Schema(e.to_string());
    w.write_record(AGGREGATE_COLUMNS).map_err(csv_err)?;
    for (cell, seed, result) in runs {
        let mut row = vec![cell.clone(), seed.to_string()];
        match result {
            Ok(m) => {
                row.push("ok".into());
                row.extend(m.csv_values());
            }
            Err(e) => {
                row.push(format!("failed: {e}"));
                row.extend(std::iter::repeat_n(String::new(), AGGREGATE_COLUMNS.len() - 3));
            }
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::Schema(e.to_string()))
}

/// Run every (cell, seed) pair on a pool of `threads` workers, each under
/// `out/cells/<cell>/seed_<seed>/`, then write `out/aggregate.csv` and
/// `out/manifest.json`. A failing run is recorded in its row; the others
/// proceed.
pub fn run_grid(config: &GridConfig, out: &Path, threads: usize) -> Result<GridOutcome> {
    config.validate()?;
    let cells = config.cells();
    let jobs: Vec<(GridCell, u64)> = cells
        .iter()
        .flat_map(|c| config.base.seeds.iter().map(move |&s| (c.clone(), s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let clock = Instant::now();
    let runs: Vec<_> = pool.install(|| {
        jobs.par_iter()
            .map(|(cell, seed)| {
                let dir = out.join("cells").join(&cell.id).join(format!("seed_{seed}"));
                let result = std::fs::create_dir_all(&dir)
                    .map_err(|e| e.to_string())
                    .and_then(|_| run_isolated(&config.cell_config(cell), *seed, &dir));
                (cell.id.clone(), *seed, result)
            })
            .collect()
    });
    let aggregate = out.join("aggregate.csv");
    atomic_write(&aggregate, &aggregate_csv(&runs)?)?;

    let mut manifest = RunManifest::new("grid", serde_json::to_value(config)?, None);
    manifest.add_artifact("aggregate", out, "aggregate.csv")?;
    manifest.note("cells", cells.len())?;
    manifest.note("failed_runs", runs.iter().filter(|r| r.2.is_err()).count())?;
    manifest.timing.insert("grid_seconds".into(), clock.elapsed().as_secs_f64());
    manifest.write(&out.join("manifest.json"))?;
    Ok(GridOutcome { cells, runs, aggregate })
}
