use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use scorelab::diffusion::{ei_backward_sample, NoiseSchedule, ScheduleFile};
use scorelab::error::{Error, Result};
use scorelab::gmm::{kl_mc, sample_gmm, sample_gmm_truncated, Dataset, GmmSpec, MixtureScore};
use scorelab::io::{read_json, write_cloud, write_json};
use scorelab::losses::{decompose, kl_bound_report, gap_bound_report, discretized_gap_report, score_error, McConfig};
use scorelab::model::{load_checkpoint, save_checkpoint, NetScore};
use scorelab::optim::{proxy_b, proxy_b_sqrt_n, sgld_bound_rhs, GradStats, OptimizerConfig};
use scorelab::rng::Streams;
use scorelab::runner::{output_root, report, run_grid, train_run, GridConfig, RunConfig, RunManifest, ScheduleConfig, OUT_ENV};
use scorelab::topology::{log_grid, standard_scales, topology_report_at, BoundParams, TrajectoryRecord};

#[derive(Parser)]
#[command(name = "scorelab", version, about = "Score-based diffusion experiments on Gaussian mixtures")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, env = OUT_ENV)]
    out: Option<PathBuf>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Monte Carlo draws per cell for decompositions and bound reports.
    #[arg(long, global = true)]
    mc_budget: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a dataset from a mixture.
    GenData {
        /// Mixture JSON; defaults to the nine-component benchmark.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Seed of the benchmark means when no spec is given.
        #[arg(long, default_value_t = 0)]
        spec_seed: u64,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        truncated: bool,
    },
    /// Train one seed of a run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Draw samples with the exponential-integrator sampler.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Schedule JSON; defaults to a cosine schedule with `--steps` steps.
        #[arg(long)]
        schedule: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        steps: usize,
        #[arg(long)]
        m: usize,
    },
    /// Evaluate every term of the score-error decomposition.
    Decompose {
        /// Network checkpoint; omit with `--oracle`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Use the exact diffused score of the mixture.
        #[arg(long)]
        oracle: bool,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        schedule: Option<PathBuf>,
    },
    /// Topological complexities and bounds of a recorded trajectory.
    Topology {
        #[arg(long)]
        trajectory: PathBuf,
        /// Training-set size.
        #[arg(long)]
        n: usize,
        /// Comma-separated scales; defaults to sqrt(n) and 0.01.
        #[arg(long, value_delimiter = ',')]
        scales: Option<Vec<f64>>,
        #[arg(long, default_value_t = 1.0)]
        loss_bound: f64,
        #[arg(long, default_value_t = 0.05)]
        delta: f64,
        #[arg(long, default_value_t = 0.0)]
        mutual_information: f64,
        #[arg(long, default_value_t = 1.0)]
        lipschitz: f64,
        /// Also minimize the magnitude bound over this many log-spaced scales in [1e-3, 10 sqrt(n)].
        #[arg(long)]
        magnitude_grid: Option<usize>,
    },
    /// Data-dependent gap bounds, and score-error and SGLD bounds when a
    /// checkpoint or gradient statistics are given.
    Bounds {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        schedule: Option<PathBuf>,
        #[arg(long, default_value_t = 0.05)]
        delta: f64,
        /// Draws per diffused measure for the W2 term.
        #[arg(long, default_value_t = 1024)]
        w_samples: usize,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Gradient statistics CSV of an SGLD run, with its run configuration.
        #[arg(long, requires = "config")]
        grad_stats: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        tau: f64,
    },
    /// Run a hyperparameter grid.
    Grid {
        #[arg(long)]
        config: PathBuf,
    },
    /// Correlate complexity columns with the generalization gap.
    Report {
        #[arg(long)]
        aggregate: PathBuf,
    },
}

fn load_spec(path: &Path) -> Result<GmmSpec> {
    let spec: GmmSpec = read_json(path)?;
    spec.validate().map_err(|e| Error::Config(e.to_string()))?;
    Ok(spec)
}

fn load_schedule(path: Option<&Path>, default: NoiseSchedule) -> Result<NoiseSchedule> {
    match path {
        Some(p) => NoiseSchedule::from_file(&read_json::<ScheduleFile>(p)?),
        None => Ok(default),
    }
}

fn prepare_out(global: &Global) -> Result<PathBuf> {
    let out = output_root(global.out.as_deref());
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    Ok(out)
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    if let Some(t) = g.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t.max(1))
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    let seed = g.seed.unwrap_or(0);
    let mc_budget = g.mc_budget.unwrap_or(256);
    let clock = Instant::now();
    match &cli.command {
        Command::GenData {
            spec,
            spec_seed,
            n,
            truncated,
        } => {
            if *n == 0 {
                return Err(Error::Config("--n must be at least 1".into()));
            }
            let spec = match spec {
                Some(p) => load_spec(p)?,
                None => GmmSpec::nine_component(*spec_seed),
            };
            let out = prepare_out(g)?;
            let streams = Streams::new(seed);
            let data = if *truncated {
                sample_gmm_truncated(&spec, *n, &streams)?
            } else {
                sample_gmm(&spec, *n, &streams)?
            };
            data.save(&out.join("data.bin"))?;
            write_json(&out.join("spec.json"), &spec)?;
            let mut m = RunManifest::new("gen-data", json!({"spec": spec, "n": n, "truncated": truncated}), Some(seed));
            m.add_artifact("dataset", &out, "data.bin")?;
            m.add_artifact("spec", &out, "spec.json")?;
            m.timing.insert("seconds".into(), clock.elapsed().as_secs_f64());
            m.write(&out.join("manifest.json"))
        }
        Command::Train { config } => {
            let cfg = RunConfig::load(config)?;
            let seed = g.seed.unwrap_or(cfg.seeds[0]);
            let out = prepare_out(g)?;
            let run = train_run(&cfg, seed)?;
            save_checkpoint(&out.join("model.ckpt"), &run.net, seed, run.stats.len() as u64)?;
            run.stats.write_csv(&out.join("grad_stats.csv"))?;
            write_json(&out.join("config.json"), &cfg)?;
            let mut m = RunManifest::new("train", serde_json::to_value(&cfg)?, Some(seed));
            m.add_input("config", config)?;
            for (name, file) in [("checkpoint", "model.ckpt"), ("grad_stats", "grad_stats.csv"), ("config", "config.json")] {
                m.add_artifact(name, &out, file)?;
            }
            m.timing.insert("seconds".into(), clock.elapsed().as_secs_f64());
            m.write(&out.join("manifest.json"))
        }
        Command::Sample {
            checkpoint,
            schedule,
            steps,
            m,
        } => {
            let (net, _) = load_checkpoint(checkpoint)?;
            let sched = load_schedule(schedule.as_deref(), ScheduleConfig::cosine(*steps).build()?)?;
            let out = prepare_out(g)?;
            let points = ei_backward_sample(&NetScore::gamma(&net), &sched, *m, &Streams::new(seed))?;
            write_cloud(&out.join("samples.bin"), &points, Some(seed))?;
            let mut man = RunManifest::new("sample", json!({"m": m, "schedule": sched.to_file()}), Some(seed));
            man.add_input("checkpoint", checkpoint)?;
            man.add_artifact("samples", &out, "samples.bin")?;
            man.timing.insert("seconds".into(), clock.elapsed().as_secs_f64());
            man.write(&out.join("manifest.json"))
        }
        Command::Decompose {
            checkpoint,
            oracle,
            dataset,
            spec,
            schedule,
        } => {
            let spec_v = load_spec(spec)?;
            let data = Dataset::load(dataset)?;
            let sched = load_schedule(schedule.as_deref(), ScheduleConfig::cosine(200).build()?)?;
            let mc = McConfig::new(mc_budget, seed);
            let out = prepare_out(g)?;
            let report = match (checkpoint, oracle) {
                (_, true) => decompose(&MixtureScore::model_target(&spec_v), &data, &spec_v, &sched.lambda_measure(), &mc)?,
                (Some(c), false) => {
                    let (net, _) = load_checkpoint(c)?;
                    decompose(&NetScore::gamma(&net), &data, &spec_v, &sched.lambda_measure(), &mc)?
                }
                (None, false) => return Err(Error::Config("decompose needs --checkpoint or --oracle".into())),
            };
            write_json(&out.join("decomposition.json"), &report)?;
            let mut man = RunManifest::new("decompose", json!({"oracle": oracle, "mc": mc, "schedule": sched.to_file()}), Some(seed));
            man.add_input("dataset", dataset)?;
            man.add_input("spec", spec)?;
            if let Some(c) = checkpoint {
                man.add_input("checkpoint", c)?;
            }
            man.add_artifact("decomposition", &out, "decomposition.json")?;
            man.timing.insert("seconds".into(), clock.elapsed().as_secs_f64());
            man.write(&out.join("manifest.json"))
        }
        Command::Topology {
            trajectory,
            n,
            scales,
            loss_bound,
            delta,
            mutual_information,
            lipschitz,
            magnitude_grid,
        } => {
            let record = TrajectoryRecord::load(trajectory)?;
            let params = BoundParams {
                b: *loss_bound,
                delta: *delta,
                mutual_information: *mutual_information,
                r: 1.0,
                lipschitz: *lipschitz,
            };
            params.validate().map_err(|e| Error::Config(e.to_string()))?;
            let scales = scales.clone().unwrap_or_else(|| standard_scales(*n).to_vec());
            let grid = magnitude_grid.map(|k| log_grid(1e-3, 10.0 * (*n as f64).sqrt(), k));
            let out = prepare_out(g)?;
            let report = topology_report_at(&record, *n, &params, &scales, grid.as_deref())?;
            write_json(&out.join("topology.json"), &report)?;
            let mut man = RunManifest::new("topology", json!({"n": n, "scales": scales, "params": params}), None);
            man.add_input("trajectory", trajectory)?;
            man.add_artifact("topology", &out, "topology.json")?;
            man.note("k0", record.meta().k0)?;
            man.note("k1", record.meta().k1)?;
            man.timing.insert("seconds".into(), clock.elapsed().as_secs_f64());
            man.write(&out.join("manifest.json"))
        }
        Command::Bounds {
            dataset,
            spec,
            schedule,
            delta,
            w_samples,
            checkpoint,
            grad_stats,
            config,
            tau,
        } => {
            let spec_v = load_spec(spec)?;
            let data = Dataset::load(dataset)?;
            let sched = load_schedule(schedule.as_deref(), ScheduleConfig::cosine(200).build()?)?;
            let mc = McConfig::new(mc_budget, seed);
            let measure = sched.lambda_measure();
            let out = prepare_out(g)?;
            let gap = gap_bound_report(&data, &spec_v, &measure, *delta, &mc)?;
            let discretized = discretized_gap_report(&data, &spec_v, &sched, *delta, &mc, *w_samples)?;
            let mut result = json!({"gap": gap, "discretized_gap": discretized});
            if let Some(c) = checkpoint {
                let (net, _) = load_checkpoint(c)?;
                let eps = score_error(&NetScore::gamma(&net), &spec_v, &measure, &mc)?;
                let kl = kl_mc(&spec_v, mc_budget.max(2), &mut Streams::new(seed).rng("kl", 0))?;
                let report = kl_bound_report(eps.value, kl.value, discretized.fisher_mu_gamma.value, sched.horizon(), sched.min_step())?;
                result["score_error"] = serde_json::to_value(eps)?;
                result["kl"] = serde_json::to_value(kl)?;
                result["kl_bound"] = serde_json::to_value(report)?;
            }
            if let (Some(stats_path), Some(cfg_path)) = (grad_stats, config) {
                let cfg = RunConfig::load(cfg_path)?;
                let stats = GradStats::read_csv(stats_path)?;
                let OptimizerConfig::Sgld(s) = &cfg.optimizer else {
                    return Err(Error::Config("SGLD bound needs an SGLD configuration".into()));
                };
                let n = data.n();
                let eta = s.eta.at(0);
                let avg = stats.mean_sq_grad_norm();
                result["sgld_bound"] = json!(sgld_bound_rhs(&stats, s, *tau, *delta, n)?);
                result["b_proxy"] = json!(proxy_b(n, eta, s.beta, avg));
                result["b_proxy_sqrt_n"] = json!(proxy_b_sqrt_n(n, eta, s.beta, avg));
            }
            write_json(&out.join("bounds.json"), &result)?;
            let mut man = RunManifest::new("bounds", json!({"delta": delta, "mc": mc, "w_samples": w_samples, "tau": tau}), Some(seed));
            man.add_input("dataset", dataset)?;
            man.add_input("spec", spec)?;
            man.add_artifact("bounds", &out, "bounds.json")?;
            man.timing.insert("seconds".into(), clock.elapsed().as_secs_f64());
            man.write(&out.join("manifest.json"))
        }
        Command::Grid { config } => {
            let mut cfg = GridConfig::load(config)?;
            if let Some(s) = g.seed {
                cfg.base.seeds = vec![s];
            }
            if let Some(m) = g.mc_budget {
                cfg.base.mc.decompose = m;
            }
            let out = prepare_out(g)?;
            let threads = g.threads.unwrap_or_else(rayon::current_num_threads);
            let outcome = run_grid(&cfg, &out, threads)?;
            let failed = outcome.runs.iter().filter(|r| r.2.is_err()).count();
            eprintln!("{} runs, {failed} failed; aggregate at {}", outcome.runs.len(), outcome.aggregate.display());
            Ok(())
        }
        Command::Report { aggregate } => {
            let out = prepare_out(g)?;
            let r = report(aggregate, &out)?;
            for row in &r.rows {
                let fmt = |v: Option<f64>| v.map_or("undefined".to_string(), |x| format!("{x:.4}"));
                println!("beta={} {}: n={} pearson={} spearman={}", row.group, row.complexity, row.count, fmt(row.pearson), fmt(row.spearman));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
