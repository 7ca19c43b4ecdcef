//! Acceptance suite: one line per criterion, non-zero exit if any fails.
//!
//! `cargo test -p scorelab --test acceptance` runs everything, including the
//! long SGLD grid. Criterion numbers given as arguments select a subset, e.g.
//! `cargo test -p scorelab --test acceptance -- 7 8 9`.
//! `SCORELAB_ACCEPTANCE_OUT` keeps the grid outputs in that directory.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use scorelab::diffusion::{alpha, ei_backward_sample, Convention, NoiseSchedule, TimeMeasure};
use scorelab::estimate::Estimate;
use scorelab::gmm::{fisher_identity_check, sample_gmm, sample_gmm_truncated, Dataset, GmmSpec, MixtureScore};
use scorelab::losses::{
    c_hat, c_t, decompose, denoising_losses_fixed, discretization_constants, discretized_gap_report, empirical_dsm,
    epsilon_losses_fixed, gap_bound_report, gap_concentration_term, kl_bound_report, McConfig,
};
use scorelab::model::{init_params_with_output_scale, MlpArch, NetScore, ScoreNet};
use scorelab::optim::{sgld_bound_rhs, train, AdamConfig, GradStats, OptimizerConfig, SgldConfig};
use scorelab::ot::{w2_exact, SampleCloud};
use scorelab::rng::Streams;
use scorelab::runner::{report, run_grid, GridAxes, GridConfig, McBudget, RunConfig, ScheduleConfig, TrajectoryOptions};
use scorelab::score::ZeroScore;
use scorelab::topology::{mst_lifetime_sum, positive_magnitude, topology_bound_rhs, BoundParams, BoundVariant, DistanceMatrix};

type Check = scorelab::Result<Outcome>;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

struct Criterion {
    id: usize,
    name: &'static str,
    limit: Duration,
    run: fn() -> Check,
}

const fn minutes(m: u64) -> Duration {
    Duration::from_secs(60 * m)
}

const CRITERIA: [Criterion; 14] = [
    Criterion { id: 1, name: "decomposition identity", limit: minutes(5), run: decomposition_identity },
    Criterion { id: 2, name: "conditional score closed form", limit: Duration::from_secs(30), run: mehler_closed_form },
    Criterion { id: 3, name: "diffusion gaps non-negative", limit: Duration::from_secs(30), run: diffusion_gaps },
    Criterion { id: 4, name: "empirical gap inequality", limit: minutes(5), run: gap_inequality },
    Criterion { id: 5, name: "Fisher identity with trained net", limit: minutes(1), run: fisher_identity },
    Criterion { id: 6, name: "backprop vs finite differences", limit: minutes(1), run: gradient_check },
    Criterion { id: 7, name: "MST vs spanning-tree enumeration", limit: Duration::from_secs(5), run: mst_oracle },
    Criterion { id: 8, name: "positive magnitude", limit: Duration::from_secs(5), run: magnitude_checks },
    Criterion { id: 9, name: "W2 vs permutation search", limit: Duration::from_secs(10), run: w2_oracle },
    Criterion { id: 10, name: "oracle sampler end to end", limit: minutes(2), run: oracle_sampler },
    Criterion { id: 11, name: "epsilon/DSM proportionality", limit: Duration::from_secs(10), run: proportionality },
    Criterion { id: 12, name: "SGLD grid correlation report", limit: minutes(240), run: sgld_grid },
    Criterion { id: 13, name: "bound formula fixtures", limit: Duration::from_secs(1), run: bound_fixtures },
    Criterion { id: 14, name: "determinism of metric CSVs", limit: minutes(5), run: determinism },
];

fn main() {
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = Vec::new();
    for c in CRITERIA.iter().filter(|c| only.is_empty() || only.contains(&c.id)) {
        let start = Instant::now();
        let outcome = match catch_unwind(AssertUnwindSafe(c.run)) {
            Ok(Ok(o)) => o,
            Ok(Err(e)) => Outcome::new(false, format!("error: {e}")),
            Err(p) => {
                let msg = p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                Outcome::new(false, format!("panic: {msg}"))
            }
        };
        let elapsed = start.elapsed();
        let in_time = elapsed <= c.limit;
        let pass = outcome.pass && in_time;
        let timing = if in_time {
            format!("{:.1}s", elapsed.as_secs_f64())
        } else {
            format!("{:.1}s, over the {}s limit", elapsed.as_secs_f64(), c.limit.as_secs())
        };
        println!("{} {:>2} {} ({timing}): {}", if pass { "PASS" } else { "FAIL" }, c.id, c.name, outcome.detail);
        if !pass {
            failed.push(c.id);
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn within(e: &Estimate, target: f64, k: f64) -> bool {
    (e.value - target).abs() <= k * e.stderr
}

/// Three-component mixture in the plane.
fn planar_spec() -> GmmSpec {
    GmmSpec::with_uniform_means(vec![0.5, 0.3, 0.2], 2, 0.0025, 1).expect("valid mixture")
}

fn planar_schedule() -> NoiseSchedule {
    NoiseSchedule::uniform(2.0, 10).expect("valid schedule")
}

fn planar_data() -> Dataset {
    sample_gmm(&planar_spec(), 32, &Streams::new(2)).expect("valid size")
}

/// Net trained for 2k full-batch Adam steps on the planar dataset.
fn trained_planar_net() -> &'static ScoreNet {
    static NET: OnceLock<ScoreNet> = OnceLock::new();
    NET.get_or_init(|| {
        let net = ScoreNet::init(MlpArch::new(2, 2.0), 3).expect("valid arch");
        let config = OptimizerConfig::Adam(AdamConfig::new(2e-3, 32, 2000));
        train(net, &planar_data(), &planar_schedule(), &config, &Streams::new(4), &mut ())
            .expect("training succeeds")
            .net
    })
}

fn decomposition_identity() -> Check {
    let spec = planar_spec();
    let data = planar_data();
    let measure = planar_schedule().lambda_measure();
    let arch = MlpArch::new(2, 2.0);
    let random = ScoreNet::new(arch.clone(), init_params_with_output_scale(&arch, 5, 0.5)?)?;
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, net) in [("random", &random), ("trained", trained_planar_net())] {
        let r = decompose(&NetScore::gamma(net), &data, &spec, &measure, &McConfig::new(4096, 7))?;
        let ok = within(&r.residual, 0.0, 3.0) && r.residual.value.abs() <= 0.02 * r.eps_s.value.abs();
        pass &= ok;
        parts.push(format!(
            "{name}: eps_s {:.4}, residual {:.2e} ({:.2} stderr, {:.3}% of eps_s)",
            r.eps_s.value,
            r.residual.value,
            r.residual.value.abs() / r.residual.stderr,
            100.0 * r.residual.value.abs() / r.eps_s.value.abs()
        ));
    }
    Ok(Outcome::new(pass, parts.join("; ")))
}

/// `4 int e^{-2t} (E|z|^2 + d / (e^{2t} - 1)) dmeasure`.
fn conditional_energy(measure: &TimeMeasure, mean_sq_norm: f64, d: usize) -> f64 {
    4.0 * measure.integrate(|t| (-2.0 * t).exp() * (mean_sq_norm + d as f64 / (2.0 * t).exp_m1()))
}

fn mehler_closed_form() -> Check {
    let measure = planar_schedule().lambda_measure();
    let zero = ZeroScore { dim: 2 };
    let origin = Dataset::external(Array2::zeros((1, 2)), "origin")?;
    let at_origin = empirical_dsm(&zero, &origin, &measure, &McConfig::new(20_000, 1))?;
    let expected_origin = conditional_energy(&measure, 0.0, 2);

    let mut r = rng(2);
    let pts = Array2::from_shape_fn((16, 2), |_| r.random_range(-1.5..1.5));
    let sq = pts.rows().into_iter().map(|p| p.dot(&p)).sum::<f64>() / 16.0;
    let data = Dataset::external(pts, "uniform box")?;
    let at_data = empirical_dsm(&zero, &data, &measure, &McConfig::new(4096, 3))?;
    let expected_data = conditional_energy(&measure, sq, 2);

    let z = |e: &Estimate, x: f64| (e.value - x).abs() / e.stderr;
    Ok(Outcome::new(
        within(&at_origin, expected_origin, 3.0) && within(&at_data, expected_data, 3.0),
        format!(
            "origin {:.5} vs {:.5} ({:.2} stderr); 16 points {:.5} vs {:.5} ({:.2} stderr)",
            at_origin.value,
            expected_origin,
            z(&at_origin, expected_origin),
            at_data.value,
            expected_data,
            z(&at_data, expected_data)
        ),
    ))
}

fn diffusion_gaps() -> Check {
    let mut pass = true;
    let mut worst = f64::INFINITY;
    let cases = [
        (planar_spec(), planar_schedule().lambda_measure()),
        (GmmSpec::nine_component(0), NoiseSchedule::cosine(200, 0.008, 0.999)?.lambda_measure()),
    ];
    for (spec, measure) in &cases {
        let ct = c_t(spec, measure, &McConfig::new(4096, 1))?;
        pass &= ct.value >= -3.0 * ct.stderr;
        worst = worst.min(ct.value / ct.stderr);
        for n in [2, 16, 64] {
            let data = sample_gmm(spec, n, &Streams::new(n as u64))?;
            let ch = c_hat(&data, measure, &McConfig::new(64, 2))?;
            pass &= ch.value >= -3.0 * ch.stderr;
            worst = worst.min(ch.value / ch.stderr);
        }
    }
    let mut single = Vec::new();
    for (spec, measure) in &cases {
        let one = sample_gmm(spec, 1, &Streams::new(9))?;
        single.push(c_hat(&one, measure, &McConfig::new(64, 3))?.value);
    }
    pass &= single.iter().all(|v| *v == 0.0);
    Ok(Outcome::new(pass, format!("smallest value/stderr {worst:.2}; C_hat at n=1: {single:?}")))
}

fn gap_inequality() -> Check {
    let spec = GmmSpec::nine_component(0);
    let measure = NoiseSchedule::cosine(200, 0.008, 0.999)?.lambda_measure();
    let mut pass = true;
    let mut margins = Vec::new();
    for seed in 0..5 {
        let data = sample_gmm_truncated(&spec, 512, &Streams::new(100 + seed))?;
        let r = gap_bound_report(&data, &spec, &measure, 0.05, &McConfig::new(8, seed))?;
        pass &= r.margin.value >= -3.0 * r.margin.stderr;
        margins.push(format!("{:.3}±{:.3}", r.margin.value, r.margin.stderr));
    }
    Ok(Outcome::new(pass, format!("rhs - lhs per seed: {}", margins.join(", "))))
}

fn fisher_identity() -> Check {
    let spec = planar_spec();
    let psi = NetScore::gamma(trained_planar_net());
    let mut pass = true;
    let mut parts = Vec::new();
    for t in [0.2, 1.0] {
        let r = fisher_identity_check(&psi, &spec, t, 20_000, &Streams::new(6))?;
        pass &= within(&r.difference, 0.0, 3.0);
        parts.push(format!("t={t}: {:.2} stderr", r.difference.value.abs() / r.difference.stderr));
    }
    Ok(Outcome::new(pass, parts.join(", ")))
}

fn gradient_check() -> Check {
    let mut r = rng(31);
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        let arch = MlpArch::new(4, 1.0);
        let mut net = ScoreNet::new(arch.clone(), init_params_with_output_scale(&arch, seed, 0.5)?)?;
        let b = 16;
        let times: Vec<f64> = (0..b).map(|_| r.random_range(0.01..1.0)).collect();
        let xs = Array2::from_shape_fn((b, 4), |_| r.random_range(-2.0..2.0));
        let targets = Array2::from_shape_fn((b, 4), |_| r.random_range(-1.0..1.0));
        let (_, grad) = net.backprop_eps_loss(&times, xs.view(), targets.view(), None)?;
        let p = net.params().len();
        for _ in 0..50 {
            let i = r.random_range(0..p);
            let orig = net.params().as_slice()[i];
            let h = 1e-5 * orig.abs().max(1.0);
            net.params_mut()[i] = orig + h;
            let up = net.backprop_eps_loss(&times, xs.view(), targets.view(), None)?.0;
            net.params_mut()[i] = orig - h;
            let down = net.backprop_eps_loss(&times, xs.view(), targets.view(), None)?.0;
            net.params_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let g = grad.as_slice()[i];
            worst = worst.max((fd - g).abs() / fd.abs().max(g.abs()).max(1e-6));
        }
    }
    Ok(Outcome::new(worst < 1e-5, format!("max relative error {worst:.2e} over 250 coordinates")))
}

/// Minimum total weight over all spanning trees, by enumerating every edge
/// subset of size `k - 1`.
fn spanning_tree_oracle(k: usize, dist: &[f64]) -> f64 {
    let edges: Vec<(usize, usize)> = (0..k).flat_map(|i| (i + 1..k).map(move |j| (i, j))).collect();
    let mut best = f64::INFINITY;
    for mask in 0u32..(1 << edges.len()) {
        if mask.count_ones() as usize != k - 1 {
            continue;
        }
        let mut label: Vec<usize> = (0..k).collect();
        let mut weight = 0.0;
        for (e, &(i, j)) in edges.iter().enumerate() {
            if mask & (1 << e) != 0 {
                let (a, b) = (label[i], label[j]);
                label.iter_mut().filter(|l| **l == b).for_each(|l| *l = a);
                weight += dist[i * k + j];
            }
        }
        if label.iter().all(|&l| l == label[0]) {
            best = best.min(weight);
        }
    }
    if k == 1 {
        0.0
    } else {
        best
    }
}

fn mst_oracle() -> Check {
    let mut r = rng(7);
    let mut mismatches = 0;
    for _ in 0..100 {
        let k = r.random_range(1..=6);
        // l1 distances between integer points: an exact metric in floating point.
        let pts: Vec<[i32; 3]> = (0..k).map(|_| [0; 3].map(|_| r.random_range(-6..=6))).collect();
        let mut dist = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..k {
                dist[i * k + j] = pts[i].iter().zip(&pts[j]).map(|(a, b)| (a - b).abs()).sum::<i32>() as f64;
            }
        }
        let got = mst_lifetime_sum(&DistanceMatrix::from_dense(k, dist.clone())?);
        if got != spanning_tree_oracle(k, &dist) {
            mismatches += 1;
        }
    }
    Ok(Outcome::new(mismatches == 0, format!("{mismatches} mismatches over 100 instances")))
}

fn magnitude_checks() -> Check {
    let single = positive_magnitude(&DistanceMatrix::from_dense(1, vec![0.0])?, 3.0)?.value;
    let mut worst: f64 = 0.0;
    for r in [0.01, 0.1, 1.0, 4.0, 30.0] {
        for rho in [0.01, 0.3, 1.0, 2.5, 10.0] {
            let m = positive_magnitude(&DistanceMatrix::from_dense(2, vec![0.0, rho, rho, 0.0])?, r)?.value;
            worst = worst.max((m - 2.0 / (1.0 + (-r * rho).exp())).abs());
        }
    }
    let mut g = rng(8);
    let pts: Vec<[f64; 2]> = (0..5).map(|_| [g.random_range(-1.0..1.0), g.random_range(-1.0..1.0)]).collect();
    let with_copy: Vec<[f64; 2]> = pts.iter().copied().chain([pts[2], pts[0]]).collect();
    let euclid = |p: &[[f64; 2]]| {
        let k = p.len();
        let v = (0..k * k).map(|ij| ((p[ij / k][0] - p[ij % k][0]).powi(2) + (p[ij / k][1] - p[ij % k][1]).powi(2)).sqrt());
        DistanceMatrix::from_dense(k, v.collect())
    };
    let mut dedup_gap: f64 = 0.0;
    for r in [0.5, 2.0, 8.0] {
        let a = positive_magnitude(&euclid(&pts)?, r)?.value;
        let b = positive_magnitude(&euclid(&with_copy)?, r)?.value;
        dedup_gap = dedup_gap.max((a - b).abs());
    }
    Ok(Outcome::new(
        single == 1.0 && worst <= 1e-10 && dedup_gap <= 1e-10,
        format!("single point {single}; two-point max error {worst:.1e}; duplicate-point change {dedup_gap:.1e}"),
    ))
}

/// Squared W2 by trying every matching.
fn w2_sq_by_permutations(x: &Array2<f64>, y: &Array2<f64>) -> f64 {
    fn search(i: usize, used: &mut [bool], acc: f64, cost: &dyn Fn(usize, usize) -> f64, best: &mut f64) {
        let m = used.len();
        if i == m {
            *best = best.min(acc);
            return;
        }
        for j in 0..m {
            if !used[j] {
                used[j] = true;
                search(i + 1, used, acc + cost(i, j), cost, best);
                used[j] = false;
            }
        }
    }
    let m = x.nrows();
    let cost = |i: usize, j: usize| (&x.row(i) - &y.row(j)).mapv(|v| v * v).sum();
    let mut best = f64::INFINITY;
    search(0, &mut vec![false; m], 0.0, &cost, &mut best);
    best / m as f64
}

fn w2_oracle() -> Check {
    let mut r = rng(9);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let m = r.random_range(1..=7);
        let d = r.random_range(1..=3);
        let x = Array2::from_shape_fn((m, d), |_| r.random_range(-2.0..2.0));
        let y = Array2::from_shape_fn((m, d), |_| r.random_range(-2.0..2.0));
        let got = w2_exact(&SampleCloud::new(x.clone())?, &SampleCloud::new(y.clone())?)?.w2_sq;
        worst = worst.max((got - w2_sq_by_permutations(&x, &y)).abs());
    }
    let mut axioms = true;
    for _ in 0..50 {
        let m = r.random_range(2..=12);
        let clouds: Vec<SampleCloud> = (0..3)
            .map(|_| SampleCloud::new(Array2::from_shape_fn((m, 2), |_| r.random_range(-1.0..1.0))))
            .collect::<scorelab::Result<_>>()?;
        let w = |a: usize, b: usize| w2_exact(&clouds[a], &clouds[b]).map(|rep| rep.w2);
        axioms &= w(0, 0)? == 0.0;
        axioms &= (w(0, 1)? - w(1, 0)?).abs() <= 1e-12;
        axioms &= w(0, 1)? > 0.0;
        axioms &= w(0, 2)? <= w(0, 1)? + w(1, 2)? + 1e-12;
    }
    Ok(Outcome::new(
        worst <= 1e-10 && axioms,
        format!("max |W2^2 - brute force| {worst:.1e}; metric axioms {}", if axioms { "hold" } else { "violated" }),
    ))
}

fn oracle_sampler() -> Check {
    let spec = GmmSpec::gaussian(vec![0.0, 0.0], 0.25)?;
    let schedule = NoiseSchedule::uniform(4.0, 400)?;
    let m = 4096;
    let generated = ei_backward_sample(&MixtureScore::model_target(&spec), &schedule, m, &Streams::new(1))?;
    let fresh = |seed| sample_gmm(&spec, m, &Streams::new(seed)).map(|d| d.points().clone());
    let (a, b) = (fresh(2)?, fresh(3)?);
    let model = w2_exact(&SampleCloud::new(generated)?, &SampleCloud::new(a.clone())?)?.w2_sq;
    let baseline = w2_exact(&SampleCloud::new(a)?, &SampleCloud::new(b)?)?.w2_sq;
    Ok(Outcome::new(
        model <= 2.0 * baseline,
        format!("W2^2 generated {model:.5} vs fresh-fresh {baseline:.5} (ratio {:.3})", model / baseline),
    ))
}

fn proportionality() -> Check {
    let arch = MlpArch::new(4, 2.0);
    let net = ScoreNet::new(arch.clone(), init_params_with_output_scale(&arch, 4, 0.3)?)?;
    let field = NetScore::new(&net, Convention::Lebesgue);
    let mut times: Vec<f64> = NoiseSchedule::uniform(2.0, 10)?.times().to_vec();
    times.extend(NoiseSchedule::cosine(200, 0.008, 0.999)?.times().iter().step_by(10));
    let mut r = rng(11);
    let mut worst: f64 = 0.0;
    for &t in &times {
        let x0s = Array2::from_shape_fn((64, 4), |_| r.random_range(-1.0..1.0));
        let noises = Array2::from_shape_fn((64, 4), |_| r.random_range(-2.0..2.0));
        let ts = vec![t; 64];
        let eps = epsilon_losses_fixed(&net, x0s.view(), &ts, noises.view())?;
        let dsm = denoising_losses_fixed(&field, x0s.view(), &ts, noises.view(), Convention::Lebesgue)?;
        let factor = 4.0 / (1.0 - alpha(t));
        for (a, b) in dsm.iter().zip(&eps) {
            worst = worst.max((a - factor * b).abs() / a.abs());
        }
    }
    Ok(Outcome::new(worst < 1e-10, format!("max relative error {worst:.1e} over {} atoms", times.len())))
}

fn acceptance_dir(name: &str) -> (PathBuf, Option<tempfile::TempDir>) {
    match std::env::var_os("SCORELAB_ACCEPTANCE_OUT") {
        Some(root) => (PathBuf::from(root).join(name), None),
        None => {
            let tmp = tempfile::tempdir().expect("temporary directory");
            (tmp.path().join(name), Some(tmp))
        }
    }
}

fn sgld_grid() -> Check {
    let config = GridConfig {
        base: RunConfig::desk_default(512, 5e-4, 1e4),
        axes: GridAxes {
            eta: vec![5e-4, 2e-3],
            beta: vec![1e4, 1e10],
            n: vec![512, 2048],
            batch_size: None,
        },
    };
    let (out, _guard) = acceptance_dir("grid");
    let outcome = run_grid(&config, &out, rayon::current_num_threads())?;
    let failed = outcome.runs.iter().filter(|r| r.2.is_err()).count();
    let table = report(&outcome.aggregate, &out.join("report"))?;
    let spearman = |beta: f64, column: &str| {
        table
            .rows
            .iter()
            .find(|r| r.group.parse::<f64>().ok() == Some(beta) && r.complexity == column)
            .and_then(|r| r.spearman)
    };
    let fmt = |v: Option<f64>| v.map_or("undefined".to_string(), |v| format!("{v:.3}"));
    let hot = spearman(1e4, "b_proxy");
    let cold = spearman(1e10, "b_proxy");
    let produced = out.join("report").join("correlations.csv").exists() && failed == 0;
    // The sign expectation is reported but does not decide the outcome.
    let sign = match cold {
        Some(v) if v > 0.0 => "as expected",
        _ => "NOT as expected (stochastic)",
    };
    Ok(Outcome::new(
        produced,
        format!(
            "{} runs, {failed} failed; Spearman(B, gap) beta=1e4 {}, beta=1e10 {} (sign {sign}); sqrt-n proxy beta=1e10 {}",
            outcome.runs.len(),
            fmt(hot),
            fmt(cold),
            fmt(spearman(1e10, "b_proxy_sqrt_n"))
        ),
    ))
}

fn bound_fixtures() -> Check {
    let mut errors = Vec::new();
    let mut check = |name: &str, got: f64, expected: f64| {
        let err = (got - expected).abs();
        if err > 1e-10 {
            errors.push(format!("{name}: {got} vs {expected}"));
        }
        err
    };
    let mut worst: f64 = 0.0;

    worst = worst.max(check("KL", kl_bound_report(0.3, 1.7, 2.5, 3.0, 0.01)?.total, 0.9292138787003328));

    let stats = GradStats {
        sq_grad_norms: vec![4.0, 1.0, 9.0],
        losses: vec![0.0; 3],
        step_sizes: vec![0.1, 0.2, 0.1],
    };
    let sgld = SgldConfig { a: 0.5, ..SgldConfig::new(0.1, 100.0, 100, 3) };
    worst = worst.max(check("SGLD", sgld_bound_rhs(&stats, &sgld, 1.0, 0.05, 100)?, 1.7361736529218708));

    let lifetime = BoundParams { mutual_information: 0.3, ..BoundParams::new(4.0, 0.05, 1.0) };
    worst = worst.max(check(
        "lifetime",
        topology_bound_rhs(2.5, &lifetime, 512, BoundVariant::Lifetime)?,
        0.5107809142267989,
    ));
    let magnitude = BoundParams::new(4.0, 0.05, 0.5);
    worst = worst.max(check(
        "magnitude",
        topology_bound_rhs(3.2, &magnitude, 512, BoundVariant::Magnitude)?,
        5.586133300728029,
    ));
    let unit = BoundParams::new(1.0, (-1.0f64).exp(), 1.0);
    worst = worst.max(check("magnitude unit", topology_bound_rhs(1.0, &unit, 100, BoundVariant::Magnitude)?, 0.31));

    let k = discretization_constants(4, 1.3, 0.2, 2.0)?;
    worst = worst.max(check("K1^2", k.k1_sq, 17.82297912687895));
    worst = worst.max(check("K2^2", k.k2_sq, 11.700340371976184));
    let two_atoms = TimeMeasure::new(vec![(0.2, 1.0), (0.4, 1.0)])?;
    worst = worst.max(check("concentration", gap_concentration_term(1.3, 1024, 0.05, &two_atoms)?, 0.1447388520052943));

    // Discretized gap total rebuilt from the report's Monte Carlo inputs.
    let spec = planar_spec();
    let data = sample_gmm_truncated(&spec, 64, &Streams::new(1))?;
    let schedule = planar_schedule();
    let rep = discretized_gap_report(&data, &spec, &schedule, 0.05, &McConfig::new(16, 2), 64)?;
    let (h, t, n, l) = (rep.h, rep.horizon, 64.0, (1.0f64 / 0.05).ln());
    let d2 = rep.radius * rep.radius;
    let k1 = 2.0 / (1.0 - (-2.0 * h).exp()) + d2 + 2.0;
    let k2 = d2 + 2.0 * (t / h).ln() + h * 2.0;
    let expected = (d2 + k1) * (l / (2.0 * n)).sqrt()
        + h / t * rep.fisher_mu_gamma.value
        + k1 * l / n
        + (rep.w * rep.w + (k2 * h).sqrt() * rep.w) / (t * h);
    worst = worst.max(check("discretized gap", rep.total, expected));

    Ok(Outcome::new(
        errors.is_empty(),
        if errors.is_empty() { format!("max abs error {worst:.1e} over 10 fixtures") } else { errors.join("; ") },
    ))
}

fn small_grid() -> GridConfig {
    let mut base = RunConfig::desk_default(32, 1e-3, 1e4);
    base.schedule = ScheduleConfig::cosine(20);
    base.inference_steps = 20;
    base.optimizer = OptimizerConfig::Sgld(SgldConfig::new(1e-3, 1e4, 32, 100));
    base.seeds = vec![0, 1];
    base.mc = McBudget { eval_draws: 4, decompose: 4, w2_samples: 64 };
    base.trajectory = Some(TrajectoryOptions { steps: 20, noise_seed: None });
    GridConfig {
        base,
        axes: GridAxes {
            eta: vec![1e-3],
            beta: vec![1e4, 1e8],
            n: vec![32],
            batch_size: Some(vec![32, 8]),
        },
    }
}

fn csv_files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).into_iter().flatten().flatten() {
            let path = entry.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e == "csv") {
                out.push(path.strip_prefix(root).expect("under root").to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Check {
    let tmp = tempfile::tempdir().expect("temporary directory");
    let config = small_grid();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_grid(&config, &a, 1)?;
    run_grid(&config, &b, 2)?;
    let files = csv_files(&a);
    let differing: Vec<String> = files
        .iter()
        .filter(|f| fs::read(a.join(f)).ok() != fs::read(b.join(f)).ok())
        .map(|f| f.display().to_string())
        .collect();
    let same_set = files == csv_files(&b);
    Ok(Outcome::new(
        same_set && differing.is_empty() && files.len() > 1,
        format!(
            "{} CSV files compared across 1 and 2 worker threads; {} differ{}",
            files.len(),
            differing.len(),
            if differing.is_empty() { String::new() } else { format!(": {}", differing.join(", ")) }
        ),
    ))
}
