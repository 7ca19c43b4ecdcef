//! Score-matching losses and generalization-gap functionals, estimated by
//! Monte Carlo against the analytic mixture oracles.
//!
//! Every functional integrates a squared norm over a [`TimeMeasure`] and over
//! forward-process draws. Draws are organised in cells, one per time atom and
//! (for dataset functionals) per datapoint; each cell holds
//! `samples_per_atom` draws. A single engine evaluates all integrands of the
//! decomposition
//!
//! ```text
//! eps_s = L_ESM + (R - L_DSM) + (C_hat - C_T)
//! ```
//!
//! on the same draws, so paired differences carry their own (small)
//! standard errors. Score fields follow the convention in [`McConfig`]; by
//! default `s = 2 grad log p~` relative to the standard Gaussian.

mod bounds;
mod epsilon;

pub use bounds::{
    kl_bound_report, gap_concentration_term, gap_bound_report, discretization_constants, discretized_gap_report, KlBoundReport,
    GapBoundReport, DiscretizationConstants, DiscretizedGapReport,
};
pub use epsilon::{denoising_losses_fixed, epsilon_loss, epsilon_losses_fixed};
pub(crate) use epsilon::sample_time;

use ndarray::{Array2, ArrayView1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{conditional_score_into, forward_into, Convention, TimeMeasure};
use crate::error::{Error, Result};
use crate::estimate::{Estimate, Stratified};
use crate::gmm::{Dataset, DiffusedMixture, Diffusible, GmmSpec, Provenance};
use crate::rng::{fill_normal, Streams};
use crate::score::{ScoreField, ZeroScore};

/// Monte Carlo settings shared by all functionals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    /// Draws per (atom) or per (datapoint, atom) cell.
    #[serde(rename = "M")]
    pub samples_per_atom: usize,
    pub seed: u64,
    /// Population and empirical draws of a cell share their Gaussian noise,
    /// and decompositions evaluate all terms on the same draws.
    pub common_random_numbers: bool,
    /// Draws come in `(G, -G)` pairs.
    pub antithetic: bool,
    /// Convention of the targets; the score field must use the same one.
    pub convention: Convention,
}

impl McConfig {
    pub fn new(samples_per_atom: usize, seed: u64) -> Self {
        Self {
            samples_per_atom,
            seed,
            common_random_numbers: true,
            antithetic: false,
            convention: Convention::Gamma,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples_per_atom < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 Monte Carlo draws per cell, got {}",
                self.samples_per_atom
            )));
        }
        if self.antithetic && self.samples_per_atom % 2 != 0 {
            return Err(Error::InvalidArgument("antithetic draws need an even sample count".into()));
        }
        Ok(())
    }

    pub(crate) fn streams(&self) -> Streams {
        Streams::new(self.seed)
    }
}

// Integrands evaluated per draw.
const EPS_S: usize = 0; // |s - 2S|^2 at population draws
const RISK: usize = 1; // |s - 2c|^2 at population draws
const C_T: usize = 2; // 4|S - c|^2 at population draws
const DSM: usize = 3; // |s - 2c|^2 at empirical draws
const ESM: usize = 4; // |s - 2S_hat|^2 at empirical draws
const C_HAT: usize = 5; // 4|c - S_hat|^2 at empirical draws
const TERMS: usize = 6;

struct Plan<'a, S: ?Sized> {
    score: &'a S,
    data: Option<&'a Dataset>,
    spec: Option<&'a GmmSpec>,
    empirical_score: bool,
    measure: &'a TimeMeasure,
    mc: &'a McConfig,
    streams: Streams,
}

struct AtomOracles {
    truth: Option<DiffusedMixture>,
    empirical: Option<DiffusedMixture>,
}

fn sq_dist(a: &[f64], b: &[f64], scale_b: f64) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - scale_b * y).powi(2)).sum()
}

fn run<S: ScoreField + ?Sized>(plan: &Plan<'_, S>) -> Result<Stratified> {
    plan.mc.validate()?;
    let d = plan.score.dim();
    if let Some(data) = plan.data {
        if data.d() != d {
            return Err(Error::InvalidArgument(format!("dataset dimension {} vs score dimension {d}", data.d())));
        }
    }
    if let Some(spec) = plan.spec {
        if spec.d != d {
            return Err(Error::InvalidArgument(format!("mixture dimension {} vs score dimension {d}", spec.d)));
        }
    }
    let oracles = plan
        .measure
        .atoms()
        .iter()
        .map(|&(t, _)| {
            Ok(AtomOracles {
                truth: plan.spec.map(|s| s.diffused(t)).transpose()?,
                empirical: match plan.data {
                    Some(data) if plan.empirical_score => Some(data.diffused(t)?),
                    _ => None,
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let per_atom = plan.data.map_or(1, Dataset::n);
    let cells = plan.measure.len() * per_atom;
    let results: Vec<(f64, Vec<f64>)> = (0..cells)
        .into_par_iter()
        .map(|c| cell(plan, &oracles, per_atom, c))
        .collect::<Result<_>>()?;
    let mut strat = Stratified::new(TERMS);
    for (w, values) in results {
        strat.push_cell(w, &values);
    }
    Ok(strat)
}

fn cell<S: ScoreField + ?Sized>(
    plan: &Plan<'_, S>,
    oracles: &[AtomOracles],
    per_atom: usize,
    c: usize,
) -> Result<(f64, Vec<f64>)> {
    let (k, i) = (c / per_atom, c % per_atom);
    let (t, w) = plan.measure.atoms()[k];
    let oracle = &oracles[k];
    let mc = plan.mc;
    let m = mc.samples_per_atom;
    let d = plan.score.dim();
    let conv = mc.convention;

    let mut noise = plan.streams.rng("noise", c as u64);
    let mut origin = plan.streams.rng("origin", c as u64);
    let mut pop_noise = plan.streams.rng("population-noise", c as u64);
    let mut g = Array2::<f64>::zeros((m, d));
    let mut gp = Array2::<f64>::zeros((m, d));
    let mut zp = Array2::<f64>::zeros((m, d));
    for j in 0..m {
        if mc.antithetic && j % 2 == 1 {
            let prev = g.row(j - 1).mapv(|v| -v);
            g.row_mut(j).assign(&prev);
            let prev = gp.row(j - 1).mapv(|v| -v);
            gp.row_mut(j).assign(&prev);
            let prev = zp.row(j - 1).to_owned();
            zp.row_mut(j).assign(&prev);
            continue;
        }
        fill_normal(&mut noise, g.row_mut(j).as_slice_mut().expect("contiguous"));
        if let Some(spec) = plan.spec {
            spec.draw(&mut origin, zp.row_mut(j).as_slice_mut().expect("contiguous"));
            if mc.common_random_numbers {
                gp.row_mut(j).assign(&g.row(j));
            } else {
                fill_normal(&mut pop_noise, gp.row_mut(j).as_slice_mut().expect("contiguous"));
            }
        }
    }

    let mut values = vec![0.0; m * TERMS];
    let mut buf_s = vec![0.0; d];
    let mut buf_c = vec![0.0; d];

    if let Some(spec_mix) = &oracle.truth {
        let mut xp = Array2::<f64>::zeros((m, d));
        for j in 0..m {
            forward_into(
                zp.row(j).as_slice().expect("contiguous"),
                t,
                gp.row(j).as_slice().expect("contiguous"),
                xp.row_mut(j).as_slice_mut().expect("contiguous"),
            );
        }
        let sp = plan.score.eval(t, xp.view())?;
        check_rows(&sp, c)?;
        let mut scratch = vec![0.0; spec_mix.components()];
        for j in 0..m {
            let x = xp.row(j);
            let x = x.as_slice().expect("contiguous");
            spec_mix.score_into(x, &mut scratch, &mut buf_s);
            conv.apply(x, &mut buf_s);
            conditional_score_into(x, zp.row(j).as_slice().expect("contiguous"), t, conv, &mut buf_c);
            let s = sp.row(j);
            let s = s.as_slice().expect("contiguous");
            let row = &mut values[j * TERMS..(j + 1) * TERMS];
            row[EPS_S] = sq_dist(s, &buf_s, 2.0);
            row[RISK] = sq_dist(s, &buf_c, 2.0);
            row[C_T] = 4.0 * sq_dist(&buf_s, &buf_c, 1.0);
        }
    }

    if let Some(data) = plan.data {
        let z = data.point(i);
        let z = z.as_slice().expect("contiguous");
        let mut xe = Array2::<f64>::zeros((m, d));
        for j in 0..m {
            forward_into(
                z,
                t,
                g.row(j).as_slice().expect("contiguous"),
                xe.row_mut(j).as_slice_mut().expect("contiguous"),
            );
        }
        let se = plan.score.eval(t, xe.view())?;
        check_rows(&se, c)?;
        let mut scratch = vec![0.0; oracle.empirical.as_ref().map_or(0, DiffusedMixture::components)];
        let mut buf_e = vec![0.0; d];
        for j in 0..m {
            let x = xe.row(j);
            let x = x.as_slice().expect("contiguous");
            conditional_score_into(x, z, t, conv, &mut buf_c);
            let s = se.row(j);
            let s = s.as_slice().expect("contiguous");
            let row = &mut values[j * TERMS..(j + 1) * TERMS];
            row[DSM] = sq_dist(s, &buf_c, 2.0);
            if let Some(emp) = &oracle.empirical {
                emp.score_into(x, &mut scratch, &mut buf_e);
                conv.apply(x, &mut buf_e);
                row[ESM] = sq_dist(s, &buf_e, 2.0);
                row[C_HAT] = 4.0 * sq_dist(&buf_c, &buf_e, 1.0);
            }
        }
    }

    if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::numerical(None, format!("non-finite integrand in cell {c}, draw {}", pos / TERMS)));
    }
    if mc.antithetic {
        let pairs: Vec<f64> = values
            .chunks_exact(2 * TERMS)
            .flat_map(|p| (0..TERMS).map(move |q| 0.5 * (p[q] + p[TERMS + q])))
            .collect();
        values = pairs;
    }
    Ok((w / per_atom as f64, values))
}

fn check_rows(values: &Array2<f64>, cell: usize) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical(None, format!("score field returned non-finite values in cell {cell}")));
    }
    Ok(())
}

fn single_point(z: ArrayView1<f64>) -> Result<Dataset> {
    Dataset::new(
        z.to_owned().insert_axis(ndarray::Axis(0)),
        Provenance::External { source: "single point".into() },
    )
}

fn plan<'a, S: ScoreField + ?Sized>(
    score: &'a S,
    data: Option<&'a Dataset>,
    spec: Option<&'a GmmSpec>,
    empirical_score: bool,
    measure: &'a TimeMeasure,
    mc: &'a McConfig,
) -> Plan<'a, S> {
    Plan {
        score,
        data,
        spec,
        empirical_score,
        measure,
        mc,
        streams: mc.streams(),
    }
}

/// `int E|s(t, X_t^z) - 2 grad log p~_{t|0}(X_t^z | z)|^2 dmeasure(t)` for one
/// starting point `z`.
pub fn denoising_loss<S: ScoreField + ?Sized>(
    score: &S,
    z: ArrayView1<f64>,
    measure: &TimeMeasure,
    mc: &McConfig,
) -> Result<Estimate> {
    let data = single_point(z)?;
    empirical_dsm(score, &data, measure, mc)
}

/// Average of [`denoising_loss`] over the dataset (the empirical risk).
pub fn empirical_dsm<S: ScoreField + ?Sized>(
    score: &S,
    data: &Dataset,
    measure: &TimeMeasure,
    mc: &McConfig,
) -> Result<Estimate> {
    Ok(run(&plan(score, Some(data), None, false, measure, mc))?.term(DSM))
}

/// Denoising loss with a fresh `z ~ mu` for every draw.
pub fn population_risk<S: ScoreField + ?Sized>(
    score: &S,
    spec: &GmmSpec,
    measure: &TimeMeasure,
    mc: &McConfig,
) -> Result<Estimate> {
    Ok(run(&plan(score, None, Some(spec), false, measure, mc))?.term(RISK))
}

/// Population risk minus empirical risk. Population draws are organised in the
/// same cells as the empirical ones (`samples_per_atom` per datapoint and
/// atom) and share their noise under common random numbers.
pub fn gen_gap<S: ScoreField + ?Sized>(
    score: &S,
    data: &Dataset,
    spec: &GmmSpec,
    measure: &TimeMeasure,
    mc: &McConfig,
) -> Result<Estimate> {
    let strat = run(&plan(score, Some(data), Some(spec), false, measure, mc))?;
    Ok(coefficients(&[(RISK, 1.0), (DSM, -1.0)], &strat))
}

/// Explicit score matching against the score of the diffused empirical measure.
pub fn esm_loss<S: ScoreField + ?Sized>(
    score: &S,
    data: &Dataset,
    measure: &TimeMeasure,
    mc: &McConfig,
) -> Result<Estimate> {
    Ok(run(&plan(score, Some(data), None, true, measure, mc))?.term(ESM))
}

/// Explicit score matching against the true diffused score.
pub fn score_error<S: ScoreField + ?Sized>(
    score: &S,
    spec: &GmmSpec,
    measure: &TimeMeasure,
    mc: &McConfig,
) -> Result<Estimate> {
    Ok(run(&plan(score, None, Some(spec), false, measure, mc))?.term(EPS_S))
}

/// `C_T = 4 int E|grad log p~_t - grad log p~_{t|0}|^2 d(mu x measure)`.
pub fn c_t(spec: &GmmSpec, measure: &TimeMeasure, mc: &McConfig) -> Result<Estimate> {
    let zero = ZeroScore { dim: spec.d };
    Ok(run(&plan(&zero, None, Some(spec), false, measure, mc))?.term(C_T))
}

/// Empirical counterpart of [`c_t`]: conditional versus empirical score at
/// draws started from the datapoints.
pub fn c_hat(data: &Dataset, measure: &TimeMeasure, mc: &McConfig) -> Result<Estimate> {
    let zero = ZeroScore { dim: data.d() };
    Ok(run(&plan(&zero, Some(data), None, true, measure, mc))?.term(C_HAT))
}

fn coefficients(terms: &[(usize, f64)], strat: &Stratified) -> Estimate {
    let mut coeffs = [0.0; TERMS];
    for &(i, c) in terms {
        coeffs[i] += c;
    }
    strat.combination(&coeffs)
}

/// All terms of `eps_s = L_ESM + G + Delta_hat` with `G = R - L_DSM` and
/// `Delta_hat = C_hat - C_T`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecompositionReport {
    pub eps_s: Estimate,
    pub dsm: Estimate,
    pub esm: Estimate,
    pub population_risk: Estimate,
    pub gen_gap: Estimate,
    pub c_t: Estimate,
    pub c_hat: Estimate,
    pub delta_hat: Estimate,
    /// `eps_s - (esm + gen_gap + delta_hat)`; zero in expectation.
    pub residual: Estimate,
    pub n: usize,
    pub d: usize,
    pub atoms: Vec<(f64, f64)>,
    pub mc: McConfig,
}

impl DecompositionReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Evaluate every term of the decomposition. Under common random numbers all
/// terms share one set of draws; otherwise each term gets its own streams and
/// standard errors add in quadrature.
pub fn decompose<S: ScoreField + ?Sized>(
    score: &S,
    data: &Dataset,
    spec: &GmmSpec,
    measure: &TimeMeasure,
    mc: &McConfig,
) -> Result<DecompositionReport> {
    let residual_coeffs = [(EPS_S, 1.0), (ESM, -1.0), (RISK, -1.0), (DSM, 1.0), (C_HAT, -1.0), (C_T, 1.0)];
    let (terms, gen_gap, delta_hat, residual) = if mc.common_random_numbers {
        let strat = run(&plan(score, Some(data), Some(spec), true, measure, mc))?;
        let terms: Vec<Estimate> = (0..TERMS).map(|i| strat.term(i)).collect();
        (
            terms,
            coefficients(&[(RISK, 1.0), (DSM, -1.0)], &strat),
            coefficients(&[(C_HAT, 1.0), (C_T, -1.0)], &strat),
            coefficients(&residual_coeffs, &strat),
        )
    } else {
        let terms = (0..TERMS)
            .map(|i| {
                let own = mc.with_seed(Streams::new(mc.seed).derive("decompose-term", i as u64).seed());
                Ok(run(&plan(score, Some(data), Some(spec), true, measure, &own))?.term(i))
            })
            .collect::<Result<Vec<_>>>()?;
        let combine = |cs: &[(usize, f64)]| Estimate::combine_independent(&cs.iter().map(|&(i, c)| (c, terms[i])).collect::<Vec<_>>());
        (
            terms.clone(),
            combine(&[(RISK, 1.0), (DSM, -1.0)]),
            combine(&[(C_HAT, 1.0), (C_T, -1.0)]),
            combine(&residual_coeffs),
        )
    };
    let delta_hat = Estimate {
        value: terms[C_HAT].value - terms[C_T].value,
        ..delta_hat
    };
    Ok(DecompositionReport {
        eps_s: terms[EPS_S],
        dsm: terms[DSM],
        esm: terms[ESM],
        population_risk: terms[RISK],
        gen_gap,
        c_t: terms[C_T],
        c_hat: terms[C_HAT],
        delta_hat,
        residual,
        n: data.n(),
        d: data.d(),
        atoms: measure.atoms().to_vec(),
        mc: *mc,
    })
}

/// Paired estimates of `4 int I(p_t | gamma) dmeasure`, `4 int I(p_t^(n) | gamma) dmeasure`,
/// and `Delta_hat`, all from one set of draws. Used by the bound reports.
pub(crate) struct FisherPair {
    pub strat: Stratified,
}

impl FisherPair {
    pub fn compute(data: &Dataset, spec: &GmmSpec, measure: &TimeMeasure, mc: &McConfig) -> Result<Self> {
        let zero = ZeroScore { dim: data.d() };
        let mc = McConfig {
            convention: Convention::Gamma,
            ..*mc
        };
        Ok(Self {
            strat: run(&plan(&zero, Some(data), Some(spec), true, measure, &mc))?,
        })
    }

    /// With the zero field, `|0 - 2S|^2 = 4|S|^2`.
    pub fn combination(&self, population_fisher: f64, empirical_fisher: f64, c_hat: f64, c_t: f64) -> Estimate {
        let mut coeffs = [0.0; TERMS];
        coeffs[EPS_S] = population_fisher;
        coeffs[ESM] = empirical_fisher;
        coeffs[C_HAT] = c_hat;
        coeffs[C_T] = c_t;
        self.strat.combination(&coeffs)
    }
}
