use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Default offset `s` of the cosine schedule.
pub const DEFAULT_COSINE_OFFSET: f64 = 0.008;
/// Default cap on `1 - abar_i / abar_{i-1}`.
pub const DEFAULT_RATIO_CAP: f64 = 0.999;
/// Resolution of the truncation search.
const ZETA_RESOLUTION: f64 = 1e-6;

/// `alpha(t) = exp(-2 t)` for the Ornstein-Uhlenbeck forward process.
#[inline]
pub fn alpha(t: f64) -> f64 {
    (-2.0 * t).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Uniform,
    Cosine,
}

/// Discretized forward times `t_1 < ... < t_N` with `t_0 := 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    times: Vec<f64>,
    alphas: Vec<f64>,
    steps: Vec<f64>,
    cosine_offset: f64,
    ratio_cap: f64,
    truncation: f64,
}

/// On-disk form: `{kind, N, s, ratio_cap, times[], alphas[]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScheduleFile {
    pub kind: ScheduleKind,
    #[serde(rename = "N")]
    pub n: usize,
    pub s: f64,
    pub ratio_cap: f64,
    pub times: Vec<f64>,
    pub alphas: Vec<f64>,
}

impl NoiseSchedule {
    /// `t_k = k T / N` for `k = 1..N`.
    pub fn uniform(horizon: f64, n: usize) -> Result<Self> {
        ensure(horizon > 0.0 && horizon.is_finite(), || {
            format!("horizon must be positive, got {horizon}")
        })?;
        ensure(n >= 1, || "step count must be at least 1".into())?;
        let h = horizon / n as f64;
        let times: Vec<f64> = (1..=n)
            .map(|k| if k == n { horizon } else { k as f64 * h })
            .collect();
        Self::from_times(
            ScheduleKind::Uniform,
            times,
            DEFAULT_COSINE_OFFSET,
            DEFAULT_RATIO_CAP,
            0.0,
        )
    }

    /// Cosine schedule on `[0, 1 - zeta]`, with `zeta` the smallest truncation
    /// (to 1e-6) keeping every consecutive ratio under `ratio_cap`.
    pub fn cosine(n: usize, s: f64, ratio_cap: f64) -> Result<Self> {
        ensure(n >= 2, || "cosine schedule needs at least 2 steps".into())?;
        ensure(s > 0.0 && s.is_finite(), || format!("offset s must be positive, got {s}"))?;
        ensure(ratio_cap > 0.0 && ratio_cap < 1.0, || {
            format!("ratio cap must lie in (0, 1), got {ratio_cap}")
        })?;

        let zeta = if cosine_feasible(n, s, ratio_cap, 0.0) {
            0.0
        } else {
            let mut lo = 0.0;
            let mut hi = 1.0 - ZETA_RESOLUTION;
            if !cosine_feasible(n, s, ratio_cap, hi) {
                return Err(Error::ScheduleConstruction(format!(
                    "no truncation satisfies ratio cap {ratio_cap} with N = {n}"
                )));
            }
            while hi - lo > ZETA_RESOLUTION {
                let mid = 0.5 * (lo + hi);
                if cosine_feasible(n, s, ratio_cap, mid) {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            hi
        };

        let abar = cosine_alpha_bars(n, s, zeta);
        let times: Vec<f64> = abar.iter().map(|a| -0.5 * a.ln()).collect();
        Self::from_times(ScheduleKind::Cosine, times, s, ratio_cap, zeta)
    }

    fn from_times(
        kind: ScheduleKind,
        times: Vec<f64>,
        cosine_offset: f64,
        ratio_cap: f64,
        truncation: f64,
    ) -> Result<Self> {
        ensure(!times.is_empty(), || "schedule has no times".into())?;
        let mut prev = 0.0;
        let mut steps = Vec::with_capacity(times.len());
        for &t in &times {
            if !(t > prev) || !t.is_finite() {
                return Err(Error::ScheduleConstruction(format!(
                    "times must be finite and strictly increasing from 0 (got {t} after {prev})"
                )));
            }
            steps.push(t - prev);
            prev = t;
        }
        let alphas = times.iter().map(|&t| alpha(t)).collect();
        Ok(Self {
            kind,
            times,
            alphas,
            steps,
            cosine_offset,
            ratio_cap,
            truncation,
        })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }
    pub fn len(&self) -> usize {
        self.times.len()
    }
    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
    pub fn times(&self) -> &[f64] {
        &self.times
    }
    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }
    /// `h_i = t_i - t_{i-1}`.
    pub fn steps(&self) -> &[f64] {
        &self.steps
    }
    pub fn horizon(&self) -> f64 {
        *self.times.last().expect("non-empty schedule")
    }
    pub fn cosine_offset(&self) -> f64 {
        self.cosine_offset
    }
    pub fn ratio_cap(&self) -> f64 {
        self.ratio_cap
    }
    /// Truncation `zeta` of the cosine grid (0 for uniform schedules).
    pub fn truncation(&self) -> f64 {
        self.truncation
    }
    pub fn min_step(&self) -> f64 {
        self.steps.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// `lambda`: atom at `t_k` carrying the step `h_k` that ends there,
    /// normalized by the horizon. For a uniform grid this is exactly `1/N`
    /// at each of `{h, 2h, ..., T}`.
    pub fn lambda_measure(&self) -> TimeMeasure {
        match self.kind {
            ScheduleKind::Uniform => self.nu_measure(),
            ScheduleKind::Cosine => {
                let total: f64 = self.steps.iter().sum();
                TimeMeasure {
                    atoms: self
                        .times
                        .iter()
                        .zip(&self.steps)
                        .map(|(&t, &h)| (t, h / total))
                        .collect(),
                }
            }
        }
    }

    /// `nu = Unif({t_i})`, the time law of the epsilon loss.
    pub fn nu_measure(&self) -> TimeMeasure {
        let w = 1.0 / self.times.len() as f64;
        TimeMeasure {
            atoms: self.times.iter().map(|&t| (t, w)).collect(),
        }
    }

    pub fn to_file(&self) -> ScheduleFile {
        ScheduleFile {
            kind: self.kind,
            n: self.len(),
            s: self.cosine_offset,
            ratio_cap: self.ratio_cap,
            times: self.times.clone(),
            alphas: self.alphas.clone(),
        }
    }

    pub fn from_file(file: &ScheduleFile) -> Result<Self> {
        if file.times.len() != file.n || file.alphas.len() != file.n {
            return Err(Error::Schema(format!(
                "schedule declares N = {} but has {} times and {} alphas",
                file.n,
                file.times.len(),
                file.alphas.len()
            )));
        }
        let truncation = match file.kind {
            ScheduleKind::Uniform => 0.0,
            // Recover zeta from the last grid point: abar(1 - zeta) = alpha(T).
            ScheduleKind::Cosine => {
                let f0 = cosine_f(0.0, file.s);
                let target = (alpha(*file.times.last().unwrap_or(&0.0)) * f0).clamp(-1.0, 1.0);
                let u = target.acos() / FRAC_PI_2 * (1.0 + file.s) - file.s;
                (1.0 - u).max(0.0)
            }
        };
        Self::from_times(file.kind, file.times.clone(), file.s, file.ratio_cap, truncation)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_file())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_file(&serde_json::from_str(text)?)
    }
}

fn cosine_f(u: f64, s: f64) -> f64 {
    ((u + s) / (1.0 + s) * FRAC_PI_2).cos()
}

/// `abar(u) = f(u) / f(0)`.
pub fn cosine_alpha_bar(u: f64, s: f64) -> f64 {
    cosine_f(u, s) / cosine_f(0.0, s)
}

fn cosine_alpha_bars(n: usize, s: f64, zeta: f64) -> Vec<f64> {
    let span = 1.0 - zeta;
    (1..=n)
        .map(|i| cosine_alpha_bar(i as f64 * span / n as f64, s))
        .collect()
}

fn cosine_feasible(n: usize, s: f64, cap: f64, zeta: f64) -> bool {
    let abar = cosine_alpha_bars(n, s, zeta);
    let mut prev = 1.0;
    for a in abar {
        if !(a > 0.0) || 1.0 - a / prev > cap {
            return false;
        }
        prev = a;
    }
    true
}

/// Discrete probability measure over diffusion times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeMeasure {
    atoms: Vec<(f64, f64)>,
}

impl TimeMeasure {
    /// Weights are normalized; every time must be positive.
    pub fn new(atoms: Vec<(f64, f64)>) -> Result<Self> {
        ensure(!atoms.is_empty(), || "time measure needs at least one atom".into())?;
        for &(t, w) in &atoms {
            ensure(t > 0.0 && t.is_finite(), || format!("atom time must be positive, got {t}"))?;
            ensure(w > 0.0 && w.is_finite(), || format!("atom weight must be positive, got {w}"))?;
        }
        let total: f64 = atoms.iter().map(|a| a.1).sum();
        Ok(Self {
            atoms: atoms.into_iter().map(|(t, w)| (t, w / total)).collect(),
        })
    }

    pub fn single(t: f64) -> Result<Self> {
        Self::new(vec![(t, 1.0)])
    }

    pub fn atoms(&self) -> &[(f64, f64)] {
        &self.atoms
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    /// `sum_k w_k f(t_k)`.
    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.atoms.iter().map(|&(t, w)| w * f(t)).sum()
    }
}
