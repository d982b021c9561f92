//! Monte Carlo estimators over annealed trajectories and the comparison with
//! the kinetic series.

use rayon::prelude::*;
use serde::Serialize;

use crate::collision::Restitution;
use crate::error::{Error, Result};
use crate::field::{dynamical_ball, sample_field, KineticParams};
use crate::flow::{evolve, sample_trajectory, Flags, Guards, Trajectory};
use crate::geometry::Vector;
use crate::kinetic::{adjoint_series_psi, Kernel, SeriesConfig, TestFunction};
use crate::rng::{sample_key, stream, Stream};

/// Running mean and second central moment, mergeable.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Accumulator {
    pub n: usize,
    pub mean: f64,
    pub m2: f64,
}

impl Accumulator {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn merge(&mut self, o: &Accumulator) {
        if o.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *o;
            return;
        }
        let n = self.n + o.n;
        let d = o.mean - self.mean;
        self.mean += d * o.n as f64 / n as f64;
        self.m2 += o.m2 + d * d * (self.n as f64) * (o.n as f64) / n as f64;
        self.n = n;
    }

    pub fn estimate(&self) -> EstimateWithCI {
        let var = if self.n > 1 {
            self.m2 / (self.n - 1) as f64
        } else {
            0.0
        };
        EstimateWithCI::new(self.mean, (var / self.n.max(1) as f64).sqrt(), self.n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EstimateWithCI {
    pub mean: f64,
    pub std_error: f64,
    pub n: usize,
    pub ci95_halfwidth: f64,
}

impl EstimateWithCI {
    pub fn new(mean: f64, std_error: f64, n: usize) -> Self {
        EstimateWithCI {
            mean,
            std_error,
            n,
            ci95_halfwidth: 1.96 * std_error,
        }
    }

    pub fn from_samples(xs: &[f64]) -> Self {
        let mut a = Accumulator::default();
        for &x in xs {
            a.push(x);
        }
        a.estimate()
    }

    /// Binomial proportion `k / n` with its normal-approximation error.
    pub fn proportion(k: usize, n: usize) -> Self {
        let p = k as f64 / n.max(1) as f64;
        EstimateWithCI::new(p, (p * (1.0 - p) / n.max(1) as f64).sqrt(), n)
    }

    pub fn contains(&self, x: f64) -> bool {
        (self.mean - x).abs() <= self.ci95_halfwidth
    }
}

/// Flag tallies over a batch of trajectories.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct FlagCounts {
    pub n: usize,
    pub frozen_overlap: usize,
    pub collapse_guard_tripped: usize,
    pub simultaneous_collision: usize,
    pub recollision_detected: usize,
    pub interference_detected: usize,
}

impl FlagCounts {
    pub fn add(&mut self, f: &Flags) {
        self.n += 1;
        self.frozen_overlap += f.frozen_overlap as usize;
        self.collapse_guard_tripped += f.collapse_guard_tripped as usize;
        self.simultaneous_collision += f.simultaneous_collision as usize;
        self.recollision_detected += f.recollision_detected as usize;
        self.interference_detected += f.interference_detected as usize;
    }

    pub fn merge(&mut self, o: &FlagCounts) {
        self.n += o.n;
        self.frozen_overlap += o.frozen_overlap;
        self.collapse_guard_tripped += o.collapse_guard_tripped;
        self.simultaneous_collision += o.simultaneous_collision;
        self.recollision_detected += o.recollision_detected;
        self.interference_detected += o.interference_detected;
    }

    pub fn rate(&self, k: usize) -> f64 {
        k as f64 / self.n.max(1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PhiEpsRun {
    pub estimate: EstimateWithCI,
    pub flags: FlagCounts,
}

/// `E[φ(T^t(x0, v0))]` over `n_seeds` independent Poisson fields, with the
/// flags of the sampled trajectories.
pub fn estimate_phi_eps_detailed<const D: usize, P: TestFunction<D> + ?Sized>(
    phi: &P,
    t: f64,
    x0: &Vector<D>,
    v0: &Vector<D>,
    params: KineticParams,
    n_seeds: usize,
    seed: u64,
) -> Result<PhiEpsRun> {
    if n_seeds < 2 {
        return Err(Error::Invalid("n_seeds must be at least 2".into()));
    }
    params.validate()?;
    let guards = Guards::default();
    let runs: Vec<(f64, Flags)> = (0..n_seeds as u64)
        .into_par_iter()
        .map(|i| {
            let tr = sample_trajectory(params, x0, v0, t, guards, sample_key(seed, i));
            let (x, v) = tr.final_state;
            (phi.eval(&x, &v), tr.flags)
        })
        .collect();
    let mut acc = Accumulator::default();
    let mut flags = FlagCounts::default();
    for (y, f) in &runs {
        acc.push(*y);
        flags.add(f);
    }
    Ok(PhiEpsRun {
        estimate: acc.estimate(),
        flags,
    })
}

/// `φ_ε(t, x0, v0)` by annealed Monte Carlo.
pub fn estimate_phi_eps<const D: usize, P: TestFunction<D> + ?Sized>(
    phi: &P,
    t: f64,
    x0: &Vector<D>,
    v0: &Vector<D>,
    params: KineticParams,
    n_seeds: usize,
    seed: u64,
) -> Result<EstimateWithCI> {
    Ok(estimate_phi_eps_detailed(phi, t, x0, v0, params, n_seeds, seed)?.estimate)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub eps: f64,
    pub mu: f64,
    pub i_eps: EstimateWithCI,
    pub i_0: f64,
    pub i_0_std_error: f64,
    pub abs_gap: f64,
    /// 95% half-width of the gap from both estimates.
    pub gap_ci95: f64,
    pub recollision_rate: f64,
    pub interference_rate: f64,
    pub overlap_rate: f64,
    pub collapse_trips: usize,
    pub simultaneous: usize,
    pub noise_limited: bool,
}

impl ConvergenceRow {
    pub const HEADER: [&'static str; 14] = [
        "eps",
        "mu",
        "i_eps",
        "i_eps_std_error",
        "i_0",
        "i_0_std_error",
        "abs_gap",
        "gap_ci95",
        "recollision_rate",
        "interference_rate",
        "overlap_rate",
        "collapse_trips",
        "simultaneous",
        "noise_limited",
    ];

    pub fn record(&self) -> Vec<String> {
        let f = |x: f64| format!("{x:.17e}");
        vec![
            f(self.eps),
            f(self.mu),
            f(self.i_eps.mean),
            f(self.i_eps.std_error),
            f(self.i_0),
            f(self.i_0_std_error),
            f(self.abs_gap),
            f(self.gap_ci95),
            f(self.recollision_rate),
            f(self.interference_rate),
            f(self.overlap_rate),
            self.collapse_trips.to_string(),
            self.simultaneous.to_string(),
            self.noise_limited.to_string(),
        ]
    }
}

/// Least-squares fit of `log gap = log C + slope log eps` over rows that are
/// not noise-limited.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateFit {
    pub slope: Option<f64>,
    pub log_constant: Option<f64>,
    pub rows_used: usize,
    pub excluded_eps: Vec<f64>,
    /// `gap / eps^{1/4}` at the largest eps.
    pub quarter_constant: f64,
}

pub fn fit_rate(rows: &[ConvergenceRow]) -> RateFit {
    let used: Vec<&ConvergenceRow> = rows
        .iter()
        .filter(|r| !r.noise_limited && r.abs_gap > 0.0)
        .collect();
    let excluded_eps = rows
        .iter()
        .filter(|r| r.noise_limited || r.abs_gap <= 0.0)
        .map(|r| r.eps)
        .collect();
    let (slope, log_constant) = if used.len() >= 2 {
        let n = used.len() as f64;
        let xs: Vec<f64> = used.iter().map(|r| r.eps.ln()).collect();
        let ys: Vec<f64> = used.iter().map(|r| r.abs_gap.ln()).collect();
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
        let s = sxy / sxx;
        (Some(s), Some(my - s * mx))
    } else {
        (None, None)
    };
    let quarter_constant = rows
        .iter()
        .max_by(|a, b| a.eps.total_cmp(&b.eps))
        .map(|r| r.abs_gap / r.eps.powf(0.25))
        .unwrap_or(f64::NAN);
    RateFit {
        slope,
        log_constant,
        rows_used: used.len(),
        excluded_eps,
        quarter_constant,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceReport {
    pub rows: Vec<ConvergenceRow>,
    pub fit: RateFit,
    pub i_0_k_used: usize,
    pub i_0_tail: f64,
}

/// Annealed microscopic observable against the kinetic series along a
/// Boltzmann-Grad sequence, Dirac start at `(x0, v0)`.
pub fn convergence_experiment<const D: usize, P: TestFunction<D> + ?Sized>(
    phi: &P,
    t: f64,
    x0: &Vector<D>,
    v0: &Vector<D>,
    r: Restitution,
    eps_grid: &[f64],
    n_seeds: usize,
    cfg: &SeriesConfig,
    seed: u64,
) -> Result<ConvergenceReport> {
    if eps_grid.is_empty() || eps_grid.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Invalid(
            "eps_grid must be non-empty and strictly decreasing".into(),
        ));
    }
    let psi = adjoint_series_psi(phi, t, x0, v0, r, Kernel::Hemisphere, cfg)?;
    let mut rows = Vec::new();
    for (j, &eps) in eps_grid.iter().enumerate() {
        let params = KineticParams::bg_locked(D, r, eps)?;
        let run =
            estimate_phi_eps_detailed(phi, t, x0, v0, params, n_seeds, sample_key(seed, j as u64))?;
        let abs_gap = (run.estimate.mean - psi.value).abs();
        let gap_ci95 = run.estimate.ci95_halfwidth.hypot(1.96 * psi.std_error);
        let fl = run.flags;
        rows.push(ConvergenceRow {
            eps,
            mu: params.mu,
            i_eps: run.estimate,
            i_0: psi.value,
            i_0_std_error: psi.std_error,
            abs_gap,
            gap_ci95,
            recollision_rate: fl.rate(fl.recollision_detected),
            interference_rate: fl.rate(fl.interference_detected),
            overlap_rate: fl.rate(fl.frozen_overlap),
            collapse_trips: fl.collapse_guard_tripped,
            simultaneous: fl.simultaneous_collision,
            noise_limited: run.estimate.ci95_halfwidth > abs_gap,
        });
    }
    let fit = fit_rate(&rows);
    Ok(ConvergenceReport {
        rows,
        fit,
        i_0_k_used: psi.k_used,
        i_0_tail: psi.tail_estimate,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EnergyPoint {
    pub t: f64,
    pub energy: EstimateWithCI,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnergyReport {
    pub points: Vec<EnergyPoint>,
    pub flags: FlagCounts,
}

/// Mean `|v(t)|²` over independent particles, each in its own field, with
/// initial states drawn by `sampler`.
pub fn ensemble_energy<const D: usize, S>(
    params: KineticParams,
    sampler: S,
    t_grid: &[f64],
    n_particles: usize,
    seed: u64,
) -> Result<EnergyReport>
where
    S: Fn(&mut Stream) -> (Vector<D>, Vector<D>) + Sync,
{
    params.validate()?;
    let t_max = t_grid.iter().copied().fold(0.0, f64::max);
    let guards = Guards::default();
    let runs: Vec<(Vec<f64>, Flags)> = (0..n_particles as u64)
        .into_par_iter()
        .map(|i| -> Result<(Vec<f64>, Flags)> {
            let key = sample_key(seed, i);
            let (x, v) = sampler(&mut stream(key, 1));
            let field = sample_field(dynamical_ball(&x, &v, t_max, params.eps), params, key)?;
            let tr: Trajectory<D> = evolve(&x, &v, &field, t_max, guards);
            Ok((
                t_grid
                    .iter()
                    .map(|&s| tr.velocity_at(s).norm_squared())
                    .collect(),
                tr.flags,
            ))
        })
        .collect::<Result<_>>()?;
    let mut accs = vec![Accumulator::default(); t_grid.len()];
    let mut flags = FlagCounts::default();
    for (e, f) in &runs {
        for (a, x) in accs.iter_mut().zip(e) {
            a.push(*x);
        }
        flags.add(f);
    }
    let points = t_grid
        .iter()
        .zip(&accs)
        .map(|(&t, a)| EnergyPoint {
            t,
            energy: a.estimate(),
        })
        .collect();
    Ok(EnergyReport { points, flags })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FlagRates {
    pub eps: f64,
    pub mu: f64,
    pub recollision: EstimateWithCI,
    pub interference: EstimateWithCI,
    pub flags: FlagCounts,
}

/// Fractions of trajectories flagged with a recollision or an interference,
/// per eps on a Boltzmann-Grad sequence.
pub fn recollision_interference_rates<const D: usize>(
    r: Restitution,
    x0: &Vector<D>,
    v0: &Vector<D>,
    t: f64,
    n_seeds: usize,
    eps_grid: &[f64],
    seed: u64,
) -> Result<Vec<FlagRates>> {
    let guards = Guards::default();
    eps_grid
        .iter()
        .enumerate()
        .map(|(j, &eps)| {
            let params = KineticParams::bg_locked(D, r, eps)?;
            let key = sample_key(seed, j as u64);
            let all: Vec<Flags> = (0..n_seeds as u64)
                .into_par_iter()
                .map(|i| sample_trajectory(params, x0, v0, t, guards, sample_key(key, i)).flags)
                .collect();
            let mut flags = FlagCounts::default();
            for f in &all {
                flags.add(f);
            }
            Ok(FlagRates {
                eps,
                mu: params.mu,
                recollision: EstimateWithCI::proportion(flags.recollision_detected, n_seeds),
                interference: EstimateWithCI::proportion(flags.interference_detected, n_seeds),
                flags,
            })
        })
        .collect()
}
