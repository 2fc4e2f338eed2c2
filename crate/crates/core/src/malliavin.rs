//! Monte Carlo check of the Poincaré inequality in Poisson space for
//! `Γ_t^ε(g)`:
//!
//! `Var Γ_t^ε(g) ≤ ε^{-(d+2)} ∫_0^t ε^d Σ_{x,i} E[(D_{(s,x,i)} Γ_t^ε(g))²] ds`,
//!
//! where `D_{(s,x,i)}` inserts one extra averaging update at `(s, x, i)` into
//! an otherwise unchanged clock stream.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lattice::{Field, FourierSpec, LatticeError, TorusLattice};
use crate::observables::{grad_with, touched_clocks, GammaAccumulator, ObsError, TimeProfile, WeightSpec};
use crate::quad::fit_slope;
use crate::sim::{derive_seed, dipole, ClockTrajectory, Perturbation, SimError, SimState};

/// Salt separating the perturbation-point stream from the clock stream.
const PERTURBATION_SALT: u64 = 0x5045_5254_5552_4221;

#[derive(Debug, Error, PartialEq)]
pub enum MalliavinError {
    #[error("perturbation time {s} is after the final time {t}")]
    PerturbationAfterEnd { s: f64, t: f64 },
    #[error("need at least {min} {what}, got {got}")]
    TooFew { what: &'static str, min: usize, got: usize },
    #[error("time horizon must be positive, got {0}")]
    BadHorizon(f64),
    #[error("number of strata must be at least 1")]
    BadStrata,
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Obs(#[from] ObsError),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
}

/// `Σ_c h_c (2∇u ∇w + (∇w)²)` over all clocks.
fn cross_energy(u: &Field, w: &Field, weights: &[f64]) -> f64 {
    let lat = u.lattice();
    let mut e = 0.0;
    for (c, &h) in weights.iter().enumerate() {
        if h != 0.0 {
            let gu = grad_with(lat, |s| u.get(s), c);
            let gw = grad_with(lat, |s| w.get(s), c);
            e += h * (2.0 * gu * gw + gw * gw);
        }
    }
    e
}

/// Runs `state` (holding `u_s`) and the discrepancy `w` to `t` under common
/// clocks and returns `DΓ = ∫_s^t ε^d Σ h φ (2∇u∇w + (∇w)²)`.
fn coupled_difference(
    state: &mut SimState,
    mut w: Field,
    traj: &ClockTrajectory,
    t: f64,
    weights: &[f64],
    profile: &TimeProfile,
    mut trace: impl FnMut(f64, &Field),
) -> Result<f64, MalliavinError> {
    let lat = *state.field().lattice();
    let vol = lat.cell_volume();
    let mut energy = cross_energy(state.field(), &w, weights);
    let mut value = 0.0;
    let mut last = state.time();
    let mut since = 0usize;
    let mut scratch = Vec::with_capacity(4 * lat.d());
    trace(last, &w);
    state.run_coupled_until(&mut w, traj, t, |uu, upost, uw, wpost| {
        value += vol * energy * profile.integrate(last, uu.time);
        last = uu.time;
        since += 1;
        if since >= lat.num_clocks() {
            energy = cross_energy(upost, wpost, weights);
            since = 0;
        } else {
            touched_clocks(&lat, uu, &mut scratch);
            for &c in &scratch {
                let h = weights[c];
                if h == 0.0 {
                    continue;
                }
                let gu = grad_with(&lat, |s| upost.get(s), c);
                let gw = grad_with(&lat, |s| wpost.get(s), c);
                let pu = grad_with(&lat, |s| uu.pre_value(upost, s), c);
                let pw = grad_with(&lat, |s| uw.pre_value(wpost, s), c);
                energy += h * ((2.0 * gu * gw + gw * gw) - (2.0 * pu * pw + pw * pw));
            }
        }
        trace(uu.time, wpost);
    })?;
    value += vol * energy * profile.integrate(last, t);
    Ok(value)
}

fn difference_from_state(
    mut state: SimState,
    p: Perturbation,
    clocks: &ClockTrajectory,
    weights: &[f64],
    profile: &TimeProfile,
    t: f64,
    trace: impl FnMut(f64, &Field),
) -> Result<f64, MalliavinError> {
    let w = dipole(state.field(), p.site, p.dir);
    if w.values().iter().all(|&v| v == 0.0) {
        return Ok(0.0);
    }
    coupled_difference(&mut state, w, clocks, t, weights, profile, trace)
}

/// `D_{(s,x,i)}Γ_t^ε(g)`: the change of `Γ_t^ε(g)` when one extra update at
/// `(s, x, i)` is inserted into `clocks`, computed in one coupled pass.
pub fn malliavin_difference(
    clocks: &ClockTrajectory,
    u0: &Field,
    p: Perturbation,
    g: &WeightSpec,
    t: f64,
) -> Result<f64, MalliavinError> {
    if p.s > t {
        return Err(MalliavinError::PerturbationAfterEnd { s: p.s, t });
    }
    u0.lattice().check_dir(p.dir)?;
    if p.s == t {
        return Ok(0.0);
    }
    let weights = g.edge_weights(u0.lattice())?;
    let mut state = SimState::new(u0.clone());
    state.run_until(clocks, p.s, &mut [])?;
    difference_from_state(state, p, clocks, &weights, &g.time, t, |_, _| {})
}

/// Same as [`malliavin_difference`], also reporting `(r, ‖w_r‖²_{L²}, ⟨w_r⟩)`
/// after every event.
pub fn malliavin_difference_traced(
    clocks: &ClockTrajectory,
    u0: &Field,
    p: Perturbation,
    g: &WeightSpec,
    t: f64,
) -> Result<(f64, Vec<(f64, f64, f64)>), MalliavinError> {
    if p.s > t {
        return Err(MalliavinError::PerturbationAfterEnd { s: p.s, t });
    }
    let weights = g.edge_weights(u0.lattice())?;
    let mut state = SimState::new(u0.clone());
    state.run_until(clocks, p.s, &mut [])?;
    let mut trace = Vec::new();
    let v = difference_from_state(state, p, clocks, &weights, &g.time, t, |r, w| {
        trace.push((r, w.l2_norm_sq(), w.spatial_average()))
    })?;
    Ok((v, trace))
}

/// Inputs of a Poincaré check at one lattice size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoincareParams {
    pub d: usize,
    pub n: usize,
    pub t: f64,
    pub u0: FourierSpec,
    pub g: WeightSpec,
    pub replicas: usize,
    pub samples: usize,
    pub seed: u64,
    /// Equal-length time strata for perturbation points; 1 means uniform sampling.
    pub strata: usize,
}

impl PoincareParams {
    pub fn lattice(&self) -> Result<TorusLattice, MalliavinError> {
        Ok(TorusLattice::new(self.d, self.n)?)
    }

    fn validate(&self) -> Result<(), MalliavinError> {
        if self.replicas < 50 {
            return Err(MalliavinError::TooFew {
                what: "replicas",
                min: 50,
                got: self.replicas,
            });
        }
        if self.samples < 50 {
            return Err(MalliavinError::TooFew {
                what: "perturbation samples",
                min: 50,
                got: self.samples,
            });
        }
        if !(self.t > 0.0) {
            return Err(MalliavinError::BadHorizon(self.t));
        }
        if self.strata == 0 {
            return Err(MalliavinError::BadStrata);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoincareReport {
    pub params: PoincareParams,
    pub eps: f64,
    pub mean_gamma: f64,
    /// Unbiased sample variance of `Γ_t^ε(g)`.
    pub lhs: f64,
    pub lhs_stderr: f64,
    pub rhs: f64,
    pub rhs_stderr: f64,
    /// `lhs / rhs`, `NaN` when both vanish.
    pub ratio: f64,
    pub replicas: usize,
    pub samples_per_replica: usize,
    pub events: u64,
}

impl PoincareReport {
    /// Combined relative standard error of the two sides.
    pub fn relative_stderr(&self) -> f64 {
        let rl = if self.lhs > 0.0 { self.lhs_stderr / self.lhs } else { 0.0 };
        let rr = if self.rhs > 0.0 { self.rhs_stderr / self.rhs } else { 0.0 };
        (rl * rl + rr * rr).sqrt()
    }

    /// `lhs ≤ rhs·(1 + 4·relative stderr)`.
    pub fn inequality_holds(&self) -> bool {
        self.lhs <= self.rhs * (1.0 + 4.0 * self.relative_stderr())
    }
}

struct ReplicaOutcome {
    gamma: f64,
    rhs_estimate: f64,
    events: u64,
}

fn run_replica(
    params: &PoincareParams,
    lat: TorusLattice,
    u0: &Field,
    weights: &[f64],
    index: u64,
) -> Result<ReplicaOutcome, MalliavinError> {
    let t = params.t;
    let clocks = ClockTrajectory::generate(lat, derive_seed(params.seed, index), t)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(params.seed ^ PERTURBATION_SALT, index));

    let mut points: Vec<(usize, Perturbation)> = (0..params.samples)
        .map(|k| {
            let stratum = k % params.strata;
            let width = t / params.strata as f64;
            let s = width * (stratum as f64 + rng.random::<f64>());
            let site = rng.random_range(0..lat.num_sites());
            let dir = rng.random_range(0..lat.d());
            (stratum, Perturbation { s, site, dir })
        })
        .collect();
    points.sort_by(|a, b| a.1.s.total_cmp(&b.1.s));

    let mut gamma = GammaAccumulator::new(weights.to_vec(), params.g.time.clone(), u0)?;
    let mut base = SimState::new(u0.clone());
    base.run_until(&clocks, t, &mut [&mut gamma])?;

    let mut sums = vec![0.0; params.strata];
    let mut counts = vec![0usize; params.strata];
    let mut walker = SimState::new(u0.clone());
    for (stratum, p) in points {
        walker.run_until(&clocks, p.s, &mut [])?;
        let branch = walker.clone();
        let dg = difference_from_state(branch, p, &clocks, weights, &params.g.time, t, |_, _| {})?;
        sums[stratum] += dg * dg;
        counts[stratum] += 1;
    }
    let strata_mean = sums
        .iter()
        .zip(&counts)
        .filter(|(_, &c)| c > 0)
        .map(|(s, &c)| s / c as f64)
        .sum::<f64>()
        / counts.iter().filter(|&&c| c > 0).count() as f64;
    let eps = lat.eps();
    let d = lat.d() as f64;
    let jac = eps.powf(-(d + 2.0)) * eps.powf(d) * t * (lat.num_sites() * lat.d()) as f64;
    Ok(ReplicaOutcome {
        gamma: gamma.value(),
        rhs_estimate: jac * strata_mean,
        events: base.events_applied(),
    })
}

/// Unbiased sample variance and an estimate of its standard error.
pub fn variance_with_stderr(x: &[f64]) -> (f64, f64) {
    let r = x.len() as f64;
    let mean = x.iter().sum::<f64>() / r;
    let m2 = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / r;
    let m4 = x.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / r;
    let s2 = m2 * r / (r - 1.0);
    let var_s2 = ((m4 - s2 * s2 * (r - 3.0) / (r - 1.0)) / r).max(0.0);
    (s2, var_s2.sqrt())
}

/// Mean and standard error of the mean.
pub fn mean_with_stderr(x: &[f64]) -> (f64, f64) {
    let r = x.len() as f64;
    let mean = x.iter().sum::<f64>() / r;
    if x.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (r - 1.0);
    (mean, (var / r).sqrt())
}

/// Both sides of the Poincaré inequality for `Γ_t^ε(g)`.
pub fn poincare_check(params: &PoincareParams) -> Result<PoincareReport, MalliavinError> {
    params.validate()?;
    let lat = params.lattice()?;
    let u0 = params.u0.to_field(lat)?;
    let weights = params.g.edge_weights(&lat)?;
    let outcomes: Vec<ReplicaOutcome> = (0..params.replicas as u64)
        .into_par_iter()
        .map(|idx| run_replica(params, lat, &u0, &weights, idx))
        .collect::<Result<_, _>>()?;
    let gammas: Vec<f64> = outcomes.iter().map(|o| o.gamma).collect();
    let rhs_vals: Vec<f64> = outcomes.iter().map(|o| o.rhs_estimate).collect();
    let (mean_gamma, _) = mean_with_stderr(&gammas);
    let (lhs, lhs_stderr) = variance_with_stderr(&gammas);
    let (rhs, rhs_stderr) = mean_with_stderr(&rhs_vals);
    let ratio = if rhs > 0.0 {
        lhs / rhs
    } else if lhs == 0.0 {
        f64::NAN
    } else {
        f64::INFINITY
    };
    Ok(PoincareReport {
        params: params.clone(),
        eps: lat.eps(),
        mean_gamma,
        lhs,
        lhs_stderr,
        rhs,
        rhs_stderr,
        ratio,
        replicas: params.replicas,
        samples_per_replica: params.samples,
        events: outcomes.iter().map(|o| o.events).sum(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecaySweep {
    pub rows: Vec<PoincareReport>,
    /// Slope of `log lhs` against `log ε`; `None` for degenerate input.
    pub lhs_slope: Option<f64>,
    pub rhs_slope: Option<f64>,
    /// `(d/2)·d/(d+2)`.
    pub target_exponent: f64,
    pub tolerance: f64,
    /// Set when every variance vanishes (e.g. flat `u_0`).
    pub degenerate: bool,
}

impl DecaySweep {
    /// Empirical decay at least as fast as the target exponent, up to the tolerance.
    pub fn decays_fast_enough(&self) -> bool {
        match self.lhs_slope {
            Some(s) => s >= self.target_exponent - self.tolerance,
            None => self.degenerate,
        }
    }
}

/// Runs [`poincare_check`] for each mesh count and fits decay exponents in `ε`.
pub fn variance_decay_sweep(
    ns: &[usize],
    base: &PoincareParams,
) -> Result<DecaySweep, MalliavinError> {
    if ns.len() < 3 {
        return Err(MalliavinError::TooFew {
            what: "lattice sizes",
            min: 3,
            got: ns.len(),
        });
    }
    let rows: Vec<PoincareReport> = ns
        .iter()
        .map(|&n| poincare_check(&PoincareParams { n, ..base.clone() }))
        .collect::<Result<_, _>>()?;
    let degenerate = rows.iter().all(|r| r.lhs == 0.0 && r.rhs == 0.0);
    let slope = |vals: Vec<f64>| -> Option<f64> {
        if vals.iter().any(|v| !(*v > 0.0)) {
            return None;
        }
        let x: Vec<f64> = rows.iter().map(|r| r.eps.ln()).collect();
        let y: Vec<f64> = vals.iter().map(|v| v.ln()).collect();
        Some(fit_slope(&x, &y))
    };
    let d = base.d as f64;
    Ok(DecaySweep {
        lhs_slope: slope(rows.iter().map(|r| r.lhs).collect()),
        rhs_slope: slope(rows.iter().map(|r| r.rhs).collect()),
        target_exponent: 0.5 * d * d / (d + 2.0),
        tolerance: 0.3,
        degenerate,
        rows,
    })
}
