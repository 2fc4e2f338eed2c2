//! Trajectory functionals: the squared-gradient functional `Γ_t^ε(g)`, the
//! fluctuation fields `Y_t^ε(f)`, their martingale part and the
//! predictable quadratic variation, and the jump-size monitor.
//!
//! All accumulators are [`Observer`]s and update in `O(d)` per event by
//! touching only the edges adjacent to the two updated sites. Tracked sums
//! are recomputed from scratch once per `d·n^d` events to bound drift.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lattice::{Field, FourierMode, FourierSpec, LatticeError, TorusLattice};
use crate::quad::exp_integral;
use crate::sim::{Observer, Update};

#[derive(Debug, Error, PartialEq)]
pub enum ObsError {
    #[error("event at {got} delivered after time {last}")]
    OutOfOrder { last: f64, got: f64 },
    #[error("consecutive fields differ at {0} sites; a single update changes at most two")]
    NotASingleUpdate(usize),
    #[error("path sampled up to {last}, requested {requested}")]
    InsufficientSampling { last: f64, requested: f64 },
    #[error("weight spec has {got} directions, lattice has {expected}")]
    WeightDirections { expected: usize, got: usize },
    #[error("invalid time profile: {0}")]
    BadProfile(&'static str),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
}

/// Time dependence `φ(s)` of a weight `g_s^i(x) = φ(s) h^i(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TimeProfile {
    #[default]
    Constant,
    /// `values[k]` on `[breaks[k], breaks[k+1])`, last value extends to infinity.
    Piecewise { breaks: Vec<f64>, values: Vec<f64> },
    /// `e^{-rate·s}`.
    Exponential { rate: f64 },
}

impl TimeProfile {
    pub fn validate(&self) -> Result<(), ObsError> {
        match self {
            TimeProfile::Piecewise { breaks, values } => {
                if breaks.is_empty() || breaks.len() != values.len() {
                    return Err(ObsError::BadProfile("breaks and values must have equal nonzero length"));
                }
                if breaks[0] != 0.0 || breaks.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(ObsError::BadProfile("breaks must start at 0 and increase"));
                }
                Ok(())
            }
            TimeProfile::Exponential { rate } if !rate.is_finite() => {
                Err(ObsError::BadProfile("rate must be finite"))
            }
            _ => Ok(()),
        }
    }

    pub fn value(&self, s: f64) -> f64 {
        match self {
            TimeProfile::Constant => 1.0,
            TimeProfile::Piecewise { breaks, values } => {
                let k = breaks.partition_point(|&b| b <= s).max(1) - 1;
                values[k]
            }
            TimeProfile::Exponential { rate } => (-rate * s).exp(),
        }
    }

    /// `∫_a^b φ`: exact for piecewise-constant profiles, Simpson otherwise.
    pub fn integrate(&self, a: f64, b: f64) -> f64 {
        match self {
            TimeProfile::Constant => b - a,
            TimeProfile::Piecewise { .. } => self.integrate_exp(0.0, a, b),
            TimeProfile::Exponential { .. } => {
                (b - a) / 6.0 * (self.value(a) + 4.0 * self.value(0.5 * (a + b)) + self.value(b))
            }
        }
    }

    /// `∫_a^b φ(s) e^{-λs} ds` in closed form.
    pub fn integrate_exp(&self, lambda: f64, a: f64, b: f64) -> f64 {
        match self {
            TimeProfile::Constant => exp_integral(lambda, a, b),
            TimeProfile::Exponential { rate } => exp_integral(lambda + rate, a, b),
            TimeProfile::Piecewise { breaks, values } => {
                let mut acc = 0.0;
                for k in 0..breaks.len() {
                    let lo = breaks[k].max(a);
                    let hi = breaks.get(k + 1).copied().unwrap_or(f64::INFINITY).min(b);
                    if hi > lo {
                        acc += values[k] * exp_integral(lambda, lo, hi);
                    }
                }
                acc
            }
        }
    }
}

/// Weight `g = (g^i)` given per direction by a finite Fourier series in space
/// times a common time profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSpec {
    pub directions: Vec<FourierSpec>,
    #[serde(default)]
    pub time: TimeProfile,
}

impl WeightSpec {
    /// `g^i ≡ c` for every direction.
    pub fn constant(d: usize, c: f64) -> Self {
        Self {
            directions: (0..d).map(|_| FourierSpec::constant(d, c)).collect(),
            time: TimeProfile::Constant,
        }
    }

    /// `g^dir ≡ c`, all other directions zero.
    pub fn single_direction(d: usize, dir: usize, c: f64) -> Self {
        Self {
            directions: (0..d)
                .map(|i| FourierSpec::constant(d, if i == dir { c } else { 0.0 }))
                .collect(),
            time: TimeProfile::Constant,
        }
    }

    pub fn check(&self, d: usize) -> Result<(), ObsError> {
        if self.directions.len() != d {
            return Err(ObsError::WeightDirections {
                expected: d,
                got: self.directions.len(),
            });
        }
        for spec in &self.directions {
            spec.check_dim(d)?;
        }
        self.time.validate()
    }

    /// Spatial part `h^i(x)` indexed by clock `(x, i)`.
    pub fn edge_weights(&self, lattice: &TorusLattice) -> Result<Vec<f64>, ObsError> {
        self.check(lattice.d())?;
        let d = lattice.d();
        let mut w = vec![0.0; lattice.num_clocks()];
        for (i, spec) in self.directions.iter().enumerate() {
            let h = spec.to_field(*lattice)?;
            for s in 0..lattice.num_sites() {
                w[lattice.clock_index(s, i)] = h.get(s);
            }
        }
        debug_assert_eq!(w.len(), d * lattice.num_sites());
        Ok(w)
    }
}

/// Clocks whose gradient depends on the two sites of an update, deduplicated.
pub(crate) fn touched_clocks(lat: &TorusLattice, up: &Update, out: &mut Vec<usize>) {
    out.clear();
    for p in [up.site, up.neighbor] {
        for j in 0..lat.d() {
            out.push(lat.clock_index(p, j));
            out.push(lat.clock_index(lat.backward(p, j), j));
        }
    }
    out.sort_unstable();
    out.dedup();
}

#[inline]
pub(crate) fn grad_with(lat: &TorusLattice, value: impl Fn(usize) -> f64, clock: usize) -> f64 {
    let (s, j) = lat.clock(clock);
    lat.n() as f64 * (value(lat.forward(s, j)) - value(s))
}

fn weighted_energy(field: &Field, weights: &[f64]) -> f64 {
    let lat = field.lattice();
    let mut e = 0.0;
    for (c, &w) in weights.iter().enumerate() {
        if w != 0.0 {
            let g = grad_with(lat, |s| field.get(s), c);
            e += w * g * g;
        }
    }
    e
}

/// Running value of `Γ_t^ε(g) = Σ_i ∫_0^t ε^d Σ_x (∇^{ε,i}u_s(x))² g_s^i(x) ds`.
#[derive(Debug, Clone)]
pub struct GammaAccumulator {
    lattice: TorusLattice,
    weights: Vec<f64>,
    profile: TimeProfile,
    energy: f64,
    value: f64,
    last_time: f64,
    since_refresh: usize,
    scratch: Vec<usize>,
}

impl GammaAccumulator {
    pub fn new(
        weights: Vec<f64>,
        profile: TimeProfile,
        u0: &Field,
    ) -> Result<Self, ObsError> {
        let lattice = *u0.lattice();
        if weights.len() != lattice.num_clocks() {
            return Err(ObsError::Lattice(LatticeError::LengthMismatch {
                expected: lattice.num_clocks(),
                got: weights.len(),
            }));
        }
        profile.validate()?;
        let energy = weighted_energy(u0, &weights);
        Ok(Self {
            lattice,
            weights,
            profile,
            energy,
            value: 0.0,
            last_time: 0.0,
            since_refresh: 0,
            scratch: Vec::with_capacity(4 * lattice.d()),
        })
    }

    pub fn from_spec(spec: &WeightSpec, u0: &Field) -> Result<Self, ObsError> {
        let w = spec.edge_weights(u0.lattice())?;
        Self::new(w, spec.time.clone(), u0)
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn last_time(&self) -> f64 {
        self.last_time
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `Σ_{x,i} h^i(x) (∇^i u(x))²` of the field currently tracked.
    pub fn energy(&self) -> f64 {
        self.energy
    }

    /// Integrates the tracked (constant) integrand up to `t`.
    pub fn advance(&mut self, t: f64) -> Result<(), ObsError> {
        if t < self.last_time {
            return Err(ObsError::OutOfOrder {
                last: self.last_time,
                got: t,
            });
        }
        if t > self.last_time {
            self.value += self.lattice.cell_volume()
                * self.energy
                * self.profile.integrate(self.last_time, t);
            self.last_time = t;
        }
        Ok(())
    }

    /// Adds the increment over `[last, event_time]` using the energy of the
    /// pre-event field `pre`, recomputed from scratch.
    pub fn step(&mut self, pre: &Field, event_time: f64) -> Result<(), ObsError> {
        if pre.lattice() != &self.lattice {
            return Err(ObsError::Lattice(LatticeError::LatticeMismatch));
        }
        self.energy = weighted_energy(pre, &self.weights);
        self.advance(event_time)
    }

    /// Re-seats the tracked integrand on `field` (used after a refresh).
    pub fn resync(&mut self, field: &Field) {
        self.energy = weighted_energy(field, &self.weights);
        self.since_refresh = 0;
    }
}

impl Observer for GammaAccumulator {
    fn on_event(&mut self, up: &Update, post: &Field) {
        debug_assert!(up.time >= self.last_time);
        let _ = self.advance(up.time);
        self.since_refresh += 1;
        if self.since_refresh >= self.lattice.num_clocks() {
            self.resync(post);
            return;
        }
        let lat = self.lattice;
        let mut scratch = std::mem::take(&mut self.scratch);
        touched_clocks(&lat, up, &mut scratch);
        let mut delta = 0.0;
        for &c in &scratch {
            let w = self.weights[c];
            if w == 0.0 {
                continue;
            }
            let g_new = grad_with(&lat, |s| post.get(s), c);
            let g_old = grad_with(&lat, |s| up.pre_value(post, s), c);
            delta += w * (g_new * g_new - g_old * g_old);
        }
        self.energy += delta;
        self.scratch = scratch;
    }

    fn on_advance(&mut self, t: f64, _field: &Field) {
        let _ = self.advance(t);
    }
}

/// `θ_ε = ε^{-(d/2+1)}`.
pub fn theta(lattice: &TorusLattice) -> f64 {
    lattice.eps().powf(-(lattice.d() as f64 / 2.0 + 1.0))
}

/// `Y_t^ε(f) = θ_ε ε^d Σ_x (u_t(x) − P_t^ε u_0(x)) f(x)` for a lattice Fourier mode.
/// The centering uses `⟨P_t u_0, f⟩ = e^{μt}⟨u_0, f⟩` with `μ` the eigenvalue of `½Δ_ε`.
pub fn fluctuation_field(
    u: &Field,
    u0: &Field,
    t: f64,
    f: &FourierMode,
) -> Result<f64, ObsError> {
    let lat = *u.lattice();
    let ff = f.to_field(lat)?;
    let mu = f.half_laplacian_eigenvalue(&lat);
    let raw = u.inner(&ff)?;
    let c0 = u0.inner(&ff)?;
    Ok(theta(&lat) * (raw - (mu * t).exp() * c0))
}

/// One sample of the fluctuation field and its martingale decomposition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluctuationSample {
    pub t: f64,
    pub f: FourierMode,
    /// `Y_t^ε(f)`.
    pub y: f64,
    /// `M_t = Y_t − ∫_0^t Y_s(½Δ_ε f) ds`.
    pub m: f64,
    /// `Γ_t^ε((½∇^ε f)²)`.
    pub qv: f64,
    /// The martingale assembled from its jumps minus their compensator.
    pub m_from_jumps: f64,
}

/// Piecewise-constant record of `ε^d Σ u_s f` with the data needed to center it.
#[derive(Debug, Clone, PartialEq)]
pub struct RawPath {
    pub theta: f64,
    /// Eigenvalue of `½Δ_ε` on `f`.
    pub mu: f64,
    /// `⟨u_0, f⟩_ε`.
    pub c0: f64,
    /// `(time, value)`; the value holds on `[time, next time)`.
    pub points: Vec<(f64, f64)>,
}

impl RawPath {
    fn y_at(&self, k: usize, t: f64) -> f64 {
        self.theta * (self.points[k].1 - (self.mu * t).exp() * self.c0)
    }
}

/// `M_t(f) = Y_t(f) − ∫_0^t Y_s(½Δ_ε f) ds` on the requested grid, integrating
/// the drift exactly between recorded points.
pub fn martingale_decompose(path: &RawPath, grid: &[f64]) -> Result<Vec<f64>, ObsError> {
    let last = path.points.last().map(|p| p.0).unwrap_or(f64::NEG_INFINITY);
    if path.points.first().map(|p| p.0) != Some(0.0) {
        return Err(ObsError::InsufficientSampling {
            last,
            requested: 0.0,
        });
    }
    let mut out = Vec::with_capacity(grid.len());
    let mut drift = 0.0;
    let mut k = 0usize;
    let mut cursor_t = 0.0;
    for &t in grid {
        if t > last {
            return Err(ObsError::InsufficientSampling { last, requested: t });
        }
        if t < cursor_t {
            return Err(ObsError::OutOfOrder { last: cursor_t, got: t });
        }
        while cursor_t < t {
            let seg_end = path
                .points
                .get(k + 1)
                .map(|p| p.0)
                .unwrap_or(f64::INFINITY)
                .min(t);
            let raw = path.points[k].1;
            let seg = exp_integral(0.0, cursor_t, seg_end);
            let center = exp_integral(-path.mu, cursor_t, seg_end);
            drift += path.mu * path.theta * (raw * seg - path.c0 * center);
            cursor_t = seg_end;
            if path.points.get(k + 1).map(|p| p.0) == Some(seg_end) {
                k += 1;
            }
        }
        while path.points.get(k + 1).map(|p| p.0 <= t).unwrap_or(false) {
            k += 1;
        }
        out.push(path.y_at(k, t) - drift);
    }
    Ok(out)
}

/// Observer for `Y_t^ε(f)`, `M_t^ε(f)`, the quadratic variation and jump sizes.
#[derive(Debug, Clone)]
pub struct FluctuationTracker {
    lattice: TorusLattice,
    mode: FourierMode,
    f: Field,
    theta: f64,
    mu: f64,
    c0: f64,
    raw: f64,
    raw_integral: f64,
    cross: f64,
    cross_integral: f64,
    jump_sum: f64,
    last_time: f64,
    qv: GammaAccumulator,
    jump_bound: f64,
    max_jump_ratio: f64,
    violations: usize,
    events: u64,
    since_refresh: usize,
    path: Option<Vec<(f64, f64)>>,
    scratch: Vec<usize>,
}

/// `Σ_{x,i} ∇^i u(x) ∇^i f(x)`.
fn cross_energy(u: &Field, f: &Field) -> f64 {
    let lat = u.lattice();
    let mut e = 0.0;
    for c in 0..lat.num_clocks() {
        e += grad_with(lat, |s| u.get(s), c) * grad_with(lat, |s| f.get(s), c);
    }
    e
}

impl FluctuationTracker {
    pub fn new(mode: FourierMode, u0: &Field) -> Result<Self, ObsError> {
        let lattice = *u0.lattice();
        let f = mode.to_field(lattice)?;
        let mu = mode.half_laplacian_eigenvalue(&lattice);
        let c0 = u0.inner(&f)?;
        let qv_weights: Vec<f64> = (0..lattice.num_clocks())
            .map(|c| {
                let g = grad_with(&lattice, |s| f.get(s), c);
                0.25 * g * g
            })
            .collect();
        let qv = GammaAccumulator::new(qv_weights, TimeProfile::Constant, u0)?;
        let jump_bound = lattice.eps().powf(lattice.d() as f64 / 2.0) * f.lip_norm() * u0.linf();
        Ok(Self {
            lattice,
            theta: theta(&lattice),
            mu,
            c0,
            raw: c0,
            raw_integral: 0.0,
            cross: cross_energy(u0, &f),
            cross_integral: 0.0,
            jump_sum: 0.0,
            last_time: 0.0,
            qv,
            jump_bound,
            max_jump_ratio: 0.0,
            violations: 0,
            events: 0,
            since_refresh: 0,
            path: None,
            mode,
            f,
            scratch: Vec::with_capacity(4 * lattice.d()),
        })
    }

    /// Records the raw path for [`martingale_decompose`].
    pub fn with_path(mut self) -> Self {
        self.path = Some(vec![(0.0, self.raw)]);
        self
    }

    pub fn raw_path(&self) -> Option<RawPath> {
        self.path.as_ref().map(|p| RawPath {
            theta: self.theta,
            mu: self.mu,
            c0: self.c0,
            points: p.clone(),
        })
    }

    pub fn mode(&self) -> &FourierMode {
        &self.mode
    }

    /// `ε^{d/2}‖f‖_{Lip}‖u_0‖_∞`.
    pub fn jump_bound(&self) -> f64 {
        self.jump_bound
    }

    /// Largest observed `|ΔY| / bound`.
    pub fn max_jump_ratio(&self) -> f64 {
        self.max_jump_ratio
    }

    /// Number of events whose jump exceeded the bound beyond round-off.
    pub fn violations(&self) -> usize {
        self.violations
    }

    pub fn events(&self) -> u64 {
        self.events
    }

    fn integrate_to(&mut self, t: f64) {
        if t > self.last_time {
            let dt = t - self.last_time;
            self.raw_integral += self.raw * dt;
            self.cross_integral += self.cross * dt;
            self.last_time = t;
        }
    }

    /// Sample at the current time `t` (after the run reached `t`).
    pub fn sample(&mut self, t: f64) -> Result<FluctuationSample, ObsError> {
        if t < self.last_time {
            return Err(ObsError::OutOfOrder {
                last: self.last_time,
                got: t,
            });
        }
        self.integrate_to(t);
        self.qv.advance(t)?;
        let y = self.theta * (self.raw - (self.mu * t).exp() * self.c0);
        let center_integral = exp_integral(-self.mu, 0.0, t);
        let drift = self.mu * self.theta * (self.raw_integral - self.c0 * center_integral);
        let eps = self.lattice.eps();
        let d = self.lattice.d() as f64;
        let compensator = 0.5 * eps.powf(d / 2.0 - 1.0) * self.cross_integral;
        Ok(FluctuationSample {
            t,
            f: self.mode.clone(),
            y,
            m: y - drift,
            qv: self.qv.value(),
            m_from_jumps: self.jump_sum + compensator,
        })
    }
}

impl Observer for FluctuationTracker {
    fn on_event(&mut self, up: &Update, post: &Field) {
        self.integrate_to(up.time);
        self.qv.on_event(up, post);
        let fx = self.f.get(up.site);
        let fy = self.f.get(up.neighbor);
        let vol = self.lattice.cell_volume();
        let delta_raw = vol * ((up.after - up.before.0) * fx + (up.after - up.before.1) * fy);
        let jump = self.theta * delta_raw;
        self.jump_sum += jump;
        let ratio = if self.jump_bound > 0.0 {
            jump.abs() / self.jump_bound
        } else if jump == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        self.max_jump_ratio = self.max_jump_ratio.max(ratio);
        if ratio > 1.0 + 1e-12 {
            self.violations += 1;
        }
        self.events += 1;
        self.since_refresh += 1;
        if self.since_refresh >= self.lattice.num_clocks() {
            self.raw = post.inner(&self.f).expect("same lattice");
            self.cross = cross_energy(post, &self.f);
            self.since_refresh = 0;
        } else {
            self.raw += delta_raw;
            let lat = self.lattice;
            let mut scratch = std::mem::take(&mut self.scratch);
            touched_clocks(&lat, up, &mut scratch);
            let mut dc = 0.0;
            for &c in &scratch {
                let gf = grad_with(&lat, |s| self.f.get(s), c);
                let gn = grad_with(&lat, |s| post.get(s), c);
                let go = grad_with(&lat, |s| up.pre_value(post, s), c);
                dc += gf * (gn - go);
            }
            self.cross += dc;
            self.scratch = scratch;
        }
        if let Some(p) = self.path.as_mut() {
            p.push((up.time, self.raw));
        }
    }

    fn on_advance(&mut self, t: f64, field: &Field) {
        self.integrate_to(t);
        self.qv.on_advance(t, field);
        let raw = self.raw;
        if let Some(p) = self.path.as_mut() {
            if p.last().is_some_and(|q| q.0 < t) {
                p.push((t, raw));
            }
        }
    }
}

/// Result of checking one jump of `Y(f)` against `ε^{d/2}‖f‖_{Lip}‖u_0‖_∞`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JumpCheck {
    pub jump: f64,
    pub bound: f64,
    pub within: bool,
}

/// `|Y(post) − Y(pre)|` for a single update and whether it respects the bound.
pub fn jump_monitor(pre: &Field, post: &Field, f: &Field, u0_linf: f64) -> Result<JumpCheck, ObsError> {
    let lat = *pre.lattice();
    if post.lattice() != &lat || f.lattice() != &lat {
        return Err(ObsError::Lattice(LatticeError::LatticeMismatch));
    }
    let changed = pre
        .values()
        .iter()
        .zip(post.values())
        .filter(|(a, b)| a != b)
        .count();
    if changed > 2 {
        return Err(ObsError::NotASingleUpdate(changed));
    }
    let delta = post.combine(1.0, pre, -1.0)?;
    let jump = (theta(&lat) * delta.inner(f)?).abs();
    let bound = lat.eps().powf(lat.d() as f64 / 2.0) * f.lip_norm() * u0_linf;
    Ok(JumpCheck {
        jump,
        bound,
        within: jump <= bound * (1.0 + 1e-12),
    })
}
