//! Exact event-driven simulation of the averaging process.
//!
//! The `d·n^d` clocks (one per site and direction, each Poisson of rate
//! `ε^{-2}`) are superposed into a single stream: global exponential gaps of
//! rate `d·n^d·ε^{-2}` and a uniformly chosen clock per event. At a ring of
//! clock `(x, i)` the values at `x` and `x + εe_i` are both replaced by their
//! mean.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use thiserror::Error;

use crate::lattice::{Field, LatticeError, TorusLattice};
use crate::quad::KahanSum;

/// Name of the generator behind every clock stream; recorded in outputs.
pub const RNG_NAME: &str = "ChaCha8Rng (rand_chacha 0.9), seeded via seed_from_u64";

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("horizon must be positive, got {0}")]
    BadHorizon(f64),
    #[error("target time {target} is before the current time {current}")]
    TimeReversed { target: f64, current: f64 },
    #[error("clock trajectory ends at {horizon}, cannot run until {target}")]
    TrajectoryExhausted { horizon: f64, target: f64 },
    #[error("perturbation time {s} is after the final time {t}")]
    PerturbationAfterEnd { s: f64, t: f64 },
    #[error("clock trajectory was generated for a different lattice")]
    LatticeMismatch,
    #[error(transparent)]
    Lattice(#[from] LatticeError),
}

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of replica `index` under `master`: `splitmix64(master ^ splitmix64(index))`.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    splitmix64(master ^ splitmix64(index))
}

/// One ring of one clock.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    pub time: f64,
    pub clock: u32,
}

/// A reproducible ordered stream of clock rings on `[0, horizon]`.
#[derive(Debug, Clone)]
pub struct ClockTrajectory {
    lattice: TorusLattice,
    seed: u64,
    horizon: f64,
    events: Vec<Event>,
}

impl ClockTrajectory {
    pub fn generate(lattice: TorusLattice, seed: u64, horizon: f64) -> Result<Self, SimError> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(SimError::BadHorizon(horizon));
        }
        let clocks = lattice.num_clocks();
        let n = lattice.n() as f64;
        let rate = clocks as f64 * n * n;
        let gap = Exp::new(rate).expect("positive rate");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let expected = (rate * horizon) as usize;
        let mut events = Vec::with_capacity(expected + expected / 16 + 16);
        let mut t = 0.0f64;
        loop {
            let next = t + gap.sample(&mut rng);
            if next > horizon {
                break;
            }
            if next <= t {
                // gap below the resolution of `t`; redraw to keep times strictly increasing
                continue;
            }
            t = next;
            let clock = rng.random_range(0..clocks) as u32;
            events.push(Event { time: t, clock });
        }
        Ok(Self {
            lattice,
            seed,
            horizon,
            events,
        })
    }

    pub fn lattice(&self) -> &TorusLattice {
        &self.lattice
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Index of the first event with time strictly greater than `t`.
    pub fn first_after(&self, t: f64) -> usize {
        self.events.partition_point(|e| e.time <= t)
    }

    /// `(site, direction)` of a clock index.
    #[inline]
    pub fn resolve(&self, ev: &Event) -> (usize, usize) {
        self.lattice.clock(ev.clock as usize)
    }
}

/// Record of one applied update, with the two values read before writing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Update {
    pub time: f64,
    pub site: usize,
    pub neighbor: usize,
    pub dir: usize,
    pub before: (f64, f64),
    pub after: f64,
}

impl Update {
    /// Value of site `s` before the update, given the field after it.
    #[inline]
    pub fn pre_value(&self, field: &Field, s: usize) -> f64 {
        if s == self.site {
            self.before.0
        } else if s == self.neighbor {
            self.before.1
        } else {
            field.get(s)
        }
    }

    /// `(u(x) − u(x+εe_i))²/2`, the exact drop of the unnormalized sum of squares.
    pub fn square_drop(&self) -> f64 {
        let d = self.before.0 - self.before.1;
        0.5 * d * d
    }
}

/// Replaces `u(x)` and `u(x + εe_i)` by their mean, in place.
pub fn apply_update_in_place(field: &mut Field, site: usize, dir: usize, time: f64) -> Update {
    let lat = *field.lattice();
    let neighbor = lat.forward(site, dir);
    let v = field.values_mut();
    let a = v[site];
    let b = v[neighbor];
    let m = 0.5 * (a + b);
    v[site] = m;
    v[neighbor] = m;
    Update {
        time,
        site,
        neighbor,
        dir,
        before: (a, b),
        after: m,
    }
}

/// Pure form of the averaging map `E_{(x,i)}`.
pub fn apply_update(field: &Field, site: usize, dir: usize) -> Result<Field, SimError> {
    field.lattice().check_dir(dir)?;
    if site >= field.lattice().num_sites() {
        return Err(SimError::Lattice(LatticeError::LengthMismatch {
            expected: field.lattice().num_sites(),
            got: site,
        }));
    }
    let mut out = field.clone();
    apply_update_in_place(&mut out, site, dir, f64::NAN);
    Ok(out)
}

/// Callback invoked by [`SimState::run_until`].
pub trait Observer {
    /// Called after each update; `post` is the field after the update and the
    /// pre-update field is recoverable through [`Update::pre_value`].
    fn on_event(&mut self, update: &Update, post: &Field);

    /// Called once when a run reaches its target time.
    fn on_advance(&mut self, _t: f64, _field: &Field) {}
}

/// Single-owner state of one replica.
#[derive(Debug, Clone)]
pub struct SimState {
    field: Field,
    time: f64,
    cursor: usize,
    initial_mean: f64,
    mean_scale: f64,
    events_applied: u64,
}

fn compensated_mean(field: &Field) -> f64 {
    let mut k = KahanSum::default();
    for &v in field.values() {
        k.add(v);
    }
    k.value() * field.lattice().cell_volume()
}

impl SimState {
    pub fn new(u0: Field) -> Self {
        let initial_mean = compensated_mean(&u0);
        let mean_scale = initial_mean.abs().max(u0.linf()).max(f64::MIN_POSITIVE);
        Self {
            field: u0,
            time: 0.0,
            cursor: 0,
            initial_mean,
            mean_scale,
            events_applied: 0,
        }
    }

    /// A state holding `field` at `time`, positioned after all events `<= time`.
    pub fn at(field: Field, time: f64, traj: &ClockTrajectory) -> Self {
        let mut s = Self::new(field);
        s.time = time;
        s.cursor = traj.first_after(time);
        s
    }

    pub fn field(&self) -> &Field {
        &self.field
    }

    pub fn into_field(self) -> Field {
        self.field
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn events_applied(&self) -> u64 {
        self.events_applied
    }

    /// Relative drift of `⟨u⟩_ε` since construction, using compensated sums.
    /// The scale is `max(|⟨u_0⟩|, ‖u_0‖_∞)`.
    pub fn mean_drift(&self) -> f64 {
        (compensated_mean(&self.field) - self.initial_mean).abs() / self.mean_scale
    }

    fn check(&self, traj: &ClockTrajectory, t: f64) -> Result<(), SimError> {
        if traj.lattice() != self.field.lattice() {
            return Err(SimError::LatticeMismatch);
        }
        if t < self.time {
            return Err(SimError::TimeReversed {
                target: t,
                current: self.time,
            });
        }
        if t > traj.horizon() {
            return Err(SimError::TrajectoryExhausted {
                horizon: traj.horizon(),
                target: t,
            });
        }
        Ok(())
    }

    /// Applies every event with time `<= t` in order, notifying observers.
    pub fn run_until(
        &mut self,
        traj: &ClockTrajectory,
        t: f64,
        observers: &mut [&mut dyn Observer],
    ) -> Result<(), SimError> {
        self.check(traj, t)?;
        let events = traj.events();
        while self.cursor < events.len() && events[self.cursor].time <= t {
            let ev = events[self.cursor];
            let (site, dir) = traj.resolve(&ev);
            let up = apply_update_in_place(&mut self.field, site, dir, ev.time);
            for o in observers.iter_mut() {
                o.on_event(&up, &self.field);
            }
            self.cursor += 1;
            self.events_applied += 1;
        }
        self.time = t;
        for o in observers.iter_mut() {
            o.on_advance(t, &self.field);
        }
        Ok(())
    }

    /// Runs this state and a companion field `w` under the same events.
    /// The callback receives both updates and both post-update fields.
    pub fn run_coupled_until(
        &mut self,
        w: &mut Field,
        traj: &ClockTrajectory,
        t: f64,
        mut on_event: impl FnMut(&Update, &Field, &Update, &Field),
    ) -> Result<(), SimError> {
        self.check(traj, t)?;
        if w.lattice() != self.field.lattice() {
            return Err(SimError::LatticeMismatch);
        }
        let events = traj.events();
        while self.cursor < events.len() && events[self.cursor].time <= t {
            let ev = events[self.cursor];
            let (site, dir) = traj.resolve(&ev);
            let uu = apply_update_in_place(&mut self.field, site, dir, ev.time);
            let uw = apply_update_in_place(w, site, dir, ev.time);
            on_event(&uu, &self.field, &uw, w);
            self.cursor += 1;
            self.events_applied += 1;
        }
        self.time = t;
        Ok(())
    }
}

/// Discrepancy created by an extra update at `(x, i)`:
/// `w = (ε/2)∇^{ε,i}u(x)(1_x − 1_{x+εe_i})`.
pub fn dipole(u: &Field, site: usize, dir: usize) -> Field {
    let lat = *u.lattice();
    let y = lat.forward(site, dir);
    let half = 0.5 * (u.get(y) - u.get(site));
    let mut w = Field::zeros(lat);
    let v = w.values_mut();
    v[site] = half;
    v[y] = -half;
    w
}

/// Location of an inserted update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Perturbation {
    pub s: f64,
    pub site: usize,
    pub dir: usize,
}

/// Runs `u` and its perturbed copy under common clocks. Returns `(u_t, w_t)`
/// where `w_t` is the perturbed copy minus `u_t`.
pub fn coupled_run(
    u0: &Field,
    p: Perturbation,
    clocks: &ClockTrajectory,
    t: f64,
) -> Result<(Field, Field), SimError> {
    if p.s > t {
        return Err(SimError::PerturbationAfterEnd { s: p.s, t });
    }
    u0.lattice().check_dir(p.dir)?;
    let mut state = SimState::new(u0.clone());
    state.run_until(clocks, p.s, &mut [])?;
    let mut w = dipole(state.field(), p.site, p.dir);
    state.run_coupled_until(&mut w, clocks, t, |_, _, _, _| {})?;
    Ok((state.into_field(), w))
}
