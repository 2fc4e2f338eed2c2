//! Deterministic second moments of discrete gradients and the continuum
//! covariance they converge to.
//!
//! [`volterra_solve`] evaluates the truncated series `U = Π⁰ + Σ_k Π^k` for
//! `U_t^i(x) = E[(∇^{ε,i}u_t(x))²]`. Each level is a space-time convolution of
//! the previous one with the `q` kernels; space is handled in Fourier
//! variables over the torus and time with a product trapezoid rule (levels
//! interpolated linearly between grid nodes, kernel integrated by Simpson).

use std::collections::BTreeMap;

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use thiserror::Error;

use crate::lattice::{Field, FourierMode, FourierSpec, LatticeError, Phase, TorusLattice};
use crate::observables::{ObsError, WeightSpec};
use crate::spectral::{constants_lattice, LatticeConstants, SpectralCache, SpectralError};

#[derive(Debug, Error, PartialEq)]
pub enum MomentError {
    #[error("time step must be positive, got {0}")]
    BadStep(f64),
    #[error("series depth must be at least 1")]
    BadDepth,
    #[error("time {t} is not a node of the moment grid (step {h}, {steps} steps)")]
    GridMismatch { t: f64, h: f64, steps: usize },
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error(transparent)]
    Weight(#[from] ObsError),
}

/// In-place d-dimensional DFT over the torus, axis by axis.
struct TorusFft {
    lattice: TorusLattice,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl TorusFft {
    fn new(lattice: TorusLattice) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            lattice,
            forward: planner.plan_fft_forward(lattice.n()),
            inverse: planner.plan_fft_inverse(lattice.n()),
        }
    }

    fn transform(&self, data: &mut [Complex64], inverse: bool) {
        let lat = &self.lattice;
        let n = lat.n();
        let plan = if inverse { &self.inverse } else { &self.forward };
        let mut line = vec![Complex64::new(0.0, 0.0); n];
        for dir in 0..lat.d() {
            let stride = lat.stride(dir);
            for s in 0..lat.num_sites() {
                if lat.coord(s, dir) != 0 {
                    continue;
                }
                for (k, l) in line.iter_mut().enumerate() {
                    *l = data[s + k * stride];
                }
                plan.process(&mut line);
                for (k, l) in line.iter().enumerate() {
                    data[s + k * stride] = *l;
                }
            }
        }
        if inverse {
            let scale = 1.0 / lat.num_sites() as f64;
            for v in data.iter_mut() {
                *v *= scale;
            }
        }
    }

    fn forward_real(&self, values: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.transform(&mut buf, false);
        buf
    }

    fn inverse_real(&self, mut buf: Vec<Complex64>) -> Vec<f64> {
        self.transform(&mut buf, true);
        buf.into_iter().map(|c| c.re).collect()
    }
}

/// `U_t^i(x)` on a uniform time grid, with per-level diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradientSecondMoment {
    pub d: usize,
    pub n: usize,
    pub h: f64,
    pub steps: usize,
    pub depth: usize,
    /// Flattened `[time][direction][site]`.
    pub values: Vec<f64>,
    /// `ε^d Σ_{x,i} Π^k_{t_m}` for `k = 0..=depth`, indexed `[k][m]`.
    pub level_mass: Vec<Vec<f64>>,
    /// `sup_{m,i,x} Π^k`, for `k = 0..=depth`.
    pub level_sup: Vec<f64>,
    /// `max_j ‖∇^{ε,j}u_0‖²_∞`.
    pub grad_sup_sq: f64,
    /// `‖u_0‖²_{H¹}`.
    pub h1_sq: f64,
}

impl GradientSecondMoment {
    pub fn lattice(&self) -> TorusLattice {
        TorusLattice::new(self.d, self.n).expect("stored lattice is valid")
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps).map(|m| m as f64 * self.h).collect()
    }

    pub fn value(&self, m: usize, dir: usize, site: usize) -> f64 {
        let ns = self.n.pow(self.d as u32);
        self.values[(m * self.d + dir) * ns + site]
    }

    /// `U^dir_{t_m}` as a field.
    pub fn slice(&self, m: usize, dir: usize) -> Field {
        let ns = self.n.pow(self.d as u32);
        let start = (m * self.d + dir) * ns;
        Field::new(self.lattice(), self.values[start..start + ns].to_vec())
            .expect("moments are finite")
    }

    /// `ε^d Σ_{x,i} U_{t_m}`.
    pub fn total_mass(&self, m: usize) -> f64 {
        let ns = self.n.pow(self.d as u32);
        let start = m * self.d * ns;
        let vol = (self.n as f64).powi(-(self.d as i32));
        vol * self.values[start..start + self.d * ns].iter().sum::<f64>()
    }

    /// Sup-norm bound on the omitted levels `k > depth`: `2·2^{-K}·max_j‖∇^j u_0‖²_∞`.
    pub fn tail_bound(&self) -> f64 {
        2.0 * 0.5f64.powi(self.depth as i32) * self.grad_sup_sq
    }

    /// Index of the grid node at time `t`.
    pub fn node(&self, t: f64) -> Result<usize, MomentError> {
        let m = (t / self.h).round();
        if t < 0.0 || m as usize > self.steps || (m * self.h - t).abs() > 1e-9 * self.h.max(t) {
            return Err(MomentError::GridMismatch {
                t,
                h: self.h,
                steps: self.steps,
            });
        }
        Ok(m as usize)
    }
}

/// Simpson sub-intervals per time step used to integrate the kernel.
const SUB: usize = 8;

/// Product-trapezoid weights: with `Π` linear between grid nodes,
/// `∫_0^{t_m} q_{t_m−s} Π_s ds = Σ_l (U_{m−l}[l ≥ 1] + L_{m−l}[l < m]) Π_{t_l}`, where
/// `U_r = ∫_{rh}^{(r+1)h} q_u ((r+1)h − u)/h du` and `L_r = ∫_{(r−1)h}^{rh} q_u (u − (r−1)h)/h du`.
struct ProductWeights {
    upper: Vec<Vec<Vec<Complex64>>>,
    lower: Vec<Vec<Vec<Complex64>>>,
}

fn product_weights(qhat: &[Vec<Vec<Complex64>>], steps: usize, h: f64) -> ProductWeights {
    let pairs = qhat[0].len();
    let ns = qhat[0][0].len();
    let zero = || vec![vec![Complex64::new(0.0, 0.0); ns]; pairs];
    let sub_h = h / SUB as f64;
    let interval = |r: usize, rising: bool| -> Vec<Vec<Complex64>> {
        let mut out = zero();
        for k in 0..=SUB {
            let simpson = if k == 0 || k == SUB {
                1.0
            } else if k % 2 == 1 {
                4.0
            } else {
                2.0
            };
            let frac = k as f64 / SUB as f64;
            let hat = if rising { frac } else { 1.0 - frac };
            let w = simpson * sub_h / 3.0 * hat;
            if w == 0.0 {
                continue;
            }
            for (o, q) in out.iter_mut().zip(&qhat[r * SUB + k]) {
                for (a, b) in o.iter_mut().zip(q) {
                    *a += w * b;
                }
            }
        }
        out
    };
    let upper: Vec<_> = (0..=steps)
        .into_par_iter()
        .map(|r| if r < steps { interval(r, false) } else { zero() })
        .collect();
    let lower: Vec<_> = (0..=steps)
        .into_par_iter()
        .map(|r| if r >= 1 { interval(r - 1, true) } else { zero() })
        .collect();
    ProductWeights { upper, lower }
}

/// Truncated second-moment series `Σ_{k≤K} Π^k` on the grid `t_m = m·h`, `m = 0..=steps`.
pub fn volterra_solve(
    u0: &Field,
    h: f64,
    steps: usize,
    depth: usize,
) -> Result<GradientSecondMoment, MomentError> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(MomentError::BadStep(h));
    }
    if depth < 1 {
        return Err(MomentError::BadDepth);
    }
    let lat = *u0.lattice();
    let d = lat.d();
    let ns = lat.num_sites();
    let cache = SpectralCache::new(lat.n())?;
    let fft = TorusFft::new(lat);
    let vol = lat.cell_volume();
    let grads: Vec<Field> = (0..d).map(|i| u0.grad_forward(i)).collect::<Result<_, _>>()?;
    let grad_sup_sq = grads.iter().map(|g| g.linf().powi(2)).fold(0.0, f64::max);

    // Π⁰ in real space and its transform, indexed [m][i]
    let pi0: Vec<Vec<Vec<f64>>> = (0..=steps)
        .into_par_iter()
        .map(|m| {
            let t = m as f64 * h;
            grads
                .iter()
                .map(|g| {
                    let p = cache.apply_heat(g, t).expect("t ≥ 0");
                    p.values().iter().map(|v| v * v).collect()
                })
                .collect()
        })
        .collect();

    // conj(q̂^{ij}_u) at the Simpson sub-nodes u = r·h + k·h/SUB, indexed [node][i*d+j]
    let qhat: Vec<Vec<Vec<Complex64>>> = (0..=steps * SUB)
        .into_par_iter()
        .map(|k| {
            let table = cache
                .heat_kernel_1d_table(k as f64 * h / SUB as f64)
                .expect("t ≥ 0");
            let mut out = Vec::with_capacity(d * d);
            for i in 0..d {
                for j in 0..d {
                    let q = crate::spectral::q_table_from_1d(&lat, &table, i, j);
                    out.push(fft.forward_real(&q).into_iter().map(|c| c.conj()).collect());
                }
            }
            out
        })
        .collect();
    let weights = product_weights(&qhat, steps, h);
    drop(qhat);

    let mut totals: Vec<f64> = pi0.iter().flatten().flatten().copied().collect();
    let mut level_mass = vec![pi0.iter().map(|row| vol * row.iter().flatten().sum::<f64>()).collect::<Vec<_>>()];
    let mut level_sup = vec![totals.iter().copied().fold(0.0, f64::max)];

    let mut current: Vec<Vec<Vec<Complex64>>> = pi0
        .iter()
        .map(|row| row.iter().map(|v| fft.forward_real(v)).collect())
        .collect();

    for _ in 1..=depth {
        let next: Vec<Vec<Vec<Complex64>>> = (0..=steps)
            .into_par_iter()
            .map(|m| {
                (0..d)
                    .map(|i| {
                        let mut acc = vec![Complex64::new(0.0, 0.0); ns];
                        if m == 0 {
                            return acc;
                        }
                        for l in 0..=m {
                            let r = m - l;
                            for j in 0..d {
                                let p = &current[l][j];
                                if l >= 1 {
                                    let w = &weights.upper[r][i * d + j];
                                    for ((a, wv), pv) in acc.iter_mut().zip(w).zip(p) {
                                        *a += wv * pv;
                                    }
                                }
                                if l < m {
                                    let w = &weights.lower[r][i * d + j];
                                    for ((a, wv), pv) in acc.iter_mut().zip(w).zip(p) {
                                        *a += wv * pv;
                                    }
                                }
                            }
                        }
                        acc
                    })
                    .collect()
            })
            .collect();
        let real: Vec<Vec<Vec<f64>>> = next
            .par_iter()
            .map(|row| row.iter().map(|c| fft.inverse_real(c.clone())).collect())
            .collect();
        let mut sup = 0.0f64;
        let mut masses = Vec::with_capacity(steps + 1);
        for (m, row) in real.iter().enumerate() {
            let mut mass = 0.0;
            for (i, vals) in row.iter().enumerate() {
                let base = (m * d + i) * ns;
                for (x, &v) in vals.iter().enumerate() {
                    totals[base + x] += v;
                    sup = sup.max(v);
                    mass += v;
                }
            }
            masses.push(vol * mass);
        }
        level_sup.push(sup);
        level_mass.push(masses);
        current = next;
    }

    Ok(GradientSecondMoment {
        d,
        n: lat.n(),
        h,
        steps,
        depth,
        values: totals,
        level_mass,
        level_sup,
        grad_sup_sq,
        h1_sq: u0.h1_norm_sq(),
    })
}

/// `ε^d Σ_z Σ_i ∫_0^t U_s^i(z) (½ P_{t−s}^ε ∇^{ε,i} f(z))² ds`, the variance of
/// `Y_t^ε(f)`, by the trapezoid rule on the moment grid.
pub fn field_variance_prediction(
    f: &Field,
    t: f64,
    moment: &GradientSecondMoment,
) -> Result<f64, MomentError> {
    let lat = moment.lattice();
    if f.lattice() != &lat {
        return Err(MomentError::Lattice(LatticeError::LatticeMismatch));
    }
    let mt = moment.node(t)?;
    if mt == 0 {
        return Ok(0.0);
    }
    let cache = SpectralCache::new(lat.n())?;
    let grads: Vec<Field> = (0..lat.d()).map(|i| f.grad_forward(i)).collect::<Result<_, _>>()?;
    let vol = lat.cell_volume();
    let integrand: Vec<f64> = (0..=mt)
        .into_par_iter()
        .map(|l| {
            let lag = (mt - l) as f64 * moment.h;
            let mut acc = 0.0;
            for (i, g) in grads.iter().enumerate() {
                let pg = cache.apply_heat(g, lag).expect("lag ≥ 0");
                for (z, v) in pg.values().iter().enumerate() {
                    acc += moment.value(l, i, z) * 0.25 * v * v;
                }
            }
            vol * acc
        })
        .collect();
    let mut total = 0.0;
    for (l, v) in integrand.iter().enumerate() {
        let w = if l == 0 || l == mt { 0.5 } else { 1.0 };
        total += w * v;
    }
    Ok(moment.h * total)
}

/// Terms of the mean recursion `(F_k, G_k) = M_ε^{k−1}(𝔟, 𝔠)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RSeries {
    pub d: usize,
    /// `None` for the `ε → 0` constants.
    pub n: Option<usize>,
    pub b: f64,
    pub c: f64,
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub partial_f: f64,
    pub partial_g: f64,
    pub closed_f: f64,
    pub closed_g: f64,
}

impl RSeries {
    /// Bound on `|partial − closed|` after `K` terms.
    pub fn truncation_bound(&self) -> f64 {
        2.0 * 0.5f64.powi(self.f.len() as i32)
    }

    /// Covariance obtained by adding the `k = 0` identity term to the series.
    pub fn covariance(&self) -> LimitCovariance {
        LimitCovariance {
            d: self.d,
            diagonal: 1.0 + self.closed_f,
            off_diagonal: self.closed_g,
        }
    }
}

/// `R`-series for given `(𝔟, 𝔠)` with `K` terms.
pub fn r_series_from_constants(d: usize, b: f64, c: f64, depth: usize) -> RSeries {
    let (b, c) = if d == 1 { (0.5, 0.0) } else { (b, c) };
    let mut f = Vec::with_capacity(depth);
    let mut g = Vec::with_capacity(depth);
    let (mut fk, mut gk) = (b, c);
    for _ in 0..depth {
        f.push(fk);
        g.push(gk);
        let nf = b * fk + (0.5 - b) * gk;
        let ng = c * fk + (0.5 - c) * gk;
        fk = nf;
        gk = ng;
    }
    let det = 1.0 - b + c;
    RSeries {
        d,
        n: None,
        b,
        c,
        partial_f: f.iter().sum(),
        partial_g: g.iter().sum(),
        f,
        g,
        closed_f: (b + c) / det,
        closed_g: 2.0 * c / det,
    }
}

/// `R`-series with the lattice constants `𝔟_ε, 𝔠_ε` at mesh `1/n`.
pub fn r_series(d: usize, n: usize, depth: usize) -> Result<RSeries, MomentError> {
    let LatticeConstants { b_eps, c_eps, .. } = constants_lattice(d, n)?;
    let mut s = r_series_from_constants(d, b_eps, c_eps, depth);
    s.n = Some(n);
    Ok(s)
}

/// The matrix `κ^{ij}` weighting `(∂_j u)² g^i` in the limit functional.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LimitCovariance {
    pub d: usize,
    pub diagonal: f64,
    pub off_diagonal: f64,
}

impl LimitCovariance {
    /// `κ^{ii} = 1 + 𝔞`, `κ^{ij} = (1 − 𝔞)/(d − 1)`.
    pub fn from_a(d: usize, a: f64) -> Self {
        let off = if d > 1 { (1.0 - a) / (d - 1) as f64 } else { 0.0 };
        Self {
            d,
            diagonal: 1.0 + a,
            off_diagonal: off,
        }
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        if i == j {
            self.diagonal
        } else {
            self.off_diagonal
        }
    }

    pub fn row_sum(&self, i: usize) -> f64 {
        (0..self.d).map(|j| self.entry(i, j)).sum()
    }
}

type Coeffs = BTreeMap<Vec<i64>, Complex64>;

/// Complex coefficients `α_m` with `f = Σ α_m e^{2πi m·x}`.
fn complex_coefficients(spec: &FourierSpec) -> Coeffs {
    let mut out: Coeffs = BTreeMap::new();
    let half = Complex64::new(0.5, 0.0);
    let half_over_i = Complex64::new(0.0, -0.5);
    for t in spec.terms() {
        let neg: Vec<i64> = t.mode.iter().map(|v| -v).collect();
        *out.entry(t.mode.clone()).or_default() += half * t.cos + half_over_i * t.sin;
        *out.entry(neg).or_default() += half * t.cos - half_over_i * t.sin;
    }
    out.retain(|_, v| v.norm() != 0.0);
    out
}

fn norm_sq(m: &[i64]) -> f64 {
    m.iter().map(|v| (v * v) as f64).sum()
}

/// `Γ_t(g) = Σ_{i,j} κ^{ij} ∫_0^t ∫_{T^d} (∂_j u_s)² g_s^i dx ds` for `u` the
/// solution of `∂_t u = ½Δu` from `u_0`, in closed form.
pub fn gamma_limit(
    u0: &FourierSpec,
    g: &WeightSpec,
    t: f64,
    cov: &LimitCovariance,
) -> Result<f64, MomentError> {
    let d = cov.d;
    u0.check_dim(d)?;
    g.check(d)?;
    if t <= 0.0 {
        return Ok(0.0);
    }
    let alpha = complex_coefficients(u0);
    let gammas: Vec<Coeffs> = g.directions.iter().map(complex_coefficients).collect();
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut total = Complex64::new(0.0, 0.0);
    for (m, am) in &alpha {
        for (mp, amp) in &alpha {
            let k: Vec<i64> = m.iter().zip(mp).map(|(a, b)| -(a + b)).collect();
            let lambda = 0.5 * two_pi * two_pi * (norm_sq(m) + norm_sq(mp));
            let time = g.time.integrate_exp(lambda, 0.0, t);
            for (i, gi) in gammas.iter().enumerate() {
                let Some(gk) = gi.get(&k) else { continue };
                for j in 0..d {
                    // (2πi m_j)(2πi m'_j) = −4π² m_j m'_j
                    let deriv = -two_pi * two_pi * (m[j] * mp[j]) as f64;
                    total += cov.entry(i, j) * deriv * am * amp * gk * time;
                }
            }
        }
    }
    Ok(total.re)
}

/// `max_{x,i} |P_t^ε ∇^{ε,i} u_0(x) − ∂_i u_t(x + εe_i/2)|` for Fourier-specified `u_0`,
/// measuring the convergence of the discrete heat flow of gradients.
pub fn heat_gradient_discrepancy(
    u0: &FourierSpec,
    lattice: TorusLattice,
    t: f64,
) -> Result<f64, MomentError> {
    u0.check_dim(lattice.d())?;
    let cache = SpectralCache::new(lattice.n())?;
    let field = u0.to_field(lattice)?;
    let eps = lattice.eps();
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut worst = 0.0f64;
    for i in 0..lattice.d() {
        let discrete = cache.apply_heat(&field.grad_forward(i)?, t)?;
        for s in 0..lattice.num_sites() {
            let mut x = lattice.position(s);
            x[i] += 0.5 * eps;
            let mut exact = 0.0;
            for term in u0.terms() {
                let decay = (-0.5 * two_pi * two_pi * norm_sq(&term.mode) * t).exp();
                let dm = two_pi * term.mode[i] as f64;
                let cos = FourierMode { m: term.mode.clone(), phase: Phase::Cos }.eval(&x);
                let sin = FourierMode { m: term.mode.clone(), phase: Phase::Sin }.eval(&x);
                exact += decay * dm * (term.sin * cos - term.cos * sin);
            }
            worst = worst.max((discrete.get(s) - exact).abs());
        }
    }
    Ok(worst)
}
