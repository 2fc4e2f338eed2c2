//! Discrete heat kernels, the `q` kernels of gradient noise, the `R/S/T`
//! functions and the noise constants `𝔟`, `𝔠`, `𝔞`.
//!
//! Every kernel is evaluated through the exact cosine eigen-expansion of the
//! one-dimensional walk with jump rate `½ε^{-2}` to each neighbour:
//!
//! ```text
//! π_t(εk) = ε Σ_j exp(−ψ(εj) ε^{-2} t) cos(2πjk/n),   ψ(z) = 1 − cos(2πz)
//! ```
//!
//! and the `d`-dimensional kernel is the product of 1D kernels.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lattice::{Field, LatticeError, TorusLattice};

/// Largest mesh count accepted by the lattice sums when `d >= 4`.
pub const HIGH_DIM_MAX_N: usize = 32;
/// Largest quadrature resolution accepted when `d >= 4`.
pub const HIGH_DIM_MAX_QUAD: usize = 64;

#[derive(Debug, Error, PartialEq)]
pub enum SpectralError {
    #[error("time must be nonnegative, got {0}")]
    NegativeTime(f64),
    #[error("mesh count must be at least 2, got {0}")]
    BadMeshCount(usize),
    #[error("dimension must be at least 1")]
    BadDimension,
    #[error("direction index out of range")]
    BadDirection,
    #[error("displacement has length {got}, expected {expected}")]
    DisplacementDimension { expected: usize, got: usize },
    #[error("d = {d} with {what} = {value} exceeds the supported scale (max {max})")]
    ScaleLimit {
        d: usize,
        what: &'static str,
        value: usize,
        max: usize,
    },
    #[error(transparent)]
    Lattice(#[from] LatticeError),
}

fn check_time(t: f64) -> Result<(), SpectralError> {
    if t >= 0.0 {
        Ok(())
    } else {
        Err(SpectralError::NegativeTime(t))
    }
}

/// `ψ(z) = 1 − cos(2πz)`.
#[inline]
pub fn psi(z: f64) -> f64 {
    1.0 - (2.0 * PI * z).cos()
}

/// Eigenvalue table and cosine table for one mesh count.
#[derive(Debug, Clone)]
pub struct SpectralCache {
    n: usize,
    psi: Vec<f64>,
    cos: Vec<f64>,
}

impl SpectralCache {
    pub fn new(n: usize) -> Result<Self, SpectralError> {
        if n < 2 {
            return Err(SpectralError::BadMeshCount(n));
        }
        let cos: Vec<f64> = (0..n).map(|r| (2.0 * PI * r as f64 / n as f64).cos()).collect();
        // ψ(εj) = 1 − cos(2πj/n); symmetric under j ↦ n − j by construction.
        let psi = (0..n)
            .map(|j| {
                let r = j.min(n - j);
                1.0 - cos[r]
            })
            .collect();
        Ok(Self { n, psi, cos })
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn eps(&self) -> f64 {
        1.0 / self.n as f64
    }

    pub fn psi_table(&self) -> &[f64] {
        &self.psi
    }

    #[inline]
    fn cos_jk(&self, j: usize, k: usize) -> f64 {
        self.cos[(j * k) % self.n]
    }

    /// `e^{-ψ(εj) ε^{-2} t}` for every `j`.
    fn decay(&self, t: f64, factor: f64) -> Vec<f64> {
        let n2 = (self.n * self.n) as f64;
        self.psi.iter().map(|p| (-factor * p * n2 * t).exp()).collect()
    }

    /// `π_t^ε(εk)`.
    pub fn heat_kernel_1d(&self, t: f64, k: i64) -> Result<f64, SpectralError> {
        check_time(t)?;
        let k = k.rem_euclid(self.n as i64) as usize;
        let dec = self.decay(t, 1.0);
        let s: f64 = (0..self.n).map(|j| dec[j] * self.cos_jk(j, k)).sum();
        Ok(s * self.eps())
    }

    /// `π_t^ε(εk)` for `k = 0..n`.
    pub fn heat_kernel_1d_table(&self, t: f64) -> Result<Vec<f64>, SpectralError> {
        check_time(t)?;
        if t == 0.0 {
            let mut v = vec![0.0; self.n];
            v[0] = 1.0;
            return Ok(v);
        }
        let dec = self.decay(t, 1.0);
        let eps = self.eps();
        Ok((0..self.n)
            .map(|k| eps * (0..self.n).map(|j| dec[j] * self.cos_jk(j, k)).sum::<f64>())
            .collect())
    }

    /// `p_t^ε(0, disp)`, the product of 1D kernels.
    pub fn heat_kernel(&self, t: f64, disp: &[i64]) -> Result<f64, SpectralError> {
        let table = self.heat_kernel_1d_table(t)?;
        let n = self.n as i64;
        Ok(disp.iter().map(|&k| table[k.rem_euclid(n) as usize]).product())
    }

    pub fn kernel_value(&self, t: f64, disp: &[i64]) -> Result<KernelValue, SpectralError> {
        Ok(KernelValue {
            t,
            displacement: disp.to_vec(),
            value: self.heat_kernel(t, disp)?,
        })
    }

    /// `q_t^{ε,i,j}(0, disp)`.
    pub fn q_kernel(
        &self,
        d: usize,
        t: f64,
        disp: &[i64],
        i: usize,
        j: usize,
    ) -> Result<f64, SpectralError> {
        if disp.len() != d {
            return Err(SpectralError::DisplacementDimension {
                expected: d,
                got: disp.len(),
            });
        }
        if i >= d || j >= d {
            return Err(SpectralError::BadDirection);
        }
        let table = self.heat_kernel_1d_table(t)?;
        let n = self.n as i64;
        let p = |shift_i: i64, shift_j: i64| -> f64 {
            (0..d)
                .map(|l| {
                    let mut k = disp[l];
                    if l == i {
                        k += shift_i;
                    }
                    if l == j {
                        k += shift_j;
                    }
                    table[k.rem_euclid(n) as usize]
                })
                .product()
        };
        // b = ½(p0(y − e_i) + p0(y + e_j) − p0(y − e_i + e_j) − p0(y))
        let b = 0.5 * (p(-1, 0) + p(0, 1) - p(-1, 1) - p(0, 0));
        Ok((self.n as f64 * b).powi(2))
    }

    /// `q_t^{ε,i,j}(0, y)` for every site `y` of the lattice.
    pub fn q_table(
        &self,
        lattice: &TorusLattice,
        t: f64,
        i: usize,
        j: usize,
    ) -> Result<Vec<f64>, SpectralError> {
        let d = lattice.d();
        if i >= d || j >= d {
            return Err(SpectralError::BadDirection);
        }
        let table = self.heat_kernel_1d_table(t)?;
        Ok(q_table_from_1d(lattice, &table, i, j))
    }

    /// `(R_ε(t), S_ε(t), T_ε(t))` in closed spectral form.
    pub fn rst(&self, t: f64) -> Result<(f64, f64, f64), SpectralError> {
        check_time(t)?;
        let dec = self.decay(t, 2.0);
        let eps = self.eps();
        let mut r = 0.0;
        let mut s = 0.0;
        let mut tt = 0.0;
        for (p, e) in self.psi.iter().zip(&dec) {
            r += e;
            s += p * e;
            tt += p * p * e;
        }
        Ok((eps * r, s, tt / eps))
    }

    /// `Q_ε(t) = R^{d−1} T + (d−1) R^{d−2} S²`.
    pub fn q_total(&self, d: usize, t: f64) -> Result<f64, SpectralError> {
        let (r, s, tt) = self.rst(t)?;
        let d = d as i32;
        let off = if d >= 2 {
            (d - 1) as f64 * r.powi(d - 2) * s * s
        } else {
            0.0
        };
        Ok(r.powi(d - 1) * tt + off)
    }

    /// `Q_ε^{i,j}(t)` for `i == j` (`diagonal`) or `i != j`.
    pub fn q_pair(&self, d: usize, t: f64, diagonal: bool) -> Result<f64, SpectralError> {
        let (r, s, tt) = self.rst(t)?;
        let d = d as i32;
        if diagonal {
            Ok(r.powi(d - 1) * tt)
        } else if d >= 2 {
            Ok(r.powi(d - 2) * s * s)
        } else {
            Ok(0.0)
        }
    }

    /// `∫_T^∞ Q_ε(t) dt = (ε/2) R_ε(T)^{d−1} S_ε(T)`.
    pub fn q_tail(&self, d: usize, big_t: f64) -> Result<f64, SpectralError> {
        let (r, s, _) = self.rst(big_t)?;
        Ok(0.5 * self.eps() * r.powi(d as i32 - 1) * s)
    }

    /// `∫_0^∞ Q_ε(t) dt` by adaptive quadrature on `[0, 1]` plus the closed-form tail.
    pub fn q_integral_numeric(&self, d: usize, tol: f64) -> Result<f64, SpectralError> {
        let head = crate::quad::adaptive_simpson(
            |t| self.q_total(d, t).unwrap_or(0.0),
            0.0,
            1.0,
            tol,
        );
        Ok(head + self.q_tail(d, 1.0)?)
    }

    /// One-dimensional heat semigroup `P_t^ε` along all axes of a field.
    pub fn apply_heat(&self, field: &Field, t: f64) -> Result<Field, SpectralError> {
        let lat = *field.lattice();
        if lat.n() != self.n {
            return Err(SpectralError::Lattice(LatticeError::LatticeMismatch));
        }
        check_time(t)?;
        if t == 0.0 {
            return Ok(field.clone());
        }
        let kernel = self.heat_kernel_1d_table(t)?;
        Ok(convolve_separable(field, &kernel))
    }
}

/// Applies the 1D kernel `kernel[k] = π(εk)` along every axis.
pub(crate) fn convolve_separable(field: &Field, kernel: &[f64]) -> Field {
    let lat = *field.lattice();
    let n = lat.n();
    let mut cur = field.values().to_vec();
    let mut next = vec![0.0; cur.len()];
    let mut line = vec![0.0; n];
    for dir in 0..lat.d() {
        let stride = lat.stride(dir);
        for s in 0..lat.num_sites() {
            if lat.coord(s, dir) != 0 {
                continue;
            }
            for (k, l) in line.iter_mut().enumerate() {
                *l = cur[s + k * stride];
            }
            for a in 0..n {
                let mut acc = 0.0;
                for (b, &v) in line.iter().enumerate() {
                    acc += kernel[(a + n - b) % n] * v;
                }
                next[s + a * stride] = acc;
            }
        }
        std::mem::swap(&mut cur, &mut next);
    }
    Field::new(lat, cur).expect("convolution of a finite field is finite")
}

pub(crate) fn q_table_from_1d(lattice: &TorusLattice, table: &[f64], i: usize, j: usize) -> Vec<f64> {
    let d = lattice.d();
    let n = lattice.n();
    let eps_inv = n as f64;
    let mut out = Vec::with_capacity(lattice.num_sites());
    let mut coords = vec![0usize; d];
    for site in 0..lattice.num_sites() {
        for (l, c) in coords.iter_mut().enumerate() {
            *c = lattice.coord(site, l);
        }
        let p = |shift_i: usize, shift_j: usize| -> f64 {
            let mut prod = 1.0;
            for (l, &c) in coords.iter().enumerate() {
                let mut k = c;
                if l == i {
                    k += shift_i;
                }
                if l == j {
                    k += shift_j;
                }
                prod *= table[k % n];
            }
            prod
        };
        // shifts by −1 written as +(n−1)
        let b = 0.5 * (p(n - 1, 0) + p(0, 1) - p(n - 1, 1) - p(0, 0));
        out.push((eps_inv * b).powi(2));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelValue {
    pub t: f64,
    pub displacement: Vec<i64>,
    pub value: f64,
}

/// Finite-ε and limiting noise constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LimitConstants {
    pub d: usize,
    pub b_eps: f64,
    pub c_eps: f64,
    pub b: f64,
    pub c: f64,
    pub a: f64,
}

/// Finite-ε part of the constants. Also returns `𝔟_ε` from its own lattice sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatticeConstants {
    pub d: usize,
    pub n: usize,
    pub b_eps: f64,
    pub c_eps: f64,
    /// `(ε^d/2) Σ ψ(εj₁)² / Σ_i ψ(εj_i)`, computed independently of `c_eps`.
    pub b_eps_direct: f64,
}

/// `𝔞 = (𝔟 + 𝔠)/(1 − 𝔟 + 𝔠)`.
pub fn a_from_bc(b: f64, c: f64) -> f64 {
    (b + c) / (1.0 - b + c)
}

/// Iterates over all index vectors of `[0, n)^d` and accumulates
/// `(f1, f2)` where `f1 = Σ ψ₁ψ₂/Σψ` and `f2 = Σ ψ₁²/Σψ` (0/0 terms set to 0).
fn lattice_sums(d: usize, psi: &[f64]) -> (f64, f64) {
    let n = psi.len();
    // Σ over the trailing d−2 coordinates is factored as a multiset of partial sums.
    let tail = d.saturating_sub(2);
    let mut tail_sums: Vec<f64> = vec![0.0];
    for _ in 0..tail {
        let mut next = Vec::with_capacity(tail_sums.len() * n);
        for &s in &tail_sums {
            for &p in psi {
                next.push(s + p);
            }
        }
        tail_sums = next;
    }
    let mut off = 0.0;
    let mut diag = 0.0;
    if d == 1 {
        for &p in psi {
            if p > 0.0 {
                diag += p;
            }
        }
        return (0.0, diag);
    }
    for &p1 in psi {
        for &p2 in psi {
            let mut o = 0.0;
            let mut g = 0.0;
            for &ts in &tail_sums {
                let denom = p1 + p2 + ts;
                if denom > 0.0 {
                    o += p1 * p2 / denom;
                    g += p1 * p1 / denom;
                }
            }
            off += o;
            diag += g;
        }
    }
    (off, diag)
}

/// `𝔠_ε`, `𝔟_ε` by lattice summation.
pub fn constants_lattice(d: usize, n: usize) -> Result<LatticeConstants, SpectralError> {
    if d == 0 {
        return Err(SpectralError::BadDimension);
    }
    if n < 2 {
        return Err(SpectralError::BadMeshCount(n));
    }
    if d >= 4 && n > HIGH_DIM_MAX_N {
        return Err(SpectralError::ScaleLimit {
            d,
            what: "n",
            value: n,
            max: HIGH_DIM_MAX_N,
        });
    }
    if d == 1 {
        return Ok(LatticeConstants {
            d,
            n,
            b_eps: 0.5,
            c_eps: 0.0,
            b_eps_direct: 0.5,
        });
    }
    let cache = SpectralCache::new(n)?;
    let (off, diag) = lattice_sums(d, cache.psi_table());
    let vol = (n as f64).powi(-(d as i32));
    let c_eps = 0.5 * vol * off;
    Ok(LatticeConstants {
        d,
        n,
        b_eps: 0.5 - (d - 1) as f64 * c_eps,
        c_eps,
        b_eps_direct: 0.5 * vol * diag,
    })
}

/// `𝔠`, `𝔟`, `𝔞` in the continuum by midpoint quadrature on a `quad^d` grid.
pub fn constants_limit(d: usize, quad: usize) -> Result<(f64, f64, f64), SpectralError> {
    if d == 0 {
        return Err(SpectralError::BadDimension);
    }
    if d == 1 {
        return Ok((0.5, 0.0, 1.0));
    }
    if d >= 4 && quad > HIGH_DIM_MAX_QUAD {
        return Err(SpectralError::ScaleLimit {
            d,
            what: "quad_points",
            value: quad,
            max: HIGH_DIM_MAX_QUAD,
        });
    }
    let nodes: Vec<f64> = (0..quad).map(|k| psi((k as f64 + 0.5) / quad as f64)).collect();
    let (off, _) = lattice_sums(d, &nodes);
    let c = 0.5 * off / (quad as f64).powi(d as i32);
    let b = 0.5 - (d - 1) as f64 * c;
    Ok((b, c, a_from_bc(b, c)))
}

/// Full constant set at `(d, n)` with the continuum part at resolution `quad`.
pub fn constants(d: usize, n: usize, quad: usize) -> Result<LimitConstants, SpectralError> {
    let lat = constants_lattice(d, n)?;
    let (b, c, a) = constants_limit(d, quad)?;
    Ok(LimitConstants {
        d,
        b_eps: lat.b_eps,
        c_eps: lat.c_eps,
        b,
        c,
        a,
    })
}
