//! Geometry of the discrete torus `T_ε^d` and lattice fields.
//!
//! Sites are indexed row-major over integer coordinates mod `n` (the first
//! coordinate is the most significant). Directions are 0-based: direction
//! `i` corresponds to the unit vector `e_{i+1}`. All wraparound is done on
//! indices, never on physical coordinates.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest supported dimension.
pub const MAX_DIM: usize = 8;

#[derive(Debug, Error, PartialEq)]
pub enum LatticeError {
    #[error("dimension must be in 1..={MAX_DIM}, got {0}")]
    BadDimension(usize),
    #[error("mesh count must be at least 2, got {0}")]
    BadMeshCount(usize),
    #[error("direction index {dir} out of range for d = {d}")]
    DirectionOutOfRange { dir: usize, d: usize },
    #[error("field has {got} values, lattice has {expected} sites")]
    LengthMismatch { expected: usize, got: usize },
    #[error("field value at site {0} is not finite")]
    NonFinite(usize),
    #[error("invalid Lp exponent {0}; need p >= 1")]
    InvalidExponent(f64),
    #[error("mode vector has length {got}, lattice dimension is {expected}")]
    ModeDimension { expected: usize, got: usize },
    #[error("fields live on different lattices")]
    LatticeMismatch,
}

/// The discrete torus with `n^d` sites and mesh `ε = 1/n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TorusLattice {
    d: usize,
    n: usize,
}

impl TorusLattice {
    pub fn new(d: usize, n: usize) -> Result<Self, LatticeError> {
        if d == 0 || d > MAX_DIM {
            return Err(LatticeError::BadDimension(d));
        }
        if n < 2 {
            return Err(LatticeError::BadMeshCount(n));
        }
        Ok(Self { d, n })
    }

    #[inline]
    pub fn d(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn eps(&self) -> f64 {
        1.0 / self.n as f64
    }

    /// `ε^d`, the mass of one site under the uniform measure.
    #[inline]
    pub fn cell_volume(&self) -> f64 {
        self.eps().powi(self.d as i32)
    }

    #[inline]
    pub fn num_sites(&self) -> usize {
        self.n.pow(self.d as u32)
    }

    /// One clock per (site, direction) pair.
    #[inline]
    pub fn num_clocks(&self) -> usize {
        self.d * self.num_sites()
    }

    #[inline]
    pub fn stride(&self, dir: usize) -> usize {
        self.n.pow((self.d - 1 - dir) as u32)
    }

    pub fn check_dir(&self, dir: usize) -> Result<(), LatticeError> {
        if dir < self.d {
            Ok(())
        } else {
            Err(LatticeError::DirectionOutOfRange { dir, d: self.d })
        }
    }

    #[inline]
    pub fn coord(&self, site: usize, dir: usize) -> usize {
        (site / self.stride(dir)) % self.n
    }

    pub fn coords(&self, site: usize) -> Vec<usize> {
        (0..self.d).map(|k| self.coord(site, k)).collect()
    }

    /// Site index of an integer vector, reduced mod `n`.
    pub fn site_of(&self, coords: &[i64]) -> usize {
        debug_assert_eq!(coords.len(), self.d);
        let n = self.n as i64;
        coords
            .iter()
            .fold(0usize, |acc, &c| acc * self.n + c.rem_euclid(n) as usize)
    }

    /// `x + ε e_dir`.
    #[inline]
    pub fn forward(&self, site: usize, dir: usize) -> usize {
        let s = self.stride(dir);
        if self.coord(site, dir) == self.n - 1 {
            site - (self.n - 1) * s
        } else {
            site + s
        }
    }

    /// `x − ε e_dir`.
    #[inline]
    pub fn backward(&self, site: usize, dir: usize) -> usize {
        let s = self.stride(dir);
        if self.coord(site, dir) == 0 {
            site + (self.n - 1) * s
        } else {
            site - s
        }
    }

    #[inline]
    pub fn clock_index(&self, site: usize, dir: usize) -> usize {
        site * self.d + dir
    }

    #[inline]
    pub fn clock(&self, clock: usize) -> (usize, usize) {
        (clock / self.d, clock % self.d)
    }

    /// Physical position `ε·(integer vector)` in `[0,1)^d`.
    pub fn position(&self, site: usize) -> Vec<f64> {
        let eps = self.eps();
        self.coords(site).into_iter().map(|c| c as f64 * eps).collect()
    }

    /// Residue of `m · k` mod `n`, the exact phase index of a Fourier mode at a site.
    pub fn phase_index(&self, m: &[i64], site: usize) -> usize {
        let n = self.n as i64;
        let mut acc = 0i64;
        for (k, &mk) in m.iter().enumerate() {
            acc = (acc + mk.rem_euclid(n) * self.coord(site, k) as i64) % n;
        }
        acc as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NormKind {
    Lp(f64),
    H1,
    Linf,
}

/// Real values on the lattice sites.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    lattice: TorusLattice,
    values: Vec<f64>,
}

impl Field {
    pub fn new(lattice: TorusLattice, values: Vec<f64>) -> Result<Self, LatticeError> {
        if values.len() != lattice.num_sites() {
            return Err(LatticeError::LengthMismatch {
                expected: lattice.num_sites(),
                got: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(LatticeError::NonFinite(i));
        }
        Ok(Self { lattice, values })
    }

    pub fn zeros(lattice: TorusLattice) -> Self {
        Self::constant(lattice, 0.0)
    }

    pub fn constant(lattice: TorusLattice, c: f64) -> Self {
        Self {
            lattice,
            values: vec![c; lattice.num_sites()],
        }
    }

    pub fn indicator(lattice: TorusLattice, site: usize) -> Self {
        let mut f = Self::zeros(lattice);
        f.values[site] = 1.0;
        f
    }

    /// Samples `f` at the physical positions of all sites.
    pub fn from_fn(lattice: TorusLattice, f: impl Fn(&[f64]) -> f64) -> Self {
        let values = (0..lattice.num_sites())
            .map(|s| f(&lattice.position(s)))
            .collect();
        Self { lattice, values }
    }

    #[inline]
    pub fn lattice(&self) -> &TorusLattice {
        &self.lattice
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, site: usize) -> f64 {
        self.values[site]
    }

    #[inline]
    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    fn map_sites(&self, f: impl Fn(usize) -> f64) -> Field {
        Field {
            lattice: self.lattice,
            values: (0..self.values.len()).map(f).collect(),
        }
    }

    pub fn scale(&self, a: f64) -> Field {
        self.map_sites(|s| a * self.values[s])
    }

    /// `a·self + b·other`.
    pub fn combine(&self, a: f64, other: &Field, b: f64) -> Result<Field, LatticeError> {
        if self.lattice != other.lattice {
            return Err(LatticeError::LatticeMismatch);
        }
        Ok(self.map_sites(|s| a * self.values[s] + b * other.values[s]))
    }

    /// `ε^{-1}(f(x+εe_i) − f(x))`.
    pub fn grad_forward(&self, dir: usize) -> Result<Field, LatticeError> {
        self.lattice.check_dir(dir)?;
        let n = self.lattice.n as f64;
        Ok(self.map_sites(|s| n * (self.values[self.lattice.forward(s, dir)] - self.values[s])))
    }

    /// `ε^{-1}(f(x) − f(x−εe_i))`.
    pub fn grad_backward(&self, dir: usize) -> Result<Field, LatticeError> {
        self.lattice.check_dir(dir)?;
        let n = self.lattice.n as f64;
        Ok(self.map_sites(|s| n * (self.values[s] - self.values[self.lattice.backward(s, dir)])))
    }

    /// Forward gradient at a single site.
    #[inline]
    pub fn grad_at(&self, site: usize, dir: usize) -> f64 {
        self.lattice.n as f64 * (self.values[self.lattice.forward(site, dir)] - self.values[site])
    }

    pub fn laplacian(&self) -> Field {
        let lat = self.lattice;
        let n2 = (lat.n * lat.n) as f64;
        self.map_sites(|s| {
            let mut acc = 0.0;
            for i in 0..lat.d {
                acc += self.values[lat.forward(s, i)] + self.values[lat.backward(s, i)]
                    - 2.0 * self.values[s];
            }
            n2 * acc
        })
    }

    pub fn norm(&self, kind: NormKind) -> Result<f64, LatticeError> {
        match kind {
            NormKind::Lp(p) => {
                if !(p >= 1.0 && p.is_finite()) {
                    return Err(LatticeError::InvalidExponent(p));
                }
                let sum: f64 = self.values.iter().map(|v| v.abs().powf(p)).sum();
                Ok((self.lattice.cell_volume() * sum).powf(1.0 / p))
            }
            NormKind::H1 => Ok(self.h1_norm_sq().sqrt()),
            NormKind::Linf => Ok(self.linf()),
        }
    }

    /// `‖f‖²_{L²}` under the uniform measure.
    pub fn l2_norm_sq(&self) -> f64 {
        self.lattice.cell_volume() * self.values.iter().map(|v| v * v).sum::<f64>()
    }

    /// `‖f‖²_{H¹} = ε^d Σ_x Σ_i (∇^i f(x))²`.
    pub fn h1_norm_sq(&self) -> f64 {
        let lat = self.lattice;
        let mut sum = 0.0;
        for s in 0..lat.num_sites() {
            for i in 0..lat.d {
                let g = self.grad_at(s, i);
                sum += g * g;
            }
        }
        lat.cell_volume() * sum
    }

    pub fn linf(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// `‖f‖_{Lip} = max_i ‖∇^i f‖_∞` on the lattice.
    pub fn lip_norm(&self) -> f64 {
        let lat = self.lattice;
        let mut m = 0.0f64;
        for s in 0..lat.num_sites() {
            for i in 0..lat.d {
                m = m.max(self.grad_at(s, i).abs());
            }
        }
        m
    }

    /// `⟨f⟩_ε = ε^d Σ_x f(x)`.
    pub fn spatial_average(&self) -> f64 {
        self.lattice.cell_volume() * self.values.iter().sum::<f64>()
    }

    /// `ε^d Σ_x f(x) g(x)`.
    pub fn inner(&self, other: &Field) -> Result<f64, LatticeError> {
        if self.lattice != other.lattice {
            return Err(LatticeError::LatticeMismatch);
        }
        let s: f64 = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum();
        Ok(self.lattice.cell_volume() * s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Cos,
    Sin,
}

/// A real Fourier mode `cos(2π m·x)` or `sin(2π m·x)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FourierMode {
    pub m: Vec<i64>,
    pub phase: Phase,
}

impl FourierMode {
    pub fn cos(m: Vec<i64>) -> Self {
        Self { m, phase: Phase::Cos }
    }

    pub fn sin(m: Vec<i64>) -> Self {
        Self { m, phase: Phase::Sin }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let arg = 2.0 * PI * self.m.iter().zip(x).map(|(&m, &x)| m as f64 * x).sum::<f64>();
        match self.phase {
            Phase::Cos => arg.cos(),
            Phase::Sin => arg.sin(),
        }
    }

    /// Lattice restriction, with phases reduced exactly mod `n`.
    pub fn to_field(&self, lattice: TorusLattice) -> Result<Field, LatticeError> {
        if self.m.len() != lattice.d() {
            return Err(LatticeError::ModeDimension {
                expected: lattice.d(),
                got: self.m.len(),
            });
        }
        if self.m.iter().all(|&m| m == 0) {
            let c = if self.phase == Phase::Cos { 1.0 } else { 0.0 };
            return Ok(Field::constant(lattice, c));
        }
        let n = lattice.n();
        let table: Vec<f64> = (0..n)
            .map(|r| {
                let a = 2.0 * PI * r as f64 / n as f64;
                match self.phase {
                    Phase::Cos => a.cos(),
                    Phase::Sin => a.sin(),
                }
            })
            .collect();
        let values = (0..lattice.num_sites())
            .map(|s| table[lattice.phase_index(&self.m, s)])
            .collect();
        Field::new(lattice, values)
    }

    /// Eigenvalue of `½Δ_ε` on this mode: `−ε^{-2} Σ_i ψ(ε m_i)`.
    pub fn half_laplacian_eigenvalue(&self, lattice: &TorusLattice) -> f64 {
        let n = lattice.n() as f64;
        let psi: f64 = self
            .m
            .iter()
            .map(|&m| 1.0 - (2.0 * PI * m as f64 / n).cos())
            .sum();
        -n * n * psi
    }

    /// Continuum eigenvalue of `½Δ`: `−2π²|m|²`.
    pub fn continuum_half_laplacian_eigenvalue(&self) -> f64 {
        -2.0 * PI * PI * self.m.iter().map(|&m| (m * m) as f64).sum::<f64>()
    }
}

/// One term `cos·cos(2π m·x) + sin·sin(2π m·x)` of a finite Fourier series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FourierTerm {
    pub mode: Vec<i64>,
    #[serde(default)]
    pub cos: f64,
    #[serde(default)]
    pub sin: f64,
}

impl FourierTerm {
    pub fn new(mode: Vec<i64>, cos: f64, sin: f64) -> Self {
        Self { mode, cos, sin }
    }
}

/// A real function given by finitely many Fourier terms.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FourierSpec(pub Vec<FourierTerm>);

impl FourierSpec {
    pub fn single_cos(mode: Vec<i64>) -> Self {
        Self(vec![FourierTerm::new(mode, 1.0, 0.0)])
    }

    pub fn constant(d: usize, c: f64) -> Self {
        Self(vec![FourierTerm::new(vec![0; d], c, 0.0)])
    }

    pub fn terms(&self) -> &[FourierTerm] {
        &self.0
    }

    pub fn check_dim(&self, d: usize) -> Result<(), LatticeError> {
        for t in &self.0 {
            if t.mode.len() != d {
                return Err(LatticeError::ModeDimension {
                    expected: d,
                    got: t.mode.len(),
                });
            }
        }
        Ok(())
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.0
            .iter()
            .map(|t| {
                t.cos * FourierMode::cos(t.mode.clone()).eval(x)
                    + t.sin * FourierMode::sin(t.mode.clone()).eval(x)
            })
            .sum()
    }

    pub fn to_field(&self, lattice: TorusLattice) -> Result<Field, LatticeError> {
        self.check_dim(lattice.d())?;
        let mut acc = vec![0.0; lattice.num_sites()];
        for t in &self.0 {
            for (phase, coef) in [(Phase::Cos, t.cos), (Phase::Sin, t.sin)] {
                if coef == 0.0 {
                    continue;
                }
                let f = FourierMode { m: t.mode.clone(), phase }.to_field(lattice)?;
                for (a, v) in acc.iter_mut().zip(f.values()) {
                    *a += coef * v;
                }
            }
        }
        Field::new(lattice, acc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lat(d: usize, n: usize) -> TorusLattice {
        TorusLattice::new(d, n).unwrap()
    }

    fn random_field(l: TorusLattice, vals: &[f64]) -> Field {
        Field::new(l, vals.iter().cycle().take(l.num_sites()).copied().collect()).unwrap()
    }

    #[test]
    fn geometry_counts() {
        let l = lat(3, 4);
        assert_eq!(l.num_sites(), 64);
        assert_eq!(l.num_clocks(), 192);
        assert!(TorusLattice::new(0, 4).is_err());
        assert!(TorusLattice::new(2, 1).is_err());
        for s in 0..l.num_sites() {
            let c: Vec<i64> = l.coords(s).iter().map(|&c| c as i64).collect();
            assert_eq!(l.site_of(&c), s);
            for i in 0..3 {
                assert_eq!(l.backward(l.forward(s, i), i), s);
            }
        }
    }

    #[test]
    fn gradient_of_constant_vanishes() {
        let f = Field::constant(lat(2, 5), 3.5);
        for i in 0..2 {
            assert!(f.grad_forward(i).unwrap().values().iter().all(|&v| v == 0.0));
        }
        assert!(f.laplacian().values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_of_indicator_d1() {
        let f = Field::indicator(lat(1, 4), 0);
        let g = f.grad_forward(0).unwrap();
        assert_eq!(g.values(), &[-4.0, 0.0, 0.0, 4.0]);
    }

    #[test]
    fn direction_out_of_range() {
        let f = Field::zeros(lat(2, 4));
        assert_eq!(
            f.grad_forward(2),
            Err(LatticeError::DirectionOutOfRange { dir: 2, d: 2 })
        );
        assert!(f.grad_backward(5).is_err());
    }

    #[test]
    fn laplacian_eigenvalue_on_mode() {
        let l = lat(2, 8);
        let mode = FourierMode::cos(vec![1, 3]);
        let f = mode.to_field(l).unwrap();
        let lap = f.laplacian();
        let lambda = 2.0 * mode.half_laplacian_eigenvalue(&l);
        for s in 0..l.num_sites() {
            assert!((lap.get(s) - lambda * f.get(s)).abs() < 1e-9);
        }
    }

    #[test]
    fn per_direction_second_difference_is_laplacian_component() {
        let l = lat(1, 16);
        let f = FourierMode::cos(vec![2]).to_field(l).unwrap();
        let composed = f.grad_forward(0).unwrap().grad_backward(0).unwrap();
        let lap = f.laplacian();
        for s in 0..l.num_sites() {
            assert!((composed.get(s) - lap.get(s)).abs() < 1e-9);
        }
    }

    #[test]
    fn norms_basic() {
        let l = lat(1, 4);
        let c = Field::constant(l, -2.0);
        assert!((c.norm(NormKind::Lp(2.0)).unwrap() - 2.0).abs() < 1e-15);
        assert_eq!(c.norm(NormKind::H1).unwrap(), 0.0);
        let ind = Field::indicator(l, 2);
        assert!((ind.norm(NormKind::Lp(1.0)).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(ind.norm(NormKind::Linf).unwrap(), 1.0);
        assert_eq!(
            ind.norm(NormKind::Lp(0.5)),
            Err(LatticeError::InvalidExponent(0.5))
        );
    }

    #[test]
    fn average_of_nonzero_mode_vanishes() {
        let l = lat(2, 6);
        for m in [vec![1, 0], vec![2, -1], vec![0, 5]] {
            for f in [FourierMode::cos(m.clone()), FourierMode::sin(m.clone())] {
                assert!(f.to_field(l).unwrap().spatial_average().abs() < 1e-14);
            }
        }
        assert_eq!(
            FourierMode::cos(vec![0, 0]).to_field(l).unwrap().spatial_average(),
            1.0
        );
    }

    #[test]
    fn n_equal_two_follows_formulas() {
        let l = lat(1, 2);
        assert_eq!(l.forward(0, 0), l.backward(0, 0));
        let f = Field::new(l, vec![1.0, 3.0]).unwrap();
        assert_eq!(f.laplacian().values(), &[16.0, -16.0]);
    }

    #[test]
    fn field_rejects_bad_input() {
        let l = lat(1, 3);
        assert!(Field::new(l, vec![0.0; 2]).is_err());
        assert_eq!(
            Field::new(l, vec![0.0, f64::NAN, 1.0]),
            Err(LatticeError::NonFinite(1))
        );
    }

    proptest! {
        #[test]
        fn shift_identity_and_commutation(
            vals in prop::collection::vec(-1.0f64..1.0, 1..40),
            d in 1usize..=3,
            n in 2usize..6,
        ) {
            let l = lat(d, n);
            let f = random_field(l, &vals);
            for i in 0..d {
                let fw = f.grad_forward(i).unwrap();
                let bw = f.grad_backward(i).unwrap();
                for s in 0..l.num_sites() {
                    prop_assert!((bw.get(s) - fw.get(l.backward(s, i))).abs() < 1e-12);
                }
                for j in 0..d {
                    let a = f.grad_forward(i).unwrap().grad_forward(j).unwrap();
                    let b = f.grad_forward(j).unwrap().grad_forward(i).unwrap();
                    let c = f.grad_forward(i).unwrap().grad_backward(j).unwrap();
                    let e = f.grad_backward(j).unwrap().grad_forward(i).unwrap();
                    for s in 0..l.num_sites() {
                        prop_assert!((a.get(s) - b.get(s)).abs() < 1e-9);
                        prop_assert!((c.get(s) - e.get(s)).abs() < 1e-9);
                    }
                }
            }
        }

        #[test]
        fn laplacian_is_sum_of_second_differences(
            vals in prop::collection::vec(-1.0f64..1.0, 1..40),
            d in 1usize..=3,
            n in 2usize..6,
        ) {
            let l = lat(d, n);
            let f = random_field(l, &vals);
            let lap = f.laplacian();
            let mut acc = Field::zeros(l);
            for i in 0..d {
                let term = f.grad_forward(i).unwrap().grad_backward(i).unwrap();
                acc = acc.combine(1.0, &term, 1.0).unwrap();
            }
            for s in 0..l.num_sites() {
                prop_assert!((acc.get(s) - lap.get(s)).abs() < 1e-9);
            }
            prop_assert!(lap.spatial_average().abs() < 1e-9);
        }
    }
}
