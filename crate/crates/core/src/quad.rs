//! Small numerical helpers: adaptive Simpson quadrature, exponential
//! integrals and compensated summation.

const MAX_DEPTH: u32 = 60;

/// Adaptive Simpson on `[a, b]` to absolute tolerance `tol`.
pub fn adaptive_simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson_rec(&f, a, b, fa, fm, fb, whole, tol, MAX_DEPTH)
}

#[allow(clippy::too_many_arguments)]
fn simpson_rec(
    f: &impl Fn(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    simpson_rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
        + simpson_rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
}

/// `∫_a^b e^{-λ s} ds`, stable for `λ → 0`.
pub fn exp_integral(lambda: f64, a: f64, b: f64) -> f64 {
    if lambda == 0.0 {
        return b - a;
    }
    let x = -lambda * (b - a);
    // e^{-λa} (1 − e^{-λ(b−a)}) / λ
    (-lambda * a).exp() * (-x.exp_m1()) / lambda
}

/// Kahan-Babuška compensated accumulator.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn new(init: f64) -> Self {
        Self { sum: init, comp: 0.0 }
    }

    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Least-squares slope of `y` against `x`.
pub fn fit_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simpson_integrates_exponential() {
        let v = adaptive_simpson(|t| (-40.0 * t).exp(), 0.0, 1.0, 1e-12);
        assert!((v - (1.0 - (-40.0f64).exp()) / 40.0).abs() < 1e-11);
    }

    #[test]
    fn exp_integral_limits() {
        assert_eq!(exp_integral(0.0, 0.2, 0.5), 0.3);
        let v = exp_integral(2.0, 0.0, 1.0);
        assert!((v - (1.0 - (-2.0f64).exp()) / 2.0).abs() < 1e-15);
        let tiny = exp_integral(1e-14, 0.0, 1.0);
        assert!((tiny - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kahan_beats_naive() {
        let mut k = KahanSum::new(1.0);
        for _ in 0..1_000_000 {
            k.add(1e-16);
        }
        assert!((k.value() - (1.0 + 1e-10)).abs() < 1e-15);
    }

    #[test]
    fn slope_of_line() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y: Vec<f64> = x.iter().map(|v| 2.5 * v - 1.0).collect();
        assert!((fit_slope(&x, &y) - 2.5).abs() < 1e-14);
    }
}
