//! Adaptive Simpson quadrature.

/// Integrate `f` over `[a, b]` to the requested relative tolerance.
///
/// Classic recursive Simpson with Richardson correction; the tolerance is
/// interpreted relative to the running whole-interval estimate, with a small
/// absolute floor so integrals that are genuinely zero terminate.
pub fn adaptive_simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, rel_tol: f64) -> f64 {
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    let scale = whole.abs().max(1e-300);
    recurse(f, a, b, fa, fm, fb, whole, rel_tol * scale, 50)
}

#[allow(clippy::too_many_arguments)]
fn recurse<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: usize,
) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let err = left + right - whole;
    if depth == 0 || err.abs() <= 15.0 * tol {
        return left + right + err / 15.0;
    }
    recurse(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
        + recurse(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn integrates_gaussian() {
        // erf normalisation: ∫ exp(-x²) over a wide interval = √π
        let v = adaptive_simpson(&|x: f64| (-x * x).exp(), -12.0, 12.0, 1e-12);
        assert!((v - PI.sqrt()).abs() < 1e-11);
    }

    #[test]
    fn zero_integrand() {
        let v = adaptive_simpson(&|_| 0.0, 0.0, 1.0, 1e-10);
        assert_eq!(v, 0.0);
    }

    #[test]
    fn odd_function_cancels() {
        let v = adaptive_simpson(&|x: f64| x.powi(3), -2.0, 2.0, 1e-12);
        assert!(v.abs() < 1e-12);
    }
}
