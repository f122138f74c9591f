//! Bounded-variable least squares: min ‖Ax − b‖² subject to l ≤ x ≤ u.
//!
//! Active-set strategy in the style of Stark & Parker's BVLS: solve the
//! unconstrained problem on the free set, walk toward that solution until a
//! bound is hit, and release bound variables whose KKT multiplier has the
//! wrong sign. Finite termination for non-degenerate problems; an iteration
//! cap guards the rest. Warm starts make the per-timestep solves in waveform
//! synthesis cheap.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone)]
pub struct BvlsSolution {
    pub x: DVector<f64>,
    /// max KKT violation: |gradient| on free variables, wrong-sign gradient
    /// magnitude on bound variables.
    pub kkt_residual: f64,
    pub iterations: usize,
    /// ‖Ax − b‖²
    pub objective: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BvlsError {
    /// Some lower bound exceeds its upper bound.
    InfeasibleBounds { index: usize },
    IterationLimit,
}

#[derive(Clone, Copy, PartialEq)]
enum VarState {
    Free,
    AtLower,
    AtUpper,
}

/// Unbounded variables use `f64::INFINITY` / `f64::NEG_INFINITY`.
pub fn solve_bvls(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    lower: &[f64],
    upper: &[f64],
    warm: Option<&DVector<f64>>,
    tol: f64,
    max_iter: usize,
) -> Result<BvlsSolution, BvlsError> {
    let n = a.ncols();
    assert_eq!(lower.len(), n);
    assert_eq!(upper.len(), n);
    for i in 0..n {
        if lower[i] > upper[i] {
            return Err(BvlsError::InfeasibleBounds { index: i });
        }
    }

    let mut x = DVector::zeros(n);
    for i in 0..n {
        let w = warm.map(|w| w[i]).unwrap_or(0.0);
        x[i] = w.clamp(lower[i], upper[i]);
    }
    let mut state: Vec<VarState> = (0..n)
        .map(|i| {
            if lower[i] == upper[i] || x[i] <= lower[i] {
                VarState::AtLower
            } else if x[i] >= upper[i] {
                VarState::AtUpper
            } else {
                VarState::Free
            }
        })
        .collect();
    // fixed variables (l == u) can never be freed
    let fixed: Vec<bool> = (0..n).map(|i| lower[i] == upper[i]).collect();

    let grad_scale = {
        let g0 = a.transpose() * b;
        g0.amax().max(1.0)
    };
    let kkt_tol = tol * grad_scale;
    let mut last_bound: Option<usize> = None;

    for it in 0..max_iter {
        // Residual and gradient at current x: g = Aᵀ(Ax − b)
        let r = a * &x - b;
        let g = a.transpose() * &r;

        // KKT check; find the worst bound variable to release.
        let mut worst: Option<(usize, f64)> = None;
        let mut kkt = 0.0_f64;
        for i in 0..n {
            match state[i] {
                VarState::Free => kkt = kkt.max(g[i].abs()),
                VarState::AtLower => {
                    // at lower bound, decreasing objective needs g < 0
                    if !fixed[i] && g[i] < -kkt_tol {
                        kkt = kkt.max(-g[i]);
                        if worst.map(|(_, v)| -g[i] > v).unwrap_or(true) {
                            worst = Some((i, -g[i]));
                        }
                    }
                }
                VarState::AtUpper => {
                    if !fixed[i] && g[i] > kkt_tol {
                        kkt = kkt.max(g[i]);
                        if worst.map(|(_, v)| g[i] > v).unwrap_or(true) {
                            worst = Some((i, g[i]));
                        }
                    }
                }
            }
        }

        let free: Vec<usize> =
            (0..n).filter(|&i| state[i] == VarState::Free).collect();
        let free_grad_ok = free.iter().all(|&i| g[i].abs() <= kkt_tol);

        if free_grad_ok {
            match worst {
                None => {
                    return Ok(BvlsSolution {
                        x,
                        kkt_residual: kkt,
                        iterations: it,
                        objective: r.norm_squared(),
                    });
                }
                Some((i, _)) => {
                    if last_bound == Some(i) {
                        // released the variable we just bound; accept to
                        // avoid cycling
                        return Ok(BvlsSolution {
                            x,
                            kkt_residual: kkt,
                            iterations: it,
                            objective: r.norm_squared(),
                        });
                    }
                    state[i] = VarState::Free;
                    last_bound = None;
                    continue;
                }
            }
        }

        // Solve the unconstrained LS on the free set.
        let af = a.select_columns(free.iter());
        let mut rhs = b.clone();
        for i in 0..n {
            if state[i] != VarState::Free && x[i] != 0.0 {
                rhs -= a.column(i) * x[i];
            }
        }
        let y = ls_solve(&af, &rhs);

        // Walk from x_F toward y until the first bound crossing.
        let mut alpha = 1.0_f64;
        let mut hit: Option<(usize, VarState)> = None;
        for (k, &i) in free.iter().enumerate() {
            let xi = x[i];
            let yi = y[k];
            if yi < lower[i] {
                let a_k = (xi - lower[i]) / (xi - yi);
                if a_k < alpha {
                    alpha = a_k;
                    hit = Some((i, VarState::AtLower));
                }
            } else if yi > upper[i] {
                let a_k = (upper[i] - xi) / (yi - xi);
                if a_k < alpha {
                    alpha = a_k;
                    hit = Some((i, VarState::AtUpper));
                }
            }
        }

        if let Some((i_hit, s_hit)) = hit {
            let alpha = alpha.max(0.0);
            for (k, &i) in free.iter().enumerate() {
                x[i] += alpha * (y[k] - x[i]);
                x[i] = x[i].clamp(lower[i], upper[i]);
            }
            x[i_hit] = if s_hit == VarState::AtLower { lower[i_hit] } else { upper[i_hit] };
            state[i_hit] = s_hit;
            last_bound = Some(i_hit);
        } else {
            for (k, &i) in free.iter().enumerate() {
                x[i] = y[k].clamp(lower[i], upper[i]);
            }
        }
    }
    Err(BvlsError::IterationLimit)
}

/// Unconstrained least squares via normal equations with a Cholesky solve;
/// falls back to a tiny ridge when the normal matrix is numerically singular
/// (columns that barely touch the window).
fn ls_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = a.ncols();
    if n == 0 {
        return DVector::zeros(0);
    }
    let ata = a.transpose() * a;
    let atb = a.transpose() * b;
    if let Some(ch) = ata.clone().cholesky() {
        return ch.solve(&atb);
    }
    let ridge = 1e-12 * ata.trace().max(1e-300) / n as f64;
    let mut reg = ata;
    for i in 0..n {
        reg[(i, i)] += ridge;
    }
    reg.cholesky()
        .map(|ch| ch.solve(&atb))
        .unwrap_or_else(|| DVector::zeros(n))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kkt_of(a: &DMatrix<f64>, b: &DVector<f64>, x: &DVector<f64>, l: &[f64], u: &[f64]) -> f64 {
        let g = a.transpose() * (a * x - b);
        let mut kkt = 0.0_f64;
        for i in 0..x.len() {
            if (x[i] - l[i]).abs() < 1e-12 {
                kkt = kkt.max((-g[i]).max(0.0));
            } else if (x[i] - u[i]).abs() < 1e-12 {
                kkt = kkt.max(g[i].max(0.0));
            } else {
                kkt = kkt.max(g[i].abs());
            }
        }
        kkt
    }

    #[test]
    fn unconstrained_matches_normal_equations() {
        let a = DMatrix::from_row_slice(4, 2, &[1.0, 1.0, 1.0, 2.0, 1.0, 3.0, 1.0, 4.0]);
        let b = DVector::from_row_slice(&[6.0, 5.0, 7.0, 10.0]);
        let l = [f64::NEG_INFINITY; 2];
        let u = [f64::INFINITY; 2];
        let s = solve_bvls(&a, &b, &l, &u, None, 1e-12, 100).unwrap();
        // closed form: intercept 3.5, slope 1.4
        assert!((s.x[0] - 3.5).abs() < 1e-10);
        assert!((s.x[1] - 1.4).abs() < 1e-10);
    }

    #[test]
    fn active_bound_is_respected() {
        let a = DMatrix::from_row_slice(2, 1, &[1.0, 1.0]);
        let b = DVector::from_row_slice(&[5.0, 5.0]);
        let s = solve_bvls(&a, &b, &[-1.0], &[2.0], None, 1e-12, 100).unwrap();
        assert_eq!(s.x[0], 2.0);
        assert!(s.kkt_residual <= 1e-8 * 10.0);
    }

    #[test]
    fn random_problems_satisfy_kkt() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(42);
        for _ in 0..50 {
            let m = 12;
            let n = 5;
            let a = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
            let b = DVector::from_fn(m, |_, _| rng.random_range(-2.0..2.0));
            let l: Vec<f64> = (0..n).map(|_| rng.random_range(-0.5..0.0)).collect();
            let u: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..0.5)).collect();
            let s = solve_bvls(&a, &b, &l, &u, None, 1e-10, 500).unwrap();
            for i in 0..n {
                assert!(s.x[i] >= l[i] - 1e-12 && s.x[i] <= u[i] + 1e-12);
            }
            let kkt = kkt_of(&a, &b, &s.x, &l, &u);
            assert!(kkt < 1e-8 * 10.0, "kkt = {kkt}");
        }
    }

    #[test]
    fn warm_start_reuses_solution() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let b = DVector::from_row_slice(&[1.0, 2.0, 3.0]);
        let l = [-10.0, -10.0];
        let u = [10.0, 10.0];
        let s1 = solve_bvls(&a, &b, &l, &u, None, 1e-12, 100).unwrap();
        let s2 = solve_bvls(&a, &b, &l, &u, Some(&s1.x), 1e-12, 100).unwrap();
        assert!((s1.x - &s2.x).amax() < 1e-12);
        assert!(s2.iterations <= s1.iterations);
    }

    #[test]
    fn infeasible_bounds_error() {
        let a = DMatrix::identity(1, 1);
        let b = DVector::zeros(1);
        let e = solve_bvls(&a, &b, &[1.0], &[0.0], None, 1e-10, 10);
        assert!(matches!(e, Err(BvlsError::InfeasibleBounds { index: 0 })));
    }
}
