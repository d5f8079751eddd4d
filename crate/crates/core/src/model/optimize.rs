//! Box-constrained maximization for the restricted likelihood.
//!
//! The main driver is a projected quasi-Newton method with an Armijo
//! backtracking search. A few Newton steps on a finite-difference Hessian of
//! the analytic gradient tighten the optimum, and a Nelder-Mead search is the
//! fallback when the quasi-Newton phase stalls away from a stationary point.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimOptions {
    pub max_iter: usize,
    /// Projected gradient infinity norm at which iteration stops early.
    pub grad_tol: f64,
    /// Projected gradient infinity norm required to report convergence.
    pub accept_tol: f64,
    /// Largest move of any coordinate in a single step.
    pub max_step: f64,
}

impl Default for OptimOptions {
    fn default() -> Self {
        OptimOptions {
            max_iter: 400,
            grad_tol: 1e-7,
            accept_tol: 1e-5,
            max_step: 4.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient: Vec<f64>,
    pub iterations: usize,
    pub proj_grad_norm: f64,
    pub converged: bool,
}

struct Problem<'a, F> {
    f: F,
    lower: &'a [f64],
    upper: &'a [f64],
    evals: usize,
}

impl<F> Problem<'_, F>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    /// Objective to be maximized; failures map to `-inf`.
    fn eval(&mut self, x: &[f64]) -> (f64, Vec<f64>) {
        self.evals += 1;
        match (self.f)(x) {
            Ok((v, g)) if v.is_finite() && g.iter().all(|g| g.is_finite()) => (v, g),
            _ => (f64::NEG_INFINITY, vec![0.0; x.len()]),
        }
    }

    fn project(&self, x: &mut [f64]) {
        for (i, v) in x.iter_mut().enumerate() {
            *v = v.clamp(self.lower[i], self.upper[i]);
        }
    }

    fn at_lower(&self, x: &[f64], i: usize) -> bool {
        x[i] <= self.lower[i] + 1e-12 * (1.0 + self.lower[i].abs())
    }

    fn at_upper(&self, x: &[f64], i: usize) -> bool {
        x[i] >= self.upper[i] - 1e-12 * (1.0 + self.upper[i].abs())
    }

    /// Coordinates whose ascent direction is not blocked by a bound.
    fn free(&self, x: &[f64], g: &[f64]) -> Vec<bool> {
        (0..x.len())
            .map(|i| !((self.at_lower(x, i) && g[i] < 0.0) || (self.at_upper(x, i) && g[i] > 0.0)))
            .collect()
    }

    fn proj_grad_norm(&self, x: &[f64], g: &[f64]) -> f64 {
        let free = self.free(x, g);
        g.iter()
            .zip(&free)
            .filter(|(_, &f)| f)
            .fold(0.0, |m, (g, _)| m.max(g.abs()))
    }
}

/// Maximize `f` over the box `[lower, upper]` starting from `x0`.
/// `f` returns the objective and its gradient.
pub fn maximize<F>(
    f: F,
    x0: &[f64],
    lower: &[f64],
    upper: &[f64],
    opts: &OptimOptions,
) -> OptimOutcome
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let mut prob = Problem {
        f,
        lower,
        upper,
        evals: 0,
    };
    let mut x = x0.to_vec();
    prob.project(&mut x);
    let n = x.len();
    let (mut fx, mut g) = prob.eval(&x);
    if n == 0 {
        return OptimOutcome {
            x,
            value: fx,
            gradient: g,
            iterations: 0,
            proj_grad_norm: 0.0,
            converged: fx.is_finite(),
        };
    }
    if !fx.is_finite() {
        // Start outside the feasible region of the criterion: search without gradients.
        let (xn, _) = nelder_mead(&mut prob, &x, opts.max_iter * 4);
        x = xn;
        let e = prob.eval(&x);
        fx = e.0;
        g = e.1;
    }

    let mut iterations = bfgs(&mut prob, &mut x, &mut fx, &mut g, opts);
    newton_polish(&mut prob, &mut x, &mut fx, &mut g, opts);

    if prob.proj_grad_norm(&x, &g) > opts.accept_tol || !fx.is_finite() {
        let (xn, _) = nelder_mead(&mut prob, &x, opts.max_iter * 4);
        let (fn_, gn) = prob.eval(&xn);
        if fn_ >= fx || !fx.is_finite() {
            x = xn;
            fx = fn_;
            g = gn;
        }
        iterations += bfgs(&mut prob, &mut x, &mut fx, &mut g, opts);
        newton_polish(&mut prob, &mut x, &mut fx, &mut g, opts);
    }

    let pg = prob.proj_grad_norm(&x, &g);
    OptimOutcome {
        converged: fx.is_finite() && pg <= opts.accept_tol,
        x,
        value: fx,
        gradient: g,
        iterations,
        proj_grad_norm: pg,
    }
}

fn bfgs<F>(
    prob: &mut Problem<'_, F>,
    x: &mut Vec<f64>,
    fx: &mut f64,
    g: &mut Vec<f64>,
    opts: &OptimOptions,
) -> usize
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let n = x.len();
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut fresh = true;
    let mut iter = 0;
    while iter < opts.max_iter {
        if !fx.is_finite() || prob.proj_grad_norm(x, g) <= opts.grad_tol {
            break;
        }
        iter += 1;
        let free = prob.free(x, g);
        // Ascent direction d = H g on the free coordinates.
        let gv = DVector::from_iterator(n, (0..n).map(|i| if free[i] { g[i] } else { 0.0 }));
        let mut d = &h * &gv;
        for i in 0..n {
            if !free[i] {
                d[i] = 0.0;
            }
        }
        if d.dot(&gv) <= 0.0 {
            h = DMatrix::identity(n, n);
            fresh = true;
            d = gv.clone();
        }
        let big = d.amax();
        if big > opts.max_step {
            d *= opts.max_step / big;
        }
        match line_search(prob, x, *fx, g, &d) {
            Some((xn, fnew, gnew)) => {
                let s = DVector::from_iterator(n, (0..n).map(|i| xn[i] - x[i]));
                // Curvature pair for the minimization of -f.
                let yv = DVector::from_iterator(n, (0..n).map(|i| g[i] - gnew[i]));
                let sy = s.dot(&yv);
                if sy > 1e-12 * s.norm() * yv.norm() {
                    if fresh {
                        // Scale the initial inverse Hessian to the observed curvature.
                        h = DMatrix::identity(n, n) * (sy / yv.dot(&yv));
                        fresh = false;
                    }
                    let rho = 1.0 / sy;
                    let hy = &h * &yv;
                    let yhy = yv.dot(&hy);
                    h += (&s * s.transpose()) * (rho * rho * yhy + rho)
                        - (&hy * s.transpose() + &s * hy.transpose()) * rho;
                }
                let gain = fnew - *fx;
                *x = xn;
                *fx = fnew;
                *g = gnew;
                // Acceptable and no longer making measurable progress.
                if gain <= 1e-12 * (1.0 + fx.abs()) && prob.proj_grad_norm(x, g) <= opts.accept_tol
                {
                    break;
                }
                if gain.abs() <= 1e-15 * (1.0 + fx.abs()) && !fresh {
                    h = DMatrix::identity(n, n);
                    fresh = true;
                }
            }
            None => {
                if fresh {
                    break;
                }
                h = DMatrix::identity(n, n);
                fresh = true;
            }
        }
    }
    iter
}

type Step = (Vec<f64>, f64, Vec<f64>);

fn line_search<F>(
    prob: &mut Problem<'_, F>,
    x: &[f64],
    fx: f64,
    g: &[f64],
    d: &DVector<f64>,
) -> Option<Step>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let n = x.len();
    let noise = 1e-12 * (1.0 + fx.abs());
    let mut t = 1.0;
    for _ in 0..50 {
        let mut xn: Vec<f64> = (0..n).map(|i| x[i] + t * d[i]).collect();
        prob.project(&mut xn);
        let decrease: f64 = (0..n).map(|i| g[i] * (xn[i] - x[i])).sum();
        if decrease <= 0.0 && xn == x {
            return None;
        }
        let (fnew, gnew) = prob.eval(&xn);
        if fnew.is_finite() && fnew >= fx + 1e-4 * decrease.max(0.0) && fnew >= fx {
            return Some((xn, fnew, gnew));
        }
        // Close to the optimum the gain drops below the rounding noise of the
        // criterion; accept steps that reduce the gradient without a visible loss.
        if fnew.is_finite()
            && fnew >= fx - noise
            && prob.proj_grad_norm(&xn, &gnew) < 0.5 * prob.proj_grad_norm(x, g)
        {
            return Some((xn, fnew, gnew));
        }
        t *= 0.5;
    }
    None
}

/// Newton iterations on the free coordinates with a forward-difference
/// Hessian of the gradient.
fn newton_polish<F>(
    prob: &mut Problem<'_, F>,
    x: &mut Vec<f64>,
    fx: &mut f64,
    g: &mut Vec<f64>,
    opts: &OptimOptions,
) where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    for _ in 0..6 {
        if !fx.is_finite() || prob.proj_grad_norm(x, g) <= opts.grad_tol {
            return;
        }
        let free = prob.free(x, g);
        let idx: Vec<usize> = (0..x.len()).filter(|&i| free[i]).collect();
        let m = idx.len();
        if m == 0 {
            return;
        }
        let mut hess = DMatrix::zeros(m, m);
        for (a, &i) in idx.iter().enumerate() {
            let step = 1e-4 * (1.0 + x[i].abs());
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += step;
            xm[i] -= step;
            let (fp, gp) = prob.eval(&xp);
            let (fm, gm) = prob.eval(&xm);
            if !fp.is_finite() || !fm.is_finite() {
                return;
            }
            for (b, &j) in idx.iter().enumerate() {
                hess[(b, a)] = (gp[j] - gm[j]) / (2.0 * step);
            }
        }
        let hess = (&hess + hess.transpose()) * 0.5;
        // Minimizing -f: use the negated Hessian with eigenvalues floored.
        let eig = SymmetricEigen::new(-hess);
        let top = eig.eigenvalues.amax().max(1e-12);
        let gf = DVector::from_iterator(m, idx.iter().map(|&i| g[i]));
        let mut d = DVector::zeros(m);
        for k in 0..m {
            let lam = eig.eigenvalues[k].abs().max(1e-8 * top);
            let u = eig.eigenvectors.column(k);
            d += &u * (u.dot(&gf) / lam);
        }
        let big = d.amax();
        if big > opts.max_step {
            d *= opts.max_step / big;
        }
        let mut full = DVector::zeros(x.len());
        for (a, &i) in idx.iter().enumerate() {
            full[i] = d[a];
        }
        match line_search(prob, x, *fx, g, &full) {
            Some((xn, fnew, gnew)) => {
                *x = xn;
                *fx = fnew;
                *g = gnew;
            }
            None => return,
        }
    }
}

/// Derivative-free maximization inside the box.
fn nelder_mead<F>(prob: &mut Problem<'_, F>, x0: &[f64], max_evals: usize) -> (Vec<f64>, f64)
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let n = x0.len();
    let value = |p: &mut Problem<'_, F>, x: &[f64]| -> f64 {
        let mut y = x.to_vec();
        p.project(&mut y);
        -p.eval(&y).0
    };
    let mut simplex: Vec<Vec<f64>> = vec![x0.to_vec()];
    for i in 0..n {
        let mut v = x0.to_vec();
        v[i] += if x0[i] + 1.0 <= prob.upper[i] {
            1.0
        } else {
            -1.0
        };
        simplex.push(v);
    }
    let mut vals: Vec<f64> = simplex.iter().map(|v| value(prob, v)).collect();
    let start = prob.evals;
    while prob.evals - start < max_evals {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        vals = order.iter().map(|&i| vals[i]).collect();
        if (vals[n] - vals[0]).abs() <= 1e-12 * (1.0 + vals[0].abs()) {
            break;
        }
        let centroid: Vec<f64> = (0..n)
            .map(|j| simplex[..n].iter().map(|v| v[j]).sum::<f64>() / n as f64)
            .collect();
        let along = |c: f64| -> Vec<f64> {
            (0..n)
                .map(|j| centroid[j] + c * (simplex[n][j] - centroid[j]))
                .collect()
        };
        let xr = along(-1.0);
        let fr = value(prob, &xr);
        if fr < vals[0] {
            let xe = along(-2.0);
            let fe = value(prob, &xe);
            if fe < fr {
                simplex[n] = xe;
                vals[n] = fe;
            } else {
                simplex[n] = xr;
                vals[n] = fr;
            }
        } else if fr < vals[n - 1] {
            simplex[n] = xr;
            vals[n] = fr;
        } else {
            let xc = if fr < vals[n] {
                along(-0.5)
            } else {
                along(0.5)
            };
            let fc = value(prob, &xc);
            if fc < vals[n].min(fr) {
                simplex[n] = xc;
                vals[n] = fc;
            } else {
                for i in 1..=n {
                    let shrunk: Vec<f64> = (0..n)
                        .map(|j| simplex[0][j] + 0.5 * (simplex[i][j] - simplex[0][j]))
                        .collect();
                    vals[i] = value(prob, &shrunk);
                    simplex[i] = shrunk;
                }
            }
        }
    }
    let best = (0..=n)
        .min_by(|&a, &b| vals[a].total_cmp(&vals[b]))
        .unwrap_or(0);
    let mut x = simplex[best].clone();
    prob.project(&mut x);
    (x, -vals[best])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad(x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let v = -(x[0] - 1.0).powi(2) - 10.0 * (x[1] + 2.0).powi(2) - (x[0] - 1.0) * (x[1] + 2.0);
        let g = vec![
            -2.0 * (x[0] - 1.0) - (x[1] + 2.0),
            -20.0 * (x[1] + 2.0) - (x[0] - 1.0),
        ];
        Ok((v, g))
    }

    #[test]
    fn interior_quadratic() {
        let out = maximize(
            quad,
            &[0.0, 0.0],
            &[-10.0, -10.0],
            &[10.0, 10.0],
            &OptimOptions::default(),
        );
        assert!(out.converged);
        assert!((out.x[0] - 1.0).abs() < 1e-7 && (out.x[1] + 2.0).abs() < 1e-7);
    }

    #[test]
    fn active_bound_is_respected() {
        let out = maximize(
            quad,
            &[0.0, 0.0],
            &[-10.0, -1.0],
            &[10.0, 10.0],
            &OptimOptions::default(),
        );
        assert!(out.converged);
        assert_eq!(out.x[1], -1.0);
        // maximizer of the slice x1 = -1
        assert!((out.x[0] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn rosenbrock_valley() {
        let f = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            let (a, b) = (x[0], x[1]);
            let v = -((1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2));
            let g = vec![
                2.0 * (1.0 - a) + 400.0 * a * (b - a * a),
                -200.0 * (b - a * a),
            ];
            Ok((v, g))
        };
        let out = maximize(
            f,
            &[-1.2, 1.0],
            &[-5.0, -5.0],
            &[5.0, 5.0],
            &OptimOptions::default(),
        );
        assert!(out.converged, "{out:?}");
        assert!((out.x[0] - 1.0).abs() < 1e-5);
    }
}
