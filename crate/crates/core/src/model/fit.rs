//! REML fitting and the summaries derived from a fit.

use nalgebra::{Cholesky, DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, FisherSnedecor, StudentsT};

use crate::error::{Error, Result};
use crate::linalg::truncated_pinv;
use crate::model::optimize::{maximize, OptimOptions, OptimOutcome};
use crate::model::spec::{Placement, TermInfo, TermKind, VarRole};
use crate::model::system::{
    chol_factor, chol_param_positions, BlockStructure, ParamKind, PenalizedSystem, Solution,
};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FitOptions {
    pub optim: OptimOptions,
    /// Compute approximate confidence intervals for the standard deviations.
    pub intervals: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Coefficient {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
    pub statistic: f64,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarComp {
    pub name: String,
    /// Owning term; `None` for the residual.
    pub term: Option<usize>,
    pub role: VarRole,
    pub sd: f64,
    /// Approximate 95% interval from the curvature of the restricted likelihood.
    pub ci: Option<(f64, f64)>,
    pub boundary: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TermEdf {
    pub name: String,
    pub edf: f64,
    pub cols: usize,
}

/// Posterior covariance of all coefficients, kept in blocked form.
/// The full matrix is `sigma2 * A^-1` with `A` the penalized cross-product.
#[derive(Debug, Clone)]
pub struct CoefCovariance {
    pub sigma2: f64,
    pub n_dense: usize,
    pub level_cols: usize,
    pub solution: Solution,
}

impl CoefCovariance {
    pub fn dense_block(&self) -> DMatrix<f64> {
        &self.solution.h_inv * self.sigma2
    }

    pub fn level_block(&self, l: usize, m: usize) -> DMatrix<f64> {
        self.solution.cross_level_inverse(l, m) * self.sigma2
    }

    /// The full matrix, dense columns first then levels in order.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let d = self.n_dense;
        let q = self.level_cols;
        let nl = self.solution.g_inv.len();
        let total = d + nl * q;
        let mut out = DMatrix::zeros(total, total);
        out.view_mut((0, 0), (d, d)).copy_from(&self.dense_block());
        for l in 0..nl {
            let ld = self.solution.level_dense_inverse(l) * self.sigma2;
            out.view_mut((d + l * q, 0), (q, d)).copy_from(&ld);
            out.view_mut((0, d + l * q), (d, q))
                .copy_from(&ld.transpose());
            for m in 0..nl {
                out.view_mut((d + l * q, d + m * q), (q, q))
                    .copy_from(&self.level_block(l, m));
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub coefficients: Vec<Coefficient>,
    pub names: Vec<String>,
    pub beta: Vec<f64>,
    pub se: Vec<f64>,
    pub t: Vec<f64>,
    pub p: Vec<f64>,
    pub df_resid: f64,
    /// Optimizer coordinates: log smoothing parameters and relative
    /// covariance factor entries.
    pub params: Vec<f64>,
    pub param_names: Vec<String>,
    /// Smoothing parameters, one per log-lambda coordinate.
    pub lambda: Vec<(String, f64)>,
    pub sigma: f64,
    pub varcomp: Vec<VarComp>,
    pub correlations: Vec<(String, f64)>,
    pub edf: Vec<TermEdf>,
    pub total_edf: f64,
    pub reml: f64,
    pub loglik: f64,
    /// Conditional AIC surrogate, `-2 loglik + 2 total_edf`.
    pub aic: f64,
    pub fitted: Vec<f64>,
    pub residuals: Vec<f64>,
    pub coef_cov: CoefCovariance,
    pub theta_dense: Vec<f64>,
    pub theta_levels: Vec<Vec<f64>>,
    pub terms: Vec<TermInfo>,
    /// Per term, the Gram matrix of its design columns (one per level for
    /// per-level terms).
    pub term_gram: Vec<Vec<DMatrix<f64>>>,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub warnings: Vec<String>,
    pub n: usize,
}

impl FitResult {
    pub fn coef(&self, name: &str) -> Option<&Coefficient> {
        self.coefficients.iter().find(|c| c.name == name)
    }

    /// First variance component with the given role.
    pub fn varcomp_by_role(&self, role: &VarRole) -> Option<&VarComp> {
        self.varcomp
            .iter()
            .find(|v| v.term.is_some() && &v.role == role)
    }
}

/// Fit by maximizing the restricted likelihood.
pub fn fit_reml(system: &PenalizedSystem) -> Result<FitResult> {
    fit_reml_with(system, &FitOptions::default())
}

pub fn fit_reml_with(system: &PenalizedSystem, opts: &FitOptions) -> Result<FitResult> {
    if system.n() <= system.n_fixed {
        return Err(Error::InsufficientData(format!(
            "{} observations for {} fixed coefficients",
            system.n(),
            system.n_fixed
        )));
    }
    // Surface structural problems (indefinite systems) directly.
    let x0 = system.initial_params();
    system.evaluate(x0.as_slice())?;
    let lower = system.lower_bounds();
    let upper = system.upper_bounds();
    let out = maximize(
        |x| {
            let e = system.evaluate(x)?;
            Ok((e.reml, e.gradient.iter().copied().collect()))
        },
        x0.as_slice(),
        &lower,
        &upper,
        &opts.optim,
    );
    let out = if out.converged {
        out
    } else {
        retry_at_boundary(system, out, &lower, &upper, opts)
    };
    if !out.converged {
        return Err(Error::Convergence {
            iterations: out.iterations,
            best_criterion: out.value,
            gradient_norm: out.proj_grad_norm,
            best_params: out.x,
        });
    }
    let mut fit = fit_at(system, &out.x, opts.intervals)?;
    fit.iterations = out.iterations;
    fit.gradient_norm = out.proj_grad_norm;
    Ok(fit)
}

/// Relative standard deviation below which a component is treated as
/// vanishing when the optimizer stalls near the boundary.
const VANISHING_SD: f64 = 1e-2;

/// Restart a stalled optimization from boundary points. Optima on the
/// boundary are approached only slowly from the interior, so a restart with
/// nearly vanishing variances set to zero, or nearly perfect correlations set
/// to their bound, usually converges at once. The best converged restart that
/// loses no criterion value is kept.
fn retry_at_boundary(
    system: &PenalizedSystem,
    out: OptimOutcome,
    lower: &[f64],
    upper: &[f64],
    opts: &FitOptions,
) -> OptimOutcome {
    let mut vanish = out.x.clone();
    let mut extreme = out.x.clone();
    let (mut any_vanish, mut any_extreme) = (false, false);
    for (i, ps) in system.params.iter().enumerate() {
        if ps.kind == ParamKind::LogLambda && (-0.5 * out.x[i]).exp() < VANISHING_SD {
            vanish[i] = upper[i];
            any_vanish = true;
        }
    }
    for b in &system.blocks {
        if let BlockStructure::Unstructured { first } = b.structure {
            let l = chol_factor(b.dim, first, &out.x);
            for (p, (i, j)) in chol_param_positions(b.dim).into_iter().enumerate() {
                let k = first + p;
                let small = l.row(i).norm() < VANISHING_SD;
                if i == j && small {
                    vanish[k] = lower[k];
                    any_vanish = true;
                } else if i != j {
                    if small {
                        vanish[k] = 0.0;
                    }
                    if out.x[k].abs() > 0.3 * upper[k] {
                        extreme[k] = if out.x[k] > 0.0 { upper[k] } else { lower[k] };
                        any_extreme = true;
                    }
                }
            }
        }
    }
    let floor = out.value - 1e-6 * out.value.abs().max(1.0);
    let mut best = out;
    for (start, used) in [(vanish, any_vanish), (extreme, any_extreme)] {
        if !used {
            continue;
        }
        let retry = maximize(
            |x| {
                let e = system.evaluate(x)?;
                Ok((e.reml, e.gradient.iter().copied().collect()))
            },
            &start,
            lower,
            upper,
            &opts.optim,
        );
        if retry.converged && retry.value >= floor && (!best.converged || retry.value > best.value)
        {
            best = retry;
        }
    }
    best
}

/// Summarize the system at fixed parameters `x`.
pub fn fit_at(system: &PenalizedSystem, x: &[f64], intervals: bool) -> Result<FitResult> {
    let eval = system.evaluate(x)?;
    let sol = eval.solution;
    let sigma2 = eval.sigma2;
    let sigma = sigma2.sqrt();
    let n = system.n();
    let mut warnings = Vec::new();

    // Effective degrees of freedom.
    let traces = system.shrinkage_traces(x, &sol);
    let total_trace: f64 = traces.iter().flatten().sum();
    let total_edf = system.n_coef() as f64 - total_trace;
    let edf: Vec<TermEdf> = system
        .terms
        .iter()
        .map(|t| {
            let cols = term_cols(t);
            let tr: f64 = t
                .blocks
                .iter()
                .map(|&b| traces[b].iter().sum::<f64>())
                .sum();
            TermEdf {
                name: t.name.clone(),
                edf: cols as f64 - tr,
                cols,
            }
        })
        .collect();
    let df_resid = n as f64 - total_edf;

    // Fixed effects.
    let nf = system.n_fixed;
    let names: Vec<String> = system.dense_names[..nf].to_vec();
    let beta: Vec<f64> = sol.theta_dense.iter().take(nf).copied().collect();
    let se: Vec<f64> = (0..nf)
        .map(|i| (sigma2 * sol.h_inv[(i, i)]).sqrt())
        .collect();
    let t: Vec<f64> = beta.iter().zip(&se).map(|(b, s)| b / s).collect();
    let p: Vec<f64> = t.iter().map(|&t| two_sided_t(t, df_resid)).collect();

    // Variance components.
    let sd_y = {
        let m = system.y.mean();
        (system.y.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n.max(2) - 1) as f64).sqrt()
    };
    let floor = 1e-6 * sd_y;
    let mut varcomp = vec![VarComp {
        name: "Residual".into(),
        term: None,
        role: VarRole::Intercept,
        sd: sigma,
        ci: None,
        boundary: false,
    }];
    let mut correlations = Vec::new();
    let mut lambda = Vec::new();
    for (i, ps) in system.params.iter().enumerate() {
        if ps.kind == ParamKind::LogLambda {
            lambda.push((ps.name.clone(), x[i].exp()));
            let sd = sigma * (-0.5 * x[i]).exp();
            let at_bound = x[i] <= ps.lower + 1e-9 || x[i] >= ps.upper - 1e-9;
            varcomp.push(VarComp {
                name: ps.name.clone(),
                term: Some(ps.term),
                role: ps.role.clone(),
                sd: if sd < floor { 0.0 } else { sd },
                ci: None,
                boundary: sd < floor || at_bound,
            });
        }
    }
    let mut seen = Vec::new();
    for b in &system.blocks {
        if let BlockStructure::Unstructured { first } = b.structure {
            if seen.contains(&first) {
                continue;
            }
            seen.push(first);
            let l = chol_factor(b.dim, first, x);
            let cov = (&l * l.transpose()) * sigma2;
            let term = &system.terms[b.term];
            let slope_name = match term.kind {
                TermKind::Random(crate::model::spec::RandomForm::CorrelatedInterceptSlope(e)) => {
                    e.name()
                }
                _ => "slope".into(),
            };
            let sds: Vec<f64> = (0..b.dim).map(|i| cov[(i, i)].sqrt()).collect();
            for (i, &sd) in sds.iter().enumerate() {
                let at_bound = system.params[first + i].lower + 1e-9 >= x[first + i];
                let (label, role) = if i == 0 {
                    ("(Intercept)".to_string(), VarRole::Intercept)
                } else {
                    (slope_name.clone(), VarRole::Slope(slope_name.clone()))
                };
                varcomp.push(VarComp {
                    name: format!("{} {}", term.name, label),
                    term: Some(b.term),
                    role,
                    sd: if sd < floor { 0.0 } else { sd },
                    ci: None,
                    boundary: sd < floor || at_bound,
                });
            }
            if b.dim == 2 && sds[0] > 0.0 && sds[1] > 0.0 {
                correlations.push((term.name.clone(), cov[(0, 1)] / (sds[0] * sds[1])));
            }
        }
    }
    if intervals {
        match sd_intervals(system, x, sigma2) {
            Ok(cis) => {
                varcomp[0].ci = cis.sigma;
                let mut k = 1;
                for (i, ps) in system.params.iter().enumerate() {
                    if ps.kind == ParamKind::LogLambda {
                        varcomp[k].ci = cis.params[i];
                        k += 1;
                    }
                }
            }
            Err(e) => warnings.push(format!("confidence intervals omitted: {e}")),
        }
    }

    let fitted_v = system.fitted(&sol);
    let residuals: Vec<f64> = system
        .y
        .iter()
        .zip(fitted_v.iter())
        .map(|(y, f)| y - f)
        .collect();
    let rss: f64 = residuals.iter().map(|r| r * r).sum();
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let loglik = -0.5 * n as f64 * (ln2pi + sigma2.ln()) - rss / (2.0 * sigma2);
    let aic = -2.0 * loglik + 2.0 * total_edf;

    let coefficients = names
        .iter()
        .enumerate()
        .map(|(i, name)| Coefficient {
            name: name.clone(),
            estimate: beta[i],
            se: se[i],
            statistic: t[i],
            p: p[i],
        })
        .collect();

    Ok(FitResult {
        coefficients,
        names,
        beta,
        se,
        t,
        p,
        df_resid,
        params: x.to_vec(),
        param_names: system.params.iter().map(|p| p.name.clone()).collect(),
        lambda,
        sigma,
        varcomp,
        correlations,
        edf,
        total_edf,
        reml: eval.reml,
        loglik,
        aic,
        fitted: fitted_v.iter().copied().collect(),
        residuals,
        theta_dense: sol.theta_dense.iter().copied().collect(),
        theta_levels: sol
            .theta_levels
            .iter()
            .map(|v| v.iter().copied().collect())
            .collect(),
        coef_cov: CoefCovariance {
            sigma2,
            n_dense: system.n_dense(),
            level_cols: system.level_cols(),
            solution: sol,
        },
        terms: system.terms.clone(),
        term_gram: system.terms.iter().map(|t| term_gram(system, t)).collect(),
        iterations: 0,
        gradient_norm: eval.gradient.amax(),
        warnings,
        n,
    })
}

fn term_gram(system: &PenalizedSystem, t: &TermInfo) -> Vec<DMatrix<f64>> {
    match t.placement {
        Placement::Dense { offset, cols } => {
            vec![system
                .dense_gram()
                .view((offset, offset), (cols, cols))
                .into_owned()]
        }
        Placement::PerLevel { offset, cols } => (0..t.n_levels)
            .map(|l| {
                system
                    .level_gram(l)
                    .view((offset, offset), (cols, cols))
                    .into_owned()
            })
            .collect(),
    }
}

fn term_cols(t: &TermInfo) -> usize {
    match t.placement {
        Placement::Dense { cols, .. } => cols,
        Placement::PerLevel { cols, .. } => cols * t.n_levels,
    }
}

fn two_sided_t(t: f64, df: f64) -> f64 {
    if !t.is_finite() || df <= 0.0 {
        return f64::NAN;
    }
    match StudentsT::new(0.0, 1.0, df) {
        Ok(d) => 2.0 * d.cdf(-t.abs()),
        Err(_) => f64::NAN,
    }
}

/// Coefficient rows in the order of the fixed design.
pub fn coefficient_table(fit: &FitResult) -> Vec<Coefficient> {
    fit.coefficients.clone()
}

/// Per-term edf and variance components.
pub fn edf_and_varcomp(fit: &FitResult) -> (Vec<TermEdf>, Vec<VarComp>) {
    (fit.edf.clone(), fit.varcomp.clone())
}

struct Intervals {
    sigma: Option<(f64, f64)>,
    params: Vec<Option<(f64, f64)>>,
}

/// Wald intervals on the log-sd scale from a numerical Hessian of the
/// unprofiled restricted likelihood. Only log-lambda coordinates that are
/// away from their bounds take part; relative covariance factor entries are
/// held at their estimates.
fn sd_intervals(system: &PenalizedSystem, x: &[f64], sigma2: f64) -> Result<Intervals> {
    let active: Vec<usize> = system
        .params
        .iter()
        .enumerate()
        .filter(|(i, p)| {
            p.kind == ParamKind::LogLambda && x[*i] > p.lower + 1e-6 && x[*i] < p.upper - 1e-6
        })
        .map(|(i, _)| i)
        .collect();
    let m = active.len() + 1;
    let u0: Vec<f64> = std::iter::once(0.5 * sigma2.ln())
        .chain(active.iter().map(|&i| 0.5 * sigma2.ln() - 0.5 * x[i]))
        .collect();
    let value = |u: &[f64]| -> Result<f64> {
        let mut xx = x.to_vec();
        for (k, &i) in active.iter().enumerate() {
            xx[i] = 2.0 * (u[0] - u[k + 1]);
        }
        system.reml_unprofiled(&xx, (2.0 * u[0]).exp())
    };
    let h = 1e-3;
    let f0 = value(&u0)?;
    let mut hess = DMatrix::zeros(m, m);
    for a in 0..m {
        for b in a..m {
            let shift = |da: f64, db: f64| {
                let mut u = u0.clone();
                u[a] += da;
                u[b] += db;
                u
            };
            let v = if a == b {
                (value(&shift(h, 0.0))? - 2.0 * f0 + value(&shift(-h, 0.0))?) / (h * h)
            } else {
                (value(&shift(h, h))? - value(&shift(h, -h))? - value(&shift(-h, h))?
                    + value(&shift(-h, -h))?)
                    / (4.0 * h * h)
            };
            hess[(a, b)] = v;
            hess[(b, a)] = v;
        }
    }
    let info = -hess;
    let ch = Cholesky::new(info)
        .ok_or_else(|| Error::Numerical("information matrix is not positive definite".into()))?;
    let cov = ch.inverse();
    let ci = |k: usize| {
        let s = cov[(k, k)].sqrt();
        ((u0[k] - 1.959964 * s).exp(), (u0[k] + 1.959964 * s).exp())
    };
    let mut params = vec![None; system.n_params()];
    for (k, &i) in active.iter().enumerate() {
        params[i] = Some(ci(k + 1));
    }
    Ok(Intervals {
        sigma: Some(ci(0)),
        params,
    })
}

/// Result of the approximate Wald test for one penalized term.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothTest {
    pub name: String,
    pub edf: f64,
    pub rank: usize,
    /// `None` when the term is shrunk to rank zero.
    pub statistic: Option<f64>,
    pub p: Option<f64>,
}

impl SmoothTest {
    pub fn applicable(&self) -> bool {
        self.statistic.is_some()
    }
}

/// Approximate Wald test `b' V^- b / edf` for term `term`, with `V^-` the
/// rank-`round(edf)` pseudo-inverse of the term's posterior covariance and an
/// F reference on `(edf, residual df)`. The test works on the scale of the
/// fitted term values: coefficients and covariance are first mapped through
/// the square root of the term's Gram matrix, which makes the truncation
/// invariant to the basis parameterization.
pub fn smooth_term_test(fit: &FitResult, term: usize) -> Result<SmoothTest> {
    let info = fit
        .terms
        .get(term)
        .ok_or_else(|| Error::Contract(format!("no term with index {term}")))?;
    let edf = fit.edf[term].edf;
    let rank = edf.round().max(0.0) as usize;
    if edf < 0.5 || rank == 0 {
        return Ok(SmoothTest {
            name: info.name.clone(),
            edf,
            rank: 0,
            statistic: None,
            p: None,
        });
    }
    let (b, v) = term_coefficients(fit, info);
    let root = block_sqrt(&fit.term_gram[term]);
    let b = &root * b;
    let v = &root * v * &root;
    let rank = rank.min(b.len());
    let vinv = truncated_pinv(&v, rank);
    let stat = b.dot(&(&vinv * &b)) / edf;
    let p = FisherSnedecor::new(edf, fit.df_resid)
        .map(|f| 1.0 - f.cdf(stat))
        .map_err(|e| Error::Numerical(format!("F reference: {e}")))?;
    Ok(SmoothTest {
        name: info.name.clone(),
        edf,
        rank,
        statistic: Some(stat),
        p: Some(p),
    })
}

fn block_sqrt(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let total: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(total, total);
    let mut o = 0;
    for b in blocks {
        let p = b.nrows();
        let eig = b.clone().symmetric_eigen();
        let mut r = DMatrix::zeros(p, p);
        for k in 0..p {
            let u = eig.eigenvectors.column(k);
            r += (&u * u.transpose()) * eig.eigenvalues[k].max(0.0).sqrt();
        }
        out.view_mut((o, o), (p, p)).copy_from(&r);
        o += p;
    }
    out
}

fn term_coefficients(fit: &FitResult, info: &TermInfo) -> (DVector<f64>, DMatrix<f64>) {
    let cc = &fit.coef_cov;
    match info.placement {
        Placement::Dense { offset, cols } => {
            let b = DVector::from_column_slice(&fit.theta_dense[offset..offset + cols]);
            let v = cc
                .dense_block()
                .view((offset, offset), (cols, cols))
                .into_owned();
            (b, v)
        }
        Placement::PerLevel { offset, cols } => {
            let nl = info.n_levels;
            let b = DVector::from_iterator(
                nl * cols,
                (0..nl).flat_map(|l| fit.theta_levels[l][offset..offset + cols].iter().copied()),
            );
            let mut v = DMatrix::zeros(nl * cols, nl * cols);
            for l in 0..nl {
                for m in 0..nl {
                    let blk = cc.level_block(l, m);
                    v.view_mut((l * cols, m * cols), (cols, cols))
                        .copy_from(&blk.view((offset, offset), (cols, cols)));
                }
            }
            (b, v)
        }
    }
}
