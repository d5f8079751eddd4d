//! Penalized mixed-model system and its restricted likelihood.
//!
//! Coefficients split into a dense part (fixed effects and any penalized
//! columns that are not grouped by the blocking factor) and per-level
//! blocks that only load on the rows of their level. The penalized normal
//! equations are then solved by eliminating the level blocks one at a time
//! and factoring the dense Schur complement, so each evaluation of the
//! criterion scales with the number of levels rather than the total number
//! of columns.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::basis::symmetrize;
use crate::error::{Error, Result};
use crate::model::spec::{GroupFactor, VarRole};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Log smoothing parameter; the block precision is scaled by `exp(x)`.
    LogLambda,
    /// Log of a diagonal entry of a relative covariance factor.
    LogCholDiag,
    /// Off-diagonal entry of a relative covariance factor.
    CholOffDiag,
}

#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub kind: ParamKind,
    pub lower: f64,
    pub upper: f64,
    /// Index of the owning term.
    pub term: usize,
    pub role: VarRole,
}

pub const LOG_LAMBDA_BOUNDS: (f64, f64) = (-12.0, 30.0);
pub const LOG_CHOL_BOUNDS: (f64, f64) = (-15.0, 8.0);
pub const CHOL_OFF_BOUNDS: (f64, f64) = (-100.0, 100.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamLink {
    Shared(usize),
    /// Level `l` uses parameter `first + l`.
    PerLevel {
        first: usize,
    },
}

impl ParamLink {
    pub fn param(self, level: usize) -> usize {
        match self {
            ParamLink::Shared(p) => p,
            ParamLink::PerLevel { first } => first + level,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScaledComponent {
    pub matrix: DMatrix<f64>,
    pub link: ParamLink,
}

#[derive(Debug, Clone)]
pub enum BlockStructure {
    /// Precision `sum_j exp(x_j) S_j`. `range` holds an orthonormal basis of
    /// the joint range of the `S_j`, used for the pseudo-determinant.
    Scaled {
        components: Vec<ScaledComponent>,
        range: DMatrix<f64>,
    },
    /// Precision `(L L')^-1` with `L` lower triangular: `dim` log-diagonal
    /// parameters starting at `first`, then the strict lower triangle by rows.
    Unstructured { first: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Location {
    /// Columns `offset..offset+dim` of the dense design.
    Dense { offset: usize },
    /// Columns `offset..offset+dim` within every level block.
    PerLevel { offset: usize },
}

#[derive(Debug, Clone)]
pub struct PenaltyBlock {
    pub term: usize,
    pub location: Location,
    pub dim: usize,
    pub structure: BlockStructure,
    /// Level this dense block belongs to, for terms expanded densely.
    pub level: Option<usize>,
}

impl PenaltyBlock {
    pub fn rank(&self) -> usize {
        match &self.structure {
            BlockStructure::Scaled { range, .. } => range.ncols(),
            BlockStructure::Unstructured { .. } => self.dim,
        }
    }

    /// Precision matrix for the parameter vector at `level`.
    pub fn precision(&self, x: &[f64], level: usize) -> DMatrix<f64> {
        match &self.structure {
            BlockStructure::Scaled { components, .. } => {
                let mut p = DMatrix::zeros(self.dim, self.dim);
                for c in components {
                    p += &c.matrix * x[c.link.param(level)].exp();
                }
                p
            }
            BlockStructure::Unstructured { first } => {
                let l = chol_factor(self.dim, *first, x);
                let cov = &l * l.transpose();
                symmetrize(
                    &cov.try_inverse()
                        .unwrap_or_else(|| DMatrix::from_element(self.dim, self.dim, f64::NAN)),
                )
            }
        }
    }

    /// Parameters that this block depends on at `level`, with the derivative
    /// of the precision with respect to each.
    pub fn precision_derivatives(&self, x: &[f64], level: usize) -> Vec<(usize, DMatrix<f64>)> {
        match &self.structure {
            BlockStructure::Scaled { components, .. } => {
                let mut out: Vec<(usize, DMatrix<f64>)> = Vec::new();
                for c in components {
                    let p = c.link.param(level);
                    let d = &c.matrix * x[p].exp();
                    if let Some(slot) = out.iter_mut().find(|(q, _)| *q == p) {
                        slot.1 += d;
                    } else {
                        out.push((p, d));
                    }
                }
                out
            }
            BlockStructure::Unstructured { first } => {
                let dim = self.dim;
                let l = chol_factor(dim, *first, x);
                let prec = self.precision(x, level);
                let mut out = Vec::new();
                for (p, (i, j)) in chol_param_positions(dim).into_iter().enumerate() {
                    let mut dl = DMatrix::zeros(dim, dim);
                    if i == j {
                        dl.row_mut(i).copy_from(&l.row(i));
                    } else {
                        dl[(i, j)] = l[(i, i)];
                    }
                    let dcov = &dl * l.transpose() + &l * dl.transpose();
                    out.push((*first + p, -(&prec * dcov * &prec)));
                }
                out
            }
        }
    }

    /// Log pseudo-determinant of the precision and its derivatives.
    fn log_pdet(
        &self,
        x: &[f64],
        level: usize,
        prec: &DMatrix<f64>,
    ) -> Result<(f64, Vec<(usize, f64)>)> {
        match &self.structure {
            BlockStructure::Scaled { range, .. } => {
                if range.ncols() == 0 {
                    return Ok((0.0, Vec::new()));
                }
                // A full-rank penalty needs no projection, and skipping it
                // avoids mixing large and small penalty scales.
                let full = range.ncols() == range.nrows();
                let r = if full {
                    symmetrize(prec)
                } else {
                    symmetrize(&(range.transpose() * prec * range))
                };
                let ch = Cholesky::new(r).ok_or_else(|| {
                    Error::Numerical("penalty block is not positive definite on its range".into())
                })?;
                let logdet = chol_logdet(&ch);
                let inv = ch.inverse();
                let grads = self
                    .precision_derivatives(x, level)
                    .into_iter()
                    .map(|(p, d)| {
                        let dr = if full {
                            d
                        } else {
                            range.transpose() * d * range
                        };
                        (p, trace_product(&inv, &dr))
                    })
                    .collect();
                Ok((logdet, grads))
            }
            BlockStructure::Unstructured { first } => {
                // log|(L L')^-1| = -2 sum log L_ii
                let dim = self.dim;
                let logdet = -2.0 * (0..dim).map(|i| x[first + i]).sum::<f64>();
                let grads = (0..dim).map(|i| (first + i, -2.0)).collect();
                Ok((logdet, grads))
            }
        }
    }
}

pub(crate) fn chol_param_positions(dim: usize) -> Vec<(usize, usize)> {
    let mut pos: Vec<(usize, usize)> = (0..dim).map(|i| (i, i)).collect();
    for i in 1..dim {
        for j in 0..i {
            pos.push((i, j));
        }
    }
    pos
}

/// Relative covariance factor `D M`, with `D` the exponentiated diagonal
/// parameters and `M` unit lower triangular. Scaling whole rows keeps the
/// correlations fixed as a variance shrinks to zero.
pub(crate) fn chol_factor(dim: usize, first: usize, x: &[f64]) -> DMatrix<f64> {
    let mut l = DMatrix::identity(dim, dim);
    for (p, (i, j)) in chol_param_positions(dim).into_iter().enumerate().skip(dim) {
        l[(i, j)] = x[first + p];
    }
    for i in 0..dim {
        let d = x[first + i].exp();
        l.row_mut(i).scale_mut(d);
    }
    l
}

fn chol_logdet(ch: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * ch.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

/// `tr(A B)` for square matrices of equal size.
pub(crate) fn trace_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.transpose().iter()).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone)]
pub struct LevelStructure {
    pub factor: GroupFactor,
    /// Identifier of each level (subject id, or factor code).
    pub level_ids: Vec<u32>,
    /// Columns per level.
    pub q: usize,
    pub rows: Vec<Vec<usize>>,
    /// Per-level design, `n_l x q`.
    pub z: Vec<DMatrix<f64>>,
}

impl LevelStructure {
    pub fn n_levels(&self) -> usize {
        self.rows.len()
    }
}

#[derive(Debug, Clone)]
pub struct PenalizedSystem {
    pub y: DVector<f64>,
    /// Dense design: fixed columns first, then densely placed penalized columns.
    pub dense: DMatrix<f64>,
    pub dense_names: Vec<String>,
    pub n_fixed: usize,
    pub levels: Option<LevelStructure>,
    pub blocks: Vec<PenaltyBlock>,
    pub params: Vec<ParamSpec>,
    pub terms: Vec<super::spec::TermInfo>,
    cross: CrossProducts,
}

#[derive(Debug, Clone)]
struct CrossProducts {
    dtd: DMatrix<f64>,
    dty: DVector<f64>,
    yty: f64,
    ztz: Vec<DMatrix<f64>>,
    ztd: Vec<DMatrix<f64>>,
    zty: Vec<DVector<f64>>,
}

/// Penalized solution and factorization at one parameter vector.
#[derive(Debug, Clone)]
pub struct Solution {
    pub theta_dense: DVector<f64>,
    pub theta_levels: Vec<DVector<f64>>,
    /// Inverse of the dense Schur complement; the dense diagonal block of
    /// the inverse penalized cross-product.
    pub h_inv: DMatrix<f64>,
    /// Per-level inverse of `Z_l'Z_l + P_l`.
    pub g_inv: Vec<DMatrix<f64>>,
    /// Per level `G_l^-1 Z_l' D_l`.
    pub w: Vec<DMatrix<f64>>,
    pub log_det_a: f64,
    pub log_det_s: f64,
    /// Penalized residual sum of squares.
    pub pen_rss: f64,
    /// Dimension of the unpenalized space.
    pub null_dim: usize,
}

impl Solution {
    /// Diagonal block of the inverse penalized cross-product for a level.
    pub fn level_inverse(&self, level: usize) -> DMatrix<f64> {
        &self.g_inv[level] + &self.w[level] * &self.h_inv * self.w[level].transpose()
    }

    /// Off-diagonal block `(A^-1)_{l,m}` between two levels.
    pub fn cross_level_inverse(&self, l: usize, m: usize) -> DMatrix<f64> {
        let mut out = &self.w[l] * &self.h_inv * self.w[m].transpose();
        if l == m {
            out += &self.g_inv[l];
        }
        out
    }

    /// Block `(A^-1)_{l,dense}`.
    pub fn level_dense_inverse(&self, level: usize) -> DMatrix<f64> {
        -(&self.w[level] * &self.h_inv)
    }
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    /// Restricted log-likelihood with the residual scale profiled out.
    pub reml: f64,
    pub sigma2: f64,
    /// Gradient of `reml` with respect to the parameters.
    pub gradient: DVector<f64>,
    pub solution: Solution,
}

impl PenalizedSystem {
    pub(crate) fn new(
        y: DVector<f64>,
        dense: DMatrix<f64>,
        dense_names: Vec<String>,
        n_fixed: usize,
        levels: Option<LevelStructure>,
        blocks: Vec<PenaltyBlock>,
        params: Vec<ParamSpec>,
        terms: Vec<super::spec::TermInfo>,
    ) -> Self {
        let dtd = dense.transpose() * &dense;
        let dty = dense.transpose() * &y;
        let yty = y.dot(&y);
        let (mut ztz, mut ztd, mut zty) = (Vec::new(), Vec::new(), Vec::new());
        if let Some(lv) = &levels {
            for (rows, z) in lv.rows.iter().zip(&lv.z) {
                let d_l = dense.select_rows(rows.iter());
                let y_l = DVector::from_iterator(rows.len(), rows.iter().map(|&r| y[r]));
                ztz.push(z.transpose() * z);
                ztd.push(z.transpose() * d_l);
                zty.push(z.transpose() * y_l);
            }
        }
        PenalizedSystem {
            y,
            dense,
            dense_names,
            n_fixed,
            levels,
            blocks,
            params,
            terms,
            cross: CrossProducts {
                dtd,
                dty,
                yty,
                ztz,
                ztd,
                zty,
            },
        }
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    /// `D'D` for the dense columns.
    pub(crate) fn dense_gram(&self) -> &DMatrix<f64> {
        &self.cross.dtd
    }

    /// `Z_l'Z_l` for one level.
    pub(crate) fn level_gram(&self, l: usize) -> &DMatrix<f64> {
        &self.cross.ztz[l]
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn n_dense(&self) -> usize {
        self.dense.ncols()
    }

    pub fn n_levels(&self) -> usize {
        self.levels.as_ref().map_or(0, |l| l.n_levels())
    }

    pub fn level_cols(&self) -> usize {
        self.levels.as_ref().map_or(0, |l| l.q)
    }

    /// Total number of coefficients.
    pub fn n_coef(&self) -> usize {
        self.n_dense() + self.n_levels() * self.level_cols()
    }

    /// Dimension of the space left unpenalized by every block.
    pub fn null_dim(&self) -> usize {
        let mut penalized = 0;
        for b in &self.blocks {
            let reps = match b.location {
                Location::Dense { .. } => 1,
                Location::PerLevel { .. } => self.n_levels(),
            };
            penalized += reps * b.rank();
        }
        self.n_coef() - penalized
    }

    pub fn initial_params(&self) -> DVector<f64> {
        DVector::zeros(self.n_params())
    }

    pub fn lower_bounds(&self) -> Vec<f64> {
        self.params.iter().map(|p| p.lower).collect()
    }

    pub fn upper_bounds(&self) -> Vec<f64> {
        self.params.iter().map(|p| p.upper).collect()
    }

    /// Full dense design `[D, Z]` with level blocks ordered by level.
    pub fn dense_design(&self) -> DMatrix<f64> {
        let n = self.n();
        let d = self.n_dense();
        let mut x = DMatrix::zeros(n, self.n_coef());
        x.view_mut((0, 0), (n, d)).copy_from(&self.dense);
        if let Some(lv) = &self.levels {
            for (l, (rows, z)) in lv.rows.iter().zip(&lv.z).enumerate() {
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..lv.q {
                        x[(r, d + l * lv.q + j)] = z[(i, j)];
                    }
                }
            }
        }
        x
    }

    /// Full penalty matrix matching [`dense_design`](Self::dense_design).
    pub fn dense_penalty(&self, x: &[f64]) -> DMatrix<f64> {
        let d = self.n_dense();
        let q = self.level_cols();
        let total = self.n_coef();
        let mut s = DMatrix::zeros(total, total);
        for b in &self.blocks {
            match b.location {
                Location::Dense { offset } => {
                    let p = b.precision(x, b.level.unwrap_or(0));
                    let mut v = s.view_mut((offset, offset), (b.dim, b.dim));
                    v += p;
                }
                Location::PerLevel { offset } => {
                    for l in 0..self.n_levels() {
                        let p = b.precision(x, l);
                        let o = d + l * q + offset;
                        let mut v = s.view_mut((o, o), (b.dim, b.dim));
                        v += p;
                    }
                }
            }
        }
        s
    }

    fn level_penalty(&self, x: &[f64], level: usize) -> DMatrix<f64> {
        let q = self.level_cols();
        let mut p = DMatrix::zeros(q, q);
        for b in &self.blocks {
            if let Location::PerLevel { offset } = b.location {
                let mut v = p.view_mut((offset, offset), (b.dim, b.dim));
                v += b.precision(x, level);
            }
        }
        p
    }

    fn dense_block_penalty(&self, x: &[f64]) -> DMatrix<f64> {
        let d = self.n_dense();
        let mut s = DMatrix::zeros(d, d);
        for b in &self.blocks {
            if let Location::Dense { offset } = b.location {
                let mut v = s.view_mut((offset, offset), (b.dim, b.dim));
                v += b.precision(x, b.level.unwrap_or(0));
            }
        }
        s
    }

    /// Solve the penalized normal equations at `x`.
    pub fn solve(&self, x: &[f64]) -> Result<Solution> {
        if x.len() != self.n_params() {
            return Err(Error::Contract(format!(
                "expected {} parameters, got {}",
                self.n_params(),
                x.len()
            )));
        }
        let c = &self.cross;
        let d = self.n_dense();
        let nl = self.n_levels();
        let mut h = &c.dtd + self.dense_block_penalty(x);
        let mut r = c.dty.clone();
        let mut log_det_a = 0.0;
        let mut g_inv = Vec::with_capacity(nl);
        let mut w = Vec::with_capacity(nl);
        let mut u = Vec::with_capacity(nl);
        for l in 0..nl {
            let g = &c.ztz[l] + self.level_penalty(x, l);
            let ch = Cholesky::new(symmetrize(&g)).ok_or_else(|| {
                Error::Numerical(format!(
                    "level {l} block of the penalized cross-product is not positive definite"
                ))
            })?;
            log_det_a += chol_logdet(&ch);
            let wl = ch.solve(&c.ztd[l]);
            let ul = ch.solve(&c.zty[l]);
            h -= c.ztd[l].transpose() * &wl;
            r -= c.ztd[l].transpose() * &ul;
            g_inv.push(ch.inverse());
            w.push(wl);
            u.push(ul);
        }
        let (theta_dense, h_inv) = if d > 0 {
            let ch = Cholesky::new(symmetrize(&h)).ok_or_else(|| {
                Error::Numerical("dense Schur complement is not positive definite".into())
            })?;
            log_det_a += chol_logdet(&ch);
            (ch.solve(&r), ch.inverse())
        } else {
            (DVector::zeros(0), DMatrix::zeros(0, 0))
        };
        let theta_levels: Vec<DVector<f64>> =
            (0..nl).map(|l| &u[l] - &w[l] * &theta_dense).collect();
        let mut fit_dot = theta_dense.dot(&c.dty);
        for l in 0..nl {
            fit_dot += theta_levels[l].dot(&c.zty[l]);
        }
        let pen_rss = c.yty - fit_dot;

        let mut log_det_s = 0.0;
        for b in &self.blocks {
            match b.location {
                Location::Dense { .. } => {
                    let lv = b.level.unwrap_or(0);
                    let p = b.precision(x, lv);
                    log_det_s += b.log_pdet(x, lv, &p)?.0;
                }
                Location::PerLevel { .. } => {
                    for l in 0..nl {
                        let p = b.precision(x, l);
                        log_det_s += b.log_pdet(x, l, &p)?.0;
                    }
                }
            }
        }
        Ok(Solution {
            theta_dense,
            theta_levels,
            h_inv,
            g_inv,
            w,
            log_det_a,
            log_det_s,
            pen_rss,
            null_dim: self.null_dim(),
        })
    }

    /// Profiled restricted log-likelihood at `x`.
    pub fn reml(&self, x: &[f64]) -> Result<f64> {
        let sol = self.solve(x)?;
        self.profiled_reml(&sol).map(|(v, _)| v)
    }

    fn profiled_reml(&self, sol: &Solution) -> Result<(f64, f64)> {
        let dof = self.n() as f64 - sol.null_dim as f64;
        if dof <= 0.0 {
            return Err(Error::InsufficientData(format!(
                "{} observations for {} unpenalized coefficients",
                self.n(),
                sol.null_dim
            )));
        }
        let sigma2 = sol.pen_rss / dof;
        if !(sigma2 > 0.0) || !sigma2.is_finite() {
            return Err(Error::Numerical(format!(
                "non-positive residual scale {sigma2}"
            )));
        }
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        let v =
            -0.5 * dof * (1.0 + ln2pi + sigma2.ln()) + 0.5 * sol.log_det_s - 0.5 * sol.log_det_a;
        Ok((v, sigma2))
    }

    /// Restricted log-likelihood with an explicit residual variance.
    pub fn reml_unprofiled(&self, x: &[f64], sigma2: f64) -> Result<f64> {
        let sol = self.solve(x)?;
        let dof = self.n() as f64 - sol.null_dim as f64;
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        Ok(
            -sol.pen_rss / (2.0 * sigma2) - 0.5 * dof * (ln2pi + sigma2.ln()) + 0.5 * sol.log_det_s
                - 0.5 * sol.log_det_a,
        )
    }

    /// Criterion, residual scale and analytic gradient at `x`.
    pub fn evaluate(&self, x: &[f64]) -> Result<Evaluation> {
        let sol = self.solve(x)?;
        let (reml, sigma2) = self.profiled_reml(&sol)?;
        let mut grad = DVector::zeros(self.n_params());
        let nl = self.n_levels();
        let q_level_inv: Vec<DMatrix<f64>> = (0..nl).map(|l| sol.level_inverse(l)).collect();
        for b in &self.blocks {
            match b.location {
                Location::Dense { offset } => {
                    let lv = b.level.unwrap_or(0);
                    let prec = b.precision(x, lv);
                    let (_, ld) = b.log_pdet(x, lv, &prec)?;
                    for (p, g) in ld {
                        grad[p] += 0.5 * g;
                    }
                    let theta = sol.theta_dense.rows(offset, b.dim).into_owned();
                    let ainv = sol
                        .h_inv
                        .view((offset, offset), (b.dim, b.dim))
                        .into_owned();
                    for (p, dp) in b.precision_derivatives(x, lv) {
                        let quad = theta.dot(&(&dp * &theta));
                        grad[p] += -quad / (2.0 * sigma2) - 0.5 * trace_product(&ainv, &dp);
                    }
                }
                Location::PerLevel { offset } => {
                    for l in 0..nl {
                        let prec = b.precision(x, l);
                        let (_, ld) = b.log_pdet(x, l, &prec)?;
                        for (p, g) in ld {
                            grad[p] += 0.5 * g;
                        }
                        let theta = sol.theta_levels[l].rows(offset, b.dim).into_owned();
                        let ainv = q_level_inv[l]
                            .view((offset, offset), (b.dim, b.dim))
                            .into_owned();
                        for (p, dp) in b.precision_derivatives(x, l) {
                            let quad = theta.dot(&(&dp * &theta));
                            grad[p] += -quad / (2.0 * sigma2) - 0.5 * trace_product(&ainv, &dp);
                        }
                    }
                }
            }
        }
        Ok(Evaluation {
            reml,
            sigma2,
            gradient: grad,
            solution: sol,
        })
    }

    /// Fitted values `D theta_d + Z theta_l`.
    pub fn fitted(&self, sol: &Solution) -> DVector<f64> {
        let mut f = &self.dense * &sol.theta_dense;
        if let Some(lv) = &self.levels {
            for (l, (rows, z)) in lv.rows.iter().zip(&lv.z).enumerate() {
                let fl = z * &sol.theta_levels[l];
                for (i, &r) in rows.iter().enumerate() {
                    f[r] += fl[i];
                }
            }
        }
        f
    }

    /// Per-block shrinkage traces `tr((A^-1)_b P_b)`, indexed `[block][level]`
    /// (dense blocks have a single entry).
    pub fn shrinkage_traces(&self, x: &[f64], sol: &Solution) -> Vec<Vec<f64>> {
        let nl = self.n_levels();
        let level_inv: Vec<DMatrix<f64>> = (0..nl).map(|l| sol.level_inverse(l)).collect();
        self.blocks
            .iter()
            .map(|b| match b.location {
                Location::Dense { offset } => {
                    let p = b.precision(x, b.level.unwrap_or(0));
                    let ainv = sol
                        .h_inv
                        .view((offset, offset), (b.dim, b.dim))
                        .into_owned();
                    vec![trace_product(&ainv, &p)]
                }
                Location::PerLevel { offset } => (0..nl)
                    .map(|l| {
                        let p = b.precision(x, l);
                        let ainv = level_inv[l]
                            .view((offset, offset), (b.dim, b.dim))
                            .into_owned();
                        trace_product(&ainv, &p)
                    })
                    .collect(),
            })
            .collect()
    }
}
