//! Cubic B-spline bases with difference penalties, intercept absorption and
//! per-level expansion for factor smooths and by-smooths.
//!
//! A basis of dimension `k` uses `k + 4` equally spaced knots, `k - 4` of
//! which fall strictly inside the domain. Coefficients are penalized by
//! squared second differences, whose null space holds exactly the constant
//! and linear functions, or optionally by squared first differences, whose
//! null space holds the constants. With `m = 1` the null space receives an
//! additional identity penalty so that a term can shrink all the way to zero.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Which parts of a smooth are penalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PenaltyOrder {
    /// `m = 1`: curvature penalty plus a penalty on its null space.
    One,
    /// `m = 2`: curvature penalty only; affine functions are unpenalized.
    Two,
}

impl PenaltyOrder {
    pub fn from_m(m: u8) -> Result<Self> {
        match m {
            1 => Ok(PenaltyOrder::One),
            2 => Ok(PenaltyOrder::Two),
            other => Err(Error::Parameter(format!("m must be 1 or 2, got {other}"))),
        }
    }

    pub fn m(self) -> u8 {
        match self {
            PenaltyOrder::One => 1,
            PenaltyOrder::Two => 2,
        }
    }
}

/// Order of the coefficient differences in the wiggliness penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Difference {
    /// Penalizes slope; constants are unpenalized.
    First,
    /// Penalizes curvature; affine functions are unpenalized.
    #[default]
    Second,
}

impl Difference {
    pub fn order(self) -> usize {
        match self {
            Difference::First => 1,
            Difference::Second => 2,
        }
    }

    pub fn from_order(order: u8) -> Result<Self> {
        match order {
            1 => Ok(Difference::First),
            2 => Ok(Difference::Second),
            other => Err(Error::Parameter(format!(
                "difference order must be 1 or 2, got {other}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum KnotRule {
    /// `k - 4` interior knots equally spaced strictly inside the domain,
    /// extended by three equally spaced knots beyond each end.
    #[default]
    EquallySpaced,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BasisSpec {
    pub k: usize,
    pub m: PenaltyOrder,
    pub difference: Difference,
    /// Closed interval the basis is built over; `None` uses `[min(x), max(x)]`.
    pub domain: Option<(f64, f64)>,
    pub knot_rule: KnotRule,
}

impl BasisSpec {
    pub fn new(k: usize, m: PenaltyOrder) -> Self {
        BasisSpec {
            k,
            m,
            difference: Difference::Second,
            domain: None,
            knot_rule: KnotRule::EquallySpaced,
        }
    }

    pub fn with_difference(mut self, difference: Difference) -> Self {
        self.difference = difference;
        self
    }

    pub fn with_domain(mut self, lo: f64, hi: f64) -> Self {
        self.domain = Some((lo, hi));
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 4 {
            return Err(Error::Parameter(format!(
                "basis dimension k must be at least 4, got {}",
                self.k
            )));
        }
        if let Some((lo, hi)) = self.domain {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::Parameter(format!(
                    "basis domain must satisfy lo < hi, got [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PenaltyRole {
    /// Wiggliness penalty on coefficient differences.
    Curvature,
    NullSpace,
    /// Identity penalty on the per-level intercepts of a factor smooth.
    Intercept,
}

#[derive(Debug, Clone)]
pub struct Penalty {
    pub role: PenaltyRole,
    pub matrix: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct BasisBlock {
    /// `n x p` basis evaluated at the data.
    pub b: DMatrix<f64>,
    pub penalties: Vec<Penalty>,
    pub centered: bool,
    pub spec: BasisSpec,
    /// Domain actually used for knot placement.
    pub domain: (f64, f64),
    /// Reparameterization from the raw B-spline coefficients (`k x p`).
    pub transform: DMatrix<f64>,
    pub rank_warning: Option<String>,
}

impl BasisBlock {
    pub fn ncols(&self) -> usize {
        self.b.ncols()
    }

    pub fn nrows(&self) -> usize {
        self.b.nrows()
    }

    /// Sum of all penalty matrices (unit smoothing parameters).
    pub fn total_penalty(&self) -> DMatrix<f64> {
        let p = self.ncols();
        self.penalties
            .iter()
            .fold(DMatrix::zeros(p, p), |acc, s| acc + &s.matrix)
    }
}

/// Knot vector for a cubic basis of dimension `k` over `[lo, hi]`.
pub(crate) fn knots(k: usize, lo: f64, hi: f64) -> Vec<f64> {
    let h = (hi - lo) / (k - 3) as f64;
    (0..k + 4).map(|j| lo + (j as f64 - 3.0) * h).collect()
}

/// The four nonzero cubic B-spline values at `x` and the index of the first.
fn nonzero_basis(knots: &[f64], k: usize, x: f64) -> (usize, [f64; 4]) {
    // Spans `[t_s, t_{s+1})` for s in 3..=k-1 tile the domain; the right end
    // of the domain is evaluated on the last span.
    let mut s = 3;
    while s < k - 1 && x >= knots[s + 1] {
        s += 1;
    }
    let mut values = [0.0; 4];
    let mut left = [0.0; 4];
    let mut right = [0.0; 4];
    values[0] = 1.0;
    for j in 1..4 {
        left[j] = x - knots[s + 1 - j];
        right[j] = knots[s + j] - x;
        let mut saved = 0.0;
        for r in 0..j {
            let temp = values[r] / (right[r + 1] + left[j - r]);
            values[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        values[j] = saved;
    }
    (s - 3, values)
}

/// Difference penalty `D'D` on `k` coefficients.
pub(crate) fn difference_penalty(k: usize, difference: Difference) -> DMatrix<f64> {
    let stencil: &[f64] = match difference {
        Difference::First => &[-1.0, 1.0],
        Difference::Second => &[1.0, -2.0, 1.0],
    };
    let rows = k + 1 - stencil.len();
    let mut d = DMatrix::zeros(rows, k);
    for i in 0..rows {
        for (j, w) in stencil.iter().enumerate() {
            d[(i, i + j)] = *w;
        }
    }
    d.transpose() * d
}

/// Orthonormal basis of the null space of a difference penalty: sampled
/// polynomials of degree below the difference order.
fn difference_null_space(k: usize, difference: Difference) -> DMatrix<f64> {
    let mut u = DMatrix::zeros(k, difference.order());
    let c = 1.0 / (k as f64).sqrt();
    for j in 0..k {
        u[(j, 0)] = c;
    }
    if difference == Difference::Second {
        let mid = (k as f64 - 1.0) / 2.0;
        let norm = (0..k).map(|j| (j as f64 - mid).powi(2)).sum::<f64>().sqrt();
        for j in 0..k {
            u[(j, 1)] = (j as f64 - mid) / norm;
        }
    }
    u
}

/// Evaluate the basis and its penalties at `x`.
pub fn build_basis(x: &[f64], spec: &BasisSpec) -> Result<BasisBlock> {
    spec.validate()?;
    if x.len() < spec.k {
        return Err(Error::InsufficientData(format!(
            "{} observations for a basis of dimension {}",
            x.len(),
            spec.k
        )));
    }
    let (lo, hi) = match spec.domain {
        Some(d) => d,
        None => {
            let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !(lo < hi) {
                return Err(Error::Parameter(
                    "covariate is constant; cannot infer a basis domain".into(),
                ));
            }
            (lo, hi)
        }
    };
    if let Some((index, &value)) = x
        .iter()
        .enumerate()
        .find(|(_, v)| !(**v >= lo && **v <= hi))
    {
        return Err(Error::Domain {
            index,
            value,
            lo,
            hi,
        });
    }

    let k = spec.k;
    let t = knots(k, lo, hi);
    let mut b = DMatrix::zeros(x.len(), k);
    for (i, &xi) in x.iter().enumerate() {
        let (first, values) = nonzero_basis(&t, k, xi);
        for (j, v) in values.iter().enumerate() {
            b[(i, first + j)] = *v;
        }
    }

    let mut penalties = vec![Penalty {
        role: PenaltyRole::Curvature,
        matrix: difference_penalty(k, spec.difference),
    }];
    if spec.m == PenaltyOrder::One {
        let u = difference_null_space(k, spec.difference);
        penalties.push(Penalty {
            role: PenaltyRole::NullSpace,
            matrix: &u * u.transpose(),
        });
    }

    Ok(BasisBlock {
        b,
        penalties,
        centered: false,
        spec: spec.clone(),
        domain: (lo, hi),
        transform: DMatrix::identity(k, k),
        rank_warning: None,
    })
}

/// Householder complement: a `p x (p-1)` matrix with orthonormal columns
/// spanning the orthogonal complement of `c`.
fn orthogonal_complement(c: &DVector<f64>) -> DMatrix<f64> {
    let p = c.len();
    let norm = c.norm();
    let mut v = c.clone();
    let alpha = if c[0] >= 0.0 { -norm } else { norm };
    v[0] -= alpha;
    let vnorm2 = v.norm_squared();
    let mut h = DMatrix::identity(p, p);
    if vnorm2 > 0.0 {
        h -= (&v * v.transpose()) * (2.0 / vnorm2);
    }
    h.columns(1, p - 1).into_owned()
}

/// Reparameterize the block so every column is orthogonal to the constant
/// vector. One column is lost; penalties are transformed congruently.
pub fn absorb_intercept(block: &BasisBlock) -> Result<BasisBlock> {
    if block.centered {
        return Err(Error::Contract("basis block is already centered".into()));
    }
    let p = block.ncols();
    if p < 2 {
        return Err(Error::Contract(
            "cannot absorb an intercept into a single-column basis".into(),
        ));
    }
    let col_sums = DVector::from_iterator(p, block.b.column_iter().map(|c| c.sum()));
    let mut rank_warning = None;
    let t = if col_sums.norm() == 0.0 {
        rank_warning = Some("basis already orthogonal to the constant vector".to_string());
        DMatrix::identity(p, p).columns(1, p - 1).into_owned()
    } else {
        orthogonal_complement(&col_sums)
    };
    let b = &block.b * &t;
    let penalties = block
        .penalties
        .iter()
        .map(|s| Penalty {
            role: s.role,
            matrix: symmetrize(&(t.transpose() * &s.matrix * &t)),
        })
        .collect();

    let gram = b.transpose() * &b;
    let eig = gram.symmetric_eigenvalues();
    let max = eig.iter().copied().fold(0.0, f64::max);
    let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
    if max > 0.0 && min < 1e-12 * max {
        let msg = format!(
            "centered basis is numerically rank deficient (eigenvalue ratio {:.2e})",
            min / max
        );
        rank_warning = Some(match rank_warning {
            Some(prev) => format!("{prev}; {msg}"),
            None => msg,
        });
    }

    Ok(BasisBlock {
        b,
        penalties,
        centered: true,
        spec: block.spec.clone(),
        domain: block.domain,
        transform: &block.transform * t,
        rank_warning,
    })
}

/// Orthogonal reparameterization that confines the null-space penalty to the
/// leading coordinates. A large null-space smoothing parameter then only
/// scales a few diagonal entries of the penalized cross-product instead of
/// every entry, which keeps its factorization accurate. The model itself is
/// unchanged.
pub fn isolate_null_space(block: &BasisBlock) -> BasisBlock {
    let Some(null) = block
        .penalties
        .iter()
        .find(|s| s.role == PenaltyRole::NullSpace)
    else {
        return block.clone();
    };
    let p = block.ncols();
    let eig = symmetrize(&null.matrix).symmetric_eigen();
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues.amax();
    let rank = order
        .iter()
        .filter(|&&i| eig.eigenvalues[i] > 1e-10 * top)
        .count();
    let q = DMatrix::from_fn(p, p, |r, c| eig.eigenvectors[(r, order[c])]);
    let penalties = block
        .penalties
        .iter()
        .map(|s| {
            let mut m = symmetrize(&(q.transpose() * &s.matrix * &q));
            if s.role == PenaltyRole::NullSpace {
                for r in 0..p {
                    for c in 0..p {
                        if r >= rank || c >= rank {
                            m[(r, c)] = 0.0;
                        }
                    }
                }
            }
            Penalty {
                role: s.role,
                matrix: m,
            }
        })
        .collect();
    BasisBlock {
        b: &block.b * &q,
        penalties,
        centered: block.centered,
        spec: block.spec.clone(),
        domain: block.domain,
        transform: &block.transform * &q,
        rank_warning: block.rank_warning.clone(),
    }
}

pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SmoothMode {
    Population,
    FactorSmooth,
    BySmooth,
}

/// How a per-level penalty template maps onto smoothing parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LambdaLink {
    /// One smoothing parameter (index into `lambda_groups`) for all levels.
    Shared(usize),
    /// Level `l` uses `lambda_groups[first + l]`.
    PerLevel { first: usize },
}

impl LambdaLink {
    pub fn group_for_level(self, level: usize) -> usize {
        match self {
            LambdaLink::Shared(g) => g,
            LambdaLink::PerLevel { first } => first + level,
        }
    }
}

/// Penalty on one level's coefficients, repeated for every level.
#[derive(Debug, Clone)]
pub struct GroupedPenalty {
    pub role: PenaltyRole,
    pub matrix: DMatrix<f64>,
    pub link: LambdaLink,
}

#[derive(Debug, Clone)]
pub struct LambdaGroup {
    pub name: String,
    pub role: PenaltyRole,
}

/// A smooth replicated per level of a grouping factor. Only the
/// observations of a level load on that level's columns.
#[derive(Debug, Clone)]
pub struct GroupedSmooth {
    pub mode: SmoothMode,
    pub n_levels: usize,
    pub level_of_row: Vec<usize>,
    pub block: BasisBlock,
    /// Columns per level: the basis columns, plus one intercept column for
    /// factor smooths.
    pub per_level_cols: usize,
    pub penalties: Vec<GroupedPenalty>,
    pub lambda_groups: Vec<LambdaGroup>,
}

impl GroupedSmooth {
    pub fn has_intercepts(&self) -> bool {
        self.mode == SmoothMode::FactorSmooth
    }

    /// Row `i` of the level-local design (`per_level_cols` values).
    pub fn level_row(&self, i: usize) -> Vec<f64> {
        let mut row: Vec<f64> = self.block.b.row(i).iter().copied().collect();
        if self.has_intercepts() {
            row.push(1.0);
        }
        row
    }

    /// Dense `n x (L * per_level_cols)` design matrix.
    pub fn design_matrix(&self) -> DMatrix<f64> {
        let n = self.level_of_row.len();
        let q = self.per_level_cols;
        let mut z = DMatrix::zeros(n, self.n_levels * q);
        for i in 0..n {
            let off = self.level_of_row[i] * q;
            for (j, v) in self.level_row(i).into_iter().enumerate() {
                z[(i, off + j)] = v;
            }
        }
        z
    }

    /// Dense block-diagonal penalty for the given smoothing parameters.
    pub fn penalty_matrix(&self, lambdas: &[f64]) -> DMatrix<f64> {
        let q = self.per_level_cols;
        let mut s = DMatrix::zeros(self.n_levels * q, self.n_levels * q);
        for level in 0..self.n_levels {
            let off = level * q;
            for pen in &self.penalties {
                let lam = lambdas[pen.link.group_for_level(level)];
                let mut view = s.view_mut((off, off), (q, q));
                view += &pen.matrix * lam;
            }
        }
        s
    }
}

/// Expand a centered basis into per-level blocks.
///
/// Factor smooths get one shared smoothing parameter per basis penalty and an
/// extra identity-penalized intercept column per level. By-smooths do not
/// carry intercepts; `link` decides whether their levels share parameters.
pub fn expand_grouped(
    block: &BasisBlock,
    level_of_row: &[usize],
    n_levels: usize,
    mode: SmoothMode,
    link: bool,
) -> Result<GroupedSmooth> {
    if !block.centered {
        return Err(Error::Contract(
            "grouped smooths require an intercept-orthogonal basis; call absorb_intercept first"
                .into(),
        ));
    }
    expand_grouped_unchecked(block, level_of_row, n_levels, mode, link)
}

/// Same as [`expand_grouped`] but accepts an uncentered block. This reproduces
/// the factor-smooth construction whose intercepts are not orthogonal to the
/// smooth part, and is used only to demonstrate that defect.
pub fn expand_grouped_unchecked(
    block: &BasisBlock,
    level_of_row: &[usize],
    n_levels: usize,
    mode: SmoothMode,
    link: bool,
) -> Result<GroupedSmooth> {
    if level_of_row.len() != block.nrows() {
        return Err(Error::Contract(format!(
            "grouping has {} rows but the basis has {}",
            level_of_row.len(),
            block.nrows()
        )));
    }
    if n_levels == 0 {
        return Err(Error::Contract("grouping factor has no levels".into()));
    }
    if let Some(&bad) = level_of_row.iter().find(|&&l| l >= n_levels) {
        return Err(Error::Contract(format!(
            "level index {bad} out of range for {n_levels} levels"
        )));
    }
    if mode == SmoothMode::Population {
        return Err(Error::Contract(
            "population smooths are not expanded by level".into(),
        ));
    }

    let p = block.ncols();
    let factor = mode == SmoothMode::FactorSmooth;
    let q = if factor { p + 1 } else { p };
    let shared = factor || link;

    let mut penalties = Vec::new();
    let mut lambda_groups = Vec::new();
    for pen in &block.penalties {
        let mut m = DMatrix::zeros(q, q);
        m.view_mut((0, 0), (p, p)).copy_from(&pen.matrix);
        let label = role_label(pen.role);
        let link = if shared {
            lambda_groups.push(LambdaGroup {
                name: label.to_string(),
                role: pen.role,
            });
            LambdaLink::Shared(lambda_groups.len() - 1)
        } else {
            let first = lambda_groups.len();
            for level in 0..n_levels {
                lambda_groups.push(LambdaGroup {
                    name: format!("{label}[{level}]"),
                    role: pen.role,
                });
            }
            LambdaLink::PerLevel { first }
        };
        penalties.push(GroupedPenalty {
            role: pen.role,
            matrix: m,
            link,
        });
    }
    if factor {
        let mut m = DMatrix::zeros(q, q);
        m[(p, p)] = 1.0;
        lambda_groups.push(LambdaGroup {
            name: role_label(PenaltyRole::Intercept).to_string(),
            role: PenaltyRole::Intercept,
        });
        penalties.push(GroupedPenalty {
            role: PenaltyRole::Intercept,
            matrix: m,
            link: LambdaLink::Shared(lambda_groups.len() - 1),
        });
    }

    Ok(GroupedSmooth {
        mode,
        n_levels,
        level_of_row: level_of_row.to_vec(),
        block: block.clone(),
        per_level_cols: q,
        penalties,
        lambda_groups,
    })
}

fn role_label(role: PenaltyRole) -> &'static str {
    match role {
        PenaltyRole::Curvature => "curvature",
        PenaltyRole::NullSpace => "null space",
        PenaltyRole::Intercept => "intercept",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn grid(n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect()
    }

    fn lstsq_fit(b: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
        let btb = b.transpose() * b;
        let bty = b.transpose() * y;
        let coef = btb.cholesky().unwrap().solve(&bty);
        b * coef
    }

    #[test]
    fn dimensions_and_penalty_count() {
        let x = grid(100, 0.0, 2.0 * PI);
        let blk = build_basis(&x, &BasisSpec::new(20, PenaltyOrder::One)).unwrap();
        assert_eq!(blk.b.shape(), (100, 20));
        assert_eq!(blk.penalties.len(), 2);
        assert!(!blk.centered);
        let blk2 = build_basis(&x, &BasisSpec::new(20, PenaltyOrder::Two)).unwrap();
        assert_eq!(blk2.penalties.len(), 1);
    }

    #[test]
    fn partition_of_unity_on_domain() {
        let x = grid(57, -1.0, 3.0);
        let blk = build_basis(&x, &BasisSpec::new(9, PenaltyOrder::Two)).unwrap();
        for row in blk.b.row_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|v| *v >= -1e-15));
        }
    }

    #[test]
    fn curvature_penalty_kills_affine_coefficients() {
        let k = 20;
        let s = difference_penalty(k, Difference::Second);
        let a = DVector::from_fn(k, |j, _| 2.5 - 0.75 * j as f64);
        assert!((&s * a).amax() < 1e-10);
    }

    #[test]
    fn first_difference_penalty_kills_only_constants() {
        let k = 12;
        let s = difference_penalty(k, Difference::First);
        assert!((&s * DVector::from_element(k, 3.0)).amax() < 1e-12);
        let a = DVector::from_fn(k, |j, _| j as f64);
        assert!((&s * a).amax() > 0.5);
        let raw = build_basis(
            &grid(60, 0.0, 1.0),
            &BasisSpec::new(k, PenaltyOrder::One).with_difference(Difference::First),
        )
        .unwrap();
        assert_eq!(raw.penalties.len(), 2);
        assert!(raw.total_penalty().symmetric_eigen().eigenvalues.min() > 1e-10);
        assert!(Difference::from_order(3).is_err());
    }

    #[test]
    fn null_space_isolation_is_an_orthogonal_rotation() {
        let raw = build_basis(&grid(80, 0.0, 1.0), &BasisSpec::new(10, PenaltyOrder::One)).unwrap();
        let rot = isolate_null_space(&raw);
        let q = &rot.transform;
        let p = raw.ncols();
        assert!((q.transpose() * q - DMatrix::identity(p, p)).amax() < 1e-12);
        assert!((&raw.b * q - &rot.b).amax() < 1e-12);
        for (a, b) in raw.penalties.iter().zip(&rot.penalties) {
            let norm = a.matrix.amax();
            assert!((q.transpose() * &a.matrix * q - &b.matrix).amax() < 1e-10 * norm);
        }
        let null = &rot.penalties[1].matrix;
        assert_eq!(rot.penalties[1].role, PenaltyRole::NullSpace);
        for r in 0..p {
            for c in 0..p {
                if r >= 2 || c >= 2 {
                    assert_eq!(null[(r, c)], 0.0);
                }
            }
        }
        assert!(null[(0, 0)] > 0.5 && null[(1, 1)] > 0.5);
    }

    #[test]
    fn translation_equivariance() {
        let x = grid(100, 0.0, 2.0 * PI);
        let c = 3.7;
        let xs: Vec<f64> = x.iter().map(|v| v + c).collect();
        let a = build_basis(&x, &BasisSpec::new(20, PenaltyOrder::One)).unwrap();
        let b = build_basis(&xs, &BasisSpec::new(20, PenaltyOrder::One)).unwrap();
        assert!((&a.b - &b.b).amax() < 1e-10);
    }

    #[test]
    fn reproduces_quadratics() {
        let x = grid(100, 0.0, 2.0 * PI);
        let blk = build_basis(&x, &BasisSpec::new(20, PenaltyOrder::One)).unwrap();
        let y = DVector::from_iterator(100, x.iter().map(|v| v * v));
        let fit = lstsq_fit(&blk.b, &y);
        let scale = y.amax();
        assert!((fit - &y).amax() <= 1e-6 * scale);
    }

    #[test]
    fn domain_and_size_errors() {
        let x = grid(30, 0.0, 1.0);
        let spec = BasisSpec::new(10, PenaltyOrder::Two).with_domain(0.0, 0.5);
        assert!(matches!(build_basis(&x, &spec), Err(Error::Domain { .. })));
        let short = grid(5, 0.0, 1.0);
        assert!(matches!(
            build_basis(&short, &BasisSpec::new(10, PenaltyOrder::Two)),
            Err(Error::InsufficientData(_))
        ));
        assert!(build_basis(&x, &BasisSpec::new(3, PenaltyOrder::Two)).is_err());
    }

    #[test]
    fn centering_removes_constant() {
        let x = grid(100, 0.0, 2.0 * PI);
        let blk = build_basis(&x, &BasisSpec::new(20, PenaltyOrder::One)).unwrap();
        let c = absorb_intercept(&blk).unwrap();
        assert_eq!(c.ncols(), 19);
        assert!(c.centered);
        let tol = 1e-8 * 100.0 * blk.b.amax();
        for col in c.b.column_iter() {
            assert!(col.sum().abs() <= tol);
        }
        assert!(absorb_intercept(&c).is_err());
    }

    #[test]
    fn centering_constant_first_column_keeps_full_rank() {
        let n = 40;
        let mut b = DMatrix::zeros(n, 4);
        for i in 0..n {
            let t = i as f64 / n as f64;
            b[(i, 0)] = 1.0;
            b[(i, 1)] = t;
            b[(i, 2)] = t * t;
            b[(i, 3)] = (3.0 * t).sin();
        }
        let blk = BasisBlock {
            b,
            penalties: vec![Penalty {
                role: PenaltyRole::Curvature,
                matrix: DMatrix::identity(4, 4),
            }],
            centered: false,
            spec: BasisSpec::new(4, PenaltyOrder::Two),
            domain: (0.0, 1.0),
            transform: DMatrix::identity(4, 4),
            rank_warning: None,
        };
        let c = absorb_intercept(&blk).unwrap();
        assert_eq!(c.ncols(), 3);
        let sv = c.b.clone().svd(false, false).singular_values;
        assert!(sv.min() > 1e-8 * sv.max());
        assert!(c.rank_warning.is_none());
    }

    #[test]
    fn centering_preserves_span_with_constant() {
        let x = grid(60, 0.0, 1.0);
        let blk = build_basis(&x, &BasisSpec::new(8, PenaltyOrder::Two)).unwrap();
        let c = absorb_intercept(&blk).unwrap();
        let n = x.len();
        let mut aug = DMatrix::zeros(n, c.ncols() + 1);
        aug.column_mut(0).fill(1.0);
        aug.view_mut((0, 1), (n, c.ncols())).copy_from(&c.b);
        // every old column is reproduced by [1, B']
        for col in blk.b.column_iter() {
            let y = col.into_owned();
            assert!((lstsq_fit(&aug, &y) - &y).amax() < 1e-10);
        }
    }

    #[test]
    fn m1_total_penalty_positive_definite_after_centering() {
        let x = grid(100, 0.0, 2.0 * PI);
        let blk = build_basis(&x, &BasisSpec::new(20, PenaltyOrder::One)).unwrap();
        for b in [blk.clone(), absorb_intercept(&blk).unwrap()] {
            let eig = b.total_penalty().symmetric_eigenvalues();
            assert!(eig.min() > 1e-10, "min eigenvalue {}", eig.min());
        }
    }

    #[test]
    fn grouped_column_counts() {
        let x = grid(12, 0.0, 1.0);
        let spec = BasisSpec::new(4, PenaltyOrder::One);
        let c = absorb_intercept(&build_basis(&x, &spec).unwrap()).unwrap();
        assert_eq!(c.ncols(), 3);
        let levels: Vec<usize> = (0..12).map(|i| i % 2).collect();
        let by = expand_grouped(&c, &levels, 2, SmoothMode::BySmooth, true).unwrap();
        assert_eq!(by.design_matrix().shape(), (12, 6));
        let fs = expand_grouped(&c, &levels, 2, SmoothMode::FactorSmooth, true).unwrap();
        assert_eq!(fs.design_matrix().shape(), (12, 8));
        assert_eq!(fs.lambda_groups.len(), 3);
        let z = by.design_matrix();
        for i in 0..12 {
            let other = 1 - levels[i];
            for j in 0..3 {
                assert_eq!(z[(i, other * 3 + j)], 0.0);
            }
        }
        let unlinked = expand_grouped(&c, &levels, 2, SmoothMode::BySmooth, false).unwrap();
        assert_eq!(unlinked.lambda_groups.len(), 4);
    }

    #[test]
    fn single_level_factor_smooth() {
        let x = grid(30, 0.0, 1.0);
        let c = absorb_intercept(&build_basis(&x, &BasisSpec::new(6, PenaltyOrder::One)).unwrap())
            .unwrap();
        let fs = expand_grouped(&c, &vec![0; 30], 1, SmoothMode::FactorSmooth, true).unwrap();
        let z = fs.design_matrix();
        assert_eq!(z.ncols(), c.ncols() + 1);
        assert!((z.columns(0, c.ncols()) - &c.b).amax() == 0.0);
        assert!(z.column(c.ncols()).iter().all(|v| *v == 1.0));
    }

    #[test]
    fn uncentered_expansion_is_refused() {
        let x = grid(20, 0.0, 1.0);
        let blk = build_basis(&x, &BasisSpec::new(5, PenaltyOrder::One)).unwrap();
        let levels = vec![0; 20];
        assert!(matches!(
            expand_grouped(&blk, &levels, 1, SmoothMode::FactorSmooth, true),
            Err(Error::Contract(_))
        ));
        assert!(expand_grouped_unchecked(&blk, &levels, 1, SmoothMode::FactorSmooth, true).is_ok());
    }
}
