//! Declarative model description and its assembly into a [`PenalizedSystem`].

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::basis::{
    absorb_intercept, build_basis, expand_grouped, expand_grouped_unchecked, isolate_null_space,
    BasisSpec, GroupedSmooth, LambdaLink, PenaltyRole, SmoothMode,
};
use crate::data::{Between, LongDataset, Row, Within};
use crate::error::{Error, Result};
use crate::linalg::{pivoted_cholesky_rank, range_basis};
use crate::model::system::{
    BlockStructure, LevelStructure, Location, ParamKind, ParamLink, ParamSpec, PenalizedSystem,
    PenaltyBlock, ScaledComponent, CHOL_OFF_BOUNDS, LOG_CHOL_BOUNDS, LOG_LAMBDA_BOUNDS,
};

/// Fixed effects under treatment coding with reference levels A and X.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FixedTerms {
    pub intercept: bool,
    pub within: bool,
    pub between: bool,
    pub interaction: bool,
}

impl FixedTerms {
    pub const fn main_effects() -> Self {
        FixedTerms {
            intercept: true,
            within: true,
            between: true,
            interaction: false,
        }
    }

    pub const fn with_interaction() -> Self {
        FixedTerms {
            interaction: true,
            ..Self::main_effects()
        }
    }

    pub const fn intercept_only() -> Self {
        FixedTerms {
            intercept: true,
            within: false,
            between: false,
            interaction: false,
        }
    }
}

pub const NAME_INTERCEPT: &str = "(Intercept)";
pub const NAME_WITHIN: &str = "Factor_WithinB";
pub const NAME_BETWEEN: &str = "Factor_BetweenY";
pub const NAME_INTERACTION: &str = "Factor_WithinB:Factor_BetweenY";

/// A deterministic per-row covariate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CovariateExpr {
    Time,
    SinTime,
    /// Indicator of within-subject level B.
    WithinIsB,
    /// `time - c`.
    TimeOffset(f64),
}

impl CovariateExpr {
    pub fn eval(&self, row: &Row) -> f64 {
        match *self {
            CovariateExpr::Time => row.time,
            CovariateExpr::SinTime => row.time.sin(),
            CovariateExpr::WithinIsB => f64::from(row.within == Within::B),
            CovariateExpr::TimeOffset(c) => row.time - c,
        }
    }

    pub fn name(&self) -> String {
        match *self {
            CovariateExpr::Time => "Time".into(),
            CovariateExpr::SinTime => "sin(Time)".into(),
            CovariateExpr::WithinIsB => NAME_WITHIN.into(),
            CovariateExpr::TimeOffset(c) => format!("(Time - {c:.4})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GroupFactor {
    Subject,
    Within,
    Between,
}

impl GroupFactor {
    pub fn name(self) -> &'static str {
        match self {
            GroupFactor::Subject => "Subject",
            GroupFactor::Within => "Factor_Within",
            GroupFactor::Between => "Factor_Between",
        }
    }

    fn code(self, row: &Row) -> u32 {
        match self {
            GroupFactor::Subject => row.subject,
            GroupFactor::Within => u32::from(row.within == Within::B),
            GroupFactor::Between => u32::from(row.between == Between::Y),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RandomForm {
    Intercept,
    Slope(CovariateExpr),
    CorrelatedInterceptSlope(CovariateExpr),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RandomTermSpec {
    pub group: GroupFactor,
    pub form: RandomForm,
}

impl RandomTermSpec {
    pub fn intercept(group: GroupFactor) -> Self {
        RandomTermSpec {
            group,
            form: RandomForm::Intercept,
        }
    }

    pub fn slope(group: GroupFactor, expr: CovariateExpr) -> Self {
        RandomTermSpec {
            group,
            form: RandomForm::Slope(expr),
        }
    }

    pub fn correlated(group: GroupFactor, expr: CovariateExpr) -> Self {
        RandomTermSpec {
            group,
            form: RandomForm::CorrelatedInterceptSlope(expr),
        }
    }

    fn dim(&self) -> usize {
        match self.form {
            RandomForm::CorrelatedInterceptSlope(_) => 2,
            _ => 1,
        }
    }

    fn values(&self, row: &Row) -> Vec<f64> {
        match self.form {
            RandomForm::Intercept => vec![1.0],
            RandomForm::Slope(e) => vec![e.eval(row)],
            RandomForm::CorrelatedInterceptSlope(e) => vec![1.0, e.eval(row)],
        }
    }

    pub fn name(&self) -> String {
        let g = self.group.name();
        match self.form {
            RandomForm::Intercept => format!("(1|{g})"),
            RandomForm::Slope(e) => format!("(0 + {}|{g})", e.name()),
            RandomForm::CorrelatedInterceptSlope(e) => format!("(1 + {}|{g})", e.name()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothTermSpec {
    pub covariate: CovariateExpr,
    pub mode: SmoothMode,
    pub group: Option<GroupFactor>,
    pub basis: BasisSpec,
    /// Forces one smoothing parameter per penalty across all levels.
    /// Factor smooths behave as if this were always set.
    pub lambda_link_id: Option<u32>,
}

impl SmoothTermSpec {
    pub fn population(basis: BasisSpec) -> Self {
        SmoothTermSpec {
            covariate: CovariateExpr::Time,
            mode: SmoothMode::Population,
            group: None,
            basis,
            lambda_link_id: None,
        }
    }

    pub fn factor_smooth(group: GroupFactor, basis: BasisSpec) -> Self {
        SmoothTermSpec {
            covariate: CovariateExpr::Time,
            mode: SmoothMode::FactorSmooth,
            group: Some(group),
            basis,
            lambda_link_id: None,
        }
    }

    pub fn by_smooth(group: GroupFactor, basis: BasisSpec, link: Option<u32>) -> Self {
        SmoothTermSpec {
            covariate: CovariateExpr::Time,
            mode: SmoothMode::BySmooth,
            group: Some(group),
            basis,
            lambda_link_id: link,
        }
    }

    pub fn name(&self) -> String {
        let c = self.covariate.name();
        match (self.mode, self.group) {
            (SmoothMode::FactorSmooth, Some(g)) => format!("s({c},{})", g.name()),
            (SmoothMode::BySmooth, Some(g)) => format!("s({c}):{}", g.name()),
            _ => format!("s({c})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub fixed: FixedTerms,
    pub random: Vec<RandomTermSpec>,
    pub smooths: Vec<SmoothTermSpec>,
}

/// Assembly switches that are not part of an ordinary model description.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AssemblyOptions {
    /// Build factor smooths from the raw basis, so that their intercepts are
    /// not orthogonal to the smooth part. Reproduces a known defect.
    pub legacy_uncentered_factor_smooth: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TermKind {
    Random(RandomForm),
    Smooth(SmoothMode),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placement {
    /// `cols` dense columns starting at `offset`.
    Dense { offset: usize, cols: usize },
    /// `cols` columns per level starting at `offset` within the level block.
    PerLevel { offset: usize, cols: usize },
}

/// Role of a variance component in reports.
#[derive(Debug, Clone, PartialEq)]
pub enum VarRole {
    Intercept,
    Slope(String),
    SmoothCurvature,
    SmoothNullSpace,
    /// Entry of a relative covariance factor.
    Cholesky,
}

impl VarRole {
    fn from_penalty(role: PenaltyRole) -> Self {
        match role {
            PenaltyRole::Curvature => VarRole::SmoothCurvature,
            PenaltyRole::NullSpace => VarRole::SmoothNullSpace,
            PenaltyRole::Intercept => VarRole::Intercept,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TermInfo {
    pub name: String,
    pub kind: TermKind,
    pub group: Option<GroupFactor>,
    pub placement: Placement,
    /// Levels spanned by the term's columns (1 for population smooths).
    pub n_levels: usize,
    pub level_ids: Vec<u32>,
    pub blocks: Vec<usize>,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let mut seen = Vec::new();
        for s in &self.smooths {
            s.basis.validate()?;
            match (s.mode, s.group) {
                (SmoothMode::Population, Some(_)) => {
                    return Err(Error::Specification(
                        "population smooths take no grouping factor".into(),
                    ))
                }
                (SmoothMode::FactorSmooth | SmoothMode::BySmooth, None) => {
                    return Err(Error::Specification(format!(
                        "{} requires a grouping factor",
                        s.name()
                    )))
                }
                _ => {}
            }
            let key = (format!("{:?}", s.covariate), s.group, s.mode);
            if seen.contains(&key) {
                return Err(Error::Specification(format!(
                    "duplicate smooth term {}",
                    s.name()
                )));
            }
            seen.push(key);
        }
        Ok(())
    }
}

struct LevelIndex {
    ids: Vec<u32>,
    of_row: Vec<usize>,
}

fn level_index(data: &LongDataset, factor: GroupFactor) -> LevelIndex {
    let mut map = BTreeMap::new();
    for r in &data.rows {
        map.entry(factor.code(r)).or_insert(0usize);
    }
    for (i, v) in map.values_mut().enumerate() {
        *v = i;
    }
    let of_row = data.rows.iter().map(|r| map[&factor.code(r)]).collect();
    LevelIndex {
        ids: map.keys().copied().collect(),
        of_row,
    }
}

/// One grouped column group in the level layout before placement.
enum GroupedPart {
    Random(RandomTermSpec),
    Smooth(GroupedSmooth),
}

impl GroupedPart {
    fn dim(&self) -> usize {
        match self {
            GroupedPart::Random(r) => r.dim(),
            GroupedPart::Smooth(g) => g.per_level_cols,
        }
    }

    fn values(&self, data: &LongDataset, row: usize) -> Vec<f64> {
        match self {
            GroupedPart::Random(r) => r.values(&data.rows[row]),
            GroupedPart::Smooth(g) => g.level_row(row),
        }
    }
}

struct ParamBuilder {
    params: Vec<ParamSpec>,
}

impl ParamBuilder {
    fn lambda(&mut self, name: String, term: usize, role: VarRole) -> usize {
        self.params.push(ParamSpec {
            name,
            kind: ParamKind::LogLambda,
            lower: LOG_LAMBDA_BOUNDS.0,
            upper: LOG_LAMBDA_BOUNDS.1,
            term,
            role,
        });
        self.params.len() - 1
    }

    fn cholesky(&mut self, name: &str, dim: usize, term: usize) -> usize {
        let first = self.params.len();
        for (i, j) in crate::model::system::chol_param_positions(dim) {
            let (kind, (lower, upper)) = if i == j {
                (ParamKind::LogCholDiag, LOG_CHOL_BOUNDS)
            } else {
                (ParamKind::CholOffDiag, CHOL_OFF_BOUNDS)
            };
            self.params.push(ParamSpec {
                name: format!("{name} L[{i},{j}]"),
                kind,
                lower,
                upper,
                term,
                role: VarRole::Cholesky,
            });
        }
        first
    }
}

/// Penalty blocks for one column group, in level-local coordinates.
fn part_penalties(
    part: &GroupedPart,
    term: usize,
    name: &str,
    n_levels: usize,
    dense_level: Option<usize>,
    pb: &mut ParamBuilder,
    shared_params: &mut BTreeMap<usize, usize>,
) -> Vec<(BlockStructure, usize, usize)> {
    // returns (structure, offset within part, dim)
    match part {
        GroupedPart::Random(r) => match r.form {
            RandomForm::CorrelatedInterceptSlope(_) => {
                let first = *shared_params
                    .entry(0)
                    .or_insert_with(|| pb.cholesky(name, 2, term));
                vec![(BlockStructure::Unstructured { first }, 0, 2)]
            }
            form => {
                let role = match form {
                    RandomForm::Slope(e) => VarRole::Slope(e.name()),
                    _ => VarRole::Intercept,
                };
                let p = *shared_params
                    .entry(0)
                    .or_insert_with(|| pb.lambda(name.to_string(), term, role));
                vec![(
                    BlockStructure::Scaled {
                        components: vec![ScaledComponent {
                            matrix: DMatrix::identity(1, 1),
                            link: ParamLink::Shared(p),
                        }],
                        range: DMatrix::identity(1, 1),
                    },
                    0,
                    1,
                )]
            }
        },
        GroupedPart::Smooth(g) => {
            let p = g.block.ncols();
            let mut out = Vec::new();
            let mut smooth_components = Vec::new();
            for pen in g
                .penalties
                .iter()
                .filter(|p| p.role != PenaltyRole::Intercept)
            {
                let role = VarRole::from_penalty(pen.role);
                let link = match pen.link {
                    LambdaLink::Shared(gid) => {
                        let label = &g.lambda_groups[gid].name;
                        ParamLink::Shared(*shared_params.entry(gid).or_insert_with(|| {
                            pb.lambda(format!("{name} {label}"), term, role.clone())
                        }))
                    }
                    LambdaLink::PerLevel { first } => {
                        if let Some(level) = dense_level {
                            let gid = first + level;
                            let label = &g.lambda_groups[gid].name;
                            ParamLink::Shared(*shared_params.entry(gid).or_insert_with(|| {
                                pb.lambda(format!("{name} {label}"), term, role.clone())
                            }))
                        } else {
                            let base = *shared_params.entry(first).or_insert_with(|| {
                                let mut b = None;
                                for l in 0..n_levels {
                                    let label = &g.lambda_groups[first + l].name;
                                    let idx =
                                        pb.lambda(format!("{name} {label}"), term, role.clone());
                                    b.get_or_insert(idx);
                                }
                                b.unwrap()
                            });
                            ParamLink::PerLevel { first: base }
                        }
                    }
                };
                smooth_components.push(ScaledComponent {
                    matrix: pen.matrix.view((0, 0), (p, p)).into_owned(),
                    link,
                });
            }
            let total = smooth_components
                .iter()
                .fold(DMatrix::zeros(p, p), |acc, c| acc + &c.matrix);
            out.push((
                BlockStructure::Scaled {
                    components: smooth_components,
                    range: range_basis(&total),
                },
                0,
                p,
            ));
            if g.has_intercepts() {
                let gid = g
                    .penalties
                    .iter()
                    .find(|p| p.role == PenaltyRole::Intercept)
                    .map(|p| p.link.group_for_level(0))
                    .unwrap_or(0);
                let idx = *shared_params.entry(gid).or_insert_with(|| {
                    pb.lambda(format!("{name} intercept"), term, VarRole::Intercept)
                });
                out.push((
                    BlockStructure::Scaled {
                        components: vec![ScaledComponent {
                            matrix: DMatrix::identity(1, 1),
                            link: ParamLink::Shared(idx),
                        }],
                        range: DMatrix::identity(1, 1),
                    },
                    p,
                    1,
                ));
            }
            out
        }
    }
}

/// Build the penalized system for `spec` on `data`.
pub fn assemble(spec: &ModelSpec, data: &LongDataset) -> Result<PenalizedSystem> {
    assemble_with(spec, data, AssemblyOptions::default())
}

pub fn assemble_with(
    spec: &ModelSpec,
    data: &LongDataset,
    options: AssemblyOptions,
) -> Result<PenalizedSystem> {
    spec.validate()?;
    if data.is_empty() {
        return Err(Error::Data("dataset is empty".into()));
    }
    let n = data.len();
    let y = DVector::from_iterator(n, data.rows.iter().map(|r| r.response));

    // Fixed effects.
    let mut fixed_cols: Vec<(String, Vec<f64>)> = Vec::new();
    let f = spec.fixed;
    if f.intercept {
        fixed_cols.push((NAME_INTERCEPT.into(), vec![1.0; n]));
    }
    let is_b: Vec<f64> = data
        .rows
        .iter()
        .map(|r| f64::from(r.within == Within::B))
        .collect();
    let is_y: Vec<f64> = data
        .rows
        .iter()
        .map(|r| f64::from(r.between == Between::Y))
        .collect();
    if f.within {
        fixed_cols.push((NAME_WITHIN.into(), is_b.clone()));
    }
    if f.between {
        fixed_cols.push((NAME_BETWEEN.into(), is_y.clone()));
    }
    if f.interaction {
        fixed_cols.push((
            NAME_INTERACTION.into(),
            is_b.iter().zip(&is_y).map(|(a, b)| a * b).collect(),
        ));
    }
    let n_fixed = fixed_cols.len();
    if n_fixed > 0 {
        let mut x = DMatrix::zeros(n, n_fixed);
        for (j, (_, c)) in fixed_cols.iter().enumerate() {
            x.column_mut(j).copy_from_slice(c);
        }
        let (rank, aliased) = pivoted_cholesky_rank(&(x.transpose() * &x), 1e-10);
        if rank < n_fixed {
            let names: Vec<&str> = aliased.iter().map(|&j| fixed_cols[j].0.as_str()).collect();
            return Err(Error::Specification(format!(
                "fixed-effect design is rank deficient; aliased columns: {}",
                names.join(", ")
            )));
        }
    }

    // Blocking factor: Subject when any grouped term uses it, otherwise the
    // first grouping factor mentioned.
    let groups: Vec<GroupFactor> = spec
        .random
        .iter()
        .map(|r| r.group)
        .chain(spec.smooths.iter().filter_map(|s| s.group))
        .collect();
    let blocking = if groups.contains(&GroupFactor::Subject) {
        Some(GroupFactor::Subject)
    } else {
        groups.first().copied()
    };

    let mut pb = ParamBuilder { params: Vec::new() };
    let mut dense_cols: Vec<Vec<f64>> = fixed_cols.iter().map(|(_, c)| c.clone()).collect();
    let mut dense_names: Vec<String> = fixed_cols.iter().map(|(n, _)| n.clone()).collect();
    let mut blocks: Vec<PenaltyBlock> = Vec::new();
    let mut terms: Vec<TermInfo> = Vec::new();

    let block_index = blocking.map(|g| level_index(data, g));
    let mut level_parts: Vec<(usize, GroupedPart)> = Vec::new();

    // Random terms then smooths, in specification order.
    enum Pending {
        Random(RandomTermSpec),
        Smooth(SmoothTermSpec),
    }
    let pending: Vec<Pending> = spec
        .random
        .iter()
        .copied()
        .map(Pending::Random)
        .chain(spec.smooths.iter().cloned().map(Pending::Smooth))
        .collect();

    for p in pending {
        let term_id = terms.len();
        match p {
            Pending::Smooth(s) if s.mode == SmoothMode::Population => {
                let x: Vec<f64> = data.rows.iter().map(|r| s.covariate.eval(r)).collect();
                let raw = build_basis(&x, &s.basis)?;
                let blk = isolate_null_space(&if f.intercept {
                    absorb_intercept(&raw)?
                } else {
                    raw
                });
                let offset = dense_cols.len();
                let cols = blk.ncols();
                for (j, c) in blk.b.column_iter().enumerate() {
                    dense_cols.push(c.iter().copied().collect());
                    dense_names.push(format!("{}.{}", s.name(), j + 1));
                }
                let name = s.name();
                let components: Vec<ScaledComponent> = blk
                    .penalties
                    .iter()
                    .map(|pen| ScaledComponent {
                        matrix: pen.matrix.clone(),
                        link: ParamLink::Shared(pb.lambda(
                            format!("{name} {}", format!("{:?}", pen.role).to_lowercase()),
                            term_id,
                            VarRole::from_penalty(pen.role),
                        )),
                    })
                    .collect();
                let range = range_basis(&blk.total_penalty());
                blocks.push(PenaltyBlock {
                    term: term_id,
                    location: Location::Dense { offset },
                    dim: cols,
                    structure: BlockStructure::Scaled { components, range },
                    level: None,
                });
                terms.push(TermInfo {
                    name,
                    kind: TermKind::Smooth(SmoothMode::Population),
                    group: None,
                    placement: Placement::Dense { offset, cols },
                    n_levels: 1,
                    level_ids: vec![0],
                    blocks: vec![blocks.len() - 1],
                });
            }
            other => {
                let (group, name, part) = match other {
                    Pending::Random(r) => (r.group, r.name(), GroupedPart::Random(r)),
                    Pending::Smooth(s) => {
                        let group = s.group.expect("validated");
                        let x: Vec<f64> = data.rows.iter().map(|r| s.covariate.eval(r)).collect();
                        let raw = build_basis(&x, &s.basis)?;
                        let idx = level_index(data, group);
                        let link = s.mode == SmoothMode::FactorSmooth || s.lambda_link_id.is_some();
                        let g = if s.mode == SmoothMode::FactorSmooth
                            && options.legacy_uncentered_factor_smooth
                        {
                            expand_grouped_unchecked(
                                &isolate_null_space(&raw),
                                &idx.of_row,
                                idx.ids.len(),
                                s.mode,
                                link,
                            )?
                        } else {
                            let c = isolate_null_space(&absorb_intercept(&raw)?);
                            expand_grouped(&c, &idx.of_row, idx.ids.len(), s.mode, link)?
                        };
                        (group, s.name(), GroupedPart::Smooth(g))
                    }
                };
                let kind = match &part {
                    GroupedPart::Random(r) => TermKind::Random(r.form),
                    GroupedPart::Smooth(g) => TermKind::Smooth(g.mode),
                };
                if Some(group) == blocking {
                    let idx = block_index.as_ref().expect("blocking index");
                    terms.push(TermInfo {
                        name,
                        kind,
                        group: Some(group),
                        placement: Placement::PerLevel {
                            offset: 0,
                            cols: part.dim(),
                        },
                        n_levels: idx.ids.len(),
                        level_ids: idx.ids.clone(),
                        blocks: Vec::new(),
                    });
                    level_parts.push((term_id, part));
                } else {
                    // Grouped by a secondary factor: expand densely.
                    let idx = level_index(data, group);
                    let q = part.dim();
                    let nl = idx.ids.len();
                    let offset = dense_cols.len();
                    for _ in 0..nl * q {
                        dense_cols.push(vec![0.0; n]);
                    }
                    for (j, name_j) in (0..nl * q).map(|j| (j, format!("{name}.{}", j + 1))) {
                        let _ = j;
                        dense_names.push(name_j);
                    }
                    for r in 0..n {
                        let l = idx.of_row[r];
                        for (j, v) in part.values(data, r).into_iter().enumerate() {
                            dense_cols[offset + l * q + j][r] = v;
                        }
                    }
                    let mut shared = BTreeMap::new();
                    let mut ids = Vec::new();
                    for l in 0..nl {
                        for (structure, off, dim) in
                            part_penalties(&part, term_id, &name, nl, Some(l), &mut pb, &mut shared)
                        {
                            blocks.push(PenaltyBlock {
                                term: term_id,
                                location: Location::Dense {
                                    offset: offset + l * q + off,
                                },
                                dim,
                                structure,
                                level: Some(l),
                            });
                            ids.push(blocks.len() - 1);
                        }
                    }
                    terms.push(TermInfo {
                        name,
                        kind,
                        group: Some(group),
                        placement: Placement::Dense {
                            offset,
                            cols: nl * q,
                        },
                        n_levels: nl,
                        level_ids: idx.ids.clone(),
                        blocks: ids,
                    });
                }
            }
        }
    }

    // Level layout for terms grouped by the blocking factor.
    let levels = if let (Some(factor), Some(idx)) = (blocking, block_index.as_ref()) {
        if level_parts.is_empty() {
            None
        } else {
            let nl = idx.ids.len();
            let mut offset = 0;
            for (term_id, part) in &level_parts {
                let dim = part.dim();
                let mut shared = BTreeMap::new();
                let name = terms[*term_id].name.clone();
                for (structure, off, bdim) in
                    part_penalties(part, *term_id, &name, nl, None, &mut pb, &mut shared)
                {
                    blocks.push(PenaltyBlock {
                        term: *term_id,
                        location: Location::PerLevel {
                            offset: offset + off,
                        },
                        dim: bdim,
                        structure,
                        level: None,
                    });
                    terms[*term_id].blocks.push(blocks.len() - 1);
                }
                terms[*term_id].placement = Placement::PerLevel { offset, cols: dim };
                offset += dim;
            }
            let q = offset;
            let mut rows: Vec<Vec<usize>> = vec![Vec::new(); nl];
            for (r, &l) in idx.of_row.iter().enumerate() {
                rows[l].push(r);
            }
            let z = rows
                .iter()
                .map(|rs| {
                    let mut z = DMatrix::zeros(rs.len(), q);
                    for (i, &r) in rs.iter().enumerate() {
                        let mut col = 0;
                        for (_, part) in &level_parts {
                            for v in part.values(data, r) {
                                z[(i, col)] = v;
                                col += 1;
                            }
                        }
                    }
                    z
                })
                .collect();
            Some(LevelStructure {
                factor,
                level_ids: idx.ids.clone(),
                q,
                rows,
                z,
            })
        }
    } else {
        None
    };

    let d = dense_cols.len();
    let mut dense = DMatrix::zeros(n, d);
    for (j, c) in dense_cols.iter().enumerate() {
        dense.column_mut(j).copy_from_slice(c);
    }
    Ok(PenalizedSystem::new(
        y,
        dense,
        dense_names,
        n_fixed,
        levels,
        blocks,
        pb.params,
        terms,
    ))
}
