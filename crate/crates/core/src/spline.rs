//! Smoothing-spline ANOVA basis on `[0, 1]^q`, q ≤ 2.
//!
//! Each main effect `W_j` contributes the unpenalized null-space function
//! `k1(w_j)` and a block of penalized reproducing-kernel columns
//! `R(w_j, κ_l)`, one per knot `κ_l`. The interaction `W1:W2` contributes the
//! null-space function `k1(w1)k1(w2)` and one kernel block built from the
//! tensor products `linear×smooth + smooth×linear + smooth×smooth`.
//!
//! Every column integrates to zero over the unit cube, so any function in the
//! span satisfies `∫η = 0`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::SurvivalDataset;
use crate::error::{Error, Result};

/// Scaled Bernoulli polynomial `k1(t) = t − 1/2`.
pub fn k1(t: f64) -> f64 {
    t - 0.5
}

pub fn k2(t: f64) -> f64 {
    let a = k1(t);
    (a * a - 1.0 / 12.0) / 2.0
}

pub fn k4(t: f64) -> f64 {
    let a = k1(t);
    let a2 = a * a;
    (a2 * a2 - a2 / 2.0 + 7.0 / 240.0) / 24.0
}

#[inline]
fn smooth_kernel(x: f64, y: f64) -> f64 {
    k2(x) * k2(y) - k4((x - y).abs())
}

/// Reproducing kernel of the penalized cubic-spline subspace on `[0, 1]`.
pub fn cubic_kernel(x: f64, y: f64) -> Result<f64> {
    for v in [x, y] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Domain(v));
        }
    }
    Ok(smooth_kernel(x, y))
}

/// `min(ceil(10 n^{2/5}), n)`.
pub fn knot_count(n: usize) -> usize {
    let q = (10.0 * (n as f64).powf(0.4)).ceil() as usize;
    q.min(n)
}

/// Samples knot rows: a seeded uniform subset of distinct `W` rows.
///
/// Duplicate rows are collapsed and the distinct rows are ordered by value
/// before sampling, so the chosen knot values do not depend on row order.
pub fn select_knots(ds: &SurvivalDataset, seed: u64) -> Vec<usize> {
    let w = ds.w();
    let mut rows: Vec<usize> = (0..ds.n()).collect();
    let row_cmp = |a: &usize, b: &usize| {
        (0..w.ncols())
            .map(|j| w[(*a, j)].total_cmp(&w[(*b, j)]))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    };
    rows.sort_by(|a, b| row_cmp(a, b).then(a.cmp(b)));
    rows.dedup_by(|a, b| row_cmp(a, b).is_eq());

    let amount = knot_count(ds.n()).min(rows.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, rows.len(), amount).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|p| rows[p]).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Term {
    W1,
    W2,
    W1W2,
}

impl Term {
    fn label(self) -> &'static str {
        match self {
            Term::W1 => "W1",
            Term::W2 => "W2",
            Term::W1W2 => "W1:W2",
        }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// A set of active ANOVA terms.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Structure {
    terms: Vec<Term>,
}

impl Structure {
    pub fn new(mut terms: Vec<Term>) -> Result<Self> {
        terms.sort();
        terms.dedup();
        if terms.contains(&Term::W1W2) && !(terms.contains(&Term::W1) && terms.contains(&Term::W2)) {
            return Err(Error::Structure("the interaction requires both main effects".into()));
        }
        Ok(Self { terms })
    }

    pub fn constant() -> Self {
        Self { terms: vec![] }
    }

    pub fn univariate() -> Self {
        Self { terms: vec![Term::W1] }
    }

    pub fn additive() -> Self {
        Self {
            terms: vec![Term::W1, Term::W2],
        }
    }

    pub fn full() -> Self {
        Self {
            terms: vec![Term::W1, Term::W2, Term::W1W2],
        }
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn contains(&self, term: Term) -> bool {
        self.terms.contains(&term)
    }

    pub fn is_subset_of(&self, other: &Structure) -> bool {
        self.terms.iter().all(|t| other.contains(*t))
    }

    /// Number of nonparametric covariates the structure touches.
    pub fn required_q(&self) -> usize {
        if self.contains(Term::W2) || self.contains(Term::W1W2) {
            2
        } else {
            1
        }
    }
}

impl fmt::Display for Structure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return f.write_str("constant");
        }
        let labels: Vec<_> = self.terms.iter().map(|t| t.label()).collect();
        f.write_str(&labels.join("+"))
    }
}

impl FromStr for Structure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("constant") || s == "1" {
            return Ok(Self::constant());
        }
        let terms = s
            .split('+')
            .map(|t| match t.trim().to_ascii_uppercase().as_str() {
                "W1" => Ok(Term::W1),
                "W2" => Ok(Term::W2),
                "W1:W2" | "W2:W1" => Ok(Term::W1W2),
                other => Err(Error::Structure(format!("unknown term `{other}`"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Structure::new(terms)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockKind {
    Null,
    Kernel,
}

/// A contiguous range of basis columns belonging to one term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub term: Term,
    pub kind: BlockKind,
    pub start: usize,
    pub len: usize,
}

impl Block {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

#[derive(Debug, Clone)]
pub struct SplineBasis {
    structure: Structure,
    knots: DMatrix<f64>,
    knot_rows: Vec<usize>,
    blocks: Vec<Block>,
    null_dim: usize,
    dim: usize,
}

/// Basis together with its design at the data rows and its penalty matrix.
///
/// The kernel columns are nearly collinear, so solvers work in a
/// reparametrization `coef = transform · b` in which each kernel block is
/// replaced by the eigenvectors of its knot kernel matrix scaled to unit
/// penalty. Eigen-directions below a relative cutoff are dropped; they carry
/// functions of negligible norm.
#[derive(Debug, Clone)]
pub struct SplineDesign {
    pub basis: SplineBasis,
    /// `n × m` matrix of basis functions at the data rows.
    pub data: DMatrix<f64>,
    /// `m × m` block-diagonal penalty; `J(η) = coefᵀ · penalty · coef`.
    pub penalty: DMatrix<f64>,
    /// `m × m'` map from working to basis coefficients.
    pub transform: DMatrix<f64>,
    /// `m' × m` left inverse of `transform` on its range.
    pub inverse: DMatrix<f64>,
    /// `n × m'` design in working coordinates, `data · transform`.
    pub work: DMatrix<f64>,
    /// `m' × m'` penalty in working coordinates: 0 on null columns, 1 on kernel columns.
    pub work_penalty: DMatrix<f64>,
    /// Column blocks of the working coordinates.
    pub work_blocks: Vec<Block>,
}

/// Relative eigenvalue cutoff for the working kernel coordinates. Dropped
/// directions are negligible in any penalized fit, and keeping them lets an
/// unpenalized projection interpolate the data points.
const EIGEN_CUTOFF: f64 = 1e-6;

impl SplineBasis {
    /// Basis with knots at the given `W` values (rows of `knots`, in `[0,1]^q`).
    pub fn from_knots(knots: DMatrix<f64>, knot_rows: Vec<usize>, structure: Structure) -> Result<Self> {
        let q = knots.ncols();
        if structure.required_q() > q {
            return Err(Error::Structure(format!(
                "structure {structure} needs two nonparametric covariates, data has {q}"
            )));
        }
        if structure.terms().is_empty() {
            return Err(Error::Structure("at least one term is required".into()));
        }
        if knots.nrows() == 0 {
            return Err(Error::InvalidArgument("no knots".into()));
        }
        if let Some(v) = knots.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(*v));
        }
        let qn = knots.nrows();
        let mut blocks = Vec::new();
        let mut start = 0;
        for &term in structure.terms() {
            blocks.push(Block {
                term,
                kind: BlockKind::Null,
                start,
                len: 1,
            });
            start += 1;
        }
        let null_dim = start;
        for &term in structure.terms() {
            blocks.push(Block {
                term,
                kind: BlockKind::Kernel,
                start,
                len: qn,
            });
            start += qn;
        }
        Ok(Self {
            structure,
            knots,
            knot_rows,
            blocks,
            null_dim,
            dim: start,
        })
    }

    pub fn structure(&self) -> &Structure {
        &self.structure
    }

    pub fn knots(&self) -> &DMatrix<f64> {
        &self.knots
    }

    pub fn knot_rows(&self) -> &[usize] {
        &self.knot_rows
    }

    pub fn n_knots(&self) -> usize {
        self.knots.nrows()
    }

    pub fn q(&self) -> usize {
        self.knots.ncols()
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn null_dim(&self) -> usize {
        self.null_dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Columns spanning the sub-model `reduced` (must be nested in this basis).
    pub fn columns_for(&self, reduced: &Structure) -> Result<Vec<usize>> {
        if !reduced.is_subset_of(&self.structure) {
            return Err(Error::Structure(format!(
                "{reduced} is not nested in the fitted structure {}",
                self.structure
            )));
        }
        Ok(self
            .blocks
            .iter()
            .filter(|b| reduced.contains(b.term))
            .flat_map(|b| b.range())
            .collect())
    }

    /// Columns of a single term (null part and kernel block).
    pub fn term_columns(&self, term: Term) -> Vec<usize> {
        self.blocks
            .iter()
            .filter(|b| b.term == term)
            .flat_map(|b| b.range())
            .collect()
    }

    /// Fills `row` (length `dim`) with the basis functions at `point`.
    fn fill_row(&self, point: &[f64], row: &mut [f64], scratch: &mut [Vec<f64>; 2]) {
        let qn = self.n_knots();
        let q = self.q();
        for v in 0..q {
            let x = point[v];
            let s = &mut scratch[v];
            s.clear();
            s.extend((0..qn).map(|l| smooth_kernel(x, self.knots[(l, v)])));
        }
        for b in &self.blocks {
            match (b.kind, b.term) {
                (BlockKind::Null, Term::W1) => row[b.start] = k1(point[0]),
                (BlockKind::Null, Term::W2) => row[b.start] = k1(point[1]),
                (BlockKind::Null, Term::W1W2) => row[b.start] = k1(point[0]) * k1(point[1]),
                (BlockKind::Kernel, Term::W1) => row[b.range()].copy_from_slice(&scratch[0]),
                (BlockKind::Kernel, Term::W2) => row[b.range()].copy_from_slice(&scratch[1]),
                (BlockKind::Kernel, Term::W1W2) => {
                    let (a1, a2) = (k1(point[0]), k1(point[1]));
                    for l in 0..qn {
                        let (r1, r2) = (scratch[0][l], scratch[1][l]);
                        let lin1 = a1 * k1(self.knots[(l, 0)]);
                        let lin2 = a2 * k1(self.knots[(l, 1)]);
                        row[b.start + l] = lin1 * r2 + r1 * lin2 + r1 * r2;
                    }
                }
            }
        }
    }

    fn check_point(&self, point: &[f64]) -> Result<()> {
        if point.len() != self.q() {
            return Err(Error::DimensionMismatch(format!(
                "point of dimension {} for a basis on [0,1]^{}",
                point.len(),
                self.q()
            )));
        }
        if let Some(v) = point.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(*v));
        }
        Ok(())
    }

    /// `k × m` matrix of basis functions at the rows of `points` (`k × q`).
    pub fn design(&self, points: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if points.ncols() != self.q() {
            return Err(Error::DimensionMismatch(format!(
                "points have {} columns, basis expects {}",
                points.ncols(),
                self.q()
            )));
        }
        let mut out = DMatrix::zeros(points.nrows(), self.dim);
        let mut row = vec![0.0; self.dim];
        let mut point = vec![0.0; self.q()];
        let mut scratch = [Vec::new(), Vec::new()];
        for i in 0..points.nrows() {
            for (j, p) in point.iter_mut().enumerate() {
                *p = points[(i, j)];
            }
            self.check_point(&point)?;
            self.fill_row(&point, &mut row, &mut scratch);
            for (j, v) in row.iter().enumerate() {
                out[(i, j)] = *v;
            }
        }
        Ok(out)
    }

    /// Basis row `ψ(w)` at a single point.
    pub fn row(&self, point: &[f64]) -> Result<DVector<f64>> {
        self.check_point(point)?;
        let mut row = vec![0.0; self.dim];
        let mut scratch = [Vec::new(), Vec::new()];
        self.fill_row(point, &mut row, &mut scratch);
        Ok(DVector::from_vec(row))
    }

    /// Block-diagonal penalty: `R_term(κ_l, κ_m)` on each kernel block.
    pub fn penalty_matrix(&self) -> DMatrix<f64> {
        let mut pen = DMatrix::zeros(self.dim, self.dim);
        let mut row = vec![0.0; self.dim];
        let mut scratch = [Vec::new(), Vec::new()];
        let mut point = vec![0.0; self.q()];
        for l in 0..self.n_knots() {
            for (v, p) in point.iter_mut().enumerate() {
                *p = self.knots[(l, v)];
            }
            self.fill_row(&point, &mut row, &mut scratch);
            for b in self.blocks.iter().filter(|b| b.kind == BlockKind::Kernel) {
                for m in 0..b.len {
                    pen[(b.start + l, b.start + m)] = row[b.start + m];
                }
            }
        }
        // exact symmetry
        let t = pen.transpose();
        (pen + t) * 0.5
    }

    /// Basis restricted to the terms of `reduced`, on the same knots.
    pub fn restrict(&self, reduced: &Structure) -> Result<SplineBasis> {
        self.columns_for(reduced)?;
        SplineBasis::from_knots(self.knots.clone(), self.knot_rows.clone(), reduced.clone())
    }
}

/// Builds the basis for `structure` with knots at the given data rows.
pub fn build_basis(ds: &SurvivalDataset, knots: &[usize], structure: &Structure) -> Result<SplineDesign> {
    if structure.required_q() > ds.q() {
        return Err(Error::Structure(format!(
            "structure {structure} needs two nonparametric covariates, data has {}",
            ds.q()
        )));
    }
    if let Some(&k) = knots.iter().find(|&&k| k >= ds.n()) {
        return Err(Error::InvalidArgument(format!("knot row {k} out of range")));
    }
    let knot_values = ds.w().select_rows(knots);
    let basis = SplineBasis::from_knots(knot_values, knots.to_vec(), structure.clone())?;
    let data = basis.design(ds.w())?;
    SplineDesign::new(basis, data)
}

impl SplineDesign {
    /// Design from a basis and its `n × m` evaluation at the data rows.
    pub fn new(basis: SplineBasis, data: DMatrix<f64>) -> Result<Self> {
        if data.ncols() != basis.dim() {
            return Err(Error::DimensionMismatch(format!(
                "design has {} columns, basis has {}",
                data.ncols(),
                basis.dim()
            )));
        }
        let penalty = basis.penalty_matrix();
        let m = basis.dim();
        let mut pieces: Vec<(Block, DMatrix<f64>, DMatrix<f64>)> = Vec::new();
        let mut start = 0;
        for b in basis.blocks() {
            let (t, inv) = match b.kind {
                BlockKind::Null => (DMatrix::identity(b.len, b.len), DMatrix::identity(b.len, b.len)),
                BlockKind::Kernel => {
                    let block = penalty.view((b.start, b.start), (b.len, b.len)).into_owned();
                    let eig = SymmetricEigen::new(block);
                    let top = eig.eigenvalues.max().max(0.0);
                    let keep: Vec<usize> = (0..b.len).filter(|&i| eig.eigenvalues[i] > EIGEN_CUTOFF * top).collect();
                    let t = DMatrix::from_fn(b.len, keep.len(), |r, k| {
                        eig.eigenvectors[(r, keep[k])] / eig.eigenvalues[keep[k]].sqrt()
                    });
                    let inv = DMatrix::from_fn(keep.len(), b.len, |k, r| {
                        eig.eigenvectors[(r, keep[k])] * eig.eigenvalues[keep[k]].sqrt()
                    });
                    (t, inv)
                }
            };
            let wb = Block {
                term: b.term,
                kind: b.kind,
                start,
                len: t.ncols(),
            };
            start += t.ncols();
            pieces.push((wb, t, inv));
        }
        let mw = start;
        let mut transform = DMatrix::zeros(m, mw);
        let mut inverse = DMatrix::zeros(mw, m);
        let mut work_penalty = DMatrix::zeros(mw, mw);
        for (b, (wb, t, inv)) in basis.blocks().iter().zip(&pieces) {
            transform.view_mut((b.start, wb.start), (b.len, wb.len)).copy_from(t);
            inverse.view_mut((wb.start, b.start), (wb.len, b.len)).copy_from(inv);
            if wb.kind == BlockKind::Kernel {
                for i in wb.range() {
                    work_penalty[(i, i)] = 1.0;
                }
            }
        }
        let work = &data * &transform;
        Ok(SplineDesign {
            work_blocks: pieces.into_iter().map(|(wb, _, _)| wb).collect(),
            basis,
            data,
            penalty,
            transform,
            inverse,
            work,
            work_penalty,
        })
    }

    pub fn dim(&self) -> usize {
        self.basis.dim()
    }

    /// Number of working coordinates.
    pub fn work_dim(&self) -> usize {
        self.work.ncols()
    }

    pub fn to_working(&self, coef: &DVector<f64>) -> DVector<f64> {
        &self.inverse * coef
    }

    pub fn from_working(&self, b: &DVector<f64>) -> DVector<f64> {
        &self.transform * b
    }

    /// Working-coordinate rows `ψ(w)ᵀ·transform` at the rows of `points`.
    pub fn work_rows(&self, points: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.basis.design(points)? * &self.transform)
    }

    /// Working columns of the terms in `reduced`.
    pub fn work_columns_for(&self, reduced: &Structure) -> Result<Vec<usize>> {
        self.basis.columns_for(reduced)?;
        Ok(self
            .work_blocks
            .iter()
            .filter(|b| reduced.contains(b.term))
            .flat_map(|b| b.range())
            .collect())
    }

    /// Working columns of a single term.
    pub fn work_term_columns(&self, term: Term) -> Vec<usize> {
        self.work_blocks
            .iter()
            .filter(|b| b.term == term)
            .flat_map(|b| b.range())
            .collect()
    }

    /// Roughness `J(η) = coefᵀ P coef`.
    pub fn roughness(&self, coef: &DVector<f64>) -> f64 {
        coef.dot(&(&self.penalty * coef))
    }
}

/// Spline coefficients `(d, c)` stacked as `[null-space | kernel blocks]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EtaCoefficients {
    values: Vec<f64>,
    null_dim: usize,
}

impl EtaCoefficients {
    pub fn new(values: DVector<f64>, basis: &SplineBasis) -> Result<Self> {
        if values.len() != basis.dim() {
            return Err(Error::DimensionMismatch(format!(
                "{} coefficients for a basis of dimension {}",
                values.len(),
                basis.dim()
            )));
        }
        Ok(Self {
            values: values.as_slice().to_vec(),
            null_dim: basis.null_dim(),
        })
    }

    pub fn zeros(basis: &SplineBasis) -> Self {
        Self {
            values: vec![0.0; basis.dim()],
            null_dim: basis.null_dim(),
        }
    }

    /// Null-space coefficients `d`.
    pub fn null(&self) -> &[f64] {
        &self.values[..self.null_dim]
    }

    /// Kernel coefficients `c`.
    pub fn kernel(&self) -> &[f64] {
        &self.values[self.null_dim..]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.values)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// `η(w)` at each row of `points`.
pub fn evaluate(basis: &SplineBasis, coef: &EtaCoefficients, points: &DMatrix<f64>) -> Result<DVector<f64>> {
    if coef.len() != basis.dim() {
        return Err(Error::DimensionMismatch(format!(
            "{} coefficients for a basis of dimension {}",
            coef.len(),
            basis.dim()
        )));
    }
    if points.ncols() != basis.q() {
        return Err(Error::DimensionMismatch(format!(
            "points have {} columns, basis expects {}",
            points.ncols(),
            basis.q()
        )));
    }
    let c = coef.as_slice();
    let mut row = vec![0.0; basis.dim()];
    let mut scratch = [Vec::new(), Vec::new()];
    let mut point = vec![0.0; basis.q()];
    let mut out = DVector::zeros(points.nrows());
    for i in 0..points.nrows() {
        for (j, p) in point.iter_mut().enumerate() {
            *p = points[(i, j)];
        }
        basis.check_point(&point)?;
        basis.fill_row(&point, &mut row, &mut scratch);
        out[i] = row.iter().zip(c).map(|(a, b)| a * b).sum();
    }
    Ok(out)
}

/// The grid `0, 0.01, …, 1`.
pub fn unit_grid(steps: usize) -> Vec<f64> {
    (0..=steps).map(|i| i as f64 / steps as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::SymmetricEigen;
    use rand::Rng;

    fn random_dataset(n: usize, q: usize, seed: u64) -> SurvivalDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let times = (0..n).map(|_| rng.random::<f64>()).collect();
        let events = (0..n).map(|i| i % 3 != 0).collect();
        let w = DMatrix::from_fn(n, q, |_, _| rng.random::<f64>());
        SurvivalDataset::with_w_bounds(times, events, DMatrix::zeros(n, 0), w, &vec![(0.0, 1.0); q]).unwrap()
    }

    /// Composite Simpson rule on [0, 1].
    fn simpson(f: impl Fn(f64) -> f64, intervals: usize) -> f64 {
        let h = 1.0 / intervals as f64;
        let mut s = f(0.0) + f(1.0);
        for i in 1..intervals {
            let x = i as f64 * h;
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
        }
        s * h / 3.0
    }

    #[test]
    fn knot_counts() {
        assert_eq!(knot_count(877), 151);
        assert_eq!(knot_count(150), 75);
        assert_eq!(knot_count(5), 5);
        assert_eq!(knot_count(500), 121);
    }

    #[test]
    fn kernel_origin_value_and_symmetry() {
        assert!((cubic_kernel(0.0, 0.0).unwrap() - 1.0 / 120.0).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let (x, y) = (rng.random::<f64>(), rng.random::<f64>());
            assert_eq!(cubic_kernel(x, y).unwrap(), cubic_kernel(y, x).unwrap());
        }
        assert!(matches!(cubic_kernel(1.5, 0.2), Err(Error::Domain(_))));
    }

    #[test]
    fn kernel_matrix_is_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<f64> = (0..20).map(|_| rng.random()).collect();
        let k = DMatrix::from_fn(20, 20, |i, j| cubic_kernel(pts[i], pts[j]).unwrap());
        let eig = SymmetricEigen::new(k);
        assert!(eig.eigenvalues.min() >= -1e-10);
    }

    #[test]
    fn univariate_dimensions() {
        let ds = random_dataset(10, 1, 1);
        let knots = vec![0, 2, 4, 6, 8];
        let sd = build_basis(&ds, &knots, &Structure::univariate()).unwrap();
        assert_eq!(sd.basis.null_dim(), 1);
        assert_eq!(sd.dim(), 6);
        assert_eq!(sd.data.shape(), (10, 6));
    }

    #[test]
    fn additive_and_full_dimensions() {
        let ds = random_dataset(30, 2, 2);
        let knots = select_knots(&ds, 9);
        let qn = knots.len();
        let add = build_basis(&ds, &knots, &Structure::additive()).unwrap();
        assert_eq!(add.basis.null_dim(), 2);
        assert_eq!(add.dim(), 2 + 2 * qn);
        let full = build_basis(&ds, &knots, &Structure::full()).unwrap();
        assert_eq!(full.basis.null_dim(), 3);
        assert_eq!(full.dim(), 3 + 3 * qn);
        let sub = full.basis.columns_for(&Structure::additive()).unwrap();
        assert_eq!(sub.len(), add.dim());
    }

    #[test]
    fn w2_terms_need_two_covariates() {
        let ds = random_dataset(10, 1, 1);
        assert!(build_basis(&ds, &[0, 1], &Structure::additive()).is_err());
        assert!(Structure::new(vec![Term::W1, Term::W1W2]).is_err());
    }

    #[test]
    fn columns_integrate_to_zero_1d() {
        let ds = random_dataset(12, 1, 4);
        let sd = build_basis(&ds, &select_knots(&ds, 1), &Structure::univariate()).unwrap();
        for j in 0..sd.dim() {
            let integral = simpson(|x| sd.basis.row(&[x]).unwrap()[j], 4000);
            assert!(integral.abs() < 1e-8, "column {j}: {integral}");
        }
    }

    #[test]
    fn columns_integrate_to_zero_2d() {
        let ds = random_dataset(6, 2, 8);
        let sd = build_basis(&ds, &[0, 3, 5], &Structure::full()).unwrap();
        for j in 0..sd.dim() {
            let inner = |x: f64| simpson(|y| sd.basis.row(&[x, y]).unwrap()[j], 400);
            let integral = simpson(inner, 400);
            assert!(integral.abs() < 1e-8, "column {j}: {integral}");
        }
    }

    #[test]
    fn penalty_psd_and_zero_on_null_space() {
        let ds = random_dataset(40, 2, 6);
        let sd = build_basis(&ds, &select_knots(&ds, 2), &Structure::full()).unwrap();
        let eig = SymmetricEigen::new(sd.penalty.clone());
        assert!(eig.eigenvalues.min() >= -1e-10);
        let mut coef = DVector::zeros(sd.dim());
        for j in 0..sd.basis.null_dim() {
            coef[j] = 1.0 + j as f64;
        }
        assert_eq!(sd.roughness(&coef), 0.0);
    }

    #[test]
    fn evaluate_is_linear_and_matches_design() {
        let ds = random_dataset(25, 2, 10);
        let sd = build_basis(&ds, &select_knots(&ds, 4), &Structure::additive()).unwrap();
        let zero = EtaCoefficients::zeros(&sd.basis);
        assert!(evaluate(&sd.basis, &zero, ds.w()).unwrap().iter().all(|v| *v == 0.0));
        let c = DVector::from_fn(sd.dim(), |i, _| (i as f64 * 0.37).sin());
        let coef = EtaCoefficients::new(c.clone(), &sd.basis).unwrap();
        let direct = &sd.data * &c;
        let eval = evaluate(&sd.basis, &coef, ds.w()).unwrap();
        assert!((direct - eval).amax() < 1e-12);
    }

    #[test]
    fn unit_grid_has_101_points() {
        let grid = unit_grid(100);
        assert_eq!(grid.len(), 101);
        let ds = random_dataset(20, 1, 3);
        let sd = build_basis(&ds, &select_knots(&ds, 0), &Structure::univariate()).unwrap();
        let pts = DMatrix::from_column_slice(grid.len(), 1, &grid);
        let coef = EtaCoefficients::zeros(&sd.basis);
        assert_eq!(evaluate(&sd.basis, &coef, &pts).unwrap().len(), 101);
    }

    #[test]
    fn knots_are_distinct_and_row_order_free() {
        let ds = random_dataset(60, 1, 12);
        let knots = select_knots(&ds, 77);
        assert_eq!(knots.len(), knot_count(60));
        let perm: Vec<usize> = (0..60).rev().collect();
        let shuffled = ds.select_rows(&perm).unwrap();
        let knots2 = select_knots(&shuffled, 77);
        let v1: Vec<f64> = knots.iter().map(|&k| ds.w()[(k, 0)]).collect();
        let v2: Vec<f64> = knots2.iter().map(|&k| shuffled.w()[(k, 0)]).collect();
        assert_eq!(v1, v2);
    }

    #[test]
    fn duplicate_rows_are_collapsed() {
        let w = DMatrix::from_column_slice(6, 1, &[0.0, 0.0, 0.5, 0.5, 1.0, 1.0]);
        let ds = SurvivalDataset::new(vec![1.0; 6], vec![true; 6], DMatrix::zeros(6, 0), w).unwrap();
        let knots = select_knots(&ds, 1);
        assert_eq!(knots.len(), 3);
    }

    #[test]
    fn structure_parsing() {
        assert_eq!("w1+w2+w1:w2".parse::<Structure>().unwrap(), Structure::full());
        assert_eq!("constant".parse::<Structure>().unwrap(), Structure::constant());
        assert_eq!(Structure::full().to_string(), "W1+W2+W1:W2");
        assert!("w3".parse::<Structure>().is_err());
    }
}
