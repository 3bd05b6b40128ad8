//! Right-censored survival data, risk-set indexing and CSV ingestion.
//!
//! A [`SurvivalDataset`] holds follow-up times `X_i`, failure indicators
//! `Δ_i`, parametric covariates `U` (n × d) and nonparametric covariates `W`
//! (n × q, q ∈ {1, 2}). `W` is stored affinely rescaled to `[0, 1]` because the
//! spline kernels live on the unit interval; the original bounds are kept so
//! values can be mapped back.

use std::collections::HashSet;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Column roles for CSV ingestion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnSchema {
    pub time: String,
    pub status: String,
    pub parametric: Vec<String>,
    pub nonparametric: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct SurvivalDataset {
    times: Vec<f64>,
    events: Vec<bool>,
    u: DMatrix<f64>,
    w: DMatrix<f64>,
    w_bounds: Vec<(f64, f64)>,
    failure_order: Vec<usize>,
    u_names: Vec<String>,
    w_names: Vec<String>,
    dropped_rows: usize,
}

impl SurvivalDataset {
    /// Builds a dataset, rescaling each `W` column by its observed min/max.
    pub fn new(times: Vec<f64>, events: Vec<bool>, u: DMatrix<f64>, w: DMatrix<f64>) -> Result<Self> {
        let mut bounds = Vec::with_capacity(w.ncols());
        for j in 0..w.ncols() {
            let col = w.column(j);
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if !(hi > lo) {
                return Err(Error::InvalidData(format!(
                    "nonparametric column {j} is constant; it cannot be rescaled"
                )));
            }
            bounds.push((lo, hi));
        }
        Self::with_w_bounds(times, events, u, w, &bounds)
    }

    /// Builds a dataset rescaling `W` column `j` from `bounds[j]` to `[0, 1]`.
    ///
    /// Simulated covariates already drawn on the unit square use `(0, 1)`.
    pub fn with_w_bounds(
        times: Vec<f64>,
        events: Vec<bool>,
        u: DMatrix<f64>,
        w: DMatrix<f64>,
        bounds: &[(f64, f64)],
    ) -> Result<Self> {
        let n = times.len();
        if n < 2 {
            return Err(Error::InvalidData(format!("need at least 2 subjects, got {n}")));
        }
        if events.len() != n || u.nrows() != n || w.nrows() != n {
            return Err(Error::DimensionMismatch(format!(
                "times {n}, events {}, U rows {}, W rows {}",
                events.len(),
                u.nrows(),
                w.nrows()
            )));
        }
        let q = w.ncols();
        if !(1..=2).contains(&q) {
            return Err(Error::InvalidData(format!(
                "between 1 and 2 nonparametric covariates are supported, got {q}"
            )));
        }
        if bounds.len() != q {
            return Err(Error::DimensionMismatch(format!(
                "{} bounds for {q} nonparametric columns",
                bounds.len()
            )));
        }
        if let Some(t) = times.iter().find(|t| !t.is_finite() || **t < 0.0) {
            return Err(Error::InvalidData(format!("invalid follow-up time {t}")));
        }
        if u.iter().chain(w.iter()).any(|x| !x.is_finite()) {
            return Err(Error::InvalidData("covariates must be finite".into()));
        }

        let mut scaled = w.clone();
        for (j, &(lo, hi)) in bounds.iter().enumerate() {
            if !(hi > lo) {
                return Err(Error::InvalidData(format!("empty range for nonparametric column {j}")));
            }
            for i in 0..n {
                let x = (w[(i, j)] - lo) / (hi - lo);
                // tolerate rounding at the edges
                if !(-1e-12..=1.0 + 1e-12).contains(&x) {
                    return Err(Error::Domain(x));
                }
                scaled[(i, j)] = x.clamp(0.0, 1.0);
            }
        }

        let mut failure_order: Vec<usize> = (0..n).filter(|&i| events[i]).collect();
        if failure_order.is_empty() {
            return Err(Error::AllCensored);
        }
        failure_order.sort_by(|&a, &b| times[a].total_cmp(&times[b]).then(a.cmp(&b)));

        Ok(Self {
            times,
            events,
            u_names: (1..=u.ncols()).map(|j| format!("U{j}")).collect(),
            w_names: (1..=q).map(|j| format!("W{j}")).collect(),
            u,
            w: scaled,
            w_bounds: bounds.to_vec(),
            failure_order,
            dropped_rows: 0,
        })
    }

    pub fn with_names(mut self, u_names: Vec<String>, w_names: Vec<String>) -> Result<Self> {
        if u_names.len() != self.d() || w_names.len() != self.q() {
            return Err(Error::DimensionMismatch("covariate names do not match columns".into()));
        }
        self.u_names = u_names;
        self.w_names = w_names;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.times.len()
    }

    pub fn d(&self) -> usize {
        self.u.ncols()
    }

    pub fn q(&self) -> usize {
        self.w.ncols()
    }

    /// Number of observed failures `N`.
    pub fn n_failures(&self) -> usize {
        self.failure_order.len()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn events(&self) -> &[bool] {
        &self.events
    }

    pub fn u(&self) -> &DMatrix<f64> {
        &self.u
    }

    /// Rescaled nonparametric covariates, every column within `[0, 1]`.
    pub fn w(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn w_bounds(&self) -> &[(f64, f64)] {
        &self.w_bounds
    }

    /// Failed subjects `(i_1, …, i_N)` ordered by time.
    pub fn failure_order(&self) -> &[usize] {
        &self.failure_order
    }

    pub fn u_names(&self) -> &[String] {
        &self.u_names
    }

    pub fn w_names(&self) -> &[String] {
        &self.w_names
    }

    /// Rows skipped during ingestion because of missing values.
    pub fn dropped_rows(&self) -> usize {
        self.dropped_rows
    }

    pub fn censoring_rate(&self) -> f64 {
        1.0 - self.n_failures() as f64 / self.n() as f64
    }

    /// Maps a raw value of nonparametric column `j` into `[0, 1]`.
    pub fn rescale_w(&self, j: usize, raw: f64) -> f64 {
        let (lo, hi) = self.w_bounds[j];
        (raw - lo) / (hi - lo)
    }

    /// Inverse of [`rescale_w`](Self::rescale_w).
    pub fn original_w(&self, j: usize, unit: f64) -> f64 {
        let (lo, hi) = self.w_bounds[j];
        lo + unit * (hi - lo)
    }

    /// Dataset restricted to the given rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let times = rows.iter().map(|&i| self.times[i]).collect();
        let events = rows.iter().map(|&i| self.events[i]).collect();
        let u = self.u.select_rows(rows);
        let w = DMatrix::from_fn(rows.len(), self.q(), |r, j| self.original_w(j, self.w[(rows[r], j)]));
        let mut out = Self::with_w_bounds(times, events, u, w, &self.w_bounds)?;
        out.u_names = self.u_names.clone();
        out.w_names = self.w_names.clone();
        Ok(out)
    }

    /// Dataset keeping only the listed parametric columns.
    pub fn select_u_columns(&self, cols: &[usize]) -> Self {
        let mut out = self.clone();
        out.u = self.u.select_columns(cols);
        out.u_names = cols.iter().map(|&j| self.u_names[j].clone()).collect();
        out
    }
}

/// Risk sets `{k : X_k ≥ X_{i_p}}` for every failure `p`.
///
/// Subjects are sorted by time once; each risk set is a suffix of that order,
/// so tied subjects (failed or censored) all belong to each other's sets.
#[derive(Debug, Clone)]
pub struct RiskSet {
    by_time: Vec<usize>,
    position: Vec<usize>,
    start: Vec<usize>,
    failures: Vec<usize>,
}

impl RiskSet {
    pub fn build(ds: &SurvivalDataset) -> Self {
        let times = ds.times();
        let mut by_time: Vec<usize> = (0..ds.n()).collect();
        by_time.sort_by(|&a, &b| times[a].total_cmp(&times[b]).then(a.cmp(&b)));
        let mut position = vec![0; ds.n()];
        for (pos, &i) in by_time.iter().enumerate() {
            position[i] = pos;
        }
        let failures = ds.failure_order().to_vec();
        let start = failures
            .iter()
            .map(|&i| by_time.partition_point(|&k| times[k] < times[i]))
            .collect();
        Self {
            by_time,
            position,
            start,
            failures,
        }
    }

    pub fn n_subjects(&self) -> usize {
        self.by_time.len()
    }

    pub fn n_failures(&self) -> usize {
        self.failures.len()
    }

    /// Subject index `i_p` of failure `p`.
    pub fn failure(&self, p: usize) -> usize {
        self.failures[p]
    }

    pub fn failures(&self) -> &[usize] {
        &self.failures
    }

    /// Members of the risk set of failure `p`, ordered by time.
    pub fn members(&self, p: usize) -> &[usize] {
        &self.by_time[self.start[p]..]
    }

    pub fn size(&self, p: usize) -> usize {
        self.by_time.len() - self.start[p]
    }

    pub fn contains(&self, p: usize, k: usize) -> bool {
        self.position[k] >= self.start[p]
    }

    /// Subjects in ascending time order.
    pub(crate) fn by_time(&self) -> &[usize] {
        &self.by_time
    }

    /// Position in [`by_time`](Self::by_time) where risk set `p` begins.
    pub(crate) fn start(&self, p: usize) -> usize {
        self.start[p]
    }

    /// Explicit index lists, one per failure.
    pub fn to_index_sets(&self) -> Vec<Vec<usize>> {
        (0..self.n_failures())
            .map(|p| {
                let mut set = self.members(p).to_vec();
                set.sort_unstable();
                set
            })
            .collect()
    }
}

/// Risk sets of `ds`.
pub fn build_risk_sets(ds: &SurvivalDataset) -> RiskSet {
    RiskSet::build(ds)
}

fn is_missing(cell: &str) -> bool {
    matches!(cell, "" | "NA" | "na" | "NaN" | "nan" | ".")
}

/// Reads a CSV with a header row and assigns columns according to `schema`.
///
/// Rows containing a missing cell (empty, `NA`, `NaN` or `.`) in any used
/// column are dropped; the count is available from
/// [`SurvivalDataset::dropped_rows`].
pub fn load_dataset(path: impl AsRef<Path>, schema: &ColumnSchema) -> Result<SurvivalDataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();

    let mut seen = HashSet::new();
    for h in &headers {
        if !seen.insert(h.as_str()) {
            return Err(Error::DuplicateColumn(h.clone()));
        }
    }
    let mut used = HashSet::new();
    let roles = std::iter::once(&schema.time)
        .chain(std::iter::once(&schema.status))
        .chain(&schema.parametric)
        .chain(&schema.nonparametric);
    for name in roles.clone() {
        if !used.insert(name.as_str()) {
            return Err(Error::DuplicateColumn(name.clone()));
        }
    }
    let index_of = |name: &String| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.clone()))
    };
    let time_col = index_of(&schema.time)?;
    let status_col = index_of(&schema.status)?;
    let u_cols = schema.parametric.iter().map(index_of).collect::<Result<Vec<_>>>()?;
    let w_cols = schema.nonparametric.iter().map(index_of).collect::<Result<Vec<_>>>()?;
    let all_cols: Vec<usize> = roles.map(index_of).collect::<Result<_>>()?;

    let mut times = Vec::new();
    let mut events = Vec::new();
    let mut u_rows: Vec<f64> = Vec::new();
    let mut w_rows: Vec<f64> = Vec::new();
    let mut dropped = 0;

    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let row = row + 1;
        if all_cols.iter().any(|&c| record.get(c).is_none_or(is_missing)) {
            dropped += 1;
            continue;
        }
        let number = |c: usize| -> Result<f64> {
            let cell = &record[c];
            cell.parse::<f64>().map_err(|_| Error::NonNumeric {
                column: headers[c].clone(),
                row,
                value: cell.to_string(),
            })
        };
        times.push(number(time_col)?);
        let status = &record[status_col];
        match status.parse::<f64>() {
            Ok(0.0) => events.push(false),
            Ok(1.0) => events.push(true),
            _ => {
                return Err(Error::InvalidStatus {
                    row,
                    value: status.to_string(),
                })
            }
        }
        for &c in &u_cols {
            u_rows.push(number(c)?);
        }
        for &c in &w_cols {
            w_rows.push(number(c)?);
        }
    }

    let n = times.len();
    let u = DMatrix::from_row_slice(n, u_cols.len(), &u_rows);
    let w = DMatrix::from_row_slice(n, w_cols.len(), &w_rows);
    let mut ds = SurvivalDataset::new(times, events, u, w)?
        .with_names(schema.parametric.clone(), schema.nonparametric.clone())?;
    ds.dropped_rows = dropped;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny(times: Vec<f64>, events: Vec<bool>) -> SurvivalDataset {
        let n = times.len();
        let w = DMatrix::from_fn(n, 1, |i, _| i as f64);
        SurvivalDataset::new(times, events, DMatrix::zeros(n, 0), w).unwrap()
    }

    #[test]
    fn strict_ordering_risk_sets() {
        let ds = tiny(vec![1.0, 2.0, 3.0], vec![true, true, true]);
        let rs = build_risk_sets(&ds);
        let sizes: Vec<_> = (0..3).map(|p| rs.size(p)).collect();
        assert_eq!(sizes, vec![3, 2, 1]);
    }

    #[test]
    fn tied_censored_subject_is_at_risk() {
        let ds = tiny(vec![2.0, 2.0], vec![true, false]);
        let rs = build_risk_sets(&ds);
        assert_eq!(rs.n_failures(), 1);
        assert_eq!(rs.to_index_sets()[0], vec![0, 1]);
    }

    #[test]
    fn risk_sets_match_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let n = 20;
            let times: Vec<f64> = (0..n).map(|_| (rng.random::<f64>() * 8.0).floor()).collect();
            let mut events: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < 0.7).collect();
            events[0] = true;
            let ds = tiny(times.clone(), events.clone());
            let rs = build_risk_sets(&ds);
            let mut total = 0;
            for (p, &ip) in ds.failure_order().iter().enumerate() {
                let brute: Vec<usize> = (0..n).filter(|&k| times[k] >= times[ip]).collect();
                assert_eq!(rs.to_index_sets()[p], brute);
                assert!(rs.contains(p, ip));
                total += brute.len();
            }
            let summed: usize = (0..rs.n_failures()).map(|p| rs.size(p)).sum();
            assert_eq!(summed, total);
        }
    }

    #[test]
    fn failure_order_is_sorted_and_complete() {
        let ds = tiny(vec![5.0, 1.0, 3.0, 3.0, 0.5], vec![true, false, true, true, true]);
        assert_eq!(ds.failure_order(), &[4, 2, 3, 0]);
        assert_eq!(ds.n_failures(), 4);
    }

    #[test]
    fn rescale_round_trip() {
        let w = DMatrix::from_column_slice(4, 1, &[2.0, 4.0, 3.3, 2.5]);
        let ds = SurvivalDataset::new(vec![1.0, 2.0, 3.0, 4.0], vec![true; 4], DMatrix::zeros(4, 0), w.clone())
            .unwrap();
        assert_eq!(ds.w()[(0, 0)], 0.0);
        assert_eq!(ds.w()[(1, 0)], 1.0);
        for i in 0..4 {
            let back = ds.original_w(0, ds.w()[(i, 0)]);
            assert!((back - w[(i, 0)]).abs() <= 1e-12 * w[(i, 0)].abs());
        }
    }

    #[test]
    fn all_censored_is_rejected() {
        let w = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        let err = SurvivalDataset::new(vec![1.0, 2.0], vec![false, false], DMatrix::zeros(2, 0), w);
        assert!(matches!(err, Err(Error::AllCensored)));
    }

    #[test]
    fn rejects_negative_time_and_bad_q() {
        let w = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        assert!(SurvivalDataset::new(vec![-1.0, 2.0], vec![true, true], DMatrix::zeros(2, 0), w).is_err());
        let w3 = DMatrix::from_fn(2, 3, |i, j| (i + j) as f64);
        assert!(SurvivalDataset::new(vec![1.0, 2.0], vec![true, true], DMatrix::zeros(2, 0), w3).is_err());
    }
}
