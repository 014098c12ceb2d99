//! Clustered (longitudinal) data: clusters of `m_i` observations sharing a
//! covariate dimension `p`, plus CSV ingestion and serialization.
//!
//! The CSV layout is `cluster_id`, optional `time`, `y`, `x1`..`xp`, with a
//! mandatory header row. Clusters keep their order of first appearance and,
//! when a time column is present, rows inside a cluster are ordered by time.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// One subject: an `m_i x p` covariate block, its responses and optional
/// observation times.
#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub id: String,
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub times: Option<Vec<f64>>,
}

impl Cluster {
    pub fn new(id: impl Into<String>, x: DMatrix<f64>, y: DVector<f64>, times: Option<Vec<f64>>) -> Self {
        Self {
            id: id.into(),
            x,
            y,
            times,
        }
    }

    pub fn size(&self) -> usize {
        self.y.len()
    }

    /// Observation times, defaulting to positions `1..=m_i`.
    pub fn times_or_positions(&self) -> Vec<f64> {
        match &self.times {
            Some(t) => t.clone(),
            None => (1..=self.size()).map(|k| k as f64).collect(),
        }
    }
}

/// A single invariant violation reported by [`ClusteredDataset::validate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    /// Offending cluster id; empty for dataset-level violations.
    pub cluster: String,
    pub field: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.cluster.is_empty() {
            write!(f, "dataset/{}: {}", self.field, self.message)
        } else {
            write!(f, "cluster `{}`/{}: {}", self.cluster, self.field, self.message)
        }
    }
}

/// Immutable collection of clusters.
///
/// Besides the per-cluster blocks, the dataset keeps a stacked row-major copy
/// of all covariates and responses; the smoother and the estimating equations
/// work on these flat arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusteredDataset {
    clusters: Vec<Cluster>,
    p: usize,
    x_flat: Vec<f64>,
    y_flat: Vec<f64>,
    offsets: Vec<usize>,
}

impl ClusteredDataset {
    /// Builds and validates a dataset.
    pub fn new(clusters: Vec<Cluster>) -> Result<Self> {
        let ds = Self::new_unchecked(clusters);
        let violations = ds.validate();
        if violations.is_empty() {
            Ok(ds)
        } else {
            let msg = violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ");
            Err(Error::Validation(msg))
        }
    }

    /// Builds a dataset without checking invariants. Use [`validate`](Self::validate)
    /// to inspect the result.
    pub fn new_unchecked(clusters: Vec<Cluster>) -> Self {
        let p = clusters.first().map(|c| c.x.ncols()).unwrap_or(0);
        let total: usize = clusters.iter().map(|c| c.size()).sum();
        let mut x_flat = Vec::with_capacity(total * p);
        let mut y_flat = Vec::with_capacity(total);
        let mut offsets = Vec::with_capacity(clusters.len() + 1);
        offsets.push(0);
        for c in &clusters {
            for j in 0..c.size() {
                for q in 0..p {
                    let v = if j < c.x.nrows() && q < c.x.ncols() { c.x[(j, q)] } else { 0.0 };
                    x_flat.push(v);
                }
                y_flat.push(c.y[j]);
            }
            offsets.push(y_flat.len());
        }
        Self {
            clusters,
            p,
            x_flat,
            y_flat,
            offsets,
        }
    }

    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let dataset_violation = |field: &str, message: String| Violation {
            cluster: String::new(),
            field: field.to_string(),
            message,
        };
        if self.clusters.len() < 2 {
            out.push(dataset_violation(
                "clusters",
                format!("at least 2 clusters required, found {}", self.clusters.len()),
            ));
        }
        for c in &self.clusters {
            let v = |field: &str, message: String| Violation {
                cluster: c.id.clone(),
                field: field.to_string(),
                message,
            };
            let m = c.y.len();
            if m == 0 {
                out.push(v("y", "cluster has no observations".into()));
            }
            if c.x.nrows() != m {
                out.push(v("x", format!("{} covariate rows but {} responses", c.x.nrows(), m)));
            }
            if c.x.ncols() != self.p {
                out.push(v("x", format!("{} covariate columns, expected {}", c.x.ncols(), self.p)));
            }
            if c.x.iter().any(|a| !a.is_finite()) {
                out.push(v("x", "non-finite covariate value".into()));
            }
            if c.y.iter().any(|a| !a.is_finite()) {
                out.push(v("y", "non-finite response value".into()));
            }
            if let Some(t) = &c.times {
                if t.len() != m {
                    out.push(v("times", format!("{} times but {} responses", t.len(), m)));
                }
                if t.iter().any(|a| !a.is_finite()) {
                    out.push(v("times", "non-finite time value".into()));
                }
            }
        }
        if let Some(first) = self.clusters.first() {
            let has_times = first.times.is_some();
            if let Some(c) = self.clusters.iter().find(|c| c.times.is_some() != has_times) {
                out.push(Violation {
                    cluster: c.id.clone(),
                    field: "times".into(),
                    message: "times must be present in all clusters or in none".into(),
                });
            }
        }
        out
    }

    pub fn clusters(&self) -> &[Cluster] {
        &self.clusters
    }

    /// Covariate dimension.
    pub fn p(&self) -> usize {
        self.p
    }

    /// Number of clusters.
    pub fn n(&self) -> usize {
        self.clusters.len()
    }

    /// Total number of observations.
    pub fn total_obs(&self) -> usize {
        self.y_flat.len()
    }

    pub fn has_times(&self) -> bool {
        self.clusters.first().is_some_and(|c| c.times.is_some())
    }

    pub fn max_cluster_size(&self) -> usize {
        self.clusters.iter().map(|c| c.size()).max().unwrap_or(0)
    }

    /// Covariate row of stacked observation `k`.
    #[inline]
    pub fn x_row(&self, k: usize) -> &[f64] {
        &self.x_flat[k * self.p..(k + 1) * self.p]
    }

    /// All responses, stacked cluster by cluster.
    pub fn y(&self) -> &[f64] {
        &self.y_flat
    }

    /// Row-major stacked covariates (`N * p`).
    pub fn x_flat(&self) -> &[f64] {
        &self.x_flat
    }

    /// Range of stacked rows belonging to cluster `i`.
    #[inline]
    pub fn rows_of(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    /// Index values `X_k^T beta` for every stacked observation.
    pub fn index_values(&self, beta: &[f64]) -> Vec<f64> {
        assert_eq!(beta.len(), self.p, "index vector has wrong length");
        self.x_flat
            .chunks_exact(self.p)
            .map(|row| row.iter().zip(beta).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Dataset restricted to the given covariate columns (in that order).
    pub fn select_columns(&self, cols: &[usize]) -> Result<Self> {
        if cols.is_empty() || cols.iter().any(|&c| c >= self.p) {
            return Err(Error::Domain(format!("invalid column selection {cols:?} for p = {}", self.p)));
        }
        let clusters = self
            .clusters
            .iter()
            .map(|c| Cluster {
                id: c.id.clone(),
                x: c.x.select_columns(cols),
                y: c.y.clone(),
                times: c.times.clone(),
            })
            .collect();
        Self::new(clusters)
    }

    /// Writes the dataset in the interchange CSV layout.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv_to(file)
    }

    pub fn write_csv_to<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["cluster_id".to_string()];
        if self.has_times() {
            header.push("time".into());
        }
        header.push("y".into());
        header.extend((1..=self.p).map(|q| format!("x{q}")));
        w.write_record(&header)?;
        for c in &self.clusters {
            for j in 0..c.size() {
                let mut rec = vec![c.id.clone()];
                if let Some(t) = &c.times {
                    rec.push(t[j].to_string());
                }
                rec.push(c.y[j].to_string());
                rec.extend((0..self.p).map(|q| c.x[(j, q)].to_string()));
                w.write_record(&rec)?;
            }
        }
        w.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }
}

/// Column mapping for [`load_csv`].
#[derive(Debug, Clone)]
pub struct CsvSchema {
    pub cluster_column: String,
    pub response_column: String,
    /// `None` auto-detects a column named `time`.
    pub time_column: Option<String>,
    /// `None` picks up `x1`, `x2`, ... in numeric order.
    pub covariate_columns: Option<Vec<String>>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            cluster_column: "cluster_id".into(),
            response_column: "y".into(),
            time_column: None,
            covariate_columns: None,
        }
    }
}

pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<ClusteredDataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, schema)
}

/// Parses CSV from any reader. Row numbers in errors are file line numbers
/// (the header is line 1).
pub fn read_csv<R: std::io::Read>(reader: R, schema: &CsvSchema) -> Result<ClusteredDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let find = |name: &str| headers.iter().position(|h| h == name);

    let cluster_idx = find(&schema.cluster_column)
        .ok_or_else(|| Error::Schema(format!("missing column `{}`", schema.cluster_column)))?;
    let y_idx = find(&schema.response_column)
        .ok_or_else(|| Error::Schema(format!("missing column `{}`", schema.response_column)))?;
    let time_idx = match &schema.time_column {
        Some(name) => Some(find(name).ok_or_else(|| Error::Schema(format!("missing column `{name}`")))?),
        None => find("time"),
    };
    let x_cols: Vec<(String, usize)> = match &schema.covariate_columns {
        Some(names) => names
            .iter()
            .map(|n| {
                find(n)
                    .map(|i| (n.clone(), i))
                    .ok_or_else(|| Error::Schema(format!("missing column `{n}`")))
            })
            .collect::<Result<_>>()?,
        None => {
            let mut cols: Vec<(usize, String, usize)> = headers
                .iter()
                .enumerate()
                .filter_map(|(i, h)| {
                    h.strip_prefix('x')
                        .and_then(|s| s.parse::<usize>().ok())
                        .map(|k| (k, h.clone(), i))
                })
                .collect();
            cols.sort();
            for (expect, (k, _, _)) in (1..).zip(&cols) {
                if *k != expect {
                    return Err(Error::Schema(format!("missing column `x{expect}`")));
                }
            }
            cols.into_iter().map(|(_, h, i)| (h, i)).collect()
        }
    };
    if x_cols.is_empty() {
        return Err(Error::Schema("no covariate columns (x1..xp) found".into()));
    }
    let p = x_cols.len();

    struct Row {
        time: Option<f64>,
        y: f64,
        x: Vec<f64>,
    }
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<Row>> = HashMap::new();

    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let cell = |idx: usize, name: &str| -> Result<&str> {
            let v = rec.get(idx).map(str::trim).unwrap_or("");
            if v.is_empty() {
                Err(Error::Validation(format!("row {line}: empty cell in column `{name}`")))
            } else {
                Ok(v)
            }
        };
        let num = |idx: usize, name: &str| -> Result<f64> {
            let s = cell(idx, name)?;
            s.parse::<f64>().map_err(|e| Error::Parse {
                row: line,
                column: name.to_string(),
                message: format!("`{s}`: {e}"),
            })
        };
        let id = cell(cluster_idx, &schema.cluster_column)?.to_string();
        let y = num(y_idx, &schema.response_column)?;
        let time = match time_idx {
            Some(t) => Some(num(t, "time")?),
            None => None,
        };
        let x = x_cols.iter().map(|(n, idx)| num(*idx, n)).collect::<Result<Vec<_>>>()?;
        if !groups.contains_key(&id) {
            order.push(id.clone());
        }
        groups.entry(id).or_default().push(Row { time, y, x });
    }

    let clusters = order
        .into_iter()
        .map(|id| {
            let mut rows = groups.remove(&id).unwrap_or_default();
            if time_idx.is_some() {
                // stable: equal times keep file order
                rows.sort_by(|a, b| a.time.partial_cmp(&b.time).unwrap_or(std::cmp::Ordering::Equal));
            }
            let m = rows.len();
            let x = DMatrix::from_fn(m, p, |j, q| rows[j].x[q]);
            let y = DVector::from_iterator(m, rows.iter().map(|r| r.y));
            let times = time_idx.map(|_| rows.iter().map(|r| r.time.unwrap_or(f64::NAN)).collect());
            Cluster { id, x, y, times }
        })
        .collect();
    ClusteredDataset::new(clusters)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ClusteredDataset {
        let a = Cluster::new("a", DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]), DVector::from_vec(vec![1.0, 2.0]), None);
        let b = Cluster::new("b", DMatrix::from_row_slice(1, 2, &[5.0, 6.0]), DVector::from_vec(vec![3.0]), None);
        ClusteredDataset::new(vec![a, b]).unwrap()
    }

    #[test]
    fn groups_six_rows_into_two_clusters() {
        let csv = "cluster_id,y,x1,x2\na,1,0.1,0.2\na,2,0.3,0.4\na,3,0.5,0.6\nb,4,0.7,0.8\nb,5,0.9,1.0\nb,6,1.1,1.2\n";
        let ds = read_csv(csv.as_bytes(), &CsvSchema::default()).unwrap();
        assert_eq!(ds.n(), 2);
        assert_eq!(ds.p(), 2);
        assert_eq!(ds.total_obs(), 6);
        assert_eq!(ds.clusters()[0].size(), 3);
        assert_eq!(ds.clusters()[1].size(), 3);
    }

    #[test]
    fn single_cluster_is_rejected() {
        let csv = "cluster_id,y,x1\na,1,0.1\na,2,0.3\n";
        assert!(matches!(read_csv(csv.as_bytes(), &CsvSchema::default()), Err(Error::Validation(_))));
    }

    #[test]
    fn empty_cell_names_the_row() {
        let csv = "cluster_id,y,x1,x2,x3\na,1,0.1,0.2,0.3\nb,2,0.3,0.4,\n";
        match read_csv(csv.as_bytes(), &CsvSchema::default()) {
            Err(Error::Validation(msg)) => {
                assert!(msg.contains("row 3"), "{msg}");
                assert!(msg.contains("x3"), "{msg}");
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn non_numeric_cell_is_parse_error() {
        let csv = "cluster_id,y,x1\na,1,0.1\nb,oops,0.3\n";
        match read_csv(csv.as_bytes(), &CsvSchema::default()) {
            Err(Error::Parse { row, column, .. }) => {
                assert_eq!(row, 3);
                assert_eq!(column, "y");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn missing_response_column_is_schema_error() {
        let csv = "cluster_id,x1\na,0.1\n";
        assert!(matches!(read_csv(csv.as_bytes(), &CsvSchema::default()), Err(Error::Schema(_))));
    }

    #[test]
    fn rows_sorted_by_time_within_cluster() {
        let csv = "cluster_id,time,y,x1\na,3,30,1\nb,1,1,0\na,1,10,1\na,2,20,1\nb,0.5,0,0\n";
        let ds = read_csv(csv.as_bytes(), &CsvSchema::default()).unwrap();
        assert_eq!(ds.clusters()[0].id, "a");
        assert_eq!(ds.clusters()[0].y.as_slice(), &[10.0, 20.0, 30.0]);
        assert_eq!(ds.clusters()[1].times.as_deref(), Some(&[0.5, 1.0][..]));
    }

    #[test]
    fn well_formed_has_no_violations() {
        assert!(small().validate().is_empty());
    }

    #[test]
    fn nan_response_is_one_violation() {
        let mut clusters = small().clusters().to_vec();
        clusters[1].y[0] = f64::NAN;
        let v = ClusteredDataset::new_unchecked(clusters).validate();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].cluster, "b");
        assert_eq!(v[0].field, "y");
    }

    #[test]
    fn mixed_times_is_one_violation() {
        let mut clusters = small().clusters().to_vec();
        clusters[0].times = Some(vec![1.0, 2.0]);
        let v = ClusteredDataset::new_unchecked(clusters).validate();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].field, "times");
    }

    #[test]
    fn stacked_rows_follow_cluster_order() {
        let ds = small();
        assert_eq!(ds.x_row(2), &[5.0, 6.0]);
        assert_eq!(ds.rows_of(1), 2..3);
        assert_eq!(ds.index_values(&[1.0, 0.0]), vec![1.0, 3.0, 5.0]);
    }
}
