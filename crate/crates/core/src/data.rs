//! CSV ingestion, standardization, splitting and the initialization heuristics.

use std::io::Read;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GpError, Result};
use crate::kernel::KernelParams;
use crate::model::Observations;

/// Which CSV column holds the regression target.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TargetColumn {
    #[default]
    Last,
    Index(usize),
    Name(String),
}

/// Per-column affine map from the original scale: `original = mean + std * stored`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    pub y_mean: f64,
    pub y_std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub column_names: Option<Vec<String>>,
    pub stats: Option<Standardization>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(GpError::LengthMismatch { expected: x.nrows(), got: y.len() });
        }
        if y.is_empty() {
            return Err(GpError::EmptyDataset);
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(GpError::InvalidArgument("dataset contains non-finite values".into()));
        }
        Ok(Self { x, y, column_names: None, stats: None })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn observations(&self) -> Result<Observations<f64>> {
        Observations::new(self.x.clone(), self.y.clone())
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            x: self.x.select_rows(idx),
            y: DVector::from_fn(idx.len(), |i, _| self.y[idx[i]]),
            column_names: self.column_names.clone(),
            stats: self.stats.clone(),
        }
    }
}

fn parse_cell(s: &str, row: usize, col: usize) -> Result<f64> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| GpError::Parse { row, col, msg: format!("`{s}` is not a number") })?;
    if !v.is_finite() {
        return Err(GpError::Parse { row, col, msg: format!("`{s}` is not finite") });
    }
    Ok(v)
}

/// Reads a CSV file; see [`read_csv`].
pub fn load_csv(path: impl AsRef<Path>, target: &TargetColumn) -> Result<Dataset> {
    read_csv(std::fs::File::open(path)?, target)
}

/// Parses comma-separated numeric rows. The first row is a header if any of
/// its cells is not a number. Rows and columns in errors are 1-based.
/// Constant feature columns are dropped.
pub fn read_csv<R: Read>(reader: R, target: &TargetColumn) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(reader);
    let mut records = Vec::new();
    for rec in rdr.records() {
        records.push(rec?);
    }
    let records: Vec<_> = records.into_iter().filter(|r| !(r.len() == 1 && r[0].is_empty())).collect();
    let Some(first) = records.first() else {
        return Err(GpError::EmptyDataset);
    };
    let has_header = first.iter().any(|c| c.parse::<f64>().is_err());
    let header: Option<Vec<String>> = has_header.then(|| first.iter().map(str::to_string).collect());
    let body = &records[usize::from(has_header)..];
    if body.is_empty() {
        return Err(GpError::EmptyDataset);
    }
    let width = first.len();
    if width < 2 {
        return Err(GpError::InvalidArgument("CSV needs at least one feature and a target column".into()));
    }
    let tcol = match target {
        TargetColumn::Last => width - 1,
        TargetColumn::Index(i) if *i < width => *i,
        TargetColumn::Index(i) => return Err(GpError::IndexOutOfRange { index: *i, len: width }),
        TargetColumn::Name(name) => header
            .as_ref()
            .and_then(|h| h.iter().position(|c| c == name))
            .ok_or_else(|| GpError::InvalidArgument(format!("target column `{name}` not found in header")))?,
    };
    let n = body.len();
    let mut x = DMatrix::zeros(n, width - 1);
    let mut y = DVector::zeros(n);
    for (r, rec) in body.iter().enumerate() {
        let row = r + 1 + usize::from(has_header);
        if rec.len() != width {
            return Err(GpError::Parse { row, col: rec.len().min(width) + 1, msg: format!("expected {width} fields") });
        }
        let mut j = 0;
        for (c, cell) in rec.iter().enumerate() {
            let v = parse_cell(cell, row, c + 1)?;
            if c == tcol {
                y[r] = v;
            } else {
                x[(r, j)] = v;
                j += 1;
            }
        }
    }
    let mut names: Option<Vec<String>> =
        header.map(|h| h.into_iter().enumerate().filter(|(c, _)| *c != tcol).map(|(_, s)| s).collect());
    let keep: Vec<usize> = (0..x.ncols())
        .filter(|&c| {
            let col = x.column(c);
            let constant = col.iter().all(|&v| v == col[0]);
            if constant {
                log::warn!("dropping constant feature column {}", c + 1);
            }
            !constant
        })
        .collect();
    if keep.is_empty() {
        return Err(GpError::InvalidArgument("every feature column is constant".into()));
    }
    if keep.len() < x.ncols() {
        x = x.select_columns(&keep);
        names = names.map(|v| keep.iter().map(|&c| v[c].clone()).collect());
    }
    let mut d = Dataset::new(x, y)?;
    d.column_names = names;
    Ok(d)
}

fn mean_std(v: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = v.clone().count() as f64;
    let mean = v.clone().sum::<f64>() / n;
    let var = v.map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Centres each feature and the target and scales them to unit population
/// standard deviation. The stored statistics always map back to the scale
/// the data was loaded on.
pub fn standardize(d: &Dataset) -> Result<Dataset> {
    let dim = d.dim();
    let mut x = d.x.clone();
    let mut x_mean = Vec::with_capacity(dim);
    let mut x_std = Vec::with_capacity(dim);
    for c in 0..dim {
        let (m, s) = mean_std(d.x.column(c).iter().copied());
        if !(s > 0.0) {
            return Err(GpError::DegenerateColumn(c));
        }
        x.column_mut(c).apply(|v| *v = (*v - m) / s);
        x_mean.push(m);
        x_std.push(s);
    }
    let (y_mean, y_std) = mean_std(d.y.iter().copied());
    if !(y_std > 0.0) {
        return Err(GpError::DegenerateColumn(dim));
    }
    let y = d.y.map(|v| (v - y_mean) / y_std);
    let stats = match &d.stats {
        None => Standardization { x_mean, x_std, y_mean, y_std },
        Some(o) => Standardization {
            x_mean: (0..dim).map(|c| o.x_mean[c] + o.x_std[c] * x_mean[c]).collect(),
            x_std: (0..dim).map(|c| o.x_std[c] * x_std[c]).collect(),
            y_mean: o.y_mean + o.y_std * y_mean,
            y_std: o.y_std * y_std,
        },
    };
    Ok(Dataset { x, y, column_names: d.column_names.clone(), stats: Some(stats) })
}

/// Applies the stored statistics of `reference` to raw inputs.
pub fn standardize_inputs(x: &DMatrix<f64>, stats: &Standardization) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| (x[(i, j)] - stats.x_mean[j]) / stats.x_std[j])
}

/// Inverse of [`standardize`]; a dataset without statistics is returned as is.
pub fn destandardize(d: &Dataset) -> Dataset {
    let Some(s) = &d.stats else {
        return d.clone();
    };
    let x = DMatrix::from_fn(d.len(), d.dim(), |i, j| s.x_mean[j] + s.x_std[j] * d.x[(i, j)]);
    let y = d.y.map(|v| s.y_mean + s.y_std * v);
    Dataset { x, y, column_names: d.column_names.clone(), stats: None }
}

/// Seeded random split with `floor(N * test_fraction)` test points.
pub fn split(d: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(GpError::InvalidArgument(format!("test_fraction: must lie in (0, 1), got {test_fraction}")));
    }
    let n = d.len();
    let n_test = (n as f64 * test_fraction).floor() as usize;
    if n_test == 0 || n_test == n {
        return Err(GpError::InvalidArgument(format!(
            "test_fraction: {test_fraction} of {n} points leaves an empty side"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (test, train) = idx.split_at(n_test);
    Ok((d.subset(train), d.subset(test)))
}

fn sq_dist(x: &DMatrix<f64>, i: usize, c: &DMatrix<f64>, k: usize) -> f64 {
    (0..x.ncols()).map(|j| (x[(i, j)] - c[(k, j)]).powi(2)).sum()
}

fn check_m(m: usize, n: usize) -> Result<()> {
    if m == 0 || m > n {
        return Err(GpError::InvalidArgument(format!("num_inducing: must lie in 1..={n}, got {m}")));
    }
    Ok(())
}

/// k-means++ seeding then Lloyd iterations until no centre moves more than
/// 1e-6 or 100 iterations. Returns the `M x D` centres.
pub fn init_inducing_kmeans(d: &Dataset, m: usize, seed: u64) -> Result<DMatrix<f64>> {
    let (n, dim) = (d.len(), d.dim());
    check_m(m, n)?;
    let x = &d.x;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![rng.random_range(0..n)];
    let mut best: Vec<f64> = (0..n).map(|i| sq_dist(x, i, &x.select_rows(&chosen[..1]), 0)).collect();
    while chosen.len() < m {
        let total: f64 = best.iter().sum();
        let next = if total > 0.0 {
            let mut t = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in best.iter().enumerate() {
                if w > 0.0 && t < w {
                    pick = i;
                    break;
                }
                t -= w;
            }
            while best[pick] == 0.0 {
                pick -= 1;
            }
            pick
        } else {
            // every remaining point duplicates a centre
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen.push(next);
        let c = x.select_rows(&[next]);
        for (i, b) in best.iter_mut().enumerate() {
            *b = b.min(sq_dist(x, i, &c, 0));
        }
    }
    let mut centers = x.select_rows(&chosen);
    for _ in 0..100 {
        let mut sums = DMatrix::<f64>::zeros(m, dim);
        let mut counts = vec![0usize; m];
        for i in 0..n {
            let k = (0..m)
                .min_by(|&a, &b| sq_dist(x, i, &centers, a).total_cmp(&sq_dist(x, i, &centers, b)))
                .expect("m > 0");
            counts[k] += 1;
            for j in 0..dim {
                sums[(k, j)] += x[(i, j)];
            }
        }
        let mut moved = 0.0f64;
        for k in 0..m {
            if counts[k] == 0 {
                continue;
            }
            let mut shift = 0.0;
            for j in 0..dim {
                let c = sums[(k, j)] / counts[k] as f64;
                shift += (c - centers[(k, j)]).powi(2);
                centers[(k, j)] = c;
            }
            moved = moved.max(shift.sqrt());
        }
        if moved < 1e-6 {
            break;
        }
    }
    Ok(centers)
}

/// Every lengthscale set to the median pairwise Euclidean distance over a
/// seeded subsample of at most 1000 points; signal variance 1.
pub fn init_lengthscales_median(d: &Dataset, seed: u64) -> Result<KernelParams<f64>> {
    let n = d.len();
    if n < 2 {
        return Err(GpError::InvalidArgument("median heuristic needs at least two points".into()));
    }
    let rows: Vec<usize> = if n <= 1000 {
        (0..n).collect()
    } else {
        let mut r = index::sample(&mut ChaCha8Rng::seed_from_u64(seed), n, 1000).into_vec();
        r.sort_unstable();
        r
    };
    let mut dists = Vec::with_capacity(rows.len() * (rows.len() - 1) / 2);
    for (a, &i) in rows.iter().enumerate() {
        for &j in &rows[a + 1..] {
            dists.push(sq_dist(&d.x, i, &d.x, j).sqrt());
        }
    }
    dists.sort_by(f64::total_cmp);
    let k = dists.len();
    let mut med = if k % 2 == 1 { dists[k / 2] } else { 0.5 * (dists[k / 2 - 1] + dists[k / 2]) };
    if !(med > 0.0) {
        log::warn!("median pairwise distance is zero; using lengthscale 1");
        med = 1.0;
    }
    Ok(KernelParams::new(&vec![med; d.dim()], 1.0))
}

/// `M` training inputs drawn without replacement.
pub fn init_inducing_subset(d: &Dataset, m: usize, seed: u64) -> Result<DMatrix<f64>> {
    check_m(m, d.len())?;
    let rows = index::sample(&mut ChaCha8Rng::seed_from_u64(seed), d.len(), m).into_vec();
    Ok(d.x.select_rows(&rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn three_rows_two_features() {
        let d = read_csv("1,2,3\n4,5,6\n7,9,8\n".as_bytes(), &TargetColumn::Last).unwrap();
        assert_eq!((d.len(), d.dim()), (3, 2));
        assert_eq!(d.y.as_slice(), &[3.0, 6.0, 8.0]);
    }

    #[test]
    fn header_matches_headerless() {
        let a = read_csv("a,b,t\n1,2,3\n4,5,6\n7,9,8\n".as_bytes(), &TargetColumn::Last).unwrap();
        let b = read_csv("1,2,3\n4,5,6\n7,9,8\n".as_bytes(), &TargetColumn::Last).unwrap();
        assert_eq!(a.x, b.x);
        assert_eq!(a.y, b.y);
        assert_eq!(a.column_names, Some(vec!["a".to_string(), "b".to_string()]));
        let c = read_csv("a,t,b\n1,3,2\n4,6,5\n7,8,9\n".as_bytes(), &TargetColumn::Name("t".into())).unwrap();
        assert_eq!(c.x, b.x);
        assert_eq!(c.y, b.y);
    }

    #[test]
    fn bad_cells_name_location() {
        let e = read_csv("1,2,3\n4,x,6\n".as_bytes(), &TargetColumn::Last).unwrap_err();
        assert!(matches!(e, GpError::Parse { row: 2, col: 2, .. }), "{e}");
        let e = read_csv("1,2,3\n4,5,NaN\n".as_bytes(), &TargetColumn::Last).unwrap_err();
        assert!(matches!(e, GpError::Parse { row: 2, col: 3, .. }), "{e}");
        let e = read_csv("a,b\n".as_bytes(), &TargetColumn::Last).unwrap_err();
        assert!(matches!(e, GpError::EmptyDataset));
    }

    #[test]
    fn constant_column_dropped() {
        let d = read_csv("1,5,3\n4,5,6\n7,5,8\n".as_bytes(), &TargetColumn::Last).unwrap();
        assert_eq!(d.dim(), 1);
    }

    #[test]
    fn standardize_population_std() {
        let d = Dataset::new(DMatrix::from_row_slice(2, 1, &[1.0, 3.0]), DVector::from_vec(vec![0.0, 2.0])).unwrap();
        let s = standardize(&d).unwrap();
        assert_eq!(s.y.as_slice(), &[-1.0, 1.0]);
        let twice = standardize(&s).unwrap();
        assert!((&twice.x - &s.x).amax() < 1e-12);
        assert!((&twice.y - &s.y).amax() < 1e-12);
        let back = destandardize(&twice);
        assert!((&back.x - &d.x).amax() < 1e-12);
    }

    #[test]
    fn standardize_degenerate() {
        let d = Dataset::new(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 1.0, 3.0]), DVector::from_vec(vec![0.0, 2.0])).unwrap();
        assert!(matches!(standardize(&d), Err(GpError::DegenerateColumn(0))));
    }

    fn grid(n: usize) -> Dataset {
        let x = DMatrix::from_fn(n, 2, |i, j| (i * (j + 2)) as f64 * 0.37 % 5.0 + i as f64 * 0.01);
        let y = DVector::from_fn(n, |i, _| i as f64);
        Dataset::new(x, y).unwrap()
    }

    #[test]
    fn split_sizes_and_determinism() {
        let d = grid(23);
        let (tr, te) = split(&d, 0.3, 5).unwrap();
        assert_eq!(te.len(), 6);
        assert_eq!(tr.len(), 17);
        let (tr2, _) = split(&d, 0.3, 5).unwrap();
        assert_eq!(tr.y, tr2.y);
        let mut all: Vec<f64> = tr.y.iter().chain(te.y.iter()).copied().collect();
        all.sort_by(f64::total_cmp);
        assert_eq!(all, (0..23).map(|i| i as f64).collect::<Vec<_>>());
        assert!(split(&d, 1.0, 0).is_err());
    }

    #[test]
    fn kmeans_all_points_and_blobs() {
        let d = grid(12);
        let c = init_inducing_kmeans(&d, 12, 3).unwrap();
        let mut a: Vec<f64> = c.column(0).iter().copied().collect();
        let mut b: Vec<f64> = d.x.column(0).iter().copied().collect();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        assert_eq!(a, b);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = DMatrix::from_fn(200, 2, |i, _| if i < 100 { -5.0 } else { 5.0 } + rng.random_range(-0.5..0.5));
        let d = Dataset::new(x.clone(), DVector::zeros(200)).unwrap();
        let c = init_inducing_kmeans(&d, 2, 9).unwrap();
        let m0 = x.rows(0, 100).row_mean();
        let m1 = x.rows(100, 100).row_mean();
        for k in 0..2 {
            let r = c.row(k);
            let e = (r - &m0).norm().min((r - &m1).norm());
            assert!(e < 1e-3);
        }
        assert_eq!(init_inducing_kmeans(&d, 2, 9).unwrap(), c);
    }

    #[test]
    fn median_lengthscale() {
        let d = Dataset::new(DMatrix::from_row_slice(2, 1, &[0.0, 2.0]), DVector::from_vec(vec![0.0, 1.0])).unwrap();
        assert_relative_eq!(init_lengthscales_median(&d, 0).unwrap().lengthscales()[0], 2.0, max_relative = 1e-15);
        let g = grid(15);
        let mut scaled = g.clone();
        scaled.x *= 3.0;
        let a = init_lengthscales_median(&g, 0).unwrap().lengthscales()[0];
        let b = init_lengthscales_median(&scaled, 0).unwrap().lengthscales()[1];
        assert_relative_eq!(b, 3.0 * a, max_relative = 1e-12);
    }

    #[test]
    fn subset_rows_come_from_x() {
        let d = grid(10);
        let z = init_inducing_subset(&d, 4, 2).unwrap();
        assert_eq!(z, init_inducing_subset(&d, 4, 2).unwrap());
        for r in 0..4 {
            assert!((0..10).any(|i| d.x.row(i) == z.row(r)));
        }
        assert_eq!(init_inducing_subset(&d, 10, 2).unwrap().nrows(), 10);
        assert!(init_inducing_subset(&d, 11, 2).is_err());
    }
}
