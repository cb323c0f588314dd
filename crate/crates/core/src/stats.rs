//! Shape statistics on flattened landmark vectors: PCA, Mahalanobis Z-scores
//! and spectral clustering.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::tps::LandmarkSet;

/// One row per shape, landmark-major then axis.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeMatrix {
    pub ids: Vec<String>,
    /// Class labels; empty strings when unknown.
    pub labels: Vec<String>,
    pub dim: usize,
    pub data: DMatrix<f64>,
}

const AXES: [char; 3] = ['x', 'y', 'z'];

impl ShapeMatrix {
    pub fn new(ids: Vec<String>, labels: Vec<String>, dim: usize, data: DMatrix<f64>) -> Result<Self> {
        if ids.len() != data.nrows() || labels.len() != data.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "{} ids and {} labels for {} rows",
                ids.len(),
                labels.len(),
                data.nrows()
            )));
        }
        if !(2..=3).contains(&dim) || data.ncols() % dim != 0 {
            return Err(Error::DimensionMismatch(format!("{} columns are not {dim}-d points", data.ncols())));
        }
        Ok(Self { ids, labels, dim, data })
    }

    /// Stacks landmark sets, optionally keeping only the `kept` landmark rows.
    pub fn from_landmarks(
        ids: Vec<String>,
        labels: Vec<String>,
        sets: &[LandmarkSet],
        kept: Option<&[usize]>,
    ) -> Result<Self> {
        let first = sets.first().ok_or_else(|| Error::InvalidArgument("no shapes".into()))?;
        let dim = first.dim();
        let rows: Vec<LandmarkSet> = match kept {
            Some(idx) => {
                if let Some(&bad) = idx.iter().find(|&&i| sets.iter().any(|s| i >= s.len())) {
                    return Err(Error::InvalidArgument(format!("kept index {bad} out of range")));
                }
                sets.iter().map(|s| s.select(idx)).collect()
            }
            None => sets.to_vec(),
        };
        let width = rows[0].as_slice().len();
        if rows.iter().any(|r| r.as_slice().len() != width || r.dim() != dim) {
            return Err(Error::DimensionMismatch("landmark sets differ in size".into()));
        }
        let data = DMatrix::from_fn(rows.len(), width, |i, j| rows[i].as_slice()[j]);
        Self::new(ids, labels, dim, data)
    }

    pub fn nrows(&self) -> usize {
        self.data.nrows()
    }

    pub fn row(&self, i: usize) -> DVector<f64> {
        self.data.row(i).transpose()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,label");
        for j in 0..self.data.ncols() {
            let _ = write!(s, ",{}{}", AXES[j % self.dim], j / self.dim);
        }
        s.push('\n');
        for i in 0..self.nrows() {
            s.push_str(&self.ids[i]);
            s.push(',');
            s.push_str(&self.labels[i]);
            for v in self.data.row(i).iter() {
                let _ = write!(s, ",{v:.17e}");
            }
            s.push('\n');
        }
        s
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<&str> = lines
            .next()
            .ok_or_else(|| Error::Parse("empty shape file".into()))?
            .split(',')
            .map(str::trim)
            .collect();
        if header.len() < 4 || header[0] != "id" || header[1] != "label" {
            return Err(Error::Parse("shape header must start with id,label,x0,y0".into()));
        }
        let dim = if header.get(4) == Some(&"z0") { 3 } else { 2 };
        let cols = header.len() - 2;
        for (j, h) in header[2..].iter().enumerate() {
            let want = format!("{}{}", AXES[j % dim], j / dim);
            if *h != want {
                return Err(Error::Parse(format!("shape header column {}: expected {want}, found {h}", j + 3)));
            }
        }
        if cols % dim != 0 {
            return Err(Error::Parse(format!("{cols} coordinate columns are not whole {dim}-d points")));
        }
        let (mut ids, mut labels, mut values) = (Vec::new(), Vec::new(), Vec::new());
        for (n, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != header.len() {
                return Err(Error::Parse(format!("shape row {}: {} fields, expected {}", n + 1, f.len(), header.len())));
            }
            ids.push(f[0].to_string());
            labels.push(f[1].to_string());
            for v in &f[2..] {
                values.push(
                    v.parse::<f64>()
                        .map_err(|_| Error::Parse(format!("shape row {}: bad number {v:?}", n + 1)))?,
                );
            }
        }
        let data = DMatrix::from_row_slice(ids.len(), cols, &values);
        Self::new(ids, labels, dim, data)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse_csv(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

fn column_mean(x: &DMatrix<f64>) -> DVector<f64> {
    x.row_mean().transpose()
}

fn centered(x: &DMatrix<f64>, mean: &DVector<f64>) -> DMatrix<f64> {
    let mut c = x.clone();
    for mut row in c.row_iter_mut() {
        row -= mean.transpose();
    }
    c
}

/// Principal axes of a shape matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: DVector<f64>,
    /// All principal axes as rows, ordered by decreasing variance.
    pub components: DMatrix<f64>,
    pub variances: Vec<f64>,
    /// Number of leading components that reach the variance target.
    pub retained: usize,
}

/// Eigen-decomposition of the sample covariance (divisor `n - 1`).
///
/// Each axis is flipped so its largest-magnitude entry is positive.
pub fn fit_pca(x: &DMatrix<f64>, variance_target: f64) -> Result<PcaModel> {
    let n = x.nrows();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("PCA needs at least 2 samples, got {n}")));
    }
    if !(variance_target > 0.0 && variance_target <= 1.0) {
        return Err(Error::InvalidArgument(format!("variance target {variance_target} is outside (0, 1]")));
    }
    let mean = column_mean(x);
    let xc = centered(x, &mean);
    let cov = (xc.transpose() * &xc) / (n - 1) as f64;
    let p = cov.nrows();
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut components = DMatrix::zeros(p, p);
    let mut variances = Vec::with_capacity(p);
    for (r, &i) in order.iter().enumerate() {
        let mut v = eig.eigenvectors.column(i).into_owned();
        let lead = v.iter().enumerate().fold(0, |best, (j, x)| if x.abs() > v[best].abs() { j } else { best });
        if v[lead] < 0.0 {
            v = -v;
        }
        components.set_row(r, &v.transpose());
        variances.push(eig.eigenvalues[i].max(0.0));
    }
    let total: f64 = variances.iter().sum();
    let retained = if total <= 0.0 {
        1
    } else {
        let goal = variance_target * total * (1.0 - 1e-12);
        let mut acc = 0.0;
        variances
            .iter()
            .position(|v| {
                acc += v;
                acc >= goal
            })
            .map_or(p, |i| i + 1)
    };
    Ok(PcaModel {
        mean,
        components,
        variances,
        retained,
    })
}

impl PcaModel {
    pub fn explained_fraction(&self) -> f64 {
        let total: f64 = self.variances.iter().sum();
        if total <= 0.0 {
            1.0
        } else {
            self.variances[..self.retained].iter().sum::<f64>() / total
        }
    }

    fn check(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.mean.len() {
            return Err(Error::DimensionMismatch(format!(
                "shape vector of {} values, model expects {}",
                x.len(),
                self.mean.len()
            )));
        }
        Ok(())
    }

    /// Scores on the first `count` axes.
    pub fn project_onto(&self, x: &DVector<f64>, count: usize) -> Result<DVector<f64>> {
        self.check(x)?;
        let c = x - &self.mean;
        Ok(self.components.rows(0, count.min(self.components.nrows())) * c)
    }

    /// Scores on the retained axes.
    pub fn project(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.project_onto(x, self.retained)
    }

    pub fn reconstruct(&self, scores: &DVector<f64>) -> DVector<f64> {
        &self.mean + self.components.rows(0, scores.len()).transpose() * scores
    }
}

/// Mean and regularized inverse covariance of a sample cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct Mahalanobis {
    pub mean: DVector<f64>,
    pub inverse_covariance: DMatrix<f64>,
}

/// Diagonal loading relative to the mean variance.
pub const COVARIANCE_RIDGE: f64 = 1e-8;

impl Mahalanobis {
    /// Rows of `samples` are observations.
    pub fn fit(samples: &DMatrix<f64>) -> Result<Self> {
        let n = samples.nrows();
        if n < 2 {
            return Err(Error::InvalidArgument("covariance needs at least 2 samples".into()));
        }
        let mean = column_mean(samples);
        let c = centered(samples, &mean);
        let mut cov = (c.transpose() * &c) / (n - 1) as f64;
        let m = cov.nrows();
        let ridge = COVARIANCE_RIDGE * cov.trace() / m as f64;
        let ridge = if ridge > 0.0 { ridge } else { COVARIANCE_RIDGE };
        for i in 0..m {
            cov[(i, i)] += ridge;
        }
        let inverse_covariance = cov
            .try_inverse()
            .ok_or(Error::Singular { pivot: 0.0, threshold: ridge })?;
        Ok(Self { mean, inverse_covariance })
    }

    pub fn distance(&self, x: &DVector<f64>) -> Result<f64> {
        if x.len() != self.mean.len() {
            return Err(Error::DimensionMismatch(format!("{} values, expected {}", x.len(), self.mean.len())));
        }
        let d = x - &self.mean;
        Ok((d.transpose() * &self.inverse_covariance * &d)[(0, 0)].max(0.0).sqrt())
    }
}

/// PCA of a base cohort followed by Mahalanobis distance in the retained space.
#[derive(Debug, Clone, PartialEq)]
pub struct ZScoreModel {
    pub pca: PcaModel,
    pub base: Mahalanobis,
}

impl ZScoreModel {
    pub fn fit(base: &DMatrix<f64>, variance_target: f64) -> Result<Self> {
        let pca = fit_pca(base, variance_target)?;
        let scores = project_rows(&pca, base)?;
        let base = Mahalanobis::fit(&scores)?;
        Ok(Self { pca, base })
    }

    pub fn zscore(&self, x: &DVector<f64>) -> Result<f64> {
        self.base.distance(&self.pca.project(x)?)
    }
}

fn project_rows(pca: &PcaModel, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let m = pca.retained;
    let mut out = DMatrix::zeros(x.nrows(), m);
    for i in 0..x.nrows() {
        out.set_row(i, &pca.project(&x.row(i).transpose())?.transpose());
    }
    Ok(out)
}

/// First two principal coordinates of every row (second is zero for 1-column data).
pub fn embed_2d(x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let pca = fit_pca(x, 1.0)?;
    let mut out = DMatrix::zeros(x.nrows(), 2);
    for i in 0..x.nrows() {
        let s = pca.project_onto(&x.row(i).transpose(), 2)?;
        for (j, v) in s.iter().enumerate() {
            out[(i, j)] = *v;
        }
    }
    Ok(out)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn rows_of(x: &DMatrix<f64>) -> Vec<Vec<f64>> {
    x.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Fitted spectral clustering: training rows, their labels and the spectral embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralClustering {
    pub labels: Vec<usize>,
    /// Row-normalized eigenvectors, one row per sample.
    pub embedding: DMatrix<f64>,
    pub sigma: f64,
    training: Vec<Vec<f64>>,
}

const KMEANS_ITERATIONS: usize = 100;

/// Lloyd iterations from farthest-point seeds; the first seed is the row
/// farthest from the centroid. Ties go to the lowest index.
pub fn kmeans(points: &[Vec<f64>], k: usize) -> Vec<usize> {
    let n = points.len();
    let dim = points[0].len();
    let centroid: Vec<f64> = (0..dim).map(|j| points.iter().map(|p| p[j]).sum::<f64>() / n as f64).collect();
    let argmax = |score: &dyn Fn(usize) -> f64| {
        (0..n).fold(0, |best, i| if score(i) > score(best) { i } else { best })
    };
    let mut centers = vec![points[argmax(&|i| sq_dist(&points[i], &centroid))].clone()];
    while centers.len() < k {
        let next = argmax(&|i| {
            centers.iter().map(|c| sq_dist(&points[i], c)).fold(f64::INFINITY, f64::min)
        });
        centers.push(points[next].clone());
    }
    let nearest = |p: &[f64], centers: &[Vec<f64>]| {
        (0..centers.len()).fold(0, |best, c| {
            if sq_dist(p, &centers[c]) < sq_dist(p, &centers[best]) {
                c
            } else {
                best
            }
        })
    };
    let mut labels: Vec<usize> = points.iter().map(|p| nearest(p, &centers)).collect();
    for _ in 0..KMEANS_ITERATIONS {
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = points.iter().zip(&labels).filter(|(_, &l)| l == c).map(|(p, _)| p).collect();
            if !members.is_empty() {
                for j in 0..dim {
                    center[j] = members.iter().map(|p| p[j]).sum::<f64>() / members.len() as f64;
                }
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centers)).collect();
        if next == labels {
            break;
        }
        labels = next;
    }
    labels
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Normalized spectral clustering with a Gaussian affinity whose width is the
/// median pairwise distance.
pub fn spectral_cluster(x: &DMatrix<f64>, k: usize) -> Result<SpectralClustering> {
    let n = x.nrows();
    if k < 2 || k > n {
        return Err(Error::InvalidArgument(format!("cluster count {k} must lie in 2..={n}")));
    }
    let rows = rows_of(x);
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in 0..i {
            dists.push(sq_dist(&rows[i], &rows[j]).sqrt());
        }
    }
    let sigma = match median(dists) {
        s if s > 0.0 => s,
        _ => 1.0,
    };
    let w = DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            0.0
        } else {
            (-sq_dist(&rows[i], &rows[j]) / (2.0 * sigma * sigma)).exp()
        }
    });
    let inv_sqrt_deg: Vec<f64> = (0..n)
        .map(|i| {
            let d: f64 = w.row(i).sum();
            if d > 0.0 {
                1.0 / d.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let laplacian = DMatrix::from_fn(n, n, |i, j| {
        let delta = if i == j { 1.0 } else { 0.0 };
        delta - inv_sqrt_deg[i] * w[(i, j)] * inv_sqrt_deg[j]
    });
    let eig = SymmetricEigen::new(laplacian);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]).then(a.cmp(&b)));
    let mut embedding = DMatrix::from_fn(n, k, |i, c| eig.eigenvectors[(i, order[c])]);
    for mut row in embedding.row_iter_mut() {
        let norm = row.norm();
        if norm > 0.0 {
            row /= norm;
        }
    }
    let labels = kmeans(&rows_of(&embedding), k);
    Ok(SpectralClustering {
        labels,
        embedding,
        sigma,
        training: rows,
    })
}

impl SpectralClustering {
    /// Label of the nearest training row (lowest index on ties).
    pub fn assign(&self, x: &[f64]) -> Result<usize> {
        if x.len() != self.training[0].len() {
            return Err(Error::DimensionMismatch(format!(
                "query has {} values, training rows have {}",
                x.len(),
                self.training[0].len()
            )));
        }
        let best = (0..self.training.len()).fold(0, |best, i| {
            if sq_dist(x, &self.training[i]) < sq_dist(x, &self.training[best]) {
                i
            } else {
                best
            }
        });
        Ok(self.labels[best])
    }
}

/// Fraction of matching labels under the best one-to-one relabeling (brute force).
pub fn agreement_up_to_permutation(a: &[usize], b: &[usize]) -> f64 {
    let k = a.iter().chain(b).copied().max().map_or(0, |m| m + 1);
    let mut perm: Vec<usize> = (0..k).collect();
    let mut best = 0usize;
    permute(&mut perm, 0, &mut |p| {
        let hits = a.iter().zip(b).filter(|(&x, &y)| p[x] == y).count();
        best = best.max(hits);
    });
    best as f64 / a.len().max(1) as f64
}

fn permute(p: &mut Vec<usize>, i: usize, f: &mut impl FnMut(&[usize])) {
    if i == p.len() {
        f(p);
        return;
    }
    for j in i..p.len() {
        p.swap(i, j);
        permute(p, i + 1, f);
        p.swap(i, j);
    }
}
