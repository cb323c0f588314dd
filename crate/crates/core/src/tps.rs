//! Landmark-guided thin-plate-spline registration.
//!
//! The transform is assembled from target landmarks `l_T` and source landmarks
//! `l_S` and maps the target frame into the source frame, so a registered image
//! is produced by pulling source intensities:
//! `I_R(x) = I_S(T(x))`.
//!
//! Kernels: `U(r) = r^2 log r` in 2D and `U(r) = r` in 3D (the biharmonic
//! choice for volumes). The system is the full augmented matrix
//!
//! ```text
//! A = [ K   P ]    B = [ l_S ]
//!     [ P^T 0 ]        [  0  ]
//! ```
//!
//! with `K_ij = U(|l_T,i - l_T,j|)` and `P` row `i` equal to `(1, l_T,i)`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{frobenius_product, Lu};
use crate::tensor::{grid_points, ImageTensor};

/// `K x d` landmark coordinates, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet {
    dim: usize,
    points: Vec<f64>,
}

impl LandmarkSet {
    pub fn new(dim: usize, points: Vec<f64>) -> Result<Self> {
        if dim == 0 || points.len() % dim != 0 {
            return Err(Error::DimensionMismatch(format!(
                "{} coordinates do not form points of dimension {dim}",
                points.len()
            )));
        }
        if let Some(i) = points.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self { dim, points })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::DimensionMismatch("ragged landmark rows".into()));
        }
        Self::new(dim, rows.concat())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, k: usize) -> &[f64] {
        &self.points[k * self.dim..(k + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.points
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.points.chunks_exact(self.dim)
    }

    /// Copy with row `k` removed.
    pub fn without(&self, k: usize) -> Self {
        let mut points = self.points.clone();
        points.drain(k * self.dim..(k + 1) * self.dim);
        Self {
            dim: self.dim,
            points,
        }
    }

    /// Copy keeping only the listed rows, in the listed order.
    pub fn select(&self, rows: &[usize]) -> Self {
        let points = rows.iter().flat_map(|&k| self.point(k).iter().copied()).collect();
        Self {
            dim: self.dim,
            points,
        }
    }

    pub fn concat(&self, other: &LandmarkSet) -> Result<Self> {
        if other.dim != self.dim {
            return Err(Error::DimensionMismatch(format!(
                "cannot join {}-d and {}-d landmarks",
                self.dim, other.dim
            )));
        }
        let mut points = self.points.clone();
        points.extend_from_slice(&other.points);
        Ok(Self {
            dim: self.dim,
            points,
        })
    }

    /// Text form: header `K d`, then one point per line.
    pub fn to_text(&self) -> String {
        let mut s = format!("{} {}\n", self.len(), self.dim);
        for p in self.iter() {
            let line: Vec<String> = p.iter().map(|v| format!("{v:.17e}")).collect();
            let _ = writeln!(s, "{}", line.join(" "));
        }
        s
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty landmark file".into()))?;
        let head: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| Error::Parse(format!("bad header token {t:?}"))))
            .collect::<Result<_>>()?;
        let [k, d] = head[..] else {
            return Err(Error::Parse(format!("header must be \"K d\", got {header:?}")));
        };
        let mut points = Vec::with_capacity(k * d);
        for (row, line) in lines.enumerate() {
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| Error::Parse(format!("bad coordinate {t:?}"))))
                .collect::<Result<_>>()?;
            if vals.len() != d {
                return Err(Error::Parse(format!(
                    "line {} has {} values, expected {d}",
                    row + 2,
                    vals.len()
                )));
            }
            points.extend(vals);
        }
        if points.len() != k * d {
            return Err(Error::Parse(format!(
                "header declares {k} points, found {}",
                points.len() / d.max(1)
            )));
        }
        Self::new(d, points)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_text(&text)
    }
}

/// Radial kernel `U(r)`.
pub fn tps_kernel(r: f64, dim: usize) -> f64 {
    kernel_from_sq(r * r, dim)
}

/// `U` evaluated from the squared radius, avoiding a square root in 2D.
#[inline]
pub fn kernel_from_sq(r2: f64, dim: usize) -> f64 {
    if r2 <= 0.0 {
        0.0
    } else if dim == 2 {
        0.5 * r2 * r2.ln()
    } else {
        r2.sqrt()
    }
}

/// `U'(r) / r` from the squared radius; zero at `r = 0`.
#[inline]
pub fn kernel_slope_over_r(r2: f64, dim: usize) -> f64 {
    if r2 <= 0.0 {
        0.0
    } else if dim == 2 {
        r2.ln() + 1.0
    } else {
        1.0 / r2.sqrt()
    }
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Number of rows of the augmented system for `k` landmarks in `dim` dimensions.
pub fn system_size(k: usize, dim: usize) -> usize {
    k + dim + 1
}

/// Builds the symmetric system matrix from target landmarks.
pub fn system_matrix(targets: &LandmarkSet) -> DMatrix<f64> {
    let k = targets.len();
    let d = targets.dim();
    let n = system_size(k, d);
    let mut a = DMatrix::zeros(n, n);
    for i in 0..k {
        let pi = targets.point(i);
        for j in i + 1..k {
            let u = kernel_from_sq(sq_dist(pi, targets.point(j)), d);
            a[(i, j)] = u;
            a[(j, i)] = u;
        }
        a[(i, k)] = 1.0;
        a[(k, i)] = 1.0;
        for (c, &v) in pi.iter().enumerate() {
            a[(i, k + 1 + c)] = v;
            a[(k + 1 + c, i)] = v;
        }
    }
    a
}

/// Right-hand side `[l_S; 0]`.
pub fn rhs_matrix(sources: &LandmarkSet) -> DMatrix<f64> {
    let k = sources.len();
    let d = sources.dim();
    let mut b = DMatrix::zeros(system_size(k, d), d);
    for i in 0..k {
        for (c, &v) in sources.point(i).iter().enumerate() {
            b[(i, c)] = v;
        }
    }
    b
}

/// Evaluates the transform with weights `w` (rows: K kernel weights, constant, linear).
#[inline]
pub fn map_point(weights: &DMatrix<f64>, targets: &LandmarkSet, x: &[f64], out: &mut [f64]) {
    let k = targets.len();
    let d = targets.dim();
    for a in 0..d {
        let mut v = weights[(k, a)];
        for (b, &xb) in x.iter().enumerate() {
            v += weights[(k + 1 + b, a)] * xb;
        }
        out[a] = v;
    }
    for (j, t) in targets.iter().enumerate() {
        let u = kernel_from_sq(sq_dist(x, t), d);
        if u != 0.0 {
            for a in 0..d {
                out[a] += weights[(j, a)] * u;
            }
        }
    }
}

/// Assembled (and possibly solved) thin-plate-spline system.
#[derive(Debug, Clone)]
pub struct TpsModel {
    targets: LandmarkSet,
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    weights: Option<DMatrix<f64>>,
}

/// Builds `A` from `l_T` and `B` from `l_S`.
pub fn assemble(targets: &LandmarkSet, sources: &LandmarkSet) -> Result<TpsModel> {
    if targets.dim() != sources.dim() || targets.len() != sources.len() {
        return Err(Error::DimensionMismatch(format!(
            "target set is {}x{}, source set is {}x{}",
            targets.len(),
            targets.dim(),
            sources.len(),
            sources.dim()
        )));
    }
    let required = targets.dim() + 1;
    if targets.len() < required {
        return Err(Error::TooFewLandmarks {
            found: targets.len(),
            required,
        });
    }
    Ok(TpsModel {
        a: system_matrix(targets),
        b: rhs_matrix(sources),
        targets: targets.clone(),
        weights: None,
    })
}

impl TpsModel {
    pub fn system(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn rhs(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn targets(&self) -> &LandmarkSet {
        &self.targets
    }

    pub fn dim(&self) -> usize {
        self.targets.dim()
    }

    pub fn weights(&self) -> Result<&DMatrix<f64>> {
        self.weights.as_ref().ok_or(Error::Unsolved)
    }

    /// Nonlinear kernel weights (first K rows of `W`).
    pub fn kernel_weights(&self) -> Result<DMatrix<f64>> {
        let w = self.weights()?;
        Ok(w.rows(0, self.targets.len()).into_owned())
    }

    /// Affine part as `(translation, linear)`, with `T(x)_a = t_a + sum_b L[b, a] x_b`.
    pub fn affine_part(&self) -> Result<(Vec<f64>, DMatrix<f64>)> {
        let w = self.weights()?;
        let k = self.targets.len();
        let d = self.dim();
        let t = (0..d).map(|a| w[(k, a)]).collect();
        Ok((t, w.rows(k + 1, d).into_owned()))
    }

    /// Dense LU solve of `A W = B`.
    pub fn solve(mut self) -> Result<Self> {
        let lu = Lu::factor(&self.a)?;
        self.weights = Some(lu.solve(&self.b));
        Ok(self)
    }

    pub fn evaluate(&self, x: &[f64]) -> Result<Vec<f64>> {
        let w = self.weights()?;
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "point has {} coordinates, model is {}-d",
                x.len(),
                self.dim()
            )));
        }
        let mut out = vec![0.0; self.dim()];
        map_point(w, &self.targets, x, &mut out);
        Ok(out)
    }

    /// Transforms every point of a flat `N x d` list.
    pub fn map_points(&self, coords: &[f64]) -> Result<Vec<f64>> {
        let w = self.weights()?;
        let d = self.dim();
        let mut out = vec![0.0; coords.len()];
        for (x, y) in coords.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            map_point(w, &self.targets, x, y);
        }
        Ok(out)
    }
}

/// Backward warp of `source` onto a grid of `out_dims` in the target frame.
pub fn warp(model: &TpsModel, source: &ImageTensor, out_dims: &[usize]) -> Result<ImageTensor> {
    let d = model.dim();
    if source.ndim() != d || out_dims.len() != d {
        return Err(Error::DimensionMismatch(format!(
            "model is {d}-d, source is {}-d, output is {}-d",
            source.ndim(),
            out_dims.len()
        )));
    }
    let w = model.weights()?;
    let grid = grid_points(out_dims);
    let mut y = vec![0.0; d];
    let data = grid
        .chunks_exact(d)
        .map(|x| {
            map_point(w, &model.targets, x, &mut y);
            source.sample_point(&y)
        })
        .collect();
    ImageTensor::new(out_dims.to_vec(), data)
}

/// Solves and warps in one go.
pub fn register(
    targets: &LandmarkSet,
    sources: &LandmarkSet,
    source: &ImageTensor,
    out_dims: &[usize],
) -> Result<(TpsModel, ImageTensor)> {
    let model = assemble(targets, sources)?.solve()?;
    let warped = warp(&model, source, out_dims)?;
    Ok((model, warped))
}

/// Frobenius condition number `|A|_F |A^-1|_F`.
pub fn condition_frobenius(a: &DMatrix<f64>) -> Result<f64> {
    let inv = Lu::factor(a)?.inverse();
    Ok(frobenius_product(a, &inv))
}

fn check_same_dims(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::DimensionMismatch(format!(
            "images have dims {:?} and {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Mean squared intensity difference, the training match term.
pub fn registration_loss(registered: &ImageTensor, target: &ImageTensor) -> Result<f64> {
    check_same_dims(registered, target)?;
    let sse: f64 = registered
        .data()
        .iter()
        .zip(target.data())
        .map(|(r, t)| (r - t) * (r - t))
        .sum();
    Ok(sse / target.len() as f64)
}

/// `|I_R - I_T|^2 / |I_T|^2`; multiply by 100 for a percentage.
pub fn relative_l2(registered: &ImageTensor, target: &ImageTensor) -> Result<f64> {
    check_same_dims(registered, target)?;
    let sse: f64 = registered
        .data()
        .iter()
        .zip(target.data())
        .map(|(r, t)| (r - t) * (r - t))
        .sum();
    let norm: f64 = target.data().iter().map(|t| t * t).sum();
    if norm == 0.0 {
        return Ok(if sse == 0.0 { 0.0 } else { f64::INFINITY });
    }
    Ok(sse / norm)
}
