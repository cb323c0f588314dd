//! A small tape-based reverse-mode differentiation engine.
//!
//! Nodes hold whole tensors. Every operation appends one node whose inputs are
//! earlier nodes, so reverse index order is a valid reverse topological order
//! and gradient accumulation happens in a fixed sequence.

pub mod conv;

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{frobenius_norm, frobenius_product, gemm, Lu};
use crate::tensor::ImageTensor;
use crate::tps::{kernel_from_sq, kernel_slope_over_r, system_size};
use conv::{conv_backward, conv_forward, ConvGeometry};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Constant,
    Conv {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeometry,
    },
    Dense {
        input: Var,
        weights: Var,
        bias: Var,
    },
    Relu(Var),
    Tanh(Var),
    Reshape(Var),
    AppendRows(Var),
    PadRows(Var),
    Add(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    SumSquares(Var),
    Mse {
        input: Var,
        target: Arc<Vec<f64>>,
    },
    TpsSystem {
        targets: Var,
    },
    Solve {
        a: Var,
        b: Var,
        lu: Lu,
    },
    Condition {
        a: Var,
        inverse: DMatrix<f64>,
        norm_a: f64,
        norm_inv: f64,
    },
    TpsMap {
        weights: Var,
        targets: Var,
        points: Arc<Vec<f64>>,
        kern: Vec<f64>,
    },
    Sample {
        coords: Var,
        slopes: Vec<f64>,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Records a computation for a single backward sweep.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every node that needed one.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Points per block when forming the `[N, K]` landmark-gradient factors.
const TPS_BLOCK: usize = 4096;

/// Kernel values between `x` and every row of `targets`.
#[inline]
fn radial_row(x: &[f64], targets: &[f64], out: &mut [f64]) {
    match *x {
        [x0, x1] => {
            for (u, c) in out.iter_mut().zip(targets.chunks_exact(2)) {
                *u = kernel_from_sq((x0 - c[0]).powi(2) + (x1 - c[1]).powi(2), 2);
            }
        }
        _ => {
            let d = x.len();
            for (u, c) in out.iter_mut().zip(targets.chunks_exact(d)) {
                *u = kernel_from_sq(x.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum(), d);
            }
        }
    }
}

/// `U'(r) / r` recovered from a cached `U(r)` and `r^2` without another logarithm.
#[inline]
fn slope_from_kernel(u: f64, r2: f64, dim: usize) -> f64 {
    if r2 <= 0.0 {
        0.0
    } else if dim == 2 {
        2.0 * u / r2 + 1.0
    } else {
        1.0 / u
    }
}

fn shape_err(msg: String) -> Error {
    Error::DimensionMismatch(msg)
}

/// Row-major data into a matrix.
fn to_mat(rows: usize, cols: usize, data: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, data)
}

/// Matrix into row-major data.
fn from_mat(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    /// Trainable input.
    pub fn leaf(&mut self, shape: Vec<usize>, value: Vec<f64>) -> Var {
        self.push(shape, value, Op::Leaf, true)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, shape: Vec<usize>, value: Vec<f64>) -> Var {
        self.push(shape, value, Op::Constant, false)
    }

    /// 3-tap cross-correlation with zero padding 1.
    ///
    /// `input` is `[C, spatial..]` (2 or 3 spatial axes), `kernel` is
    /// `[O, C, taps]` with 9 or 27 taps, `bias` is `[O]`.
    pub fn conv(&mut self, input: Var, kernel: Var, bias: Var, stride: usize) -> Result<Var> {
        let in_shape = self.shape(input).to_vec();
        if !(3..=4).contains(&in_shape.len()) {
            return Err(shape_err(format!("conv input must be [C, spatial..], got {in_shape:?}")));
        }
        if !(1..=2).contains(&stride) {
            return Err(Error::InvalidArgument(format!("conv stride {stride} not in {{1, 2}}")));
        }
        let k_shape = self.shape(kernel).to_vec();
        let geom = ConvGeometry::new(in_shape[0], *k_shape.first().unwrap_or(&0), &in_shape[1..], stride);
        if k_shape != [geom.out_channels, geom.in_channels, geom.taps_per_kernel()] {
            return Err(shape_err(format!(
                "kernel shape {k_shape:?} does not fit input {in_shape:?} (expected [O, {}, {}])",
                geom.in_channels,
                geom.taps_per_kernel()
            )));
        }
        if self.shape(bias) != [geom.out_channels] {
            return Err(shape_err(format!("bias shape {:?} for {} channels", self.shape(bias), geom.out_channels)));
        }
        let out = conv_forward(&geom, self.value(input), self.value(kernel), self.value(bias));
        let mut shape = vec![geom.out_channels];
        shape.extend(geom.output_spatial(in_shape.len() == 3));
        let rg = self.needs(input) || self.needs(kernel) || self.needs(bias);
        Ok(self.push(shape, out, Op::Conv { input, kernel, bias, geom }, rg))
    }

    /// `W x + b` with `x` flattened; `weights` is `[m, n]`.
    pub fn dense(&mut self, input: Var, weights: Var, bias: Var) -> Result<Var> {
        let n = self.value(input).len();
        let ws = self.shape(weights).to_vec();
        if ws.len() != 2 || ws[1] != n || self.shape(bias) != [ws[0]] {
            return Err(shape_err(format!(
                "dense: input of {n} values, weights {ws:?}, bias {:?}",
                self.shape(bias)
            )));
        }
        let (m, x, w, b) = (ws[0], self.value(input), self.value(weights), self.value(bias));
        let out: Vec<f64> = (0..m)
            .map(|i| b[i] + w[i * n..(i + 1) * n].iter().zip(x).map(|(a, c)| a * c).sum::<f64>())
            .collect();
        let rg = self.needs(input) || self.needs(weights) || self.needs(bias);
        Ok(self.push(vec![m], out, Op::Dense { input, weights, bias }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.needs(x);
        self.push(shape, out, Op::Relu(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| v.tanh()).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.needs(x);
        self.push(shape, out, Op::Tanh(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(shape_err(format!("cannot reshape {:?} into {shape:?}", self.shape(x))));
        }
        let out = self.value(x).to_vec();
        let rg = self.needs(x);
        Ok(self.push(shape, out, Op::Reshape(x), rg))
    }

    /// Appends constant rows below a `[K, d]` matrix; the new rows get no gradient.
    pub fn append_rows(&mut self, x: Var, rows: &[f64]) -> Result<Var> {
        let [k, d] = self.shape(x)[..] else {
            return Err(shape_err(format!("append_rows needs [K, d], got {:?}", self.shape(x))));
        };
        if rows.len() % d != 0 {
            return Err(shape_err(format!("{} values are not rows of width {d}", rows.len())));
        }
        let mut out = self.value(x).to_vec();
        out.extend_from_slice(rows);
        let rg = self.needs(x);
        Ok(self.push(vec![k + rows.len() / d, d], out, Op::AppendRows(x), rg))
    }

    /// Appends `extra` zero rows below a `[K, d]` matrix.
    pub fn pad_rows(&mut self, x: Var, extra: usize) -> Result<Var> {
        let [k, d] = self.shape(x)[..] else {
            return Err(shape_err(format!("pad_rows needs [K, d], got {:?}", self.shape(x))));
        };
        let mut out = self.value(x).to_vec();
        out.resize((k + extra) * d, 0.0);
        let rg = self.needs(x);
        Ok(self.push(vec![k + extra, d], out, Op::PadRows(x), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!("add: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(shape, out, Op::Add(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).iter().map(|v| c * v).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.needs(x);
        self.push(shape, out, Op::Scale(x, c), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.needs(x);
        self.push(vec![1], vec![s], Op::Sum(x), rg)
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().map(|v| v * v).sum();
        let rg = self.needs(x);
        self.push(vec![1], vec![s], Op::SumSquares(x), rg)
    }

    /// Mean squared difference against a constant target.
    pub fn mse(&mut self, x: Var, target: Arc<Vec<f64>>) -> Result<Var> {
        if target.len() != self.value(x).len() {
            return Err(shape_err(format!(
                "mse: {} values against target of {}",
                self.value(x).len(),
                target.len()
            )));
        }
        let n = target.len() as f64;
        let s = self
            .value(x)
            .iter()
            .zip(target.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
        let rg = self.needs(x);
        Ok(self.push(vec![1], vec![s], Op::Mse { input: x, target }, rg))
    }

    /// Augmented thin-plate-spline system matrix built from `[K, d]` targets.
    pub fn tps_system(&mut self, targets: Var) -> Result<Var> {
        let [k, d] = self.shape(targets)[..] else {
            return Err(shape_err(format!("tps_system needs [K, d], got {:?}", self.shape(targets))));
        };
        if k < d + 1 {
            return Err(Error::TooFewLandmarks { found: k, required: d + 1 });
        }
        let set = crate::tps::LandmarkSet::new(d, self.value(targets).to_vec())?;
        let a = crate::tps::system_matrix(&set);
        let n = system_size(k, d);
        let rg = self.needs(targets);
        Ok(self.push(vec![n, n], from_mat(&a), Op::TpsSystem { targets }, rg))
    }

    /// Dense solve `A X = B`, differentiated implicitly.
    pub fn solve(&mut self, a: Var, b: Var) -> Result<Var> {
        let [n, n2] = self.shape(a)[..] else {
            return Err(shape_err(format!("solve needs a square matrix, got {:?}", self.shape(a))));
        };
        let [bn, m] = self.shape(b)[..] else {
            return Err(shape_err(format!("solve rhs must be 2-d, got {:?}", self.shape(b))));
        };
        if n != n2 || bn != n {
            return Err(shape_err(format!("solve: A {:?}, B {:?}", self.shape(a), self.shape(b))));
        }
        let lu = Lu::factor(&to_mat(n, n, self.value(a)))?;
        let x = lu.solve(&to_mat(n, m, self.value(b)));
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(vec![n, m], from_mat(&x), Op::Solve { a, b, lu }, rg))
    }

    /// Frobenius condition number `|A|_F |A^-1|_F`.
    pub fn condition(&mut self, a: Var) -> Result<Var> {
        let [n, n2] = self.shape(a)[..] else {
            return Err(shape_err(format!("condition needs a square matrix, got {:?}", self.shape(a))));
        };
        if n != n2 {
            return Err(shape_err(format!("condition: {n}x{n2} is not square")));
        }
        let am = to_mat(n, n, self.value(a));
        let inverse = Lu::factor(&am)?.inverse();
        let norm_a = frobenius_norm(&am);
        let norm_inv = frobenius_norm(&inverse);
        let rg = self.needs(a);
        Ok(self.push(
            vec![1],
            vec![frobenius_product(&am, &inverse)],
            Op::Condition { a, inverse, norm_a, norm_inv },
            rg,
        ))
    }

    /// Assembles and solves the spline system; returns `(A, W)`.
    pub fn tps_solve(&mut self, sources: Var, targets: Var) -> Result<(Var, Var)> {
        if self.shape(sources) != self.shape(targets) {
            return Err(shape_err(format!(
                "sources {:?} and targets {:?} differ",
                self.shape(sources),
                self.shape(targets)
            )));
        }
        let d = self.shape(targets)[1];
        let a = self.tps_system(targets)?;
        let b = self.pad_rows(sources, d + 1)?;
        let w = self.solve(a, b)?;
        Ok((a, w))
    }

    /// Evaluates the spline with weights `[K+d+1, d]` and centres `[K, d]` at
    /// fixed points (flat `N x d`).
    pub fn tps_map(&mut self, weights: Var, targets: Var, points: Arc<Vec<f64>>) -> Result<Var> {
        let [k, d] = self.shape(targets)[..] else {
            return Err(shape_err(format!("tps_map targets must be [K, d], got {:?}", self.shape(targets))));
        };
        if self.shape(weights) != [system_size(k, d), d] || points.len() % d != 0 {
            return Err(shape_err(format!(
                "tps_map: weights {:?}, targets {:?}, {} point coordinates",
                self.shape(weights),
                self.shape(targets),
                points.len()
            )));
        }
        let rg = self.needs(weights) || self.needs(targets);
        let n = points.len() / d;
        let w = self.value(weights);
        let t = self.value(targets);
        let mut kern = vec![0.0; n * k];
        let mut out = vec![0.0; n * d];
        for (p, (x, y)) in points.chunks_exact(d).zip(out.chunks_exact_mut(d)).enumerate() {
            radial_row(x, t, &mut kern[p * k..(p + 1) * k]);
            for a in 0..d {
                y[a] = w[k * d + a] + (0..d).map(|b| w[(k + 1 + b) * d + a] * x[b]).sum::<f64>();
            }
        }
        gemm(n, k, d, &kern, false, &w[..k * d], false, &mut out);
        if !rg {
            kern = Vec::new();
        }
        Ok(self.push(vec![n, d], out, Op::TpsMap { weights, targets, points, kern }, rg))
    }

    /// Multilinear resampling of a constant image at `[N, d]` coordinates.
    pub fn sample(&mut self, image: &ImageTensor, coords: Var) -> Result<Var> {
        let d = image.ndim();
        let cs = self.shape(coords).to_vec();
        if cs.len() != 2 || cs[1] != d {
            return Err(shape_err(format!("sample: coords {cs:?} for a {d}-d image")));
        }
        let rg = self.needs(coords);
        let c = self.value(coords);
        let n = cs[0];
        let mut out = Vec::with_capacity(n);
        let mut slopes = if rg { vec![0.0; n * d] } else { Vec::new() };
        for (i, p) in c.chunks_exact(d).enumerate() {
            if rg {
                out.push(image.sample_point_with_grad(p, Some(&mut slopes[i * d..(i + 1) * d])));
            } else {
                out.push(image.sample_point(p));
            }
        }
        Ok(self.push(vec![n], out, Op::Sample { coords, slopes }, rg))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rnode = &self.nodes[root.0];
        if rnode.value.len() != 1 {
            return Err(Error::NonScalarRoot(rnode.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(up) = grads[i].take() else {
                continue;
            };
            self.propagate(node, &up, &mut grads);
            grads[i] = Some(up);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, x)| *e += x),
            slot @ None => *slot = Some(g),
        }
    }

    /// Adds into the gradient slot of `v` in place, creating it zeroed if needed.
    fn accumulate_with(&self, grads: &mut [Option<Vec<f64>>], v: Var, len: usize, add: impl FnOnce(&mut [f64])) {
        if !self.needs(v) {
            return;
        }
        add(grads[v.0].get_or_insert_with(|| vec![0.0; len]));
    }

    fn propagate(&self, node: &Node, up: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Conv { input, kernel, bias, geom } => {
                let need_in = self.needs(*input);
                let (d_in, d_k, d_b) =
                    conv_backward(geom, self.value(*input), self.value(*kernel), up, need_in);
                if let Some(d_in) = d_in {
                    self.accumulate(grads, *input, d_in);
                }
                self.accumulate(grads, *kernel, d_k);
                self.accumulate(grads, *bias, d_b);
            }
            Op::Dense { input, weights, bias } => {
                let x = self.value(*input);
                let w = self.value(*weights);
                let n = x.len();
                if self.needs(*input) {
                    let mut dx = vec![0.0; n];
                    for (i, &g) in up.iter().enumerate() {
                        if g != 0.0 {
                            for (d, wv) in dx.iter_mut().zip(&w[i * n..(i + 1) * n]) {
                                *d += g * wv;
                            }
                        }
                    }
                    self.accumulate(grads, *input, dx);
                }
                if self.needs(*weights) {
                    self.accumulate_with(grads, *weights, w.len(), |dw| {
                        for (&g, row) in up.iter().zip(dw.chunks_exact_mut(n)) {
                            if g != 0.0 {
                                row.iter_mut().zip(x).for_each(|(d, xv)| *d += g * xv);
                            }
                        }
                    });
                }
                self.accumulate(grads, *bias, up.to_vec());
            }
            Op::Relu(x) => {
                let g = self
                    .value(*x)
                    .iter()
                    .zip(up)
                    .map(|(&v, &u)| if v > 0.0 { u } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, g);
            }
            Op::Tanh(x) => {
                let g = node.value.iter().zip(up).map(|(y, u)| u * (1.0 - y * y)).collect();
                self.accumulate(grads, *x, g);
            }
            Op::Reshape(x) => self.accumulate(grads, *x, up.to_vec()),
            Op::AppendRows(x) | Op::PadRows(x) => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, up[..n].to_vec());
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, up.to_vec());
                self.accumulate(grads, *b, up.to_vec());
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, up.iter().map(|u| c * u).collect()),
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, vec![up[0]; n]);
            }
            Op::SumSquares(x) => {
                let g = self.value(*x).iter().map(|v| 2.0 * v * up[0]).collect();
                self.accumulate(grads, *x, g);
            }
            Op::Mse { input, target } => {
                let s = 2.0 * up[0] / target.len() as f64;
                let g = self
                    .value(*input)
                    .iter()
                    .zip(target.iter())
                    .map(|(a, b)| s * (a - b))
                    .collect();
                self.accumulate(grads, *input, g);
            }
            Op::TpsSystem { targets } => {
                let [k, d] = self.shape(*targets)[..] else { unreachable!() };
                let n = system_size(k, d);
                let t = self.value(*targets);
                let mut g = vec![0.0; k * d];
                for i in 0..k {
                    for j in i + 1..k {
                        let ci = &t[i * d..(i + 1) * d];
                        let cj = &t[j * d..(j + 1) * d];
                        let r2: f64 = (0..d).map(|b| (ci[b] - cj[b]) * (ci[b] - cj[b])).sum();
                        let s = (up[i * n + j] + up[j * n + i]) * kernel_slope_over_r(r2, d);
                        if s != 0.0 {
                            for b in 0..d {
                                let delta = s * (ci[b] - cj[b]);
                                g[i * d + b] += delta;
                                g[j * d + b] -= delta;
                            }
                        }
                    }
                    for b in 0..d {
                        g[i * d + b] += up[i * n + k + 1 + b] + up[(k + 1 + b) * n + i];
                    }
                }
                self.accumulate(grads, *targets, g);
            }
            Op::Solve { a, b, lu } => {
                let [n, m] = node.shape[..] else { unreachable!() };
                let x = lu.solve_transpose(&to_mat(n, m, up));
                if self.needs(*a) {
                    let w = to_mat(n, m, &node.value);
                    let da = -(&x * w.transpose());
                    self.accumulate(grads, *a, from_mat(&da));
                }
                self.accumulate(grads, *b, from_mat(&x));
            }
            Op::Condition { a, inverse, norm_a, norm_inv } => {
                let n = inverse.nrows();
                let am = to_mat(n, n, self.value(*a));
                let mt = inverse.transpose();
                let tail = &mt * inverse * &mt;
                let da = (am * (norm_inv / norm_a) - tail * (norm_a / norm_inv)) * up[0];
                self.accumulate(grads, *a, from_mat(&da));
            }
            Op::TpsMap { weights, targets, points, kern } => {
                let [k, d] = self.shape(*targets)[..] else { unreachable!() };
                let n = points.len() / d;
                let w = self.value(*weights);
                let t = self.value(*targets);
                let mut dw = vec![0.0; w.len()];
                gemm(k, n, d, kern, true, up, false, &mut dw[..k * d]);
                for gy in up.chunks_exact(d) {
                    for a in 0..d {
                        dw[k * d + a] += gy[a];
                    }
                }
                gemm(d, n, d, points, true, up, false, &mut dw[(k + 1) * d..]);
                self.accumulate(grads, *weights, dw);
                if self.needs(*targets) {
                    // dt_j = sum_p f_pj (t_j - x_p) with f_pj = (up_p . w_j) U'(r_pj) / r_pj
                    let mut col_sum = vec![0.0; k];
                    let mut ftx = vec![0.0; k * d];
                    let mut f = Vec::new();
                    for start in (0..n).step_by(TPS_BLOCK) {
                        let rows = TPS_BLOCK.min(n - start);
                        f.clear();
                        f.resize(rows * k, 0.0);
                        gemm(rows, d, k, &up[start * d..], false, &w[..k * d], true, &mut f);
                        for (q, fr) in f.chunks_exact_mut(k).enumerate() {
                            let p = start + q;
                            let x = &points[p * d..(p + 1) * d];
                            let ur = &kern[p * k..(p + 1) * k];
                            for j in 0..k {
                                let r2: f64 = (0..d).map(|b| (x[b] - t[j * d + b]).powi(2)).sum();
                                fr[j] *= slope_from_kernel(ur[j], r2, d);
                                col_sum[j] += fr[j];
                            }
                        }
                        gemm(k, rows, d, &f, true, &points[start * d..], false, &mut ftx);
                    }
                    let dt = (0..k * d).map(|i| t[i] * col_sum[i / d] - ftx[i]).collect();
                    self.accumulate(grads, *targets, dt);
                }
            }
            Op::Sample { coords, slopes } => {
                let d = self.shape(*coords)[1];
                let g = slopes
                    .chunks_exact(d)
                    .zip(up)
                    .flat_map(|(s, &u)| s.iter().map(move |v| v * u))
                    .collect();
                self.accumulate(grads, *coords, g);
            }
        }
    }
}
