//! Dense intensity grids and the conventions every other module relies on.
//!
//! Coordinates are normalized per axis with the corner-aligned rule
//! `x = 2 i / (N - 1) - 1`, so index `0` sits at `-1.0` and index `N - 1` at
//! `+1.0` exactly. A point's components are ordered like the tensor axes
//! (slowest-varying first).

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"MSTN";
const FORMAT_VERSION: u8 = 1;
const DTYPE_F64_LE: u8 = 1;

/// Row-major grid of `f64` intensities.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if dims.is_empty() || dims.iter().any(|&n| n == 0) {
            return Err(Error::DimensionMismatch(format!(
                "dims must be non-empty and positive, got {dims:?}"
            )));
        }
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::DimensionMismatch(format!(
                "dims {dims:?} need {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let n = dims.iter().product();
        Self {
            dims,
            data: vec![0.0; n],
        }
    }

    /// Builds a tensor by evaluating `f` at the normalized coordinate of every node.
    pub fn from_fn(dims: Vec<usize>, mut f: impl FnMut(&[f64]) -> f64) -> Self {
        let coords = grid_points(&dims);
        let d = dims.len();
        let data = coords.chunks_exact(d).map(&mut f).collect();
        Self { dims, data }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn flat_index(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.dims.len());
        index
            .iter()
            .zip(&self.dims)
            .fold(0, |acc, (&i, &n)| acc * n + i)
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.flat_index(index)]
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(Error::NonFinite(i)),
            None => Ok(()),
        }
    }

    /// Serializes to the `MSTN` binary layout.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        encode_tensor(&self.dims, &self.data)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (dims, data) = decode_tensor(bytes)?;
        let t = Self::new(dims, data)?;
        t.check_finite()?;
        Ok(t)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Multilinear interpolation at one normalized point, clamped to the border.
    pub fn sample_point(&self, p: &[f64]) -> f64 {
        match self.dims.as_slice() {
            [n0, n1] => {
                let (i0, t0, _) = locate(p[0], *n0);
                let (i1, t1, _) = locate(p[1], *n1);
                let j0 = (i0 + 1).min(n0 - 1);
                let j1 = (i1 + 1).min(n1 - 1);
                let at = |a: usize, b: usize| self.data[a * n1 + b];
                let top = at(i0, i1) * (1.0 - t1) + at(i0, j1) * t1;
                let bottom = at(j0, i1) * (1.0 - t1) + at(j0, j1) * t1;
                top * (1.0 - t0) + bottom * t0
            }
            _ => self.sample_point_with_grad(p, None),
        }
    }

    /// Interpolated value at `p`; when `grad` is given it receives d value / d p.
    ///
    /// The derivative is taken in the right-continuous cell, is one-sided on the
    /// border and zero along any axis whose coordinate was clamped.
    pub fn sample_point_with_grad(&self, p: &[f64], mut grad: Option<&mut [f64]>) -> f64 {
        if let ([n0, n1], Some(g)) = (self.dims.as_slice(), grad.as_deref_mut()) {
            let (i0, t0, s0) = locate(p[0], *n0);
            let (i1, t1, s1) = locate(p[1], *n1);
            let j0 = (i0 + 1).min(n0 - 1);
            let j1 = (i1 + 1).min(n1 - 1);
            let at = |a: usize, b: usize| self.data[a * n1 + b];
            let (v00, v01, v10, v11) = (at(i0, i1), at(i0, j1), at(j0, i1), at(j0, j1));
            let top = v00 * (1.0 - t1) + v01 * t1;
            let bottom = v10 * (1.0 - t1) + v11 * t1;
            g[0] = (bottom - top) * s0;
            g[1] = ((v01 - v00) * (1.0 - t0) + (v11 - v10) * t0) * s1;
            return top * (1.0 - t0) + bottom * t0;
        }
        let d = self.dims.len();
        debug_assert_eq!(p.len(), d);
        let mut base = [0usize; 4];
        let mut frac = [0f64; 4];
        let mut scale = [0f64; 4];
        let mut step = [0usize; 4];
        let mut stride = 1usize;
        for a in (0..d).rev() {
            let n = self.dims[a];
            let (i0, t, slope) = locate(p[a], n);
            base[a] = i0 * stride;
            frac[a] = t;
            scale[a] = slope;
            step[a] = if n > 1 { stride } else { 0 };
            stride *= n;
        }
        let offset: usize = base[..d].iter().sum();
        if let Some(g) = grad.as_deref_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut value = 0.0;
        for corner in 0..(1usize << d) {
            let mut idx = offset;
            let mut weight = 1.0;
            for a in 0..d {
                if corner >> a & 1 == 1 {
                    idx += step[a];
                    weight *= frac[a];
                } else {
                    weight *= 1.0 - frac[a];
                }
            }
            let v = self.data[idx];
            value += weight * v;
            if let Some(g) = grad.as_deref_mut() {
                for a in 0..d {
                    if scale[a] == 0.0 {
                        continue;
                    }
                    let mut w = if corner >> a & 1 == 1 { 1.0 } else { -1.0 };
                    for b in 0..d {
                        if b != a {
                            w *= if corner >> b & 1 == 1 {
                                frac[b]
                            } else {
                                1.0 - frac[b]
                            };
                        }
                    }
                    g[a] += w * v * scale[a];
                }
            }
        }
        value
    }
}

/// Continuous indices this close to an integer are treated as lying on the node,
/// so grid coordinates sample node values exactly despite rounding.
pub const NODE_SNAP: f64 = 1e-9;

/// Maps a normalized coordinate to `(cell index, fraction, d index / d x)`.
#[inline]
fn locate(x: f64, n: usize) -> (usize, f64, f64) {
    if n == 1 {
        return (0, 0.0, 0.0);
    }
    let last = (n - 1) as f64;
    let half = 0.5 * last;
    let raw = (x + 1.0) * half;
    let node = raw.round();
    let f = if (raw - node).abs() <= NODE_SNAP { node } else { raw };
    let (f, slope) = if f >= 0.0 && f <= last {
        (f, half)
    } else if f > last {
        (last, 0.0)
    } else {
        // below range or NaN
        (0.0, 0.0)
    };
    let i0 = (f.floor() as usize).min(n - 2);
    (i0, f - i0 as f64, slope)
}

impl AsRef<ImageTensor> for ImageTensor {
    fn as_ref(&self) -> &ImageTensor {
        self
    }
}

/// Normalized coordinate of node `i` on an axis of `n` nodes.
#[inline]
pub fn grid_coord(i: usize, n: usize) -> f64 {
    if n == 1 {
        0.0
    } else {
        2.0 * i as f64 / (n - 1) as f64 - 1.0
    }
}

/// Continuous index of normalized coordinate `x` on an axis of `n` nodes.
#[inline]
pub fn coord_to_index(x: f64, n: usize) -> f64 {
    (x + 1.0) * 0.5 * (n.max(2) - 1) as f64
}

/// Normalized coordinates of every node, flat `N x d`, row-major node order.
pub fn grid_points(dims: &[usize]) -> Vec<f64> {
    let d = dims.len();
    let total: usize = dims.iter().product();
    let mut out = Vec::with_capacity(total * d);
    let mut index = vec![0usize; d];
    for _ in 0..total {
        out.extend(index.iter().zip(dims).map(|(&i, &n)| grid_coord(i, n)));
        for a in (0..d).rev() {
            index[a] += 1;
            if index[a] < dims[a] {
                break;
            }
            index[a] = 0;
        }
    }
    out
}

/// Samples `img` at every point of the flat `N x d` coordinate list.
pub fn sample(img: &ImageTensor, coords: &[f64]) -> Result<Vec<f64>> {
    let d = img.ndim();
    if coords.len() % d != 0 {
        return Err(Error::DimensionMismatch(format!(
            "coordinate list of length {} is not a multiple of image rank {d}",
            coords.len()
        )));
    }
    Ok(coords.chunks_exact(d).map(|p| img.sample_point(p)).collect())
}

/// Zero mean, unit population standard deviation. Constant images map to zeros.
pub fn whiten(img: &ImageTensor) -> ImageTensor {
    let n = img.len() as f64;
    let mean = img.data.iter().sum::<f64>() / n;
    let var = img.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    let data = if std > 0.0 && std.is_finite() {
        let centered: Vec<f64> = img.data.iter().map(|v| (v - mean) / std).collect();
        // one corrective pass absorbs the rounding of the first
        let m2 = centered.iter().sum::<f64>() / n;
        let s2 = (centered.iter().map(|v| (v - m2).powi(2)).sum::<f64>() / n).sqrt();
        centered.into_iter().map(|v| (v - m2) / s2).collect()
    } else {
        vec![0.0; img.len()]
    };
    ImageTensor {
        dims: img.dims.clone(),
        data,
    }
}

/// Seeded generator used throughout: ChaCha with 8 rounds, seeded through
/// `seed_from_u64`. The stream is platform independent.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Adds i.i.d. `N(0, sigma^2)` noise, reproducible for a fixed seed.
pub fn add_gaussian_noise(img: &ImageTensor, sigma: f64, seed: u64) -> ImageTensor {
    if sigma == 0.0 {
        return img.clone();
    }
    let mut rng = rng_from_seed(seed);
    let data = img
        .data
        .iter()
        .map(|v| {
            let z: f64 = StandardNormal.sample(&mut rng);
            v + sigma * z
        })
        .collect();
    ImageTensor {
        dims: img.dims.clone(),
        data,
    }
}

pub fn encode_tensor(dims: &[usize], data: &[f64]) -> Result<Vec<u8>> {
    if dims.is_empty() || dims.len() > 4 {
        return Err(Error::InvalidRank(dims.len() as u8));
    }
    let mut out = Vec::with_capacity(8 + 4 * dims.len() + 8 * data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[FORMAT_VERSION, DTYPE_F64_LE, dims.len() as u8, 0]);
    for &n in dims {
        let n = u32::try_from(n)
            .map_err(|_| Error::DimensionMismatch(format!("axis length {n} exceeds u32")))?;
        out.extend_from_slice(&n.to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_tensor(bytes: &[u8]) -> Result<(Vec<usize>, Vec<f64>)> {
    if bytes.len() < 8 {
        return Err(Error::TruncatedHeader {
            expected: 8,
            found: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if &magic != MAGIC {
        return Err(Error::BadMagic { found: magic });
    }
    if bytes[4] != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(bytes[4]));
    }
    if bytes[5] != DTYPE_F64_LE {
        return Err(Error::DtypeMismatch(bytes[5]));
    }
    let ndim = bytes[6];
    if !(1..=4).contains(&ndim) {
        return Err(Error::InvalidRank(ndim));
    }
    let header = 8 + 4 * ndim as usize;
    if bytes.len() < header {
        return Err(Error::TruncatedHeader {
            expected: header,
            found: bytes.len(),
        });
    }
    let dims: Vec<usize> = bytes[8..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let expected: usize = dims.iter().product();
    let payload = &bytes[header..];
    if payload.len() != expected * 8 {
        return Err(Error::SizeMismatch {
            expected,
            found_bytes: payload.len(),
        });
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((dims, data))
}

/// Reads a binary (P5) PGM and scales samples into `[0, 1]` by `maxval`.
pub fn import_pgm(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pgm(&bytes)
}

pub fn parse_pgm(bytes: &[u8]) -> Result<ImageTensor> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(Error::UnsupportedFormat("not a PGM file".into()));
    }
    if bytes[1] != b'5' {
        return Err(Error::UnsupportedFormat(format!(
            "PGM variant P{} (only binary P5 is supported)",
            bytes[1] as char
        )));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::MalformedPgm("missing header field".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| Error::MalformedPgm("header field out of range".into()))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::MalformedPgm("missing whitespace before raster".into()));
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::MalformedPgm(format!("maxval {maxval} out of range")));
    }
    if width == 0 || height == 0 {
        return Err(Error::MalformedPgm("zero image size".into()));
    }
    let sample_bytes = if maxval < 256 { 1 } else { 2 };
    let expected = width * height * sample_bytes;
    let raster = &bytes[pos..];
    if raster.len() < expected {
        return Err(Error::TruncatedRaster {
            expected,
            found: raster.len(),
        });
    }
    let scale = maxval as f64;
    let data = if sample_bytes == 1 {
        raster[..expected].iter().map(|&b| b as f64 / scale).collect()
    } else {
        raster[..expected]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / scale)
            .collect()
    };
    ImageTensor::new(vec![height, width], data)
}

/// Encodes 8-bit samples as a P5 PGM.
pub fn pgm_bytes(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}
