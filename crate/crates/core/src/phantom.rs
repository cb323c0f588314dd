//! Synthetic data with known ground truth.
//!
//! The phantom uses the modified Shepp-Logan ellipse table (Toft's high
//! contrast variant of Shepp & Logan, 1974). Ellipse coordinates are
//! `(x right, y up)`; on a tensor, axis 0 (rows) runs along `-y` and axis 1
//! along `x`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::corner_anchors;
use crate::tensor::{rng_from_seed, ImageTensor};
use crate::tps::{self, LandmarkSet};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EllipseSpec {
    pub center: [f64; 2],
    pub semi_axes: [f64; 2],
    /// Counter-clockwise, radians.
    pub rotation: f64,
    pub intensity: f64,
}

impl EllipseSpec {
    const fn deg(cx: f64, cy: f64, a: f64, b: f64, degrees: f64, intensity: f64) -> Self {
        Self {
            center: [cx, cy],
            semi_axes: [a, b],
            rotation: degrees * std::f64::consts::PI / 180.0,
            intensity,
        }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.rotation.sin_cos();
        let dx = x - self.center[0];
        let dy = y - self.center[1];
        let xr = dx * c + dy * s;
        let yr = -dx * s + dy * c;
        (xr / self.semi_axes[0]).powi(2) + (yr / self.semi_axes[1]).powi(2) <= 1.0
    }

    /// End points of the major axis as tensor coordinates `(row, col)`.
    pub fn major_axis_endpoints(&self) -> [[f64; 2]; 2] {
        let (s, c) = self.rotation.sin_cos();
        let [a, b] = self.semi_axes;
        let (ex, ey) = if b >= a { (-b * s, b * c) } else { (a * c, a * s) };
        let [cx, cy] = self.center;
        [[-(cy + ey), cx + ex], [-(cy - ey), cx - ex]]
    }
}

/// Modified Shepp-Logan table.
pub const SHEPP_LOGAN: [EllipseSpec; 10] = [
    EllipseSpec::deg(0.0, 0.0, 0.69, 0.92, 0.0, 1.0),
    EllipseSpec::deg(0.0, -0.0184, 0.6624, 0.874, 0.0, -0.8),
    EllipseSpec::deg(0.22, 0.0, 0.11, 0.31, -18.0, -0.2),
    EllipseSpec::deg(-0.22, 0.0, 0.16, 0.41, 18.0, -0.2),
    EllipseSpec::deg(0.0, 0.35, 0.21, 0.25, 0.0, 0.1),
    EllipseSpec::deg(0.0, 0.1, 0.046, 0.046, 0.0, 0.1),
    EllipseSpec::deg(0.0, -0.1, 0.046, 0.046, 0.0, 0.1),
    EllipseSpec::deg(-0.08, -0.605, 0.046, 0.023, 0.0, 0.1),
    EllipseSpec::deg(0.0, -0.605, 0.023, 0.023, 0.0, 0.1),
    EllipseSpec::deg(0.06, -0.605, 0.023, 0.046, 0.0, 0.1),
];

/// Outer boundary and the two dark interior ellipses.
pub const CONTROL_ELLIPSES: [usize; 3] = [0, 2, 3];

/// Rasterization options.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhantomStyle {
    /// Sub-samples per pixel along each axis (1 = point sampling).
    pub supersample: usize,
    /// Gaussian edge blur, standard deviation in normalized units (0 = none).
    pub blur: f64,
}

impl Default for PhantomStyle {
    fn default() -> Self {
        Self {
            supersample: 4,
            blur: 0.03,
        }
    }
}

impl PhantomStyle {
    pub const POINT: PhantomStyle = PhantomStyle {
        supersample: 1,
        blur: 0.0,
    };
}

/// Sum of ellipse intensities at a tensor coordinate, clipped at zero.
pub fn phantom_value(p: &[f64]) -> f64 {
    let (x, y) = (p[1], -p[0]);
    SHEPP_LOGAN
        .iter()
        .filter(|e| e.contains(x, y))
        .map(|e| e.intensity)
        .sum::<f64>()
        .max(0.0)
}

/// Default-style phantom.
pub fn rasterize_phantom(dims: &[usize]) -> Result<ImageTensor> {
    rasterize_phantom_with(dims, &PhantomStyle::default())
}

pub fn rasterize_phantom_with(dims: &[usize], style: &PhantomStyle) -> Result<ImageTensor> {
    let [rows, cols] = dims[..] else {
        return Err(Error::InvalidArgument(format!("phantom needs 2-d dims, got {dims:?}")));
    };
    if rows != cols || rows < 32 {
        return Err(Error::InvalidArgument(format!(
            "phantom needs square dims of at least 32, got {dims:?}"
        )));
    }
    let ss = style.supersample.max(1);
    let pitch = 2.0 / (rows - 1) as f64;
    let offsets: Vec<f64> = (0..ss)
        .map(|q| ((q as f64 + 0.5) / ss as f64 - 0.5) * pitch)
        .collect();
    let norm = (ss * ss) as f64;
    let img = ImageTensor::from_fn(dims.to_vec(), |p| {
        let mut acc = 0.0;
        for du in &offsets {
            for dv in &offsets {
                acc += phantom_value(&[p[0] + du, p[1] + dv]);
            }
        }
        acc / norm
    });
    Ok(if style.blur > 0.0 {
        gaussian_blur(&img, style.blur / pitch)
    } else {
        img
    })
}

/// Separable Gaussian blur with border replication; `sigma` in pixels.
pub fn gaussian_blur(img: &ImageTensor, sigma: f64) -> ImageTensor {
    let radius = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    let taps: Vec<f64> = taps.iter().map(|t| t / total).collect();
    let dims = img.dims().to_vec();
    let mut data = img.data().to_vec();
    let mut scratch = vec![0.0; data.len()];
    let mut stride = 1;
    for a in (0..dims.len()).rev() {
        let n = dims[a] as isize;
        let outer = data.len() / (dims[a] * stride);
        for o in 0..outer {
            for s in 0..stride {
                let base = o * dims[a] * stride + s;
                for i in 0..n {
                    let mut acc = 0.0;
                    for (t, w) in taps.iter().enumerate() {
                        let j = (i + t as isize - radius).clamp(0, n - 1);
                        acc += w * data[base + j as usize * stride];
                    }
                    scratch[base + i as usize * stride] = acc;
                }
            }
        }
        std::mem::swap(&mut data, &mut scratch);
        stride *= dims[a];
    }
    ImageTensor::new(dims, data).unwrap()
}

/// Average-pools a 2-d image by an integer factor.
pub fn box_downsample(img: &ImageTensor, factor: usize) -> Result<ImageTensor> {
    let [r, c] = img.dims()[..] else {
        return Err(Error::InvalidArgument("box_downsample expects a 2-d image".into()));
    };
    if factor == 0 || r % factor != 0 || c % factor != 0 {
        return Err(Error::InvalidArgument(format!("{r}x{c} not divisible by {factor}")));
    }
    let (nr, nc) = (r / factor, c / factor);
    let mut out = vec![0.0; nr * nc];
    for i in 0..r {
        for j in 0..c {
            out[(i / factor) * nc + j / factor] += img.data()[i * c + j];
        }
    }
    let scale = (factor * factor) as f64;
    out.iter_mut().for_each(|v| *v /= scale);
    ImageTensor::new(vec![nr, nc], out)
}

/// The six generating control points: major-axis ends of the outer ellipse
/// and of the two dark interior ellipses.
pub fn phantom_control_points() -> LandmarkSet {
    let rows: Vec<Vec<f64>> = CONTROL_ELLIPSES
        .iter()
        .flat_map(|&i| SHEPP_LOGAN[i].major_axis_endpoints())
        .map(|p| p.to_vec())
        .collect();
    LandmarkSet::from_rows(&rows).unwrap()
}

#[derive(Debug, Clone, PartialEq)]
pub struct WarpSpec {
    pub control_points: LandmarkSet,
    /// Per-coordinate displacement standard deviation, normalized units.
    pub displacement_sigma: f64,
    pub seed: u64,
}

impl WarpSpec {
    pub const DEFAULT_SIGMA: f64 = 0.02;

    pub fn phantom(displacement_sigma: f64, seed: u64) -> Self {
        Self {
            control_points: phantom_control_points(),
            displacement_sigma,
            seed,
        }
    }
}

/// One generated image with the control positions that produced it.
#[derive(Debug, Clone)]
pub struct WarpedSample {
    pub image: ImageTensor,
    /// Where the base control points moved to in this image.
    pub controls: LandmarkSet,
    pub seed: u64,
}

/// Standard normal truncated to `[-3, 3]` by rejection.
fn truncated_normal(rng: &mut impl Rng) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 3.0 {
            return z;
        }
    }
}

/// Displaces the controls of `warp` and returns `(perturbed controls, spline)`.
///
/// The spline maps the sample frame back onto the base frame; corners are
/// fixed.
pub fn random_warp(warp: &WarpSpec, seed: u64) -> Result<(LandmarkSet, tps::TpsModel)> {
    let d = warp.control_points.dim();
    let mut rng = rng_from_seed(seed);
    let moved: Vec<f64> = warp
        .control_points
        .as_slice()
        .iter()
        .map(|&c| c + warp.displacement_sigma * truncated_normal(&mut rng))
        .collect();
    let moved = LandmarkSet::new(d, moved)?;
    let corners = corner_anchors(d);
    let targets = moved.concat(&corners)?;
    let sources = warp.control_points.concat(&corners)?;
    let model = tps::assemble(&targets, &sources)?.solve()?;
    Ok((moved, model))
}

/// Warps `base` `count` times with independent control displacements.
pub fn make_dataset(base: &ImageTensor, warp: &WarpSpec, count: usize) -> Result<Vec<WarpedSample>> {
    if count == 0 {
        return Err(Error::InvalidArgument("dataset count must be at least 1".into()));
    }
    let mut rng = rng_from_seed(warp.seed);
    (0..count)
        .map(|_| {
            let seed: u64 = rng.gen();
            let (controls, model) = random_warp(warp, seed)?;
            let image = tps::warp(&model, base, base.dims())?;
            Ok(WarpedSample { image, controls, seed })
        })
        .collect()
}

/// Smooth ellipsoidal blob with a `tanh` edge, exactly 1 at its centre.
///
/// Semi-axes are `radius * squash` along axis 0 and `radius` along the others.
pub fn make_blob_volume(dims: &[usize], center: &[f64], radius: f64, squash: f64) -> Result<ImageTensor> {
    if center.len() != dims.len() || !(2..=3).contains(&dims.len()) {
        return Err(Error::DimensionMismatch(format!(
            "center {center:?} does not match dims {dims:?}"
        )));
    }
    if radius <= 0.0 || squash <= 0.0 {
        return Err(Error::InvalidArgument("radius and squash must be positive".into()));
    }
    let semi: Vec<f64> = (0..dims.len())
        .map(|a| if a == 0 { radius * squash } else { radius })
        .collect();
    if center.iter().zip(&semi).any(|(c, s)| c - s < -1.0 || c + s > 1.0) {
        return Err(Error::InvalidArgument(format!(
            "blob with semi-axes {semi:?} at {center:?} leaves the volume"
        )));
    }
    let edge = BLOB_EDGE;
    let norm = 1.0 + (1.0 / edge).tanh();
    Ok(ImageTensor::from_fn(dims.to_vec(), |p| {
        let rho = p
            .iter()
            .zip(center)
            .zip(&semi)
            .map(|((x, c), s)| ((x - c) / s).powi(2))
            .sum::<f64>()
            .sqrt();
        (1.0 - ((rho - 1.0) / edge).tanh()) / norm
    }))
}

/// Relative width of the blob edge profile.
pub const BLOB_EDGE: f64 = 0.08;

#[derive(Debug, Clone)]
pub struct LabeledSet {
    pub images: Vec<ImageTensor>,
    pub labels: Vec<usize>,
    /// Aspect ratio (`squash`) used for every image.
    pub aspects: Vec<f64>,
}

/// Two populations of blobs whose aspect ratios centre on `aspects[0]` and
/// `aspects[1]`, with uniform relative jitter.
pub fn make_two_class_set(
    dims: &[usize],
    per_class: usize,
    aspects: [f64; 2],
    jitter: f64,
    seed: u64,
) -> Result<LabeledSet> {
    let mut rng = rng_from_seed(seed);
    let mut set = LabeledSet {
        images: Vec::new(),
        labels: Vec::new(),
        aspects: Vec::new(),
    };
    let radius = 0.4;
    for i in 0..2 * per_class {
        let label = i % 2;
        let squash = aspects[label] * (1.0 + rng.gen_range(-jitter..=jitter));
        let center: Vec<f64> = (0..dims.len()).map(|_| rng.gen_range(-0.05..0.05)).collect();
        set.images.push(make_blob_volume(dims, &center, radius, squash)?);
        set.labels.push(label);
        set.aspects.push(squash);
    }
    Ok(set)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub landmarks: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    pub seed: u64,
}

/// `manifest.json` of a dataset directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub kind: String,
    pub dims: Vec<usize>,
    pub seed: u64,
    #[serde(default)]
    pub displacement_sigma: f64,
    #[serde(default)]
    pub style: Option<PhantomStyle>,
    /// Base positions of the generating control points (row-major `K x d`).
    #[serde(default)]
    pub control_points: Vec<f64>,
    pub samples: Vec<SampleEntry>,
}

impl DatasetManifest {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }

    pub fn image_paths(&self, dir: impl AsRef<Path>) -> Vec<PathBuf> {
        self.samples.iter().map(|s| dir.as_ref().join(&s.image)).collect()
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes a phantom dataset: `images/*.mstn`, `landmarks/*.txt`, `manifest.json`.
pub fn write_phantom_dataset(
    dir: impl AsRef<Path>,
    dims: &[usize],
    style: &PhantomStyle,
    warp: &WarpSpec,
    count: usize,
) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    let base = rasterize_phantom_with(dims, style)?;
    let samples = make_dataset(&base, warp, count)?;
    let mut entries = Vec::with_capacity(count);
    for (i, s) in samples.iter().enumerate() {
        let id = format!("sample_{i:04}");
        let image = format!("images/{id}.mstn");
        let landmarks = format!("landmarks/{id}.txt");
        write_file(&dir.join(&image), &s.image.to_bytes()?)?;
        write_file(&dir.join(&landmarks), s.controls.to_text().as_bytes())?;
        entries.push(SampleEntry {
            id,
            image,
            landmarks: Some(landmarks),
            label: None,
            seed: s.seed,
        });
    }
    let manifest = DatasetManifest {
        kind: "phantom".into(),
        dims: dims.to_vec(),
        seed: warp.seed,
        displacement_sigma: warp.displacement_sigma,
        style: Some(*style),
        control_points: warp.control_points.as_slice().to_vec(),
        samples: entries,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Parse(e.to_string()))?;
    write_file(&dir.join("manifest.json"), json.as_bytes())?;
    Ok(manifest)
}

/// Writes a two-class blob dataset with labels in the manifest.
pub fn write_blob_dataset(dir: impl AsRef<Path>, dims: &[usize], per_class: usize, seed: u64) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    let set = make_two_class_set(dims, per_class, [1.0, 1.5], 0.05, seed)?;
    let mut entries = Vec::new();
    for (i, (img, &label)) in set.images.iter().zip(&set.labels).enumerate() {
        let id = format!("sample_{i:04}");
        let image = format!("images/{id}.mstn");
        write_file(&dir.join(&image), &img.to_bytes()?)?;
        entries.push(SampleEntry {
            id,
            image,
            landmarks: None,
            label: Some(label),
            seed,
        });
    }
    let manifest = DatasetManifest {
        kind: "blobs".into(),
        dims: dims.to_vec(),
        seed,
        displacement_sigma: 0.0,
        style: None,
        control_points: Vec::new(),
        samples: entries,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Parse(e.to_string()))?;
    write_file(&dir.join("manifest.json"), json.as_bytes())?;
    Ok(manifest)
}

/// Index of the pixel nearest a normalized coordinate along an axis.
pub fn nearest_index(x: f64, n: usize) -> usize {
    let f = crate::tensor::coord_to_index(x, n).round();
    f.clamp(0.0, (n - 1) as f64) as usize
}
