//! Landmark regressor: a small strided CNN whose `tanh` head emits learned
//! landmark coordinates, followed by fixed anchor landmarks.
//!
//! The same parameter set serves both images of a registration pair.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{decode_tensor, encode_tensor, rng_from_seed, ImageTensor};
use crate::tps::LandmarkSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layer {
    Conv { out_channels: usize, stride: usize },
    Dense { units: usize },
    Relu,
    Tanh,
}

impl Layer {
    fn to_text(self) -> String {
        match self {
            Layer::Conv { out_channels, stride } => format!("conv {out_channels} {stride}"),
            Layer::Dense { units } => format!("dense {units}"),
            Layer::Relu => "relu".into(),
            Layer::Tanh => "tanh".into(),
        }
    }

    fn parse(line: &str) -> Result<Self> {
        let tok: Vec<&str> = line.split_whitespace().collect();
        let num = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Parse(format!("bad number {s:?} in layer {line:?}")))
        };
        match tok[..] {
            ["conv", c, s] => Ok(Layer::Conv { out_channels: num(c)?, stride: num(s)? }),
            ["dense", u] => Ok(Layer::Dense { units: num(u)? }),
            ["relu"] => Ok(Layer::Relu),
            ["tanh"] => Ok(Layer::Tanh),
            _ => Err(Error::Parse(format!("unknown layer {line:?}"))),
        }
    }
}

/// Input geometry plus the ordered layer list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchSpec {
    pub input_dims: Vec<usize>,
    pub layers: Vec<Layer>,
}

impl ArchSpec {
    /// Default stacks: four stride-2 convolutions, a hidden dense layer and
    /// the `tanh` landmark head.
    pub fn default_for(input_dims: &[usize], learned: usize) -> Self {
        let (channels, hidden): (&[usize], usize) = if input_dims.len() == 3 {
            (&[4, 8, 16, 32], 128)
        } else {
            (&[8, 16, 32, 64], 256)
        };
        let mut layers = Vec::new();
        for &c in channels {
            layers.push(Layer::Conv { out_channels: c, stride: 2 });
            layers.push(Layer::Relu);
        }
        layers.extend([
            Layer::Dense { units: hidden },
            Layer::Relu,
            Layer::Dense { units: learned * input_dims.len() },
            Layer::Tanh,
        ]);
        Self {
            input_dims: input_dims.to_vec(),
            layers,
        }
    }

    pub fn dim(&self) -> usize {
        self.input_dims.len()
    }

    /// Checks the layer list and returns the parameter shapes it implies.
    pub fn param_shapes(&self) -> Result<Vec<(String, Vec<usize>)>> {
        let d = self.dim();
        if !(2..=3).contains(&d) || self.input_dims.iter().any(|&n| n == 0) {
            return Err(Error::Config(format!("input dims {:?} must be 2-d or 3-d", self.input_dims)));
        }
        let taps = if d == 2 { 9 } else { 27 };
        let mut channels = 1usize;
        let mut spatial = self.input_dims.clone();
        let mut flat: Option<usize> = None;
        let mut shapes = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                Layer::Conv { out_channels, stride } => {
                    if flat.is_some() {
                        return Err(Error::Config(format!("layer {i}: conv after dense")));
                    }
                    if out_channels == 0 || !(1..=2).contains(&stride) {
                        return Err(Error::Config(format!("layer {i}: bad conv {layer:?}")));
                    }
                    shapes.push((format!("layer{i}.weight"), vec![out_channels, channels, taps]));
                    shapes.push((format!("layer{i}.bias"), vec![out_channels]));
                    channels = out_channels;
                    spatial.iter_mut().for_each(|n| *n = n.div_ceil(stride));
                }
                Layer::Dense { units } => {
                    if units == 0 {
                        return Err(Error::Config(format!("layer {i}: dense with zero units")));
                    }
                    let fan_in = flat.unwrap_or(channels * spatial.iter().product::<usize>());
                    shapes.push((format!("layer{i}.weight"), vec![units, fan_in]));
                    shapes.push((format!("layer{i}.bias"), vec![units]));
                    flat = Some(units);
                }
                Layer::Relu | Layer::Tanh => {}
            }
        }
        match self.layers[..] {
            [.., Layer::Dense { .. }, Layer::Tanh] => Ok(shapes),
            _ => Err(Error::Config("architecture must end with dense then tanh".into())),
        }
    }

    /// Number of values emitted by the head.
    pub fn output_len(&self) -> usize {
        self.layers
            .iter()
            .rev()
            .find_map(|l| match l {
                Layer::Dense { units } => Some(*units),
                _ => None,
            })
            .unwrap_or(0)
    }

    pub fn to_text(&self) -> String {
        let dims: Vec<String> = self.input_dims.iter().map(usize::to_string).collect();
        let mut s = format!("input {}\n", dims.join(" "));
        for l in &self.layers {
            let _ = writeln!(s, "{}", l.to_text());
        }
        s
    }
}

/// Named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// All weights of the regressor plus its landmark configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    arch: ArchSpec,
    anchors: LandmarkSet,
    params: Vec<Param>,
}

/// Corner anchors `(+-1, ..., +-1)` in lexicographic order.
pub fn corner_anchors(dim: usize) -> LandmarkSet {
    let points = (0..1usize << dim)
        .flat_map(|m| (0..dim).rev().map(move |a| if m >> a & 1 == 1 { 1.0 } else { -1.0 }))
        .collect();
    LandmarkSet::new(dim, points).unwrap()
}

pub const HEAD_WEIGHT_SCALE: f64 = 0.01;
pub const HEAD_SPREAD: f64 = 0.8;

/// Fan-in scaled uniform initialization.
///
/// Hidden layers use `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))` with zero
/// biases. The head weights are scaled down by [`HEAD_WEIGHT_SCALE`] and its
/// biases are `atanh` of uniform positions in `(-HEAD_SPREAD, HEAD_SPREAD)`, so
/// initial landmarks are spread out and nearly the same for every image.
pub fn init_params(arch: &ArchSpec, anchors: LandmarkSet, seed: u64) -> Result<NetParams> {
    let shapes = arch.param_shapes()?;
    if anchors.dim() != arch.dim() {
        return Err(Error::Config(format!(
            "anchors are {}-d but the network input is {}-d",
            anchors.dim(),
            arch.dim()
        )));
    }
    if arch.output_len() % arch.dim() != 0 {
        return Err(Error::Config("head size is not a multiple of the dimension".into()));
    }
    let mut rng = rng_from_seed(seed);
    let last_weight = shapes.len() - 2;
    let params = shapes
        .into_iter()
        .enumerate()
        .map(|(i, (name, shape))| {
            let n: usize = shape.iter().product();
            let data = if i == last_weight + 1 {
                (0..n).map(|_| rng.gen_range(-HEAD_SPREAD..HEAD_SPREAD).atanh()).collect()
            } else if name.ends_with(".bias") {
                vec![0.0; n]
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let bound = if i == last_weight {
                    HEAD_WEIGHT_SCALE * (3.0 / fan_in as f64).sqrt()
                } else {
                    (6.0 / fan_in as f64).sqrt()
                };
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
            };
            Param { name, shape, data }
        })
        .collect();
    Ok(NetParams {
        arch: arch.clone(),
        anchors,
        params,
    })
}

impl NetParams {
    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn anchors(&self) -> &LandmarkSet {
        &self.anchors
    }

    pub fn dim(&self) -> usize {
        self.arch.dim()
    }

    /// Learned landmark count.
    pub fn learned(&self) -> usize {
        self.arch.output_len() / self.dim()
    }

    /// Total landmark count including anchors.
    pub fn landmarks(&self) -> usize {
        self.learned() + self.anchors.len()
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Places every parameter tensor on the tape.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    tape.leaf(p.shape.clone(), p.data.clone())
                } else {
                    tape.constant(p.shape.clone(), p.data.clone())
                }
            })
            .collect()
    }

    /// Forward pass; returns `(learned [K_learn, d], all [K, d])`.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], img: &ImageTensor) -> Result<(Var, Var)> {
        if img.dims() != self.arch.input_dims.as_slice() {
            return Err(Error::DimensionMismatch(format!(
                "network expects input {:?}, got {:?}",
                self.arch.input_dims,
                img.dims()
            )));
        }
        let mut shape = vec![1];
        shape.extend_from_slice(img.dims());
        let mut x = tape.constant(shape, img.data().to_vec());
        let mut next = vars.iter();
        for layer in &self.arch.layers {
            x = match *layer {
                Layer::Conv { stride, .. } => {
                    let (w, b) = (next.next().unwrap(), next.next().unwrap());
                    tape.conv(x, *w, *b, stride)?
                }
                Layer::Dense { .. } => {
                    let (w, b) = (next.next().unwrap(), next.next().unwrap());
                    tape.dense(x, *w, *b)?
                }
                Layer::Relu => tape.relu(x),
                Layer::Tanh => tape.tanh(x),
            };
        }
        let d = self.dim();
        let learned = tape.reshape(x, vec![self.learned(), d])?;
        let all = tape.append_rows(learned, self.anchors.as_slice())?;
        Ok((learned, all))
    }

    /// Landmarks of one image: learned rows first, then anchors.
    pub fn detect(&self, img: &ImageTensor) -> Result<LandmarkSet> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let (_, all) = self.forward(&mut tape, &vars, img)?;
        LandmarkSet::new(self.dim(), tape.value(all).to_vec())
    }

    /// Siamese application: the same weights on source and target.
    pub fn detect_pair(&self, source: &ImageTensor, target: &ImageTensor) -> Result<(LandmarkSet, LandmarkSet)> {
        Ok((self.detect(source)?, self.detect(target)?))
    }

    /// Writes `arch.txt`, `anchors.txt`, `manifest.txt` and one `.mstn` file per tensor.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, bytes: &[u8]| {
            let p = dir.join(name);
            fs::write(&p, bytes).map_err(|e| Error::io(p, e))
        };
        write("arch.txt", self.arch.to_text().as_bytes())?;
        write("anchors.txt", self.anchors.to_text().as_bytes())?;
        let mut manifest = String::new();
        for p in &self.params {
            let dims: Vec<String> = p.shape.iter().map(usize::to_string).collect();
            let _ = writeln!(manifest, "{} {}", p.name, dims.join("x"));
            write(&format!("{}.mstn", p.name), &encode_tensor(&p.shape, &p.data)?)?;
        }
        write("manifest.txt", manifest.as_bytes())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let read = |name: &str| {
            let p = dir.join(name);
            fs::read_to_string(&p).map_err(|e| Error::io(p, e))
        };
        let arch = parse_arch(&read("arch.txt")?)?;
        let anchors = LandmarkSet::parse_text(&read("anchors.txt")?)?;
        let expected = arch.param_shapes()?;
        let manifest = read("manifest.txt")?;
        let entries: Vec<&str> = manifest.lines().filter(|l| !l.trim().is_empty()).collect();
        if entries.len() != expected.len() {
            return Err(Error::Parse(format!(
                "manifest lists {} tensors, architecture needs {}",
                entries.len(),
                expected.len()
            )));
        }
        let mut params = Vec::with_capacity(expected.len());
        for (line, (name, shape)) in entries.iter().zip(expected) {
            let listed = line.split_whitespace().next().unwrap_or("");
            if listed != name {
                return Err(Error::Parse(format!("manifest entry {listed:?}, expected {name:?}")));
            }
            let path = dir.join(format!("{name}.mstn"));
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let (dims, data) = decode_tensor(&bytes)?;
            if dims != shape {
                return Err(Error::DimensionMismatch(format!(
                    "{name}: stored shape {dims:?}, architecture needs {shape:?}"
                )));
            }
            params.push(Param { name, shape, data });
        }
        let net = NetParams { arch, anchors, params };
        if net.anchors.dim() != net.dim() {
            return Err(Error::Parse("anchor dimension differs from network input".into()));
        }
        Ok(net)
    }
}

pub fn parse_arch(text: &str) -> Result<ArchSpec> {
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
    let head = lines.next().ok_or_else(|| Error::Parse("empty architecture".into()))?;
    let input_dims = head
        .strip_prefix("input")
        .ok_or_else(|| Error::Parse(format!("expected \"input ...\", got {head:?}")))?
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| Error::Parse(format!("bad input dim {t:?}"))))
        .collect::<Result<Vec<usize>>>()?;
    let layers = lines.map(Layer::parse).collect::<Result<Vec<_>>>()?;
    let arch = ArchSpec { input_dims, layers };
    arch.param_shapes()?;
    Ok(arch)
}
