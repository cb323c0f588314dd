//! Pairwise self-supervised training.
//!
//! Each step detects landmarks on a noisy copy of the source and target,
//! registers the clean source onto the clean target through the spline and
//! minimizes `MSE(I_T, I_R) + lambda * kappa_F(A)`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::net::{corner_anchors, init_params, ArchSpec, NetParams};
use crate::tensor::{add_gaussian_noise, grid_points, rng_from_seed, whiten, ImageTensor};
use crate::tps::{self, system_size, LandmarkSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairStrategy {
    /// Every ordered pair `(i, j)`, `i != j`.
    AllPairs,
    /// A fixed number of uniformly drawn ordered pairs per epoch.
    RandomPairs { count: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorMode {
    Corners,
    None,
}

fn default_lambda() -> f64 {
    1e-4
}
fn default_epochs() -> usize {
    20
}
fn default_lr() -> f64 {
    1e-4
}
fn default_noise() -> f64 {
    0.05
}
fn default_split() -> [f64; 3] {
    [0.8, 0.1, 0.1]
}
fn default_landmarks() -> usize {
    30
}
fn default_anchors() -> AnchorMode {
    AnchorMode::Corners
}
fn default_pairs() -> PairStrategy {
    PairStrategy::AllPairs
}

/// Run configuration. JSON keys match the field names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Dataset directory holding `manifest.json`.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_noise")]
    pub noise_sigma: f64,
    #[serde(default = "default_pairs")]
    pub pair_strategy: PairStrategy,
    #[serde(default)]
    pub seed: u64,
    /// Train / validation / test fractions.
    #[serde(default = "default_split")]
    pub split: [f64; 3],
    /// Total landmark count, anchors included.
    #[serde(default = "default_landmarks")]
    pub landmarks: usize,
    #[serde(default = "default_anchors")]
    pub anchors: AnchorMode,
    /// Layer list in the `arch.txt` syntax; defaults by dimension.
    #[serde(default)]
    pub arch: Option<Vec<String>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").unwrap()
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).unwrap()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise_sigma must be >= 0".into()));
        }
        if self.split.iter().any(|f| !(*f >= 0.0)) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions {:?} must be non-negative and sum to 1", self.split)));
        }
        if let PairStrategy::RandomPairs { count: 0 } = self.pair_strategy {
            return Err(Error::Config("random_pairs count must be positive".into()));
        }
        Ok(())
    }

    pub fn anchor_set(&self, dim: usize) -> LandmarkSet {
        match self.anchors {
            AnchorMode::Corners => corner_anchors(dim),
            AnchorMode::None => LandmarkSet::new(dim, Vec::new()).unwrap(),
        }
    }

    /// Architecture for images of `dims`.
    pub fn arch_for(&self, dims: &[usize]) -> Result<ArchSpec> {
        let anchors = self.anchor_set(dims.len()).len();
        if self.landmarks < anchors + 1 {
            return Err(Error::Config(format!(
                "{} landmarks leave nothing to learn beside {anchors} anchors",
                self.landmarks
            )));
        }
        let learned = self.landmarks - anchors;
        let arch = match &self.arch {
            None => ArchSpec::default_for(dims, learned),
            Some(lines) => {
                let dims_txt: Vec<String> = dims.iter().map(usize::to_string).collect();
                let text = format!("input {}\n{}", dims_txt.join(" "), lines.join("\n"));
                crate::net::parse_arch(&text)?
            }
        };
        if arch.output_len() != learned * dims.len() {
            return Err(Error::Config(format!(
                "network head emits {} values, {learned} learned landmarks need {}",
                arch.output_len(),
                learned * dims.len()
            )));
        }
        Ok(arch)
    }
}

/// Disjoint train / validation / test index lists.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle, then partition; rounding remainders go to the training set.
pub fn make_split(count: usize, fractions: [f64; 3], seed: u64) -> Result<DatasetSplit> {
    if count == 0 {
        return Err(Error::InvalidArgument("cannot split an empty dataset".into()));
    }
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut rng_from_seed(seed));
    let n_val = (count as f64 * fractions[1] + 1e-9).floor() as usize;
    let n_test = (count as f64 * fractions[2] + 1e-9).floor() as usize;
    let n_train = count - n_val - n_test;
    let mut split = DatasetSplit {
        train: order[..n_train].to_vec(),
        validation: order[n_train..n_train + n_val].to_vec(),
        test: order[n_train + n_val..].to_vec(),
    };
    split.train.sort_unstable();
    split.validation.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}

/// Ordered `(source, target)` pairs drawn from `subset`.
///
/// All-pairs yields each of the `n (n - 1)` ordered pairs once, in a seeded order.
pub fn pair_iterator(subset: &[usize], strategy: PairStrategy, seed: u64) -> Result<Vec<(usize, usize)>> {
    let n = subset.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 images to form pairs, got {n}")));
    }
    let mut rng = rng_from_seed(seed);
    Ok(match strategy {
        PairStrategy::AllPairs => {
            let mut pairs: Vec<(usize, usize)> = subset
                .iter()
                .flat_map(|&i| subset.iter().filter(move |&&j| j != i).map(move |&j| (i, j)))
                .collect();
            pairs.shuffle(&mut rng);
            pairs
        }
        PairStrategy::RandomPairs { count } => (0..count)
            .map(|_| {
                let a = rng.gen_range(0..n);
                let b = (a + rng.gen_range(1..n)) % n;
                (subset[a], subset[b])
            })
            .collect(),
    })
}

/// Every ordered pair in index order, no shuffle.
pub fn ordered_pairs(subset: &[usize]) -> Vec<(usize, usize)> {
    subset
        .iter()
        .flat_map(|&i| subset.iter().filter(move |&&j| j != i).map(move |&j| (i, j)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms {
    pub total: f64,
    pub matching: f64,
    pub regularizer: f64,
}

/// Loss of one pair without gradients. `source_in`/`target_in` feed the
/// detector; `source`/`target` are the images registered and compared.
pub fn loss_forward(
    params: &NetParams,
    source_in: &ImageTensor,
    target_in: &ImageTensor,
    source: &ImageTensor,
    target: &ImageTensor,
    lambda: f64,
) -> Result<LossTerms> {
    let (ls, lt) = params.detect_pair(source_in, target_in)?;
    pair_loss(&ls, &lt, source, target, lambda)
}

/// Loss for given landmark sets.
pub fn pair_loss(
    sources: &LandmarkSet,
    targets: &LandmarkSet,
    source: &ImageTensor,
    target: &ImageTensor,
    lambda: f64,
) -> Result<LossTerms> {
    let model = tps::assemble(targets, sources)?.solve()?;
    let registered = tps::warp(&model, source, target.dims())?;
    let matching = tps::registration_loss(&registered, target)?;
    let regularizer = tps::condition_frobenius(model.system())?;
    Ok(LossTerms {
        total: matching + lambda * regularizer,
        matching,
        regularizer,
    })
}

/// Images prepared for training: whitened copies plus the fixed target grid.
pub struct PreparedImages {
    pub whitened: Vec<Arc<ImageTensor>>,
    pub grid: Arc<Vec<f64>>,
}

impl PreparedImages {
    pub fn new(images: &[ImageTensor]) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::InvalidArgument("no images".into()))?;
        if images.iter().any(|im| im.dims() != first.dims()) {
            return Err(Error::DimensionMismatch("images differ in shape".into()));
        }
        Ok(Self {
            whitened: images.iter().map(|im| Arc::new(whiten(im))).collect(),
            grid: Arc::new(grid_points(first.dims())),
        })
    }
}

/// Loss and parameter gradients for one pair.
pub fn loss_and_grad(
    params: &NetParams,
    source_in: &ImageTensor,
    target_in: &ImageTensor,
    source: &ImageTensor,
    target: &Arc<Vec<f64>>,
    grid: &Arc<Vec<f64>>,
    lambda: f64,
) -> Result<(LossTerms, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, true);
    let (_, ls) = params.forward(&mut tape, &vars, source_in)?;
    let (_, lt) = params.forward(&mut tape, &vars, target_in)?;
    let (a, w) = tape.tps_solve(ls, lt)?;
    let coords = tape.tps_map(w, lt, grid.clone())?;
    let registered = tape.sample(source, coords)?;
    let matching = tape.mse(registered, target.clone())?;
    let reg = tape.condition(a)?;
    let weighted = tape.scale(reg, lambda);
    let total = tape.add(matching, weighted)?;
    let terms = LossTerms {
        total: tape.scalar(total),
        matching: tape.scalar(matching),
        regularizer: tape.scalar(reg),
    };
    let mut grads = tape.backward(total)?;
    let g = vars
        .iter()
        .zip(params.params())
        .map(|(v, p)| grads.take(*v).unwrap_or_else(|| vec![0.0; p.data.len()]))
        .collect();
    Ok((terms, g))
}

/// Adam with bias correction. Moments below `f64::MIN_POSITIVE` are flushed to
/// zero so parameters with vanishing gradients never run on subnormals.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &NetParams, learning_rate: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.params().iter().map(|p| vec![0.0; p.data.len()]).collect();
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn update(&mut self, params: &mut NetParams, grads: &[Vec<f64>]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let lr = self.learning_rate * c2.sqrt() / c1;
        let (b1, b2) = (self.beta1, self.beta2);
        let eps = self.epsilon * c2.sqrt();
        for (((p, g), m), v) in params
            .params_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            for (((pv, &gv), mv), vv) in p.data.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = flush_subnormal(b1 * *mv + (1.0 - b1) * gv);
                *vv = flush_subnormal(b2 * *vv + (1.0 - b2) * gv * gv);
                *pv -= lr * *mv / (vv.sqrt() + eps);
            }
        }
    }
}

#[inline]
fn flush_subnormal(x: f64) -> f64 {
    if x.abs() < f64::MIN_POSITIVE {
        0.0
    } else {
        x
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_total: f64,
    pub mean_match: f64,
    pub mean_reg: f64,
    pub val_total: f64,
    pub skipped_steps: usize,
}

pub const LOG_HEADER: &str = "epoch,mean_total,mean_match,mean_reg,val_total,skipped_steps";

pub fn log_csv(rows: &[EpochLog]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{:.17e},{:.17e},{:.17e},{:.17e},{}",
            r.epoch, r.mean_total, r.mean_match, r.mean_reg, r.val_total, r.skipped_steps
        );
    }
    s
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: NetParams,
    pub log: Vec<EpochLog>,
    pub split: DatasetSplit,
}

/// Per-pair evaluation on clean inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairEval {
    pub source: usize,
    pub target: usize,
    pub terms: LossTerms,
    /// `|I_R - I_T|^2 / |I_T|^2` on the whitened images.
    pub relative: f64,
}

/// Evaluates pairs (in parallel, results in input order). Singular pairs are dropped.
pub fn evaluate_pairs(
    params: &NetParams,
    prepared: &PreparedImages,
    pairs: &[(usize, usize)],
    lambda: f64,
) -> Vec<PairEval> {
    let detections: Vec<Option<LandmarkSet>> = {
        let mut needed: Vec<usize> = pairs.iter().flat_map(|&(s, t)| [s, t]).collect();
        needed.sort_unstable();
        needed.dedup();
        let found: Vec<(usize, Option<LandmarkSet>)> = needed
            .par_iter()
            .map(|&i| (i, params.detect(&prepared.whitened[i]).ok()))
            .collect();
        let mut all = vec![None; prepared.whitened.len()];
        for (i, l) in found {
            all[i] = l;
        }
        all
    };
    pairs
        .par_iter()
        .filter_map(|&(s, t)| {
            let ls = detections[s].as_ref()?;
            let lt = detections[t].as_ref()?;
            let src = &prepared.whitened[s];
            let tgt = &prepared.whitened[t];
            let model = tps::assemble(lt, ls).ok()?.solve().ok()?;
            let registered = tps::warp(&model, src, tgt.dims()).ok()?;
            let matching = tps::registration_loss(&registered, tgt).ok()?;
            let regularizer = tps::condition_frobenius(model.system()).ok()?;
            let relative = tps::relative_l2(&registered, tgt).ok()?;
            Some(PairEval {
                source: s,
                target: t,
                terms: LossTerms {
                    total: matching + lambda * regularizer,
                    matching,
                    regularizer,
                },
                relative,
            })
        })
        .collect()
}

fn noise_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Where a training run writes its artifacts.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
    /// Keep a checkpoint for every epoch, not only the final one.
    pub every_epoch: bool,
}

/// Trains on `images` (un-whitened; whitening happens here).
pub fn train(
    config: &TrainConfig,
    images: &[ImageTensor],
    output: Option<&RunOutput>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    config.validate()?;
    let prepared = PreparedImages::new(images)?;
    let dims = images[0].dims().to_vec();
    let arch = config.arch_for(&dims)?;
    let mut params = init_params(&arch, config.anchor_set(dims.len()), config.seed)?;
    let split = make_split(images.len(), config.split, config.seed)?;
    let targets: Vec<Arc<Vec<f64>>> = prepared
        .whitened
        .iter()
        .map(|im| Arc::new(im.data().to_vec()))
        .collect();
    let val_pairs = if split.validation.len() >= 2 {
        ordered_pairs(&split.validation)
    } else {
        Vec::new()
    };
    let mut adam = Adam::new(&params, config.learning_rate);
    let mut log = Vec::with_capacity(config.epochs);
    if let Some(out) = output {
        fs::create_dir_all(&out.dir).map_err(|e| Error::io(&out.dir, e))?;
        let split_json = serde_json::to_string_pretty(&split).unwrap();
        let p = out.dir.join("split.json");
        fs::write(&p, split_json).map_err(|e| Error::io(&p, e))?;
        let p = out.dir.join("config.json");
        fs::write(&p, config.to_json()).map_err(|e| Error::io(&p, e))?;
    }
    for epoch in 1..=config.epochs {
        let pairs = pair_iterator(&split.train, config.pair_strategy, config.seed.wrapping_add(epoch as u64))?;
        let mut noise_rng = rng_from_seed(noise_seed(config.seed, epoch));
        let (mut sum_t, mut sum_m, mut sum_r) = (0.0, 0.0, 0.0);
        let mut done = 0usize;
        let mut skipped = 0usize;
        for (step, &(s, t)) in pairs.iter().enumerate() {
            let (ns, nt): (u64, u64) = (noise_rng.gen(), noise_rng.gen());
            let src_in = add_gaussian_noise(&prepared.whitened[s], config.noise_sigma, ns);
            let tgt_in = add_gaussian_noise(&prepared.whitened[t], config.noise_sigma, nt);
            match loss_and_grad(
                &params,
                &src_in,
                &tgt_in,
                &prepared.whitened[s],
                &targets[t],
                &prepared.grid,
                config.lambda,
            ) {
                Ok((terms, grads)) => {
                    if !terms.total.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
                        return Err(Error::NonFiniteLoss { epoch, step });
                    }
                    adam.update(&mut params, &grads);
                    sum_t += terms.total;
                    sum_m += terms.matching;
                    sum_r += terms.regularizer;
                    done += 1;
                }
                Err(Error::Singular { .. }) => skipped += 1,
                Err(e) => return Err(e),
            }
        }
        let denom = done.max(1) as f64;
        let val = evaluate_pairs(&params, &prepared, &val_pairs, config.lambda);
        let val_total = if val.is_empty() {
            f64::NAN
        } else {
            val.iter().map(|e| e.terms.total).sum::<f64>() / val.len() as f64
        };
        let row = EpochLog {
            epoch,
            mean_total: sum_t / denom,
            mean_match: sum_m / denom,
            mean_reg: sum_r / denom,
            val_total,
            skipped_steps: skipped,
        };
        log.push(row);
        on_epoch(&row);
        if let Some(out) = output {
            if out.every_epoch {
                params.save(out.dir.join("checkpoints").join(format!("epoch_{epoch:03}")))?;
            }
            let p = out.dir.join("train_log.csv");
            fs::write(&p, log_csv(&log)).map_err(|e| Error::io(&p, e))?;
        }
    }
    if let Some(out) = output {
        params.save(out.dir.join("final"))?;
        let p = out.dir.join("train_log.csv");
        fs::write(&p, log_csv(&log)).map_err(|e| Error::io(&p, e))?;
    }
    Ok(TrainOutcome { params, log, split })
}

/// Loads every image listed in a dataset manifest.
pub fn load_dataset_images(dir: impl AsRef<Path>) -> Result<Vec<ImageTensor>> {
    let manifest = crate::phantom::DatasetManifest::load(&dir)?;
    manifest
        .image_paths(&dir)
        .iter()
        .map(ImageTensor::load)
        .collect()
}

/// Number of rows in the spline system for a landmark configuration.
pub fn system_rows(params: &NetParams) -> usize {
    system_size(params.landmarks(), params.dim())
}
