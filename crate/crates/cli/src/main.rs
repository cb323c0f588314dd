//! `morphoscope`: synthetic data, landmark training, registration, culling and shape statistics.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use morphoscope::cull::{self, RedundancyReport};
use nalgebra::DMatrix;
use morphoscope::net::NetParams;
use morphoscope::phantom::{self, DatasetManifest, PhantomStyle, WarpSpec};
use morphoscope::stats::{self, ShapeMatrix};
use morphoscope::tensor::{coord_to_index, import_pgm, pgm_bytes, whiten, ImageTensor};
use morphoscope::tps::{self, LandmarkSet};
use morphoscope::train::{self, AnchorMode, PreparedImages, RunOutput, TrainConfig};

#[derive(Parser)]
#[command(name = "morphoscope", version, about = "Unsupervised landmark detection and shape analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (images, ground-truth landmarks, manifest.json).
    Synth(SynthArgs),
    /// Train a landmark detector on a dataset.
    Train(TrainArgs),
    /// Detect landmarks on one image and write them as a landmark file.
    Detect(DetectArgs),
    /// Register a source image onto a target image with detected landmarks.
    Register(RegisterArgs),
    /// Score landmark importance over a dataset and drop redundant landmarks.
    Cull(CullArgs),
    /// Shape statistics on a shape CSV.
    Stats {
        #[command(subcommand)]
        command: StatsCommand,
    },
    /// Draw landmarks over an image: SVG for 2-D, PGM slice for 3-D.
    Overlay(OverlayArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    /// Warped 2-D Shepp-Logan phantoms.
    Phantom,
    /// Two classes of 3-D ellipsoidal blobs.
    Blobs,
}

#[derive(Args)]
struct SynthArgs {
    /// Dataset family.
    #[arg(long, value_enum, default_value = "phantom")]
    kind: Kind,
    /// Number of images (blobs: even, split equally between classes).
    #[arg(long, default_value_t = 124)]
    count: usize,
    /// Random seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Control-point displacement standard deviation (phantom only).
    #[arg(long, default_value_t = WarpSpec::DEFAULT_SIGMA)]
    sigma: f64,
    /// Edge length in pixels; defaults to 64 (phantom) or 24 (blobs).
    #[arg(long)]
    size: Option<usize>,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Anchors {
    /// Fixed landmarks at the image corners.
    Corners,
    /// Learned landmarks only.
    None,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory; overrides the config's `dataset`.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Random seed for initialization, split, pair order and noise.
    #[arg(long)]
    seed: Option<u64>,
    /// Weight of the condition-number regularizer.
    #[arg(long)]
    lambda: Option<f64>,
    /// Number of passes over the training pairs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Total landmark count, anchors included.
    #[arg(long)]
    landmarks: Option<usize>,
    /// Anchor landmarks appended to every detection.
    #[arg(long, value_enum)]
    anchors: Option<Anchors>,
    /// Also keep a checkpoint after every epoch under `checkpoints/`.
    #[arg(long)]
    keep_checkpoints: bool,
    /// Run directory: config.json, split.json, train_log.csv, final/, landmarks/, test_eval.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DetectArgs {
    /// Checkpoint directory (e.g. RUN/final).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Image file (.mstn or .pgm).
    #[arg(long)]
    image: PathBuf,
    /// Landmark file to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RegisterArgs {
    /// Checkpoint directory (e.g. RUN/final).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Source image, warped onto the target.
    #[arg(long)]
    source: PathBuf,
    /// Target image.
    #[arg(long)]
    target: PathBuf,
    /// Regularizer weight used in the reported total loss.
    #[arg(long, default_value_t = 1e-4)]
    lambda: f64,
    /// Output directory: registered.mstn, report.json, source.txt, target.txt.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CullArgs {
    /// Checkpoint directory (e.g. RUN/final).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory scored over all of its images.
    #[arg(long)]
    dataset: PathBuf,
    /// Minimum importance to keep a landmark; defaults to 0.05 x the largest importance.
    #[arg(long)]
    threshold: Option<f64>,
    /// Seed for pair sampling when the dataset has too many pairs.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory: redundancy.csv and shapes.csv (kept landmarks per image).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum StatsCommand {
    /// Principal components of the shapes.
    Pca(PcaArgs),
    /// Mahalanobis Z-score of every shape against a base cohort in PCA space.
    Zscore(ZscoreArgs),
    /// Spectral clustering of the shapes.
    Cluster(ClusterArgs),
}

#[derive(Args)]
struct PcaArgs {
    /// Shape CSV (id,label,x0,y0,...).
    #[arg(long)]
    shapes: PathBuf,
    /// Fraction of variance the retained components must explain.
    #[arg(long, default_value_t = 0.95)]
    variance: f64,
    /// Output directory: pca_variances.csv, pca_components.csv, pca_scores.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ZscoreArgs {
    /// Shape CSV (id,label,x0,y0,...).
    #[arg(long)]
    shapes: PathBuf,
    /// Label of the base cohort; all rows when omitted.
    #[arg(long)]
    base_label: Option<String>,
    /// Fraction of variance the retained components must explain.
    #[arg(long, default_value_t = 0.95)]
    variance: f64,
    /// Output directory: zscores.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ClusterArgs {
    /// Shape CSV (id,label,x0,y0,...).
    #[arg(long)]
    shapes: PathBuf,
    /// Number of clusters.
    #[arg(long, default_value_t = 2)]
    k: usize,
    /// Output directory: clusters.csv and embedding.svg.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct OverlayArgs {
    /// Image file (.mstn or .pgm).
    #[arg(long)]
    image: PathBuf,
    /// Landmark file.
    #[arg(long)]
    landmarks: PathBuf,
    /// Redundancy CSV; culled landmarks are drawn dashed (2-D only).
    #[arg(long)]
    report: Option<PathBuf>,
    /// Slice index along the first axis (3-D only; default middle).
    #[arg(long)]
    slice: Option<usize>,
    /// Output file (.svg for 2-D, .pgm for 3-D).
    #[arg(long)]
    out: PathBuf,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    configure_threads()?;
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => run_train(a),
        Command::Detect(a) => detect(a),
        Command::Register(a) => register(a),
        Command::Cull(a) => run_cull(a),
        Command::Stats { command } => match command {
            StatsCommand::Pca(a) => pca(a),
            StatsCommand::Zscore(a) => zscore(a),
            StatsCommand::Cluster(a) => cluster(a),
        },
        Command::Overlay(a) => overlay(a),
    }
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("MORPHOSCOPE_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .with_context(|| format!("MORPHOSCOPE_THREADS must be a positive integer, got {value:?}"))?;
    if n == 0 {
        bail!("MORPHOSCOPE_THREADS must be a positive integer, got 0");
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn load_image(path: &Path) -> Result<ImageTensor> {
    let img = match path.extension().and_then(|e| e.to_str()) {
        Some("pgm") => import_pgm(path),
        _ => ImageTensor::load(path),
    };
    img.with_context(|| format!("loading image {}", path.display()))
}

fn load_checkpoint(dir: &Path) -> Result<NetParams> {
    NetParams::load(dir).with_context(|| format!("loading checkpoint {}", dir.display()))
}

fn check_input(params: &NetParams, img: &ImageTensor, path: &Path) -> Result<()> {
    let expected = &params.arch().input_dims;
    if img.dims() != expected.as_slice() {
        bail!(
            "{} has shape {:?}, checkpoint expects {:?}",
            path.display(),
            img.dims(),
            expected
        );
    }
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let manifest = match a.kind {
        Kind::Phantom => {
            let n = a.size.unwrap_or(64);
            let warp = WarpSpec::phantom(a.sigma, a.seed);
            phantom::write_phantom_dataset(&a.out, &[n, n], &PhantomStyle::default(), &warp, a.count)?
        }
        Kind::Blobs => {
            if a.count % 2 != 0 {
                bail!("blob datasets need an even --count, got {}", a.count);
            }
            let n = a.size.unwrap_or(24);
            phantom::write_blob_dataset(&a.out, &[n, n, n], a.count / 2, a.seed)?
        }
    };
    println!("wrote {} images to {}", manifest.samples.len(), a.out.display());
    Ok(())
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => TrainConfig::default(),
    };
    if let Some(d) = &a.dataset {
        cfg.dataset = Some(d.clone());
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.lambda {
        cfg.lambda = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.landmarks {
        cfg.landmarks = v;
    }
    if let Some(v) = a.anchors {
        cfg.anchors = match v {
            Anchors::Corners => AnchorMode::Corners,
            Anchors::None => AnchorMode::None,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_train(a: TrainArgs) -> Result<()> {
    let cfg = train_config(&a)?;
    let dataset = cfg
        .dataset
        .clone()
        .context("no dataset: pass --dataset or set \"dataset\" in the config")?;
    let manifest = DatasetManifest::load(&dataset)?;
    let images = train::load_dataset_images(&dataset)?;
    let output = RunOutput {
        dir: a.out.clone(),
        every_epoch: a.keep_checkpoints,
    };
    let outcome = train::train(&cfg, &images, Some(&output), |row| {
        eprintln!(
            "epoch {:>3}  total {:.6e}  match {:.6e}  reg {:.4e}  val {:.6e}  skipped {}",
            row.epoch, row.mean_total, row.mean_match, row.mean_reg, row.val_total, row.skipped_steps
        );
    })?;

    let prepared = PreparedImages::new(&images)?;
    for (entry, img) in manifest.samples.iter().zip(&prepared.whitened) {
        let l = outcome.params.detect(img)?;
        write(&a.out.join("landmarks").join(format!("{}.txt", entry.id)), l.to_text())?;
    }
    let pairs = train::ordered_pairs(&outcome.split.test);
    let evals = train::evaluate_pairs(&outcome.params, &prepared, &pairs, cfg.lambda);
    let mut csv = String::from("source,target,matching,regularizer,total,relative_l2\n");
    for e in &evals {
        let t = e.terms;
        let _ = writeln!(csv, "{},{},{},{},{},{}", e.source, e.target, t.matching, t.regularizer, t.total, e.relative);
    }
    write(&a.out.join("test_eval.csv"), csv)?;
    if evals.is_empty() {
        println!("trained {} epochs; no test pairs", cfg.epochs);
    } else {
        let mean = evals.iter().map(|e| e.relative).sum::<f64>() / evals.len() as f64;
        println!(
            "trained {} epochs; {} test pairs, mean relative L2 {:.4}%",
            cfg.epochs,
            evals.len(),
            100.0 * mean
        );
    }
    Ok(())
}

fn detect(a: DetectArgs) -> Result<()> {
    let params = load_checkpoint(&a.checkpoint)?;
    let img = load_image(&a.image)?;
    check_input(&params, &img, &a.image)?;
    let l = params.detect(&whiten(&img))?;
    write(&a.out, l.to_text())
}

fn register(a: RegisterArgs) -> Result<()> {
    let params = load_checkpoint(&a.checkpoint)?;
    let src = load_image(&a.source)?;
    let tgt = load_image(&a.target)?;
    check_input(&params, &src, &a.source)?;
    check_input(&params, &tgt, &a.target)?;
    let (ws, wt) = (whiten(&src), whiten(&tgt));
    let (ls, lt) = params.detect_pair(&ws, &wt)?;
    let model = tps::assemble(&lt, &ls)?.solve().context("landmark configuration is singular")?;
    let registered_w = tps::warp(&model, &ws, wt.dims())?;
    let matching = tps::registration_loss(&registered_w, &wt)?;
    let regularizer = tps::condition_frobenius(model.system())?;
    let relative = tps::relative_l2(&registered_w, &wt)?;
    let registered = tps::warp(&model, &src, tgt.dims())?;
    let report = serde_json::json!({
        "matching": matching,
        "regularizer": regularizer,
        "lambda": a.lambda,
        "total": matching + a.lambda * regularizer,
        "relative_l2": relative,
    });
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write(&a.out.join("registered.mstn"), registered.to_bytes()?)?;
    write(&a.out.join("source.txt"), ls.to_text())?;
    write(&a.out.join("target.txt"), lt.to_text())?;
    write(&a.out.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    println!("relative L2 {:.6e}, matching {:.6e}, regularizer {:.6e}", relative, matching, regularizer);
    Ok(())
}

fn run_cull(a: CullArgs) -> Result<()> {
    let params = load_checkpoint(&a.checkpoint)?;
    let manifest = DatasetManifest::load(&a.dataset)?;
    let images = train::load_dataset_images(&a.dataset)?;
    for (img, path) in images.iter().zip(manifest.image_paths(&a.dataset)) {
        check_input(&params, img, &path)?;
    }
    let prepared = PreparedImages::new(&images)?;
    let all: Vec<usize> = (0..images.len()).collect();
    let pairs = cull::scoring_pairs(&all, a.seed)?;
    let scored = cull::score_landmarks(&params, &prepared, &pairs)?;
    let threshold = a.threshold.unwrap_or_else(|| scored.default_threshold());
    let report = cull::cull(&scored, threshold, &[])?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write(&a.out.join("redundancy.csv"), report.to_csv())?;

    let sets = prepared
        .whitened
        .iter()
        .map(|im| params.detect(im))
        .collect::<morphoscope::Result<Vec<_>>>()?;
    let ids = manifest.samples.iter().map(|s| s.id.clone()).collect();
    let labels = manifest
        .samples
        .iter()
        .map(|s| s.label.map(|l| l.to_string()).unwrap_or_default())
        .collect();
    let kept = report.kept_indices();
    ShapeMatrix::from_landmarks(ids, labels, &sets, Some(&kept))?.save(a.out.join("shapes.csv"))?;
    println!(
        "kept {} of {} landmarks (threshold {:.3e}, {} pairs, {} singular exclusions)",
        kept.len(),
        report.kept.len(),
        threshold,
        report.pairs_used,
        report.excluded
    );
    Ok(())
}

fn load_shapes(path: &Path) -> Result<ShapeMatrix> {
    ShapeMatrix::load(path).with_context(|| format!("loading shapes {}", path.display()))
}

fn pca(a: PcaArgs) -> Result<()> {
    let shapes = load_shapes(&a.shapes)?;
    let model = stats::fit_pca(&shapes.data, a.variance)?;
    let total: f64 = model.variances.iter().sum();
    let mut var = String::from("component,variance,cumulative_fraction\n");
    let mut acc = 0.0;
    for (i, v) in model.variances.iter().enumerate() {
        acc += v;
        let frac = if total > 0.0 { acc / total } else { 1.0 };
        let _ = writeln!(var, "{},{},{}", i + 1, v, frac);
    }
    let mut comp = String::from("component");
    for j in 0..model.components.ncols() {
        let _ = write!(comp, ",c{j}");
    }
    comp.push('\n');
    for i in 0..model.retained {
        let _ = write!(comp, "{}", i + 1);
        for v in model.components.row(i).iter() {
            let _ = write!(comp, ",{v}");
        }
        comp.push('\n');
    }
    let mut scores = String::from("id,label");
    for i in 0..model.retained {
        let _ = write!(scores, ",pc{}", i + 1);
    }
    scores.push('\n');
    for r in 0..shapes.nrows() {
        let p = model.project(&shapes.row(r))?;
        let _ = write!(scores, "{},{}", shapes.ids[r], shapes.labels[r]);
        for v in p.iter() {
            let _ = write!(scores, ",{v}");
        }
        scores.push('\n');
    }
    write(&a.out.join("pca_variances.csv"), var)?;
    write(&a.out.join("pca_components.csv"), comp)?;
    write(&a.out.join("pca_scores.csv"), scores)?;
    println!(
        "{} of {} components explain {:.2}% of variance",
        model.retained,
        model.variances.len(),
        100.0 * model.explained_fraction()
    );
    Ok(())
}

fn zscore(a: ZscoreArgs) -> Result<()> {
    let shapes = load_shapes(&a.shapes)?;
    let base_rows: Vec<usize> = (0..shapes.nrows())
        .filter(|&i| a.base_label.as_ref().map_or(true, |l| &shapes.labels[i] == l))
        .collect();
    if base_rows.len() < 2 {
        bail!("base cohort has {} shapes; at least 2 are needed", base_rows.len());
    }
    let base = DMatrix::from_fn(base_rows.len(), shapes.data.ncols(), |i, j| shapes.data[(base_rows[i], j)]);
    let model = stats::ZScoreModel::fit(&base, a.variance)?;
    let mut out = String::from("id,label,zscore\n");
    for r in 0..shapes.nrows() {
        let z = model.zscore(&shapes.row(r))?;
        let _ = writeln!(out, "{},{},{z}", shapes.ids[r], shapes.labels[r]);
    }
    write(&a.out.join("zscores.csv"), out)?;
    println!("scored {} shapes against a base of {}", shapes.nrows(), base_rows.len());
    Ok(())
}

fn cluster(a: ClusterArgs) -> Result<()> {
    let shapes = load_shapes(&a.shapes)?;
    let fit = stats::spectral_cluster(&shapes.data, a.k)?;
    let embed = stats::embed_2d(&shapes.data)?;
    let mut out = String::from("id,label,cluster,pc1,pc2\n");
    for r in 0..shapes.nrows() {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            shapes.ids[r],
            shapes.labels[r],
            fit.labels[r],
            embed[(r, 0)],
            embed[(r, 1)]
        );
    }
    write(&a.out.join("clusters.csv"), out)?;
    write(&a.out.join("embedding.svg"), scatter_svg(&embed, &fit.labels))?;
    println!("clustered {} shapes into {} groups", shapes.nrows(), a.k);
    Ok(())
}

const PALETTE: [&str; 8] = ["#d62728", "#1f77b4", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

fn scatter_svg(points: &DMatrix<f64>, labels: &[usize]) -> String {
    let (size, margin) = (400.0, 20.0);
    let range = |c: usize| {
        let col = points.column(c);
        let (lo, hi) = (col.min(), col.max());
        (lo, if hi > lo { hi - lo } else { 1.0 })
    };
    let ((x0, xs), (y0, ys)) = (range(0), range(1));
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{w}\" viewBox=\"0 0 {w} {w}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n",
        w = size + 2.0 * margin
    );
    for (r, &l) in labels.iter().enumerate() {
        let x = margin + (points[(r, 0)] - x0) / xs * size;
        let y = margin + size - (points[(r, 1)] - y0) / ys * size;
        let _ = writeln!(s, "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"4\" fill=\"{}\"/>", PALETTE[l % PALETTE.len()]);
    }
    s.push_str("</svg>\n");
    s
}

fn overlay(a: OverlayArgs) -> Result<()> {
    let img = load_image(&a.image)?;
    let marks = LandmarkSet::load(&a.landmarks).with_context(|| format!("loading {}", a.landmarks.display()))?;
    if marks.dim() != img.ndim() {
        bail!("{}-d landmarks do not fit a {}-d image", marks.dim(), img.ndim());
    }
    let kept = match &a.report {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let r = RedundancyReport::parse_csv(&text)?;
            if r.kept.len() != marks.len() {
                bail!("report covers {} landmarks, file holds {}", r.kept.len(), marks.len());
            }
            r.kept
        }
        None => vec![true; marks.len()],
    };
    match img.ndim() {
        2 => write(&a.out, overlay_svg(&img, &marks, &kept)),
        3 => {
            let n0 = img.dims()[0];
            let slice = a.slice.unwrap_or(n0 / 2);
            if slice >= n0 {
                bail!("slice {slice} out of range for {n0} slices");
            }
            write(&a.out, overlay_slice_pgm(&img, &marks, slice))
        }
        d => bail!("overlay supports 2-d and 3-d images, got {d}-d"),
    }
}

fn gray_levels(values: &[f64], lo: f64, hi: f64) -> Vec<u8> {
    let span = if hi > lo { hi - lo } else { 1.0 };
    values.iter().map(|v| ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8).collect()
}

fn overlay_svg(img: &ImageTensor, marks: &LandmarkSet, kept: &[bool]) -> String {
    const CELL: f64 = 8.0;
    let (rows, cols) = (img.dims()[0], img.dims()[1]);
    let (lo, hi) = img.min_max();
    let gray = gray_levels(img.data(), lo, hi);
    let (w, h) = (cols as f64 * CELL, rows as f64 * CELL);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\" shape-rendering=\"crispEdges\">\n"
    );
    for r in 0..rows {
        for c in 0..cols {
            let g = gray[r * cols + c];
            let _ = writeln!(
                s,
                "<rect x=\"{}\" y=\"{}\" width=\"{CELL}\" height=\"{CELL}\" fill=\"rgb({g},{g},{g})\"/>",
                c as f64 * CELL,
                r as f64 * CELL
            );
        }
    }
    for (k, p) in marks.iter().enumerate() {
        let y = (coord_to_index(p[0], rows) + 0.5) * CELL;
        let x = (coord_to_index(p[1], cols) + 0.5) * CELL;
        let dash = if kept[k] { "" } else { " stroke-dasharray=\"2,2\"" };
        let _ = writeln!(
            s,
            "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"{r}\" fill=\"none\" stroke=\"#ff3030\" stroke-width=\"1.5\"{dash}/>\n\
             <text x=\"{tx:.2}\" y=\"{ty:.2}\" font-size=\"10\" fill=\"#ffff00\">{k}</text>",
            r = CELL * 0.75,
            tx = x + CELL,
            ty = y - CELL * 0.5
        );
    }
    s.push_str("</svg>\n");
    s
}

/// One axial slice with a cross at every landmark within one slice of it.
fn overlay_slice_pgm(img: &ImageTensor, marks: &LandmarkSet, slice: usize) -> Vec<u8> {
    let (n0, rows, cols) = (img.dims()[0], img.dims()[1], img.dims()[2]);
    let plane = &img.data()[slice * rows * cols..(slice + 1) * rows * cols];
    let (lo, hi) = img.min_max();
    let mut px = gray_levels(plane, lo, hi);
    for p in marks.iter() {
        if (coord_to_index(p[0], n0) - slice as f64).abs() > 1.0 {
            continue;
        }
        let r = coord_to_index(p[1], rows).round() as i64;
        let c = coord_to_index(p[2], cols).round() as i64;
        for d in -2i64..=2 {
            for (rr, cc) in [(r + d, c), (r, c + d)] {
                if (0..rows as i64).contains(&rr) && (0..cols as i64).contains(&cc) {
                    px[rr as usize * cols + cc as usize] = 255;
                }
            }
        }
    }
    pgm_bytes(cols, rows, &px)
}
