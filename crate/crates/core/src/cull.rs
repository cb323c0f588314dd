//! Leave-one-out landmark importance and thresholded removal.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::net::NetParams;
use crate::tensor::{rng_from_seed, ImageTensor};
use crate::tps::{self, LandmarkSet};
use crate::train::{ordered_pairs, PreparedImages};

/// Upper bound on the number of pairs used for scoring.
pub const MAX_SCORING_PAIRS: usize = 2000;

/// Fraction of the largest importance used as the default cut.
pub const DEFAULT_THRESHOLD_FRACTION: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct RedundancyReport {
    /// Mean matching-loss increase when each landmark is dropped.
    pub importance: Vec<f64>,
    pub pairs_used: usize,
    /// `(pair, landmark)` samples left out because the reduced system was singular.
    pub excluded: usize,
    pub kept: Vec<bool>,
}

/// All ordered pairs of `subset`, or [`MAX_SCORING_PAIRS`] seeded random pairs if there are more.
pub fn scoring_pairs(subset: &[usize], seed: u64) -> Result<Vec<(usize, usize)>> {
    let n = subset.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("scoring needs at least 2 images, got {n}")));
    }
    if n * (n - 1) <= MAX_SCORING_PAIRS {
        return Ok(ordered_pairs(subset));
    }
    let mut rng = rng_from_seed(seed);
    Ok((0..MAX_SCORING_PAIRS)
        .map(|_| {
            let a = rng.gen_range(0..n);
            let b = (a + rng.gen_range(1..n)) % n;
            (subset[a], subset[b])
        })
        .collect())
}

fn matching(sources: &LandmarkSet, targets: &LandmarkSet, source: &ImageTensor, target: &ImageTensor) -> Option<f64> {
    let model = tps::assemble(targets, sources).ok()?.solve().ok()?;
    let registered = tps::warp(&model, source, target.dims()).ok()?;
    tps::registration_loss(&registered, target).ok()
}

/// Scores every landmark by the mean increase in matching loss when it is removed.
pub fn score_landmarks(
    params: &NetParams,
    prepared: &PreparedImages,
    pairs: &[(usize, usize)],
) -> Result<RedundancyReport> {
    let mut needed: Vec<usize> = pairs.iter().flat_map(|&(s, t)| [s, t]).collect();
    needed.sort_unstable();
    needed.dedup();
    let found: Vec<(usize, LandmarkSet)> = needed
        .par_iter()
        .map(|&i| Ok((i, params.detect(&prepared.whitened[i])?)))
        .collect::<Result<_>>()?;
    let mut sets: Vec<Option<LandmarkSet>> = vec![None; prepared.whitened.len()];
    for (i, l) in found {
        sets[i] = Some(l);
    }
    score_landmark_sets(&sets, &prepared.whitened, pairs)
}

/// Leave-one-out scoring for given per-image landmark sets.
///
/// Pairs whose full system is singular are skipped entirely; singular reduced
/// systems are counted in `excluded`.
pub fn score_landmark_sets<I: AsRef<ImageTensor> + Sync>(
    sets: &[Option<LandmarkSet>],
    images: &[I],
    pairs: &[(usize, usize)],
) -> Result<RedundancyReport> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no pairs to score".into()));
    }
    let landmarks = |i: usize| {
        sets.get(i)
            .and_then(Option::as_ref)
            .ok_or_else(|| Error::InvalidArgument(format!("no landmarks for image {i}")))
    };
    let first = landmarks(pairs[0].0)?;
    let (k, d) = (first.len(), first.dim());
    if k < d + 2 {
        return Err(Error::TooFewLandmarks { found: k, required: d + 2 });
    }
    for &(s, t) in pairs {
        for i in [s, t] {
            let l = landmarks(i)?;
            if l.len() != k || l.dim() != d {
                return Err(Error::DimensionMismatch(format!("image {i} has {} landmarks, expected {k}", l.len())));
            }
        }
    }
    let per_pair: Vec<Option<Vec<Option<f64>>>> = pairs
        .par_iter()
        .map(|&(s, t)| {
            let (ls, lt) = (sets[s].as_ref()?, sets[t].as_ref()?);
            let (src, tgt) = (images[s].as_ref(), images[t].as_ref());
            let full = matching(ls, lt, src, tgt)?;
            Some(
                (0..k)
                    .map(|j| matching(&ls.without(j), &lt.without(j), src, tgt).map(|l| l - full))
                    .collect(),
            )
        })
        .collect();
    let mut sums = vec![0.0; k];
    let mut counts = vec![0usize; k];
    let mut pairs_used = 0;
    let mut excluded = 0;
    for deltas in per_pair.into_iter().flatten() {
        pairs_used += 1;
        for (j, delta) in deltas.into_iter().enumerate() {
            match delta {
                Some(v) => {
                    sums[j] += v;
                    counts[j] += 1;
                }
                None => excluded += 1,
            }
        }
    }
    if pairs_used == 0 {
        return Err(Error::InvalidArgument("every scoring pair had a singular system".into()));
    }
    let importance = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
        .collect();
    Ok(RedundancyReport {
        importance,
        pairs_used,
        excluded,
        kept: vec![true; k],
    })
}

impl RedundancyReport {
    pub fn max_importance(&self) -> f64 {
        self.importance.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn default_threshold(&self) -> f64 {
        DEFAULT_THRESHOLD_FRACTION * self.max_importance()
    }

    /// Sorted indices of kept landmarks.
    pub fn kept_indices(&self) -> Vec<usize> {
        self.kept.iter().enumerate().filter(|(_, &k)| k).map(|(i, _)| i).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("landmark_index,importance,kept\n");
        for (i, (v, k)) in self.importance.iter().zip(&self.kept).enumerate() {
            let _ = writeln!(s, "{i},{v:.17e},{}", u8::from(*k));
        }
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("landmark_index,importance,kept") {
            return Err(Error::Parse("report header must be landmark_index,importance,kept".into()));
        }
        let (mut importance, mut kept) = (Vec::new(), Vec::new());
        for (n, line) in lines.filter(|l| !l.trim().is_empty()).enumerate() {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            let bad = || Error::Parse(format!("report row {}: {line:?}", n + 1));
            if f.len() != 3 || f[0].parse::<usize>().ok() != Some(n) {
                return Err(bad());
            }
            importance.push(f[1].parse::<f64>().map_err(|_| bad())?);
            kept.push(match f[2] {
                "1" => true,
                "0" => false,
                _ => return Err(bad()),
            });
        }
        Ok(Self {
            importance,
            pairs_used: 0,
            excluded: 0,
            kept,
        })
    }
}

/// Keeps landmarks with importance at or above `threshold`, plus any `pinned` ones.
pub fn cull(report: &RedundancyReport, threshold: f64, pinned: &[usize]) -> Result<RedundancyReport> {
    if threshold.is_nan() {
        return Err(Error::InvalidArgument("threshold must not be NaN".into()));
    }
    if let Some(&p) = pinned.iter().find(|&&p| p >= report.importance.len()) {
        return Err(Error::InvalidArgument(format!("pinned index {p} out of range")));
    }
    let kept: Vec<bool> = report
        .importance
        .iter()
        .enumerate()
        .map(|(i, &v)| v >= threshold || pinned.contains(&i))
        .collect();
    if !kept.iter().any(|&k| k) {
        return Err(Error::EmptySelection(threshold));
    }
    Ok(RedundancyReport {
        kept,
        ..report.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{init_params, ArchSpec};
    use crate::tensor::ImageTensor;
    use proptest::prelude::*;

    fn report(importance: Vec<f64>) -> RedundancyReport {
        let k = importance.len();
        RedundancyReport {
            importance,
            pairs_used: 1,
            excluded: 0,
            kept: vec![true; k],
        }
    }

    #[test]
    fn thresholds() {
        let r = report(vec![0.5, 0.01, -0.2, 1.0]);
        assert_eq!(cull(&r, f64::NEG_INFINITY, &[]).unwrap().kept_indices(), vec![0, 1, 2, 3]);
        assert_eq!(cull(&r, r.default_threshold(), &[]).unwrap().kept_indices(), vec![0, 3]);
        assert_eq!(cull(&r, r.default_threshold(), &[2]).unwrap().kept_indices(), vec![0, 2, 3]);
        assert!(matches!(cull(&r, 1.0 + 1e-12, &[]), Err(Error::EmptySelection(_))));
        assert!(cull(&r, f64::NAN, &[]).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let r = cull(&report(vec![0.25, -1e-9, 3.0]), 0.1, &[]).unwrap();
        let back = RedundancyReport::parse_csv(&r.to_csv()).unwrap();
        assert_eq!(back.importance, r.importance);
        assert_eq!(back.kept, r.kept);
    }

    proptest! {
        #[test]
        fn raising_threshold_never_adds(vals in prop::collection::vec(-1.0f64..1.0, 2..20), a in -1.0f64..1.0, b in -1.0f64..1.0) {
            let r = report(vals);
            let (lo, hi) = (a.min(b), a.max(b));
            if let (Ok(l), Ok(h)) = (cull(&r, lo, &[]), cull(&r, hi, &[])) {
                for (x, y) in l.kept.iter().zip(&h.kept) {
                    prop_assert!(*x || !*y);
                }
            }
        }
    }

    fn bump(cx: f64) -> ImageTensor {
        ImageTensor::from_fn(vec![16, 16], |p| (-((p[0] - cx).powi(2) + p[1].powi(2)) * 20.0).exp())
    }

    #[test]
    fn moving_duplicate_and_remote_landmarks() {
        let centers = [0.08, -0.08, 0.0];
        let images: Vec<ImageTensor> = centers.iter().map(|&c| crate::tensor::whiten(&bump(c))).collect();
        // 0 tracks the bump, 1 and 2 nearly coincide, 3 sits far away; corners anchor the frame
        let sets: Vec<Option<LandmarkSet>> = centers
            .iter()
            .map(|&c| {
                let pts = [c, 0.0, 0.5, 0.5, 0.5, 0.5 + 1e-4, -0.85, 0.85, -1.0, -1.0, -1.0, 1.0, 1.0, -1.0, 1.0, 1.0];
                Some(LandmarkSet::new(2, pts.to_vec()).unwrap())
            })
            .collect();
        let pairs = ordered_pairs(&[0, 1, 2]);
        let r = score_landmark_sets(&sets, &images, &pairs).unwrap();
        assert_eq!(r.pairs_used, 6);
        let imp = &r.importance;
        assert!(imp[0] > 1e-3, "{imp:?}");
        for j in 1..imp.len() {
            assert!(imp[j].abs() < 1e-2 * imp[0], "landmark {j}: {imp:?}");
        }
        let culled = cull(&r, r.default_threshold(), &[]).unwrap();
        assert!(culled.kept[0] && !culled.kept[1] && !culled.kept[2] && !culled.kept[3]);
    }

    #[test]
    fn scoring_is_order_invariant() {
        let net = init_params(&ArchSpec::default_for(&[16, 16], 4), crate::net::corner_anchors(2), 5).unwrap();
        // perturb the head so landmarks follow the image
        let mut net = net;
        let n = net.params().len();
        net.params_mut()[n - 2].data.iter_mut().for_each(|w| *w *= 100.0);
        let prepared = PreparedImages::new(&[bump(0.1), bump(-0.1), bump(0.2)]).unwrap();
        let pairs = ordered_pairs(&[0, 1, 2]);
        let mut reversed = pairs.clone();
        reversed.reverse();
        let a = score_landmarks(&net, &prepared, &pairs).unwrap();
        let b = score_landmarks(&net, &prepared, &reversed).unwrap();
        for (x, y) in a.importance.iter().zip(&b.importance) {
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1e-12));
        }
        assert!(a.importance.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn pair_cap() {
        assert_eq!(scoring_pairs(&[0, 1, 2], 0).unwrap().len(), 6);
        let big: Vec<usize> = (0..100).collect();
        let p = scoring_pairs(&big, 3).unwrap();
        assert_eq!(p.len(), MAX_SCORING_PAIRS);
        assert!(p.iter().all(|(a, b)| a != b));
        assert!(scoring_pairs(&[1], 0).is_err());
    }
}
