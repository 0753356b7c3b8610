//! Desk-scale experiments: synthetic label scenes, gradient descent on a free
//! logit grid, and segmentation metrics.
//!
//! The logits themselves are the parameters, so the optimizer sees exactly
//! the loss surface and nothing else. Training runs a cross-entropy warm-up
//! and then continues with `ce + λ·ar`.

use crate::error::{Error, Result};
use crate::grid::{LabelMap, ScoreMap};
use crate::affinity::AffinityMatrix;
use crate::losses::{ar_forward, ar_loss, ce_loss, combine, DEFAULT_LAMBDA};
use crate::pool::ScaleSet;
use crate::scalar::Scalar;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Ignore id written into generated scenes.
pub const SCENE_IGNORE_ID: u32 = 255;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScenePattern {
    /// Horizontal bands cycling through the classes.
    Stripes,
    /// Class-0 background overlaid with one random rectangle per class.
    Rectangles,
    /// Nearest-seed partition with one seed per class.
    Voronoi,
}

impl std::str::FromStr for ScenePattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stripes" => Ok(Self::Stripes),
            "rectangles" => Ok(Self::Rectangles),
            "voronoi" => Ok(Self::Voronoi),
            other => Err(Error::InvalidArgument(format!("unknown scene pattern {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub pattern: ScenePattern,
    pub seed: u64,
    pub ignore_fraction: f64,
}

impl SceneSpec {
    /// 24×24, four classes, rectangles, seed 7.
    pub fn reference() -> Self {
        Self { height: 24, width: 24, num_classes: 4, pattern: ScenePattern::Rectangles, seed: 7, ignore_fraction: 0.0 }
    }
}

pub fn gen_scene(spec: &SceneSpec) -> Result<LabelMap> {
    let (h, w, c) = (spec.height, spec.width, spec.num_classes);
    if c < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 classes, got {c}")));
    }
    if c >= SCENE_IGNORE_ID as usize {
        return Err(Error::InvalidArgument(format!("at most {} classes supported", SCENE_IGNORE_ID)));
    }
    if h == 0 || w == 0 || c > h * w {
        return Err(Error::Degenerate(format!("{c} classes do not fit a {h}x{w} scene")));
    }
    if !(0.0..1.0).contains(&spec.ignore_fraction) {
        return Err(Error::InvalidArgument(format!("ignore fraction {} outside [0, 1)", spec.ignore_fraction)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut data = match spec.pattern {
        ScenePattern::Stripes => stripes(h, w, c),
        ScenePattern::Rectangles => rectangles(h, w, c, &mut rng),
        ScenePattern::Voronoi => voronoi(h, w, c, &mut rng),
    };
    if spec.ignore_fraction > 0.0 {
        for id in data.iter_mut() {
            if rng.random::<f64>() < spec.ignore_fraction {
                *id = SCENE_IGNORE_ID;
            }
        }
    }
    let map = LabelMap::new(h, w, data)?.with_ignore(Some(SCENE_IGNORE_ID));
    map.with_num_classes(c)
}

fn stripes(h: usize, w: usize, c: usize) -> Vec<u32> {
    let band = (h / (2 * c)).max(1);
    (0..h * w).map(|i| ((i / w / band) % c) as u32).collect()
}

fn rectangles(h: usize, w: usize, c: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
    let draw = |rng: &mut ChaCha8Rng| {
        let mut data = vec![0u32; h * w];
        for class in 1..c {
            let rh = rng.random_range((h / 4).max(1)..=(h / 2).max(1));
            let rw = rng.random_range((w / 4).max(1)..=(w / 2).max(1));
            let r0 = rng.random_range(0..=h - rh);
            let c0 = rng.random_range(0..=w - rw);
            for r in r0..r0 + rh {
                data[r * w + c0..r * w + c0 + rw].fill(class as u32);
            }
        }
        data
    };
    let mut data = draw(rng);
    for _ in 0..32 {
        if histogram(&data, c).iter().all(|&n| n > 0) {
            return data;
        }
        data = draw(rng);
    }
    // Occluded classes each claim one pixel from a class that can spare it.
    for class in 0..c {
        let counts = histogram(&data, c);
        if counts[class] == 0 {
            let donor = data.iter().position(|&id| counts[id as usize] > 1).expect("c <= h*w");
            data[donor] = class as u32;
        }
    }
    data
}

fn voronoi(h: usize, w: usize, c: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
    let seeds: Vec<(i64, i64)> = sample(rng, h * w, c).into_iter().map(|i| ((i / w) as i64, (i % w) as i64)).collect();
    (0..h * w)
        .map(|i| {
            let (r, col) = ((i / w) as i64, (i % w) as i64);
            let mut best = 0;
            let mut best_d = i64::MAX;
            for (k, &(sr, sc)) in seeds.iter().enumerate() {
                let d = (r - sr).pow(2) + (col - sc).pow(2);
                if d < best_d {
                    best = k;
                    best_d = d;
                }
            }
            best as u32
        })
        .collect()
}

fn histogram(data: &[u32], c: usize) -> Vec<usize> {
    let mut counts = vec![0; c];
    for &id in data {
        if (id as usize) < c {
            counts[id as usize] += 1;
        }
    }
    counts
}

/// Per-class pixel counts of a label map, ignoring the ignore id.
pub fn class_histogram(l: &LabelMap) -> Vec<usize> {
    let mut counts = vec![0; l.class_count()];
    for &id in l.data() {
        if !l.is_ignored(id) {
            counts[id as usize] += 1;
        }
    }
    counts
}

fn check_pair(pred: &LabelMap, gt: &LabelMap) -> Result<()> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    Ok(())
}

/// Mean intersection-over-union over the classes present in `gt`.
/// Pixels whose ground truth is `ignore_id` are dropped from both sets.
pub fn miou(pred: &LabelMap, gt: &LabelMap, num_classes: usize, ignore_id: Option<u32>) -> Result<f64> {
    check_pair(pred, gt)?;
    let mut inter = vec![0usize; num_classes];
    let mut pred_count = vec![0usize; num_classes];
    let mut gt_count = vec![0usize; num_classes];
    for (pixel, (&p, &g)) in pred.data().iter().zip(gt.data()).enumerate() {
        if Some(g) == ignore_id {
            continue;
        }
        let gi = g as usize;
        if gi >= num_classes {
            return Err(Error::ClassOutOfRange { id: g, pixel, num_classes });
        }
        gt_count[gi] += 1;
        if let Some(slot) = pred_count.get_mut(p as usize) {
            *slot += 1;
        }
        if p == g {
            inter[gi] += 1;
        }
    }
    let present: Vec<usize> = (0..num_classes).filter(|&k| gt_count[k] > 0).collect();
    if present.is_empty() {
        return Err(Error::Degenerate("no valid ground-truth pixels".into()));
    }
    let total: f64 = present
        .iter()
        .map(|&k| inter[k] as f64 / (gt_count[k] + pred_count[k] - inter[k]) as f64)
        .sum();
    Ok(total / present.len() as f64)
}

/// Fraction of non-ignored pixels predicted correctly.
pub fn pixel_accuracy(pred: &LabelMap, gt: &LabelMap, ignore_id: Option<u32>) -> Result<f64> {
    check_pair(pred, gt)?;
    let (mut hit, mut valid) = (0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        if Some(g) == ignore_id {
            continue;
        }
        valid += 1;
        hit += usize::from(p == g);
    }
    if valid == 0 {
        return Err(Error::Degenerate("no valid ground-truth pixels".into()));
    }
    Ok(hit as f64 / valid as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Total iterations, warm-up included.
    pub steps: usize,
    pub lr: f64,
    pub lambda: f64,
    pub scales: ScaleSet,
    pub init_std: f64,
    pub seed: u64,
    /// Leading iterations trained with cross-entropy only.
    pub warmup_ce_steps: usize,
}

impl TrainConfig {
    /// The reference run: 300 warm-up plus 700 AR steps, λ = 0.1, scales [8, 4].
    pub fn reference() -> Self {
        Self {
            steps: 1000,
            lr: REFERENCE_LR,
            lambda: DEFAULT_LAMBDA,
            scales: ScaleSet::new(vec![8, 4]).expect("static scales"),
            init_std: 0.01,
            seed: 7,
            warmup_ce_steps: 300,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidArgument("steps must be at least 1".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::InvalidArgument(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidArgument(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if !(self.init_std >= 0.0) || !self.init_std.is_finite() {
            return Err(Error::InvalidArgument(format!("init_std must be non-negative, got {}", self.init_std)));
        }
        Ok(())
    }
}

/// Learning rate of the reference run.
pub const REFERENCE_LR: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Warmup,
    Main,
}

/// Metrics after one gradient step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainRecord {
    /// 1-based count of updates applied so far.
    pub step: usize,
    pub phase: Phase,
    pub ce_loss: f64,
    pub ar_loss: f64,
    /// `ce + λ·ar` with the λ of this step's phase.
    pub total_loss: f64,
    pub pixel_accuracy: f64,
    pub miou: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainTrace<T> {
    pub records: Vec<TrainRecord>,
    /// Logits when the warm-up finished (the initial logits if there was none).
    pub warmup_logits: ScoreMap<T>,
    pub final_logits: ScoreMap<T>,
    /// Set when a step produced a non-finite value; records stop before it.
    pub divergence: Option<String>,
}

impl<T> TrainTrace<T> {
    pub fn ar_series(&self, phase: Phase) -> Vec<f64> {
        self.records.iter().filter(|r| r.phase == phase).map(|r| r.ar_loss).collect()
    }
}

/// Plain gradient descent on a free logit grid.
pub fn optimize_logits<T: Scalar>(labels: &LabelMap, cfg: &TrainConfig) -> Result<TrainTrace<T>> {
    cfg.validate()?;
    let (h, w) = (labels.height(), labels.width());
    let channels = labels.class_count();
    if channels < 2 {
        return Err(Error::Degenerate(format!("need at least 2 classes, found {channels}")));
    }
    if labels.valid_pixels() == 0 {
        return Err(Error::Degenerate("every pixel is ignored".into()));
    }
    cfg.scales.validate_for(h, w)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, cfg.init_std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let init: Vec<T> = (0..channels * h * w).map(|_| T::c(normal.sample(&mut rng))).collect();
    let mut logits = ScoreMap::new(channels, h, w, init)?;

    let lr = T::c(cfg.lr);
    let lambda = T::c(cfg.lambda);
    let warmup = cfg.warmup_ce_steps.min(cfg.steps);
    let ignore = labels.ignore_id();

    let mut records = Vec::with_capacity(cfg.steps);
    let mut warmup_logits = logits.clone();
    let mut divergence = None;
    let mut ce = ce_loss(&logits, labels)?;
    let mut ar = ar_loss(&logits, labels, &cfg.scales)?;

    for step in 1..=cfg.steps {
        let (phase, weight) = if step <= warmup { (Phase::Warmup, T::zero()) } else { (Phase::Main, lambda) };
        let update = combine(ce.clone(), &ar, weight).grad;
        let next: Vec<T> = logits.data().iter().zip(update.data()).map(|(&x, &g)| x - lr * g).collect();
        let next = match ScoreMap::new(channels, h, w, next) {
            Ok(next) => next,
            Err(e) => {
                divergence = Some(format!("step {step}: {e}"));
                break;
            }
        };
        let (next_ce, next_ar) = match (ce_loss(&next, labels), ar_loss(&next, labels, &cfg.scales)) {
            (Ok(a), Ok(b)) if a.loss.is_finite() && b.loss.is_finite() => (a, b),
            (Err(e), _) | (_, Err(e)) => {
                divergence = Some(format!("step {step}: {e}"));
                break;
            }
            _ => {
                divergence = Some(format!("step {step}: non-finite loss"));
                break;
            }
        };
        logits = next;
        ce = next_ce;
        ar = next_ar;

        let pred = logits.argmax();
        let (ce_f, ar_f) = (ce.loss.as_f64(), ar.loss.as_f64());
        records.push(TrainRecord {
            step,
            phase,
            ce_loss: ce_f,
            ar_loss: ar_f,
            total_loss: ce_f + weight.as_f64() * ar_f,
            pixel_accuracy: pixel_accuracy(&pred, labels, ignore)?,
            miou: miou(&pred, labels, channels, ignore)?,
        });
        if step == warmup {
            warmup_logits = logits.clone();
        }
    }
    Ok(TrainTrace { records, warmup_logits, final_logits: logits, divergence })
}

/// Mean predicted affinity over same-label and different-label pairs. Only
/// pairs valid in the target count, and the diagonal is skipped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grouping {
    pub same_mean: f64,
    pub same_pairs: usize,
    pub diff_mean: f64,
    pub diff_pairs: usize,
}

pub fn grouping<T: Scalar>(predicted: &AffinityMatrix<T>, target: &AffinityMatrix<T>) -> Result<Grouping> {
    if predicted.len() != target.len() {
        return Err(Error::ShapeMismatch(format!("affinity sizes {} vs {}", predicted.len(), target.len())));
    }
    let (mut same, mut same_n, mut diff, mut diff_n) = (0.0, 0, 0.0, 0);
    for i in 0..target.len() {
        for j in 0..target.len() {
            if i == j || !target.is_valid(i, j) {
                continue;
            }
            let v = predicted.get(i, j).as_f64();
            if target.get(i, j) == T::one() {
                same += v;
                same_n += 1;
            } else {
                diff += v;
                diff_n += 1;
            }
        }
    }
    let mean = |s: f64, n: usize| if n == 0 { f64::NAN } else { s / n as f64 };
    Ok(Grouping { same_mean: mean(same, same_n), same_pairs: same_n, diff_mean: mean(diff, diff_n), diff_pairs: diff_n })
}

/// Matrices behind the three heat maps of a run: the label affinity, then the
/// predicted affinity at the end of warm-up and at the last step. The
/// predicted ones carry the label mask so ignored pairs render alike.
pub fn affinity_snapshots<T: Scalar>(
    labels: &LabelMap,
    trace: &TrainTrace<T>,
    scales: &ScaleSet,
) -> Result<[AffinityMatrix<T>; 3]> {
    let warm = ar_forward(&trace.warmup_logits, labels, scales)?;
    let last = ar_forward(&trace.final_logits, labels, scales)?;
    Ok([
        warm.target.clone(),
        warm.predicted.with_mask_of(&warm.target)?,
        last.predicted.with_mask_of(&last.target)?,
    ])
}
