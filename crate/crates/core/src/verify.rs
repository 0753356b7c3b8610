//! Independent oracles: finite-difference gradients, a brute-force label
//! affinity, an exhaustive rearrangement check, and an OLS trend test.
//!
//! The gradient oracle only ever calls forward passes; the other oracles are
//! written independently of the code they check.

use crate::affinity::AffinityMatrix;
use crate::error::{Error, Result};
use crate::grid::{LabelMap, ScoreMap};
use crate::losses::{ar_loss, ar_value, ce_loss, ce_value, total_loss, LossWeights};
use crate::pool::{MultiScaleLabelVector, ScaleSet};
use crate::scalar::Scalar;
use itertools::Itertools;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::function::erf::erfc;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Default relative tolerance for gradient checks.
pub const GRAD_REL_TOL: f64 = 1e-5;

/// Floor of the relative-error denominator.
pub const REL_ERR_FLOOR: f64 = 1e-8;

/// Central-difference gradient of `f` at `x`, one coordinate at a time.
///
/// The divisor is the representable step `(x + h) − (x − h)` rather than
/// `2h`, which removes the rounding of the perturbed coordinate itself.
pub fn finite_diff_grad<T, F>(mut f: F, x: &ScoreMap<T>, h: T) -> Result<ScoreMap<T>>
where
    T: Scalar,
    F: FnMut(&ScoreMap<T>) -> Result<T>,
{
    if !(h > T::zero()) {
        return Err(Error::InvalidArgument(format!("finite-difference step must be positive, got {h}")));
    }
    let (channels, height, width) = x.shape();
    let base = x.data().to_vec();
    let mut out = Vec::with_capacity(base.len());
    let mut probe = base.clone();
    for i in 0..base.len() {
        let plus = base[i] + h;
        let minus = base[i] - h;
        probe[i] = plus;
        let fp = f(&ScoreMap::new(channels, height, width, probe.clone())?)?;
        probe[i] = minus;
        let fm = f(&ScoreMap::new(channels, height, width, probe.clone())?)?;
        probe[i] = base[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite {
                index: x.describe_index(i),
                value: if fp.is_finite() { fm.as_f64() } else { fp.as_f64() },
            });
        }
        out.push((fp - fm) / (plus - minus));
    }
    ScoreMap::new(channels, height, width, out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    /// `(channel, row, col)` of the largest relative error.
    pub worst_coordinate: (usize, usize, usize),
    pub tolerance: f64,
    pub passed: bool,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let (c, r, col) = self.worst_coordinate;
        write!(
            f,
            "max_abs_err={:.3e} max_rel_err={:.3e} worst=({c},{r},{col}) tolerance={:.1e} passed={}",
            self.max_abs_err, self.max_rel_err, self.tolerance, self.passed
        )
    }
}

/// Compares two gradients with relative error
/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn compare_gradients<T: Scalar>(analytic: &ScoreMap<T>, numeric: &ScoreMap<T>, tolerance: f64) -> Result<GradCheckReport> {
    if analytic.shape() != numeric.shape() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", analytic.shape(), numeric.shape())));
    }
    let (_, h, w) = analytic.shape();
    let mut max_abs: f64 = 0.0;
    let mut max_rel: f64 = 0.0;
    let mut worst = 0;
    for (i, (a, n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
        let (a, n) = (a.as_f64(), n.as_f64());
        let abs = (a - n).abs();
        let rel = abs / a.abs().max(n.abs()).max(REL_ERR_FLOOR);
        max_abs = max_abs.max(abs);
        if rel > max_rel {
            max_rel = rel;
            worst = i;
        }
    }
    let plane = h * w;
    Ok(GradCheckReport {
        max_abs_err: max_abs,
        max_rel_err: max_rel,
        worst_coordinate: (worst / plane, (worst % plane) / w, worst % w),
        tolerance,
        passed: max_rel < tolerance,
    })
}

/// Finite-difference check of an analytic gradient against `f`.
pub fn check_gradient<T, F>(f: F, x: &ScoreMap<T>, analytic: &ScoreMap<T>, h: T, tolerance: f64) -> Result<GradCheckReport>
where
    T: Scalar,
    F: FnMut(&ScoreMap<T>) -> Result<T>,
{
    let numeric = finite_diff_grad(f, x, h)?;
    compare_gradients(analytic, &numeric, tolerance)
}

/// A random logit grid with a matching random label map.
#[derive(Debug, Clone)]
pub struct GradCheckInstance {
    pub logits: ScoreMap<f64>,
    pub labels: LabelMap,
    pub scales: ScaleSet,
}

/// Builds a seeded instance: logits uniform in `[-2, 2)`, labels uniform over
/// the classes, and every tenth pixel ignored when `with_ignore` is set.
pub fn random_instance(
    seed: u64,
    channels: usize,
    height: usize,
    width: usize,
    scales: &ScaleSet,
    with_ignore: bool,
) -> Result<GradCheckInstance> {
    const IGNORE: u32 = 255;
    if channels == 0 || channels >= IGNORE as usize {
        return Err(Error::InvalidArgument(format!("channel count {channels} outside 1..255")));
    }
    scales.validate_for(height, width)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits: Vec<f64> = (0..channels * height * width).map(|_| rng.random_range(-2.0..2.0)).collect();
    let ids: Vec<u32> = (0..height * width)
        .map(|i| {
            let id = rng.random_range(0..channels as u32);
            if with_ignore && i % 10 == 3 {
                IGNORE
            } else {
                id
            }
        })
        .collect();
    Ok(GradCheckInstance {
        logits: ScoreMap::new(channels, height, width, logits)?,
        labels: LabelMap::new(height, width, ids)?.with_ignore(with_ignore.then_some(IGNORE)),
        scales: scales.clone(),
    })
}

/// Checks the cross-entropy, AR, and total gradients of one instance against
/// central differences.
pub fn gradcheck_losses(
    inst: &GradCheckInstance,
    weights: LossWeights<f64>,
    h: f64,
    tolerance: f64,
) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let GradCheckInstance { logits, labels, scales } = inst;
    let lambda = weights.lambda();

    let ce = ce_loss(logits, labels)?;
    let ar = ar_loss(logits, labels, scales)?;
    let total = total_loss(logits, labels, scales, weights)?;
    Ok(vec![
        ("ce", check_gradient(|x| Ok(ce_value(x, labels)?.0), logits, &ce.grad, h, tolerance)?),
        ("ar", check_gradient(|x| ar_value(x, labels, scales), logits, &ar.grad, h, tolerance)?),
        (
            "total",
            check_gradient(
                |x| Ok(ce_value(x, labels)?.0 + lambda * ar_value(x, labels, scales)?),
                logits,
                &total.grad,
                h,
                tolerance,
            )?,
        ),
    ])
}

/// Label affinity by explicit pairwise comparison.
pub fn brute_force_label_affinity<T: Scalar>(v: &MultiScaleLabelVector) -> AffinityMatrix<T> {
    let n = v.ids.len();
    let mut data = vec![T::zero(); n * n];
    let mut valid = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            if v.ids[i] == v.ids[j] {
                data[i * n + j] = T::one();
            }
            let ignored = |id: u32| v.ignore_id == Some(id);
            valid[i * n + j] = !ignored(v.ids[i]) && !ignored(v.ids[j]);
        }
    }
    AffinityMatrix::new(n, data, valid).expect("square by construction")
}

/// Largest vector length accepted by [`rearrangement_enumerate`].
pub const MAX_ENUM_CLASSES: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct RearrangementReport {
    /// Every permutation `π` of `q` with `Σ_k √(p_k · q_π(k))`.
    pub values: Vec<(Vec<usize>, f64)>,
    pub max_perm: Vec<usize>,
    pub max_value: f64,
    pub min_perm: Vec<usize>,
    pub min_value: f64,
    /// Value of the pairing that matches ranks of `p` and `q`.
    pub same_order_value: f64,
    /// Value of the pairing that matches ranks in opposite order.
    pub reverse_order_value: f64,
    pub same_order_is_max: bool,
    pub reverse_order_is_min: bool,
}

/// Exhaustively pairs `p` with every permutation of `q`.
pub fn rearrangement_enumerate(p: &[f64], q: &[f64]) -> Result<RearrangementReport> {
    let c = p.len();
    if q.len() != c {
        return Err(Error::ShapeMismatch(format!("vectors of length {c} and {}", q.len())));
    }
    if c == 0 || c > MAX_ENUM_CLASSES {
        return Err(Error::InvalidArgument(format!("length must be in 1..={MAX_ENUM_CLASSES}, got {c}")));
    }
    if p.iter().chain(q).any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::InvalidArgument("entries must be positive and finite".into()));
    }
    let score = |perm: &[usize]| -> f64 { (0..c).map(|k| (p[k] * q[perm[k]]).sqrt()).sum() };

    let values: Vec<(Vec<usize>, f64)> = (0..c)
        .permutations(c)
        .map(|perm| {
            let v = score(&perm);
            (perm, v)
        })
        .collect();
    let (max_perm, max_value) = values.iter().max_by(|a, b| a.1.total_cmp(&b.1)).cloned().expect("non-empty");
    let (min_perm, min_value) = values.iter().min_by(|a, b| a.1.total_cmp(&b.1)).cloned().expect("non-empty");

    let rank = |v: &[f64]| -> Vec<usize> {
        let mut idx: Vec<usize> = (0..c).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        idx
    };
    let (rp, rq) = (rank(p), rank(q));
    let mut same = vec![0; c];
    let mut reverse = vec![0; c];
    for (r, &k) in rp.iter().enumerate() {
        same[k] = rq[r];
        reverse[k] = rq[c - 1 - r];
    }
    let same_order_value = score(&same);
    let reverse_order_value = score(&reverse);
    let tol = 1e-12;
    Ok(RearrangementReport {
        same_order_is_max: same_order_value >= max_value - tol,
        reverse_order_is_min: reverse_order_value <= min_value + tol,
        values,
        max_perm,
        max_value,
        min_perm,
        min_value,
        same_order_value,
        reverse_order_value,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrendDegeneracy {
    /// Every value is identical; slope 0 and p-value 1.
    ConstantSeries,
    /// Residuals vanish with a nonzero slope; the p-value is reported as 0.
    ExactFit,
}

/// Ordinary least squares fit `y = a + b·x` on `x = 0..n`, with a
/// two-sided significance test of the slope.
#[derive(Debug, Clone, PartialEq)]
pub struct TrendTestReport {
    pub n: usize,
    pub intercept: f64,
    pub slope: f64,
    pub slope_stderr: f64,
    pub t_value: f64,
    pub p_value: f64,
    pub degenerate: Option<TrendDegeneracy>,
}

/// Series length from which the normal approximation replaces Student's t.
pub const NORMAL_APPROX_MIN_N: usize = 30;

pub fn ols_trend_test(series: &[f64]) -> Result<TrendTestReport> {
    let n = series.len();
    if n < 3 {
        return Err(Error::InvalidArgument(format!("trend test needs at least 3 points, got {n}")));
    }
    if let Some(i) = series.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index: format!("series[{i}]"), value: series[i] });
    }
    let nf = n as f64;
    let x_mean = (nf - 1.0) / 2.0;
    let y_mean = series.iter().sum::<f64>() / nf;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for (i, &y) in series.iter().enumerate() {
        let dx = i as f64 - x_mean;
        let dy = y - y_mean;
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    let slope = sxy / sxx;
    let intercept = y_mean - slope * x_mean;

    if syy == 0.0 {
        return Ok(TrendTestReport {
            n,
            intercept,
            slope: 0.0,
            slope_stderr: 0.0,
            t_value: 0.0,
            p_value: 1.0,
            degenerate: Some(TrendDegeneracy::ConstantSeries),
        });
    }

    let ssr: f64 = series
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let r = y - (intercept + slope * i as f64);
            r * r
        })
        .sum();
    let dof = nf - 2.0;
    if ssr <= f64::EPSILON * f64::EPSILON * syy * nf {
        return Ok(TrendTestReport {
            n,
            intercept,
            slope,
            slope_stderr: 0.0,
            t_value: slope.signum() * f64::INFINITY,
            p_value: 0.0,
            degenerate: Some(TrendDegeneracy::ExactFit),
        });
    }
    let slope_stderr = (ssr / dof / sxx).sqrt();
    let t_value = slope / slope_stderr;
    let p_value = if n >= NORMAL_APPROX_MIN_N {
        erfc(t_value.abs() / std::f64::consts::SQRT_2)
    } else {
        let dist = StudentsT::new(0.0, 1.0, dof).expect("positive degrees of freedom");
        2.0 * dist.sf(t_value.abs())
    };
    Ok(TrendTestReport {
        n,
        intercept,
        slope,
        slope_stderr,
        t_value,
        p_value: p_value.clamp(0.0, 1.0),
        degenerate: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(data: Vec<f64>) -> ScoreMap<f64> {
        ScoreMap::new(2, 2, 3, data).unwrap()
    }

    #[test]
    fn fd_of_sum_is_ones() {
        let x = grid((0..12).map(|i| i as f64 * 0.3 - 1.0).collect());
        let g = finite_diff_grad(|s| Ok(s.data().iter().sum()), &x, FD_STEP).unwrap();
        assert!(g.data().iter().all(|v| (v - 1.0).abs() < 1e-10));
    }

    #[test]
    fn fd_of_half_square_norm_is_identity() {
        let x = grid((0..12).map(|i| (i as f64).sin() * 3.0).collect());
        let g = finite_diff_grad(|s| Ok(0.5 * s.data().iter().map(|v| v * v).sum::<f64>()), &x, FD_STEP).unwrap();
        for (a, b) in g.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn fd_reports_non_finite_coordinate() {
        let x = grid(vec![0.0; 12]);
        let err = finite_diff_grad(|s| Ok(if s.get(1, 0, 2) != 0.0 { f64::NAN } else { 0.0 }), &x, 1e-3).unwrap_err();
        assert!(err.to_string().contains("channel 1, row 0, col 2"), "{err}");
        assert!(finite_diff_grad(|_| Ok(0.0), &x, 0.0).is_err());
    }

    #[test]
    fn compare_flags_worst_coordinate() {
        let a = grid(vec![1.0; 12]);
        let mut d = vec![1.0; 12];
        d[8] = 1.1;
        let r = compare_gradients(&a, &grid(d), 1e-5).unwrap();
        assert!(!r.passed);
        assert_eq!(r.worst_coordinate, (1, 0, 2));
        assert_abs_diff_eq!(r.max_rel_err, 0.1 / 1.1, epsilon = 1e-12);
    }

    #[test]
    fn brute_force_patterns() {
        let same = MultiScaleLabelVector { ids: vec![3; 4], coords: vec![], ignore_id: None };
        assert!(brute_force_label_affinity::<f64>(&same).data().iter().all(|&v| v == 1.0));

        let alt = MultiScaleLabelVector { ids: (0..6).map(|i| i % 2).collect(), coords: vec![], ignore_id: None };
        let m = brute_force_label_affinity::<f64>(&alt);
        for i in 0..6 {
            for j in 0..6 {
                assert_eq!(m.get(i, j), if i % 2 == j % 2 { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn rearrangement_sorted_pair() {
        let p = [0.1, 0.2, 0.3, 0.4];
        let r = rearrangement_enumerate(&p, &p).unwrap();
        assert_eq!(r.values.len(), 24);
        assert_eq!(r.max_perm, vec![0, 1, 2, 3]);
        assert!(r.same_order_is_max && r.reverse_order_is_min);
        assert_abs_diff_eq!(r.max_value, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn rearrangement_three_classes() {
        let r = rearrangement_enumerate(&[0.7, 0.2, 0.1], &[0.6, 0.3, 0.1]).unwrap();
        assert_eq!(r.values.len(), 6);
        assert_eq!(r.max_perm, vec![0, 1, 2]);
        assert_eq!(r.min_perm, vec![2, 1, 0]);
        // Hand-enumerated extremes.
        let best = (0.7f64 * 0.6).sqrt() + (0.2f64 * 0.3).sqrt() + (0.1f64 * 0.1).sqrt();
        let worst = (0.7f64 * 0.1).sqrt() + (0.2f64 * 0.3).sqrt() + (0.1f64 * 0.6).sqrt();
        assert_abs_diff_eq!(r.max_value, best, epsilon = 1e-15);
        assert_abs_diff_eq!(r.min_value, worst, epsilon = 1e-15);
    }

    #[test]
    fn rearrangement_single_class() {
        let r = rearrangement_enumerate(&[1.0], &[1.0]).unwrap();
        assert_eq!(r.values.len(), 1);
        assert_eq!(r.max_value, r.min_value);
    }

    #[test]
    fn rearrangement_guards() {
        assert!(rearrangement_enumerate(&[0.2; 6], &[0.2; 6]).is_err());
        assert!(rearrangement_enumerate(&[0.5, 0.5], &[1.0]).is_err());
        assert!(rearrangement_enumerate(&[1.0, 0.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn ols_exact_line() {
        let r = ols_trend_test(&[3.0, 2.0, 1.0]).unwrap();
        assert_eq!(r.slope, -1.0);
        assert_eq!(r.intercept, 3.0);
        assert_eq!(r.degenerate, Some(TrendDegeneracy::ExactFit));
        assert_eq!(r.p_value, 0.0);
    }

    #[test]
    fn ols_constant_series() {
        let r = ols_trend_test(&[1.0; 4]).unwrap();
        assert_eq!(r.slope, 0.0);
        assert_eq!(r.p_value, 1.0);
        assert_eq!(r.degenerate, Some(TrendDegeneracy::ConstantSeries));
    }

    #[test]
    fn ols_rejects_short_or_non_finite() {
        assert!(ols_trend_test(&[1.0, 2.0]).is_err());
        assert!(ols_trend_test(&[1.0, f64::NAN, 2.0]).is_err());
    }

    #[test]
    fn ols_recovers_line_coefficients() {
        for (a, b) in [(0.3, -0.02), (-5.0, 1.5), (1e3, 7e-4)] {
            let ys: Vec<f64> = (0..50).map(|x| a + b * x as f64).collect();
            let r = ols_trend_test(&ys).unwrap();
            assert_abs_diff_eq!(r.intercept, a, epsilon = 1e-10);
            assert_abs_diff_eq!(r.slope, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn ols_detects_slow_noisy_decline() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let ys: Vec<f64> = (0..500).map(|x| 0.16 - 8e-7 * x as f64 + rng.random_range(-1e-5..1e-5)).collect();
        let r = ols_trend_test(&ys).unwrap();
        assert!(r.slope < 0.0);
        assert!(r.p_value < 0.001, "{r:?}");
        assert_abs_diff_eq!(r.t_value, r.slope / r.slope_stderr, epsilon = 1e-12);
    }

    #[test]
    fn ols_small_sample_uses_student_t() {
        let ys = [1.0, 0.8, 1.1, 0.7, 0.75, 0.6];
        let r = ols_trend_test(&ys).unwrap();
        let dist = StudentsT::new(0.0, 1.0, 4.0).unwrap();
        assert_abs_diff_eq!(r.p_value, 2.0 * dist.sf(r.t_value.abs()), epsilon = 1e-15);
        assert!(r.p_value > 0.0 && r.p_value < 1.0);
    }

    #[test]
    fn ols_pure_noise_is_not_significant() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let ys: Vec<f64> = (0..400).map(|_| rng.random_range(-1.0..1.0)).collect();
        assert!(ols_trend_test(&ys).unwrap().p_value > 0.001);
    }
}
