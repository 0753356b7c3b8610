//! Nearest-neighbour multi-scale sampling.
//!
//! Labels and score grids are sampled through the same [`SamplingPlan`], so
//! position `j` of a pooled label vector and column `j` of a pooled embedding
//! always come from the same source pixel. Values are copied, never averaged.

use crate::error::{Error, Result};
use crate::grid::{softmax_in_place, LabelMap, ProbMap, ScoreMap};
use crate::scalar::Scalar;

/// Ordered list of square target sizes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScaleSet {
    scales: Vec<usize>,
}

impl Default for ScaleSet {
    fn default() -> Self {
        Self { scales: vec![12, 6] }
    }
}

impl ScaleSet {
    pub fn new(scales: Vec<usize>) -> Result<Self> {
        if scales.is_empty() {
            return Err(Error::InvalidArgument("scale set is empty".into()));
        }
        if scales.contains(&0) {
            return Err(Error::InvalidArgument("scales must be at least 1".into()));
        }
        Ok(Self { scales })
    }

    pub fn scales(&self) -> &[usize] {
        &self.scales
    }

    /// Embedded length: sum of squared scales.
    pub fn total_len(&self) -> usize {
        self.scales.iter().map(|s| s * s).sum()
    }

    pub fn validate_for(&self, height: usize, width: usize) -> Result<()> {
        match self.scales.iter().find(|&&s| s == 0 || s > height.min(width)) {
            Some(&scale) => Err(Error::InvalidScale { scale, height, width }),
            None => Ok(()),
        }
    }
}

impl std::str::FromStr for ScaleSet {
    type Err = Error;

    /// Parses a comma-separated list such as `12,6`.
    fn from_str(s: &str) -> Result<Self> {
        let scales = s
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<usize>()
                    .map_err(|e| Error::InvalidArgument(format!("bad scale {t:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(scales)
    }
}

impl std::fmt::Display for ScaleSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.scales.iter().map(|s| s.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

/// Source coordinates for a `target`×`target` nearest-neighbour resample,
/// row-major over the target. Cell `(i, j)` reads pixel
/// `(floor((i + 0.5)·h / target), floor((j + 0.5)·w / target))`.
pub fn nn_sample_grid(source_h: usize, source_w: usize, target: usize) -> Result<Vec<(usize, usize)>> {
    if target == 0 || target > source_h.min(source_w) {
        return Err(Error::InvalidScale { scale: target, height: source_h, width: source_w });
    }
    // (2i + 1)·h / (2·target) in integers is the exact floor of the centre.
    let centre = |i: usize, src: usize| ((2 * i + 1) * src) / (2 * target);
    let mut coords = Vec::with_capacity(target * target);
    for i in 0..target {
        let row = centre(i, source_h);
        for j in 0..target {
            coords.push((row, centre(j, source_w)));
        }
    }
    Ok(coords)
}

/// Concatenated sampling coordinates for every scale of a [`ScaleSet`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplingPlan {
    height: usize,
    width: usize,
    coords: Vec<(usize, usize)>,
}

impl SamplingPlan {
    pub fn new(height: usize, width: usize, scales: &ScaleSet) -> Result<Self> {
        let mut coords = Vec::with_capacity(scales.total_len());
        for &s in scales.scales() {
            coords.extend(nn_sample_grid(height, width, s)?);
        }
        Ok(Self { height, width, coords })
    }

    pub fn coords(&self) -> &[(usize, usize)] {
        &self.coords
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn source_shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultiScaleLabelVector {
    pub ids: Vec<u32>,
    pub coords: Vec<(usize, usize)>,
    pub ignore_id: Option<u32>,
}

impl MultiScaleLabelVector {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// C×L matrix of sampled channel vectors, stored channel-major
/// (`data[k * len + j]`), with the source pixel of every column.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiScaleEmbedding<T> {
    channels: usize,
    len: usize,
    data: Vec<T>,
    coords: Vec<(usize, usize)>,
}

impl<T: Scalar> MultiScaleEmbedding<T> {
    /// Builds an embedding from raw channel-major values. Coordinates are
    /// left empty; use this for embeddings that do not come from a grid.
    pub fn from_raw(channels: usize, len: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != channels * len {
            return Err(Error::LengthMismatch { expected: channels * len, got: data.len() });
        }
        Ok(Self { channels, len, data, coords: Vec::new() })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn coords(&self) -> &[(usize, usize)] {
        &self.coords
    }

    #[inline]
    pub fn get(&self, k: usize, j: usize) -> T {
        self.data[k * self.len + j]
    }

    pub fn column(&self, j: usize) -> Vec<T> {
        (0..self.channels).map(|k| self.get(k, j)).collect()
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            channels: self.channels,
            len: self.len,
            data: self.data.iter().map(|&v| f(v)).collect(),
            coords: self.coords.clone(),
        }
    }

    /// Softmax applied independently to every column.
    pub fn softmax_columns(&self) -> Self {
        let mut out = self.clone();
        let mut column = vec![T::zero(); self.channels];
        for j in 0..self.len {
            for (k, slot) in column.iter_mut().enumerate() {
                *slot = self.get(k, j);
            }
            softmax_in_place(&mut column);
            for (k, &v) in column.iter().enumerate() {
                out.data[k * self.len + j] = v;
            }
        }
        out
    }
}

pub fn pool_label(l: &LabelMap, s: &ScaleSet) -> Result<MultiScaleLabelVector> {
    let plan = SamplingPlan::new(l.height(), l.width(), s)?;
    Ok(pool_label_with(l, &plan))
}

pub(crate) fn pool_label_with(l: &LabelMap, plan: &SamplingPlan) -> MultiScaleLabelVector {
    MultiScaleLabelVector {
        ids: plan.coords.iter().map(|&(r, c)| l.get(r, c)).collect(),
        coords: plan.coords.clone(),
        ignore_id: l.ignore_id(),
    }
}

fn pool_grid<T: Scalar>(g: &ScoreMap<T>, s: &ScaleSet) -> Result<MultiScaleEmbedding<T>> {
    let (_, h, w) = g.shape();
    let plan = SamplingPlan::new(h, w, s)?;
    Ok(pool_grid_with(g, &plan))
}

pub(crate) fn pool_grid_with<T: Scalar>(g: &ScoreMap<T>, plan: &SamplingPlan) -> MultiScaleEmbedding<T> {
    let channels = g.channels();
    let len = plan.len();
    let mut data = Vec::with_capacity(channels * len);
    for k in 0..channels {
        data.extend(plan.coords.iter().map(|&(r, c)| g.get(k, r, c)));
    }
    MultiScaleEmbedding { channels, len, data, coords: plan.coords.clone() }
}

/// Samples a probability map; every column is a probability vector.
pub fn pool_prob<T: Scalar>(p: &ProbMap<T>, s: &ScaleSet) -> Result<MultiScaleEmbedding<T>> {
    pool_grid(p.grid(), s)
}

/// Samples raw logits with the same coordinates [`pool_prob`] would use.
pub fn pool_scores<T: Scalar>(x: &ScoreMap<T>, s: &ScaleSet) -> Result<MultiScaleEmbedding<T>> {
    pool_grid(x, s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::softmax_channels;
    use proptest::prelude::*;

    #[test]
    fn identity_grid() {
        let coords = nn_sample_grid(4, 4, 4).unwrap();
        let expected: Vec<_> = (0..4).flat_map(|i| (0..4).map(move |j| (i, j))).collect();
        assert_eq!(coords, expected);
    }

    #[test]
    fn halving_grid_hits_cell_centres() {
        assert_eq!(nn_sample_grid(4, 4, 2).unwrap(), vec![(1, 1), (1, 3), (3, 1), (3, 3)]);
    }

    #[test]
    fn large_source_stays_in_bounds() {
        let coords = nn_sample_grid(100, 100, 12).unwrap();
        assert_eq!(coords.len(), 144);
        assert!(coords.iter().all(|&(r, c)| r <= 99 && c <= 99));
    }

    #[test]
    fn grid_rejects_bad_targets() {
        assert!(nn_sample_grid(4, 4, 0).is_err());
        assert!(nn_sample_grid(4, 8, 5).is_err());
    }

    #[test]
    fn rectangular_source() {
        assert_eq!(nn_sample_grid(2, 6, 2).unwrap(), vec![(0, 1), (0, 4), (1, 1), (1, 4)]);
    }

    #[test]
    fn constant_label_pools_to_constant_vector() {
        let l = LabelMap::new(16, 16, vec![3; 256]).unwrap();
        let v = pool_label(&l, &ScaleSet::new(vec![4, 2]).unwrap()).unwrap();
        assert_eq!(v.ids, vec![3; 20]);
    }

    #[test]
    fn distinct_ids_pool_at_centres() {
        let l = LabelMap::new(4, 4, (0..16).collect()).unwrap();
        let v = pool_label(&l, &ScaleSet::new(vec![2]).unwrap()).unwrap();
        assert_eq!(v.ids, vec![5, 7, 13, 15]);
    }

    #[test]
    fn default_scales_give_180() {
        let s = ScaleSet::default();
        assert_eq!(s.total_len(), 180);
        let l = LabelMap::new(12, 12, vec![0; 144]).unwrap();
        assert_eq!(pool_label(&l, &s).unwrap().len(), 180);
        let x = ScoreMap::<f64>::zeros(5, 30, 40);
        let e = pool_prob(&softmax_channels(&x).unwrap(), &s).unwrap();
        assert_eq!((e.channels(), e.len()), (5, 180));
    }

    #[test]
    fn scale_order_is_preserved() {
        let l = LabelMap::new(4, 4, (0..16).collect()).unwrap();
        let v = pool_label(&l, &ScaleSet::new(vec![2, 1]).unwrap()).unwrap();
        // 1x1 centre of a 4x4 grid is (2, 2).
        assert_eq!(v.ids, vec![5, 7, 13, 15, 10]);
    }

    #[test]
    fn scale_exceeding_source_is_rejected() {
        let l = LabelMap::new(8, 8, vec![0; 64]).unwrap();
        assert!(matches!(pool_label(&l, &ScaleSet::default()), Err(Error::InvalidScale { scale: 12, .. })));
    }

    #[test]
    fn identity_scale_copies_columns() {
        let data: Vec<f64> = (0..18).map(|v| v as f64 * 0.37 - 2.0).collect();
        let p = softmax_channels(&ScoreMap::new(2, 3, 3, data).unwrap()).unwrap();
        let e = pool_prob(&p, &ScaleSet::new(vec![3]).unwrap()).unwrap();
        for j in 0..9 {
            assert_eq!(e.column(j), p.grid().column(j / 3, j % 3));
        }
    }

    #[test]
    fn parse_scales() {
        assert_eq!("12,6".parse::<ScaleSet>().unwrap(), ScaleSet::default());
        assert!("4,,2".parse::<ScaleSet>().is_err());
        assert!("0".parse::<ScaleSet>().is_err());
        assert_eq!(ScaleSet::new(vec![4, 2]).unwrap().to_string(), "4,2");
    }

    proptest! {
        #[test]
        fn softmax_commutes_with_sampling(
            c in 1usize..6, h in 4usize..14, w in 4usize..14, seed in any::<u64>()
        ) {
            let data: Vec<f64> = (0..c * h * w)
                .map(|i| ((i as u64).wrapping_mul(6364136223846793005).wrapping_add(seed) >> 11) as f64 / (1u64 << 53) as f64 * 20.0 - 10.0)
                .collect();
            let x = ScoreMap::new(c, h, w, data).unwrap();
            let s = ScaleSet::new(vec![4, 2]).unwrap();
            let a = pool_prob(&softmax_channels(&x).unwrap(), &s).unwrap();
            let b = pool_scores(&x, &s).unwrap().softmax_columns();
            prop_assert_eq!(a.data(), b.data());
            prop_assert_eq!(a.coords(), b.coords());
        }

        #[test]
        fn labels_and_embeddings_share_coordinates(h in 4usize..20, w in 4usize..20) {
            let l = LabelMap::new(h, w, (0..(h * w) as u32).collect()).unwrap();
            let s = ScaleSet::new(vec![4, 3, 1]).unwrap();
            let v = pool_label(&l, &s).unwrap();
            let e = pool_scores(&ScoreMap::<f64>::zeros(2, h, w), &s).unwrap();
            prop_assert_eq!(&v.coords, &e.coords().to_vec());
            for (j, &(r, c)) in e.coords().iter().enumerate() {
                prop_assert_eq!(v.ids[j], l.get(r, c));
            }
        }
    }
}
