//! Dense label and score grids plus the softmax and square-root primitives.
//!
//! Channel grids are stored channel-major: value `(c, row, col)` lives at
//! `c * height * width + row * width + col`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Tolerance used when checking that a channel vector sums to one.
pub(crate) fn simplex_tol<T: Scalar>() -> T {
    T::c(1e-9).max(T::epsilon() * T::c(64.0))
}

/// Integer class-id grid, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u32>,
    ignore_id: Option<u32>,
    num_classes: Option<usize>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::LengthMismatch { expected: height * width, got: data.len() });
        }
        Ok(Self { height, width, data, ignore_id: None, num_classes: None })
    }

    /// Marks `id` as the ignore label. Pixels carrying it are excluded from
    /// every loss and metric.
    pub fn with_ignore(mut self, id: Option<u32>) -> Self {
        self.ignore_id = id;
        self
    }

    /// Declares the class count and checks every non-ignore id against it.
    pub fn with_num_classes(mut self, num_classes: usize) -> Result<Self> {
        for (pixel, &id) in self.data.iter().enumerate() {
            if Some(id) != self.ignore_id && id as usize >= num_classes {
                return Err(Error::ClassOutOfRange { id, pixel, num_classes });
            }
        }
        self.num_classes = Some(num_classes);
        Ok(self)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    pub fn ignore_id(&self) -> Option<u32> {
        self.ignore_id
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.num_classes
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn is_ignored(&self, id: u32) -> bool {
        self.ignore_id == Some(id)
    }

    /// Declared class count, or one past the largest non-ignore id.
    pub fn class_count(&self) -> usize {
        self.num_classes.unwrap_or_else(|| {
            self.data
                .iter()
                .filter(|&&id| !self.is_ignored(id))
                .map(|&id| id as usize + 1)
                .max()
                .unwrap_or(0)
        })
    }

    /// Number of pixels not carrying the ignore id.
    pub fn valid_pixels(&self) -> usize {
        self.data.iter().filter(|&&id| !self.is_ignored(id)).count()
    }
}

/// C×H×W grid of unbounded real logits. All values are finite.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap<T> {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<T>,
}

fn index_label(channels: usize, height: usize, width: usize, flat: usize) -> String {
    let plane = height * width;
    debug_assert!(flat < channels * plane);
    format!("(channel {}, row {}, col {})", flat / plane, (flat % plane) / width, flat % width)
}

fn check_finite<T: Scalar>(shape: (usize, usize, usize), data: &[T]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::NonFinite {
            index: index_label(shape.0, shape.1, shape.2, i),
            value: data[i].as_f64(),
        }),
        None => Ok(()),
    }
}

impl<T: Scalar> ScoreMap<T> {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        let expected = channels * height * width;
        if data.len() != expected {
            return Err(Error::LengthMismatch { expected, got: data.len() });
        }
        check_finite((channels, height, width), &data)?;
        Ok(Self { channels, height, width, data })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, data: vec![T::zero(); channels * height * width] }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn offset(&self, c: usize, row: usize, col: usize) -> usize {
        (c * self.height + row) * self.width + col
    }

    #[inline]
    pub fn get(&self, c: usize, row: usize, col: usize) -> T {
        self.data[self.offset(c, row, col)]
    }

    /// Channel vector at one spatial location.
    pub fn column(&self, row: usize, col: usize) -> Vec<T> {
        (0..self.channels).map(|c| self.get(c, row, col)).collect()
    }

    /// Human-readable name of a flat index, used in diagnostics.
    pub fn describe_index(&self, flat: usize) -> String {
        index_label(self.channels, self.height, self.width, flat)
    }

    /// Per-pixel argmax over channels; ties resolve to the lowest channel.
    pub fn argmax(&self) -> LabelMap {
        let plane = self.height * self.width;
        let ids = (0..plane)
            .map(|p| {
                let mut best = 0;
                for c in 1..self.channels {
                    if self.data[c * plane + p] > self.data[best * plane + p] {
                        best = c;
                    }
                }
                best as u32
            })
            .collect();
        LabelMap::new(self.height, self.width, ids).expect("argmax shape")
    }

    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
}

/// Channel-wise softmax output: every location holds a probability vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap<T>(ScoreMap<T>);

impl<T: Scalar> ProbMap<T> {
    /// Wraps precomputed probabilities after checking they are non-negative
    /// and sum to one at every location.
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        let grid = ScoreMap::new(channels, height, width, data)?;
        if let Some(i) = grid.data.iter().position(|v| *v < T::zero()) {
            return Err(Error::Negative { index: grid.describe_index(i), value: grid.data[i].as_f64() });
        }
        let plane = height * width;
        let tol = simplex_tol::<T>();
        for p in 0..plane {
            let sum = (0..channels).fold(T::zero(), |acc, c| acc + grid.data[c * plane + p]);
            if (sum - T::one()).abs() > tol {
                return Err(Error::InvalidArgument(format!(
                    "probabilities at (row {}, col {}) sum to {sum}",
                    p / width,
                    p % width
                )));
            }
        }
        Ok(Self(grid))
    }

    pub fn grid(&self) -> &ScoreMap<T> {
        &self.0
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.0.shape()
    }

    pub fn data(&self) -> &[T] {
        &self.0.data
    }
}

/// Element-wise square root of a [`ProbMap`]; every value lies in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbRootMap<T>(ScoreMap<T>);

impl<T: Scalar> ProbRootMap<T> {
    pub fn grid(&self) -> &ScoreMap<T> {
        &self.0
    }

    pub fn data(&self) -> &[T] {
        &self.0.data
    }

    /// Squares every entry, recovering the probabilities.
    pub fn square(&self) -> Vec<T> {
        self.0.data.iter().map(|&v| v * v).collect()
    }
}

/// Softmax over a contiguous slice with max subtraction.
pub(crate) fn softmax_in_place<T: Scalar>(v: &mut [T]) {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Per-location softmax over the channel axis.
pub fn softmax_channels<T: Scalar>(s: &ScoreMap<T>) -> Result<ProbMap<T>> {
    check_finite(s.shape(), &s.data)?;
    let (channels, height, width) = s.shape();
    let plane = height * width;
    let mut out = vec![T::zero(); s.data.len()];
    let mut column = vec![T::zero(); channels];
    for p in 0..plane {
        for (c, slot) in column.iter_mut().enumerate() {
            *slot = s.data[c * plane + p];
        }
        softmax_in_place(&mut column);
        for (c, &v) in column.iter().enumerate() {
            out[c * plane + p] = v;
        }
    }
    Ok(ProbMap(ScoreMap { channels, height, width, data: out }))
}

pub fn sqrt_elementwise<T: Scalar>(p: &ProbMap<T>) -> Result<ProbRootMap<T>> {
    let grid = &p.0;
    if let Some(i) = grid.data.iter().position(|v| *v < T::zero()) {
        return Err(Error::Negative { index: grid.describe_index(i), value: grid.data[i].as_f64() });
    }
    let data = grid.data.iter().map(|v| v.sqrt()).collect();
    Ok(ProbRootMap(ScoreMap { channels: grid.channels, height: grid.height, width: grid.width, data }))
}
