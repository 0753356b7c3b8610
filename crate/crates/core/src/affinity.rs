//! Pairwise affinity matrices over a pooled position set.
//!
//! Two matrices are compared by the loss: the binary label affinity, which is
//! one wherever two sampled positions share a class, and the square-root
//! affinity `Σ_k √(p_ik · p_jk)` between the predicted class distributions at
//! those positions (the Bhattacharyya coefficient). For probability columns
//! the square-root affinity is bounded by one, with equality exactly when the
//! two distributions coincide, so regressing it onto the label affinity pulls
//! same-class positions together and pushes different-class positions apart.

use crate::error::{Error, Result};
use crate::pool::{MultiScaleEmbedding, MultiScaleLabelVector};
use crate::scalar::Scalar;

/// Square L×L matrix with a validity mask. Masked entries keep their value
/// but are excluded from losses and rendered as "no data".
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix<T> {
    len: usize,
    data: Vec<T>,
    valid: Vec<bool>,
}

impl<T: Scalar> AffinityMatrix<T> {
    pub fn new(len: usize, data: Vec<T>, valid: Vec<bool>) -> Result<Self> {
        if data.len() != len * len {
            return Err(Error::LengthMismatch { expected: len * len, got: data.len() });
        }
        if valid.len() != len * len {
            return Err(Error::LengthMismatch { expected: len * len, got: valid.len() });
        }
        Ok(Self { len, data, valid })
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

    pub fn valid_mask(&self) -> &[bool] {
        &self.valid
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.len + j]
    }

    #[inline]
    pub fn is_valid(&self, i: usize, j: usize) -> bool {
        self.valid[i * self.len + j]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Largest `|a_ij - a_ji|` over all entries.
    pub fn max_asymmetry(&self) -> T {
        let mut worst = T::zero();
        for i in 0..self.len {
            for j in (i + 1)..self.len {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }

    /// Copy of this matrix carrying another matrix's mask.
    pub fn with_mask_of<U: Scalar>(&self, other: &AffinityMatrix<U>) -> Result<Self> {
        if other.len != self.len {
            return Err(Error::ShapeMismatch(format!("mask length {} vs matrix {}", other.len, self.len)));
        }
        Ok(Self { len: self.len, data: self.data.clone(), valid: other.valid.clone() })
    }
}

/// Binary label affinity: 1 where the ids agree, 0 elsewhere. A pair is
/// masked when either endpoint carries `ignore_id`.
pub fn label_affinity<T: Scalar>(v: &MultiScaleLabelVector, ignore_id: Option<u32>) -> Result<AffinityMatrix<T>> {
    let len = v.ids.len();
    if len == 0 {
        return Err(Error::InvalidArgument("label vector is empty".into()));
    }
    let keep: Vec<bool> = v.ids.iter().map(|&id| Some(id) != ignore_id).collect();
    let mut data = Vec::with_capacity(len * len);
    let mut valid = Vec::with_capacity(len * len);
    for (a, &keep_a) in v.ids.iter().zip(&keep) {
        for (b, &keep_b) in v.ids.iter().zip(&keep) {
            data.push(if a == b { T::one() } else { T::zero() });
            valid.push(keep_a && keep_b);
        }
    }
    Ok(AffinityMatrix { len, data, valid })
}

/// `phiᵀ · theta` for two C×L embeddings. All entries are valid.
pub fn dot_affinity<T: Scalar>(phi: &MultiScaleEmbedding<T>, theta: &MultiScaleEmbedding<T>) -> Result<AffinityMatrix<T>> {
    if phi.channels() != theta.channels() || phi.len() != theta.len() {
        return Err(Error::ShapeMismatch(format!(
            "embeddings {}x{} and {}x{}",
            phi.channels(),
            phi.len(),
            theta.channels(),
            theta.len()
        )));
    }
    let (channels, len) = (phi.channels(), phi.len());
    let (a, b) = (phi.data(), theta.data());
    let mut data = vec![T::zero(); len * len];
    // Accumulate channel by channel; each entry sums its products in channel
    // order, so a·b and b·a produce identical bits.
    for k in 0..channels {
        let ra = &a[k * len..(k + 1) * len];
        let rb = &b[k * len..(k + 1) * len];
        for (i, &ai) in ra.iter().enumerate() {
            let row = &mut data[i * len..(i + 1) * len];
            for (out, &bj) in row.iter_mut().zip(rb) {
                *out += ai * bj;
            }
        }
    }
    Ok(AffinityMatrix { len, data, valid: vec![true; len * len] })
}

/// Square-root affinity of a probability embedding:
/// `Ã_ij = Σ_k √e_ki · √e_kj`.
pub fn sqrt_affinity<T: Scalar>(e: &MultiScaleEmbedding<T>) -> Result<AffinityMatrix<T>> {
    let root = sqrt_embedding(e)?;
    dot_affinity(&root, &root)
}

/// Element-wise square root of an embedding, rejecting negative entries.
pub fn sqrt_embedding<T: Scalar>(e: &MultiScaleEmbedding<T>) -> Result<MultiScaleEmbedding<T>> {
    if let Some(i) = e.data().iter().position(|v| !(*v >= T::zero())) {
        let (k, j) = (i / e.len(), i % e.len());
        return Err(Error::Negative { index: format!("(channel {k}, position {j})"), value: e.data()[i].as_f64() });
    }
    Ok(e.map(|v| v.sqrt()))
}
