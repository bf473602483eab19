//! Supervision-free part-learning losses on cross-attention maps: attention
//! centers, the margin ranking loss with virtual boundary centers, the
//! sparsity loss, and the diversity-loss baseline it is compared against.
//!
//! All functions build tape nodes so gradients flow to the attention maps;
//! reductions over rows are expressed as matrix products with constant
//! index/selector tensors.

use crate::autodiff::tape::{NodeId, Tape};
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

/// Weights for the four loss terms plus the ranking margin (in clips).
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub classification: f64,
    pub regression: f64,
    pub ranking: f64,
    pub sparsity: f64,
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            classification: 1.0,
            regression: 1.0,
            ranking: 1.0,
            sparsity: 1.0,
            margin: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("classification", self.classification),
            ("regression", self.regression),
            ("ranking", self.ranking),
            ("sparsity", self.sparsity),
        ] {
            if !(v >= 0.0) {
                return Err(Error::Config(format!(
                    "loss weight {name} = {v} must be non-negative"
                )));
            }
        }
        if !self.margin.is_finite() {
            return Err(Error::Config(format!(
                "ranking margin {} must be finite",
                self.margin
            )));
        }
        Ok(())
    }
}

/// Largest tolerated deviation of an attention row sum from 1 before the
/// map is treated as corrupted.
pub const ROW_SUM_TOLERANCE: f64 = 1e-4;

/// ᾱ_k = Σ_t t·α_{k,t}, 1-based clip indices. Input `[K, T]`, output
/// `[K, 1]`.
pub fn attention_center(tape: &mut Tape, attention: NodeId) -> Result<NodeId> {
    let shape = tape.value(attention).shape();
    if shape.len() != 2 {
        return Err(Error::Contract(format!(
            "attention map must be [K, T], got {shape:?}"
        )));
    }
    let (k, t) = (shape[0], shape[1]);
    for row in 0..k {
        let sum: f64 = (0..t).map(|col| tape.value(attention).at(row, col)).sum();
        if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
            return Err(Error::Contract(format!(
                "attention row {row} sums to {sum}, expected 1 (upstream softmax broken?)"
            )));
        }
    }
    let index_col = {
        let col = Tensor::new(vec![t, 1], (1..=t).map(|i| i as f64).collect())?;
        tape.leaf(col)
    };
    tape.matmul(attention, index_col)
}

/// Value-level centers for evaluation and export (same contract, no tape).
pub fn attention_centers_value(attention: &Tensor) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let node = tape.leaf(attention.clone());
    let centers = attention_center(&mut tape, node)?;
    Ok(tape.value(centers).data().to_vec())
}

/// Margin ranking loss over centers with virtual boundary centers at 1 and
/// T: Σ_{k<K} max(0, ᾱ_k − ᾱ_{k+1} + m) + max(0, 1 − ᾱ₁ + m)
/// + max(0, ᾱ_K − T + m).
pub fn ranking_loss(tape: &mut Tape, centers: NodeId, t: usize, margin: f64) -> Result<NodeId> {
    let k = tape.value(centers).shape()[0];
    let m = tape.leaf(Tensor::scalar(margin));

    let mut total: Option<NodeId> = None;
    let mut add_term = |tape: &mut Tape, term: NodeId| -> Result<()> {
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
        Ok(())
    };

    if k >= 2 {
        // rows of D give ᾱ_k − ᾱ_{k+1}
        let mut d = vec![0.0; (k - 1) * k];
        for row in 0..k - 1 {
            d[row * k + row] = 1.0;
            d[row * k + row + 1] = -1.0;
        }
        let dmat = tape.leaf(Tensor::new(vec![k - 1, k], d)?);
        let diffs = tape.matmul(dmat, centers)?;
        let shifted = tape.add(diffs, m)?;
        let hinged = tape.relu(shifted);
        let s = tape.sum(hinged);
        add_term(tape, s)?;
    }

    let select = |tape: &mut Tape, idx: usize| -> Result<NodeId> {
        let mut row = vec![0.0; k];
        row[idx] = 1.0;
        let sel = tape.leaf(Tensor::new(vec![1, k], row)?);
        tape.matmul(sel, centers)
    };

    // left virtual center: max(0, 1 − ᾱ₁ + m)
    let first = select(tape, 0)?;
    let neg_first = tape.scale(first, -1.0);
    let left_base = tape.leaf(Tensor::scalar(1.0 + margin));
    let left = tape.add(neg_first, left_base)?;
    let left = tape.relu(left);
    let left = tape.sum(left);
    add_term(tape, left)?;

    // right virtual center: max(0, ᾱ_K − T + m)
    let last = select(tape, k - 1)?;
    let right_base = tape.leaf(Tensor::scalar(margin - t as f64));
    let right = tape.add(last, right_base)?;
    let right = tape.relu(right);
    let right = tape.sum(right);
    add_term(tape, right)?;

    Ok(total.expect("at least the boundary terms"))
}

/// Σ_k Σ_t |t − ᾱ_k|·α_{k,t}. By default the gradient flows through the
/// centers too (they are a function of α); `detach_centers` freezes them to
/// their current values.
pub fn sparsity_loss(
    tape: &mut Tape,
    attention: NodeId,
    centers: NodeId,
    detach_centers: bool,
) -> Result<NodeId> {
    let t = tape.value(attention).shape()[1];
    let centers = if detach_centers {
        let frozen = tape.value(centers).clone();
        tape.leaf(frozen)
    } else {
        centers
    };
    let index_row = tape.leaf(Tensor::index_row(t));
    // [1,T] − [K,1] broadcasts to [K,T] of (t − ᾱ_k)
    let offsets = tape.sub(index_row, centers)?;
    let distances = tape.abs_smooth(offsets);
    let weighted = tape.mul(distances, attention)?;
    Ok(tape.sum(weighted))
}

/// Pairwise Gaussian repulsion Σ_i Σ_{j>i} exp(−(ᾱ_i−ᾱ_j)²/(2σ²)) — the
/// order-free baseline the ranking loss is ablated against.
pub fn diversity_loss(tape: &mut Tape, centers: NodeId, sigma: f64) -> Result<NodeId> {
    if !(sigma > 0.0) {
        return Err(Error::Contract(format!(
            "diversity sigma {sigma} must be positive"
        )));
    }
    let k = tape.value(centers).shape()[0];
    let row = tape.transpose(centers)?;
    // [K,1] − [1,K] broadcasts to all pairwise differences
    let deltas = tape.sub(centers, row)?;
    let squared = tape.mul(deltas, deltas)?;
    let scaled = tape.scale(squared, -1.0 / (2.0 * sigma * sigma));
    let gaussian = tape.exp(scaled);
    let mut mask = vec![0.0; k * k];
    for i in 0..k {
        for j in i + 1..k {
            mask[i * k + j] = 1.0;
        }
    }
    let mask = tape.leaf(Tensor::new(vec![k, k], mask)?);
    let upper = tape.mul(gaussian, mask)?;
    Ok(tape.sum(upper))
}

/// Per-layer ranking and sparsity losses summed (not averaged) across the
/// decoder layers.
pub fn aggregate_attention_losses(
    tape: &mut Tape,
    layer_maps: &[NodeId],
    t: usize,
    margin: f64,
    detach_centers: bool,
) -> Result<(NodeId, NodeId)> {
    if layer_maps.is_empty() {
        return Err(Error::Contract("no attention maps to aggregate".into()));
    }
    let mut rank_total: Option<NodeId> = None;
    let mut sparsity_total: Option<NodeId> = None;
    for &map in layer_maps {
        let centers = attention_center(tape, map)?;
        let rank = ranking_loss(tape, centers, t, margin)?;
        let sparse = sparsity_loss(tape, map, centers, detach_centers)?;
        rank_total = Some(match rank_total {
            Some(acc) => tape.add(acc, rank)?,
            None => rank,
        });
        sparsity_total = Some(match sparsity_total {
            Some(acc) => tape.add(acc, sparse)?,
            None => sparse,
        });
    }
    Ok((rank_total.unwrap(), sparsity_total.unwrap()))
}
