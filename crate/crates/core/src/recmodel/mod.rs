//! Rating-aware graph-convolutional recommender.
//!
//! [`GraphIndex`] compiles a graph (discrete or relaxed) into the index
//! vectors the forward pass needs; the same forward code runs on a tape for
//! training and for gradients with respect to a relaxed rating tensor.

mod checkpoint;
mod forward;
mod params;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_FORMAT};
pub use forward::{
    embed_on_tape, error_summary_on_tape, predict_pairs_on_tape, rating_terms_on_tape,
    EmbeddingVars, GraphIndex, RatingTerms, RelaxedGraph,
};
pub use params::{RecConfig, RecModelParams, RecVars};

use crate::numkernel::{KernelError, Tape, Tensor, Var};

#[derive(Debug, thiserror::Error)]
pub enum RecModelError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Relaxed ratings of injected users over candidate items, stored
/// `(user, candidate, level)` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RatingTensor {
    pub values: Tensor,
    /// Base-graph item indices, one per candidate slot.
    pub candidates: Vec<usize>,
    pub injected: Vec<String>,
}

impl RatingTensor {
    pub fn n_users(&self) -> usize {
        self.injected.len()
    }

    pub fn n_candidates(&self) -> usize {
        self.candidates.len()
    }

    pub fn levels(&self) -> usize {
        self.values.shape().get(2).copied().unwrap_or(0)
    }

    /// Probability vector for `(user, candidate slot)`.
    pub fn row(&self, user: usize, slot: usize) -> &[f64] {
        let l = self.levels();
        let start = (user * self.n_candidates() + slot) * l;
        &self.values.data()[start..start + l]
    }

    pub fn validate(&self, n_items: usize, levels: u8) -> Result<(), RecModelError> {
        let expect = [self.n_users(), self.n_candidates(), usize::from(levels)];
        if self.values.shape() != expect {
            return Err(RecModelError::Contract(format!(
                "rating tensor shape {:?}, expected {expect:?}",
                self.values.shape()
            )));
        }
        if self.n_users() == 0 || self.n_candidates() == 0 {
            return Err(RecModelError::Contract("empty rating tensor".into()));
        }
        let mut seen = vec![false; n_items];
        for &c in &self.candidates {
            if c >= n_items || std::mem::replace(&mut seen[c], true) {
                return Err(RecModelError::Contract(format!("bad candidate item {c}")));
            }
        }
        for row in self.values.data().chunks(usize::from(levels)) {
            if row.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
                return Err(RecModelError::Contract("tensor entry outside [0,1]".into()));
            }
            if (row.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
                return Err(RecModelError::Contract("tensor row does not sum to 1".into()));
            }
        }
        Ok(())
    }
}

/// Concrete user and item embeddings.
pub fn embed(idx: &GraphIndex, params: &RecModelParams) -> Result<(Tensor, Tensor), RecModelError> {
    let mut tape = Tape::new();
    let p = params.to_tape(&mut tape, false);
    let rhat = idx.relaxed_tensor().map(|t| tape.constant(t.clone()));
    let e = embed_on_tape(&mut tape, idx, &p, rhat)?;
    Ok((tape.value(e.users).clone(), tape.value(e.items).clone()))
}

/// Predicted rating for one pair of embeddings (rows of width `d`).
pub fn predict_rating(z_u: &[f64], z_v: &[f64], params: &RecModelParams) -> f64 {
    let d = params.dim();
    assert!(z_u.len() == d && z_v.len() == d, "embedding width");
    let hidden = params.pred_hidden.cols();
    let w = params.pred_hidden.data();
    let mut out = params.pred_out_bias.data()[0];
    for j in 0..hidden {
        let mut a = params.pred_hidden_bias.data()[j];
        for k in 0..d {
            a += z_u[k] * w[k * hidden + j] + z_v[k] * w[(d + k) * hidden + j];
        }
        out += if a < 0.0 { 0.0 } else { a } * params.pred_out.data()[j];
    }
    1.0 + (f64::from(params.levels()) - 1.0) / (1.0 + (-out).exp())
}

/// All-pairs predicted ratings, `n_users × n_items`.
pub fn predict_all(idx: &GraphIndex, params: &RecModelParams) -> Result<Tensor, RecModelError> {
    let mut tape = Tape::new();
    let p = params.to_tape(&mut tape, false);
    let rhat = idx.relaxed_tensor().map(|t| tape.constant(t.clone()));
    let e = embed_on_tape(&mut tape, idx, &p, rhat)?;
    let (users, items) = all_pairs(idx.n_users, idx.n_items);
    let pred = predict_pairs_on_tape(&mut tape, e, &p, &users, &items)?;
    Ok(tape.value(pred).clone().reshaped(vec![idx.n_users, idx.n_items])?)
}

/// Row-major `(user, item)` enumeration.
pub fn all_pairs(n_users: usize, n_items: usize) -> (Vec<usize>, Vec<usize>) {
    let users = (0..n_users).flat_map(|u| std::iter::repeat_n(u, n_items)).collect();
    let items = (0..n_users).flat_map(|_| 0..n_items).collect();
    (users, items)
}

/// Weighted mean squared rating error on the tape. `weights` is a
/// `n_users × 1` column of per-user normal probabilities.
pub fn weighted_rating_loss_on_tape(
    tape: &mut Tape,
    idx: &GraphIndex,
    terms: &RatingTerms,
    weights: Var,
) -> Result<Var, RecModelError> {
    let we = tape.gather_rows(weights, &idx.edge_user)?;
    let prod = tape.mul(terms.edge_sq, we)?;
    let mut total = tape.sum(prod);
    if let (Some((pair_users, omega)), Some(rel)) = (forward::relaxed_pairs(idx), terms.relaxed_sq) {
        let wp = tape.gather_rows(weights, pair_users)?;
        let prod = tape.mul(rel, wp)?;
        let s = tape.sum(prod);
        let s = tape.scale(s, omega);
        total = tape.add(total, s)?;
    }
    let mass = idx.rating_mass();
    Ok(tape.scale(total, if mass > 0.0 { 1.0 / mass } else { 0.0 }))
}

fn check_weights(weights: &[f64], n_users: usize) -> Result<(), RecModelError> {
    if weights.len() != n_users {
        return Err(RecModelError::Contract(format!(
            "{} detector weights for {n_users} users",
            weights.len()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !(0.0..=1.0).contains(*w)) {
        return Err(RecModelError::Contract(format!("detector weight {w} outside [0,1]")));
    }
    Ok(())
}

fn rating_loss_graph(
    tape: &mut Tape,
    idx: &GraphIndex,
    p: &RecVars,
    weights: &[f64],
) -> Result<Var, RecModelError> {
    check_weights(weights, idx.n_users)?;
    let rhat = idx.relaxed_tensor().map(|t| tape.constant(t.clone()));
    let e = embed_on_tape(tape, idx, p, rhat)?;
    let terms = rating_terms_on_tape(tape, idx, e, p, rhat)?;
    let w = tape.constant(Tensor::matrix(weights.len(), 1, weights.to_vec())?);
    weighted_rating_loss_on_tape(tape, idx, &terms, w)
}

/// Rating part of the joint loss with fixed per-user weights.
pub fn weighted_rating_loss(
    idx: &GraphIndex,
    params: &RecModelParams,
    weights: &[f64],
) -> Result<f64, RecModelError> {
    let mut tape = Tape::new();
    let p = params.to_tape(&mut tape, false);
    let loss = rating_loss_graph(&mut tape, idx, &p, weights)?;
    Ok(tape.value(loss).item())
}

/// Joint loss with fixed detector weights and a precomputed fraudster term.
pub fn joint_loss(
    idx: &GraphIndex,
    params: &RecModelParams,
    weights: &[f64],
    fraudster_loss: f64,
    lambda: f64,
) -> Result<f64, RecModelError> {
    Ok(weighted_rating_loss(idx, params, weights)? + lambda * fraudster_loss)
}

/// Applies `θ ← θ − lr·g` to every tensor.
pub fn apply_gradients(
    params: &mut RecModelParams,
    grads: &[Tensor],
    lr: f64,
) -> Result<(), RecModelError> {
    let tensors = params.tensors_mut();
    if tensors.len() != grads.len() {
        return Err(RecModelError::Contract("gradient count mismatch".into()));
    }
    for (t, g) in tensors.into_iter().zip(grads) {
        if t.shape() != g.shape() {
            return Err(RecModelError::Contract("gradient shape mismatch".into()));
        }
        t.axpy(-lr, g);
    }
    Ok(())
}

/// One full-batch descent step on the rating loss with fixed detector
/// weights. Returns the loss before the step.
pub fn train_step(
    params: &mut RecModelParams,
    idx: &GraphIndex,
    weights: &[f64],
    lr: f64,
) -> Result<f64, RecModelError> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(RecModelError::Contract(format!("learning rate {lr}")));
    }
    let mut tape = Tape::new();
    let p = params.to_tape(&mut tape, true);
    let loss = rating_loss_graph(&mut tape, idx, &p, weights)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(RecModelError::Diverged(format!("rating loss is {value}")));
    }
    let mut g = tape.backward(loss)?;
    let grads: Vec<Tensor> = p.all().into_iter().map(|v| g.take(v).expect("leaf")).collect();
    apply_gradients(params, &grads, lr)?;
    Ok(value)
}
