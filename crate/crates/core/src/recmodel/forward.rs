//! Graph compilation and the differentiable forward pass.
//!
//! One aggregation round in both directions. A user hears
//! `mean_v (h_v · W_r)` plus `(mean_v h_v) · W_self` from the items it
//! rated; an item hears the same construction over the projected features
//! `s_u = x_u · U` of its raters. Injected users of a relaxed graph connect
//! to every candidate item, and the message over a candidate is the
//! probability-weighted mix `Σ_l R̂[u,v,l] · (· W_l)`.

use crate::graphdata::{user_features, RatingGraph};
use crate::numkernel::{KernelError, Tape, Tensor, Var};

use super::params::RecVars;
use super::{RatingTensor, RecModelError};

/// Continuous relaxation of a poisoned graph: the base graph plus injected
/// users whose ratings over candidate items are probability vectors.
#[derive(Debug, Clone)]
pub struct RelaxedGraph {
    pub base: RatingGraph,
    pub tensor: RatingTensor,
    /// Features for base users followed by injected users.
    pub features: Tensor,
    /// Rating-loss weight of one relaxed `(user, candidate)` pair.
    pub edge_weight: f64,
}

impl RelaxedGraph {
    pub fn n_injected(&self) -> usize {
        self.tensor.injected.len()
    }

    pub fn validate(&self) -> Result<(), RecModelError> {
        self.tensor.validate(self.base.n_items(), self.base.levels())?;
        let n = self.base.n_users() + self.n_injected();
        if self.features.rows() != n || self.features.ndim() != 2 {
            return Err(RecModelError::Contract(format!(
                "feature matrix has {} rows, expected {n}",
                self.features.rows()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct RelaxedPart {
    n_inj: usize,
    n_cand: usize,
    candidates: Vec<usize>,
    /// Rows of the stacked item messages ordered (candidate, level).
    cand_stack: Vec<usize>,
    /// Rows of the stacked user messages ordered (injected user, level).
    inj_stack: Vec<usize>,
    /// Flat tensor indices reordering `(u, c, l)` into `(c, u, l)`.
    perm: Vec<usize>,
    cand_inv_deg: Tensor,
    pair_users: Vec<usize>,
    pair_items: Vec<usize>,
    level_grid: Tensor,
    edge_weight: f64,
}

/// Index structures and constants derived from one graph.
#[derive(Debug, Clone)]
pub struct GraphIndex {
    pub n_users: usize,
    pub n_base: usize,
    pub n_items: usize,
    pub levels: u8,
    pub features: Tensor,
    pub edge_user: Vec<usize>,
    pub edge_item: Vec<usize>,
    pub ratings: Tensor,
    user_msg_index: Vec<usize>,
    item_msg_index: Vec<usize>,
    pub user_inv_deg: Tensor,
    item_inv_deg: Tensor,
    relaxed: Option<RelaxedPart>,
    relaxed_tensor: Option<Tensor>,
}

fn inv(d: usize) -> f64 {
    if d == 0 {
        0.0
    } else {
        1.0 / d as f64
    }
}

impl GraphIndex {
    /// Index over a discrete graph with features computed from it.
    pub fn new(graph: &RatingGraph) -> Self {
        Self::with_features(graph, user_features(graph)).expect("own features fit")
    }

    pub fn with_features(graph: &RatingGraph, features: Tensor) -> Result<Self, RecModelError> {
        Self::build(graph, features, None)
    }

    pub fn relaxed(relaxed: &RelaxedGraph) -> Result<Self, RecModelError> {
        relaxed.validate()?;
        Self::build(&relaxed.base, relaxed.features.clone(), Some(relaxed))
    }

    fn build(
        graph: &RatingGraph,
        features: Tensor,
        relaxed: Option<&RelaxedGraph>,
    ) -> Result<Self, RecModelError> {
        let n_base = graph.n_users();
        let n_items = graph.n_items();
        let n_inj = relaxed.map_or(0, RelaxedGraph::n_injected);
        let n_users = n_base + n_inj;
        if features.ndim() != 2 || features.rows() != n_users {
            return Err(RecModelError::Contract(format!(
                "features have shape {:?}, expected {n_users} rows",
                features.shape()
            )));
        }
        let levels = graph.levels();
        let udeg = graph.user_degrees();
        let mut ideg = graph.item_degrees();
        if let Some(r) = relaxed {
            for &c in &r.tensor.candidates {
                ideg[c] += n_inj;
            }
        }
        let edges = graph.edges();
        let edge_user: Vec<usize> = edges.iter().map(|e| e.user).collect();
        let edge_item: Vec<usize> = edges.iter().map(|e| e.item).collect();
        let ratings = Tensor::matrix(edges.len(), 1, edges.iter().map(|e| f64::from(e.rating)).collect())?;
        let user_msg_index = edges
            .iter()
            .map(|e| usize::from(e.rating - 1) * n_items + e.item)
            .collect();
        let item_msg_index = edges
            .iter()
            .map(|e| usize::from(e.rating - 1) * n_users + e.user)
            .collect();
        let user_inv_deg = Tensor::vector(edges.iter().map(|e| inv(udeg[e.user])).collect());
        let item_inv_deg = Tensor::vector(edges.iter().map(|e| inv(ideg[e.item])).collect());

        let relaxed_part = relaxed.map(|r| {
            let cands = r.tensor.candidates.clone();
            let n_cand = cands.len();
            let l = usize::from(levels);
            let mut cand_stack = Vec::with_capacity(n_cand * l);
            for &c in &cands {
                for lv in 0..l {
                    cand_stack.push(lv * n_items + c);
                }
            }
            let mut inj_stack = Vec::with_capacity(n_inj * l);
            for u in 0..n_inj {
                for lv in 0..l {
                    inj_stack.push(lv * n_users + n_base + u);
                }
            }
            let mut perm = Vec::with_capacity(n_inj * n_cand * l);
            for c in 0..n_cand {
                for u in 0..n_inj {
                    for lv in 0..l {
                        perm.push((u * n_cand + c) * l + lv);
                    }
                }
            }
            let mut pair_users = Vec::with_capacity(n_inj * n_cand);
            let mut pair_items = Vec::with_capacity(n_inj * n_cand);
            for u in 0..n_inj {
                for &c in &cands {
                    pair_users.push(n_base + u);
                    pair_items.push(c);
                }
            }
            let n_pairs = pair_users.len();
            let grid = (0..n_pairs).flat_map(|_| (1..=l).map(|v| v as f64)).collect();
            RelaxedPart {
                n_inj,
                n_cand,
                cand_inv_deg: Tensor::vector(cands.iter().map(|&c| inv(ideg[c])).collect()),
                candidates: cands,
                cand_stack,
                inj_stack,
                perm,
                pair_users,
                pair_items,
                level_grid: Tensor::matrix(n_pairs, l, grid).expect("grid shape"),
                edge_weight: r.edge_weight,
            }
        });
        Ok(Self {
            n_users,
            n_base,
            n_items,
            levels,
            features,
            edge_user,
            edge_item,
            ratings,
            user_msg_index,
            item_msg_index,
            user_inv_deg,
            item_inv_deg,
            relaxed: relaxed_part,
            relaxed_tensor: relaxed.map(|r| r.tensor.values.clone()),
        })
    }

    pub fn n_edges(&self) -> usize {
        self.edge_user.len()
    }

    pub fn is_relaxed(&self) -> bool {
        self.relaxed.is_some()
    }

    pub fn relaxed_tensor(&self) -> Option<&Tensor> {
        self.relaxed_tensor.as_ref()
    }

    /// Swaps in new tensor values of the same shape.
    pub fn set_relaxed_tensor(&mut self, values: Tensor) -> Result<(), RecModelError> {
        match &self.relaxed_tensor {
            Some(t) if t.shape() == values.shape() => {
                self.relaxed_tensor = Some(values);
                Ok(())
            }
            _ => Err(RecModelError::Contract("relaxed tensor shape mismatch".into())),
        }
    }

    pub fn set_features(&mut self, features: Tensor) -> Result<(), RecModelError> {
        if features.shape() != self.features.shape() {
            return Err(RecModelError::Contract("feature shape mismatch".into()));
        }
        self.features = features;
        Ok(())
    }

    pub fn n_relaxed_pairs(&self) -> usize {
        self.relaxed.as_ref().map_or(0, |r| r.pair_users.len())
    }

    /// Total weight of rating-loss terms: real edges plus weighted relaxed pairs.
    pub fn rating_mass(&self) -> f64 {
        self.n_edges() as f64
            + self
                .relaxed
                .as_ref()
                .map_or(0.0, |r| r.edge_weight * r.pair_users.len() as f64)
    }
}

/// User and item embeddings on a tape.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddingVars {
    pub users: Var,
    pub items: Var,
}

fn stack_levels(tape: &mut Tape, base: Var, p: &RecVars) -> Result<Var, KernelError> {
    let parts = p
        .level_transforms
        .iter()
        .map(|&w| tape.matmul(base, w))
        .collect::<Result<Vec<_>, _>>()?;
    tape.concat_rows(&parts)
}

/// Embeds every user and item. `rhat` must be given exactly when the index
/// is relaxed; pass a leaf to differentiate with respect to it.
pub fn embed_on_tape(
    tape: &mut Tape,
    idx: &GraphIndex,
    p: &RecVars,
    rhat: Option<Var>,
) -> Result<EmbeddingVars, RecModelError> {
    if idx.relaxed.is_some() != rhat.is_some() {
        return Err(RecModelError::Contract(
            "relaxed tensor must accompany a relaxed graph".into(),
        ));
    }
    let h = p.item_table;
    let x = tape.constant(idx.features.clone());
    let s = tape.matmul(x, p.user_proj)?;
    let user_inv = tape.constant(idx.user_inv_deg.clone());
    let item_inv = tape.constant(idx.item_inv_deg.clone());

    // user side
    let item_msgs = stack_levels(tape, h, p)?;
    let m = tape.gather_rows(item_msgs, &idx.user_msg_index)?;
    let m = tape.mul_col(m, user_inv)?;
    let agg_u = tape.scatter_add_rows(m, &idx.edge_user, idx.n_base)?;
    let hn = tape.gather_rows(h, &idx.edge_item)?;
    let hn = tape.mul_col(hn, user_inv)?;
    let mean_h = tape.scatter_add_rows(hn, &idx.edge_user, idx.n_base)?;
    let self_u = tape.matmul(mean_h, p.self_transform)?;
    let s_base = tape.slice_rows(s, 0, idx.n_base)?;
    let pre = tape.add(s_base, agg_u)?;
    let mut pre_users = tape.add(pre, self_u)?;

    // item side
    let user_msgs = stack_levels(tape, s, p)?;
    let im = tape.gather_rows(user_msgs, &idx.item_msg_index)?;
    let im = tape.mul_col(im, item_inv)?;
    let mut agg_i = tape.scatter_add_rows(im, &idx.edge_item, idx.n_items)?;
    let sn = tape.gather_rows(s, &idx.edge_user)?;
    let sn = tape.mul_col(sn, item_inv)?;
    let mut mean_s = tape.scatter_add_rows(sn, &idx.edge_item, idx.n_items)?;

    if let (Some(r), Some(rhat)) = (&idx.relaxed, rhat) {
        let l = usize::from(idx.levels);
        // injected users hear every candidate
        let mc = tape.gather_rows(item_msgs, &r.cand_stack)?;
        let rm = tape.reshape(rhat, &[r.n_inj, r.n_cand * l])?;
        let agg = tape.matmul(rm, mc)?;
        let agg = tape.scale(agg, 1.0 / r.n_cand as f64);
        let hc = tape.gather_rows(h, &r.candidates)?;
        let hsum = tape.sum_axis(hc, 0)?;
        let hmean = tape.reshape(hsum, &[1, p.dim])?;
        let hmean = tape.scale(hmean, 1.0 / r.n_cand as f64);
        let self_one = tape.matmul(hmean, p.self_transform)?;
        let self_inj = tape.gather_rows(self_one, &vec![0; r.n_inj])?;
        let s_inj = tape.slice_rows(s, idx.n_base, idx.n_users)?;
        let pre_inj = tape.add(s_inj, agg)?;
        let pre_inj = tape.add(pre_inj, self_inj)?;
        pre_users = tape.concat_rows(&[pre_users, pre_inj])?;

        // candidates hear every injected user
        let cand_inv = tape.constant(r.cand_inv_deg.clone());
        let si = tape.gather_rows(user_msgs, &r.inj_stack)?;
        let rp = tape.pick(rhat, &r.perm)?;
        let rp = tape.reshape(rp, &[r.n_cand, r.n_inj * l])?;
        let cm = tape.matmul(rp, si)?;
        let cm = tape.mul_col(cm, cand_inv)?;
        let cm = tape.scatter_add_rows(cm, &r.candidates, idx.n_items)?;
        agg_i = tape.add(agg_i, cm)?;
        let s_inj = tape.slice_rows(s, idx.n_base, idx.n_users)?;
        let s_inj_sum = tape.sum_axis(s_inj, 0)?;
        let s_inj_sum = tape.reshape(s_inj_sum, &[1, p.dim])?;
        let per_cand = tape.gather_rows(s_inj_sum, &vec![0; r.n_cand])?;
        let per_cand = tape.mul_col(per_cand, cand_inv)?;
        let per_cand = tape.scatter_add_rows(per_cand, &r.candidates, idx.n_items)?;
        mean_s = tape.add(mean_s, per_cand)?;
    }

    let users = tape.relu(pre_users);
    let self_i = tape.matmul(mean_s, p.self_transform)?;
    let items = tape.add(h, agg_i)?;
    let items = tape.add(items, self_i)?;
    Ok(EmbeddingVars { users, items })
}

/// Predicted ratings for `(users[k], items[k])` pairs as a `n × 1` column,
/// each in `[1, L]`.
pub fn predict_pairs_on_tape(
    tape: &mut Tape,
    emb: EmbeddingVars,
    p: &RecVars,
    users: &[usize],
    items: &[usize],
) -> Result<Var, RecModelError> {
    let d = p.dim;
    let wu = tape.slice_rows(p.pred_hidden, 0, d)?;
    let wi = tape.slice_rows(p.pred_hidden, d, 2 * d)?;
    let pu = tape.matmul(emb.users, wu)?;
    let qi = tape.matmul(emb.items, wi)?;
    if users.len() != items.len() {
        return Err(RecModelError::Contract("pair lists differ in length".into()));
    }
    let pairs: Vec<(usize, usize)> = users.iter().copied().zip(items.iter().copied()).collect();
    let out = tape.pair_hidden(pu, qi, p.pred_hidden_bias, p.pred_out, &pairs)?;
    let out = tape.add_row(out, p.pred_out_bias)?;
    let sig = tape.sigmoid(out);
    let scaled = tape.scale(sig, f64::from(p.levels) - 1.0);
    Ok(tape.add_scalar(scaled, 1.0))
}

/// Per-edge and per-relaxed-pair prediction terms used by the losses.
#[derive(Debug, Clone, Copy)]
pub struct RatingTerms {
    /// `n_edges × 1` squared errors on real edges.
    pub edge_sq: Var,
    /// `n_edges × 1` absolute errors on real edges.
    pub edge_abs: Var,
    /// Expected squared / absolute errors on relaxed pairs (`n_pairs × 1`).
    pub relaxed_sq: Option<Var>,
    pub relaxed_abs: Option<Var>,
}

pub fn rating_terms_on_tape(
    tape: &mut Tape,
    idx: &GraphIndex,
    emb: EmbeddingVars,
    p: &RecVars,
    rhat: Option<Var>,
) -> Result<RatingTerms, RecModelError> {
    let pred = predict_pairs_on_tape(tape, emb, p, &idx.edge_user, &idx.edge_item)?;
    let r = tape.constant(idx.ratings.clone());
    let diff = tape.sub(pred, r)?;
    let edge_sq = tape.mul(diff, diff)?;
    let edge_abs = tape.abs(diff);
    let (mut relaxed_sq, mut relaxed_abs) = (None, None);
    if let (Some(part), Some(rhat)) = (&idx.relaxed, rhat) {
        let l = usize::from(idx.levels);
        let n = part.pair_users.len();
        let pp = predict_pairs_on_tape(tape, emb, p, &part.pair_users, &part.pair_items)?;
        let ones = tape.constant(Tensor::ones(&[1, l]));
        let spread = tape.matmul(pp, ones)?;
        let grid = tape.constant(part.level_grid.clone());
        let dev = tape.sub(spread, grid)?;
        let probs = tape.reshape(rhat, &[n, l])?;
        let sq = tape.mul(dev, dev)?;
        let sq = tape.mul(sq, probs)?;
        let sq = tape.sum_axis(sq, 1)?;
        relaxed_sq = Some(tape.reshape(sq, &[n, 1])?);
        let ab = tape.abs(dev);
        let ab = tape.mul(ab, probs)?;
        let ab = tape.sum_axis(ab, 1)?;
        relaxed_abs = Some(tape.reshape(ab, &[n, 1])?);
    }
    Ok(RatingTerms {
        edge_sq,
        edge_abs,
        relaxed_sq,
        relaxed_abs,
    })
}

/// Mean and max absolute error per user (`n_users × 1` each); users
/// without edges get zeros.
pub fn error_summary_on_tape(
    tape: &mut Tape,
    idx: &GraphIndex,
    terms: &RatingTerms,
) -> Result<(Var, Var), RecModelError> {
    let user_inv = tape.constant(idx.user_inv_deg.clone());
    let weighted = tape.mul_col(terms.edge_abs, user_inv)?;
    let mut mean = tape.scatter_add_rows(weighted, &idx.edge_user, idx.n_users)?;
    let mut all_abs = terms.edge_abs;
    let mut all_users = idx.edge_user.clone();
    if let (Some(part), Some(rel)) = (&idx.relaxed, terms.relaxed_abs) {
        let scaled = tape.scale(rel, 1.0 / part.n_cand as f64);
        let rel_mean = tape.scatter_add_rows(scaled, &part.pair_users, idx.n_users)?;
        mean = tape.add(mean, rel_mean)?;
        all_abs = tape.concat_rows(&[all_abs, rel])?;
        all_users.extend(&part.pair_users);
    }
    let max = tape.scatter_max_rows(all_abs, &all_users, idx.n_users)?;
    Ok((mean, max))
}

/// Relaxed-pair user indices and loss weight, if any.
pub(crate) fn relaxed_pairs(idx: &GraphIndex) -> Option<(&[usize], f64)> {
    idx.relaxed
        .as_ref()
        .map(|r| (r.pair_users.as_slice(), r.edge_weight))
}
