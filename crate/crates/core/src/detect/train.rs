use serde::{Deserialize, Serialize};

use super::{
    ip_loss_on_tape, logits_on_tape, supervised_ce_on_tape, DetectError, DetectorParams,
    DetectorVars, PosteriorTable, PriorTable,
};
use crate::graphdata::Label;
use crate::numkernel::{Tape, Tensor, Var};
use crate::recmodel::{
    embed_on_tape, error_summary_on_tape, rating_terms_on_tape, weighted_rating_loss_on_tape,
    GraphIndex, RecConfig, RecModelError, RecModelParams, RecVars,
};

/// Supervision of the detector head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectorMode {
    /// Cross-entropy on observed labels, temperature 1.
    GraphRfi,
    /// Implicit-posterior loss against adjustable priors.
    Pdr,
}

/// Recommender and detector trained together.
#[derive(Debug, Clone, PartialEq)]
pub struct JointModel {
    pub rec: RecModelParams,
    pub det: DetectorParams,
}

impl JointModel {
    pub fn init(
        n_items: usize,
        feature_dim: usize,
        levels: u8,
        rec: &RecConfig,
        det_hidden: usize,
        temperature: f64,
        seed: u64,
    ) -> Self {
        Self {
            rec: RecModelParams::init(n_items, rec.dim, rec.hidden, feature_dim, levels, seed),
            det: DetectorParams::init(rec.dim + 2, det_hidden, temperature, seed),
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.rec.tensors_mut();
        v.extend(self.det.tensors_mut());
        v
    }
}

/// What the detector is trained against.
#[derive(Debug, Clone)]
pub struct TrainingContext {
    pub mode: DetectorMode,
    /// Users contributing to the detector loss.
    pub users: Vec<usize>,
    /// Observed labels of `users` (cross-entropy mode).
    pub labels: Vec<Label>,
    /// Priors for every user (implicit-posterior mode).
    pub prior: PriorTable,
    pub lambda: f64,
}

struct Forward {
    probs: Var,
    loss: Var,
}

fn forward(
    tape: &mut Tape,
    idx: &GraphIndex,
    rec: &RecVars,
    det: &DetectorVars,
    ctx: Option<&TrainingContext>,
) -> Result<Forward, DetectError> {
    let rhat = idx.relaxed_tensor().map(|t| tape.constant(t.clone()));
    let emb = embed_on_tape(tape, idx, rec, rhat)?;
    let terms = rating_terms_on_tape(tape, idx, emb, rec, rhat)?;
    let (mean_e, max_e) = error_summary_on_tape(tape, idx, &terms)?;
    let z = tape.concat_cols(emb.users, mean_e)?;
    let z = tape.concat_cols(z, max_e)?;
    let logits = logits_on_tape(tape, z, det)?;
    let probs = tape.softmax(logits, det.temperature)?;
    let Some(ctx) = ctx else {
        let loss = tape.constant(Tensor::scalar(0.0));
        return Ok(Forward { probs, loss });
    };
    let sel = tape.constant(Tensor::matrix(2, 1, vec![0.0, 1.0]).expect("shape"));
    let weights = tape.matmul(probs, sel)?;
    let rating = weighted_rating_loss_on_tape(tape, idx, &terms, weights)?;
    let fraud = match ctx.mode {
        DetectorMode::GraphRfi => {
            let lp = tape.log_softmax(logits, det.temperature)?;
            supervised_ce_on_tape(tape, lp, &ctx.users, &ctx.labels)?
        }
        DetectorMode::Pdr => {
            // per-user mean, so both heads weigh in on the same scale
            let ip = ip_loss_on_tape(tape, probs, &ctx.users, &ctx.prior)?;
            tape.scale(ip, 1.0 / ctx.users.len().max(1) as f64)
        }
    };
    let fraud = tape.scale(fraud, ctx.lambda);
    let loss = tape.add(rating, fraud)?;
    Ok(Forward { probs, loss })
}

/// Detector posteriors for every user of the indexed graph.
pub fn posterior(model: &JointModel, idx: &GraphIndex) -> Result<PosteriorTable, DetectError> {
    let mut tape = Tape::new();
    let rec = model.rec.to_tape(&mut tape, false);
    let det = model.det.to_tape(&mut tape, false);
    let f = forward(&mut tape, idx, &rec, &det, None)?;
    Ok(PosteriorTable(
        tape.value(f.probs).data().chunks(2).map(|c| [c[0], c[1]]).collect(),
    ))
}

/// Joint loss and its gradient, recommender tensors first.
pub fn joint_gradients(
    model: &JointModel,
    idx: &GraphIndex,
    ctx: &TrainingContext,
) -> Result<(f64, Vec<Tensor>), DetectError> {
    let mut tape = Tape::new();
    let rec = model.rec.to_tape(&mut tape, true);
    let det = model.det.to_tape(&mut tape, true);
    let f = forward(&mut tape, idx, &rec, &det, Some(ctx))?;
    let value = tape.value(f.loss).item();
    if !value.is_finite() {
        return Err(RecModelError::Diverged(format!("joint loss is {value}")).into());
    }
    let mut g = tape.backward(f.loss)?;
    let grads = rec
        .all()
        .into_iter()
        .chain(det.all())
        .map(|v| g.take(v).expect("leaf gradient"))
        .collect();
    Ok((value, grads))
}

/// Joint loss value without gradients.
pub fn joint_loss_value(
    model: &JointModel,
    idx: &GraphIndex,
    ctx: &TrainingContext,
) -> Result<f64, DetectError> {
    let mut tape = Tape::new();
    let rec = model.rec.to_tape(&mut tape, false);
    let det = model.det.to_tape(&mut tape, false);
    let f = forward(&mut tape, idx, &rec, &det, Some(ctx))?;
    Ok(tape.value(f.loss).item())
}

fn apply(model: &mut JointModel, grads: &[Tensor], scale: f64) {
    for (t, g) in model.tensors_mut().into_iter().zip(grads) {
        t.axpy(scale, g);
    }
}

/// One full-batch descent step on the joint loss; returns the loss before it.
pub fn joint_train_step(
    model: &mut JointModel,
    idx: &GraphIndex,
    ctx: &TrainingContext,
    lr: f64,
) -> Result<f64, DetectError> {
    let (value, grads) = joint_gradients(model, idx, ctx)?;
    apply(model, &grads, -lr);
    Ok(value)
}

/// `noise_scale · g / ‖g‖` over all tensors jointly; zero if `g` vanishes.
pub fn adversarial_perturbation(grads: &[Tensor], noise_scale: f64) -> Vec<Tensor> {
    let norm = grads.iter().map(|g| g.norm().powi(2)).sum::<f64>().sqrt();
    let k = if norm > 0.0 { noise_scale / norm } else { 0.0 };
    grads
        .iter()
        .map(|g| Tensor::new(g.shape().to_vec(), g.data().iter().map(|x| x * k).collect()).expect("shape"))
        .collect()
}

/// Descent step using the gradient taken at parameters pushed along the
/// normalized ascent direction.
pub fn adversarial_training_step(
    model: &mut JointModel,
    idx: &GraphIndex,
    ctx: &TrainingContext,
    lr: f64,
    noise_scale: f64,
) -> Result<f64, DetectError> {
    let (value, grads) = joint_gradients(model, idx, ctx)?;
    let delta = adversarial_perturbation(&grads, noise_scale);
    let mut shifted = model.clone();
    apply(&mut shifted, &delta, 1.0);
    let (_, g_adv) = joint_gradients(&shifted, idx, ctx)?;
    apply(model, &g_adv, -lr);
    Ok(value)
}
