use crate::detect::{init_priors, joint_train_step, DetectorMode, JointModel, TrainingContext};
use crate::graphdata::{candidate_items, user_features, Label, RatingGraph, N_USER_FEATURES};
use crate::numkernel::{Tape, Tensor, Var};
use crate::recmodel::{
    embed_on_tape, predict_pairs_on_tape, GraphIndex, RecConfig, RecModelParams, RelaxedGraph,
};
use crate::seeds::derive_seed;

use super::{
    discretize, init_tensor, injected_ids, poison, project_normalize, AttackConfig, AttackError,
    InjectedProfile, RatingTensor,
};

/// Negative log soft-max share of the targets, summed over users, for a
/// `n × n_items` prediction matrix.
pub fn adv_loss_on_tape(tape: &mut Tape, predictions: Var, targets: &[usize]) -> Result<Var, AttackError> {
    let v = tape.value(predictions);
    let (n, m) = (v.rows(), v.cols());
    if let Some(&t) = targets.iter().find(|&&t| t >= m) {
        return Err(AttackError::Config(format!("target {t} outside {m} items")));
    }
    let lsm = tape.log_softmax(predictions, 1.0)?;
    let flat: Vec<usize> = (0..n).flat_map(|u| targets.iter().map(move |&t| u * m + t)).collect();
    let picked = tape.pick(lsm, &flat)?;
    let s = tape.sum(picked);
    Ok(tape.scale(s, -1.0))
}

/// Plain evaluation over the listed rows of a prediction matrix.
pub fn adv_loss(predictions: &Tensor, targets: &[usize], users: &[usize]) -> f64 {
    let m = predictions.cols();
    let mut total = 0.0;
    for &u in users {
        let row = predictions.row(u);
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
        for &t in targets {
            assert!(t < m, "target outside item set");
            total -= row[t] - lse;
        }
    }
    total
}

fn adv_on_tape(
    tape: &mut Tape,
    idx: &GraphIndex,
    params: &RecModelParams,
    rhat: Var,
    targets: &[usize],
    users: &[usize],
) -> Result<Var, AttackError> {
    let p = params.to_tape(tape, false);
    let emb = embed_on_tape(tape, idx, &p, Some(rhat))?;
    let m = idx.n_items;
    let pu: Vec<usize> = users.iter().flat_map(|&u| std::iter::repeat_n(u, m)).collect();
    let pi: Vec<usize> = users.iter().flat_map(|_| 0..m).collect();
    let pred = predict_pairs_on_tape(tape, emb, &p, &pu, &pi)?;
    let pred = tape.reshape(pred, &[users.len(), m])?;
    adv_loss_on_tape(tape, pred, targets)
}

/// Sum over the parameter trajectory of the fixed-parameter gradient of
/// the adversarial loss with respect to the relaxed tensor held by `idx`.
/// Also returns the mean loss over checkpoints.
pub fn meta_gradient(
    idx: &GraphIndex,
    trajectory: &[RecModelParams],
    targets: &[usize],
    users: &[usize],
) -> Result<(Tensor, f64), AttackError> {
    if trajectory.is_empty() {
        return Err(AttackError::Config("empty parameter trajectory".into()));
    }
    let values = idx
        .relaxed_tensor()
        .ok_or_else(|| AttackError::Config("meta-gradient needs a relaxed graph".into()))?;
    let mut total = Tensor::zeros(values.shape());
    let mut loss = 0.0;
    for params in trajectory {
        let mut tape = Tape::new();
        let rhat = tape.leaf(values.clone());
        let l = adv_on_tape(&mut tape, idx, params, rhat, targets, users)?;
        loss += tape.value(l).item();
        let g = tape.backward(l)?;
        total.axpy(1.0, g.get(rhat).expect("leaf gradient"));
    }
    Ok((total, loss / trajectory.len() as f64))
}

/// What the attacker knows and trains against.
#[derive(Debug, Clone, Copy)]
pub struct SurrogateSetup<'a> {
    /// The graph the attacker observes, with its labels.
    pub graph: &'a RatingGraph,
    pub targets: &'a [usize],
    pub rec: &'a RecConfig,
    pub detector_hidden: usize,
    /// Trained model to start from when `warm_start` is set.
    pub warm: Option<&'a JointModel>,
}

#[derive(Debug, Clone)]
pub struct AttackOutcome {
    pub tensor: RatingTensor,
    pub profiles: Vec<InjectedProfile>,
    /// Mean adversarial loss over checkpoints, per tensor update.
    pub adv_history: Vec<f64>,
    /// Adversarial loss of the initial and final tensors under the final
    /// surrogate parameters.
    pub initial_adv_loss: f64,
    pub final_adv_loss: f64,
}

/// Users whose recommendations the attacker targets: everyone not labeled fake.
fn audience(graph: &RatingGraph) -> Vec<usize> {
    (0..graph.n_users()).filter(|&u| graph.label(u) != Label::Fake).collect()
}

/// Features of base users followed by injected users, computed on the graph
/// poisoned with the current discretized tensor.
fn relaxed_features(
    base: &RatingGraph,
    tensor: &RatingTensor,
    budget: usize,
    forced: &[usize],
) -> Result<Tensor, AttackError> {
    let profiles = discretize(tensor, budget, forced)?;
    let poisoned = poison(base, &profiles, &vec![Label::Normal; profiles.len()])?;
    let f = user_features(&poisoned);
    let order = base
        .users()
        .iter()
        .map(|u| u.id.as_str())
        .chain(tensor.injected.iter().map(String::as_str));
    let mut data = Vec::with_capacity((base.n_users() + tensor.n_users()) * N_USER_FEATURES);
    for id in order {
        data.extend_from_slice(f.row(poisoned.user_index(id).expect("user present")));
    }
    Ok(Tensor::matrix(base.n_users() + tensor.n_users(), N_USER_FEATURES, data)?)
}

fn relaxed_index(
    base: &RatingGraph,
    tensor: &RatingTensor,
    cfg: &AttackConfig,
    forced: &[usize],
) -> Result<GraphIndex, AttackError> {
    let relaxed = RelaxedGraph {
        base: base.clone(),
        tensor: tensor.clone(),
        features: relaxed_features(base, tensor, cfg.budget, forced)?,
        edge_weight: (cfg.budget as f64 / tensor.n_candidates() as f64).min(1.0),
    };
    Ok(GraphIndex::relaxed(&relaxed)?)
}

fn final_loss(
    base: &RatingGraph,
    tensor: &RatingTensor,
    cfg: &AttackConfig,
    forced: &[usize],
    params: &RecModelParams,
    targets: &[usize],
    users: &[usize],
) -> Result<f64, AttackError> {
    let idx = relaxed_index(base, tensor, cfg, forced)?;
    Ok(meta_gradient(&idx, std::slice::from_ref(params), targets, users)?.1)
}

/// Alternates surrogate training on the relaxed poisoned graph with
/// meta-gradient steps on the rating tensor, then discretizes.
pub fn metac_optimize(
    setup: SurrogateSetup<'_>,
    cfg: &AttackConfig,
    seed: u64,
) -> Result<AttackOutcome, AttackError> {
    cfg.validate()?;
    let base = setup.graph;
    let targets = setup.targets;
    if targets.is_empty() || targets.iter().any(|&t| t >= base.n_items()) {
        return Err(AttackError::Config("targets must be non-empty items of the graph".into()));
    }
    let candidates = if base.n_items() > cfg.candidate_threshold {
        candidate_items(base, targets, cfg.candidate_hops)?
    } else {
        (0..base.n_items()).collect()
    };
    let forced: Vec<usize> = if cfg.force_targets { targets.to_vec() } else { Vec::new() };
    let n_inj = cfg.n_injected(base.n_users());
    let ids = injected_ids(base, n_inj);
    let mut tensor = init_tensor(ids, candidates, base.levels(), cfg.init_noise, seed)?;
    let initial = tensor.clone();
    let users = audience(base);

    let mut model = match (cfg.warm_start, setup.warm) {
        (true, Some(m)) => m.clone(),
        _ => JointModel::init(
            base.n_items(),
            N_USER_FEATURES,
            base.levels(),
            setup.rec,
            setup.detector_hidden,
            1.0,
            derive_seed(seed, "surrogate"),
        ),
    };
    model.det.temperature = 1.0;
    let mut ctx_users: Vec<usize> = (0..base.n_users()).filter(|&u| base.label(u) != Label::Unlabeled).collect();
    let mut labels: Vec<Label> = ctx_users.iter().map(|&u| base.label(u)).collect();
    ctx_users.extend(base.n_users()..base.n_users() + n_inj);
    labels.extend(std::iter::repeat_n(Label::Normal, n_inj));
    let all_labels: Vec<Label> = (0..base.n_users())
        .map(|u| base.label(u))
        .chain(std::iter::repeat_n(Label::Normal, n_inj))
        .collect();
    let ctx = TrainingContext {
        mode: DetectorMode::GraphRfi,
        users: ctx_users,
        labels,
        prior: init_priors(&all_labels, 0.01, 0.2)?,
        lambda: setup.rec.lambda,
    };

    let mut history = Vec::new();
    for epoch in 0..cfg.epochs {
        let diverged = |message: String, last: &RatingTensor| AttackError::Diverged {
            epoch,
            message,
            last: Box::new(last.clone()),
        };
        let mut idx = relaxed_index(base, &tensor, cfg, &forced)?;
        let mut trajectory = Vec::with_capacity(cfg.k1);
        trajectory.push(model.rec.clone());
        for _ in 1..cfg.k1 {
            joint_train_step(&mut model, &idx, &ctx, cfg.lr_inner)
                .map_err(|e| diverged(e.to_string(), &tensor))?;
            trajectory.push(model.rec.clone());
        }
        for _ in 0..cfg.k2 {
            let (grad, loss) = meta_gradient(&idx, &trajectory, targets, &users)?;
            if !loss.is_finite() || !grad.is_finite() {
                return Err(diverged(format!("adversarial loss is {loss}"), &tensor));
            }
            history.push(loss);
            let mut next = tensor.values.clone();
            next.axpy(-cfg.lr_outer, &grad);
            project_normalize(&mut next, cfg.per_row_minmax);
            tensor.values = next;
            idx.set_relaxed_tensor(tensor.values.clone())?;
        }
        log::debug!("attack epoch {epoch}: adversarial loss {:.6}", history.last().unwrap_or(&f64::NAN));
    }

    let initial_adv_loss = final_loss(base, &initial, cfg, &forced, &model.rec, targets, &users)?;
    let final_adv_loss = final_loss(base, &tensor, cfg, &forced, &model.rec, targets, &users)?;
    let profiles = discretize(&tensor, cfg.budget, &forced)?;
    Ok(AttackOutcome {
        tensor,
        profiles,
        adv_history: history,
        initial_adv_loss,
        final_adv_loss,
    })
}
