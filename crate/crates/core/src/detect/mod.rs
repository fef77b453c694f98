//! Fraudster detection: the classifier head, prior and posterior tables,
//! the implicit-posterior loss, label adjustment and AUC.
//!
//! Class index 0 is "fake", 1 is "normal" throughout.

mod train;

pub use train::{
    adversarial_perturbation, adversarial_training_step, joint_gradients, joint_loss_value,
    joint_train_step, posterior,
    DetectorMode, JointModel, TrainingContext,
};

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::graphdata::Label;
use crate::numkernel::{KernelError, Tape, Tensor, Var};
use crate::recmodel::RecModelError;
use crate::seeds::derive_seed;

pub const FAKE: usize = 0;
pub const NORMAL: usize = 1;

#[derive(Debug, thiserror::Error)]
pub enum DetectError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("validation: {0}")]
    Validation(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Model(#[from] RecModelError),
    #[error("trajectory export: {0}")]
    Export(#[from] csv::Error),
}

/// Defense hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DefenseConfig {
    pub temperature: f64,
    pub p0: f64,
    pub p1: f64,
    pub a0: f64,
    pub alpha: f64,
    pub c1_init: f64,
    pub c2_init: f64,
    pub decay_step: f64,
    pub c1_floor: f64,
    pub c2_ceiling: f64,
    /// Priors are kept inside `[p_min, 1 − p_min]`.
    pub p_min: f64,
    pub hidden: usize,
    /// Share of labeled users per class held out for the detector AUC.
    pub holdout_frac: f64,
    /// Perturbation size for the adversarial-training baseline.
    pub noise_scale: f64,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        Self {
            temperature: 2.0,
            p0: 0.01,
            p1: 0.2,
            a0: 0.8,
            alpha: 0.05,
            c1_init: 0.4,
            c2_init: 0.85,
            decay_step: 0.025,
            c1_floor: 0.2,
            c2_ceiling: 1.0,
            p_min: 1e-3,
            hidden: 16,
            holdout_frac: 0.1,
            noise_scale: 0.05,
        }
    }
}

impl DefenseConfig {
    pub fn validate(&self) -> Result<(), DetectError> {
        let bad = |m: &str| Err(DetectError::Validation(m.to_string()));
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        if !(self.p0 > 0.0 && self.p0 < 0.5 && self.p1 > 0.0 && self.p1 < 0.5) {
            return bad("p0 and p1 must lie in (0, 0.5)");
        }
        if !(self.a0 > 0.5 && self.a0 < 1.0) {
            return bad("a0 must lie in (0.5, 1)");
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad("alpha must lie in (0, 1)");
        }
        if !(0.0 < self.c1_init && self.c1_init < self.c2_init && self.c2_init <= 1.0) {
            return bad("need 0 < c1 < c2 <= 1");
        }
        if !(self.c1_floor > 0.0 && self.c1_floor <= self.c1_init && self.c2_ceiling >= self.c2_init && self.c2_ceiling <= 1.0) {
            return bad("interval bounds must contain the initial interval");
        }
        if !(self.decay_step >= 0.0) || !(self.p_min > 0.0 && self.p_min < 0.5) {
            return bad("decay_step must be non-negative and p_min in (0, 0.5)");
        }
        if self.hidden == 0 || !(self.holdout_frac >= 0.0 && self.holdout_frac < 1.0) {
            return bad("hidden must be positive and holdout_frac in [0, 1)");
        }
        if !(self.noise_scale >= 0.0) {
            return bad("noise_scale must be non-negative");
        }
        Ok(())
    }
}

/// Two-layer classifier over refined user embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorParams {
    /// `d* × d_h`
    pub w1: Tensor,
    pub b1: Tensor,
    /// `d_h × 2`
    pub w2: Tensor,
    pub b2: Tensor,
    pub temperature: f64,
}

impl DetectorParams {
    pub fn init(input: usize, hidden: usize, temperature: f64, seed: u64) -> Self {
        assert!(input > 0 && hidden > 0 && temperature > 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "detector-init"));
        let mut glorot = |r: usize, c: usize| {
            use rand::Rng;
            let s = (6.0 / (r + c) as f64).sqrt();
            Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-s..=s)).collect())
                .expect("init shape")
        };
        let w1 = glorot(input, hidden);
        let w2 = glorot(hidden, 2);
        Self {
            w1,
            b1: Tensor::zeros(&[hidden]),
            w2,
            b2: Tensor::zeros(&[2]),
            temperature,
        }
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor); 4] {
        [("w1", &self.w1), ("b1", &self.b1), ("w2", &self.w2), ("b2", &self.b2)]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn to_tape(&self, tape: &mut Tape, trainable: bool) -> DetectorVars {
        let mut put = |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        DetectorVars {
            w1: put(&self.w1),
            b1: put(&self.b1),
            w2: put(&self.w2),
            b2: put(&self.b2),
            temperature: self.temperature,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DetectorVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub temperature: f64,
}

impl DetectorVars {
    pub fn all(&self) -> [Var; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

/// Per-user class probabilities `[fake, normal]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorTable(pub Vec<[f64; 2]>);

impl PosteriorTable {
    pub fn fake_scores(&self) -> Vec<f64> {
        self.0.iter().map(|q| q[FAKE]).collect()
    }

    pub fn normal_weights(&self) -> Vec<f64> {
        self.0.iter().map(|q| q[NORMAL]).collect()
    }

    pub fn validate(&self) -> Result<(), DetectError> {
        for q in &self.0 {
            if q.iter().any(|x| !(0.0..=1.0).contains(x)) || (q[0] + q[1] - 1.0).abs() > 1e-6 {
                return Err(DetectError::Contract(format!("invalid posterior {q:?}")));
            }
        }
        Ok(())
    }
}

/// Per-user prior label distribution `[p(fake), p(normal)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorTable(pub Vec<[f64; 2]>);

impl PriorTable {
    pub fn validate(&self) -> Result<(), DetectError> {
        for p in &self.0 {
            if p.iter().any(|&x| !(x > 0.0 && x < 1.0)) || (p[0] + p[1] - 1.0).abs() > 1e-9 {
                return Err(DetectError::Contract(format!("invalid prior {p:?}")));
            }
        }
        Ok(())
    }
}

/// Appends the mean and max prediction error to a user embedding.
pub fn refined_embedding(z_u: &[f64], errors: &[f64]) -> Vec<f64> {
    let (mean, max) = if errors.is_empty() {
        (0.0, 0.0)
    } else {
        (
            errors.iter().sum::<f64>() / errors.len() as f64,
            errors.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        )
    };
    let mut out = z_u.to_vec();
    out.extend([mean, max]);
    out
}

/// Logits of the classifier for each row of `z_star`.
pub fn logits_on_tape(tape: &mut Tape, z_star: Var, p: &DetectorVars) -> Result<Var, KernelError> {
    let h = tape.matmul(z_star, p.w1)?;
    let h = tape.add_row(h, p.b1)?;
    let h = tape.relu(h);
    let o = tape.matmul(h, p.w2)?;
    tape.add_row(o, p.b2)
}

/// Temperature-scaled class probabilities for each row of `z_star`.
pub fn detect_forward(z_star: &Tensor, params: &DetectorParams) -> Result<PosteriorTable, DetectError> {
    let mut tape = Tape::new();
    let p = params.to_tape(&mut tape, false);
    let z = tape.constant(z_star.clone());
    let logits = logits_on_tape(&mut tape, z, &p)?;
    let q = tape.softmax(logits, p.temperature)?;
    Ok(PosteriorTable(
        tape.value(q).data().chunks(2).map(|c| [c[0], c[1]]).collect(),
    ))
}

fn class_of(label: Label) -> Result<usize, DetectError> {
    match label {
        Label::Fake => Ok(FAKE),
        Label::Normal => Ok(NORMAL),
        Label::Unlabeled => Err(DetectError::Contract("unlabeled user in supervised loss".into())),
    }
}

/// Mean negative log-likelihood of the given labels.
pub fn supervised_ce_loss(q: &PosteriorTable, labels: &[Label]) -> Result<f64, DetectError> {
    if q.0.len() != labels.len() || labels.is_empty() {
        return Err(DetectError::Contract("label count mismatch".into()));
    }
    let mut total = 0.0;
    for (row, &l) in q.0.iter().zip(labels) {
        total -= row[class_of(l)?].ln();
    }
    Ok(total / labels.len() as f64)
}

/// Cross-entropy over `(user, label)` pairs given `n × 2` log-probabilities.
pub fn supervised_ce_on_tape(
    tape: &mut Tape,
    log_probs: Var,
    users: &[usize],
    labels: &[Label],
) -> Result<Var, DetectError> {
    if users.len() != labels.len() || users.is_empty() {
        return Err(DetectError::Contract("label count mismatch".into()));
    }
    let flat = users
        .iter()
        .zip(labels)
        .map(|(&u, &l)| Ok(u * 2 + class_of(l)?))
        .collect::<Result<Vec<_>, DetectError>>()?;
    let picked = tape.pick(log_probs, &flat)?;
    let s = tape.sum(picked);
    Ok(tape.scale(s, -1.0 / users.len() as f64))
}

/// Priors from observed labels; unlabeled users get the normal prior.
pub fn init_priors(observed: &[Label], p0: f64, p1: f64) -> Result<PriorTable, DetectError> {
    if !(p0 > 0.0 && p0 < 1.0 && p1 > 0.0 && p1 < 1.0) {
        return Err(DetectError::Contract(format!("priors ({p0}, {p1}) must lie in (0, 1)")));
    }
    Ok(PriorTable(
        observed
            .iter()
            .map(|l| match l {
                Label::Fake => [1.0 - p0, p0],
                _ => [p1, 1.0 - p1],
            })
            .collect(),
    ))
}

const SUM_FLOOR: f64 = 1e-12;

/// Implicit-posterior loss of a full posterior table against its priors.
pub fn ip_loss(q: &PosteriorTable, p: &PriorTable) -> Result<f64, DetectError> {
    if q.0.len() != p.0.len() {
        return Err(DetectError::Contract("posterior/prior length mismatch".into()));
    }
    if p.0.iter().flatten().any(|&x| !(x > 0.0)) {
        return Err(DetectError::Contract("prior entries must be positive".into()));
    }
    let mut sums = [0.0; 2];
    for row in &q.0 {
        sums[0] += row[0];
        sums[1] += row[1];
    }
    let sums = sums.map(|s| s.max(SUM_FLOOR));
    let mut total = 0.0;
    for (qr, pr) in q.0.iter().zip(&p.0) {
        for c in 0..2 {
            if qr[c] != 0.0 {
                total += qr[c] * (sums[c] / pr[c]).ln();
            }
        }
    }
    Ok(total)
}

/// Implicit-posterior loss over `users`, given `n × 2` probabilities.
///
/// Uses `Σ_u Σ_c q_uc·ln(S_c/p_uc) = Σ_c S_c·ln S_c − Σ_u Σ_c q_uc·ln p_uc`
/// with `S_c` the per-class posterior mass over `users`.
pub fn ip_loss_on_tape(
    tape: &mut Tape,
    probs: Var,
    users: &[usize],
    prior: &PriorTable,
) -> Result<Var, DetectError> {
    let mut log_p = Vec::with_capacity(users.len() * 2);
    for &u in users {
        let row = prior
            .0
            .get(u)
            .ok_or_else(|| DetectError::Contract(format!("no prior for user {u}")))?;
        if row.iter().any(|&x| !(x > 0.0)) {
            return Err(DetectError::Contract("prior entries must be positive".into()));
        }
        log_p.extend(row.iter().map(|x| x.ln()));
    }
    let q = tape.gather_rows(probs, users)?;
    let s = tape.sum_axis(q, 0)?;
    let s_floor = tape.clamp_min(s, SUM_FLOOR);
    let ln_s = tape.ln(s_floor)?;
    let a = tape.mul(s, ln_s)?;
    let a = tape.sum(a);
    let lp = tape.constant(Tensor::matrix(users.len(), 2, log_p)?);
    let b = tape.mul(q, lp)?;
    let b = tape.sum(b);
    Ok(tape.sub(a, b)?)
}

/// Moves priors toward confident posteriors outside `[c1, c2]`.
pub fn adjust_labels(
    p: &PriorTable,
    q: &PosteriorTable,
    cfg: &DefenseConfig,
    c1: f64,
    c2: f64,
) -> Result<PriorTable, DetectError> {
    if !(0.0 < c1 && c1 < c2 && c2 <= 1.0) {
        return Err(DetectError::Contract(format!("invalid interval ({c1}, {c2})")));
    }
    if p.0.len() != q.0.len() {
        return Err(DetectError::Contract("posterior/prior length mismatch".into()));
    }
    let a = cfg.alpha;
    Ok(PriorTable(
        p.0.iter()
            .zip(&q.0)
            .map(|(pr, qr)| {
                let (pf, qf) = (pr[FAKE], qr[FAKE]);
                let next = if qf < c1 {
                    (1.0 - a) * pf - a * (1.0 - qf)
                } else if qf > c2 {
                    (1.0 - a) * pf + a * qf
                } else {
                    return *pr;
                };
                let next = next.clamp(cfg.p_min, 1.0 - cfg.p_min);
                [next, 1.0 - next]
            })
            .collect(),
    ))
}

/// One step of the shrinking confidence band.
pub fn decay_interval(c1: f64, c2: f64, cfg: &DefenseConfig) -> (f64, f64) {
    (
        (c1 - cfg.decay_step).max(cfg.c1_floor),
        (c2 + cfg.decay_step).min(cfg.c2_ceiling),
    )
}

/// Probability that a random fake user outscores a random normal user,
/// ties counting one half.
pub fn auc(scores: &[f64], is_fake: &[bool]) -> Result<f64, DetectError> {
    if scores.len() != is_fake.len() {
        return Err(DetectError::Validation("score/label length mismatch".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(DetectError::Validation("NaN score".into()));
    }
    let n_fake = is_fake.iter().filter(|&&f| f).count();
    let n_norm = is_fake.len() - n_fake;
    if n_fake == 0 || n_norm == 0 {
        return Err(DetectError::Validation("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // count twice the wins so ties stay integral
    let mut doubled: u64 = 0;
    let mut normals_below: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let (f, n) = order[i..j].iter().fold((0u64, 0u64), |(f, n), &k| {
            if is_fake[k] {
                (f + 1, n)
            } else {
                (f, n + 1)
            }
        });
        doubled += f * (2 * normals_below + n);
        normals_below += n;
        i = j;
    }
    Ok(doubled as f64 / 2.0 / (n_fake as f64 * n_norm as f64))
}

/// One row of the anomaly-score trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub epoch: usize,
    pub user_id: String,
    pub user_type: String,
    pub q_fake: f64,
}

pub fn write_trajectory<W: Write>(rows: &[TrajectoryRow], writer: W) -> Result<(), DetectError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["epoch", "user_id", "user_type", "q_fake"])?;
    for r in rows {
        w.write_record([
            r.epoch.to_string(),
            r.user_id.clone(),
            r.user_type.clone(),
            format!("{:.6}", r.q_fake),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[cfg(test)]
mod tests;
