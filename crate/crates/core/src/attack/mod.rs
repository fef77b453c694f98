//! Node-injection attacks: the meta-gradient attack over a relaxed rating
//! tensor and three heuristic baselines.

mod baselines;
mod metac;

pub use baselines::{average_attack, popular_attack, random_attack};
pub use metac::{
    adv_loss, adv_loss_on_tape, meta_gradient, metac_optimize, AttackOutcome, SurrogateSetup,
};
pub use crate::recmodel::RatingTensor;

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::graphdata::{GraphError, Label, RatingGraph};
use crate::numkernel::Tensor;
use crate::recmodel::RecModelError;
use crate::seeds::derive_seed;

#[derive(Debug, thiserror::Error)]
pub enum AttackError {
    #[error("invalid attack configuration: {0}")]
    Config(String),
    #[error("attack diverged at epoch {epoch}: {message}")]
    Diverged {
        epoch: usize,
        message: String,
        last: Box<RatingTensor>,
    },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Model(#[from] RecModelError),
    #[error(transparent)]
    Detect(#[from] crate::detect::DetectError),
    #[error(transparent)]
    Kernel(#[from] crate::numkernel::KernelError),
    #[error("profiles file: {0}")]
    Csv(#[from] csv::Error),
}

/// Attack hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    /// Injected users as a fraction of the original user count (rounded up).
    pub power: f64,
    /// Ratings per injected user.
    pub budget: usize,
    pub n_targets: usize,
    /// Surrogate parameter checkpoints per outer epoch.
    pub k1: usize,
    /// Tensor updates per outer epoch.
    pub k2: usize,
    pub epochs: usize,
    pub lr_inner: f64,
    pub lr_outer: f64,
    /// Rate targets at the top level before spending the rest of the budget.
    pub force_targets: bool,
    /// Min-max each `(user, item)` row instead of the whole tensor.
    pub per_row_minmax: bool,
    /// Restrict candidates to the target neighborhood above this item count.
    pub candidate_threshold: usize,
    pub candidate_hops: usize,
    /// Half-width of the uniform noise added to the initial tensor.
    pub init_noise: f64,
    /// Share of filler slots given to popular items by the popular attack.
    pub popular_share: f64,
    /// Start the surrogate from a given trained model instead of a fresh one.
    pub warm_start: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            power: 0.01,
            budget: 15,
            n_targets: 5,
            k1: 100,
            k2: 1,
            epochs: 50,
            lr_inner: 0.01,
            lr_outer: 1e-5,
            force_targets: false,
            per_row_minmax: false,
            candidate_threshold: 500,
            candidate_hops: 2,
            init_noise: 0.01,
            popular_share: 0.3,
            warm_start: true,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<(), AttackError> {
        let bad = |m: &str| Err(AttackError::Config(m.to_string()));
        if !(self.power > 0.0 && self.power.is_finite()) {
            return bad("power must be positive");
        }
        if self.budget == 0 || self.k1 == 0 || self.k2 == 0 {
            return bad("budget, k1 and k2 must be at least 1");
        }
        if !(self.lr_inner >= 0.0 && self.lr_outer >= 0.0) {
            return bad("learning rates must be non-negative");
        }
        if !(0.0..=0.5).contains(&self.init_noise) || !(0.0..=1.0).contains(&self.popular_share) {
            return bad("init_noise must lie in [0, 0.5] and popular_share in [0, 1]");
        }
        if self.candidate_hops < 2 {
            return bad("candidate_hops must be at least 2");
        }
        Ok(())
    }

    /// Number of injected users for a graph with `n_users` users.
    pub fn n_injected(&self, n_users: usize) -> usize {
        ((self.power * n_users as f64 - 1e-9).ceil() as usize).max(1)
    }
}

/// One injected user's ratings as `(item index, rating)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectedProfile {
    pub user_id: String,
    pub ratings: Vec<(usize, u8)>,
}

/// Fresh ids for `n` injected users that do not clash with `graph`.
pub fn injected_ids(graph: &RatingGraph, n: usize) -> Vec<String> {
    let mut prefix = String::from("inj_");
    while (0..n).any(|k| graph.user_index(&format!("{prefix}{k:04}")).is_some()) {
        prefix.push('x');
    }
    (0..n).map(|k| format!("{prefix}{k:04}")).collect()
}

/// Initial tensor: uniform rows plus seeded noise, renormalized.
pub fn init_tensor(
    injected: Vec<String>,
    candidates: Vec<usize>,
    levels: u8,
    noise: f64,
    seed: u64,
) -> Result<RatingTensor, AttackError> {
    if injected.is_empty() || candidates.is_empty() || levels == 0 {
        return Err(AttackError::Config("empty rating tensor".into()));
    }
    if !(0.0..=0.5).contains(&noise) {
        return Err(AttackError::Config("init noise must lie in [0, 0.5]".into()));
    }
    let l = usize::from(levels);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "attack-init"));
    let base = 1.0 / l as f64;
    let mut data = Vec::with_capacity(injected.len() * candidates.len() * l);
    for _ in 0..injected.len() * candidates.len() {
        let row: Vec<f64> = (0..l)
            .map(|_| (base + noise * rng.random_range(-1.0..=1.0)).clamp(0.0, 1.0))
            .collect();
        let s: f64 = row.iter().sum();
        data.extend(row.iter().map(|x| x / s));
    }
    Ok(RatingTensor {
        values: Tensor::new(vec![injected.len(), candidates.len(), l], data)?,
        candidates,
        injected,
    })
}

/// Clip, min-max rescale and row-normalize in place. Flat inputs (and rows
/// left with zero mass) become uniform.
pub fn project_normalize(values: &mut Tensor, per_row: bool) {
    let l = *values.shape().last().expect("rank-3 tensor");
    let data = values.data_mut();
    for x in data.iter_mut() {
        *x = if x.is_nan() { 0.0 } else { x.clamp(0.0, 1.0) };
    }
    let rescale = |xs: &mut [f64]| {
        let (lo, hi) = xs
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
        if hi > lo {
            let span = hi - lo;
            xs.iter_mut().for_each(|x| *x = (*x - lo) / span);
            true
        } else {
            false
        }
    };
    if per_row {
        for row in data.chunks_mut(l) {
            if !rescale(row) {
                row.fill(1.0 / l as f64);
            }
        }
    } else if !rescale(data) {
        data.fill(1.0 / l as f64);
        return;
    }
    for row in data.chunks_mut(l) {
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            row.iter_mut().for_each(|x| *x /= s);
        } else {
            row.fill(1.0 / l as f64);
        }
    }
}

/// Most likely level and its probability for every `(user, candidate)`,
/// then the `budget` most confident items per user. With `forced`, those
/// items are rated at the top level first and count against the budget.
pub fn discretize(
    tensor: &RatingTensor,
    budget: usize,
    forced: &[usize],
) -> Result<Vec<InjectedProfile>, AttackError> {
    if budget == 0 {
        return Err(AttackError::Config("budget must be at least 1".into()));
    }
    let l = tensor.levels();
    let top = u8::try_from(l).map_err(|_| AttackError::Config("too many levels".into()))?;
    let mut out = Vec::with_capacity(tensor.n_users());
    if tensor.n_candidates() < budget {
        log::warn!(
            "only {} candidate items for a budget of {budget}; using all",
            tensor.n_candidates()
        );
    }
    for (u, id) in tensor.injected.iter().enumerate() {
        let mut ratings: Vec<(usize, u8)> = forced.iter().take(budget).map(|&v| (v, top)).collect();
        let mut scored: Vec<(usize, u8, f64)> = (0..tensor.n_candidates())
            .filter(|&c| !forced.contains(&tensor.candidates[c]))
            .map(|c| {
                let row = tensor.row(u, c);
                let (best, p) = row
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |acc, (k, &x)| if x > acc.1 { (k, x) } else { acc });
                (tensor.candidates[c], best as u8 + 1, p)
            })
            .collect();
        scored.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
        let room = budget.saturating_sub(ratings.len());
        ratings.extend(scored.into_iter().take(room).map(|(v, r, _)| (v, r)));
        ratings.sort_unstable();
        out.push(InjectedProfile {
            user_id: id.clone(),
            ratings,
        });
    }
    Ok(out)
}

/// Base graph with injected users appended under the given labels.
pub fn poison(
    base: &RatingGraph,
    profiles: &[InjectedProfile],
    labels: &[Label],
) -> Result<RatingGraph, AttackError> {
    if labels.len() != profiles.len() {
        return Err(AttackError::Config("one label per injected profile required".into()));
    }
    Ok(base.with_users(
        profiles
            .iter()
            .zip(labels)
            .map(|(p, &l)| (p.user_id.as_str(), l, p.ratings.as_slice())),
    )?)
}

pub const PROFILE_HEADER: [&str; 3] = ["fake_user_id", "item_id", "rating"];

pub fn write_profiles<W: Write>(
    graph: &RatingGraph,
    profiles: &[InjectedProfile],
    writer: W,
) -> Result<(), AttackError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(PROFILE_HEADER)?;
    for p in profiles {
        for &(v, r) in &p.ratings {
            w.write_record([p.user_id.as_str(), graph.items()[v].as_str(), &r.to_string()])?;
        }
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Reads profiles against the items of `graph`, keeping first-seen user order.
pub fn read_profiles<R: Read>(graph: &RatingGraph, reader: R) -> Result<Vec<InjectedProfile>, AttackError> {
    let mut r = csv::Reader::from_reader(reader);
    let header = r.headers()?.clone();
    if header.iter().ne(PROFILE_HEADER) {
        return Err(GraphError::Parse {
            line: 1,
            message: format!("expected header {}", PROFILE_HEADER.join(",")),
        }
        .into());
    }
    let mut out: Vec<InjectedProfile> = Vec::new();
    for (k, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = k as u64 + 2;
        let parse_err = |m: String| AttackError::Graph(GraphError::Parse { line, message: m });
        if rec.len() != 3 {
            return Err(parse_err("expected 3 fields".into()));
        }
        let item = graph
            .item_index(&rec[1])
            .ok_or_else(|| parse_err(format!("unknown item {}", &rec[1])))?;
        let rating: u8 = rec[2]
            .parse()
            .ok()
            .filter(|r| (1..=graph.levels()).contains(r))
            .ok_or_else(|| parse_err(format!("bad rating {}", &rec[2])))?;
        match out.iter_mut().find(|p| p.user_id == rec[0]) {
            Some(p) => {
                if p.ratings.iter().any(|&(v, _)| v == item) {
                    return Err(parse_err(format!("{} rates {} twice", &rec[0], &rec[1])));
                }
                p.ratings.push((item, rating));
            }
            None => out.push(InjectedProfile {
                user_id: rec[0].to_string(),
                ratings: vec![(item, rating)],
            }),
        }
    }
    for p in &mut out {
        p.ratings.sort_unstable();
    }
    Ok(out)
}
