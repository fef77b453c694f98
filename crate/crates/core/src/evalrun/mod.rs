//! Metrics, user-type bookkeeping and the seeded experiment pipeline.

mod config;
mod pipeline;
mod report;

pub use config::{AttackKind, DataConfig, DataSource, DefenseKind, ExperimentConfig, TrainConfig};
pub use pipeline::{
    defended_graph, evaluate_defense, generate_attack, joint_from_checkpoint, joint_to_checkpoint,
    poisoned_graph, pre_attack, prepare_seed, run_experiment, run_seed, score_model, Evaluation,
    PreparedSeed, SeedRun,
};
pub use report::{
    aggregate, report_json, to_json_6, AggregateStat, ExperimentReport, HitRatios, HrSummary,
    SeedMetrics, SeedRecord, REPORT_SCHEMA,
};

use std::collections::{HashMap, HashSet};
use std::fmt;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::graphdata::{Label, RatingGraph};
use crate::numkernel::Tensor;
use crate::seeds::derive_seed;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("invalid experiment configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Graph(#[from] crate::graphdata::GraphError),
    #[error(transparent)]
    Model(#[from] crate::recmodel::RecModelError),
    #[error(transparent)]
    Detect(#[from] crate::detect::DetectError),
    #[error(transparent)]
    Attack(#[from] crate::attack::AttackError),
    #[error("no seed completed: {0}")]
    AllSeedsFailed(String),
}

/// Role of a user in a poisoned graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum UserType {
    /// Inherent normal user.
    I,
    /// Inherent fake user.
    II,
    /// Injected user labeled fake.
    III,
    /// Injected user labeled normal.
    IV,
}

impl UserType {
    pub const ALL: [UserType; 4] = [UserType::I, UserType::II, UserType::III, UserType::IV];

    pub fn as_str(self) -> &'static str {
        match self {
            UserType::I => "I",
            UserType::II => "II",
            UserType::III => "III",
            UserType::IV => "IV",
        }
    }

    pub fn observed_label(self) -> Label {
        match self {
            UserType::I | UserType::IV => Label::Normal,
            UserType::II | UserType::III => Label::Fake,
        }
    }
}

impl fmt::Display for UserType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Share of `users` whose top-`k` unrated items by predicted score include
/// `item`. Ties in score go to the lower item index.
pub fn hit_ratio(
    scores: &Tensor,
    rated: &[HashSet<usize>],
    users: &[usize],
    item: usize,
    k: usize,
) -> Result<f64, EvalError> {
    if k == 0 {
        return Err(EvalError::Config("k must be at least 1".into()));
    }
    if item >= scores.cols() {
        return Err(EvalError::Config(format!("item {item} outside the score matrix")));
    }
    if users.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for &u in users {
        if rated[u].contains(&item) {
            continue;
        }
        let row = scores.row(u);
        let s = row[item];
        let ahead = row
            .iter()
            .enumerate()
            .filter(|&(v, &x)| v != item && !rated[u].contains(&v) && (x > s || (x == s && v < item)))
            .count();
        if ahead < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / users.len() as f64)
}

/// Inherent users keep their dataset role; `round(τ·n)` of the injected
/// users (sampled under `seed`) are labeled fake, the rest normal.
pub fn assign_user_types(
    graph: &RatingGraph,
    injected: &[String],
    tau: f64,
    seed: u64,
) -> Result<HashMap<String, UserType>, EvalError> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(EvalError::Config(format!("tau {tau} outside [0, 1]")));
    }
    let inj: HashSet<&str> = injected.iter().map(String::as_str).collect();
    let mut out = HashMap::with_capacity(graph.n_users());
    for u in graph.users() {
        if !inj.contains(u.id.as_str()) {
            let t = if u.label == Label::Fake { UserType::II } else { UserType::I };
            out.insert(u.id.clone(), t);
        }
    }
    let n3 = (tau * injected.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "user-types"));
    let chosen: HashSet<usize> = sample(&mut rng, injected.len(), n3).into_iter().collect();
    for (k, id) in injected.iter().enumerate() {
        let t = if chosen.contains(&k) { UserType::III } else { UserType::IV };
        out.insert(id.clone(), t);
    }
    Ok(out)
}

/// The graph without its type III users.
pub fn remove_anomaly_defense(graph: &RatingGraph, types: &HashMap<String, UserType>) -> RatingGraph {
    let drop: HashSet<usize> = graph
        .users()
        .iter()
        .enumerate()
        .filter(|(_, u)| types.get(&u.id) == Some(&UserType::III))
        .map(|(k, _)| k)
        .collect();
    graph.without_users(&drop)
}
