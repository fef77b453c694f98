use std::collections::{BTreeMap, HashMap, HashSet};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::{AttackKind, DataSource, DefenseKind, ExperimentConfig};
use super::report::{ExperimentReport, HitRatios, SeedMetrics, SeedRecord};
use super::{assign_user_types, hit_ratio, remove_anomaly_defense, EvalError, UserType};
use crate::attack::{
    average_attack, injected_ids, metac_optimize, poison, popular_attack, random_attack,
    InjectedProfile, SurrogateSetup,
};
use crate::detect::{
    adjust_labels, adversarial_training_step, auc, decay_interval, init_priors, joint_train_step,
    posterior, DetectorMode, DetectorParams, JointModel, TrainingContext, TrajectoryRow,
};
use crate::graphdata::{
    load_csv, prune_min_degree, split, synthesize, HeldOut, Label, RatingGraph, N_USER_FEATURES,
};
use crate::numkernel::Tensor;
use crate::recmodel::{predict_all, Checkpoint, GraphIndex, RecModelError};
use crate::seeds::derive_seed;

/// Clean training data, targets and detector holdout for one seed.
#[derive(Debug, Clone)]
pub struct PreparedSeed {
    pub seed: u64,
    /// Training split of the pruned graph.
    pub graph: RatingGraph,
    pub test: Vec<HeldOut>,
    pub targets: Vec<usize>,
    /// Inherent labeled users kept out of the detector loss to measure AUC.
    pub holdout: HashSet<String>,
}

/// Outcome of training one model and scoring it.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub hit_ratios: Vec<HitRatios>,
    pub rmse: f64,
    pub auc: Vec<Option<f64>>,
    pub type_scores: Vec<BTreeMap<UserType, f64>>,
    pub adjust_from_epoch: Option<usize>,
    pub trajectory: Vec<TrajectoryRow>,
    pub model: JointModel,
    /// The graph the model was trained on.
    pub graph: RatingGraph,
}

/// Everything one seed produced.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub record: SeedRecord,
    pub profiles: Vec<InjectedProfile>,
    pub evaluation: Evaluation,
}

fn load_graph(cfg: &ExperimentConfig, seed: u64) -> Result<RatingGraph, EvalError> {
    match cfg.data.source {
        DataSource::Synthetic => {
            let mut spec = cfg.data.synthetic.clone();
            if cfg.data.reseed_synthetic {
                spec.seed = seed;
            }
            Ok(synthesize(&spec)?)
        }
        DataSource::Csv => {
            let path = cfg.data.path.as_deref().ok_or_else(|| EvalError::Config("data.path missing".into()))?;
            Ok(load_csv(path, cfg.data.levels)?.graph)
        }
    }
}

fn pick_targets(graph: &RatingGraph, n: usize, median_filter: bool, seed: u64) -> Result<Vec<usize>, EvalError> {
    let deg = graph.item_degrees();
    let eligible: Vec<usize> = if median_filter {
        let mut sorted = deg.clone();
        sorted.sort_unstable();
        let median = sorted.get(sorted.len() / 2).copied().unwrap_or(0);
        (0..graph.n_items()).filter(|&v| deg[v] >= median).collect()
    } else {
        (0..graph.n_items()).collect()
    };
    if eligible.len() < n {
        return Err(EvalError::Config(format!(
            "{} eligible target items, {n} requested",
            eligible.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "targets"));
    let mut out: Vec<usize> = sample(&mut rng, eligible.len(), n).into_iter().map(|k| eligible[k]).collect();
    out.sort_unstable();
    Ok(out)
}

fn pick_holdout(graph: &RatingGraph, frac: f64, seed: u64) -> HashSet<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "holdout"));
    let mut out = HashSet::new();
    if frac <= 0.0 {
        return out;
    }
    for class in [Label::Normal, Label::Fake] {
        let members: Vec<usize> = (0..graph.n_users()).filter(|&u| graph.label(u) == class).collect();
        if members.len() < 2 {
            continue;
        }
        let n = ((frac * members.len() as f64).round() as usize).clamp(1, members.len() - 1);
        for k in sample(&mut rng, members.len(), n) {
            out.insert(graph.users()[members[k]].id.clone());
        }
    }
    out
}

/// Loads or generates the graph, prunes, splits and draws targets.
pub fn prepare_seed(cfg: &ExperimentConfig, seed: u64) -> Result<PreparedSeed, EvalError> {
    let raw = load_graph(cfg, seed)?;
    let pruned = prune_min_degree(&raw, cfg.data.min_degree);
    if pruned.is_empty() {
        return Err(EvalError::Config("pruning removed every rating".into()));
    }
    let ds = split(&pruned, cfg.data.test_frac, seed)?;
    let targets = pick_targets(&ds.train, cfg.injection.n_targets, cfg.data.median_targets, seed)?;
    let holdout = pick_holdout(&ds.train, cfg.detector.holdout_frac, seed);
    Ok(PreparedSeed {
        seed,
        graph: ds.train,
        test: ds.test,
        targets,
        holdout,
    })
}

fn mode_of(defense: DefenseKind) -> DetectorMode {
    match defense {
        DefenseKind::Pdr => DetectorMode::Pdr,
        _ => DetectorMode::GraphRfi,
    }
}

fn type_of(types: &HashMap<String, UserType>, id: &str) -> UserType {
    *types.get(id).expect("every user has a type")
}

fn score_auc(q_fake: &[f64], graph: &RatingGraph, users: &[usize]) -> Option<f64> {
    let scores: Vec<f64> = users.iter().map(|&u| q_fake[u]).collect();
    let fake: Vec<bool> = users.iter().map(|&u| graph.label(u) == Label::Fake).collect();
    auc(&scores, &fake).ok()
}

/// Trains the joint model on `graph` under `defense` and scores it.
fn train_and_score(
    prepared: &PreparedSeed,
    cfg: &ExperimentConfig,
    graph: RatingGraph,
    types: &HashMap<String, UserType>,
) -> Result<Evaluation, EvalError> {
    let defense = cfg.defense;
    let graph = defended_graph(cfg, graph, types);
    let mode = mode_of(defense);
    let det_cfg = &cfg.detector;
    let temperature = if mode == DetectorMode::Pdr { det_cfg.temperature } else { 1.0 };
    let mut model = JointModel::init(
        graph.n_items(),
        N_USER_FEATURES,
        graph.levels(),
        &cfg.rec,
        det_cfg.hidden,
        temperature,
        derive_seed(prepared.seed, "model"),
    );
    let idx = GraphIndex::new(&graph);
    let held: Vec<usize> = (0..graph.n_users())
        .filter(|&u| prepared.holdout.contains(&graph.users()[u].id))
        .collect();
    let ctx_users: Vec<usize> = (0..graph.n_users())
        .filter(|&u| graph.label(u) != Label::Unlabeled && !prepared.holdout.contains(&graph.users()[u].id))
        .collect();
    let all_labels: Vec<Label> = (0..graph.n_users()).map(|u| graph.label(u)).collect();
    let mut ctx = TrainingContext {
        mode,
        labels: ctx_users.iter().map(|&u| all_labels[u]).collect(),
        users: ctx_users,
        prior: init_priors(&all_labels, det_cfg.p0, det_cfg.p1)?,
        lambda: cfg.rec.lambda,
    };

    let (mut c1, mut c2) = (det_cfg.c1_init, det_cfg.c2_init);
    let mut adjust_from = None;
    let mut auc_curve = Vec::with_capacity(cfg.train.epochs);
    let mut type_scores = Vec::with_capacity(cfg.train.epochs);
    let mut trajectory = Vec::with_capacity(cfg.train.epochs * graph.n_users());
    let user_types: Vec<UserType> = graph.users().iter().map(|u| type_of(types, &u.id)).collect();
    for epoch in 1..=cfg.train.epochs {
        for _ in 0..cfg.train.steps_per_epoch {
            if defense == DefenseKind::AdvTraining {
                adversarial_training_step(&mut model, &idx, &ctx, cfg.rec.lr, det_cfg.noise_scale)?;
            } else {
                joint_train_step(&mut model, &idx, &ctx, cfg.rec.lr)?;
            }
        }
        let q = posterior(&model, &idx)?;
        let q_fake = q.fake_scores();
        let a = if held.is_empty() {
            score_auc(&q_fake, &graph, &ctx.users)
        } else {
            score_auc(&q_fake, &graph, &held).or_else(|| score_auc(&q_fake, &graph, &ctx.users))
        };
        auc_curve.push(a);
        let mut sums: BTreeMap<UserType, (f64, usize)> = BTreeMap::new();
        for (u, user) in graph.users().iter().enumerate() {
            let e = sums.entry(user_types[u]).or_default();
            e.0 += q_fake[u];
            e.1 += 1;
            trajectory.push(TrajectoryRow {
                epoch,
                user_id: user.id.clone(),
                user_type: user_types[u].to_string(),
                q_fake: q_fake[u],
            });
        }
        type_scores.push(sums.into_iter().map(|(t, (s, n))| (t, s / n as f64)).collect());
        if mode == DetectorMode::Pdr {
            if adjust_from.is_none() && a.is_some_and(|a| a >= det_cfg.a0) {
                adjust_from = Some(epoch);
            }
            if adjust_from.is_some() {
                ctx.prior = adjust_labels(&ctx.prior, &q, det_cfg, c1, c2)?;
                (c1, c2) = decay_interval(c1, c2, det_cfg);
            }
        }
        log::debug!("seed {} epoch {epoch}: auc {a:?}", prepared.seed);
    }

    let (hit_ratios, rmse) = score_model(prepared, cfg, &graph, types, &model)?;
    Ok(Evaluation {
        hit_ratios,
        rmse,
        auc: auc_curve,
        type_scores,
        adjust_from_epoch: adjust_from,
        trajectory,
        model,
        graph,
    })
}

/// Hit ratios of the prepared targets over type I users, and test RMSE,
/// for a model trained on `graph`.
pub fn score_model(
    prepared: &PreparedSeed,
    cfg: &ExperimentConfig,
    graph: &RatingGraph,
    types: &HashMap<String, UserType>,
    model: &JointModel,
) -> Result<(Vec<HitRatios>, f64), EvalError> {
    let idx = GraphIndex::new(graph);
    let scores = predict_all(&idx, &model.rec)?;
    let rated = graph.rated_items();
    let audience: Vec<usize> = (0..graph.n_users())
        .filter(|&u| types.get(&graph.users()[u].id) == Some(&UserType::I))
        .collect();
    let mut hit_ratios = Vec::with_capacity(cfg.hr_k.len());
    for &k in &cfg.hr_k {
        let per_target = prepared
            .targets
            .iter()
            .map(|&t| hit_ratio(&scores, &rated, &audience, t, k))
            .collect::<Result<Vec<_>, _>>()?;
        hit_ratios.push(HitRatios::new(k, per_target));
    }
    let rmse = test_rmse(prepared, graph, &scores)?;
    Ok((hit_ratios, rmse))
}

fn test_rmse(prepared: &PreparedSeed, graph: &RatingGraph, scores: &Tensor) -> Result<f64, EvalError> {
    if prepared.test.is_empty() {
        return Ok(f64::NAN);
    }
    let mut sq = 0.0;
    for h in &prepared.test {
        let uid = &prepared.graph.users()[h.user].id;
        let vid = &prepared.graph.items()[h.item];
        let (Some(u), Some(v)) = (graph.user_index(uid), graph.item_index(vid)) else {
            return Err(EvalError::Config(format!("test pair ({uid}, {vid}) missing from trained graph")));
        };
        sq += (scores.get2(u, v) - f64::from(h.rating)).powi(2);
    }
    Ok((sq / prepared.test.len() as f64).sqrt())
}

/// Clean model trained under the configured defense.
pub fn pre_attack(prepared: &PreparedSeed, cfg: &ExperimentConfig) -> Result<Evaluation, EvalError> {
    let types = assign_user_types(&prepared.graph, &[], cfg.tau, prepared.seed)?;
    train_and_score(prepared, cfg, prepared.graph.clone(), &types)
}

/// Injected profiles under the configured attack, plus the attacker's
/// adversarial-loss history when it has one.
pub fn generate_attack(
    prepared: &PreparedSeed,
    cfg: &ExperimentConfig,
    clean: Option<&JointModel>,
) -> Result<(Vec<InjectedProfile>, Vec<f64>), EvalError> {
    let graph = &prepared.graph;
    let icfg = &cfg.injection;
    let seed = derive_seed(prepared.seed, "attack");
    let ids = injected_ids(graph, icfg.n_injected(graph.n_users()));
    let targets = &prepared.targets;
    let profiles = match cfg.attack {
        AttackKind::None => return Ok((Vec::new(), Vec::new())),
        AttackKind::Random => random_attack(graph, targets, &ids, icfg, seed)?,
        AttackKind::Average => average_attack(graph, targets, &ids, icfg, seed)?,
        AttackKind::Popular => popular_attack(graph, targets, &ids, icfg, seed)?,
        AttackKind::Metac => {
            let setup = SurrogateSetup {
                graph,
                targets,
                rec: &cfg.rec,
                detector_hidden: cfg.detector.hidden,
                warm: clean,
            };
            let out = metac_optimize(setup, icfg, seed)?;
            return Ok((out.profiles, out.adv_history));
        }
    };
    Ok((profiles, Vec::new()))
}

/// The poisoned training graph and the type of every user in it, before
/// any defense filtering.
pub fn poisoned_graph(
    prepared: &PreparedSeed,
    cfg: &ExperimentConfig,
    profiles: &[InjectedProfile],
) -> Result<(RatingGraph, HashMap<String, UserType>), EvalError> {
    let ids: Vec<String> = profiles.iter().map(|p| p.user_id.clone()).collect();
    let mut types = assign_user_types(&prepared.graph, &[], cfg.tau, prepared.seed)?;
    let inj_types = assign_user_types(&prepared.graph, &ids, cfg.tau, prepared.seed)?;
    let labels: Vec<Label> = ids.iter().map(|id| inj_types[id].observed_label()).collect();
    let poisoned = poison(&prepared.graph, profiles, &labels)?;
    types.extend(ids.iter().map(|id| (id.clone(), inj_types[id])));
    Ok((poisoned, types))
}

/// The graph a model is trained on under the configured defense.
pub fn defended_graph(
    cfg: &ExperimentConfig,
    graph: RatingGraph,
    types: &HashMap<String, UserType>,
) -> RatingGraph {
    if cfg.defense == DefenseKind::RemoveAnomaly {
        remove_anomaly_defense(&graph, types)
    } else {
        graph
    }
}

/// Poisons the clean graph, labels injected users per `tau` and retrains
/// under the configured defense.
pub fn evaluate_defense(
    prepared: &PreparedSeed,
    cfg: &ExperimentConfig,
    profiles: &[InjectedProfile],
) -> Result<Evaluation, EvalError> {
    let (poisoned, types) = poisoned_graph(prepared, cfg, profiles)?;
    train_and_score(prepared, cfg, poisoned, &types)
}

/// The full pipeline for one seed.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedRun, EvalError> {
    let prepared = prepare_seed(cfg, seed)?;
    let pre = pre_attack(&prepared, cfg)?;
    let clean = cfg.injection.warm_start.then_some(&pre.model);
    let (profiles, adv_loss) = generate_attack(&prepared, cfg, clean)?;
    let post = evaluate_defense(&prepared, cfg, &profiles)?;
    let metrics = SeedMetrics {
        targets: prepared.targets.iter().map(|&t| prepared.graph.items()[t].clone()).collect(),
        n_injected: profiles.len(),
        pre_attack: pre.hit_ratios,
        post_attack: post.hit_ratios.clone(),
        rmse_pre_attack: pre.rmse,
        rmse: post.rmse,
        auc: post.auc.clone(),
        type_scores: post.type_scores.clone(),
        adjust_from_epoch: post.adjust_from_epoch,
        adv_loss,
    };
    Ok(SeedRun {
        seed,
        record: SeedRecord {
            seed,
            error: None,
            metrics: Some(metrics),
        },
        profiles,
        evaluation: post,
    })
}

/// Runs every seed (in parallel on the current rayon pool) and aggregates.
/// Failed seeds are recorded; the report is produced if any seed succeeds.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<(ExperimentReport, Vec<SeedRun>), EvalError> {
    cfg.validate()?;
    let results: Vec<(u64, Result<SeedRun, EvalError>)> =
        cfg.seeds.par_iter().map(|&s| (s, run_seed(cfg, s))).collect();
    let mut records = Vec::with_capacity(results.len());
    let mut runs = Vec::new();
    let mut errors = Vec::new();
    for (seed, r) in results {
        match r {
            Ok(run) => {
                records.push(run.record.clone());
                runs.push(run);
            }
            Err(e) => {
                log::error!("seed {seed} failed: {e}");
                errors.push(format!("seed {seed}: {e}"));
                records.push(SeedRecord {
                    seed,
                    error: Some(e.to_string()),
                    metrics: None,
                });
            }
        }
    }
    if runs.is_empty() {
        return Err(EvalError::AllSeedsFailed(errors.join("; ")));
    }
    let report = ExperimentReport::build(cfg.attack, cfg.defense, cfg.tau, &cfg.hr_k, records);
    Ok((report, runs))
}

/// Recommender and detector tensors in one checkpoint.
pub fn joint_to_checkpoint(model: &JointModel) -> Checkpoint {
    let mut c = Checkpoint::default();
    c.insert_rec(&model.rec);
    for (name, t) in model.det.tensors() {
        c.insert(format!("det.{name}"), t);
    }
    c.insert("det.temperature", &Tensor::scalar(model.det.temperature));
    c
}

pub fn joint_from_checkpoint(c: &Checkpoint) -> Result<JointModel, RecModelError> {
    let rec = c.rec()?;
    let det = DetectorParams {
        w1: c.get("det.w1")?,
        b1: c.get("det.b1")?,
        w2: c.get("det.w2")?,
        b2: c.get("det.b2")?,
        temperature: c.get("det.temperature")?.item(),
    };
    let d = rec.dim();
    if det.w1.rows() != d + 2 || det.w2.rows() != det.w1.cols() || det.w2.cols() != 2 {
        return Err(RecModelError::Checkpoint("detector shapes do not match the recommender".into()));
    }
    if !(det.temperature > 0.0) {
        return Err(RecModelError::Checkpoint("detector temperature must be positive".into()));
    }
    Ok(JointModel { rec, det })
}
