use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{AttackConfig, AttackError, InjectedProfile};
use crate::graphdata::RatingGraph;
use crate::seeds::derive_seed;

fn mean_sd(xs: impl Iterator<Item = f64> + Clone) -> Option<(f64, f64)> {
    let n = xs.clone().count();
    if n == 0 {
        return None;
    }
    let mean = xs.clone().sum::<f64>() / n as f64;
    let var = xs.map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
    Some((mean, var.sqrt()))
}

fn draw(mean: f64, sd: f64, levels: u8, rng: &mut ChaCha8Rng) -> u8 {
    let x = Normal::new(mean, sd).expect("finite moments").sample(rng);
    x.clamp(1.0, f64::from(levels)).round() as u8
}

fn check(graph: &RatingGraph, targets: &[usize], cfg: &AttackConfig) -> Result<(), AttackError> {
    cfg.validate()?;
    if cfg.budget < targets.len() {
        return Err(AttackError::Config(format!(
            "budget {} cannot cover {} targets",
            cfg.budget,
            targets.len()
        )));
    }
    if targets.iter().any(|&t| t >= graph.n_items()) {
        return Err(AttackError::Config("target outside the item set".into()));
    }
    if graph.n_edges() == 0 {
        return Err(AttackError::Config("graph has no ratings".into()));
    }
    Ok(())
}

/// Shared shape of the heuristic attacks: targets at the top level, then
/// `popular` fixed items at the top level, then random fillers whose
/// ratings come from `rate`.
fn build(
    graph: &RatingGraph,
    targets: &[usize],
    ids: &[String],
    cfg: &AttackConfig,
    popular: &[usize],
    mut rate: impl FnMut(usize, &mut ChaCha8Rng) -> u8,
    rng: &mut ChaCha8Rng,
) -> Vec<InjectedProfile> {
    let top = graph.levels();
    let pool: Vec<usize> = (0..graph.n_items())
        .filter(|v| !targets.contains(v) && !popular.contains(v))
        .collect();
    let n_fill = cfg.budget - targets.len() - popular.len();
    ids.iter()
        .map(|id| {
            let mut ratings: Vec<(usize, u8)> =
                targets.iter().chain(popular).map(|&v| (v, top)).collect();
            let k = n_fill.min(pool.len());
            let picks = sample(rng, pool.len(), k).into_vec();
            for p in picks {
                let v = pool[p];
                ratings.push((v, rate(v, rng)));
            }
            ratings.sort_unstable();
            InjectedProfile {
                user_id: id.clone(),
                ratings,
            }
        })
        .collect()
}

/// Random fillers rated from the global rating distribution.
pub fn random_attack(
    graph: &RatingGraph,
    targets: &[usize],
    ids: &[String],
    cfg: &AttackConfig,
    seed: u64,
) -> Result<Vec<InjectedProfile>, AttackError> {
    check(graph, targets, cfg)?;
    let (mu, sd) = mean_sd(graph.edges().iter().map(|e| f64::from(e.rating))).expect("non-empty");
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "random-attack"));
    let levels = graph.levels();
    Ok(build(graph, targets, ids, cfg, &[], |_, r| draw(mu, sd, levels, r), &mut rng))
}

/// Random fillers rated from each filler item's own rating distribution.
pub fn average_attack(
    graph: &RatingGraph,
    targets: &[usize],
    ids: &[String],
    cfg: &AttackConfig,
    seed: u64,
) -> Result<Vec<InjectedProfile>, AttackError> {
    check(graph, targets, cfg)?;
    let global = mean_sd(graph.edges().iter().map(|e| f64::from(e.rating))).expect("non-empty");
    let by_item = graph.edges_by_item();
    let stats: Vec<(f64, f64)> = by_item
        .iter()
        .map(|ks| mean_sd(ks.iter().map(|&k| f64::from(graph.edges()[k].rating))).unwrap_or(global))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "average-attack"));
    let levels = graph.levels();
    Ok(build(
        graph,
        targets,
        ids,
        cfg,
        &[],
        |v, r| draw(stats[v].0, stats[v].1, levels, r),
        &mut rng,
    ))
}

/// Like the random attack, with a share of fillers spent on the most-rated
/// items at the top level.
pub fn popular_attack(
    graph: &RatingGraph,
    targets: &[usize],
    ids: &[String],
    cfg: &AttackConfig,
    seed: u64,
) -> Result<Vec<InjectedProfile>, AttackError> {
    check(graph, targets, cfg)?;
    let n_fill = cfg.budget - targets.len();
    let n_pop = (cfg.popular_share * n_fill as f64).round() as usize;
    let deg = graph.item_degrees();
    let mut order: Vec<usize> = (0..graph.n_items()).filter(|v| !targets.contains(v)).collect();
    order.sort_by(|&a, &b| deg[b].cmp(&deg[a]).then(a.cmp(&b)));
    order.truncate(n_pop);
    let (mu, sd) = mean_sd(graph.edges().iter().map(|e| f64::from(e.rating))).expect("non-empty");
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "popular-attack"));
    let levels = graph.levels();
    Ok(build(graph, targets, ids, cfg, &order, |_, r| draw(mu, sd, levels, r), &mut rng))
}
