//! Rating graphs: CSV ingestion, degree pruning, train/test splits,
//! synthetic generation, user behavior features and candidate selection.

mod graph;
mod synth;

pub use graph::{Edge, GraphBuilder, Label, RatingGraph, UserRecord, DEFAULT_LEVELS};
pub use synth::{synthesize, SyntheticSpec};

use std::collections::{BTreeSet, VecDeque};
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::numkernel::Tensor;
use crate::seeds::derive_seed;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("invalid graph data: {0}")]
    Validation(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub const CSV_HEADER: [&str; 4] = ["user_id", "item_id", "rating", "label"];

/// Parsed edge file plus how many duplicate rows were overwritten.
#[derive(Debug, Clone)]
pub struct LoadedGraph {
    pub graph: RatingGraph,
    pub duplicate_rows: usize,
}

pub fn load_csv(path: impl AsRef<Path>, levels: u8) -> Result<LoadedGraph, GraphError> {
    let file = std::fs::File::open(path)?;
    read_csv(file, levels)
}

/// Reads `user_id,item_id,rating,label` rows. Later duplicates of a
/// `(user, item)` pair win.
pub fn read_csv<R: Read>(reader: R, levels: u8) -> Result<LoadedGraph, GraphError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| GraphError::Parse { line: 1, message: e.to_string() })?
        .clone();
    if headers.iter().collect::<Vec<_>>() != CSV_HEADER {
        return Err(GraphError::Parse {
            line: 1,
            message: format!("expected header {}", CSV_HEADER.join(",")),
        });
    }
    let mut builder = RatingGraph::builder(levels);
    for record in rdr.records() {
        let record = record.map_err(|e| GraphError::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let parse_err = |message: String| GraphError::Parse { line, message };
        if record.len() != 4 {
            return Err(parse_err(format!("expected 4 fields, found {}", record.len())));
        }
        let rating: i64 = record[2]
            .parse()
            .map_err(|_| parse_err(format!("rating {:?} is not an integer", &record[2])))?;
        if rating < 1 || rating > i64::from(levels) {
            return Err(GraphError::Validation(format!(
                "line {line}: rating {rating} outside 1..={levels}"
            )));
        }
        let label = Label::parse(&record[3])
            .filter(|l| *l != Label::Unlabeled)
            .ok_or_else(|| parse_err(format!("unknown label {:?}", &record[3])))?;
        builder
            .rating(&record[0], label, &record[1], rating as u8)
            .map_err(|e| match e {
                GraphError::Validation(m) => GraphError::Validation(format!("line {line}: {m}")),
                other => other,
            })?;
    }
    let duplicate_rows = builder.duplicates();
    if duplicate_rows > 0 {
        log::warn!("{duplicate_rows} duplicate (user, item) rows; last occurrence kept");
    }
    Ok(LoadedGraph {
        graph: builder.build(),
        duplicate_rows,
    })
}

/// Writes the edge list in the loader's format. Users without edges are
/// not representable and are skipped.
pub fn write_csv<W: Write>(graph: &RatingGraph, writer: W) -> Result<(), GraphError> {
    let mut w = csv::Writer::from_writer(writer);
    let to_io = |e: csv::Error| GraphError::Io(std::io::Error::other(e));
    w.write_record(CSV_HEADER).map_err(to_io)?;
    for e in graph.edges() {
        let u = &graph.users()[e.user];
        let label = match u.label {
            Label::Fake => "fake",
            _ => "normal",
        };
        w.write_record([u.id.as_str(), graph.items()[e.item].as_str(), &e.rating.to_string(), label])
            .map_err(to_io)?;
    }
    w.flush()?;
    Ok(())
}

/// Iteratively drops users and items with fewer than `min_records` edges
/// until every survivor meets the bound.
pub fn prune_min_degree(graph: &RatingGraph, min_records: usize) -> RatingGraph {
    let mut user_deg = graph.user_degrees();
    let mut item_deg = graph.item_degrees();
    let by_user = graph.edges_by_user();
    let by_item = graph.edges_by_item();
    let mut user_alive = vec![true; graph.n_users()];
    let mut item_alive = vec![true; graph.n_items()];
    let mut edge_alive = vec![true; graph.n_edges()];
    // (is_user, index)
    let mut queue: VecDeque<(bool, usize)> = VecDeque::new();
    for (u, &d) in user_deg.iter().enumerate() {
        if d < min_records {
            queue.push_back((true, u));
        }
    }
    for (i, &d) in item_deg.iter().enumerate() {
        if d < min_records {
            queue.push_back((false, i));
        }
    }
    while let Some((is_user, idx)) = queue.pop_front() {
        let (alive, incident) = if is_user {
            (&mut user_alive[idx], &by_user[idx])
        } else {
            (&mut item_alive[idx], &by_item[idx])
        };
        if !*alive {
            continue;
        }
        *alive = false;
        for &k in incident {
            if !edge_alive[k] {
                continue;
            }
            edge_alive[k] = false;
            let e = graph.edges()[k];
            if is_user {
                item_deg[e.item] -= 1;
                if item_alive[e.item] && item_deg[e.item] < min_records {
                    queue.push_back((false, e.item));
                }
            } else {
                user_deg[e.user] -= 1;
                if user_alive[e.user] && user_deg[e.user] < min_records {
                    queue.push_back((true, e.user));
                }
            }
        }
    }
    graph.restrict(&user_alive, &item_alive)
}

/// A held-out rating, indexed against [`DatasetSplit::train`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeldOut {
    pub user: usize,
    pub item: usize,
    pub rating: u8,
}

#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: RatingGraph,
    pub test: Vec<HeldOut>,
}

/// Holds out `round(test_frac · n)` uniformly chosen ratings among the `n`
/// ratings given by normal-labeled users.
pub fn split(graph: &RatingGraph, test_frac: f64, seed: u64) -> Result<DatasetSplit, GraphError> {
    if !(test_frac > 0.0 && test_frac < 1.0) {
        return Err(GraphError::Validation(format!(
            "test fraction {test_frac} must lie strictly between 0 and 1"
        )));
    }
    let mut normal: Vec<usize> = graph
        .edges()
        .iter()
        .enumerate()
        .filter(|(_, e)| graph.label(e.user) == Label::Normal)
        .map(|(k, _)| k)
        .collect();
    if normal.is_empty() {
        return Err(GraphError::Validation("no ratings from normal users to hold out".into()));
    }
    let n_test = (test_frac * normal.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "split"));
    normal.shuffle(&mut rng);
    let mut held: Vec<usize> = normal[..n_test].to_vec();
    held.sort_unstable();
    let mut is_test = vec![false; graph.n_edges()];
    for &k in &held {
        is_test[k] = true;
    }
    let test = held
        .iter()
        .map(|&k| {
            let e = graph.edges()[k];
            HeldOut {
                user: e.user,
                item: e.item,
                rating: e.rating,
            }
        })
        .collect();
    let train = graph.filter_edges(|k, _| !is_test[k]);
    Ok(DatasetSplit { train, test })
}

pub const N_USER_FEATURES: usize = 5;

/// Raw per-user statistics: degree, mean rating, rating variance, share of
/// top-level ratings, share of bottom-level ratings.
pub fn raw_user_features(graph: &RatingGraph) -> Vec<[f64; N_USER_FEATURES]> {
    let top = graph.levels();
    let mut out = vec![[0.0; N_USER_FEATURES]; graph.n_users()];
    for (u, edges) in graph.edges_by_user().iter().enumerate() {
        if edges.is_empty() {
            continue;
        }
        let n = edges.len() as f64;
        let ratings: Vec<f64> = edges.iter().map(|&k| f64::from(graph.edges()[k].rating)).collect();
        let mean = ratings.iter().sum::<f64>() / n;
        let var = ratings.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
        let frac_top = ratings.iter().filter(|&&r| r == f64::from(top)).count() as f64 / n;
        let frac_bottom = ratings.iter().filter(|&&r| r == 1.0).count() as f64 / n;
        out[u] = [n, mean, var, frac_top, frac_bottom];
    }
    out
}

/// Min-max scaled behavior features (`n_users × 5`); a constant column
/// scales to all zeros.
pub fn user_features(graph: &RatingGraph) -> Tensor {
    let raw = raw_user_features(graph);
    let n = raw.len();
    let mut data = vec![0.0; n * N_USER_FEATURES];
    for j in 0..N_USER_FEATURES {
        let (lo, hi) = raw
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r[j]), hi.max(r[j])));
        let span = hi - lo;
        for (u, r) in raw.iter().enumerate() {
            data[u * N_USER_FEATURES + j] = if span > 0.0 { (r[j] - lo) / span } else { 0.0 };
        }
    }
    Tensor::matrix(n, N_USER_FEATURES, data).expect("feature shape")
}

/// Items within `hops` bipartite hops of any target (target → user → item
/// is two hops). Targets are always included. Result is sorted.
pub fn candidate_items(
    graph: &RatingGraph,
    targets: &[usize],
    hops: usize,
) -> Result<Vec<usize>, GraphError> {
    if let Some(&bad) = targets.iter().find(|&&t| t >= graph.n_items()) {
        return Err(GraphError::Validation(format!("unknown target item index {bad}")));
    }
    let by_user = graph.edges_by_user();
    let by_item = graph.edges_by_item();
    let mut item_seen: BTreeSet<usize> = targets.iter().copied().collect();
    let mut user_seen = vec![false; graph.n_users()];
    let mut frontier: Vec<usize> = item_seen.iter().copied().collect();
    let mut depth = 0;
    while depth + 2 <= hops && !frontier.is_empty() {
        let mut next = Vec::new();
        for &item in &frontier {
            for &k in &by_item[item] {
                let u = graph.edges()[k].user;
                if user_seen[u] {
                    continue;
                }
                user_seen[u] = true;
                for &k2 in &by_user[u] {
                    let v = graph.edges()[k2].item;
                    if item_seen.insert(v) {
                        next.push(v);
                    }
                }
            }
        }
        frontier = next;
        depth += 2;
    }
    Ok(item_seen.into_iter().collect())
}
