use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::GraphError;

pub const DEFAULT_LEVELS: u8 = 5;

/// Observed label attached to a user.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Fake,
    Unlabeled,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Normal => "normal",
            Label::Fake => "fake",
            Label::Unlabeled => "unlabeled",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "normal" => Some(Label::Normal),
            "fake" => Some(Label::Fake),
            "unlabeled" => Some(Label::Unlabeled),
            _ => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserRecord {
    pub id: String,
    pub label: Label,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub user: usize,
    pub item: usize,
    pub rating: u8,
}

/// Bipartite user–item rating graph.
///
/// Users and items are kept sorted by id and edges by `(user, item)`, so two
/// graphs with the same content are identical regardless of how they were
/// assembled. Index order therefore coincides with id order.
#[derive(Debug, Clone, PartialEq)]
pub struct RatingGraph {
    users: Vec<UserRecord>,
    items: Vec<String>,
    edges: Vec<Edge>,
    levels: u8,
    user_lookup: HashMap<String, usize>,
    item_lookup: HashMap<String, usize>,
}

pub(crate) fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Incremental construction with validation; see [`RatingGraph::builder`].
#[derive(Debug, Clone)]
pub struct GraphBuilder {
    levels: u8,
    users: Vec<UserRecord>,
    user_lookup: HashMap<String, usize>,
    items: Vec<String>,
    item_lookup: HashMap<String, usize>,
    ratings: HashMap<(usize, usize), u8>,
    order: Vec<(usize, usize)>,
    duplicates: usize,
}

impl GraphBuilder {
    pub fn new(levels: u8) -> Self {
        Self {
            levels,
            users: Vec::new(),
            user_lookup: HashMap::new(),
            items: Vec::new(),
            item_lookup: HashMap::new(),
            ratings: HashMap::new(),
            order: Vec::new(),
            duplicates: 0,
        }
    }

    /// Registers a user; a second registration must carry the same label.
    pub fn user(&mut self, id: &str, label: Label) -> Result<usize, GraphError> {
        if !valid_id(id) {
            return Err(GraphError::Validation(format!("invalid user id {id:?}")));
        }
        if let Some(&idx) = self.user_lookup.get(id) {
            let existing = self.users[idx].label;
            if existing != label {
                return Err(GraphError::Validation(format!(
                    "user {id} labeled both {existing} and {label}"
                )));
            }
            return Ok(idx);
        }
        self.users.push(UserRecord {
            id: id.to_string(),
            label,
        });
        self.user_lookup.insert(id.to_string(), self.users.len() - 1);
        Ok(self.users.len() - 1)
    }

    pub fn item(&mut self, id: &str) -> Result<usize, GraphError> {
        if !valid_id(id) {
            return Err(GraphError::Validation(format!("invalid item id {id:?}")));
        }
        if let Some(&idx) = self.item_lookup.get(id) {
            return Ok(idx);
        }
        self.items.push(id.to_string());
        self.item_lookup.insert(id.to_string(), self.items.len() - 1);
        Ok(self.items.len() - 1)
    }

    /// Adds a rating; a repeated `(user, item)` pair overwrites the earlier
    /// rating and bumps the duplicate counter.
    pub fn rating(&mut self, user: &str, label: Label, item: &str, rating: u8) -> Result<(), GraphError> {
        if rating < 1 || rating > self.levels {
            return Err(GraphError::Validation(format!(
                "rating {rating} outside 1..={}",
                self.levels
            )));
        }
        let u = self.user(user, label)?;
        let i = self.item(item)?;
        if self.ratings.insert((u, i), rating).is_some() {
            self.duplicates += 1;
        } else {
            self.order.push((u, i));
        }
        Ok(())
    }

    pub fn duplicates(&self) -> usize {
        self.duplicates
    }

    pub fn build(self) -> RatingGraph {
        let mut user_perm: Vec<usize> = (0..self.users.len()).collect();
        user_perm.sort_by(|&a, &b| self.users[a].id.cmp(&self.users[b].id));
        let mut user_new = vec![0; self.users.len()];
        for (new, &old) in user_perm.iter().enumerate() {
            user_new[old] = new;
        }
        let mut item_perm: Vec<usize> = (0..self.items.len()).collect();
        item_perm.sort_by(|&a, &b| self.items[a].cmp(&self.items[b]));
        let mut item_new = vec![0; self.items.len()];
        for (new, &old) in item_perm.iter().enumerate() {
            item_new[old] = new;
        }
        let users: Vec<UserRecord> = user_perm.iter().map(|&o| self.users[o].clone()).collect();
        let items: Vec<String> = item_perm.iter().map(|&o| self.items[o].clone()).collect();
        let mut edges: Vec<Edge> = self
            .order
            .iter()
            .map(|&(u, i)| Edge {
                user: user_new[u],
                item: item_new[i],
                rating: self.ratings[&(u, i)],
            })
            .collect();
        edges.sort_by_key(|e| (e.user, e.item));
        RatingGraph::from_sorted(users, items, edges, self.levels)
    }
}

impl RatingGraph {
    pub fn builder(levels: u8) -> GraphBuilder {
        GraphBuilder::new(levels)
    }

    fn from_sorted(users: Vec<UserRecord>, items: Vec<String>, edges: Vec<Edge>, levels: u8) -> Self {
        let user_lookup = users.iter().enumerate().map(|(i, u)| (u.id.clone(), i)).collect();
        let item_lookup = items.iter().enumerate().map(|(i, v)| (v.clone(), i)).collect();
        Self {
            users,
            items,
            edges,
            levels,
            user_lookup,
            item_lookup,
        }
    }

    pub fn levels(&self) -> u8 {
        self.levels
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty() && self.items.is_empty()
    }

    pub fn users(&self) -> &[UserRecord] {
        &self.users
    }

    pub fn items(&self) -> &[String] {
        &self.items
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn user_index(&self, id: &str) -> Option<usize> {
        self.user_lookup.get(id).copied()
    }

    pub fn item_index(&self, id: &str) -> Option<usize> {
        self.item_lookup.get(id).copied()
    }

    pub fn label(&self, user: usize) -> Label {
        self.users[user].label
    }

    pub fn user_degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.users.len()];
        for e in &self.edges {
            deg[e.user] += 1;
        }
        deg
    }

    pub fn item_degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.items.len()];
        for e in &self.edges {
            deg[e.item] += 1;
        }
        deg
    }

    /// Edge indices grouped by user.
    pub fn edges_by_user(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.users.len()];
        for (k, e) in self.edges.iter().enumerate() {
            out[e.user].push(k);
        }
        out
    }

    pub fn edges_by_item(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.items.len()];
        for (k, e) in self.edges.iter().enumerate() {
            out[e.item].push(k);
        }
        out
    }

    /// Set of items each user rated.
    pub fn rated_items(&self) -> Vec<HashSet<usize>> {
        let mut out = vec![HashSet::new(); self.users.len()];
        for e in &self.edges {
            out[e.user].insert(e.item);
        }
        out
    }

    /// Restriction to the kept users and items; edges touching a dropped
    /// endpoint disappear.
    pub fn restrict(&self, keep_user: &[bool], keep_item: &[bool]) -> RatingGraph {
        let mut user_map = vec![usize::MAX; self.users.len()];
        let mut users = Vec::new();
        for (i, u) in self.users.iter().enumerate() {
            if keep_user[i] {
                user_map[i] = users.len();
                users.push(u.clone());
            }
        }
        let mut item_map = vec![usize::MAX; self.items.len()];
        let mut items = Vec::new();
        for (i, v) in self.items.iter().enumerate() {
            if keep_item[i] {
                item_map[i] = items.len();
                items.push(v.clone());
            }
        }
        let edges = self
            .edges
            .iter()
            .filter(|e| keep_user[e.user] && keep_item[e.item])
            .map(|e| Edge {
                user: user_map[e.user],
                item: item_map[e.item],
                rating: e.rating,
            })
            .collect();
        RatingGraph::from_sorted(users, items, edges, self.levels)
    }

    /// Same users and items, only the edges for which `keep` holds.
    pub fn filter_edges(&self, mut keep: impl FnMut(usize, &Edge) -> bool) -> RatingGraph {
        let edges = self
            .edges
            .iter()
            .enumerate()
            .filter(|(k, e)| keep(*k, e))
            .map(|(_, e)| *e)
            .collect();
        RatingGraph::from_sorted(self.users.clone(), self.items.clone(), edges, self.levels)
    }

    /// Graph with every listed user removed along with its edges.
    pub fn without_users(&self, drop: &HashSet<usize>) -> RatingGraph {
        let keep: Vec<bool> = (0..self.users.len()).map(|u| !drop.contains(&u)).collect();
        self.restrict(&keep, &vec![true; self.items.len()])
    }

    /// Graph with extra users appended. Each new user carries a label and a
    /// list of `(item index, rating)` pairs over existing items.
    pub fn with_users<'a, I>(&self, new_users: I) -> Result<RatingGraph, GraphError>
    where
        I: IntoIterator<Item = (&'a str, Label, &'a [(usize, u8)])>,
    {
        let mut b = GraphBuilder::new(self.levels);
        for u in &self.users {
            b.user(&u.id, u.label)?;
        }
        for v in &self.items {
            b.item(v)?;
        }
        for e in &self.edges {
            let u = &self.users[e.user];
            b.rating(&u.id, u.label, &self.items[e.item], e.rating)?;
        }
        for (id, label, ratings) in new_users {
            if self.user_lookup.contains_key(id) {
                return Err(GraphError::Validation(format!("user {id} already exists")));
            }
            b.user(id, label)?;
            let mut seen = HashSet::new();
            for &(item, rating) in ratings {
                if item >= self.items.len() {
                    return Err(GraphError::Validation(format!("item index {item} out of range")));
                }
                if !seen.insert(item) {
                    return Err(GraphError::Validation(format!(
                        "user {id} rates item {} twice",
                        self.items[item]
                    )));
                }
                b.rating(id, label, &self.items[item], rating)?;
            }
        }
        Ok(b.build())
    }

    /// Copy with some users relabeled.
    pub fn relabeled(&self, labels: &HashMap<usize, Label>) -> RatingGraph {
        let mut g = self.clone();
        for (&u, &l) in labels {
            g.users[u].label = l;
        }
        g
    }

    pub fn validate(&self) -> Result<(), GraphError> {
        let mut seen = HashSet::new();
        for e in &self.edges {
            if e.user >= self.users.len() || e.item >= self.items.len() {
                return Err(GraphError::Validation("edge references missing endpoint".into()));
            }
            if e.rating < 1 || e.rating > self.levels {
                return Err(GraphError::Validation(format!("rating {} out of range", e.rating)));
            }
            if !seen.insert((e.user, e.item)) {
                return Err(GraphError::Validation("duplicate edge".into()));
            }
        }
        Ok(())
    }
}
