use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numkernel::{Tape, Tensor, Var};
use crate::seeds::derive_seed;

/// Recommender hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecConfig {
    /// Embedding width.
    pub dim: usize,
    /// Hidden width of the rating predictor.
    pub hidden: usize,
    /// Weight of the fraudster-detection term in the joint loss.
    pub lambda: f64,
    /// Gradient-descent step size.
    pub lr: f64,
}

impl Default for RecConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            hidden: 16,
            lambda: 1.0,
            lr: 0.1,
        }
    }
}

fn glorot(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-s..=s)).collect())
        .expect("init shape")
}

/// Trainable recommender parameters. Embeddings are row vectors, so a
/// transform `W` acts as `h · W`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecModelParams {
    /// `n_items × d`
    pub item_table: Tensor,
    /// `feature_dim × d`
    pub user_proj: Tensor,
    /// One `d × d` transform per rating level.
    pub level_transforms: Vec<Tensor>,
    /// `d × d`
    pub self_transform: Tensor,
    /// `2d × d_h`; rows `0..d` act on the user embedding, `d..2d` on the item.
    pub pred_hidden: Tensor,
    pub pred_hidden_bias: Tensor,
    /// `d_h × 1`
    pub pred_out: Tensor,
    pub pred_out_bias: Tensor,
}

impl RecModelParams {
    pub fn init(
        n_items: usize,
        dim: usize,
        hidden: usize,
        feature_dim: usize,
        levels: u8,
        seed: u64,
    ) -> Self {
        assert!(n_items > 0 && dim > 0 && hidden > 0 && feature_dim > 0 && levels > 0);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "rec-init"));
        Self {
            item_table: glorot(&[n_items, dim], n_items, dim, &mut rng),
            user_proj: glorot(&[feature_dim, dim], feature_dim, dim, &mut rng),
            level_transforms: (0..levels).map(|_| glorot(&[dim, dim], dim, dim, &mut rng)).collect(),
            self_transform: glorot(&[dim, dim], dim, dim, &mut rng),
            pred_hidden: glorot(&[2 * dim, hidden], 2 * dim, hidden, &mut rng),
            pred_hidden_bias: Tensor::zeros(&[hidden]),
            pred_out: glorot(&[hidden, 1], hidden, 1, &mut rng),
            pred_out_bias: Tensor::zeros(&[1]),
        }
    }

    pub fn dim(&self) -> usize {
        self.item_table.shape()[1]
    }

    pub fn levels(&self) -> u8 {
        self.level_transforms.len() as u8
    }

    pub fn n_items(&self) -> usize {
        self.item_table.shape()[0]
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("item_table".to_string(), &self.item_table),
            ("user_proj".to_string(), &self.user_proj),
        ];
        for (l, t) in self.level_transforms.iter().enumerate() {
            out.push((format!("level_transform_{}", l + 1), t));
        }
        out.extend([
            ("self_transform".to_string(), &self.self_transform),
            ("pred_hidden".to_string(), &self.pred_hidden),
            ("pred_hidden_bias".to_string(), &self.pred_hidden_bias),
            ("pred_out".to_string(), &self.pred_out),
            ("pred_out_bias".to_string(), &self.pred_out_bias),
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.item_table, &mut self.user_proj];
        out.extend(self.level_transforms.iter_mut());
        out.extend([
            &mut self.self_transform,
            &mut self.pred_hidden,
            &mut self.pred_hidden_bias,
            &mut self.pred_out,
            &mut self.pred_out_bias,
        ]);
        out
    }

    /// Places every tensor on the tape, as trainable leaves or constants.
    pub fn to_tape(&self, tape: &mut Tape, trainable: bool) -> RecVars {
        let mut put = |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        RecVars {
            item_table: put(&self.item_table),
            user_proj: put(&self.user_proj),
            level_transforms: self.level_transforms.iter().map(&mut put).collect(),
            self_transform: put(&self.self_transform),
            pred_hidden: put(&self.pred_hidden),
            pred_hidden_bias: put(&self.pred_hidden_bias),
            pred_out: put(&self.pred_out),
            pred_out_bias: put(&self.pred_out_bias),
            dim: self.dim(),
            levels: self.levels(),
        }
    }
}

/// Tape handles for [`RecModelParams`].
#[derive(Debug, Clone)]
pub struct RecVars {
    pub item_table: Var,
    pub user_proj: Var,
    pub level_transforms: Vec<Var>,
    pub self_transform: Var,
    pub pred_hidden: Var,
    pub pred_hidden_bias: Var,
    pub pred_out: Var,
    pub pred_out_bias: Var,
    pub dim: usize,
    pub levels: u8,
}

impl RecVars {
    pub fn all(&self) -> Vec<Var> {
        let mut v = vec![self.item_table, self.user_proj];
        v.extend(&self.level_transforms);
        v.extend([
            self.self_transform,
            self.pred_hidden,
            self.pred_hidden_bias,
            self.pred_out,
            self.pred_out_bias,
        ]);
        v
    }
}
