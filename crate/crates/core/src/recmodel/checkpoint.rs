use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{RecModelError, RecModelParams};
use crate::numkernel::Tensor;

pub const CHECKPOINT_FORMAT: &str = "shillforge-ckpt-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Named tensors with a format header, stored as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub tensors: Vec<NamedTensor>,
}

impl Default for Checkpoint {
    fn default() -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            tensors: Vec::new(),
        }
    }
}

impl Checkpoint {
    pub fn insert(&mut self, name: impl Into<String>, t: &Tensor) {
        let name = name.into();
        self.tensors.retain(|n| n.name != name);
        self.tensors.push(NamedTensor {
            name,
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        });
    }

    pub fn get(&self, name: &str) -> Result<Tensor, RecModelError> {
        let nt = self
            .tensors
            .iter()
            .find(|n| n.name == name)
            .ok_or_else(|| RecModelError::Checkpoint(format!("missing tensor {name}")))?;
        let t = Tensor::new(nt.shape.clone(), nt.data.clone())
            .map_err(|e| RecModelError::Checkpoint(format!("{name}: {e}")))?;
        if !t.is_finite() {
            return Err(RecModelError::Checkpoint(format!("{name} has non-finite entries")));
        }
        Ok(t)
    }

    pub fn has(&self, name: &str) -> bool {
        self.tensors.iter().any(|n| n.name == name)
    }

    pub fn insert_rec(&mut self, params: &RecModelParams) {
        for (name, t) in params.tensors() {
            self.insert(format!("rec.{name}"), t);
        }
    }

    pub fn rec(&self) -> Result<RecModelParams, RecModelError> {
        let mut levels = Vec::new();
        while self.has(&format!("rec.level_transform_{}", levels.len() + 1)) {
            levels.push(self.get(&format!("rec.level_transform_{}", levels.len() + 1))?);
        }
        let p = RecModelParams {
            item_table: self.get("rec.item_table")?,
            user_proj: self.get("rec.user_proj")?,
            level_transforms: levels,
            self_transform: self.get("rec.self_transform")?,
            pred_hidden: self.get("rec.pred_hidden")?,
            pred_hidden_bias: self.get("rec.pred_hidden_bias")?,
            pred_out: self.get("rec.pred_out")?,
            pred_out_bias: self.get("rec.pred_out_bias")?,
        };
        let d = p.item_table.cols();
        let square = |t: &Tensor| t.shape() == [d, d];
        let h = p.pred_hidden_bias.len();
        let ok = p.item_table.ndim() == 2
            && !p.level_transforms.is_empty()
            && p.level_transforms.iter().all(square)
            && square(&p.self_transform)
            && p.user_proj.ndim() == 2
            && p.user_proj.cols() == d
            && p.pred_hidden.shape() == [2 * d, h]
            && p.pred_out.shape() == [h, 1]
            && p.pred_out_bias.len() == 1;
        if !ok {
            return Err(RecModelError::Checkpoint("inconsistent recommender shapes".into()));
        }
        Ok(p)
    }
}

pub fn write_checkpoint<W: Write>(ckpt: &Checkpoint, writer: W) -> Result<(), RecModelError> {
    serde_json::to_writer(writer, ckpt).map_err(|e| RecModelError::Checkpoint(e.to_string()))
}

pub fn read_checkpoint<R: Read>(reader: R) -> Result<Checkpoint, RecModelError> {
    let ckpt: Checkpoint =
        serde_json::from_reader(reader).map_err(|e| RecModelError::Checkpoint(e.to_string()))?;
    if ckpt.format != CHECKPOINT_FORMAT {
        return Err(RecModelError::Checkpoint(format!(
            "unsupported format {:?}",
            ckpt.format
        )));
    }
    Ok(ckpt)
}
