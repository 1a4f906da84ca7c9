use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub tensor: Tensor,
    pub frozen: bool,
}

/// Which backbone entries receive updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FreezePolicy {
    /// Nothing trains.
    All,
    /// Layernorm gains/biases and prefix projections train; everything else is frozen.
    AdapterMode,
    /// Every entry trains.
    None,
}

/// Named backbone parameters, iterated in sorted path order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

pub fn is_layernorm(path: &str) -> bool {
    path.split('.').any(|seg| seg.starts_with("ln"))
}

pub fn is_prefix(path: &str) -> bool {
    path.starts_with("prefix.")
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, tensor: Tensor, frozen: bool) {
        self.entries.insert(path.into(), Param { tensor, frozen });
    }

    pub fn get(&self, path: &str) -> Result<&Param> {
        self.entries
            .get(path)
            .ok_or_else(|| Error::invalid("params", format!("no parameter {path:?}")))
    }

    pub fn tensor(&self, path: &str) -> Result<&Tensor> {
        self.get(path).map(|p| &p.tensor)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Param> {
        self.entries.get_mut(path)
    }

    pub fn contains(&self, path: &str) -> bool {
        self.entries.contains_key(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.entries.values().map(|p| p.tensor.numel()).sum()
    }

    pub fn apply_policy(&mut self, policy: FreezePolicy) {
        for (path, p) in self.entries.iter_mut() {
            p.frozen = match policy {
                FreezePolicy::All => true,
                FreezePolicy::None => false,
                FreezePolicy::AdapterMode => !(is_layernorm(path) || is_prefix(path)),
            };
        }
    }

    pub fn frozen_numel(&self) -> usize {
        self.entries.values().filter(|p| p.frozen).map(|p| p.tensor.numel()).sum()
    }

    pub fn trainable_numel(&self) -> usize {
        self.numel() - self.frozen_numel()
    }

    /// Sub-store holding only the entries matching `keep`.
    pub fn filtered(&self, keep: impl Fn(&str, &Param) -> bool) -> ParamStore {
        ParamStore {
            entries: self
                .entries
                .iter()
                .filter(|(k, v)| keep(k, v))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Replaces values of existing entries with those in `overlay`. Every
    /// overlay entry must exist with the same shape.
    pub fn overlay(&mut self, overlay: &ParamStore) -> Result<()> {
        for (path, p) in overlay.iter() {
            let dst = self
                .entries
                .get_mut(path)
                .ok_or_else(|| Error::Checkpoint(format!("overlay entry {path:?} not in backbone")))?;
            if dst.tensor.shape() != p.tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "overlay entry {path:?} has shape {:?}, backbone has {:?}",
                    p.tensor.shape(),
                    dst.tensor.shape()
                )));
            }
            dst.tensor = p.tensor.clone();
        }
        Ok(())
    }
}
