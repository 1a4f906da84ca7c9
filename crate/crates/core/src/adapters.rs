//! Modality-specific low-rank bottleneck adapters.
//!
//! Each adapter maps the sublayer input `E` to `f(E·W_D)·H·W_U` where `W_D` is
//! `d_model×r`, `H` is `r×r` and `W_U` is `r×d_model`. At every adapter site
//! the outputs of all *active* modality adapters are added to the frozen
//! sublayer output. A modality that is absent from a sample is simply
//! inactive: its adapters contribute nothing to the forward pass and, as a
//! consequence, receive no gradient.

use std::collections::BTreeMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Activation, NodeId, Tape};
use crate::config::ModelConfig;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::modality::{Modality, ModalitySet};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stack {
    Encoder,
    Decoder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SitePosition {
    PostAttention,
    PostFfn,
}

/// Insertion point of an adapter: after the self-attention or after the
/// feed-forward sublayer of one encoder or decoder layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AdapterSiteId {
    pub stack: Stack,
    pub layer: usize,
    pub position: SitePosition,
}

impl AdapterSiteId {
    pub fn new(stack: Stack, layer: usize, position: SitePosition) -> Self {
        AdapterSiteId { stack, layer, position }
    }

    /// All sites of a model, encoder first, attention before feed-forward.
    pub fn all(config: &ModelConfig) -> Vec<AdapterSiteId> {
        let mut sites = Vec::with_capacity(config.n_sites());
        for (stack, n) in [(Stack::Encoder, config.n_enc_layers), (Stack::Decoder, config.n_dec_layers)] {
            for layer in 0..n {
                for position in [SitePosition::PostAttention, SitePosition::PostFfn] {
                    sites.push(AdapterSiteId { stack, layer, position });
                }
            }
        }
        sites
    }

    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::Checkpoint(format!("malformed adapter site {s:?}"));
        let mut parts = s.split('.');
        let stack = match parts.next() {
            Some("enc") => Stack::Encoder,
            Some("dec") => Stack::Decoder,
            _ => return Err(bad()),
        };
        let layer = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
        let position = match parts.next() {
            Some("post_attn") => SitePosition::PostAttention,
            Some("post_ffn") => SitePosition::PostFfn,
            _ => return Err(bad()),
        };
        if parts.next().is_some() {
            return Err(bad());
        }
        Ok(AdapterSiteId { stack, layer, position })
    }
}

impl fmt::Display for AdapterSiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let stack = match self.stack {
            Stack::Encoder => "enc",
            Stack::Decoder => "dec",
        };
        let pos = match self.position {
            SitePosition::PostAttention => "post_attn",
            SitePosition::PostFfn => "post_ffn",
        };
        write!(f, "{stack}.{}.{pos}", self.layer)
    }
}

/// Weights of one bottleneck adapter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterParams {
    pub w_down: Tensor,
    pub hidden: Tensor,
    pub w_up: Tensor,
    pub activation: Activation,
}

impl AdapterParams {
    /// `W_D ~ N(0, 0.02²)`, `H = I`, `W_U = 0`: the adapter starts as an exact zero map.
    pub fn init(d_model: usize, rank: usize, activation: Activation, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let down: Vec<f64> = (0..d_model * rank).map(|_| normal.sample(rng)).collect();
        AdapterParams {
            w_down: Tensor::new(vec![d_model, rank], down).expect("shape"),
            hidden: Tensor::identity(rank),
            w_up: Tensor::zeros(&[rank, d_model]),
            activation,
        }
    }

    pub fn rank(&self) -> usize {
        self.hidden.cols()
    }

    pub fn d_model(&self) -> usize {
        self.w_down.rows()
    }

    pub fn numel(&self) -> usize {
        self.w_down.numel() + self.hidden.numel() + self.w_up.numel()
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor); 3] {
        [("down", &self.w_down), ("hidden", &self.hidden), ("up", &self.w_up)]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor); 3] {
        [("down", &mut self.w_down), ("hidden", &mut self.hidden), ("up", &mut self.w_up)]
    }

    /// Evaluates the adapter outside of any training graph.
    pub fn forward(&self, e: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let e = tape.param("e", e, false);
        let down = tape.param("down", &self.w_down, false);
        let hidden = tape.param("hidden", &self.hidden, false);
        let up = tape.param("up", &self.w_up, false);
        let out = adapter_forward(&mut tape, e, down, hidden, up, self.activation)?;
        Ok(tape.tensor(out))
    }
}

/// `f(E·W_D)·H·W_U` on the tape; `E` is `seq×d_model`.
pub fn adapter_forward(
    tape: &mut Tape<'_>,
    e: NodeId,
    w_down: NodeId,
    hidden: NodeId,
    w_up: NodeId,
    activation: Activation,
) -> Result<NodeId> {
    let width = *tape.shape(e).last().unwrap_or(&0);
    let d_model = tape.shape(w_down)[0];
    if width != d_model {
        return Err(Error::Shape {
            op: "adapter_forward",
            lhs: tape.shape(e).to_vec(),
            rhs: tape.shape(w_down).to_vec(),
        });
    }
    let z = tape.matmul(e, w_down)?;
    let z = tape.activation(z, activation)?;
    let z = tape.matmul(z, hidden)?;
    tape.matmul(z, w_up)
}

/// Adds the adapter terms of one site to the frozen sublayer output.
/// With no terms the frozen node is returned unchanged.
pub fn fuse_site(tape: &mut Tape<'_>, frozen_out: NodeId, terms: &[NodeId]) -> Result<NodeId> {
    if terms.is_empty() {
        return Ok(frozen_out);
    }
    let delta = tape.add_all(terms)?;
    tape.add(frozen_out, delta)
}

/// Registry of per-modality, per-site adapters with an active-modality mask.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterSet {
    d_model: usize,
    rank: usize,
    activation: Activation,
    sites: Vec<AdapterSiteId>,
    entries: BTreeMap<(Modality, AdapterSiteId), AdapterParams>,
    active: ModalitySet,
}

impl AdapterSet {
    /// An adapter set with no modalities.
    pub fn empty(config: &ModelConfig) -> Self {
        AdapterSet {
            d_model: config.d_model,
            rank: config.adapter_rank,
            activation: config.activation,
            sites: AdapterSiteId::all(config),
            entries: BTreeMap::new(),
            active: ModalitySet::EMPTY,
        }
    }

    /// Fresh adapters for `modalities` at every site; all of them active.
    pub fn init(config: &ModelConfig, modalities: ModalitySet, seed: u64) -> Self {
        let mut set = AdapterSet::empty(config);
        for m in modalities.iter() {
            // One stream per modality so adding a modality never perturbs the others.
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(1 + m as u64);
            for &site in &set.sites {
                let p = AdapterParams::init(set.d_model, set.rank, set.activation, &mut rng);
                set.entries.insert((m, site), p);
            }
        }
        set.active = modalities;
        set
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn sites(&self) -> &[AdapterSiteId] {
        &self.sites
    }

    /// Modalities that have trained adapters in the map.
    pub fn modalities(&self) -> ModalitySet {
        self.entries.keys().map(|(m, _)| *m).collect()
    }

    pub fn active(&self) -> ModalitySet {
        self.active
    }

    pub fn get(&self, m: Modality, site: AdapterSiteId) -> Option<&AdapterParams> {
        self.entries.get(&(m, site))
    }

    pub fn get_mut(&mut self, m: Modality, site: AdapterSiteId) -> Option<&mut AdapterParams> {
        self.entries.get_mut(&(m, site))
    }

    pub fn iter(&self) -> impl Iterator<Item = (Modality, AdapterSiteId, &AdapterParams)> {
        self.entries.iter().map(|(&(m, s), p)| (m, s, p))
    }

    pub fn numel(&self) -> usize {
        self.entries.values().map(AdapterParams::numel).sum()
    }

    fn check_present(&self, present: ModalitySet) -> Result<()> {
        let have = self.modalities();
        match present.iter().find(|&m| !have.contains(m)) {
            Some(m) => Err(Error::MissingAdapter(m)),
            None => Ok(()),
        }
    }

    /// Sets the active mask. Weights are untouched.
    pub fn set_active(&mut self, present: ModalitySet) -> Result<()> {
        self.check_present(present)?;
        self.active = present;
        Ok(())
    }

    /// Read-only handle with its own active mask.
    pub fn with_active(&self, present: ModalitySet) -> Result<AdapterView<'_>> {
        self.check_present(present)?;
        Ok(AdapterView { set: self, active: present })
    }

    /// Handle using the set's own active mask.
    pub fn view(&self) -> AdapterView<'_> {
        AdapterView { set: self, active: self.active }
    }

    /// Deletes every entry of `m`.
    pub fn remove_modality(&mut self, m: Modality) {
        self.entries.retain(|(mm, _), _| *mm != m);
        self.active = self.active.without(m);
    }

    /// Adds a complete modality (one adapter per site) to the set.
    pub fn insert_modality(
        &mut self,
        m: Modality,
        adapters: BTreeMap<AdapterSiteId, AdapterParams>,
    ) -> Result<()> {
        if adapters.len() != self.sites.len() || self.sites.iter().any(|s| !adapters.contains_key(s)) {
            return Err(Error::Checkpoint(format!(
                "{m} adapters must cover exactly the {} sites of the model",
                self.sites.len()
            )));
        }
        for (site, p) in adapters {
            if p.d_model() != self.d_model || p.rank() != self.rank {
                return Err(Error::Checkpoint(format!(
                    "{m} adapter at {site} has d_model {} rank {}, expected {} and {}",
                    p.d_model(),
                    p.rank(),
                    self.d_model,
                    self.rank
                )));
            }
            self.entries.insert((m, site), p);
        }
        self.active = self.active.with(m);
        Ok(())
    }

    /// Moves all modalities of `other` into `self`.
    pub fn merge(&mut self, other: AdapterSet) -> Result<()> {
        if other.d_model != self.d_model || other.rank != self.rank || other.sites != self.sites {
            return Err(Error::Checkpoint("adapter sets have different geometry".into()));
        }
        let active = other.active;
        for m in other.modalities().iter() {
            let part = other
                .entries
                .iter()
                .filter(|((mm, _), _)| *mm == m)
                .map(|((_, s), p)| (*s, p.clone()))
                .collect();
            self.insert_modality(m, part)?;
        }
        self.active = self.active.union(active);
        Ok(())
    }

    /// Parameter path used for gradients and optimizer state.
    pub fn param_path(m: Modality, site: AdapterSiteId, which: &str) -> String {
        format!("adapter.{}.{site}.{which}", m.name())
    }

    /// Every adapter tensor with its parameter path.
    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (&(m, site), p) in self.entries.iter_mut() {
            for (which, t) in p.tensors_mut() {
                out.push((AdapterSet::param_path(m, site, which), t));
            }
        }
        out
    }
}

/// Borrowed adapter set plus the modalities whose adapters run.
#[derive(Clone, Copy, Debug)]
pub struct AdapterView<'a> {
    pub set: &'a AdapterSet,
    pub active: ModalitySet,
}

impl<'a> AdapterView<'a> {
    /// Narrows the active mask; modalities outside the current mask stay off.
    pub fn restrict(self, present: ModalitySet) -> AdapterView<'a> {
        AdapterView {
            set: self.set,
            active: self.active.intersect(present),
        }
    }

    pub fn get(&self, m: Modality, site: AdapterSiteId) -> Result<&'a AdapterParams> {
        if !self.active.contains(m) {
            return Err(Error::invalid("adapters", format!("{m} is not active")));
        }
        self.set.get(m, site).ok_or(Error::MissingAdapter(m))
    }
}

/// Modalities present in a sample; the trainer uses this as the active mask
/// so absent-modality adapters get neither forward contribution nor update.
pub fn dropout_mask(sample: &Sample) -> ModalitySet {
    sample.modalities()
}
