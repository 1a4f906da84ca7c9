//! Minimal pre-layernorm encoder-decoder transformer with adapter sites.
//!
//! Every encoder and decoder layer has two adapter sites: after the
//! self-attention sublayer and after the feed-forward sublayer. At a site the
//! sublayer input `x` and the frozen output `x + sublayer(LN(x))` are combined
//! as `frozen + Σ_m adapter_m(x)` over the active modalities `m`.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::adapters::{adapter_forward, fuse_site, AdapterSet, AdapterSiteId, AdapterView, SitePosition, Stack};
use crate::autograd::{Activation, NodeId, Tape};
use crate::config::{ModelConfig, BOS, LN_EPS};
use crate::error::{Error, Result};
use crate::frontends::FusedSequence;
use crate::params::{FreezePolicy, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    Embedding,
    Projection { fan_in: usize },
    Zeros,
    Ones,
}

/// Every backbone parameter with its shape and initializer, in creation order.
fn parameter_layout(c: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = c.d_model;
    let mut out: Vec<(String, Vec<usize>, Init)> = Vec::new();
    let mut push = |path: String, shape: Vec<usize>, init: Init| out.push((path, shape, init));

    push("embed.tok".into(), vec![c.vocab_size, d], Init::Embedding);
    push("embed.pos".into(), vec![c.max_seq_len, d], Init::Embedding);

    let ln = |push: &mut dyn FnMut(String, Vec<usize>, Init), p: String| {
        push(format!("{p}.g"), vec![d], Init::Ones);
        push(format!("{p}.b"), vec![d], Init::Zeros);
    };
    let attn = |push: &mut dyn FnMut(String, Vec<usize>, Init), p: String| {
        for w in ["q", "k", "v", "o"] {
            push(format!("{p}.{w}.w"), vec![d, d], Init::Projection { fan_in: d });
            push(format!("{p}.{w}.b"), vec![d], Init::Zeros);
        }
    };
    let ffn = |push: &mut dyn FnMut(String, Vec<usize>, Init), p: String| {
        push(format!("{p}.w1"), vec![d, c.d_ff], Init::Projection { fan_in: d });
        push(format!("{p}.b1"), vec![c.d_ff], Init::Zeros);
        push(format!("{p}.w2"), vec![c.d_ff, d], Init::Projection { fan_in: c.d_ff });
        push(format!("{p}.b2"), vec![d], Init::Zeros);
    };

    for i in 0..c.n_enc_layers {
        ln(&mut push, format!("enc.{i}.ln1"));
        attn(&mut push, format!("enc.{i}.attn"));
        ln(&mut push, format!("enc.{i}.ln2"));
        ffn(&mut push, format!("enc.{i}.ffn"));
    }
    ln(&mut push, "enc.ln_f".into());
    for i in 0..c.n_dec_layers {
        ln(&mut push, format!("dec.{i}.ln1"));
        attn(&mut push, format!("dec.{i}.self"));
        ln(&mut push, format!("dec.{i}.ln2"));
        attn(&mut push, format!("dec.{i}.cross"));
        ln(&mut push, format!("dec.{i}.ln3"));
        ffn(&mut push, format!("dec.{i}.ffn"));
    }
    ln(&mut push, "dec.ln_f".into());
    push("head.w".into(), vec![d, c.vocab_size], Init::Projection { fan_in: d });
    push("head.b".into(), vec![c.vocab_size], Init::Zeros);

    for (m, d_in) in [("audio", c.d_audio), ("video", c.d_video)] {
        push(format!("prefix.{m}.down"), vec![d_in, c.prefix_rank], Init::Projection { fan_in: d_in });
        push(format!("prefix.{m}.up"), vec![c.prefix_rank, d], Init::Embedding);
        push(format!("prefix.{m}.b"), vec![d], Init::Zeros);
    }
    out
}

/// Deterministic random initialization of every backbone parameter.
///
/// Embeddings and the prefix up-projections draw from `N(0, 0.02²)`,
/// projection matrices from `N(0, 1/fan_in)`, biases are zero and layernorm
/// gains one. The store comes back with the adapter-mode freeze policy.
pub fn init_backbone(config: &ModelConfig, seed: u64) -> Result<ParamStore> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (path, shape, init) in parameter_layout(config) {
        let numel: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; numel],
            Init::Ones => vec![1.0; numel],
            Init::Embedding | Init::Projection { .. } => {
                let std = match init {
                    Init::Projection { fan_in } => 1.0 / (fan_in as f64).sqrt(),
                    _ => 0.02,
                };
                let normal = Normal::new(0.0, std).expect("valid std");
                (0..numel).map(|_| normal.sample(&mut rng)).collect()
            }
        };
        store.insert(path, Tensor::new(shape, data)?, false);
    }
    store.apply_policy(FreezePolicy::AdapterMode);
    Ok(store)
}

/// Checks that a store has exactly the entries and shapes `config` implies.
pub fn check_store(config: &ModelConfig, store: &ParamStore) -> Result<()> {
    let layout = parameter_layout(config);
    if layout.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "backbone has {} tensors, config implies {}",
            store.len(),
            layout.len()
        )));
    }
    for (path, shape, _) in layout {
        let t = store
            .tensor(&path)
            .map_err(|_| Error::Checkpoint(format!("backbone lacks {path:?}")))?;
        if t.shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "{path:?} has shape {:?}, config implies {shape:?}",
                t.shape()
            )));
        }
    }
    Ok(())
}

/// Frozen/trainable split of a model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParamCount {
    pub frozen: usize,
    pub trainable: usize,
    pub fraction: f64,
}

/// Trainable = every non-frozen backbone entry plus every adapter weight.
pub fn count_params(params: &ParamStore, adapters: Option<&AdapterSet>) -> ParamCount {
    let frozen = params.frozen_numel();
    let trainable = params.trainable_numel() + adapters.map_or(0, AdapterSet::numel);
    let total = frozen + trainable;
    ParamCount {
        frozen,
        trainable,
        fraction: if total == 0 { 0.0 } else { trainable as f64 / total as f64 },
    }
}

/// Read-only references to everything a forward pass needs.
#[derive(Clone, Copy, Debug)]
pub struct Model<'a> {
    pub config: &'a ModelConfig,
    pub params: &'a ParamStore,
    pub adapters: Option<AdapterView<'a>>,
}

impl<'a> Model<'a> {
    pub fn frozen_only(config: &'a ModelConfig, params: &'a ParamStore) -> Self {
        Model { config, params, adapters: None }
    }
}

/// One forward (and optionally backward) pass: a tape plus parameter bindings.
pub struct Session<'a> {
    pub tape: Tape<'a>,
    model: Model<'a>,
    track_grads: bool,
    bound: HashMap<String, NodeId>,
}

impl<'a> Session<'a> {
    /// With `track_grads`, non-frozen backbone entries and all active adapters
    /// become trainable leaves; otherwise everything is a constant.
    pub fn new(model: Model<'a>, track_grads: bool) -> Self {
        Session {
            tape: Tape::new(),
            model,
            track_grads,
            bound: HashMap::new(),
        }
    }

    pub fn config(&self) -> &'a ModelConfig {
        self.model.config
    }

    /// Binds a backbone parameter onto the tape (once per session).
    pub fn param(&mut self, path: &str) -> Result<NodeId> {
        if let Some(&id) = self.bound.get(path) {
            return Ok(id);
        }
        let p = self.model.params.get(path)?;
        let id = self.tape.param(path, &p.tensor, self.track_grads && !p.frozen);
        self.bound.insert(path.to_string(), id);
        Ok(id)
    }

    fn linear(&mut self, x: NodeId, prefix: &str) -> Result<NodeId> {
        let w = self.param(&format!("{prefix}.w"))?;
        let b = self.param(&format!("{prefix}.b"))?;
        let y = self.tape.matmul(x, w)?;
        self.tape.add_row(y, b)
    }

    fn layer_norm(&mut self, x: NodeId, prefix: &str) -> Result<NodeId> {
        let g = self.param(&format!("{prefix}.g"))?;
        let b = self.param(&format!("{prefix}.b"))?;
        self.tape.layer_norm(x, g, b, LN_EPS)
    }

    fn feed_forward(&mut self, x: NodeId, prefix: &str) -> Result<NodeId> {
        let w1 = self.param(&format!("{prefix}.w1"))?;
        let b1 = self.param(&format!("{prefix}.b1"))?;
        let w2 = self.param(&format!("{prefix}.w2"))?;
        let b2 = self.param(&format!("{prefix}.b2"))?;
        let h = self.tape.matmul(x, w1)?;
        let h = self.tape.add_row(h, b1)?;
        let h = self.tape.gelu(h)?;
        let y = self.tape.matmul(h, w2)?;
        self.tape.add_row(y, b2)
    }

    /// Multi-head attention of `xq` rows over `xkv` rows; `keep` is the
    /// row-major `q×kv` mask of admissible pairs.
    fn attention(&mut self, prefix: &str, xq: NodeId, xkv: NodeId, keep: &[bool]) -> Result<NodeId> {
        let heads = self.model.config.n_heads;
        let dh = self.model.config.head_dim();
        let q = self.linear(xq, &format!("{prefix}.q"))?;
        let k = self.linear(xkv, &format!("{prefix}.k"))?;
        let v = self.linear(xkv, &format!("{prefix}.v"))?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (
                    self.tape.slice_cols(q, h * dh, dh)?,
                    self.tape.slice_cols(k, h * dh, dh)?,
                    self.tape.slice_cols(v, h * dh, dh)?,
                )
            };
            let s = self.tape.matmul_nt(qh, kh)?;
            let s = self.tape.scale(s, scale)?;
            let p = self.tape.masked_softmax(s, keep)?;
            outs.push(self.tape.matmul(p, vh)?);
        }
        let o = if heads == 1 { outs[0] } else { self.tape.concat_cols(&outs)? };
        self.linear(o, &format!("{prefix}.o"))
    }

    /// Frozen sublayer output plus the active adapters' terms at `site`.
    pub fn fuse(&mut self, site: AdapterSiteId, frozen_out: NodeId, e: NodeId) -> Result<NodeId> {
        let Some(view) = self.model.adapters else {
            return Ok(frozen_out);
        };
        let mut terms = Vec::new();
        for m in view.active.iter() {
            let a = view.get(m, site)?;
            let trainable = self.track_grads;
            let mut bind = |which: &str, t: &'a Tensor| {
                let path = AdapterSet::param_path(m, site, which);
                self.tape.param(&path, t, trainable)
            };
            let down = bind("down", &a.w_down);
            let hidden = bind("hidden", &a.hidden);
            let up = bind("up", &a.w_up);
            terms.push(adapter_forward(&mut self.tape, e, down, hidden, up, a.activation)?);
        }
        fuse_site(&mut self.tape, frozen_out, &terms)
    }

    /// Runs the encoder stack; returns `seq×d_model` (after the final layernorm).
    pub fn encode(&mut self, input: &FusedSequence) -> Result<NodeId> {
        let c = self.model.config;
        let len = input.len();
        if len > c.max_seq_len {
            return Err(Error::TooLong { len, max: c.max_seq_len });
        }
        let keep: Vec<bool> = (0..len).flat_map(|_| input.keep.iter().copied()).collect();
        let mut x = input.embeddings;
        for i in 0..c.n_enc_layers {
            let h = self.layer_norm(x, &format!("enc.{i}.ln1"))?;
            let a = self.attention(&format!("enc.{i}.attn"), h, h, &keep)?;
            let frozen = self.tape.add(x, a)?;
            x = self.fuse(AdapterSiteId::new(Stack::Encoder, i, SitePosition::PostAttention), frozen, x)?;

            let h = self.layer_norm(x, &format!("enc.{i}.ln2"))?;
            let f = self.feed_forward(h, &format!("enc.{i}.ffn"))?;
            let frozen = self.tape.add(x, f)?;
            x = self.fuse(AdapterSiteId::new(Stack::Encoder, i, SitePosition::PostFfn), frozen, x)?;
        }
        self.layer_norm(x, "enc.ln_f")
    }

    /// Teacher-forced decoder pass; returns `prefix.len()×vocab` logits where
    /// row `t` predicts the token after `prefix[t]`.
    pub fn decode(&mut self, enc_out: NodeId, enc_keep: &[bool], prefix: &[usize]) -> Result<NodeId> {
        let c = self.model.config;
        let steps = prefix.len();
        if prefix.first() != Some(&BOS) {
            return Err(Error::invalid("decode", "target prefix must begin with BOS"));
        }
        if steps > c.max_seq_len {
            return Err(Error::TooLong { len: steps, max: c.max_seq_len });
        }
        let enc_len = self.tape.shape(enc_out)[0];
        if enc_keep.len() != enc_len {
            return Err(Error::invalid("decode", "encoder mask length differs from encoder output"));
        }
        let tok = self.param("embed.tok")?;
        let pos = self.param("embed.pos")?;
        let te = self.tape.gather_rows(tok, prefix)?;
        let positions: Vec<usize> = (0..steps).collect();
        let pe = self.tape.gather_rows(pos, &positions)?;
        let mut x = self.tape.add(te, pe)?;

        let causal: Vec<bool> = (0..steps).flat_map(|r| (0..steps).map(move |c| c <= r)).collect();
        let cross: Vec<bool> = (0..steps).flat_map(|_| enc_keep.iter().copied()).collect();
        for i in 0..c.n_dec_layers {
            let h = self.layer_norm(x, &format!("dec.{i}.ln1"))?;
            let a = self.attention(&format!("dec.{i}.self"), h, h, &causal)?;
            let frozen = self.tape.add(x, a)?;
            x = self.fuse(AdapterSiteId::new(Stack::Decoder, i, SitePosition::PostAttention), frozen, x)?;

            let h = self.layer_norm(x, &format!("dec.{i}.ln2"))?;
            let a = self.attention(&format!("dec.{i}.cross"), h, enc_out, &cross)?;
            x = self.tape.add(x, a)?;

            let h = self.layer_norm(x, &format!("dec.{i}.ln3"))?;
            let f = self.feed_forward(h, &format!("dec.{i}.ffn"))?;
            let frozen = self.tape.add(x, f)?;
            x = self.fuse(AdapterSiteId::new(Stack::Decoder, i, SitePosition::PostFfn), frozen, x)?;
        }
        let h = self.layer_norm(x, "dec.ln_f")?;
        self.linear(h, "head")
    }

    /// Gradients of trainable leaves keyed by parameter path. Must follow a
    /// call to `self.tape.backward`.
    pub fn gradients(&self) -> Vec<(String, Vec<f64>)> {
        self.tape
            .named_grads()
            .map(|(name, g)| (name.to_string(), g.to_vec()))
            .collect()
    }
}

/// Adapter activation used when none is configured.
pub fn default_activation() -> Activation {
    Activation::default()
}
