//! Training loops: adapter fine-tuning, full fine-tuning, linear probes for
//! single feature modalities, and denoising pre-training of the backbone.
//!
//! Classification is cast as generation. The decoder is teacher-forced on
//! `[BOS, YES|NO]` and trained to emit `[YES|NO, EOS]`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapters::{dropout_mask, AdapterSet};
use crate::backbone::{Model, Session};
use crate::config::{ModelConfig, BOS, EOS, MASK, NO, YES};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::modality::{Modality, ModalitySet};
use crate::optim::{warmup_lr, warmup_steps, AdamW, AdamWConfig};
use crate::params::{FreezePolicy, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    Flora,
    Fft,
    UnimodalText,
    UnimodalAudio,
    UnimodalVideo,
}

impl TrainMode {
    pub const ALL: [TrainMode; 5] = [
        TrainMode::Flora,
        TrainMode::Fft,
        TrainMode::UnimodalText,
        TrainMode::UnimodalAudio,
        TrainMode::UnimodalVideo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Flora => "flora",
            TrainMode::Fft => "fft",
            TrainMode::UnimodalText => "unimodal-text",
            TrainMode::UnimodalAudio => "unimodal-audio",
            TrainMode::UnimodalVideo => "unimodal-video",
        }
    }

    /// The single feature modality of a probe mode.
    pub fn probe_modality(self) -> Option<Modality> {
        match self {
            TrainMode::UnimodalAudio => Some(Modality::Audio),
            TrainMode::UnimodalVideo => Some(Modality::Video),
            _ => None,
        }
    }

    /// Whether the mode trains adapters on a frozen backbone.
    pub fn uses_adapters(self) -> bool {
        matches!(self, TrainMode::Flora | TrainMode::UnimodalText)
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TrainMode::ALL
            .into_iter()
            .find(|m| m.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub lr: f64,
    pub warmup_ratio: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub weight_decay: f64,
    /// Run only the adapters of modalities present in each sample.
    pub adapter_dropout: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Flora,
            lr: 1e-3,
            warmup_ratio: 0.1,
            batch_size: 32,
            epochs: 3,
            seed: 0,
            weight_decay: 0.0,
            adapter_dropout: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config(format!(
                "warmup_ratio must lie in [0, 1), got {}",
                self.warmup_ratio
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// One optimizer step of the loss curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub curve: Vec<LossPoint>,
    /// Mean training loss of every epoch.
    pub epoch_loss: Vec<f64>,
}

impl TrainReport {
    /// `step,lr,loss` lines with a header.
    pub fn curve_csv(&self) -> String {
        let mut s = String::from("step,lr,loss\n");
        for p in &self.curve {
            s.push_str(&format!("{},{:.8e},{:.8e}\n", p.step, p.lr, p.loss));
        }
        s
    }
}

type Grads = BTreeMap<String, Vec<f64>>;
/// Per-sample gradients by parameter path, as returned by a session.
type NamedGrads = Vec<(String, Vec<f64>)>;

/// Samples summed sequentially inside one parallel work unit. The unit size
/// is fixed, so the summation order does not depend on the thread count.
const CHUNK: usize = 4;

/// Shuffled batches, each drawn from one modality-presence pattern.
fn make_batches(patterns: &[ModalitySet], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut groups: BTreeMap<ModalitySet, Vec<usize>> = BTreeMap::new();
    for (i, &p) in patterns.iter().enumerate() {
        groups.entry(p).or_default().push(i);
    }
    let mut batches = Vec::new();
    for (_, mut idx) in groups {
        idx.shuffle(rng);
        batches.extend(idx.chunks(batch_size).map(<[usize]>::to_vec));
    }
    batches.shuffle(rng);
    batches
}

fn add_into(acc: &mut Grads, grads: NamedGrads) {
    for (name, g) in grads {
        match acc.get_mut(&name) {
            Some(a) => a.iter_mut().zip(&g).for_each(|(x, y)| *x += y),
            None => {
                acc.insert(name, g);
            }
        }
    }
}

/// Mean loss and mean gradients over `batch`.
fn batch_gradients<F>(batch: &[usize], f: &F) -> Result<(f64, Grads)>
where
    F: Fn(usize) -> Result<(f64, NamedGrads)> + Sync,
{
    let partial: Vec<Result<(f64, Grads)>> = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut loss = 0.0;
            let mut acc = Grads::new();
            for &i in chunk {
                let (l, g) = f(i)?;
                loss += l;
                add_into(&mut acc, g);
            }
            Ok((loss, acc))
        })
        .collect();
    let mut loss = 0.0;
    let mut acc = Grads::new();
    for p in partial {
        let (l, g) = p?;
        loss += l;
        add_into(&mut acc, g.into_iter().collect());
    }
    let n = batch.len() as f64;
    acc.values_mut().for_each(|g| g.iter_mut().for_each(|x| *x /= n));
    Ok((loss / n, acc))
}

/// Applies one AdamW update to every parameter that received a gradient.
/// Parameters without a gradient keep both their values and moments.
fn apply_updates(
    opt: &mut AdamW,
    lr: f64,
    grads: &Grads,
    params: &mut ParamStore,
    adapters: Option<&mut AdapterSet>,
) -> Result<()> {
    let mut adapter_tensors: BTreeMap<String, &mut Tensor> = match adapters {
        Some(a) => a.named_tensors_mut().into_iter().collect(),
        None => BTreeMap::new(),
    };
    for (name, g) in grads {
        let t: &mut Tensor = if let Some(t) = adapter_tensors.get_mut(name) {
            t
        } else {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::invalid("train", format!("gradient for unknown parameter {name:?}")))?;
            if p.frozen {
                return Err(Error::invalid("train", format!("gradient for frozen parameter {name:?}")));
            }
            &mut p.tensor
        };
        let decay = t.shape().len() >= 2;
        opt.step(name, t.data_mut(), g, lr, decay)?;
        if !t.is_finite() {
            return Err(Error::NonFinite { op: "adamw" });
        }
    }
    Ok(())
}

/// Generic loop shared by every mode. `patterns` groups samples into batches
/// and `f` returns the loss and gradients of one sample index.
fn optimize<F>(
    cfg: &TrainConfig,
    patterns: &[ModalitySet],
    params: &mut ParamStore,
    mut adapters: Option<&mut AdapterSet>,
    f: F,
) -> Result<TrainReport>
where
    F: Fn(&ParamStore, Option<&AdapterSet>, usize) -> Result<(f64, NamedGrads)> + Sync,
{
    cfg.validate()?;
    let mut report = TrainReport::default();
    if cfg.epochs == 0 || patterns.is_empty() {
        return Ok(report);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let steps_per_epoch = make_batches(patterns, cfg.batch_size, &mut rng.clone()).len();
    let total = steps_per_epoch * cfg.epochs;
    let warmup = warmup_steps(cfg.warmup_ratio, total);
    let mut opt = AdamW::new(AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    });
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let batches = make_batches(patterns, cfg.batch_size, &mut rng);
        let (mut sum, mut count) = (0.0, 0usize);
        for batch in batches {
            let lr = warmup_lr(cfg.lr, step, warmup);
            let (loss, grads) = {
                let p: &ParamStore = params;
                let a = adapters.as_deref();
                batch_gradients(&batch, &|i| f(p, a, i))?
            };
            if !loss.is_finite() {
                return Err(Error::NonFinite { op: "train loss" });
            }
            apply_updates(&mut opt, lr, &grads, params, adapters.as_deref_mut())?;
            report.curve.push(LossPoint { step, lr, loss });
            sum += loss * batch.len() as f64;
            count += batch.len();
            step += 1;
        }
        let mean = sum / count as f64;
        log::info!("epoch {} mean loss {mean:.5}", epoch + 1);
        report.epoch_loss.push(mean);
    }
    Ok(report)
}

/// Cross-entropy of the `[YES|NO, EOS]` target for one sample, plus gradients.
fn seq2seq_sample_loss(model: Model<'_>, sample: &Sample) -> Result<(f64, NamedGrads)> {
    let answer = if sample.is_directed() { YES } else { NO };
    let mut s = Session::new(model, true);
    let input = s.build_input(sample)?;
    let enc = s.encode(&input)?;
    let logits = s.decode(enc, &input.keep, &[BOS, answer])?;
    let loss = s.tape.cross_entropy(logits, &[answer, EOS])?;
    let value = s.tape.item(loss);
    s.tape.backward(loss)?;
    Ok((value, s.gradients()))
}

fn check_dataset(data: &[Sample], config: &ModelConfig) -> Result<()> {
    for s in data {
        s.validate(config.d_audio, config.d_video)?;
    }
    Ok(())
}

/// Trains a sequence-to-sequence model in mode `flora`, `fft` or
/// `unimodal-text`, updating `params` (and `adapters`) in place.
///
/// * `flora`: the backbone is frozen except layernorms and prefix networks;
///   the adapters in `adapters` train, with inputs restricted to the adapter
///   modalities. With adapter dropout each sample runs only the adapters of
///   the modalities it carries.
/// * `unimodal-text`: as `flora` on text-only inputs with a text adapter.
/// * `fft`: every backbone parameter trains and no adapters are used.
pub fn train(
    cfg: &TrainConfig,
    config: &ModelConfig,
    data: &[Sample],
    params: &mut ParamStore,
    adapters: Option<&mut AdapterSet>,
) -> Result<TrainReport> {
    check_dataset(data, config)?;
    match cfg.mode {
        TrainMode::Fft => {
            if adapters.is_some() {
                return Err(Error::Config("fft mode does not use adapters".into()));
            }
            params.apply_policy(FreezePolicy::None);
            let patterns: Vec<ModalitySet> = data.iter().map(Sample::modalities).collect();
            optimize(cfg, &patterns, params, None, |p, _, i| {
                seq2seq_sample_loss(Model::frozen_only(config, p), &data[i])
            })
        }
        TrainMode::Flora | TrainMode::UnimodalText => {
            let adapters = adapters.ok_or_else(|| Error::Config(format!("{} mode needs adapters", cfg.mode)))?;
            let trained = adapters.modalities();
            if cfg.mode == TrainMode::UnimodalText && trained != ModalitySet::of(&[Modality::Text]) {
                return Err(Error::Config("unimodal-text mode trains exactly one text adapter".into()));
            }
            let available = data.iter().fold(ModalitySet::EMPTY, |s, x| s.union(x.modalities()));
            if let Some(m) = trained.iter().find(|&m| !available.contains(m)) {
                return Err(Error::Data(format!("no training sample carries {m}, its adapter cannot train")));
            }
            params.apply_policy(FreezePolicy::AdapterMode);
            let restricted: Vec<Sample> = data.iter().map(|s| s.restricted(trained)).collect();
            let patterns: Vec<ModalitySet> = restricted.iter().map(Sample::modalities).collect();
            let dropout = cfg.adapter_dropout;
            optimize(cfg, &patterns, params, Some(adapters), |p, a, i| {
                let set = a.expect("adapters present");
                let sample = &restricted[i];
                let active = if dropout { dropout_mask(sample).intersect(trained) } else { trained };
                let view = set.with_active(trained)?.restrict(active);
                seq2seq_sample_loss(Model { config, params: p, adapters: Some(view) }, sample)
            })
        }
        TrainMode::UnimodalAudio | TrainMode::UnimodalVideo => Err(Error::Config(format!(
            "{} mode trains a probe; use train_probe",
            cfg.mode
        ))),
    }
}

/// Logistic-regression probe on one raw feature modality.
#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub modality: Modality,
    /// `d_in×2` logits for (NO, YES).
    pub w: Tensor,
    pub b: Tensor,
}

impl Probe {
    pub fn new(modality: Modality, d_in: usize) -> Self {
        Probe {
            modality,
            w: Tensor::zeros(&[d_in, 2]),
            b: Tensor::zeros(&[2]),
        }
    }

    fn path(m: Modality, which: &str) -> String {
        format!("probe.{m}.{which}")
    }

    pub fn to_store(&self) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(Probe::path(self.modality, "w"), self.w.clone(), false);
        s.insert(Probe::path(self.modality, "b"), self.b.clone(), false);
        s
    }

    pub fn from_store(store: &ParamStore) -> Result<Probe> {
        for m in [Modality::Audio, Modality::Video] {
            if let (Ok(w), Ok(b)) = (store.tensor(&Probe::path(m, "w")), store.tensor(&Probe::path(m, "b"))) {
                if w.shape().len() != 2 || w.cols() != 2 || b.shape() != [2] {
                    return Err(Error::Checkpoint("probe tensors have wrong shapes".into()));
                }
                return Ok(Probe {
                    modality: m,
                    w: w.clone(),
                    b: b.clone(),
                });
            }
        }
        Err(Error::Checkpoint("file holds no probe".into()))
    }

    fn features(&self, sample: &Sample) -> Result<Vec<f64>> {
        let f = match self.modality {
            Modality::Audio => &sample.audio,
            Modality::Video => &sample.video,
            Modality::Text => &None,
        };
        let f = f
            .as_ref()
            .ok_or_else(|| Error::Data(format!("sample {} lacks {}", sample.id, self.modality)))?;
        if f.len() != self.w.rows() {
            return Err(Error::Data(format!("sample {} has wrong {} width", sample.id, self.modality)));
        }
        Ok(f.clone())
    }

    /// `P(YES)` under the probe.
    pub fn score(&self, sample: &Sample) -> Result<f64> {
        let x = self.features(sample)?;
        let mut logit = [self.b.data()[0], self.b.data()[1]];
        for (i, xi) in x.iter().enumerate() {
            logit[0] += xi * self.w.at(i, 0);
            logit[1] += xi * self.w.at(i, 1);
        }
        Ok(yes_probability(logit[1], logit[0]))
    }
}

/// `exp(yes) / (exp(yes) + exp(no))` without overflow.
pub fn yes_probability(yes_logit: f64, no_logit: f64) -> f64 {
    let gap = yes_logit - no_logit;
    if gap >= 0.0 {
        1.0 / (1.0 + (-gap).exp())
    } else {
        let e = gap.exp();
        e / (1.0 + e)
    }
}

/// Trains a probe in mode `unimodal-audio` or `unimodal-video` on the samples
/// that carry the modality.
pub fn train_probe(cfg: &TrainConfig, config: &ModelConfig, data: &[Sample]) -> Result<(Probe, TrainReport)> {
    check_dataset(data, config)?;
    let m = cfg
        .mode
        .probe_modality()
        .ok_or_else(|| Error::Config(format!("{} is not a probe mode", cfg.mode)))?;
    let d_in = if m == Modality::Audio { config.d_audio } else { config.d_video };
    let usable: Vec<&Sample> = data.iter().filter(|s| s.modalities().contains(m)).collect();
    if usable.is_empty() {
        return Err(Error::Data(format!("{} mode needs samples with {m}", cfg.mode)));
    }
    let probe = Probe::new(m, d_in);
    let mut store = probe.to_store();
    store.apply_policy(FreezePolicy::None);
    let patterns = vec![ModalitySet::EMPTY; usable.len()];
    let (wp, bp) = (Probe::path(m, "w"), Probe::path(m, "b"));
    let report = optimize(cfg, &patterns, &mut store, None, |p, _, i| {
        let s = usable[i];
        let x = probe.features(s)?;
        let mut tape = crate::autograd::Tape::new();
        let x = tape.constant(Tensor::new(vec![1, d_in], x)?);
        let w = tape.param(&wp, p.tensor(&wp)?, true);
        let b = tape.param(&bp, p.tensor(&bp)?, true);
        let z = tape.matmul(x, w)?;
        let z = tape.add_row(z, b)?;
        let loss = tape.cross_entropy(z, &[s.label as usize])?;
        let value = tape.item(loss);
        tape.backward(loss)?;
        let grads = tape.named_grads().map(|(n, g)| (n.to_string(), g.to_vec())).collect();
        Ok((value, grads))
    })?;
    Ok((Probe::from_store(&store)?, report))
}

/// Denoising pre-training settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    /// Sequences in the synthetic text corpus.
    pub corpus_size: usize,
    pub lr: f64,
    pub warmup_ratio: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Probability of replacing an input token with MASK.
    pub mask_prob: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            corpus_size: 4000,
            lr: 1e-3,
            warmup_ratio: 0.1,
            batch_size: 32,
            epochs: 3,
            seed: 0,
            mask_prob: 0.15,
        }
    }
}

/// Text-only corpus over the ordinary vocabulary, including the answer
/// tokens so the frozen output head knows them.
pub fn pretrain_corpus(config: &ModelConfig, n: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let max_len = (config.max_seq_len - 2).min(10);
    (0..n)
        .map(|_| {
            let len = rng.random_range(2..=max_len);
            (0..len)
                .map(|_| {
                    if rng.random_bool(0.1) {
                        if rng.random_bool(0.5) { YES } else { NO }
                    } else {
                        rng.random_range(MASK + 1..config.vocab_size)
                    }
                })
                .collect()
        })
        .collect()
}

/// Trains the backbone to reconstruct each text from a copy with some tokens
/// masked. Prefix networks are off the text-only path and keep their values.
pub fn pretrain(
    cfg: &PretrainConfig,
    config: &ModelConfig,
    corpus: &[Vec<usize>],
    params: &mut ParamStore,
) -> Result<TrainReport> {
    if !(0.0..1.0).contains(&cfg.mask_prob) {
        return Err(Error::Config("mask_prob must lie in [0, 1)".into()));
    }
    for t in corpus {
        if t.is_empty() || t.len() + 1 > config.max_seq_len {
            return Err(Error::Data("pre-training text is empty or too long".into()));
        }
        if let Some(&bad) = t.iter().find(|&&x| x >= config.vocab_size) {
            return Err(Error::Data(format!("token {bad} outside vocabulary")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(3);
    let corrupted: Vec<Vec<usize>> = corpus
        .iter()
        .map(|t| {
            t.iter()
                .map(|&x| if rng.random_bool(cfg.mask_prob) { MASK } else { x })
                .collect()
        })
        .collect();
    let tc = TrainConfig {
        mode: TrainMode::Fft,
        lr: cfg.lr,
        warmup_ratio: cfg.warmup_ratio,
        batch_size: cfg.batch_size,
        epochs: cfg.epochs,
        seed: cfg.seed,
        weight_decay: 0.0,
        adapter_dropout: false,
    };
    params.apply_policy(FreezePolicy::None);
    let patterns = vec![ModalitySet::EMPTY; corpus.len()];
    let report = optimize(&tc, &patterns, params, None, |p, _, i| {
        let source = Sample {
            id: i as u64,
            text: corrupted[i].clone(),
            audio: None,
            video: None,
            label: 0,
        };
        let mut prefix = vec![BOS];
        prefix.extend_from_slice(&corpus[i]);
        let mut target = corpus[i].clone();
        target.push(EOS);
        let mut s = Session::new(Model::frozen_only(config, p), true);
        let input = s.build_input(&source)?;
        let enc = s.encode(&input)?;
        let logits = s.decode(enc, &input.keep, &prefix)?;
        let loss = s.tape.cross_entropy(logits, &target)?;
        let value = s.tape.item(loss);
        s.tape.backward(loss)?;
        Ok((value, s.gradients()))
    })?;
    params.apply_policy(FreezePolicy::AdapterMode);
    Ok(report)
}
