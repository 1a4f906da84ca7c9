//! Scoring and evaluation with modality ablation.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapters::AdapterSet;
use crate::backbone::{Model, Session};
use crate::config::{ModelConfig, BOS, NO, YES};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::metrics::{compute_eer, compute_fa_at_fr, det_points, ScoreSet};
use crate::modality::ModalitySet;
use crate::params::ParamStore;
use crate::train::{yes_probability, Probe};

/// `P(YES) / (P(YES) + P(NO))` at the first decoding step after BOS.
pub fn score_sample(model: Model<'_>, sample: &Sample) -> Result<f64> {
    let mut s = Session::new(model, false);
    let input = s.build_input(sample)?;
    let enc = s.encode(&input)?;
    let logits = s.decode(enc, &input.keep, &[BOS])?;
    let row = s.tape.value(logits);
    let p = yes_probability(row[YES], row[NO]);
    if p.is_nan() {
        return Err(Error::NonFinite { op: "score" });
    }
    Ok(p)
}

/// Worker count from `FLORA_NUM_WORKERS`, defaulting to the machine's parallelism.
pub fn num_workers() -> usize {
    std::env::var("FLORA_NUM_WORKERS")
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Scores every sample on `workers` threads; results keep input order.
pub fn score_all<F>(data: &[Sample], workers: usize, f: F) -> Result<Vec<f64>>
where
    F: Fn(&Sample) -> Result<f64> + Sync,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::invalid("eval", e.to_string()))?;
    pool.install(|| data.par_iter().map(&f).collect())
}

/// Scores and metrics of one evaluation, ordered by sample id.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub ids: Vec<u64>,
    pub scores: ScoreSet,
    pub eer: f64,
    pub fa_at_10: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub eer: f64,
    pub fa_at_10: f64,
    pub n: usize,
    pub mode: String,
    pub present_modalities: String,
    pub seed: u64,
}

impl EvalReport {
    pub fn from_scores(data: &[Sample], scores: Vec<f64>) -> Result<EvalReport> {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.sort_by_key(|&i| data[i].id);
        let ids = order.iter().map(|&i| data[i].id).collect();
        let set = ScoreSet::new(
            order.iter().map(|&i| scores[i]).collect(),
            order.iter().map(|&i| data[i].label).collect(),
        )?;
        Ok(EvalReport {
            ids,
            eer: compute_eer(&set)?,
            fa_at_10: compute_fa_at_fr(&set, 0.10)?,
            scores: set,
        })
    }

    pub fn n(&self) -> usize {
        self.ids.len()
    }

    pub fn metrics(&self, mode: &str, present: ModalitySet, seed: u64) -> Metrics {
        Metrics {
            eer: self.eer,
            fa_at_10: self.fa_at_10,
            n: self.n(),
            mode: mode.to_string(),
            present_modalities: present.label(),
            seed,
        }
    }

    /// `id<TAB>score<TAB>label` per line, score with 9 significant digits.
    pub fn score_file(&self) -> String {
        let mut s = String::new();
        for ((id, score), label) in self.ids.iter().zip(self.scores.scores()).zip(self.scores.labels()) {
            writeln!(s, "{id}\t{score:.8e}\t{label}").expect("write to string");
        }
        s
    }

    /// `threshold,fr,fa` for every point of the DET staircase.
    pub fn det_csv(&self) -> Result<String> {
        let mut s = String::from("threshold,fr,fa\n");
        for p in det_points(&self.scores)? {
            writeln!(s, "{:.8e},{:.8e},{:.8e}", p.threshold, p.fr, p.fa).expect("write to string");
        }
        Ok(s)
    }
}

/// Evaluates a sequence-to-sequence model with only `present` modalities.
///
/// Other modalities are stripped from the inputs. With adapters, only those
/// of `present` are active, and each sample runs the adapters of the
/// modalities it actually carries; requesting a modality without a trained
/// adapter is an error.
pub fn evaluate(
    config: &ModelConfig,
    params: &ParamStore,
    adapters: Option<&AdapterSet>,
    data: &[Sample],
    present: ModalitySet,
    workers: usize,
) -> Result<EvalReport> {
    let view = adapters.map(|a| a.with_active(present)).transpose()?;
    let scores = score_all(data, workers, |s| {
        let s = s.restricted(present);
        let adapters = view.map(|v| v.restrict(s.modalities()));
        score_sample(Model { config, params, adapters }, &s)
    })?;
    EvalReport::from_scores(data, scores)
}

/// Evaluates a probe on the samples that carry its modality.
pub fn evaluate_probe(probe: &Probe, data: &[Sample], workers: usize) -> Result<EvalReport> {
    let usable: Vec<Sample> = data
        .iter()
        .filter(|s| s.modalities().contains(probe.modality))
        .cloned()
        .collect();
    let scores = score_all(&usable, workers, |s| probe.score(s))?;
    EvalReport::from_scores(&usable, scores)
}
