//! Synthetic device-directedness dataset with a known generative model.
//!
//! Each sample draws a latent label `z`. Text is a short sequence of filler
//! words that contains a marker word iff `z`, with the marker presence flipped
//! with probability `text_flip_prob`. Audio and video are `(2z-1)·u + σ·ε`
//! for fixed unit directions `u_a`, `u_v` derived from the seed. Because the
//! likelihoods are known in closed form, the exact posterior is available and
//! gives Bayes-optimal reference error rates.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::N_RESERVED;
use crate::error::{Error, Result};
use crate::metrics::{compute_eer, ScoreSet};
use crate::modality::{Modality, ModalitySet};

/// Marker words signalling device-directed speech.
pub const MARKERS: [usize; 2] = [N_RESERVED, N_RESERVED + 1];
/// First filler word id.
pub const FIRST_FILLER: usize = N_RESERVED + 2;

/// One utterance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: u64,
    pub text: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub video: Option<Vec<f64>>,
    pub label: u8,
}

impl Sample {
    pub fn modalities(&self) -> ModalitySet {
        let mut s = ModalitySet::EMPTY.with(Modality::Text);
        if self.audio.is_some() {
            s = s.with(Modality::Audio);
        }
        if self.video.is_some() {
            s = s.with(Modality::Video);
        }
        s
    }

    /// Copy with every modality outside `present` removed. Text is kept.
    pub fn restricted(&self, present: ModalitySet) -> Sample {
        Sample {
            id: self.id,
            text: self.text.clone(),
            audio: self.audio.clone().filter(|_| present.contains(Modality::Audio)),
            video: self.video.clone().filter(|_| present.contains(Modality::Video)),
            label: self.label,
        }
    }

    pub fn is_directed(&self) -> bool {
        self.label == 1
    }

    pub fn validate(&self, d_audio: usize, d_video: usize) -> Result<()> {
        if self.text.is_empty() {
            return Err(Error::Data(format!("sample {} has empty text", self.id)));
        }
        if self.label > 1 {
            return Err(Error::Data(format!("sample {} has label {}", self.id, self.label)));
        }
        for (name, v, d) in [("audio", &self.audio, d_audio), ("video", &self.video, d_video)] {
            if let Some(v) = v {
                if v.len() != d {
                    return Err(Error::Data(format!(
                        "sample {} {name} has {} values, expected {d}",
                        self.id,
                        v.len()
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub seed: u64,
    /// Training samples.
    pub n_samples: usize,
    /// Test samples.
    pub n_test: usize,
    pub p_missing_audio: f64,
    pub p_missing_video: f64,
    pub text_flip_prob: f64,
    pub audio_sigma: f64,
    pub video_sigma: f64,
    /// Probability that a sample is device-directed.
    pub p_directed: f64,
    pub d_audio: usize,
    pub d_video: usize,
    pub vocab_size: usize,
    pub min_words: usize,
    pub max_words: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seed: 0,
            n_samples: 4000,
            n_test: 4000,
            p_missing_audio: 0.0,
            p_missing_video: 0.0,
            text_flip_prob: 0.12,
            audio_sigma: 0.9,
            video_sigma: 1.5,
            p_directed: 0.5,
            d_audio: 256,
            d_video: 512,
            vocab_size: 64,
            min_words: 3,
            max_words: 8,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("p_missing_audio", self.p_missing_audio),
            ("p_missing_video", self.p_missing_video),
            ("text_flip_prob", self.text_flip_prob),
            ("p_directed", self.p_directed),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} is not in [0, 1]")));
            }
        }
        for (name, s) in [("audio_sigma", self.audio_sigma), ("video_sigma", self.video_sigma)] {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("{name} = {s} must be positive and finite")));
            }
        }
        if self.vocab_size <= FIRST_FILLER {
            return Err(Error::Config(format!(
                "vocab_size {} leaves no filler words",
                self.vocab_size
            )));
        }
        if self.min_words == 0 || self.min_words > self.max_words {
            return Err(Error::Config("need 1 <= min_words <= max_words".into()));
        }
        if self.d_audio == 0 || self.d_video == 0 {
            return Err(Error::Config("feature widths must be positive".into()));
        }
        Ok(())
    }

    /// Longest text (words plus optional marker).
    pub fn max_text_len(&self) -> usize {
        self.max_words + 1
    }
}

/// Which stream of samples to draw. Splits share the seed-derived directions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
    /// Unlabelled-style text used for backbone pre-training.
    Pretrain,
}

impl Split {
    fn salt(self) -> u64 {
        match self {
            Split::Train => 0x7472_6169_6e00_0000,
            Split::Test => 0x7465_7374_0000_0000,
            Split::Pretrain => 0x7072_6574_7200_0000,
        }
    }

    fn id_base(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Test => 1_000_000_000,
            Split::Pretrain => 2_000_000_000,
        }
    }
}

fn unit_direction(seed: u64, stream: u64, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

/// Fixed class directions `(u_a, u_v)` for a seed.
pub fn class_directions(cfg: &GenConfig) -> (Vec<f64>, Vec<f64>) {
    (
        unit_direction(cfg.seed, u64::MAX - 1, cfg.d_audio),
        unit_direction(cfg.seed, u64::MAX - 2, cfg.d_video),
    )
}

fn draw_text(cfg: &GenConfig, marker: bool, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n_words = rng.random_range(cfg.min_words..=cfg.max_words);
    let mut text: Vec<usize> = (0..n_words)
        .map(|_| rng.random_range(FIRST_FILLER..cfg.vocab_size))
        .collect();
    if marker {
        let at = rng.random_range(0..=text.len());
        let word = MARKERS[rng.random_range(0..MARKERS.len())];
        text.insert(at, word);
    }
    text
}

/// Draws `n` samples of one split. Sample `i` depends only on
/// `(seed, split, i)`; missingness uses its own stream, so changing the
/// missing-modality probabilities never changes the drawn content.
pub fn generate_split(cfg: &GenConfig, split: Split, n: usize) -> Result<Vec<Sample>> {
    cfg.validate()?;
    let (u_a, u_v) = class_directions(cfg);
    let mut out = Vec::with_capacity(n);
    for i in 0..n as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ split.salt());
        rng.set_stream(2 * i);
        let z = rng.random_bool(cfg.p_directed);
        let flip = rng.random_bool(cfg.text_flip_prob);
        let text = draw_text(cfg, z ^ flip, &mut rng);
        let sign = if z { 1.0 } else { -1.0 };
        let mut channel = |u: &[f64], sigma: f64| -> Vec<f64> {
            u.iter()
                .map(|&ui| sign * ui + sigma * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                .collect()
        };
        let audio = channel(&u_a, cfg.audio_sigma);
        let video = channel(&u_v, cfg.video_sigma);

        let mut miss = ChaCha8Rng::seed_from_u64(cfg.seed ^ split.salt());
        miss.set_stream(2 * i + 1);
        let drop_audio = miss.random_bool(cfg.p_missing_audio);
        let drop_video = miss.random_bool(cfg.p_missing_video);

        out.push(Sample {
            id: split.id_base() + i,
            text,
            audio: (!drop_audio).then_some(audio),
            video: (!drop_video).then_some(video),
            label: z as u8,
        });
    }
    Ok(out)
}

/// The `cfg.n_samples` training samples.
pub fn generate(cfg: &GenConfig) -> Result<Vec<Sample>> {
    generate_split(cfg, Split::Train, cfg.n_samples)
}

/// One JSON object per line.
pub fn encode_jsonl(samples: &[Sample]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    for s in samples {
        serde_json::to_writer(&mut buf, s)?;
        buf.push(b'\n');
    }
    Ok(buf)
}

pub fn write_jsonl(path: &Path, samples: &[Sample]) -> Result<()> {
    crate::checkpoint::write_atomic(path, &encode_jsonl(samples)?)
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Sample>> {
    let file = File::open(path)
        .map_err(|e| Error::Data(format!("cannot open dataset {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: Sample = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        out.push(s);
    }
    Ok(out)
}

/// Union of modalities present anywhere in a dataset.
pub fn dataset_modalities(samples: &[Sample]) -> ModalitySet {
    samples.iter().fold(ModalitySet::EMPTY, |s, x| s.union(x.modalities()))
}

/// Bayes-optimal equal error rates per observed modality combination.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BayesEers {
    pub eer_text: f64,
    pub eer_audio: f64,
    pub eer_video: f64,
    pub eer_audio_text: f64,
    pub eer_joint: f64,
}

/// Log-likelihood ratio of the text channel given marker presence.
fn text_llr(flip: f64, marker: bool) -> f64 {
    let l = ((1.0 - flip) / flip).ln();
    if marker {
        l
    } else {
        -l
    }
}

/// Scores `n_mc` Monte-Carlo draws with the exact posterior log-odds.
///
/// Projections of the Gaussian channels onto their class directions are
/// sufficient statistics, so they are drawn directly: `±1 + σ·ε`.
pub fn bayes_oracle(cfg: &GenConfig, n_mc: usize) -> Result<BayesEers> {
    cfg.validate()?;
    if n_mc < 10_000 {
        return Err(Error::Config(format!("bayes_oracle needs n_mc >= 10000, got {n_mc}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6261_7965_7300_0000);
    let prior = (cfg.p_directed / (1.0 - cfg.p_directed)).ln();
    let (sa, sv) = (cfg.audio_sigma, cfg.video_sigma);
    let mut labels = Vec::with_capacity(n_mc);
    let mut cols: [Vec<f64>; 5] = Default::default();
    for _ in 0..n_mc {
        let z = rng.random_bool(cfg.p_directed);
        let sign = if z { 1.0 } else { -1.0 };
        let marker = z ^ rng.random_bool(cfg.text_flip_prob);
        let a: f64 = sign + sa * rng.sample::<f64, _>(StandardNormal);
        let v: f64 = sign + sv * rng.sample::<f64, _>(StandardNormal);
        let lt = text_llr(cfg.text_flip_prob, marker);
        let la = 2.0 * a / (sa * sa);
        let lv = 2.0 * v / (sv * sv);
        labels.push(z as u8);
        for (c, s) in cols.iter_mut().zip([lt, la, lv, lt + la, lt + la + lv]) {
            c.push(prior + s);
        }
    }
    let eer = |scores: &Vec<f64>| compute_eer(&ScoreSet::new(scores.clone(), labels.clone())?);
    Ok(BayesEers {
        eer_text: eer(&cols[0])?,
        eer_audio: eer(&cols[1])?,
        eer_video: eer(&cols[2])?,
        eer_audio_text: eer(&cols[3])?,
        eer_joint: eer(&cols[4])?,
    })
}
