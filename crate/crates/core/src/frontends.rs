//! Modality front-ends: audio and video feature vectors become single prefix
//! embeddings ahead of the text tokens in the encoder input.
//!
//! The prefix networks are factorized, `x·D·U + b` with `D: d_in×k` and
//! `U: k×d_model`, which keeps them small next to the backbone.

use crate::autograd::NodeId;
use crate::backbone::Session;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::modality::Modality;
use crate::tensor::Tensor;

/// What occupies one encoder position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Prefix(Modality),
    Token(usize),
    Pad,
}

/// Encoder input: `len×d_model` embeddings (positions already added), the
/// per-position key mask, and what each position holds.
#[derive(Clone, Debug)]
pub struct FusedSequence {
    pub embeddings: NodeId,
    pub keep: Vec<bool>,
    pub layout: Vec<Slot>,
}

impl FusedSequence {
    pub fn len(&self) -> usize {
        self.layout.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layout.is_empty()
    }
}

impl Session<'_> {
    /// One `1×d_model` prefix embedding from a raw feature vector.
    pub fn project_modality(&mut self, m: Modality, features: &[f64]) -> Result<NodeId> {
        let c = self.config();
        let d_in = match m {
            Modality::Audio => c.d_audio,
            Modality::Video => c.d_video,
            Modality::Text => return Err(Error::invalid("project_modality", "text has no prefix network")),
        };
        if features.len() != d_in {
            return Err(Error::invalid(
                "project_modality",
                format!("{m} features have length {}, expected {d_in}", features.len()),
            ));
        }
        let x = self.tape.constant(Tensor::new(vec![1, d_in], features.to_vec())?);
        let down = self.param(&format!("prefix.{m}.down"))?;
        let up = self.param(&format!("prefix.{m}.up"))?;
        let b = self.param(&format!("prefix.{m}.b"))?;
        let z = self.tape.matmul(x, down)?;
        let z = self.tape.matmul(z, up)?;
        self.tape.add_row(z, b)
    }

    /// `[audio prefix] [video prefix] text tokens`, present modalities only.
    pub fn build_input(&mut self, sample: &Sample) -> Result<FusedSequence> {
        self.build_padded(sample, &[])
    }

    /// Like [`Session::build_input`] followed by masked padding positions
    /// holding the given token ids.
    pub fn build_padded(&mut self, sample: &Sample, pad_tokens: &[usize]) -> Result<FusedSequence> {
        let c = self.config();
        if sample.text.is_empty() {
            return Err(Error::Data(format!("sample {} has empty text", sample.id)));
        }
        if let Some(&t) = sample.text.iter().chain(pad_tokens).find(|&&t| t >= c.vocab_size) {
            return Err(Error::Data(format!("token {t} outside vocabulary of {}", c.vocab_size)));
        }
        let mut rows = Vec::new();
        let mut layout = Vec::new();
        for (m, feats) in [(Modality::Audio, &sample.audio), (Modality::Video, &sample.video)] {
            if let Some(f) = feats {
                rows.push(self.project_modality(m, f)?);
                layout.push(Slot::Prefix(m));
            }
        }
        let tokens: Vec<usize> = sample.text.iter().chain(pad_tokens).copied().collect();
        layout.extend(sample.text.iter().map(|&t| Slot::Token(t)));
        layout.extend(pad_tokens.iter().map(|_| Slot::Pad));
        if layout.len() > c.max_seq_len {
            return Err(Error::TooLong { len: layout.len(), max: c.max_seq_len });
        }
        let tok = self.param("embed.tok")?;
        rows.push(self.tape.gather_rows(tok, &tokens)?);
        let x = if rows.len() == 1 { rows[0] } else { self.tape.concat_rows(&rows)? };
        let pos = self.param("embed.pos")?;
        let positions: Vec<usize> = (0..layout.len()).collect();
        let pe = self.tape.gather_rows(pos, &positions)?;
        let embeddings = self.tape.add(x, pe)?;
        let keep = layout.iter().map(|s| *s != Slot::Pad).collect();
        Ok(FusedSequence { embeddings, keep, layout })
    }
}
