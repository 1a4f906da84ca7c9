use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Input modality. Ordering (Audio < Video < Text) fixes iteration order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Audio,
    Video,
    Text,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Audio, Modality::Video, Modality::Text];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Audio => "audio",
            Modality::Video => "video",
            Modality::Text => "text",
        }
    }

    pub fn letter(self) -> char {
        match self {
            Modality::Audio => 'a',
            Modality::Video => 'v',
            Modality::Text => 't',
        }
    }

    fn bit(self) -> u8 {
        match self {
            Modality::Audio => 1,
            Modality::Video => 2,
            Modality::Text => 4,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "a" | "audio" => Ok(Modality::Audio),
            "v" | "video" => Ok(Modality::Video),
            "t" | "text" => Ok(Modality::Text),
            other => Err(Error::Config(format!("unknown modality {other:?}"))),
        }
    }
}

/// Small copyable set of modalities.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ModalitySet(u8);

impl ModalitySet {
    pub const EMPTY: ModalitySet = ModalitySet(0);
    pub const ALL: ModalitySet = ModalitySet(7);

    pub fn of(ms: &[Modality]) -> Self {
        ms.iter().fold(Self::EMPTY, |s, &m| s.with(m))
    }

    pub fn with(self, m: Modality) -> Self {
        ModalitySet(self.0 | m.bit())
    }

    pub fn without(self, m: Modality) -> Self {
        ModalitySet(self.0 & !m.bit())
    }

    pub fn contains(self, m: Modality) -> bool {
        self.0 & m.bit() != 0
    }

    pub fn is_subset(self, other: ModalitySet) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn intersect(self, other: ModalitySet) -> Self {
        ModalitySet(self.0 & other.0)
    }

    pub fn union(self, other: ModalitySet) -> Self {
        ModalitySet(self.0 | other.0)
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn iter(self) -> impl Iterator<Item = Modality> {
        Modality::ALL.into_iter().filter(move |&m| self.contains(m))
    }

    /// Parses comma-separated modality names or letters, e.g. `a,v,t`.
    pub fn parse_list(s: &str) -> Result<Self> {
        s.split(',')
            .filter(|p| !p.trim().is_empty())
            .map(str::parse::<Modality>)
            .try_fold(Self::EMPTY, |set, m| Ok(set.with(m?)))
    }

    /// Compact form such as `a+v+t`.
    pub fn label(self) -> String {
        let parts: Vec<String> = self.iter().map(|m| m.letter().to_string()).collect();
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }
}

impl fmt::Display for ModalitySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromIterator<Modality> for ModalitySet {
    fn from_iter<I: IntoIterator<Item = Modality>>(iter: I) -> Self {
        iter.into_iter().fold(Self::EMPTY, |s, m| s.with(m))
    }
}
