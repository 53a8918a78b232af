//! Modality identities, modality pairs and presence masks.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModalityId {
    Image,
    Text,
    Tabular,
}

impl ModalityId {
    pub const ALL: [ModalityId; 3] = [ModalityId::Image, ModalityId::Text, ModalityId::Tabular];

    /// Position in `ALL`; also the presence bit index on disk.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ModalityId::Image => "image",
            ModalityId::Text => "text",
            ModalityId::Tabular => "tabular",
        }
    }

    pub fn short(self) -> &'static str {
        match self {
            ModalityId::Image => "Im",
            ModalityId::Text => "Tx",
            ModalityId::Tabular => "Tb",
        }
    }
}

impl fmt::Display for ModalityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModalityId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "image" => Ok(ModalityId::Image),
            "text" => Ok(ModalityId::Text),
            "tabular" => Ok(ModalityId::Tabular),
            other => Err(Error::Config(format!(
                "unknown modality {other:?} (expected image, text or tabular)"
            ))),
        }
    }
}

/// One of the three unordered modality pairs, each served by its own
/// two-stream encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pair {
    ImageText,
    ImageTabular,
    TextTabular,
}

impl Pair {
    pub const ALL: [Pair; 3] = [Pair::ImageText, Pair::ImageTabular, Pair::TextTabular];

    pub fn modalities(self) -> (ModalityId, ModalityId) {
        match self {
            Pair::ImageText => (ModalityId::Image, ModalityId::Text),
            Pair::ImageTabular => (ModalityId::Image, ModalityId::Tabular),
            Pair::TextTabular => (ModalityId::Text, ModalityId::Tabular),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Pair::ImageText => "image_text",
            Pair::ImageTabular => "image_tabular",
            Pair::TextTabular => "text_tabular",
        }
    }

    /// The mask with exactly this pair present.
    pub fn mask(self) -> ModalityMask {
        let (a, b) = self.modalities();
        ModalityMask::NONE.with(a).with(b)
    }

    pub fn from_mask(mask: ModalityMask) -> Option<Pair> {
        Pair::ALL.into_iter().find(|p| p.mask() == mask)
    }
}

impl fmt::Display for Pair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Pair {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Pair::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown modality pair {s:?}")))
    }
}

/// Presence bit per modality (bit 0 image, bit 1 text, bit 2 tabular).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModalityMask(u8);

impl ModalityMask {
    pub const NONE: ModalityMask = ModalityMask(0);
    pub const ALL: ModalityMask = ModalityMask(0b111);

    pub fn from_bits(bits: u8) -> Option<Self> {
        (bits & !0b111 == 0).then_some(Self(bits))
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn contains(self, m: ModalityId) -> bool {
        self.0 & (1 << m.index()) != 0
    }

    pub fn with(self, m: ModalityId) -> Self {
        Self(self.0 | (1 << m.index()))
    }

    pub fn without(self, m: ModalityId) -> Self {
        Self(self.0 & !(1 << m.index()))
    }

    pub fn intersect(self, other: ModalityMask) -> Self {
        Self(self.0 & other.0)
    }

    pub fn count(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn has_pair(self, pair: Pair) -> bool {
        let (a, b) = pair.modalities();
        self.contains(a) && self.contains(b)
    }

    pub fn present(self) -> impl Iterator<Item = ModalityId> {
        ModalityId::ALL.into_iter().filter(move |&m| self.contains(m))
    }
}

impl Default for ModalityMask {
    fn default() -> Self {
        Self::ALL
    }
}

/// Renders present modalities joined by `_`, e.g. `Im_Tx`; `none` if empty.
impl fmt::Display for ModalityMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = self.present().map(ModalityId::short).collect();
        if parts.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&parts.join("_"))
        }
    }
}
