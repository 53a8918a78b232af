//! Tri-modal samples, dataset views, splitting and modality masking.

mod format;
mod synth;

pub use format::{read_dataset, read_dataset_file, write_dataset, write_dataset_file, MAGIC, VERSION};
pub use synth::{generate_synthetic, SynthSpec};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modality::{ModalityId, ModalityMask};

/// Label slots available in the on-disk label field.
pub const MAX_LABELS: usize = 16;

/// Token grid of one modality: `token_count × native_dim` floats per sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalityShape {
    pub token_count: usize,
    pub native_dim: usize,
}

impl ModalityShape {
    pub fn numel(self) -> usize {
        self.token_count * self.native_dim
    }
}

/// Shapes of all three modalities.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalityShapes {
    pub image: ModalityShape,
    pub text: ModalityShape,
    pub tabular: ModalityShape,
}

impl ModalityShapes {
    pub fn get(&self, m: ModalityId) -> ModalityShape {
        match m {
            ModalityId::Image => self.image,
            ModalityId::Text => self.text,
            ModalityId::Tabular => self.tabular,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModalityHeader {
    pub id: ModalityId,
    pub shape: ModalityShape,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetHeader {
    /// Declared modalities in file order.
    pub modalities: Vec<ModalityHeader>,
    pub label_count: usize,
}

impl DatasetHeader {
    pub fn shape(&self, m: ModalityId) -> Option<ModalityShape> {
        self.modalities.iter().find(|h| h.id == m).map(|h| h.shape)
    }

    /// Shapes of all three modalities; fails if one is not declared.
    pub fn shapes(&self) -> Result<ModalityShapes> {
        let get = |m: ModalityId| {
            self.shape(m)
                .ok_or_else(|| Error::Data(format!("dataset does not declare the {m} modality")))
        };
        Ok(ModalityShapes {
            image: get(ModalityId::Image)?,
            text: get(ModalityId::Text)?,
            tabular: get(ModalityId::Tabular)?,
        })
    }

    pub fn declared(&self) -> ModalityMask {
        self.modalities
            .iter()
            .fold(ModalityMask::NONE, |mask, h| mask.with(h.id))
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = ModalityMask::NONE;
        for h in &self.modalities {
            if seen.contains(h.id) {
                return Err(Error::Data(format!("modality {} declared twice", h.id)));
            }
            seen = seen.with(h.id);
            if h.shape.token_count == 0 || h.shape.native_dim == 0 {
                return Err(Error::Data(format!("modality {} has a zero dimension", h.id)));
            }
        }
        if self.label_count == 0 || self.label_count > MAX_LABELS {
            return Err(Error::Data(format!(
                "label count {} outside 1..={MAX_LABELS}",
                self.label_count
            )));
        }
        Ok(())
    }
}

/// Multi-label target as a bit set (bit `i` set = label `i` positive).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct LabelSet(pub u16);

impl LabelSet {
    pub fn from_bools(labels: &[bool]) -> Self {
        Self(
            labels
                .iter()
                .enumerate()
                .fold(0u16, |acc, (i, &b)| acc | (u16::from(b) << i)),
        )
    }

    pub fn get(self, i: usize) -> bool {
        self.0 & (1 << i) != 0
    }

    pub fn to_bools(self, count: usize) -> Vec<bool> {
        (0..count).map(|i| self.get(i)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Row-major `token_count × native_dim` matrix per stored modality,
    /// indexed by [`ModalityId::index`].
    pub embeddings: [Option<Vec<f32>>; 3],
    pub labels: LabelSet,
}

impl Sample {
    pub fn presence(&self) -> ModalityMask {
        ModalityId::ALL
            .into_iter()
            .filter(|m| self.embeddings[m.index()].is_some())
            .fold(ModalityMask::NONE, ModalityMask::with)
    }

    pub fn embedding(&self, m: ModalityId) -> Option<&[f32]> {
        self.embeddings[m.index()].as_deref()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Checks every record against the header; errors name the sample.
    pub fn validate(&self) -> Result<()> {
        self.header.validate()?;
        let declared = self.header.declared();
        for (i, s) in self.samples.iter().enumerate() {
            for m in ModalityId::ALL {
                match (s.embedding(m), self.header.shape(m)) {
                    (Some(_), None) => {
                        return Err(Error::Data(format!(
                            "sample {i}: stores {m} which the header does not declare"
                        )))
                    }
                    (Some(e), Some(shape)) if e.len() != shape.numel() => {
                        return Err(Error::Data(format!(
                            "sample {i}: {m} has {} values, header declares {}×{}",
                            e.len(),
                            shape.token_count,
                            shape.native_dim
                        )))
                    }
                    (Some(e), Some(_)) if !e.iter().all(|v| v.is_finite()) => {
                        return Err(Error::Data(format!("sample {i}: {m} holds a non-finite value")))
                    }
                    _ => {}
                }
            }
            debug_assert_eq!(s.presence().intersect(declared), s.presence());
            if s.labels.0 >> self.header.label_count != 0 {
                return Err(Error::Data(format!(
                    "sample {i}: label bits beyond the {} declared labels",
                    self.header.label_count
                )));
            }
        }
        Ok(())
    }

    pub fn view(&self) -> DatasetView<'_> {
        DatasetView {
            dataset: self,
            indices: (0..self.samples.len()).collect(),
            mask: ModalityMask::ALL,
        }
    }

    pub fn subset(&self, indices: &[usize]) -> DatasetView<'_> {
        DatasetView {
            dataset: self,
            indices: indices.to_vec(),
            mask: ModalityMask::ALL,
        }
    }

    /// Fraction of positives per label.
    pub fn label_rates(&self) -> Vec<f64> {
        let n = self.samples.len().max(1) as f64;
        (0..self.header.label_count)
            .map(|l| self.samples.iter().filter(|s| s.labels.get(l)).count() as f64 / n)
            .collect()
    }
}

/// Index subset of a dataset with a view-level modality mask. Masking never
/// touches the stored embeddings.
#[derive(Clone, Debug)]
pub struct DatasetView<'a> {
    pub dataset: &'a Dataset,
    pub indices: Vec<usize>,
    pub mask: ModalityMask,
}

impl<'a> DatasetView<'a> {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn sample(&self, pos: usize) -> &'a Sample {
        &self.dataset.samples[self.indices[pos]]
    }

    pub fn samples(&self) -> impl Iterator<Item = &'a Sample> + '_ {
        self.indices.iter().map(|&i| &self.dataset.samples[i])
    }

    /// Effective presence of the sample at `pos` after the view mask.
    pub fn presence(&self, pos: usize) -> ModalityMask {
        self.sample(pos).presence().intersect(self.mask)
    }

    pub fn with_mask(&self, mask: ModalityMask) -> DatasetView<'a> {
        DatasetView {
            mask,
            ..self.clone()
        }
    }

    pub fn labels(&self, label: usize) -> Vec<bool> {
        self.samples().map(|s| s.labels.get(label)).collect()
    }
}

/// Clears the presence of `m` for every sample of the view.
pub fn mask_modality<'a>(view: &DatasetView<'a>, m: ModalityId) -> DatasetView<'a> {
    view.with_mask(view.mask.without(m))
}

/// Train/validation/test index lists.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle into `⌊0.8n⌋ / ⌊0.1n⌋ / remainder`.
pub fn split_811(dataset: &Dataset, seed: u64) -> Result<Split> {
    split_indices(dataset.len(), seed)
}

pub fn split_indices(n: usize, seed: u64) -> Result<Split> {
    if n < 10 {
        return Err(Error::Config(format!("need at least 10 samples to split, got {n}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = n * 8 / 10;
    let n_val = n / 10;
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    Ok(Split {
        train: idx,
        val,
        test,
    })
}
