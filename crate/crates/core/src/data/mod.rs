//! Synthetic annotated images, splits, the annotation oracle and on-disk storage.

mod generate;
mod split;
mod store;

pub use generate::{generate, LesionKind, TAG_SIZE};
pub use split::{split, split_with_seed, PoolState};
pub use store::{load, save, MANIFEST_VERSION};

use crate::error::{Error, Result};
use crate::explain::ExpertMask;
use crate::numeric::Tensor;

pub type SampleId = usize;

/// Generator ground truth kept alongside each sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Provenance {
    pub lesion: LesionKind,
    /// Class code of the stamped corner tag, if one was stamped.
    pub tag: Option<usize>,
}

impl Provenance {
    /// The tag is present and codes the sample's class.
    pub fn shortcut(&self, label: usize) -> bool {
        self.tag == Some(label)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: SampleId,
    /// `[1,H,W]` grayscale, values in `[0,1]`.
    pub image: Tensor,
    pub label: Option<usize>,
    pub esm: Option<ExpertMask>,
    pub provenance: Provenance,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn require_label(&self) -> Result<usize> {
        self.label
            .ok_or_else(|| Error::contract(format!("sample {} has no label", self.id)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub image_size: usize,
    pub pool: usize,
    pub seed_set: usize,
    pub test: usize,
    /// Standard deviation of the background texture noise.
    pub noise: f64,
    /// Stamp the class-coded corner tag at all.
    pub stamp_tags: bool,
    /// Probability that a pool/seed tag codes the true class; otherwise it
    /// codes a uniformly chosen wrong class.
    pub shortcut_rate: f64,
    /// The same for test tags. `1/N` makes the tag independent of the label.
    pub test_shortcut_rate: f64,
    /// Probability that a generated lesion is drawn at reduced contrast.
    pub faint_rate: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_classes: 3,
            image_size: 64,
            pool: 600,
            seed_set: 30,
            test: 300,
            noise: 0.08,
            stamp_tags: true,
            shortcut_rate: 0.9,
            test_shortcut_rate: 1.0 / 3.0,
            faint_rate: 0.0,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn total(&self) -> usize {
        self.pool + self.seed_set + self.test
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_classes;
        if n < 2 || n > LesionKind::ALL.len() {
            return Err(Error::Config(format!(
                "num_classes must be in 2..={}, got {n}",
                LesionKind::ALL.len()
            )));
        }
        for (name, c) in [("pool", self.pool), ("seed_set", self.seed_set), ("test", self.test)] {
            if c < n {
                return Err(Error::Config(format!("{name} count {c} is below the class count {n}")));
            }
        }
        for (name, p) in [
            ("shortcut_rate", self.shortcut_rate),
            ("test_shortcut_rate", self.test_shortcut_rate),
            ("faint_rate", self.faint_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0,1], got {p}")));
            }
        }
        if self.noise < 0.0 || !self.noise.is_finite() {
            return Err(Error::Config(format!("noise must be non-negative, got {}", self.noise)));
        }
        if !self.image_size.is_multiple_of(8) {
            return Err(Error::Config(format!(
                "image size {} must be a multiple of 8",
                self.image_size
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Seed,
    Pool,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Seed => "seed",
            Split::Pool => "pool",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "seed" => Some(Split::Seed),
            "pool" => Some(Split::Pool),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// A generated dataset with full ground truth.
///
/// `samples[i].id == i`. Labels and masks are always present here; the
/// active-learning loop only reads them for pool samples through the
/// [`Oracle`] or, for scoring masks, through [`Dataset::esm`].
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub samples: Vec<Sample>,
    /// Split each sample was generated for (tag statistics differ by split).
    pub splits: Vec<Split>,
}

impl Dataset {
    pub fn get(&self, id: SampleId) -> Result<&Sample> {
        self.samples
            .get(id)
            .ok_or_else(|| Error::contract(format!("unknown sample id {id}")))
    }

    pub fn ids_in(&self, split: Split) -> Vec<SampleId> {
        self.splits
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn esm(&self, id: SampleId) -> Result<&ExpertMask> {
        self.get(id)?
            .esm
            .as_ref()
            .ok_or_else(|| Error::contract(format!("sample {id} has no expert mask")))
    }

    pub fn oracle(&self) -> Oracle<'_> {
        Oracle { dataset: self }
    }
}

/// Simulated expert: answers label and mask queries from generator ground truth.
#[derive(Clone, Copy)]
pub struct Oracle<'a> {
    dataset: &'a Dataset,
}

impl Oracle<'_> {
    pub fn annotate(&self, id: SampleId) -> Result<(usize, ExpertMask)> {
        let s = self.dataset.get(id)?;
        let label = s.require_label()?;
        let esm = self.dataset.esm(id)?.clone();
        Ok((label, esm))
    }
}
