use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Dataset, DatasetSpec, Provenance, Sample, Split};
use crate::error::{Error, Result};
use crate::explain::ExpertMask;
use crate::numeric::Tensor;

/// Side of the square shortcut tag, in pixels.
pub const TAG_SIZE: usize = 6;
/// Offset of the tag from the top-left corner.
const TAG_OFFSET: usize = 2;
/// Lesions keep this many pixels of clearance from the tag.
const TAG_CLEARANCE: usize = 2;

/// Lesion shape; the shape alone determines the class.
///
/// All three shapes have (approximately) the same area for a given radius
/// so no single intensity statistic separates the classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LesionKind {
    Disc,
    Square,
    Annulus,
}

impl LesionKind {
    pub const ALL: [LesionKind; 3] = [LesionKind::Disc, LesionKind::Square, LesionKind::Annulus];

    pub fn for_class(class: usize) -> Self {
        Self::ALL[class]
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LesionKind::Disc => "disc",
            LesionKind::Square => "square",
            LesionKind::Annulus => "annulus",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }

    /// Half-extent of the footprint's bounding box for base radius `r`.
    fn half_extent(self, r: f64) -> f64 {
        match self {
            LesionKind::Disc => r,
            LesionKind::Square => r * std::f64::consts::PI.sqrt() / 2.0,
            LesionKind::Annulus => ANNULUS_OUTER * r,
        }
    }

    fn contains(self, dy: f64, dx: f64, r: f64) -> bool {
        let d2 = dy * dy + dx * dx;
        match self {
            LesionKind::Disc => d2 <= r * r,
            LesionKind::Square => {
                let h = self.half_extent(r);
                dy.abs() <= h && dx.abs() <= h
            }
            LesionKind::Annulus => {
                let outer = ANNULUS_OUTER * r;
                // π(R² − ρ²) = πr²
                let inner2 = outer * outer - r * r;
                d2 <= outer * outer && d2 > inner2
            }
        }
    }
}

const ANNULUS_OUTER: f64 = 1.35;
/// Base lesion radius at 64×64; scales linearly with image size.
const RADIUS_RANGE: (f64, f64) = (6.0, 8.0);
const LESION_CONTRAST: (f64, f64) = (0.55, 0.75);
const FAINT_CONTRAST: (f64, f64) = (0.12, 0.2);

fn tag_level(code: usize, num_classes: usize) -> f64 {
    0.35 + 0.6 * code as f64 / (num_classes - 1) as f64
}

/// Smoothed non-negative background texture with standard deviation ~`sigma`.
fn background(size: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let white: Vec<f64> = (0..size * size).map(|_| StandardNormal.sample(rng)).collect();
    if sigma == 0.0 {
        return vec![0.0; size * size];
    }
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let mut acc = 0.0;
            let mut n = 0.0;
            for yy in y.saturating_sub(1)..(y + 2).min(size) {
                for xx in x.saturating_sub(1)..(x + 2).min(size) {
                    acc += white[yy * size + xx];
                    n += 1.0;
                }
            }
            // a 3x3 box mean of unit normals has std 1/3
            let z = 3.0 * acc / n;
            out[y * size + x] = (sigma * (1.5 + z)).clamp(0.0, 1.0);
        }
    }
    out
}

struct Drawn {
    image: Vec<f64>,
    mask: Vec<f64>,
}

fn draw(
    size: usize,
    kind: LesionKind,
    tag: Option<(usize, usize)>,
    spec: &DatasetSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Drawn> {
    let mut image = background(size, spec.noise, rng);
    let scale = size as f64 / 64.0;
    let r = rng.random_range(RADIUS_RANGE.0 * scale..RADIUS_RANGE.1 * scale);
    let half = kind.half_extent(r);
    let reach = half.ceil() as usize + 1;
    let tag_end = TAG_OFFSET + TAG_SIZE + TAG_CLEARANCE;
    if 2 * reach + 1 > size || reach + tag_end >= size - reach {
        return Err(Error::contract(format!(
            "a {} lesion of radius {r:.2} cannot fit a {size}x{size} image",
            kind.as_str()
        )));
    }
    // centre so the bounding box stays inside and clear of the tag corner
    let (cy, cx) = loop {
        let cy = rng.random_range(reach..size - reach);
        let cx = rng.random_range(reach..size - reach);
        if cy - reach >= tag_end || cx - reach >= tag_end {
            break (cy as f64 + rng.random_range(-0.5..0.5), cx as f64 + rng.random_range(-0.5..0.5));
        }
    };
    let faint = rng.random::<f64>() < spec.faint_rate;
    let contrast = if faint {
        rng.random_range(FAINT_CONTRAST.0..FAINT_CONTRAST.1)
    } else {
        rng.random_range(LESION_CONTRAST.0..LESION_CONTRAST.1)
    };
    let mut mask = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            if kind.contains(y as f64 - cy, x as f64 - cx, r) {
                mask[y * size + x] = 1.0;
                let v = &mut image[y * size + x];
                *v = (*v + contrast).clamp(0.0, 1.0);
            }
        }
    }
    if let Some((code, n)) = tag {
        let level = tag_level(code, n);
        for y in TAG_OFFSET..TAG_OFFSET + TAG_SIZE {
            for x in TAG_OFFSET..TAG_OFFSET + TAG_SIZE {
                debug_assert_eq!(mask[y * size + x], 0.0);
                image[y * size + x] = level;
            }
        }
    }
    Ok(Drawn { image, mask })
}

/// Generate the pool/seed portion followed by the test portion.
///
/// Every image carries a corner tag (unless `stamp_tags` is off) whose code
/// agrees with the label at the portion's shortcut rate. Labels cycle through the classes within each portion, so class counts
/// differ by at most one. Output is a pure function of `spec`.
pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let n = spec.num_classes;
    let size = spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let train = spec.pool + spec.seed_set;
    let mut samples = Vec::with_capacity(spec.total());
    let mut splits = Vec::with_capacity(spec.total());
    for id in 0..spec.total() {
        let (portion, j) = if id < train {
            (Split::Pool, id)
        } else {
            (Split::Test, id - train)
        };
        let label = j % n;
        let kind = LesionKind::for_class(label);
        let rate = match portion {
            Split::Test => spec.test_shortcut_rate,
            _ => spec.shortcut_rate,
        };
        // the tag codes the true class with probability `rate`, otherwise a
        // uniformly drawn wrong class (a decoy)
        let code = if rng.random::<f64>() < rate {
            label
        } else {
            (label + rng.random_range(1..n)) % n
        };
        let tag = spec.stamp_tags.then_some(code);
        let drawn = draw(size, kind, tag.map(|c| (c, n)), spec, &mut rng)?;
        samples.push(Sample {
            id,
            image: Tensor::new(&[1, size, size], drawn.image)?,
            label: Some(label),
            esm: Some(ExpertMask::new(Tensor::new(&[size, size], drawn.mask)?)?),
            provenance: Provenance { lesion: kind, tag },
        });
        splits.push(portion);
    }
    Ok(Dataset {
        spec: spec.clone(),
        samples,
        splits,
    })
}
