//! Grad-CAM attention maps and their Dice alignment with expert masks.

mod gradcam;
mod pgm;

pub use gradcam::{
    channel_weights, explanation_loss, explanation_loss_on_tape, grad_cam, inspect, misalignment, CamWeights,
    Inspection,
};
pub use pgm::{parse_pgm, to_pgm};

use crate::error::{Error, Result};
use crate::numeric::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Normalization {
    Raw,
    UnitRange,
}

/// Non-negative `[H,W]` saliency grid at input resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    grid: Tensor,
    normalization: Normalization,
}

impl AttentionMap {
    pub fn raw(grid: Tensor) -> Result<Self> {
        if grid.shape().len() != 2 {
            return Err(Error::dim("attention map", format!("expected [H,W], got {:?}", grid.shape())));
        }
        if grid.data().iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::contract("attention map entries must be finite and non-negative"));
        }
        Ok(Self {
            grid,
            normalization: Normalization::Raw,
        })
    }

    /// Min-max rescale to `[0,1]`; a constant map becomes all zeros.
    pub fn unit_range(&self) -> Self {
        let d = self.grid.data();
        let lo = d.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let data = if hi > lo {
            d.iter().map(|v| (v - lo) / (hi - lo)).collect()
        } else {
            vec![0.0; d.len()]
        };
        Self {
            grid: Tensor::new(self.grid.shape(), data).expect("shape preserved"),
            normalization: Normalization::UnitRange,
        }
    }

    /// Binary map of entries at or above `threshold`.
    pub fn binarize(&self, threshold: f64) -> Self {
        let data = self.grid.data().iter().map(|&v| if v >= threshold { 1.0 } else { 0.0 }).collect();
        Self {
            grid: Tensor::new(self.grid.shape(), data).expect("shape preserved"),
            normalization: self.normalization,
        }
    }

    pub fn grid(&self) -> &Tensor {
        &self.grid
    }

    pub fn normalization(&self) -> Normalization {
        self.normalization
    }

    pub fn height(&self) -> usize {
        self.grid.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.grid.shape()[1]
    }

    /// Row-major index of the first maximum.
    pub fn peak(&self) -> (usize, usize) {
        let i = crate::numeric::argmax(self.grid.data());
        (i / self.width(), i % self.width())
    }
}

/// Expert region-of-interest annotation: `[H,W]` values in `[0,1]`.
///
/// An all-zero mask is allowed and means "no relevant region"; two empty
/// grids have Dice 1.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertMask {
    grid: Tensor,
}

impl ExpertMask {
    pub fn new(grid: Tensor) -> Result<Self> {
        if grid.shape().len() != 2 {
            return Err(Error::dim("mask", format!("expected [H,W], got {:?}", grid.shape())));
        }
        if grid.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::contract("mask entries must lie in [0, 1]"));
        }
        Ok(Self { grid })
    }

    pub fn grid(&self) -> &Tensor {
        &self.grid
    }

    pub fn height(&self) -> usize {
        self.grid.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.grid.shape()[1]
    }

    pub fn area(&self) -> f64 {
        self.grid.data().iter().sum()
    }
}

/// Soft Dice overlap `2Σ(a⊙b) / (Σa + Σb)`; 1 when both grids are empty.
pub fn dice(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            "grid",
            format!("dice of mismatched shapes {:?} and {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(crate::numeric::ops::soft_dice(a.data(), b.data()))
}
