use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numeric::{Tape, Tensor, Var};

/// Layer widths and sizes of a [`SmallCnn`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub in_channels: usize,
    /// Output channels of each conv → relu → 2×2 avg-pool block.
    pub widths: Vec<usize>,
    pub kernel: usize,
    pub embed_dim: usize,
    pub num_classes: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            in_channels: 1,
            widths: vec![8, 16, 32],
            kernel: 3,
            embed_dim: 64,
            num_classes: 3,
        }
    }
}

impl Architecture {
    pub fn with_classes(num_classes: usize) -> Self {
        Self {
            num_classes,
            ..Self::default()
        }
    }

    /// Parameter names and shapes in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut c_in = self.in_channels;
        for (i, &c_out) in self.widths.iter().enumerate() {
            out.push((format!("conv{i}.weight"), vec![c_out, c_in, self.kernel, self.kernel]));
            out.push((format!("conv{i}.bias"), vec![c_out]));
            c_in = c_out;
        }
        out.push(("embed.weight".into(), vec![self.embed_dim, c_in]));
        out.push(("embed.bias".into(), vec![self.embed_dim]));
        out.push(("head.weight".into(), vec![self.num_classes, self.embed_dim]));
        out.push(("head.bias".into(), vec![self.num_classes]));
        out
    }

    pub fn cam_channels(&self) -> usize {
        *self.widths.last().expect("at least one conv block")
    }

    fn validate(&self) -> Result<()> {
        if self.widths.is_empty() {
            return Err(Error::Config("architecture needs at least one conv block".into()));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("kernel size {} must be odd", self.kernel)));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if self.in_channels == 0 || self.embed_dim == 0 || self.widths.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// The convolutional embedding network plus its linear classification head.
///
/// Each block is `conv(k×k, pad k/2) → relu → avg-pool 2×2`. The post-ReLU
/// activation of the last block is the Grad-CAM target (`"cam_target"`).
/// A global average pool and a dense layer produce the embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct SmallCnn {
    arch: Architecture,
    params: Vec<Param>,
}

/// Parameter leaves bound onto a tape, in [`Architecture::layout`] order.
#[derive(Clone, Debug)]
pub struct ParamVars(pub Vec<Var>);

/// Intermediate values of one forward pass that later stages need.
#[derive(Clone, Copy, Debug)]
pub struct Trace {
    pub cam_target: Var,
    pub embedding: Var,
}

impl SmallCnn {
    pub const CAM_TARGET: &'static str = "cam_target";

    /// He-normal conv kernels, scaled-normal dense weights, zero biases.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = arch
            .layout()
            .into_iter()
            .map(|(name, shape)| {
                let value = if name.ends_with(".bias") {
                    Tensor::zeros(&shape)
                } else {
                    let fan_in: usize = shape[1..].iter().product();
                    let std = (2.0 / fan_in as f64).sqrt();
                    let normal = Normal::new(0.0, std).expect("positive std");
                    let n = shape.iter().product();
                    Tensor::new(&shape, (0..n).map(|_| normal.sample(&mut rng)).collect())
                        .expect("layout shapes are positive")
                };
                Param { name, value }
            })
            .collect();
        Ok(Self { arch, params })
    }

    /// Build from named tensors, checking them against the architecture's layout.
    pub fn from_params(arch: Architecture, params: Vec<Param>) -> Result<Self> {
        arch.validate()?;
        let layout = arch.layout();
        if layout.len() != params.len() {
            return Err(Error::dim(
                "parameters",
                format!("expected {} tensors, got {}", layout.len(), params.len()),
            ));
        }
        for ((name, shape), p) in layout.iter().zip(&params) {
            if &p.name != name || p.value.shape() != shape.as_slice() {
                return Err(Error::dim(
                    name.clone(),
                    format!("expected {name} {shape:?}, got {} {:?}", p.name, p.value.shape()),
                ));
            }
        }
        Ok(Self { arch, params })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.value)
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// All parameters concatenated in layout order.
    pub fn flatten(&self) -> Tensor {
        Tensor::vector(self.params.iter().flat_map(|p| p.value.data().iter().copied()).collect())
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::dim(
                "parameters",
                format!("expected {} values, got {}", self.num_params(), flat.len()),
            ));
        }
        let mut at = 0;
        for p in &mut self.params {
            let n = p.value.len();
            p.value.data_mut().copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape) -> ParamVars {
        ParamVars(self.params.iter().map(|p| tape.leaf(p.value.clone())).collect())
    }

    /// Bind parameters as slices of one flat leaf (see [`SmallCnn::flatten`]).
    pub fn bind_flat(&self, tape: &mut Tape, flat: Var) -> Result<ParamVars> {
        let mut at = 0;
        let mut vars = Vec::with_capacity(self.params.len());
        for p in &self.params {
            vars.push(tape.slice(flat, at, p.value.shape())?);
            at += p.value.len();
        }
        Ok(ParamVars(vars))
    }

    /// Per-image, per-channel standardization to zero mean and unit variance.
    ///
    /// A constant channel is only centred.
    pub fn standardize(image: &Tensor) -> Result<Tensor> {
        let shape = image.shape();
        if shape.len() != 3 {
            return Err(Error::dim("image", format!("expected [C, H, W], got {shape:?}")));
        }
        let plane = shape[1] * shape[2];
        let mut out = image.clone();
        for ch in out.data_mut().chunks_exact_mut(plane) {
            let n = plane as f64;
            let mean = ch.iter().sum::<f64>() / n;
            let sd = (ch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
            let scale = if sd > 1e-12 { 1.0 / sd } else { 1.0 };
            for v in ch.iter_mut() {
                *v = (*v - mean) * scale;
            }
        }
        Ok(out)
    }

    /// Standardized image recorded as a constant input node.
    pub fn input(&self, tape: &mut Tape, image: &Tensor) -> Result<Var> {
        Ok(tape.constant(Self::standardize(image)?))
    }

    /// Conv blocks up to the post-ReLU activation of the last block.
    pub fn cam_target(&self, tape: &mut Tape, p: &ParamVars, image: Var) -> Result<Var> {
        let shape = tape.value(image).shape();
        if shape.len() != 3 || shape[0] != self.arch.in_channels {
            return Err(Error::dim(
                "image",
                format!("expected [{}, H, W], got {shape:?}", self.arch.in_channels),
            ));
        }
        let pad = self.arch.kernel / 2;
        let mut x = image;
        let blocks = self.arch.widths.len();
        for i in 0..blocks {
            let y = tape.conv2d(x, p.0[2 * i], p.0[2 * i + 1], 1, pad)?;
            let y = tape.relu(y);
            if i + 1 == blocks {
                return Ok(y);
            }
            x = tape.avg_pool(y, 2)?;
        }
        unreachable!("validated non-empty widths")
    }

    /// Pool, global-average and project the cam target to the embedding.
    pub fn embed_from_cam_target(&self, tape: &mut Tape, p: &ParamVars, cam_target: Var) -> Result<Var> {
        let b = self.arch.widths.len();
        let pooled = tape.avg_pool(cam_target, 2)?;
        let g = tape.global_avg_pool(pooled)?;
        tape.dense(g, p.0[2 * b], p.0[2 * b + 1])
    }

    pub fn forward(&self, tape: &mut Tape, p: &ParamVars, image: Var) -> Result<Trace> {
        let cam_target = self.cam_target(tape, p, image)?;
        let embedding = self.embed_from_cam_target(tape, p, cam_target)?;
        Ok(Trace { cam_target, embedding })
    }

    /// Logits of the linear head.
    pub fn linear_logits(&self, tape: &mut Tape, p: &ParamVars, embedding: Var) -> Result<Var> {
        let b = self.arch.widths.len();
        tape.dense(embedding, p.0[2 * b + 2], p.0[2 * b + 3])
    }

    /// Embedding of one image, without recording gradients.
    pub fn embed(&self, image: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = ParamVars(self.params.iter().map(|q| tape.constant(q.value.clone())).collect());
        let x = self.input(&mut tape, image)?;
        let t = self.forward(&mut tape, &p, x)?;
        Ok(tape.value(t.embedding).data().to_vec())
    }
}
