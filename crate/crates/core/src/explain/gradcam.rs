use super::{dice, AttentionMap, ExpertMask};
use crate::error::{Error, Result};
use crate::model::{Classifier, ScoredTrace};
use crate::numeric::{argmax, ops, softmax, Tape, Tensor, Var};

/// Where the Grad-CAM channel weights come from.
#[derive(Clone, Copy, Debug)]
pub enum CamWeights<'a> {
    /// Spatial mean of the class-score gradient at the cam target.
    FromGradient,
    /// Fixed weights, e.g. to replay a loss with the weights of another pass.
    Frozen(&'a [f64]),
}

/// Grad-CAM channel weights: spatial mean of `∂score / ∂A_c`.
pub fn channel_weights(tape: &Tape, class_score: Var, cam_target: Var) -> Result<Vec<f64>> {
    let g = tape.grad_of(class_score, cam_target)?;
    let s = g.shape();
    let plane = s[1] * s[2];
    Ok(g.data().chunks_exact(plane).map(|c| c.iter().sum::<f64>() / plane as f64).collect())
}

fn raw_cam(tape: &Tape, cam_target: Var, weights: &[f64], out_h: usize, out_w: usize) -> Result<AttentionMap> {
    let a = tape.value(cam_target);
    let s = a.shape();
    let plane = s[1] * s[2];
    let mut m = vec![0.0; plane];
    for (c, &w) in weights.iter().enumerate() {
        for (o, v) in m.iter_mut().zip(&a.data()[c * plane..(c + 1) * plane]) {
            *o += w * v;
        }
    }
    let m = ops::relu(&Tensor::new(&[s[1], s[2]], m)?);
    let up = ops::upsample_bilinear(&m, out_h, out_w)?;
    // bilinear weights are convex, so the result stays non-negative up to rounding
    let up = ops::relu(&up);
    AttentionMap::raw(up)
}

fn image_hw(image: &Tensor) -> Result<(usize, usize)> {
    match image.shape() {
        [_, h, w] => Ok((*h, *w)),
        s => Err(Error::dim("image", format!("expected [C,H,W], got {s:?}"))),
    }
}

/// Unit-range Grad-CAM map of class `k` at the image's resolution.
pub fn grad_cam(classifier: &Classifier, image: &Tensor, k: usize) -> Result<AttentionMap> {
    classifier.check_class(k)?;
    let (h, w) = image_hw(image)?;
    let mut tape = Tape::new();
    let t = classifier.trace(&mut tape, image)?;
    let s = classifier.class_score_var(&mut tape, &t, k)?;
    let weights = channel_weights(&tape, s, t.trace.cam_target)?;
    Ok(raw_cam(&tape, t.trace.cam_target, &weights, h, w)?.unit_range())
}

/// Prediction and attention for one image from a single forward pass.
#[derive(Clone, Debug)]
pub struct Inspection {
    pub probs: Vec<f64>,
    pub predicted: usize,
    /// Unit-range Grad-CAM of the predicted class.
    pub cam: AttentionMap,
}

impl Inspection {
    /// Dice between the attention map and `esm`, optionally binarizing the map first.
    pub fn alignment(&self, esm: &ExpertMask, binarize: Option<f64>) -> Result<f64> {
        match binarize {
            Some(th) => dice(self.cam.binarize(th).grid(), esm.grid()),
            None => dice(self.cam.grid(), esm.grid()),
        }
    }
}

pub fn inspect(classifier: &Classifier, image: &Tensor) -> Result<Inspection> {
    let (h, w) = image_hw(image)?;
    let mut tape = Tape::new();
    let t = classifier.trace(&mut tape, image)?;
    let probs = softmax(tape.value(t.scores).data())?;
    let predicted = argmax(&probs);
    let s = classifier.class_score_var(&mut tape, &t, predicted)?;
    let weights = channel_weights(&tape, s, t.trace.cam_target)?;
    let cam = raw_cam(&tape, t.trace.cam_target, &weights, h, w)?.unit_range();
    Ok(Inspection { probs, predicted, cam })
}

/// `(1 - Dice(CAM of the predicted class, esm), predicted class)`.
pub fn misalignment(classifier: &Classifier, image: &Tensor, esm: &ExpertMask) -> Result<(f64, usize)> {
    let (h, w) = image_hw(image)?;
    if (esm.height(), esm.width()) != (h, w) {
        return Err(Error::dim(
            "mask",
            format!("mask is {}x{}, image is {h}x{w}", esm.height(), esm.width()),
        ));
    }
    let ins = inspect(classifier, image)?;
    Ok((1.0 - ins.alignment(esm, None)?, ins.predicted))
}

/// Record the differentiable explanation loss `1 - Dice(CAM_k / max, esm)`.
///
/// The channel weights are constants on the tape: gradients reach the
/// parameters only through the cam-target activations. Returns the loss
/// variable and the weights that were used.
pub fn explanation_loss_on_tape(
    tape: &mut Tape,
    cam_target: Var,
    class_score: Var,
    esm: &ExpertMask,
    weights: CamWeights<'_>,
) -> Result<(Var, Vec<f64>)> {
    let weights = match weights {
        CamWeights::FromGradient => channel_weights(tape, class_score, cam_target)?,
        CamWeights::Frozen(w) => w.to_vec(),
    };
    let m = tape.channel_weighted_sum(cam_target, &weights)?;
    let m = tape.relu(m);
    let m = tape.upsample_bilinear(m, esm.height(), esm.width())?;
    let m = tape.normalize_by_max(m);
    let loss = tape.dice_loss(m, esm.grid().data())?;
    Ok((loss, weights))
}

pub fn explanation_loss(classifier: &Classifier, image: &Tensor, y_true: usize, esm: &ExpertMask) -> Result<f64> {
    let mut tape = Tape::new();
    let t: ScoredTrace = classifier.trace(&mut tape, image)?;
    let s = classifier.class_score_var(&mut tape, &t, y_true)?;
    let (loss, _) = explanation_loss_on_tape(&mut tape, t.trace.cam_target, s, esm, CamWeights::FromGradient)?;
    Ok(tape.value(loss).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Architecture, Head, SmallCnn};
    use crate::numeric::grad_check;

    /// One conv block with a single output channel; the linear head reads
    /// embedding coordinate 0, which copies the pooled channel.
    fn single_channel(head_sign: f64) -> Classifier {
        let arch = Architecture {
            in_channels: 1,
            widths: vec![1],
            kernel: 3,
            embed_dim: 1,
            num_classes: 2,
        };
        let mut net = SmallCnn::new(arch, 0).unwrap();
        let k = net.param_mut("conv0.weight").unwrap();
        k.data_mut().fill(0.0);
        k.data_mut()[4] = 1.0;
        net.param_mut("embed.weight").unwrap().data_mut()[0] = 1.0;
        let hw = net.param_mut("head.weight").unwrap();
        hw.data_mut().copy_from_slice(&[head_sign, 0.0]);
        Classifier::new(net, Head::Linear)
    }

    fn blob_image() -> Tensor {
        let mut v = vec![0.0; 64];
        v[2 * 8 + 5] = 1.0;
        v[2 * 8 + 6] = 0.6;
        v[3 * 8 + 5] = 0.4;
        Tensor::new(&[1, 8, 8], v).unwrap()
    }

    #[test]
    fn positive_head_weight_peaks_at_activation_argmax() {
        let c = single_channel(1.0);
        let cam = grad_cam(&c, &blob_image(), 0).unwrap();
        assert_eq!(cam.peak(), (2, 5));
        assert_eq!(cam.grid().data().iter().copied().fold(0.0, f64::max), 1.0);
        // raw map is proportional to the (identity-conv, ReLU'd) input
        let mut tape = Tape::new();
        let t = c.trace(&mut tape, &blob_image()).unwrap();
        let s = c.class_score_var(&mut tape, &t, 0).unwrap();
        let w = channel_weights(&tape, s, t.trace.cam_target).unwrap();
        assert!(w[0] > 0.0);
    }

    #[test]
    fn negative_head_weight_kills_map() {
        let c = single_channel(-1.0);
        let mut tape = Tape::new();
        let t = c.trace(&mut tape, &blob_image()).unwrap();
        let s = c.class_score_var(&mut tape, &t, 0).unwrap();
        assert!(channel_weights(&tape, s, t.trace.cam_target).unwrap()[0] < 0.0);
        let cam = grad_cam(&c, &blob_image(), 0).unwrap();
        assert!(cam.grid().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn class_out_of_range() {
        let c = single_channel(1.0);
        assert!(matches!(grad_cam(&c, &blob_image(), 2), Err(Error::Contract(_))));
    }

    #[test]
    fn upsampled_quadrant() {
        let raw = Tensor::new(&[2, 2], vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        let up = ops::upsample_bilinear(&raw, 4, 4).unwrap();
        let i = argmax(up.data());
        let (r, c) = (i / 4, i % 4);
        assert!(r < 2 && c >= 2, "peak at ({r},{c})");
    }

    #[test]
    fn rescaling_score_leaves_unit_map_unchanged() {
        let mut c = SmallCnnFixture::classifier(11);
        let img = SmallCnnFixture::image();
        let base = grad_cam(&c, &img, 1).unwrap();
        for p in ["head.weight", "head.bias"] {
            c.net.param_mut(p).unwrap().data_mut().iter_mut().for_each(|v| *v *= 3.7);
        }
        let scaled = grad_cam(&c, &img, 1).unwrap();
        assert!(base.grid().max_abs_diff(scaled.grid()) < 1e-9);
    }

    #[test]
    fn misalignment_complements_dice() {
        let c = SmallCnnFixture::classifier(3);
        let img = SmallCnnFixture::image();
        let mut m = vec![0.0; 256];
        for r in 4..10 {
            for col in 6..12 {
                m[r * 16 + col] = 1.0;
            }
        }
        let esm = ExpertMask::new(Tensor::new(&[16, 16], m).unwrap()).unwrap();
        let (d, yhat) = misalignment(&c, &img, &esm).unwrap();
        let cam = grad_cam(&c, &img, yhat).unwrap();
        assert_eq!(d + dice(cam.grid(), esm.grid()).unwrap(), 1.0);
        assert!((0.0..=1.0).contains(&d));
        assert_eq!(yhat, c.predict(&img).unwrap());
        let wrong = ExpertMask::new(Tensor::zeros(&[8, 8])).unwrap();
        assert!(matches!(misalignment(&c, &img, &wrong), Err(Error::Dimension { .. })));
    }

    #[test]
    fn zero_cam_is_fully_misaligned() {
        let c = single_channel(-1.0);
        let esm = ExpertMask::new(Tensor::filled(&[8, 8], 1.0)).unwrap();
        let (d, _) = misalignment(&c, &blob_image(), &esm).unwrap();
        // class 0 has score -a <= 0 = class 1 score, so class 1 (zero head row) may be predicted;
        // either way the CAM is zero
        assert_eq!(d, 1.0);
    }

    #[test]
    fn explanation_loss_zero_when_aligned() {
        let c = single_channel(1.0);
        let img = Tensor::new(&[1, 8, 8], (0..64).map(|i| if (i / 8) % 7 == 0 || i % 8 == 0 { 0.0 } else { 1.0 }).collect()).unwrap();
        // the map equals the upsampled cam target, which we use as the mask after normalizing
        let mut tape = Tape::new();
        let t = c.trace(&mut tape, &img).unwrap();
        let a = tape.value(t.trace.cam_target).clone().reshape(&[8, 8]).unwrap();
        let mx = a.data().iter().copied().fold(0.0, f64::max);
        let m = Tensor::new(&[8, 8], a.data().iter().map(|v| v / mx).collect()).unwrap();
        let esm = ExpertMask::new(m).unwrap();
        let l = explanation_loss(&c, &img, 0, &esm).unwrap();
        assert!(l.abs() < 1e-12, "{l}");
    }

    #[test]
    fn explanation_loss_gradient_under_stop_gradient() {
        let c = SmallCnnFixture::classifier(5);
        let img = SmallCnnFixture::image();
        let mut m = vec![0.0; 256];
        for r in 3..9 {
            for col in 2..10 {
                m[r * 16 + col] = 1.0;
            }
        }
        let esm = ExpertMask::new(Tensor::new(&[16, 16], m).unwrap()).unwrap();
        let mut tape = Tape::new();
        let t = c.trace(&mut tape, &img).unwrap();
        let s = c.class_score_var(&mut tape, &t, 2).unwrap();
        let weights = channel_weights(&tape, s, t.trace.cam_target).unwrap();

        let point = c.net.param("conv1.weight").unwrap().clone();
        let err = grad_check(
            |tape, k| {
                let mut p = c.net.bind(tape);
                p.0[2] = k;
                let x = c.net.input(tape, &img)?;
                let tr = c.net.forward(tape, &p, x)?;
                let scores = c.scores_from_embedding(tape, &p, tr.embedding)?;
                let s = tape.pick(scores, 2)?;
                let (l, _) = explanation_loss_on_tape(tape, tr.cam_target, s, &esm, CamWeights::Frozen(&weights))?;
                Ok(l)
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn class_score_gradient_wrt_cam_target() {
        let c = SmallCnnFixture::classifier(8);
        let img = SmallCnnFixture::image();
        let mut tape = Tape::new();
        let t = c.trace(&mut tape, &img).unwrap();
        let a = tape.value(t.trace.cam_target).clone();
        let err = grad_check(
            |tape, a| {
                let p = c.net.bind(tape);
                let e = c.net.embed_from_cam_target(tape, &p, a)?;
                let s = c.scores_from_embedding(tape, &p, e)?;
                tape.pick(s, 1)
            },
            &a,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-3, "{err}");
    }

    struct SmallCnnFixture;

    impl SmallCnnFixture {
        fn classifier(seed: u64) -> Classifier {
            Classifier::new(SmallCnn::new(Architecture::default(), seed).unwrap(), Head::Linear)
        }

        fn image() -> Tensor {
            let v = (0..256)
                .map(|i| {
                    let (r, c) = ((i / 16) as f64, (i % 16) as f64);
                    (0.5 + 0.5 * (r * 0.7).sin() * (c * 0.45).cos()).clamp(0.0, 1.0)
                })
                .collect();
            Tensor::new(&[1, 16, 16], v).unwrap()
        }
    }
}
