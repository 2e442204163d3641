//! Composite-loss training: cross-entropy plus a weighted Grad-CAM Dice loss.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::cnn::{ParamVars, SmallCnn};
use super::head::{Classifier, Head, HeadMode, PrototypeSet};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::explain::{explanation_loss_on_tape, CamWeights};
use crate::numeric::{Tape, Tensor, Var};

/// How the explanation loss is differentiated through Grad-CAM.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CamGradient {
    /// Channel weights are constants; gradient flows through the activations only.
    #[default]
    StopGradient,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Weight of the explanation loss.
    pub alpha: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Minibatch size in linear mode.
    pub batch_size: usize,
    /// Support samples per class in a prototypical episode.
    pub shots: usize,
    /// Maximum query samples per class in a prototypical episode.
    pub queries: usize,
    pub head: HeadMode,
    pub cam_gradient: CamGradient,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.10,
            learning_rate: 0.05,
            epochs: 8,
            batch_size: 10,
            shots: 5,
            queries: 5,
            head: HeadMode::default(),
            cam_gradient: CamGradient::StopGradient,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.shots == 0 || self.queries == 0 || self.batch_size == 0 {
            return Err(Error::Config("shots, queries and batch size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Loss components of one batch or episode.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls: f64,
    pub exp: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    /// Mean total loss over the steps of each epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.epoch_losses.last().copied()
    }
}

/// Per-sample contributions recorded on a tape.
struct Terms {
    ce: Vec<Var>,
    exp: Vec<Var>,
}

impl Terms {
    fn combine(&self, tape: &mut Tape, alpha: f64) -> Result<(Var, LossBreakdown)> {
        let mean = |tape: &mut Tape, vars: &[Var]| -> Result<Option<Var>> {
            if vars.is_empty() {
                return Ok(None);
            }
            let s = tape.sum(vars)?;
            Ok(Some(tape.scale(s, 1.0 / vars.len() as f64)))
        };
        let cls = mean(tape, &self.ce)?.ok_or_else(|| Error::contract("loss over an empty batch"))?;
        let cls_v = tape.value(cls).item();
        match mean(tape, &self.exp)? {
            Some(exp) if alpha > 0.0 => {
                let exp_v = tape.value(exp).item();
                let weighted = tape.scale(exp, alpha);
                let total = tape.add(cls, weighted)?;
                let total_v = tape.value(total).item();
                Ok((total, LossBreakdown { total: total_v, cls: cls_v, exp: exp_v }))
            }
            Some(exp) => {
                let exp_v = tape.value(exp).item();
                Ok((cls, LossBreakdown { total: cls_v, cls: cls_v, exp: exp_v }))
            }
            None => Ok((cls, LossBreakdown { total: cls_v, cls: cls_v, exp: 0.0 })),
        }
    }
}

/// Record cross-entropy and (when `with_exp`) the explanation loss of the
/// true class for one sample whose class scores are already on the tape.
fn sample_terms(
    tape: &mut Tape,
    sample: &Sample,
    cam_target: Var,
    scores: Var,
    cam_score: Var,
    with_exp: bool,
    terms: &mut Terms,
) -> Result<()> {
    let y = sample.require_label()?;
    terms.ce.push(tape.cross_entropy(scores, y)?);
    if with_exp {
        if let Some(esm) = &sample.esm {
            let (l, _) = explanation_loss_on_tape(tape, cam_target, cam_score, esm, CamWeights::FromGradient)?;
            terms.exp.push(l);
        }
    }
    Ok(())
}

fn check_labels(samples: &[&Sample], num_classes: usize) -> Result<()> {
    for s in samples {
        let y = s.require_label()?;
        if y >= num_classes {
            return Err(Error::contract(format!("sample {} has label {y} >= {num_classes}", s.id)));
        }
    }
    Ok(())
}

/// `L_cls + α·L_exp` over a labeled batch under the classifier's current head.
///
/// `L_cls` is the mean cross-entropy; `L_exp` is the mean of
/// `1 - Dice(CAM of the true class / max, ESM)` over samples that have a mask.
pub fn composite_loss(classifier: &Classifier, batch: &[&Sample], cfg: &TrainConfig) -> Result<LossBreakdown> {
    Ok(batch_gradient(classifier, batch, cfg.alpha, true, false)?.0)
}

/// Loss and (optionally) parameter gradients of the composite loss, one tape per sample.
///
/// Per-sample gradients are summed in batch order.
fn batch_gradient(
    classifier: &Classifier,
    batch: &[&Sample],
    alpha: f64,
    with_exp: bool,
    want_grad: bool,
) -> Result<(LossBreakdown, Vec<Tensor>)> {
    if batch.is_empty() {
        return Err(Error::contract("composite loss of an empty batch"));
    }
    check_labels(batch, classifier.num_classes())?;
    let n_esm = batch.iter().filter(|s| s.esm.is_some()).count();
    let mut grads: Vec<Tensor> = classifier.net.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
    let mut acc = LossBreakdown::default();
    for s in batch {
        let mut tape = Tape::new();
        let t = classifier.trace(&mut tape, &s.image)?;
        let y = s.require_label()?;
        let cam_score = tape.pick(t.scores, y)?;
        let mut terms = Terms { ce: Vec::new(), exp: Vec::new() };
        sample_terms(&mut tape, s, t.trace.cam_target, t.scores, cam_score, with_exp, &mut terms)?;
        let ce = terms.ce[0];
        acc.cls += tape.value(ce).item() / batch.len() as f64;
        let mut out = tape.scale(ce, 1.0 / batch.len() as f64);
        if let Some(&exp) = terms.exp.first() {
            acc.exp += tape.value(exp).item() / n_esm as f64;
            if alpha > 0.0 {
                let w = tape.scale(exp, alpha / n_esm as f64);
                out = tape.add(out, w)?;
            }
        }
        if want_grad {
            let mut g = tape.backward(out)?;
            for (acc, v) in grads.iter_mut().zip(&t.params.0) {
                let gv = g.take(*v);
                for (a, b) in acc.data_mut().iter_mut().zip(gv.data()) {
                    *a += b;
                }
            }
        }
    }
    acc.total = if alpha > 0.0 { acc.cls + alpha * acc.exp } else { acc.cls };
    Ok((acc, grads))
}

/// Indices into `by_class[c]` for each class of one episode.
struct Episode {
    support: Vec<Vec<usize>>,
    query: Vec<Vec<usize>>,
}

/// Split shuffled per-class lists into consecutive chunks of
/// `shots + queries`; episode `e` takes chunk `e` of every class and is kept
/// only if every class supplies a full support set and at least one query.
fn episodes(by_class: &[Vec<usize>], shots: usize, queries: usize) -> Vec<Episode> {
    let chunk = shots + queries;
    let mut out = Vec::new();
    for e in 0.. {
        let mut ep = Episode {
            support: Vec::new(),
            query: Vec::new(),
        };
        for ids in by_class {
            let start = e * chunk;
            if start + shots + 1 > ids.len() {
                return out;
            }
            let end = (start + chunk).min(ids.len());
            ep.support.push(ids[start..start + shots].to_vec());
            ep.query.push(ids[start + shots..end].to_vec());
        }
        out.push(ep);
    }
    out
}

/// Prototypical episode loss: centroids from the support embeddings,
/// cross-entropy of the queries over negative squared distances, and the
/// explanation loss over every episode sample.
fn episode_gradient(
    net: &SmallCnn,
    samples: &[&Sample],
    ep: &Episode,
    alpha: f64,
    with_exp: bool,
) -> Result<(LossBreakdown, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let p: ParamVars = net.bind(&mut tape);
    let mut traces = Vec::new();
    for (class, (sup, qry)) in ep.support.iter().zip(&ep.query).enumerate() {
        for (i, is_query) in sup.iter().map(|i| (i, false)).chain(qry.iter().map(|i| (i, true))) {
            let s = samples[*i];
            let x = net.input(&mut tape, &s.image)?;
            traces.push((class, is_query, s, net.forward(&mut tape, &p, x)?));
        }
    }
    let n = ep.support.len();
    let mut centroids = Vec::with_capacity(n);
    for class in 0..n {
        let embs: Vec<Var> = traces
            .iter()
            .filter(|(c, q, _, _)| *c == class && !q)
            .map(|(_, _, _, t)| t.embedding)
            .collect();
        centroids.push(tape.mean(&embs)?);
    }
    let mut terms = Terms { ce: Vec::new(), exp: Vec::new() };
    for (class, is_query, s, t) in &traces {
        if *is_query {
            let mut d = Vec::with_capacity(n);
            for &c in &centroids {
                let sq = tape.sq_distance(t.embedding, c)?;
                d.push(tape.scale(sq, -1.0));
            }
            let scores = tape.stack(&d)?;
            terms.ce.push(tape.cross_entropy(scores, *class)?);
        }
        if with_exp {
            if let Some(esm) = &s.esm {
                // detached centroid: the CAM score only sets the channel weights
                let c = tape.constant(tape.value(centroids[*class]).clone());
                let sq = tape.sq_distance(t.embedding, c)?;
                let cam_score = tape.scale(sq, -1.0);
                let (l, _) = explanation_loss_on_tape(&mut tape, t.cam_target, cam_score, esm, CamWeights::FromGradient)?;
                terms.exp.push(l);
            }
        }
    }
    let (out, loss) = terms.combine(&mut tape, alpha)?;
    let mut g = tape.backward(out)?;
    let grads = p.0.iter().map(|v| g.take(*v)).collect();
    Ok((loss, grads))
}

fn sgd_step(net: &mut SmallCnn, grads: &[Tensor], lr: f64) {
    for (p, g) in net.params_mut().iter_mut().zip(grads) {
        for (w, d) in p.value.data_mut().iter_mut().zip(g.data()) {
            *w -= lr * d;
        }
    }
}

/// Prototypes as per-class mean embeddings over `samples`.
pub fn compute_prototypes(net: &SmallCnn, samples: &[&Sample]) -> Result<PrototypeSet> {
    let embs = samples
        .iter()
        .map(|s| Ok((s.require_label()?, net.embed(&s.image)?)))
        .collect::<Result<Vec<_>>>()?;
    PrototypeSet::from_embeddings(embs.iter().map(|(k, e)| (*k, e.as_slice())))
}

/// Plain SGD on the composite loss for `cfg.epochs` epochs, in place.
///
/// Linear mode shuffles the labeled set each epoch and steps per minibatch.
/// Prototypical mode steps per episode and finishes by recomputing the
/// prototypes from the full labeled set.
pub fn train(classifier: &mut Classifier, labeled: &[&Sample], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let n = classifier.num_classes();
    check_labels(labeled, n)?;
    let mut counts = vec![0usize; n];
    for s in labeled {
        counts[s.require_label()?] += 1;
    }
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(Error::contract(format!("class {k} has no labeled samples")));
    }
    if cfg.head == HeadMode::Prototypical {
        if let Some(k) = counts.iter().position(|&c| c < cfg.shots) {
            return Err(Error::contract(format!(
                "class {k} has {} labeled samples, fewer than {} shots",
                counts[k], cfg.shots
            )));
        }
    }
    if classifier.head.mode() != cfg.head {
        classifier.head = match cfg.head {
            HeadMode::Linear => Head::Linear,
            HeadMode::Prototypical => Head::Prototypical(PrototypeSet::new()),
        };
    }
    let with_exp = cfg.alpha > 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = TrainReport::default();
    for _ in 0..cfg.epochs {
        let mut losses = Vec::new();
        match cfg.head {
            HeadMode::Linear => {
                let mut order: Vec<usize> = (0..labeled.len()).collect();
                order.shuffle(&mut rng);
                for chunk in order.chunks(cfg.batch_size) {
                    let batch: Vec<&Sample> = chunk.iter().map(|&i| labeled[i]).collect();
                    let (loss, grads) = batch_gradient(classifier, &batch, cfg.alpha, with_exp, true)?;
                    sgd_step(&mut classifier.net, &grads, cfg.learning_rate);
                    losses.push(loss.total);
                }
            }
            HeadMode::Prototypical => {
                let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n];
                for (i, s) in labeled.iter().enumerate() {
                    by_class[s.require_label()?].push(i);
                }
                for ids in &mut by_class {
                    ids.shuffle(&mut rng);
                }
                for ep in episodes(&by_class, cfg.shots, cfg.queries) {
                    let (loss, grads) = episode_gradient(&classifier.net, labeled, &ep, cfg.alpha, with_exp)?;
                    sgd_step(&mut classifier.net, &grads, cfg.learning_rate);
                    losses.push(loss.total);
                }
            }
        }
        report.steps += losses.len();
        let mean = if losses.is_empty() {
            0.0
        } else {
            losses.iter().sum::<f64>() / losses.len() as f64
        };
        report.epoch_losses.push(mean);
    }
    if cfg.head == HeadMode::Prototypical {
        classifier.head = Head::Prototypical(compute_prototypes(&classifier.net, labeled)?);
    }
    Ok(report)
}
