use std::collections::BTreeMap;

use super::cnn::{ParamVars, SmallCnn, Trace};
use crate::error::{Error, Result};
use crate::numeric::{argmax, softmax, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum HeadMode {
    Linear,
    #[default]
    Prototypical,
}

impl std::str::FromStr for HeadMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(HeadMode::Linear),
            "prototypical" | "proto" => Ok(HeadMode::Prototypical),
            other => Err(Error::Config(format!("unknown head mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for HeadMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            HeadMode::Linear => "linear",
            HeadMode::Prototypical => "prototypical",
        })
    }
}

/// Per-class centroids in embedding space.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PrototypeSet {
    centroids: BTreeMap<usize, Vec<f64>>,
}

impl PrototypeSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Arithmetic mean of each class's embeddings.
    pub fn from_embeddings<'a>(items: impl IntoIterator<Item = (usize, &'a [f64])>) -> Result<Self> {
        let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
        for (class, e) in items {
            let entry = sums.entry(class).or_insert_with(|| (vec![0.0; e.len()], 0));
            if entry.0.len() != e.len() {
                return Err(Error::dim("embedding", "embeddings of differing dimension"));
            }
            for (s, v) in entry.0.iter_mut().zip(e) {
                *s += v;
            }
            entry.1 += 1;
        }
        let centroids = sums
            .into_iter()
            .map(|(k, (s, n))| (k, s.into_iter().map(|v| v / n as f64).collect()))
            .collect();
        Ok(Self { centroids })
    }

    pub fn insert(&mut self, class: usize, centroid: Vec<f64>) {
        self.centroids.insert(class, centroid);
    }

    pub fn get(&self, class: usize) -> Option<&[f64]> {
        self.centroids.get(&class).map(Vec::as_slice)
    }

    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.centroids.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.centroids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.is_empty()
    }

    fn require_all(&self, num_classes: usize) -> Result<()> {
        match (0..num_classes).find(|k| !self.centroids.contains_key(k)) {
            Some(k) => Err(Error::contract(format!("no prototype for class {k}"))),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Head {
    Linear,
    Prototypical(PrototypeSet),
}

impl Head {
    pub fn mode(&self) -> HeadMode {
        match self {
            Head::Linear => HeadMode::Linear,
            Head::Prototypical(_) => HeadMode::Prototypical,
        }
    }
}

/// A network together with the head used to turn embeddings into class scores.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub net: SmallCnn,
    pub head: Head,
}

/// One recorded forward pass up to the class-score vector.
#[derive(Clone, Debug)]
pub struct ScoredTrace {
    pub params: ParamVars,
    pub trace: Trace,
    pub scores: Var,
}

impl Classifier {
    pub fn new(net: SmallCnn, head: Head) -> Self {
        Self { net, head }
    }

    pub fn num_classes(&self) -> usize {
        self.net.architecture().num_classes
    }

    /// Class scores from an embedding: logits (linear) or negative squared
    /// distances to the centroids (prototypical).
    pub fn scores_from_embedding(&self, tape: &mut Tape, p: &ParamVars, embedding: Var) -> Result<Var> {
        match &self.head {
            Head::Linear => self.net.linear_logits(tape, p, embedding),
            Head::Prototypical(protos) => {
                protos.require_all(self.num_classes())?;
                let mut dists = Vec::with_capacity(self.num_classes());
                for k in 0..self.num_classes() {
                    let c = tape.constant(Tensor::vector(protos.get(k).expect("checked").to_vec()));
                    let d = tape.sq_distance(embedding, c)?;
                    dists.push(tape.scale(d, -1.0));
                }
                tape.stack(&dists)
            }
        }
    }

    /// Record a forward pass with parameters as leaves.
    pub fn trace(&self, tape: &mut Tape, image: &Tensor) -> Result<ScoredTrace> {
        let params = self.net.bind(tape);
        let x = self.net.input(tape, image)?;
        let trace = self.net.forward(tape, &params, x)?;
        let scores = self.scores_from_embedding(tape, &params, trace.embedding)?;
        Ok(ScoredTrace { params, trace, scores })
    }

    /// Differentiable scalar score of class `k` (logit, or negative squared distance).
    pub fn class_score_var(&self, tape: &mut Tape, t: &ScoredTrace, k: usize) -> Result<Var> {
        self.check_class(k)?;
        tape.pick(t.scores, k)
    }

    pub fn class_scores(&self, image: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let t = self.trace(&mut tape, image)?;
        Ok(tape.value(t.scores).data().to_vec())
    }

    pub fn class_score(&self, image: &Tensor, k: usize) -> Result<f64> {
        self.check_class(k)?;
        Ok(self.class_scores(image)?[k])
    }

    pub fn predict_proba(&self, image: &Tensor) -> Result<Vec<f64>> {
        softmax(&self.class_scores(image)?)
    }

    /// Argmax class, ties to the lowest index.
    pub fn predict(&self, image: &Tensor) -> Result<usize> {
        Ok(argmax(&self.predict_proba(image)?))
    }

    pub(crate) fn check_class(&self, k: usize) -> Result<()> {
        if k >= self.num_classes() {
            return Err(Error::contract(format!(
                "class index {k} out of range for {} classes",
                self.num_classes()
            )));
        }
        Ok(())
    }
}
