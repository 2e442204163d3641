use crate::data::Sample;
use crate::error::{Error, Result};
use crate::explain::inspect;
use crate::model::Classifier;
use crate::numeric::argmax;

/// Fraction of rows whose argmax (ties to the lowest index) equals the label.
pub fn accuracy(probs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if probs.is_empty() || probs.len() != labels.len() {
        return Err(Error::contract(format!(
            "accuracy needs matching non-empty inputs, got {} rows and {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let hits = probs.iter().zip(labels).filter(|(p, &y)| argmax(p) == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// One-vs-rest AUC by pair counting: `P(s+ > s-) + ½·P(s+ = s-)`.
///
/// Sorts once and walks tie groups, so it is `O(n log n)`.
pub fn binary_auc(positives: &[f64], negatives: &[f64]) -> Result<f64> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::contract("AUC needs at least one positive and one negative"));
    }
    let mut all: Vec<(f64, bool)> = positives
        .iter()
        .map(|&s| (s, true))
        .chain(negatives.iter().map(|&s| (s, false)))
        .collect();
    if all.iter().any(|(s, _)| s.is_nan()) {
        return Err(Error::contract("AUC of NaN scores"));
    }
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // wins counted in units of half a pair
    let mut half_wins = 0u128;
    let mut neg_below = 0u128;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u128, 0u128);
        while j < all.len() && all[j].0 == all[i].0 {
            if all[j].1 {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        half_wins += pos * (2 * neg_below + neg);
        neg_below += neg;
        i = j;
    }
    Ok(half_wins as f64 / (2.0 * positives.len() as f64 * negatives.len() as f64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MacroAuc {
    pub value: f64,
    /// Classes with no test samples, left out of the mean.
    pub skipped: Vec<usize>,
}

/// Unweighted mean of one-vs-rest AUCs over the classes present in `labels`.
pub fn macro_auc(probs: &[Vec<f64>], labels: &[usize]) -> Result<MacroAuc> {
    if probs.is_empty() || probs.len() != labels.len() {
        return Err(Error::contract("macro-AUC needs matching non-empty inputs"));
    }
    let n = probs[0].len();
    if let Some(&y) = labels.iter().find(|&&y| y >= n) {
        return Err(Error::contract(format!("label {y} outside {n} classes")));
    }
    let mut aucs = Vec::new();
    let mut skipped = Vec::new();
    for k in 0..n {
        let pos: Vec<f64> = probs.iter().zip(labels).filter(|(_, &y)| y == k).map(|(p, _)| p[k]).collect();
        if pos.is_empty() {
            skipped.push(k);
            continue;
        }
        let neg: Vec<f64> = probs.iter().zip(labels).filter(|(_, &y)| y != k).map(|(p, _)| p[k]).collect();
        if neg.is_empty() {
            return Err(Error::contract("macro-AUC is undefined for a single-class test set"));
        }
        aucs.push(binary_auc(&pos, &neg)?);
    }
    Ok(MacroAuc {
        value: aucs.iter().sum::<f64>() / aucs.len() as f64,
        skipped,
    })
}

/// Test-set metrics of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub macro_auc: f64,
    pub mean_dice: f64,
    pub skipped_classes: Vec<usize>,
    /// Per-sample Dice of the predicted-class CAM against the mask.
    pub dice: Vec<f64>,
}

/// Accuracy, macro-AUC and mean alignment from one pass over `test`.
pub fn evaluate(classifier: &Classifier, test: &[&Sample]) -> Result<Evaluation> {
    let mut probs = Vec::with_capacity(test.len());
    let mut labels = Vec::with_capacity(test.len());
    let mut dice = Vec::with_capacity(test.len());
    for s in test {
        let ins = inspect(classifier, &s.image)?;
        labels.push(s.require_label()?);
        if let Some(esm) = &s.esm {
            dice.push(ins.alignment(esm, None)?);
        }
        probs.push(ins.probs);
    }
    let auc = macro_auc(&probs, &labels)?;
    Ok(Evaluation {
        accuracy: accuracy(&probs, &labels)?,
        macro_auc: auc.value,
        mean_dice: mean(&dice),
        skipped_classes: auc.skipped,
        dice,
    })
}

/// Mean Dice between predicted-class CAMs and masks over samples that have one.
pub fn mean_alignment(classifier: &Classifier, test: &[&Sample]) -> Result<f64> {
    let mut dice = Vec::new();
    for s in test {
        if let Some(esm) = &s.esm {
            dice.push(inspect(classifier, &s.image)?.alignment(esm, None)?);
        }
    }
    Ok(mean(&dice))
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Per-seed values with their mean and sample standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(values: Vec<f64>) -> Self {
        let m = mean(&values);
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { values, mean: m, std }
    }
}

/// Metrics of one round aggregated over seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub round: usize,
    pub accuracy: Summary,
    pub macro_auc: Summary,
    pub mean_dice: Summary,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_auc(pos: &[f64], neg: &[f64]) -> f64 {
        let mut w = 0.0;
        for p in pos {
            for n in neg {
                w += if p > n { 1.0 } else if p == n { 0.5 } else { 0.0 };
            }
        }
        w / (pos.len() * neg.len()) as f64
    }

    #[test]
    fn auc_examples() {
        assert_eq!(binary_auc(&[0.9, 0.8], &[0.1, 0.2]).unwrap(), 1.0);
        assert_eq!(binary_auc(&[0.5, 0.5], &[0.5, 0.5, 0.5]).unwrap(), 0.5);
        assert_eq!(binary_auc(&[0.9, 0.4], &[0.6, 0.1]).unwrap(), 0.75);
        assert_eq!(brute_auc(&[0.9, 0.4], &[0.6, 0.1]), 0.75);
    }

    #[test]
    fn auc_matches_pair_counting() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let np = rng.random_range(1..30);
            let nn = rng.random_range(1..30);
            // coarse grid to force ties
            let pos: Vec<f64> = (0..np).map(|_| rng.random_range(0..8) as f64 / 8.0).collect();
            let neg: Vec<f64> = (0..nn).map(|_| rng.random_range(0..8) as f64 / 8.0).collect();
            assert!((binary_auc(&pos, &neg).unwrap() - brute_auc(&pos, &neg)).abs() < 1e-12);
        }
    }

    #[test]
    fn macro_auc_skips_absent_and_rejects_single_class() {
        let probs = vec![vec![0.8, 0.1, 0.1], vec![0.2, 0.7, 0.1], vec![0.6, 0.3, 0.1]];
        let m = macro_auc(&probs, &[0, 1, 0]).unwrap();
        assert_eq!(m.skipped, vec![2]);
        assert_eq!(m.value, 1.0);
        assert!(matches!(macro_auc(&probs, &[1, 1, 1]), Err(Error::Contract(_))));
    }

    #[test]
    fn accuracy_ties_go_low() {
        let probs = vec![vec![0.5, 0.5], vec![0.2, 0.8]];
        assert_eq!(accuracy(&probs, &[0, 1]).unwrap(), 1.0);
        assert_eq!(accuracy(&probs, &[1, 1]).unwrap(), 0.5);
    }

    #[test]
    fn summary_stats() {
        let s = Summary::of(vec![1.0, 2.0, 3.0]);
        assert_eq!(s.mean, 2.0);
        assert_eq!(s.std, 1.0);
        assert_eq!(Summary::of(vec![4.0]).std, 0.0);
    }
}
