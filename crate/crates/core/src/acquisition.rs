//! Acquisition scores and deterministic batch selection.
//!
//! Every pool sample gets its predictive entropy `H`, the misalignment
//! `D_exp = 1 - Dice(CAM of the predicted class, mask)` and the blend
//! `λ·H_norm + (1-λ)·D_exp` with `H_norm = H / ln N`.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use crate::data::{Sample, SampleId};
use crate::error::{Error, Result};
use crate::explain::inspect;
use crate::model::Classifier;

const PROB_TOLERANCE: f64 = 1e-9;

/// Shannon entropy `-Σ p ln p` in nats, with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> Result<f64> {
    if p.is_empty() {
        return Err(Error::contract("entropy of an empty distribution"));
    }
    if p.iter().any(|v| !v.is_finite() || *v < -PROB_TOLERANCE) {
        return Err(Error::contract(format!("not a probability vector: {p:?}")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > PROB_TOLERANCE {
        return Err(Error::contract(format!("probabilities sum to {total}, not 1")));
    }
    Ok(-p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>())
}

/// Entropy divided by its maximum `ln N`.
pub fn normalized_entropy(p: &[f64]) -> Result<f64> {
    if p.len() < 2 {
        return Err(Error::contract("normalized entropy needs at least two classes"));
    }
    Ok(entropy(p)? / (p.len() as f64).ln())
}

/// Which entropy enters the composite score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum EntropyScale {
    /// `H / ln N`, sharing the `[0,1]` range of `D_exp`.
    #[default]
    Normalized,
    /// Entropy in nats.
    Raw,
}

impl FromStr for EntropyScale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normalized" => Ok(Self::Normalized),
            "raw" => Ok(Self::Raw),
            _ => Err(Error::Config(format!("unknown entropy scale {s:?} (normalized|raw)"))),
        }
    }
}

impl fmt::Display for EntropyScale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Normalized => "normalized",
            Self::Raw => "raw",
        })
    }
}

/// `λ·h + (1-λ)·d`.
pub fn composite_score(h: f64, d_exp: f64, lambda: f64) -> f64 {
    lambda * h + (1.0 - lambda) * d_exp
}

#[derive(Clone, Debug, PartialEq)]
pub struct AcquisitionRecord {
    pub id: SampleId,
    /// Entropy in nats.
    pub h: f64,
    pub h_norm: f64,
    pub d_exp: f64,
    pub score: f64,
    pub predicted: usize,
}

impl AcquisitionRecord {
    pub fn new(id: SampleId, probs: &[f64], d_exp: f64, lambda: f64, scale: EntropyScale) -> Result<Self> {
        if !(0.0..=1.0).contains(&d_exp) {
            return Err(Error::contract(format!("misalignment {d_exp} outside [0,1]")));
        }
        let h = entropy(probs)?;
        let h_norm = normalized_entropy(probs)?;
        let term = match scale {
            EntropyScale::Normalized => h_norm,
            EntropyScale::Raw => h,
        };
        Ok(Self {
            id,
            h,
            h_norm,
            d_exp,
            score: composite_score(term, d_exp, lambda),
            predicted: crate::numeric::argmax(probs),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Strategy {
    Random,
    /// Entropy only (`λ = 1`).
    Uncertainty,
    /// Misalignment only (`λ = 0`).
    Explanation,
    Composite(f64),
}

impl Strategy {
    /// Build from a name and the configured `λ` (used by `composite` only).
    pub fn from_name(name: &str, lambda: f64) -> Result<Self> {
        let s = match name {
            "random" => Self::Random,
            "uncertainty" => Self::Uncertainty,
            "explanation" => Self::Explanation,
            "composite" | "eg-al" => Self::Composite(lambda),
            _ => {
                return Err(Error::Config(format!(
                    "unknown strategy {name:?} (random|uncertainty|explanation|composite)"
                )))
            }
        };
        s.validate()?;
        Ok(s)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Random => "random",
            Self::Uncertainty => "uncertainty",
            Self::Explanation => "explanation",
            Self::Composite(_) => "composite",
        }
    }

    /// Blend weight, or `None` for random selection.
    pub fn lambda(&self) -> Option<f64> {
        match self {
            Self::Random => None,
            Self::Uncertainty => Some(1.0),
            Self::Explanation => Some(0.0),
            Self::Composite(l) => Some(*l),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.lambda() {
            Some(l) if !(0.0..=1.0).contains(&l) => Err(Error::Config(format!("lambda must be in [0,1], got {l}"))),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Score every pool sample; records come back in pool order.
///
/// Each sample needs its expert mask: the scorer is granted mask access on
/// the unlabeled pool. `binarize` thresholds the unit-range CAM before Dice;
/// `None` scores the soft map.
pub fn score_pool(
    classifier: &Classifier,
    pool: &[&Sample],
    lambda: f64,
    scale: EntropyScale,
    binarize: Option<f64>,
) -> Result<Vec<AcquisitionRecord>> {
    pool.iter()
        .map(|s| {
            let esm = s
                .esm
                .as_ref()
                .ok_or_else(|| Error::contract(format!("pool sample {} has no expert mask", s.id)))?;
            let ins = inspect(classifier, &s.image)?;
            let d_exp = 1.0 - ins.alignment(esm, binarize)?;
            AcquisitionRecord::new(s.id, &ins.probs, d_exp.clamp(0.0, 1.0), lambda, scale)
        })
        .collect()
}

/// Recompute scores for a different `λ` without touching the model.
pub fn rescore(records: &[AcquisitionRecord], lambda: f64, scale: EntropyScale) -> Vec<AcquisitionRecord> {
    records
        .iter()
        .map(|r| {
            let term = match scale {
                EntropyScale::Normalized => r.h_norm,
                EntropyScale::Raw => r.h,
            };
            AcquisitionRecord {
                score: composite_score(term, r.d_exp, lambda),
                ..r.clone()
            }
        })
        .collect()
}

/// Ids of the `k` highest scores, descending, ties by ascending id.
pub fn select_top_k(records: &[AcquisitionRecord], k: usize) -> Result<Vec<SampleId>> {
    if k > records.len() {
        return Err(Error::contract(format!(
            "cannot select {k} of {} records",
            records.len()
        )));
    }
    if let Some(r) = records.iter().find(|r| r.score.is_nan()) {
        return Err(Error::contract(format!("record {} has a NaN score", r.id)));
    }
    let mut order: Vec<&AcquisitionRecord> = records.iter().collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.id.cmp(&b.id)));
    Ok(order.into_iter().take(k).map(|r| r.id).collect())
}

/// Uncertainty/misalignment quadrant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Pattern {
    HighUncertaintyHighMisalignment,
    HighUncertaintyLowMisalignment,
    LowUncertaintyHighMisalignment,
    LowUncertaintyLowMisalignment,
}

impl Pattern {
    pub const ALL: [Pattern; 4] = [
        Pattern::HighUncertaintyHighMisalignment,
        Pattern::HighUncertaintyLowMisalignment,
        Pattern::LowUncertaintyHighMisalignment,
        Pattern::LowUncertaintyLowMisalignment,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::HighUncertaintyHighMisalignment => "HU-HM",
            Self::HighUncertaintyLowMisalignment => "HU-LM",
            Self::LowUncertaintyHighMisalignment => "LU-HM",
            Self::LowUncertaintyLowMisalignment => "LU-LM",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.as_str() == s)
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Quadrant thresholds on `H_norm` and `D_exp`; values at a threshold count as high.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PatternThresholds {
    pub entropy: f64,
    pub misalignment: f64,
}

impl Default for PatternThresholds {
    fn default() -> Self {
        Self {
            entropy: 0.5,
            misalignment: 0.5,
        }
    }
}

pub fn classify_pattern(record: &AcquisitionRecord, th: PatternThresholds) -> Pattern {
    match (record.h_norm >= th.entropy, record.d_exp >= th.misalignment) {
        (true, true) => Pattern::HighUncertaintyHighMisalignment,
        (true, false) => Pattern::HighUncertaintyLowMisalignment,
        (false, true) => Pattern::LowUncertaintyHighMisalignment,
        (false, false) => Pattern::LowUncertaintyLowMisalignment,
    }
}

/// Fraction of records in each quadrant, in [`Pattern::ALL`] order.
pub fn pattern_census(records: &[AcquisitionRecord], th: PatternThresholds) -> [f64; 4] {
    let mut counts = [0usize; 4];
    for r in records {
        let p = classify_pattern(r, th);
        counts[Pattern::ALL.iter().position(|q| *q == p).expect("listed")] += 1;
    }
    let n = records.len().max(1) as f64;
    counts.map(|c| c as f64 / n)
}

pub const RECORDS_HEADER: &str = "id,H,H_norm,D_exp,score,pred_class,pattern";

pub fn write_records_csv(out: &mut impl Write, records: &[AcquisitionRecord], th: PatternThresholds) -> std::io::Result<()> {
    writeln!(out, "{RECORDS_HEADER}")?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.id,
            r.h,
            r.h_norm,
            r.d_exp,
            r.score,
            r.predicted,
            classify_pattern(r, th)
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use super::Strategy;
    use proptest::prelude::*;
    use proptest::strategy::Strategy as _;

    fn rec(id: usize, h_norm: f64, d_exp: f64, score: f64) -> AcquisitionRecord {
        AcquisitionRecord {
            id,
            h: h_norm * 3f64.ln(),
            h_norm,
            d_exp,
            score,
            predicted: 0,
        }
    }

    #[test]
    fn entropy_examples() {
        let u = entropy(&[1.0 / 3.0; 3]).unwrap();
        assert!((u - 1.09861).abs() < 1e-5);
        assert_eq!(entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        assert!((entropy(&[0.7, 0.2, 0.1]).unwrap() - 0.80182).abs() < 1e-5);
        assert!((normalized_entropy(&[1.0 / 3.0; 3]).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn entropy_rejects_invalid() {
        for p in [vec![0.5, 0.6], vec![-0.1, 1.1], vec![f64::NAN, 1.0], vec![]] {
            assert!(matches!(entropy(&p), Err(Error::Contract(_))), "{p:?}");
        }
    }

    #[test]
    fn composite_examples() {
        assert_eq!(composite_score(1.0, 0.6, 0.5), 0.8);
        let r = AcquisitionRecord::new(3, &[0.7, 0.2, 0.1], 0.37, 1.0, EntropyScale::Normalized).unwrap();
        assert_eq!(r.score, r.h_norm);
        let r = AcquisitionRecord::new(3, &[0.7, 0.2, 0.1], 0.37, 0.0, EntropyScale::Normalized).unwrap();
        assert_eq!(r.score, 0.37);
        let r = AcquisitionRecord::new(3, &[0.7, 0.2, 0.1], 0.37, 1.0, EntropyScale::Raw).unwrap();
        assert_eq!(r.score, r.h);
    }

    #[test]
    fn top_k_examples() {
        let rs: Vec<_> = [0.2, 0.9, 0.9, 0.1].iter().enumerate().map(|(i, &s)| rec(i, 0.0, 0.0, s)).collect();
        assert_eq!(select_top_k(&rs, 2).unwrap(), vec![1, 2]);
        assert_eq!(select_top_k(&rs, 4).unwrap(), vec![1, 2, 0, 3]);
        assert!(matches!(select_top_k(&rs, 5), Err(Error::Contract(_))));
        assert!(select_top_k(&[], 0).unwrap().is_empty());
    }

    #[test]
    fn pattern_examples() {
        let th = PatternThresholds::default();
        assert_eq!(classify_pattern(&rec(0, 0.9, 0.9, 0.0), th).as_str(), "HU-HM");
        assert_eq!(classify_pattern(&rec(0, 0.1, 0.9, 0.0), th).as_str(), "LU-HM");
        assert_eq!(classify_pattern(&rec(0, 0.5, 0.1, 0.0), th).as_str(), "HU-LM");
        assert_eq!(classify_pattern(&rec(0, 0.1, 0.1, 0.0), th).as_str(), "LU-LM");
        let census = pattern_census(&[rec(0, 0.9, 0.9, 0.0), rec(1, 0.1, 0.9, 0.0)], th);
        assert_eq!(census, [0.5, 0.0, 0.5, 0.0]);
    }

    #[test]
    fn strategy_names() {
        assert_eq!(Strategy::from_name("composite", 0.5).unwrap(), Strategy::Composite(0.5));
        assert_eq!(Strategy::Uncertainty.lambda(), Some(1.0));
        assert!(matches!(Strategy::from_name("composite", 1.5), Err(Error::Config(_))));
        assert!(Strategy::from_name("greedy", 0.5).is_err());
    }

    #[test]
    fn records_csv() {
        let mut out = Vec::new();
        write_records_csv(&mut out, &[rec(4, 0.5, 0.25, 0.375)], PatternThresholds::default()).unwrap();
        let s = String::from_utf8(out).unwrap();
        let line = s.lines().nth(1).unwrap();
        assert!(line.starts_with("4,") && line.ends_with(",0.5,0.25,0.375,0,HU-LM"), "{line}");
    }

    fn probs(n: usize) -> impl proptest::strategy::Strategy<Value = Vec<f64>> {
        proptest::collection::vec(0.0f64..1.0, n).prop_filter_map("nonzero mass", |v| {
            let t: f64 = v.iter().sum();
            (t > 1e-6).then(|| v.iter().map(|x| x / t).collect())
        })
    }

    proptest! {
        #[test]
        fn entropy_bounded_by_log_n(p in probs(4)) {
            let h = entropy(&p).unwrap();
            let max = 4f64.ln();
            prop_assert!(h >= 0.0 && h <= max + 1e-9);
            let spread = p.iter().map(|v| (v - 0.25).abs()).fold(0.0, f64::max);
            if spread > 1e-3 {
                prop_assert!(h < max - 1e-9);
            }
        }

        #[test]
        fn score_is_monotone(h in 0.0f64..1.0, d in 0.0f64..1.0, dh in 0.0f64..0.5, lambda in 0.0f64..=1.0) {
            let base = composite_score(h, d, lambda);
            if lambda > 0.0 {
                prop_assert!(composite_score(h + dh, d, lambda) >= base);
            }
            if lambda < 1.0 {
                prop_assert!(composite_score(h, d + dh, lambda) >= base);
            }
        }

        #[test]
        fn selection_is_permutation_invariant(
            scores in proptest::collection::vec(0u8..20, 1..60),
            k_frac in 0.0f64..=1.0,
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let rs: Vec<_> = scores.iter().enumerate().map(|(i, &s)| rec(i * 3, 0.0, 0.0, s as f64 / 20.0)).collect();
            let k = (k_frac * rs.len() as f64) as usize;
            let mut shuffled = rs.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(select_top_k(&rs, k).unwrap(), select_top_k(&shuffled, k).unwrap());
        }

        #[test]
        fn extreme_lambdas_reduce_to_single_criteria(
            hd in proptest::collection::vec((0u8..10, 0u8..10), 1..40),
            k_frac in 0.0f64..=1.0,
        ) {
            let base: Vec<_> = hd.iter().enumerate()
                .map(|(i, &(h, d))| rec(i, h as f64 / 10.0, d as f64 / 10.0, 0.0))
                .collect();
            let k = (k_frac * base.len() as f64) as usize;
            let by = |f: fn(&AcquisitionRecord) -> f64| {
                let rs: Vec<_> = base.iter().map(|r| AcquisitionRecord { score: f(r), ..r.clone() }).collect();
                select_top_k(&rs, k).unwrap()
            };
            prop_assert_eq!(select_top_k(&rescore(&base, 1.0, EntropyScale::Normalized), k).unwrap(), by(|r| r.h_norm));
            prop_assert_eq!(select_top_k(&rescore(&base, 0.0, EntropyScale::Normalized), k).unwrap(), by(|r| r.d_exp));
        }
    }
}
