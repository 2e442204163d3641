use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::acquisition::{EntropyScale, PatternThresholds, Strategy};
use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::model::{Architecture, HeadMode, TrainConfig};

/// Every knob of an active-learning experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    /// Load the dataset from this directory instead of generating it.
    pub data_dir: Option<PathBuf>,
    pub arch: Architecture,
    pub train: TrainConfig,
    /// Epochs of the initial seed-set training.
    pub seed_epochs: usize,
    /// Strategy names; each is run for every seed.
    pub strategies: Vec<String>,
    pub lambda: f64,
    pub k: usize,
    pub rounds: usize,
    pub seeds: Vec<u64>,
    /// Continue each retraining from the previous round's weights.
    pub warm_start: bool,
    pub entropy_scale: EntropyScale,
    /// Binarize CAMs at this level before the acquisition Dice; off by default.
    pub cam_threshold: Option<f64>,
    pub thresholds: PatternThresholds,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::default(),
            data_dir: None,
            arch: Architecture::default(),
            train: TrainConfig {
                learning_rate: 0.1,
                epochs: 10,
                ..TrainConfig::default()
            },
            seed_epochs: 60,
            strategies: vec!["composite".into()],
            lambda: 0.5,
            k: 12,
            rounds: 7,
            seeds: (0..5).collect(),
            warm_start: true,
            entropy_scale: EntropyScale::Normalized,
            cam_threshold: None,
            thresholds: PatternThresholds::default(),
            out: PathBuf::from("runs/default"),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {value:?} for {key}"))),
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Parse flat `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let d = &mut self.dataset;
        let t = &mut self.train;
        match key {
            "num_classes" => {
                d.num_classes = parse(key, v)?;
                self.arch.num_classes = d.num_classes;
            }
            "image_size" => d.image_size = parse(key, v)?,
            "pool" => d.pool = parse(key, v)?,
            "seed_set" => d.seed_set = parse(key, v)?,
            "test" => d.test = parse(key, v)?,
            "noise" => d.noise = parse(key, v)?,
            "stamp_tags" => d.stamp_tags = parse_bool(key, v)?,
            "shortcut_rate" => d.shortcut_rate = parse(key, v)?,
            "test_shortcut_rate" => d.test_shortcut_rate = parse(key, v)?,
            "faint_rate" => d.faint_rate = parse(key, v)?,
            "data_seed" => d.seed = parse(key, v)?,
            "data_dir" => self.data_dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            "widths" => self.arch.widths = parse_list(key, v)?,
            "embed_dim" => self.arch.embed_dim = parse(key, v)?,
            "alpha" => t.alpha = parse(key, v)?,
            "learning_rate" => t.learning_rate = parse(key, v)?,
            "epochs" => t.epochs = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "shots" => t.shots = parse(key, v)?,
            "queries" => t.queries = parse(key, v)?,
            "head" => t.head = v.parse()?,
            "seed_epochs" => self.seed_epochs = parse(key, v)?,
            "strategy" => self.strategies = parse_list(key, v)?,
            "lambda" => self.lambda = parse(key, v)?,
            "k" => self.k = parse(key, v)?,
            "rounds" => self.rounds = parse(key, v)?,
            "seeds" => self.seeds = parse_list(key, v)?,
            "warm_start" => self.warm_start = parse_bool(key, v)?,
            "entropy_scale" => self.entropy_scale = v.parse()?,
            "cam_threshold" => {
                self.cam_threshold = if v.is_empty() { None } else { Some(parse(key, v)?) };
            }
            "tau_h" => self.thresholds.entropy = parse(key, v)?,
            "tau_d" => self.thresholds.misalignment = parse(key, v)?,
            "out" => self.out = PathBuf::from(v),
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.train.validate()?;
        if self.arch.num_classes != self.dataset.num_classes {
            return Err(Error::Config("architecture and dataset class counts differ".into()));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda must be in [0,1], got {}", self.lambda)));
        }
        if let Some(t) = self.cam_threshold {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Config(format!("cam_threshold must be in [0,1], got {t}")));
            }
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.strategies.is_empty() {
            return Err(Error::Config("at least one strategy is required".into()));
        }
        self.strategies()?;
        Ok(())
    }

    pub fn strategies(&self) -> Result<Vec<Strategy>> {
        self.strategies.iter().map(|s| Strategy::from_name(s, self.lambda)).collect()
    }

    /// Round-trippable `key = value` text of every setting.
    pub fn to_text(&self) -> String {
        let d = &self.dataset;
        let t = &self.train;
        let mut s = String::new();
        let mut kv = BTreeMap::new();
        kv.insert("num_classes", d.num_classes.to_string());
        kv.insert("image_size", d.image_size.to_string());
        kv.insert("pool", d.pool.to_string());
        kv.insert("seed_set", d.seed_set.to_string());
        kv.insert("test", d.test.to_string());
        kv.insert("noise", d.noise.to_string());
        kv.insert("stamp_tags", d.stamp_tags.to_string());
        kv.insert("shortcut_rate", d.shortcut_rate.to_string());
        kv.insert("test_shortcut_rate", d.test_shortcut_rate.to_string());
        kv.insert("faint_rate", d.faint_rate.to_string());
        kv.insert("data_seed", d.seed.to_string());
        kv.insert(
            "data_dir",
            self.data_dir.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        );
        kv.insert("widths", join(&self.arch.widths));
        kv.insert("embed_dim", self.arch.embed_dim.to_string());
        kv.insert("alpha", t.alpha.to_string());
        kv.insert("learning_rate", t.learning_rate.to_string());
        kv.insert("epochs", t.epochs.to_string());
        kv.insert("batch_size", t.batch_size.to_string());
        kv.insert("shots", t.shots.to_string());
        kv.insert("queries", t.queries.to_string());
        kv.insert("head", t.head.to_string());
        kv.insert("seed_epochs", self.seed_epochs.to_string());
        kv.insert("strategy", self.strategies.join(","));
        kv.insert("lambda", self.lambda.to_string());
        kv.insert("k", self.k.to_string());
        kv.insert("rounds", self.rounds.to_string());
        kv.insert("seeds", join(&self.seeds));
        kv.insert("warm_start", self.warm_start.to_string());
        kv.insert("entropy_scale", self.entropy_scale.to_string());
        kv.insert("cam_threshold", self.cam_threshold.map(|t| t.to_string()).unwrap_or_default());
        kv.insert("tau_h", self.thresholds.entropy.to_string());
        kv.insert("tau_d", self.thresholds.misalignment.to_string());
        kv.insert("out", self.out.display().to_string());
        for (k, v) in kv {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn head(&self) -> HeadMode {
        self.train.head
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = ExperimentConfig {
            lambda: 0.25,
            seeds: vec![3, 9],
            strategies: vec!["random".into(), "composite".into()],
            cam_threshold: Some(0.5),
            ..Default::default()
        };
        cfg.train.head = HeadMode::Linear;
        let back = ExperimentConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn comments_and_errors() {
        let cfg = ExperimentConfig::parse("# experiment\nk = 5  # per round\n\nrounds=2\n").unwrap();
        assert_eq!((cfg.k, cfg.rounds), (5, 2));
        for bad in ["k = five", "bogus = 1", "lambda = 2", "k = 0", "just text", "strategy = greedy"] {
            assert!(matches!(ExperimentConfig::parse(bad), Err(Error::Config(_))), "{bad}");
        }
    }
}
