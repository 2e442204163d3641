use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ExperimentConfig;
use super::metrics::{evaluate, Evaluation};
use crate::acquisition::{classify_pattern, score_pool, select_top_k, AcquisitionRecord, Pattern, Strategy};
use crate::data::{generate, load, split_with_seed, Dataset, PoolState, Sample, SampleId};
use crate::error::{Error, Result};
use crate::model::{save_checkpoint, train, Classifier, Head, HeadMode, SmallCnn, TrainConfig};

const SELECT_SALT: u64 = 0xa11c_e5ee_d000_0001;

#[derive(Clone, Debug, PartialEq)]
pub struct RoundMetrics {
    pub round: usize,
    pub labeled: usize,
    pub accuracy: f64,
    pub macro_auc: f64,
    pub mean_dice: f64,
}

impl RoundMetrics {
    fn new(round: usize, labeled: usize, e: &Evaluation) -> Self {
        Self {
            round,
            labeled,
            accuracy: e.accuracy,
            macro_auc: e.macro_auc,
            mean_dice: e.mean_dice,
        }
    }
}

/// One queried sample with the scores it had when it was chosen.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionRow {
    pub round: usize,
    pub rank: usize,
    pub record: AcquisitionRecord,
    pub pattern: Pattern,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub strategy: Strategy,
    pub seed: u64,
    /// Round 0 (seed-set model) first.
    pub rounds: Vec<RoundMetrics>,
    pub selections: Vec<SelectionRow>,
    /// Set to the first round that could not draw a full batch.
    pub truncated_at: Option<usize>,
    pub classifier: Classifier,
    pub state: PoolState,
}

impl RunResult {
    pub fn final_metrics(&self) -> &RoundMetrics {
        self.rounds.last().expect("round 0 is always present")
    }

    /// Selected ids of round `t` (1-based), in rank order.
    pub fn selected(&self, round: usize) -> Vec<SampleId> {
        self.selections.iter().filter(|r| r.round == round).map(|r| r.record.id).collect()
    }
}

/// Seed-set model and split shared by every strategy of one seed.
#[derive(Clone, Debug)]
pub struct Baseline {
    pub seed: u64,
    pub classifier: Classifier,
    pub state: PoolState,
    pub metrics: RoundMetrics,
}

pub fn prepare_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    match &cfg.data_dir {
        Some(dir) => {
            let (ds, _) = load(dir)?;
            if ds.spec.num_classes != cfg.arch.num_classes {
                return Err(Error::Config(format!(
                    "dataset in {} has {} classes, config expects {}",
                    dir.display(),
                    ds.spec.num_classes,
                    cfg.arch.num_classes
                )));
            }
            Ok(ds)
        }
        None => generate(&cfg.dataset),
    }
}

fn samples<'a, 'b>(ds: &'a Dataset, ids: impl IntoIterator<Item = &'b SampleId>) -> Result<Vec<&'a Sample>> {
    ids.into_iter().map(|&id| ds.get(id)).collect()
}

fn train_config(cfg: &ExperimentConfig, seed: u64, round: usize, epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        seed: seed.wrapping_mul(1_000_003).wrapping_add(round as u64),
        ..cfg.train.clone()
    }
}

fn fresh_classifier(cfg: &ExperimentConfig, seed: u64) -> Result<Classifier> {
    let net = SmallCnn::new(cfg.arch.clone(), seed)?;
    let head = match cfg.train.head {
        HeadMode::Linear => Head::Linear,
        HeadMode::Prototypical => Head::Prototypical(Default::default()),
    };
    Ok(Classifier::new(net, head))
}

/// Labeled samples as the oracle returns them.
fn annotated<'a>(ds: &'a Dataset, state: &PoolState) -> Result<Vec<&'a Sample>> {
    let oracle = ds.oracle();
    for &id in &state.labeled {
        oracle.annotate(id)?;
    }
    samples(ds, &state.labeled)
}

/// Split with `seed`, train on the seed set and evaluate: round 0.
pub fn train_baseline(cfg: &ExperimentConfig, ds: &Dataset, seed: u64) -> Result<Baseline> {
    let state = split_with_seed(ds, seed)?;
    state.check_invariants(Some(cfg.k))?;
    let mut classifier = fresh_classifier(cfg, seed)?;
    train(&mut classifier, &annotated(ds, &state)?, &train_config(cfg, seed, 0, cfg.seed_epochs))?;
    let test = samples(ds, &state.test)?;
    let metrics = RoundMetrics::new(0, state.labeled.len(), &evaluate(&classifier, &test)?);
    Ok(Baseline {
        seed,
        classifier,
        state,
        metrics,
    })
}

/// Rounds 1..=T of the acquisition loop, starting from a baseline.
///
/// Each round scores the pool (or draws at random), queries the oracle for
/// the top `k`, retrains and evaluates on the untouched test set. Set
/// invariants are checked after every round. A pool smaller than `k` ends
/// the run early with `truncated_at` set.
pub fn continue_run(cfg: &ExperimentConfig, ds: &Dataset, strategy: Strategy, base: &Baseline) -> Result<RunResult> {
    strategy.validate()?;
    let seed = base.seed;
    let mut classifier = base.classifier.clone();
    let mut state = base.state.clone();
    let mut rounds = vec![base.metrics.clone()];
    let mut selections = Vec::new();
    let mut truncated_at = None;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SELECT_SALT);
    let test = samples(ds, &state.test)?;
    for t in 1..=cfg.rounds {
        if state.pool.len() < cfg.k {
            truncated_at = Some(t);
            break;
        }
        let pool = samples(ds, &state.pool)?;
        let records = match strategy.lambda() {
            Some(lambda) => {
                let records = score_pool(&classifier, &pool, lambda, cfg.entropy_scale, cfg.cam_threshold)?;
                let ids = select_top_k(&records, cfg.k)?;
                ids.iter()
                    .map(|id| records.iter().find(|r| r.id == *id).cloned().expect("selected from records"))
                    .collect::<Vec<_>>()
            }
            None => {
                let mut ids: Vec<SampleId> = state.pool.iter().copied().collect();
                let (chosen, _) = ids.partial_shuffle(&mut rng, cfg.k);
                let chosen = samples(ds, chosen.iter())?;
                // scored only so the selections file can describe the draw
                score_pool(&classifier, &chosen, cfg.lambda, cfg.entropy_scale, cfg.cam_threshold)?
            }
        };
        let batch: Vec<SampleId> = records.iter().map(|r| r.id).collect();
        state.apply_batch(&batch)?;
        state.check_invariants(Some(cfg.k))?;
        for (rank, record) in records.into_iter().enumerate() {
            selections.push(SelectionRow {
                round: t,
                rank,
                pattern: classify_pattern(&record, cfg.thresholds),
                record,
            });
        }
        let labeled = annotated(ds, &state)?;
        if cfg.warm_start {
            train(&mut classifier, &labeled, &train_config(cfg, seed, t, cfg.train.epochs))?;
        } else {
            classifier = fresh_classifier(cfg, seed)?;
            train(&mut classifier, &labeled, &train_config(cfg, seed, t, cfg.seed_epochs))?;
        }
        rounds.push(RoundMetrics::new(t, state.labeled.len(), &evaluate(&classifier, &test)?));
    }
    Ok(RunResult {
        strategy,
        seed,
        rounds,
        selections,
        truncated_at,
        classifier,
        state,
    })
}

/// One full run: baseline then `cfg.rounds` acquisition rounds.
pub fn run_active_learning(cfg: &ExperimentConfig, ds: &Dataset, strategy: Strategy, seed: u64) -> Result<RunResult> {
    let base = train_baseline(cfg, ds, seed)?;
    continue_run(cfg, ds, strategy, &base)
}

/// File-name tag of a strategy, e.g. `composite-0.5`.
pub fn strategy_tag(s: &Strategy) -> String {
    match s {
        Strategy::Composite(l) => format!("composite-{l}"),
        other => other.name().to_string(),
    }
}

fn lambda_cell(s: &Strategy) -> String {
    s.lambda().map(|l| l.to_string()).unwrap_or_default()
}

pub const CURVES_HEADER: &str = "strategy,lambda,seed,round,accuracy,macro_auc,mean_dice";
pub const SELECTIONS_HEADER: &str = "round,rank,id,H_norm,D_exp,score,pattern";
pub const STATUS_HEADER: &str = "strategy,lambda,seed,rounds_completed,truncated_at";

pub fn curves_csv(runs: &[RunResult]) -> String {
    let mut s = format!("{CURVES_HEADER}\n");
    for r in runs {
        for m in &r.rounds {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.strategy.name(),
                lambda_cell(&r.strategy),
                r.seed,
                m.round,
                m.accuracy,
                m.macro_auc,
                m.mean_dice
            );
        }
    }
    s
}

pub fn selections_csv(run: &RunResult) -> String {
    let mut s = format!("{SELECTIONS_HEADER}\n");
    for row in &run.selections {
        let r = &row.record;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            row.round, row.rank, r.id, r.h_norm, r.d_exp, r.score, row.pattern
        );
    }
    s
}

fn status_csv(runs: &[RunResult]) -> String {
    let mut s = format!("{STATUS_HEADER}\n");
    for r in runs {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.strategy.name(),
            lambda_cell(&r.strategy),
            r.seed,
            r.rounds.len() - 1,
            r.truncated_at.map(|t| t.to_string()).unwrap_or_default()
        );
    }
    s
}

pub(crate) fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(parent) => std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e)),
        None => Ok(()),
    }
}

pub(crate) fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    ensure_parent(path)?;
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn selections_path(out: &Path, strategy: &Strategy, seed: u64) -> std::path::PathBuf {
    out.join("selections").join(format!("{}_s{seed}.csv", strategy_tag(strategy)))
}

pub fn checkpoint_path(out: &Path, strategy: &Strategy, seed: u64) -> std::path::PathBuf {
    out.join("models").join(format!("{}_s{seed}.ckpt", strategy_tag(strategy)))
}

/// Write config echo, curves, run status, per-run selections and final checkpoints.
pub fn write_run_artifacts(cfg: &ExperimentConfig, out: &Path, runs: &[RunResult]) -> Result<()> {
    write(&out.join("config.txt"), cfg.to_text())?;
    write(&out.join("curves.csv"), curves_csv(runs))?;
    write(&out.join("status.csv"), status_csv(runs))?;
    for r in runs {
        write(&selections_path(out, &r.strategy, r.seed), selections_csv(r))?;
        let ckpt = checkpoint_path(out, &r.strategy, r.seed);
        ensure_parent(&ckpt)?;
        save_checkpoint(&r.classifier, &ckpt)?;
    }
    Ok(())
}

/// Every configured strategy for every seed, sharing each seed's baseline.
///
/// Runs are ordered by strategy, then seed.
pub fn run_strategies(cfg: &ExperimentConfig, ds: &Dataset, strategies: &[Strategy]) -> Result<Vec<RunResult>> {
    let mut by_seed = Vec::new();
    for &seed in &cfg.seeds {
        let base = train_baseline(cfg, ds, seed)?;
        by_seed.push(strategies.iter().map(|s| continue_run(cfg, ds, *s, &base)).collect::<Result<Vec<_>>>()?);
    }
    let mut runs = Vec::new();
    for i in 0..strategies.len() {
        for seed_runs in &by_seed {
            runs.push(seed_runs[i].clone());
        }
    }
    Ok(runs)
}

/// Run the configured experiment and write its artifacts to `cfg.out`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<RunResult>> {
    cfg.validate()?;
    let ds = prepare_dataset(cfg)?;
    let runs = run_strategies(cfg, &ds, &cfg.strategies()?)?;
    write_run_artifacts(cfg, &cfg.out, &runs)?;
    Ok(runs)
}
