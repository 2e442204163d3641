use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::config::ExperimentConfig;
use super::metrics::Summary;
use super::run::{
    checkpoint_path, prepare_dataset, run_strategies, selections_path, strategy_tag, write, write_run_artifacts,
    RunResult, CURVES_HEADER,
};
use crate::acquisition::{Pattern, Strategy};
use crate::error::{Error, Result};
use crate::explain::{inspect, to_pgm};
use crate::model::load_checkpoint;

pub const SWEEP_HEADER: &str = "lambda,seed,final_accuracy,final_macro_auc,final_mean_dice";

/// Sweep table: one row per (λ, seed) sorted by λ then seed, then a `mean`
/// and a `std` summary row per λ.
pub fn sweep_csv(runs: &[RunResult]) -> String {
    let mut groups: BTreeMap<u64, (f64, Vec<&RunResult>)> = BTreeMap::new();
    for r in runs {
        let l = r.strategy.lambda().unwrap_or(f64::NAN);
        groups.entry(l.to_bits()).or_insert((l, Vec::new())).1.push(r);
    }
    let mut ordered: Vec<_> = groups.into_values().collect();
    ordered.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut s = format!("{SWEEP_HEADER}\n");
    for (lambda, mut rs) in ordered {
        rs.sort_by_key(|r| r.seed);
        for r in &rs {
            let m = r.final_metrics();
            let _ = writeln!(s, "{lambda},{},{},{},{}", r.seed, m.accuracy, m.macro_auc, m.mean_dice);
        }
        let col = |f: fn(&RunResult) -> f64| Summary::of(rs.iter().map(|r| f(r)).collect());
        let acc = col(|r| r.final_metrics().accuracy);
        let auc = col(|r| r.final_metrics().macro_auc);
        let dice = col(|r| r.final_metrics().mean_dice);
        let _ = writeln!(s, "{lambda},mean,{},{},{}", acc.mean, auc.mean, dice.mean);
        let _ = writeln!(s, "{lambda},std,{},{},{}", acc.std, auc.std, dice.std);
    }
    s
}

/// Composite runs for every `λ` and seed; writes `sweep.csv` plus the usual
/// run artifacts into `cfg.out`.
pub fn sweep_lambda(cfg: &ExperimentConfig, lambdas: &[f64]) -> Result<Vec<RunResult>> {
    if lambdas.len() < 2 {
        return Err(Error::Config("a sweep needs at least two lambda values".into()));
    }
    cfg.validate()?;
    let strategies = lambdas
        .iter()
        .map(|&l| {
            let s = Strategy::Composite(l);
            s.validate().map(|_| s)
        })
        .collect::<Result<Vec<_>>>()?;
    let ds = prepare_dataset(cfg)?;
    let runs = run_strategies(cfg, &ds, &strategies)?;
    write_run_artifacts(cfg, &cfg.out, &runs)?;
    write(&cfg.out.join("sweep.csv"), sweep_csv(&runs))?;
    Ok(runs)
}

struct CurveRow {
    strategy: String,
    lambda: String,
    seed: u64,
    round: usize,
    values: [f64; 3],
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn format_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

fn parse_curves(path: &Path) -> Result<Vec<CurveRow>> {
    let text = read(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(CURVES_HEADER) {
        return Err(format_err(path, "unexpected header"));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || format_err(path, format!("line {}: {line:?}", i + 2));
            if f.len() != 7 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            Ok(CurveRow {
                strategy: f[0].to_string(),
                lambda: f[1].to_string(),
                seed: f[2].parse().map_err(|_| bad())?,
                round: f[3].parse().map_err(|_| bad())?,
                values: [num(f[4])?, num(f[5])?, num(f[6])?],
            })
        })
        .collect()
}

fn strategy_of(name: &str, lambda: &str, path: &Path) -> Result<Strategy> {
    let l = if lambda.is_empty() {
        0.0
    } else {
        lambda.parse().map_err(|_| format_err(path, format!("bad lambda {lambda:?}")))?
    };
    Strategy::from_name(name, l)
}

/// Per-round pattern counts of one selections file.
fn census_of(path: &Path) -> Result<BTreeMap<usize, [usize; 4]>> {
    let text = read(path)?;
    let mut out: BTreeMap<usize, [usize; 4]> = BTreeMap::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || format_err(path, format!("line {}: {line:?}", i + 1));
        if f.len() != 7 {
            return Err(bad());
        }
        let round: usize = f[0].parse().map_err(|_| bad())?;
        let p = Pattern::parse(f[6]).ok_or_else(bad)?;
        let idx = Pattern::ALL.iter().position(|q| *q == p).expect("listed");
        out.entry(round).or_default()[idx] += 1;
    }
    Ok(out)
}

/// Files written by [`report`].
#[derive(Clone, Debug, PartialEq)]
pub struct ReportFiles {
    pub curves: PathBuf,
    pub census: PathBuf,
    pub cams: Vec<PathBuf>,
}

/// CAM dumps per model: this many of the final round's queried samples.
const CAM_DUMPS: usize = 3;

/// Summarize a run directory into `<dir>/report/`.
///
/// Writes `curves_summary.csv` (mean and std per strategy and round),
/// `census.csv` (mean quadrant fractions of each round's queried batch) and
/// P2 PGM dumps of the predicted-class CAM and the expert mask for a few
/// samples queried in the final round. Missing inputs are reported together.
pub fn report(dir: &Path) -> Result<ReportFiles> {
    let config = dir.join("config.txt");
    let curves = dir.join("curves.csv");
    let missing: Vec<String> = [&config, &curves]
        .iter()
        .filter(|p| !p.is_file())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingArtifacts(missing));
    }
    let cfg = ExperimentConfig::from_file(&config)?;
    let rows = parse_curves(&curves)?;

    // (strategy, lambda) in first-seen order, seeds per group
    let mut groups: Vec<(String, String)> = Vec::new();
    let mut seeds: BTreeMap<(String, String), Vec<u64>> = BTreeMap::new();
    for r in &rows {
        let key = (r.strategy.clone(), r.lambda.clone());
        if !groups.contains(&key) {
            groups.push(key.clone());
        }
        let s = seeds.entry(key).or_default();
        if !s.contains(&r.seed) {
            s.push(r.seed);
        }
    }
    let mut missing = Vec::new();
    let mut runs = Vec::new();
    for key in &groups {
        let strategy = strategy_of(&key.0, &key.1, &curves)?;
        for &seed in &seeds[key] {
            let sel = selections_path(dir, &strategy, seed);
            let ckpt = checkpoint_path(dir, &strategy, seed);
            for p in [&sel, &ckpt] {
                if !p.is_file() {
                    missing.push(p.display().to_string());
                }
            }
            runs.push((key.clone(), strategy, seed, sel, ckpt));
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingArtifacts(missing));
    }

    let out = dir.join("report");
    let mut summary = String::from("strategy,lambda,round,stat,accuracy,macro_auc,mean_dice\n");
    for key in &groups {
        let mut by_round: BTreeMap<usize, Vec<[f64; 3]>> = BTreeMap::new();
        for r in rows.iter().filter(|r| r.strategy == key.0 && r.lambda == key.1) {
            by_round.entry(r.round).or_default().push(r.values);
        }
        for (round, vals) in by_round {
            let stats: Vec<Summary> = (0..3).map(|i| Summary::of(vals.iter().map(|v| v[i]).collect())).collect();
            let _ = writeln!(
                summary,
                "{},{},{round},mean,{},{},{}",
                key.0, key.1, stats[0].mean, stats[1].mean, stats[2].mean
            );
            let _ = writeln!(
                summary,
                "{},{},{round},std,{},{},{}",
                key.0, key.1, stats[0].std, stats[1].std, stats[2].std
            );
        }
    }
    let summary_path = out.join("curves_summary.csv");
    write(&summary_path, summary)?;

    let mut census = String::from("strategy,lambda,round");
    for p in Pattern::ALL {
        let _ = write!(census, ",{p}");
    }
    census.push('\n');
    for key in &groups {
        let mut fractions: BTreeMap<usize, Vec<[f64; 4]>> = BTreeMap::new();
        for (k, _, _, sel, _) in runs.iter().filter(|r| &r.0 == key) {
            debug_assert_eq!(k, key);
            for (round, counts) in census_of(sel)? {
                let n: usize = counts.iter().sum();
                fractions.entry(round).or_default().push(counts.map(|c| c as f64 / n as f64));
            }
        }
        for (round, fs) in fractions {
            let _ = write!(census, "{},{},{round}", key.0, key.1);
            for i in 0..4 {
                let _ = write!(census, ",{}", fs.iter().map(|f| f[i]).sum::<f64>() / fs.len() as f64);
            }
            census.push('\n');
        }
    }
    let census_path = out.join("census.csv");
    write(&census_path, census)?;

    let ds = prepare_dataset(&cfg)?;
    let mut cams = Vec::new();
    for (_, strategy, seed, sel, ckpt) in &runs {
        let classifier = load_checkpoint(ckpt)?;
        let text = read(sel)?;
        let last_round = text.lines().skip(1).filter_map(|l| l.split(',').next()?.parse::<usize>().ok()).max();
        let ids: Vec<usize> = text
            .lines()
            .skip(1)
            .filter(|l| l.split(',').next().and_then(|r| r.parse::<usize>().ok()) == last_round)
            .filter_map(|l| l.split(',').nth(2)?.parse().ok())
            .take(CAM_DUMPS)
            .collect();
        let tag = strategy_tag(strategy);
        for id in ids {
            let s = ds.get(id)?;
            let ins = inspect(&classifier, &s.image)?;
            let cam_path = out.join("cams").join(format!("{tag}_s{seed}_id{id}_cam{}.pgm", ins.predicted));
            write(&cam_path, to_pgm(ins.cam.grid())?)?;
            cams.push(cam_path);
            let mask_path = out.join("cams").join(format!("mask_id{id}.pgm"));
            if !cams.contains(&mask_path) {
                write(&mask_path, to_pgm(ds.esm(id)?.grid())?)?;
                cams.push(mask_path);
            }
        }
    }
    Ok(ReportFiles {
        curves: summary_path,
        census: census_path,
        cams,
    })
}
