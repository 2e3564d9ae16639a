//! Experiment orchestration: single runs, grid sweeps and MIA evaluation,
//! with append-only artifact directories.
//!
//! A run writes `run.json` (config echo, per-round metrics, final prompts,
//! budget), `metrics.csv` and `split.json` into `<out>/<hash>-seed<seed>`.
//! Existing directories are never touched; a rerun gets a `-r<N>` suffix.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, VariantMode, SCHEMA_VERSION};
use crate::data::SplitPlan;
use crate::error::{Error, Result};
use crate::federation::{RoundMetrics, Simulation};
use crate::mia::{self, AttackReport};
use crate::numeric::Matrix;
use crate::privacy::BudgetReport;

pub const METRICS_HEADER: [&str; 8] = [
    "round",
    "client",
    "loss",
    "local_acc",
    "neighbor_acc",
    "eps_spent",
    "sigma_local",
    "sigma_global",
];

/// Rounds averaged for the headline accuracy of a run.
pub const SUMMARY_WINDOW: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunArtifact {
    pub schema_version: u32,
    pub config: RunConfig,
    pub config_hash: String,
    pub seed: u64,
    pub status: RunStatus,
    /// Diagnostic of a failed run; the metrics before the failure are kept.
    pub error: Option<String>,
    pub metrics: Vec<RoundMetrics>,
    pub final_global: Option<Matrix>,
    pub final_locals: Vec<Matrix>,
    pub effective_locals: Vec<Matrix>,
    pub local_classes: Vec<Vec<usize>>,
    /// `None` when noise is off.
    pub budget: Option<BudgetReport>,
}

impl RunArtifact {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::MissingArtifact(format!("{}: {e}", path.display())))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Mean local accuracy over the last [`SUMMARY_WINDOW`] rounds.
    pub fn summary_local_acc(&self) -> Option<f64> {
        last_window_mean(&self.metrics, |m| Some(m.mean_local_acc()))
    }

    pub fn summary_neighbor_acc(&self) -> Option<f64> {
        last_window_mean(&self.metrics, RoundMetrics::mean_neighbor_acc)
    }
}

fn last_window_mean(metrics: &[RoundMetrics], f: impl Fn(&RoundMetrics) -> Option<f64>) -> Option<f64> {
    let start = metrics.len().saturating_sub(SUMMARY_WINDOW);
    let vals: Vec<f64> = metrics[start..].iter().filter_map(f).collect();
    if vals.is_empty() {
        None
    } else {
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// Trains `config` with `seed`, always returning an artifact. A failure is
/// recorded in the artifact and returned alongside it.
pub fn train(config: &RunConfig, seed: u64) -> Result<(RunArtifact, SplitPlan, Option<Error>)> {
    config.validate()?;
    let mut sim = Simulation::new(config, seed)?;
    let plan = sim.plan.clone();
    let mut artifact = RunArtifact {
        schema_version: SCHEMA_VERSION,
        config: config.clone(),
        config_hash: config.hash(),
        seed,
        status: RunStatus::Completed,
        error: None,
        metrics: Vec::new(),
        final_global: None,
        final_locals: Vec::new(),
        effective_locals: Vec::new(),
        local_classes: plan.local_classes.clone(),
        budget: None,
    };
    for _ in 0..config.protocol.rounds {
        if let Err(e) = sim.step() {
            log::error!("run {} seed {seed} failed at round {}: {e}", artifact.config_hash, sim.server.round);
            artifact.status = RunStatus::Failed;
            artifact.error = Some(e.to_string());
            artifact.metrics = sim.metrics;
            return Ok((artifact, plan, Some(e)));
        }
    }
    match sim.finish() {
        Ok(out) => {
            artifact.metrics = out.metrics;
            artifact.final_global = Some(out.final_global);
            artifact.final_locals = out.final_locals;
            artifact.effective_locals = out.effective_locals;
            artifact.budget = out.budget;
            Ok((artifact, plan, None))
        }
        Err(e) => {
            artifact.status = RunStatus::Failed;
            artifact.error = Some(e.to_string());
            Ok((artifact, plan, Some(e)))
        }
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Metrics CSV: one row per round, `client = all`, client means.
pub fn metrics_csv(metrics: &[RoundMetrics]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(METRICS_HEADER)?;
    for m in metrics {
        w.write_record([
            m.round.to_string(),
            "all".to_string(),
            m.train_loss.to_string(),
            m.mean_local_acc().to_string(),
            fmt_opt(m.mean_neighbor_acc()),
            fmt_opt(m.eps_spent),
            m.sigma_local.to_string(),
            m.sigma_global.to_string(),
        ])?;
    }
    w.into_inner()
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
}

/// Creates `<parent>/<name>`, or `<name>-r1`, `-r2`, ... if taken.
pub fn fresh_dir(parent: &Path, name: &str) -> Result<PathBuf> {
    fs::create_dir_all(parent)?;
    for attempt in 0usize.. {
        let dir = if attempt == 0 {
            parent.join(name)
        } else {
            parent.join(format!("{name}-r{attempt}"))
        };
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e.into()),
        }
    }
    unreachable!("unbounded attempt counter")
}

fn write_new(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::OpenOptions::new().write(true).create_new(true).open(path)?;
    f.write_all(bytes)?;
    Ok(())
}

pub fn run_dir_name(config: &RunConfig, seed: u64) -> String {
    format!("{}-seed{seed}", config.hash())
}

/// Where a run's files went and how it ended.
#[derive(Debug)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub artifact: RunArtifact,
    pub error: Option<Error>,
}

/// Trains and writes one run. Validation errors return before anything is
/// computed or written.
pub fn run_to_dir(config: &RunConfig, seed: u64, out: &Path) -> Result<RunOutput> {
    config.validate()?;
    let (artifact, plan, error) = train(config, seed)?;
    let dir = fresh_dir(out, &run_dir_name(config, seed))?;
    write_new(&dir.join("metrics.csv"), &metrics_csv(&artifact.metrics)?)?;
    write_new(&dir.join("split.json"), serde_json::to_string_pretty(&plan)?.as_bytes())?;
    write_new(&dir.join("run.json"), serde_json::to_string_pretty(&artifact)?.as_bytes())?;
    log::info!("wrote {}", dir.display());
    Ok(RunOutput { dir, artifact, error })
}

/// Seeds a config expands to: `master, master+1, ...` for each repetition.
pub fn seeds_of(config: &RunConfig) -> Vec<u64> {
    (0..config.seeds.repetitions as u64).map(|i| config.seeds.master + i).collect()
}

/// Grid over variants, ε (null = noise off), ranks and seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub schema_version: u32,
    #[serde(default)]
    pub base: RunConfig,
    pub variants: Vec<VariantMode>,
    pub epsilons: Vec<Option<f64>>,
    pub ranks: Vec<usize>,
    pub seeds: Vec<u64>,
}

/// One `(variant, ε, rank)` cell of a grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub variant: VariantMode,
    pub epsilon: Option<f64>,
    pub rank: usize,
}

impl GridSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        if value.get("schema_version").and_then(|v| v.as_u64()) != Some(SCHEMA_VERSION as u64) {
            return Err(Error::validation("schema_version", format!("expected {SCHEMA_VERSION}")));
        }
        let grid: GridSpec = serde_json::from_value(value).map_err(|e| Error::validation("grid", e.to_string()))?;
        grid.validate()?;
        Ok(grid)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::validation("grid", format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        for (field, empty) in [
            ("variants", self.variants.is_empty()),
            ("epsilons", self.epsilons.is_empty()),
            ("ranks", self.ranks.is_empty()),
            ("seeds", self.seeds.is_empty()),
        ] {
            if empty {
                return Err(Error::validation(field, "must not be empty"));
            }
        }
        for cell in self.cells() {
            self.config_for(&cell, self.seeds[0]).validate()?;
        }
        Ok(())
    }

    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &variant in &self.variants {
            for &epsilon in &self.epsilons {
                for &rank in &self.ranks {
                    out.push(Cell { variant, epsilon, rank });
                }
            }
        }
        out
    }

    pub fn config_for(&self, cell: &Cell, seed: u64) -> RunConfig {
        let mut c = self.base.clone();
        c.variant = cell.variant;
        c.dims.rank = cell.rank;
        match cell.epsilon {
            Some(eps) => {
                c.privacy.epsilon = eps;
                c.privacy.noise = true;
            }
            None => c.privacy.noise = false,
        }
        c.seeds.master = seed;
        c.seeds.repetitions = 1;
        c
    }
}

/// Mean and sample standard deviation over seeds of one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variant: VariantMode,
    pub epsilon: Option<f64>,
    pub rank: usize,
    pub seeds: usize,
    pub completed: usize,
    pub local_acc_mean: Option<f64>,
    pub local_acc_std: Option<f64>,
    pub neighbor_acc_mean: Option<f64>,
    pub neighbor_acc_std: Option<f64>,
    pub failures: Vec<String>,
}

pub fn mean_std(vals: &[f64]) -> (Option<f64>, Option<f64>) {
    match vals.len() {
        0 => (None, None),
        1 => (Some(vals[0]), None),
        n => {
            let mean = vals.iter().sum::<f64>() / n as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (Some(mean), Some(var.sqrt()))
        }
    }
}

pub const SUMMARY_HEADER: [&str; 10] = [
    "variant",
    "epsilon",
    "rank",
    "seeds",
    "completed",
    "local_acc_mean",
    "local_acc_std",
    "neighbor_acc_mean",
    "neighbor_acc_std",
    "failures",
];

pub fn summary_csv(rows: &[SummaryRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(SUMMARY_HEADER)?;
    for r in rows {
        w.write_record([
            r.variant.to_string(),
            fmt_opt(r.epsilon),
            r.rank.to_string(),
            r.seeds.to_string(),
            r.completed.to_string(),
            fmt_opt(r.local_acc_mean),
            fmt_opt(r.local_acc_std),
            fmt_opt(r.neighbor_acc_mean),
            fmt_opt(r.neighbor_acc_std),
            r.failures.join("; "),
        ])?;
    }
    w.into_inner()
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
}

#[derive(Debug)]
pub struct SweepOutput {
    pub dir: PathBuf,
    pub rows: Vec<SummaryRow>,
}

/// Runs every `(cell, seed)` pair; failures are recorded per cell and the
/// sweep carries on. Writes `summary.csv` with exactly one row per cell.
pub fn sweep(grid: &GridSpec, out: &Path) -> Result<SweepOutput> {
    grid.validate()?;
    let dir = fresh_dir(out, &format!("sweep-{}", grid_hash(grid)))?;
    let runs_dir = dir.join("runs");
    let cells = grid.cells();
    let jobs: Vec<(usize, u64)> = (0..cells.len())
        .flat_map(|c| grid.seeds.iter().map(move |&s| (c, s)))
        .collect();
    let results: Vec<(usize, u64, std::result::Result<RunArtifact, String>)> = jobs
        .into_par_iter()
        .map(|(c, seed)| {
            let config = grid.config_for(&cells[c], seed);
            let res = match run_to_dir(&config, seed, &runs_dir) {
                Ok(RunOutput { error: None, artifact, .. }) => Ok(artifact),
                Ok(RunOutput { error: Some(e), .. }) | Err(e) => Err(format!("seed {seed}: {e}")),
            };
            (c, seed, res)
        })
        .collect();

    let rows: Vec<SummaryRow> = cells
        .iter()
        .enumerate()
        .map(|(c, cell)| {
            let mut local = Vec::new();
            let mut neighbor = Vec::new();
            let mut failures = Vec::new();
            for (_, _, res) in results.iter().filter(|r| r.0 == c) {
                match res {
                    Ok(a) => {
                        local.extend(a.summary_local_acc());
                        neighbor.extend(a.summary_neighbor_acc());
                    }
                    Err(msg) => failures.push(msg.clone()),
                }
            }
            let (lm, ls) = mean_std(&local);
            let (nm, ns) = mean_std(&neighbor);
            SummaryRow {
                variant: cell.variant,
                epsilon: cell.epsilon,
                rank: cell.rank,
                seeds: grid.seeds.len(),
                completed: grid.seeds.len() - failures.len(),
                local_acc_mean: lm,
                local_acc_std: ls,
                neighbor_acc_mean: nm,
                neighbor_acc_std: ns,
                failures,
            }
        })
        .collect();
    write_new(&dir.join("grid.json"), serde_json::to_string_pretty(grid)?.as_bytes())?;
    write_new(&dir.join("summary.csv"), &summary_csv(&rows)?)?;
    Ok(SweepOutput { dir, rows })
}

fn grid_hash(grid: &GridSpec) -> String {
    use sha2::{Digest, Sha256};
    let text = serde_json::to_string(grid).expect("grid serializes");
    hex::encode(&Sha256::digest(text.as_bytes())[..6])
}

/// MIA job: which target run to attack and with how many shadows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MiaConfig {
    pub schema_version: u32,
    /// Path to the target's `run.json`, relative to the MIA config file.
    pub target: PathBuf,
    #[serde(default = "default_shadows")]
    pub shadows: usize,
}

fn default_shadows() -> usize {
    mia::DEFAULT_SHADOWS
}

impl MiaConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::validation("mia config", format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: MiaConfig =
            serde_json::from_str(&text).map_err(|e| Error::validation("mia config", e.to_string()))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::validation("schema_version", format!("expected {SCHEMA_VERSION}")));
        }
        if cfg.shadows < 2 {
            return Err(Error::validation("shadows", format!("must be >= 2, got {}", cfg.shadows)));
        }
        if cfg.target.is_relative() {
            if let Some(parent) = path.parent() {
                cfg.target = parent.join(&cfg.target);
            }
        }
        Ok(cfg)
    }
}

/// Attacks a completed target run and returns the report.
pub fn mia_report(target: &RunArtifact, shadows: usize) -> Result<AttackReport> {
    if target.status != RunStatus::Completed {
        return Err(Error::MissingArtifact("target run did not complete".into()));
    }
    let global = target
        .final_global
        .as_ref()
        .ok_or_else(|| Error::MissingArtifact("target run has no final prompt".into()))?;
    mia::evaluate_target(&target.config, target.seed, global, &target.effective_locals, shadows)
}

/// Loads the target named by `cfg`, attacks it and writes `report.json`.
pub fn mia_to_dir(cfg: &MiaConfig, out: &Path) -> Result<(PathBuf, AttackReport)> {
    if !cfg.target.is_file() {
        return Err(Error::MissingArtifact(cfg.target.display().to_string()));
    }
    let target = RunArtifact::load(&cfg.target)?;
    let report = mia_report(&target, cfg.shadows)?;
    let dir = fresh_dir(out, &format!("mia-{}-seed{}", target.config_hash, target.seed))?;
    let path = dir.join("report.json");
    write_new(&path, serde_json::to_string_pretty(&report)?.as_bytes())?;
    Ok((path, report))
}

/// Checks a report against its documented JSON shape.
pub fn validate_report_json(value: &serde_json::Value) -> Result<()> {
    let obj = value
        .as_object()
        .ok_or_else(|| Error::validation("report", "must be an object"))?;
    let unit = |k: &str| -> Result<f64> {
        let v = obj
            .get(k)
            .and_then(serde_json::Value::as_f64)
            .ok_or_else(|| Error::validation(k, "missing or not a number"))?;
        if (0.0..=1.0).contains(&v) {
            Ok(v)
        } else {
            Err(Error::validation(k, format!("{v} outside [0, 1]")))
        }
    };
    let rate = unit("success_rate")?;
    let lo = unit("ci_low")?;
    let hi = unit("ci_high")?;
    if !(lo <= rate && rate <= hi) {
        return Err(Error::validation("ci_low", "interval does not contain the rate"));
    }
    if obj.get("n_queries").and_then(serde_json::Value::as_u64).unwrap_or(0) == 0 {
        return Err(Error::validation("n_queries", "must be a positive integer"));
    }
    match obj.get("epsilon") {
        Some(serde_json::Value::Null) => {}
        Some(v) if v.as_f64().is_some_and(|e| e > 0.0) => {}
        _ => return Err(Error::validation("epsilon", "must be null or a positive number")),
    }
    let variant = obj.get("variant").cloned().unwrap_or_default();
    serde_json::from_value::<VariantMode>(variant).map_err(|e| Error::validation("variant", e.to_string()))?;
    Ok(())
}

/// Process exit status for an error: 2 for bad input, 3 for a runtime
/// invariant breach, 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        e if e.is_validation() => 2,
        Error::MissingArtifact(_) => 2,
        Error::Invariant(_) | Error::BudgetExhausted { .. } => 3,
        _ => 1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        let mut c = RunConfig::default();
        c.dims.prompt_len = 2;
        c.dims.token_dim = 4;
        c.dims.num_classes = 4;
        c.dims.rank = 1;
        c.protocol.clients = 2;
        c.protocol.rounds = 3;
        c.protocol.batch_size = 4;
        c.data.per_class_count = 10;
        c
    }

    #[test]
    fn csv_has_one_row_per_round() {
        let (a, _, err) = train(&tiny(), 0).unwrap();
        assert!(err.is_none());
        let text = String::from_utf8(metrics_csv(&a.metrics).unwrap()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], METRICS_HEADER.join(","));
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("1,all,"));
    }

    #[test]
    fn noise_off_leaves_eps_cell_empty() {
        let mut c = tiny();
        c.privacy.noise = false;
        let (a, _, _) = train(&c, 0).unwrap();
        assert!(a.budget.is_none());
        let text = String::from_utf8(metrics_csv(&a.metrics).unwrap()).unwrap();
        let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
        assert_eq!(row[5], "");
        assert_eq!(row[6], "0");
    }

    #[test]
    fn reruns_never_overwrite() {
        let tmp = tempfile::tempdir().unwrap();
        let a = run_to_dir(&tiny(), 1, tmp.path()).unwrap();
        let b = run_to_dir(&tiny(), 1, tmp.path()).unwrap();
        assert_ne!(a.dir, b.dir);
        assert!(b.dir.to_string_lossy().ends_with("-r1"));
        assert_eq!(
            fs::read(a.dir.join("metrics.csv")).unwrap(),
            fs::read(b.dir.join("metrics.csv")).unwrap()
        );
    }

    #[test]
    fn invalid_config_writes_nothing() {
        let tmp = tempfile::tempdir().unwrap();
        let mut c = tiny();
        c.privacy.epsilon = -1.0;
        let err = run_to_dir(&c, 0, tmp.path()).unwrap_err();
        assert_eq!(exit_code(&err), 2);
        assert_eq!(fs::read_dir(tmp.path()).unwrap().count(), 0);
    }

    #[test]
    fn grid_cells_and_configs() {
        let grid = GridSpec {
            schema_version: 1,
            base: tiny(),
            variants: vec![VariantMode::DpFpl, VariantMode::DpFplNoResidual],
            epsilons: vec![None, Some(0.4)],
            ranks: vec![1, 2],
            seeds: vec![0],
        };
        assert_eq!(grid.cells().len(), 8);
        let c = grid.config_for(&grid.cells()[0], 5);
        assert!(!c.privacy.noise);
        assert_eq!(c.seeds.master, 5);
    }

    #[test]
    fn mean_std_cases() {
        assert_eq!(mean_std(&[]), (None, None));
        assert_eq!(mean_std(&[0.5]), (Some(0.5), None));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, Some(2.0));
        assert!((s.unwrap() - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn report_schema() {
        let ok = serde_json::json!({
            "success_rate": 0.6, "ci_low": 0.5, "ci_high": 0.7, "n_queries": 100,
            "n_correct": 60, "epsilon": null, "variant": "dp-fpl", "attack": "x", "shadows": 2
        });
        validate_report_json(&ok).unwrap();
        let mut bad = ok.clone();
        bad["success_rate"] = serde_json::json!(1.5);
        assert!(validate_report_json(&bad).is_err());
        let mut bad = ok;
        bad["epsilon"] = serde_json::json!(-0.1);
        assert!(validate_report_json(&bad).is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::validation("x", "y")), 2);
        assert_eq!(exit_code(&Error::Invariant("z".into())), 3);
        assert_eq!(exit_code(&Error::MissingArtifact("p".into())), 2);
    }
}
