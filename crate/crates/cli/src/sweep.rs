//! Sweeps over perturbation factors, seeds and algorithms, and the summary
//! table built from their per-run outputs.
//!
//! Layout under `out_dir`:
//!
//! ```text
//! manifest.json  summary.csv  summary.json
//! sigma2_<s>/seed_<k>/<algorithm>/epochs.csv
//!                                 run.json
//!                                 final_params.csv, final_params.json
//!                                 modes_epoch<e>.csv   (every modes_every epochs)
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use modngd::datasets::{make_splits, write_splits_csv, Splits};
use modngd::dynamics::{
    train_with, write_epochs_csv, Algorithm, EpochObserver, EpochSnapshot, MaskPolicy, Trajectory,
};
use modngd::io::{fmt_f64, parse_f64, read_csv, CsvWriter};
use modngd::network::MlpConfig;
use modngd::risk::write_mode_report_csv;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::CliError;

pub const MANIFEST: &str = "manifest.json";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const EPOCHS_CSV: &str = "epochs.csv";
pub const RUN_JSON: &str = "run.json";
pub const DATA_CSV: &str = "data.csv";
pub const FINAL_PARAMS: &str = "final_params";

pub fn sigma2_dir_name(sigma2: f64) -> String {
    format!("sigma2_{sigma2}")
}

pub fn cell_dir(out_dir: &Path, sigma2: f64, seed: u64) -> PathBuf {
    out_dir.join(sigma2_dir_name(sigma2)).join(format!("seed_{seed}"))
}

pub fn modes_file_name(epoch: usize) -> String {
    format!("modes_epoch{epoch}.csv")
}

/// Mean of the last `window` entries (all of them if fewer).
pub fn final_window_mean(values: &[f64], window: usize) -> f64 {
    let k = window.min(values.len()).max(1);
    let tail = &values[values.len().saturating_sub(k)..];
    tail.iter().sum::<f64>() / tail.len() as f64
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

struct ModeDump<'a> {
    dir: &'a Path,
    every: usize,
}

impl EpochObserver for ModeDump<'_> {
    fn wants_statistics(&self, epoch: usize) -> bool {
        self.every > 0 && epoch.is_multiple_of(self.every)
    }

    fn observe(&mut self, s: &EpochSnapshot<'_>) -> modngd::Result<()> {
        if let (true, Some(stats)) = (self.wants_statistics(s.record.epoch), s.stats) {
            write_mode_report_csv(stats, s.mask, &self.dir.join(modes_file_name(s.record.epoch)))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunInfo {
    pub sigma2: f64,
    pub seed: u64,
    pub algorithm: Algorithm,
    pub final_window: usize,
    pub final_test_mse: f64,
    pub initial_train_mse: f64,
    pub initial_test_mse: f64,
    pub final_train_mse: f64,
    pub sigma0: f64,
    pub net: MlpConfig,
    pub train: modngd::dynamics::TrainConfig,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub algorithm: Algorithm,
    pub trajectory: Trajectory,
    pub final_test_mse: f64,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Report(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Report(format!("{}: {e}", path.display())))
}

/// Trains every configured algorithm on one `(sigma2, seed)` cell and writes
/// the per-run outputs below `dir/<algorithm>/`. Modified NGD runs first so
/// its cut counts can drive the cut-smallest baseline; it is trained (but not
/// written) even when only the baseline was requested.
pub fn run_cell(cfg: &ExperimentConfig, sigma2: f64, seed: u64, dir: &Path) -> Vec<(Algorithm, Result<RunOutcome, CliError>)> {
    let splits = match make_splits(&cfg.data_config(sigma2, seed)) {
        Ok(s) => s,
        Err(e) => {
            let msg = format!("sigma2={sigma2} seed={seed}: {e}");
            return cfg.ordered_algorithms().into_iter().map(|a| (a, Err(CliError::Runtime(msg.clone())))).collect();
        }
    };
    let net = cfg.net_config(seed);
    let algorithms = cfg.ordered_algorithms();
    let mut results = Vec::new();
    let mut schedule: Option<Result<Vec<usize>, String>> = None;

    let needs_schedule = algorithms.contains(&Algorithm::CutSmallest) && !cfg.force_all_cut;
    if needs_schedule && !algorithms.contains(&Algorithm::ModifiedNgd) {
        let tc = cfg.train_config(Algorithm::ModifiedNgd);
        schedule = Some(
            train_with(&splits, &net, &tc, MaskPolicy::Criterion, &mut modngd::dynamics::Silent)
                .map(|t| t.cut_counts())
                .map_err(|e| e.to_string()),
        );
    }

    for algorithm in algorithms {
        let context = |e: &dyn std::fmt::Display| {
            CliError::Runtime(format!("sigma2={sigma2} seed={seed} algorithm={algorithm}: {e}"))
        };
        let policy = if cfg.force_all_cut {
            Ok(MaskPolicy::CutAll)
        } else {
            match algorithm {
                Algorithm::ModifiedNgd => Ok(MaskPolicy::Criterion),
                Algorithm::Ngd => Ok(MaskPolicy::PreserveAll),
                Algorithm::CutSmallest => match &schedule {
                    Some(Ok(s)) => Ok(MaskPolicy::CutSmallest(Some(s.as_slice()))),
                    Some(Err(e)) => Err(context(&format!("modified_ngd run for the cut schedule failed: {e}"))),
                    None => Err(context(&"no cut schedule")),
                },
            }
        };
        let outcome = policy.and_then(|p| {
            run_single(cfg, &splits, &net, sigma2, seed, algorithm, p, &dir.join(algorithm.name())).map_err(|e| context(&e))
        });
        if algorithm == Algorithm::ModifiedNgd {
            schedule = Some(match &outcome {
                Ok(o) => Ok(o.trajectory.cut_counts()),
                Err(e) => Err(e.to_string()),
            });
        }
        results.push((algorithm, outcome));
    }
    results
}

#[allow(clippy::too_many_arguments)]
fn run_single(
    cfg: &ExperimentConfig,
    splits: &Splits,
    net: &MlpConfig,
    sigma2: f64,
    seed: u64,
    algorithm: Algorithm,
    policy: MaskPolicy<'_>,
    dir: &Path,
) -> Result<RunOutcome, CliError> {
    std::fs::create_dir_all(dir)?;
    let tc = cfg.train_config(algorithm);
    let mut dump = ModeDump { dir, every: cfg.modes_every };
    let trajectory = train_with(splits, net, &tc, policy, &mut dump)?;
    write_epochs_csv(&trajectory.records, &dir.join(EPOCHS_CSV))?;
    trajectory.final_state.save_checkpoint(dir, FINAL_PARAMS)?;

    let test: Vec<f64> = trajectory.records.iter().map(|r| r.test_mse).collect();
    let final_test_mse = final_window_mean(&test, cfg.final_window);
    let info = RunInfo {
        sigma2,
        seed,
        algorithm,
        final_window: cfg.final_window,
        final_test_mse,
        initial_train_mse: trajectory.initial_train_mse,
        initial_test_mse: trajectory.initial_test_mse,
        final_train_mse: trajectory.records.last().map_or(f64::NAN, |r| r.train_mse),
        sigma0: tc.sigma0_for(splits.train.len()),
        net: net.clone(),
        train: tc,
    };
    write_json(&dir.join(RUN_JSON), &info)?;
    Ok(RunOutcome { algorithm, trajectory, final_test_mse })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellValue {
    pub sigma2: f64,
    pub seed: u64,
    pub algorithm: Algorithm,
    pub final_test_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub sigma2: f64,
    /// An algorithm name, or `diff` for `ngd - modified_ngd`.
    pub column: String,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// Final-window test errors keyed by `(sigma2, seed, algorithm)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryTable {
    pub sigma2_list: Vec<f64>,
    pub seeds: Vec<u64>,
    pub algorithms: Vec<Algorithm>,
    pub final_window: usize,
    pub cells: Vec<CellValue>,
}

impl SummaryTable {
    pub fn value(&self, sigma2: f64, seed: u64, algorithm: Algorithm) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.sigma2 == sigma2 && c.seed == seed && c.algorithm == algorithm)
            .map(|c| c.final_test_mse)
    }

    /// `ngd - modified_ngd` for one cell.
    pub fn diff(&self, sigma2: f64, seed: u64) -> Option<f64> {
        Some(self.value(sigma2, seed, Algorithm::Ngd)? - self.value(sigma2, seed, Algorithm::ModifiedNgd)?)
    }

    fn column_values(&self, sigma2: f64, column: Option<Algorithm>) -> Vec<f64> {
        self.seeds
            .iter()
            .filter_map(|&s| match column {
                Some(a) => self.value(sigma2, s, a),
                None => self.diff(sigma2, s),
            })
            .collect()
    }

    pub fn aggregates(&self) -> Vec<Aggregate> {
        let mut out = Vec::new();
        for &s2 in &self.sigma2_list {
            let columns = self.algorithms.iter().map(|a| (a.name().to_string(), Some(*a))).chain([("diff".to_string(), None)]);
            for (name, col) in columns {
                let v = self.column_values(s2, col);
                if v.is_empty() {
                    continue;
                }
                let (mean, std) = mean_std(&v);
                out.push(Aggregate { sigma2: s2, column: name, mean, std, n: v.len() });
            }
        }
        out
    }

    pub fn aggregate(&self, sigma2: f64, column: &str) -> Option<Aggregate> {
        self.aggregates().into_iter().find(|a| a.sigma2 == sigma2 && a.column == column)
    }

    pub fn csv_header(&self) -> Vec<String> {
        let mut h = vec!["sigma2".to_string(), "seed".to_string()];
        h.extend(self.algorithms.iter().map(|a| a.name().to_string()));
        h.push("diff".to_string());
        h
    }

    /// Per-seed rows followed by `mean` and `std` rows for each `sigma2`.
    /// Missing values are empty fields.
    pub fn csv_rows(&self) -> Vec<Vec<String>> {
        let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
        let mut rows = Vec::new();
        for &s2 in &self.sigma2_list {
            for &seed in &self.seeds {
                let mut row = vec![fmt_f64(s2), seed.to_string()];
                row.extend(self.algorithms.iter().map(|a| opt(self.value(s2, seed, *a))));
                row.push(opt(self.diff(s2, seed)));
                rows.push(row);
            }
            let aggs: Vec<Aggregate> = self.aggregates().into_iter().filter(|a| a.sigma2 == s2).collect();
            for (label, pick) in [("mean", true), ("std", false)] {
                let mut row = vec![fmt_f64(s2), label.to_string()];
                let names = self.algorithms.iter().map(|a| a.name()).chain(["diff"]);
                for name in names {
                    let a = aggs.iter().find(|a| a.column == name);
                    row.push(opt(a.map(|a| if pick { a.mean } else { a.std })));
                }
                rows.push(row);
            }
        }
        rows
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), CliError> {
        let header = self.csv_header();
        let header: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
        let mut w = CsvWriter::create(path, &header)?;
        for row in self.csv_rows() {
            w.row(&row)?;
        }
        Ok(w.finish()?)
    }

    pub fn write_json(&self, path: &Path, config: &ExperimentConfig) -> Result<(), CliError> {
        #[derive(Serialize)]
        struct Doc<'a> {
            table: &'a SummaryTable,
            aggregates: Vec<Aggregate>,
            config: &'a ExperimentConfig,
        }
        write_json(path, &Doc { table: self, aggregates: self.aggregates(), config })
    }

    pub fn read_json(path: &Path) -> Result<Self, CliError> {
        #[derive(Deserialize)]
        struct Doc {
            table: SummaryTable,
        }
        Ok(read_json::<Doc>(path)?.table)
    }

    /// Rebuilds the table from the `epochs.csv` files under `out_dir`.
    pub fn recompute(&self, out_dir: &Path) -> Result<Self, CliError> {
        let mut cells = Vec::new();
        for c in &self.cells {
            let path = cell_dir(out_dir, c.sigma2, c.seed).join(c.algorithm.name()).join(EPOCHS_CSV);
            let test = read_test_mse(&path)?;
            cells.push(CellValue { final_test_mse: final_window_mean(&test, self.final_window), ..*c });
        }
        Ok(Self { cells, ..self.clone() })
    }
}

/// The `test_mse` column of an `epochs.csv`.
pub fn read_test_mse(path: &Path) -> Result<Vec<f64>, CliError> {
    let (header, rows) = read_csv(path).map_err(|e| CliError::Report(format!("{}: {e}", path.display())))?;
    let col = header
        .iter()
        .position(|h| h == "test_mse")
        .ok_or_else(|| CliError::Report(format!("{}: no test_mse column", path.display())))?;
    rows.iter()
        .map(|r| parse_f64(&r[col], "test_mse").map_err(|e| CliError::Report(format!("{}: {e}", path.display()))))
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sigma2: f64,
    pub seed: u64,
    pub algorithm: Algorithm,
    pub ok: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ExperimentConfig,
    pub complete: bool,
    pub runs: Vec<ManifestEntry>,
}

#[derive(Debug)]
pub struct SweepOutcome {
    pub summary: SummaryTable,
    pub manifest: Manifest,
    /// Trajectories of successful runs, keyed by `(sigma2 bits, seed, algorithm)`.
    pub trajectories: BTreeMap<(u64, u64, Algorithm), Trajectory>,
}

impl SweepOutcome {
    pub fn failures(&self) -> Vec<&ManifestEntry> {
        self.manifest.runs.iter().filter(|r| !r.ok).collect()
    }

    pub fn trajectory(&self, sigma2: f64, seed: u64, algorithm: Algorithm) -> Option<&Trajectory> {
        self.trajectories.get(&(sigma2.to_bits(), seed, algorithm))
    }
}

fn is_sweep_entry(name: &str) -> bool {
    name.starts_with("sigma2_") || [MANIFEST, SUMMARY_CSV, SUMMARY_JSON, "diff.csv"].contains(&name)
}

/// Refuses to reuse a directory holding sweep outputs unless `force`, in
/// which case those outputs are removed first.
pub fn prepare_out_dir(out_dir: &Path, force: bool) -> Result<(), CliError> {
    if out_dir.exists() {
        let mut existing = Vec::new();
        for entry in std::fs::read_dir(out_dir)? {
            let entry = entry?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if is_sweep_entry(&name) {
                existing.push(entry.path());
            }
        }
        if !existing.is_empty() {
            if !force {
                return Err(CliError::Overwrite(out_dir.display().to_string()));
            }
            for p in existing {
                if p.is_dir() {
                    std::fs::remove_dir_all(&p)?;
                } else {
                    std::fs::remove_file(&p)?;
                }
            }
        }
    }
    std::fs::create_dir_all(out_dir)?;
    Ok(())
}

/// Runs every `(sigma2, seed)` cell on a pool of `cfg.jobs` threads, then
/// writes the manifest and the summary. Failed runs are listed in the
/// manifest and left out of the summary; the caller decides how to report
/// them.
pub fn run_sweep(cfg: &ExperimentConfig, force: bool) -> Result<SweepOutcome, CliError> {
    prepare_out_dir(&cfg.out_dir, force)?;
    let mut manifest = Manifest { config: cfg.clone(), complete: false, runs: Vec::new() };
    write_json(&cfg.out_dir.join(MANIFEST), &manifest)?;

    let cells: Vec<(f64, u64)> = cfg.sigma2.iter().flat_map(|&s| cfg.seeds.iter().map(move |&k| (s, k))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let results: Vec<_> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(s2, seed)| {
                let r = run_cell(cfg, s2, seed, &cell_dir(&cfg.out_dir, s2, seed));
                for (a, o) in &r {
                    match o {
                        Ok(o) => eprintln!("sigma2={s2} seed={seed} {a}: final test mse {:.6e}", o.final_test_mse),
                        Err(e) => eprintln!("sigma2={s2} seed={seed} {a}: FAILED: {e}"),
                    }
                }
                (s2, seed, r)
            })
            .collect()
    });

    let mut summary = SummaryTable {
        sigma2_list: cfg.sigma2.clone(),
        seeds: cfg.seeds.clone(),
        algorithms: cfg.ordered_algorithms(),
        final_window: cfg.final_window,
        cells: Vec::new(),
    };
    let mut trajectories = BTreeMap::new();
    for (s2, seed, runs) in results {
        for (algorithm, outcome) in runs {
            match outcome {
                Ok(o) => {
                    manifest.runs.push(ManifestEntry { sigma2: s2, seed, algorithm, ok: true, error: None });
                    summary.cells.push(CellValue { sigma2: s2, seed, algorithm, final_test_mse: o.final_test_mse });
                    trajectories.insert((s2.to_bits(), seed, algorithm), o.trajectory);
                }
                Err(e) => manifest.runs.push(ManifestEntry {
                    sigma2: s2,
                    seed,
                    algorithm,
                    ok: false,
                    error: Some(e.to_string()),
                }),
            }
        }
    }
    manifest.complete = true;
    write_json(&cfg.out_dir.join(MANIFEST), &manifest)?;
    summary.write_csv(&cfg.out_dir.join(SUMMARY_CSV))?;
    summary.write_json(&cfg.out_dir.join(SUMMARY_JSON), cfg)?;
    Ok(SweepOutcome { summary, manifest, trajectories })
}

/// Writes `data.csv` for every configured cell.
pub fn generate_data(cfg: &ExperimentConfig, force: bool) -> Result<Vec<PathBuf>, CliError> {
    let mut written = Vec::new();
    for &s2 in &cfg.sigma2 {
        for &seed in &cfg.seeds {
            let dir = cell_dir(&cfg.out_dir, s2, seed);
            let path = dir.join(DATA_CSV);
            if path.exists() && !force {
                return Err(CliError::Overwrite(path.display().to_string()));
            }
            std::fs::create_dir_all(&dir)?;
            write_splits_csv(&make_splits(&cfg.data_config(s2, seed))?, &path)?;
            written.push(path);
        }
    }
    Ok(written)
}

/// Trains the single configured cell into `out_dir/<algorithm>/`.
pub fn train_single(cfg: &ExperimentConfig, force: bool) -> Result<Vec<RunOutcome>, CliError> {
    let (&[s2], &[seed]) = (cfg.sigma2.as_slice(), cfg.seeds.as_slice()) else {
        return Err(CliError::Config("train takes exactly one sigma2 and one seed".into()));
    };
    for a in &cfg.algorithms {
        let p = cfg.out_dir.join(a.name()).join(EPOCHS_CSV);
        if p.exists() && !force {
            return Err(CliError::Overwrite(p.display().to_string()));
        }
    }
    let mut out = Vec::new();
    for (_, r) in run_cell(cfg, s2, seed, &cfg.out_dir) {
        out.push(r?);
    }
    Ok(out)
}

/// Re-derives `summary.csv` from the per-run files. Returns the largest
/// absolute difference over all fields.
pub fn verify_summary(out_dir: &Path) -> Result<f64, CliError> {
    let stored = SummaryTable::read_json(&out_dir.join(SUMMARY_JSON))?;
    let fresh = stored.recompute(out_dir)?;
    let path = out_dir.join(SUMMARY_CSV);
    let (header, rows) = read_csv(&path).map_err(|e| CliError::Report(format!("{}: {e}", path.display())))?;
    if header != fresh.csv_header() {
        return Err(CliError::Report(format!("{}: unexpected header {header:?}", path.display())));
    }
    let expected = fresh.csv_rows();
    if rows.len() != expected.len() {
        return Err(CliError::Report(format!("{}: {} rows, expected {}", path.display(), rows.len(), expected.len())));
    }
    let mut worst = 0.0f64;
    for (i, (got, want)) in rows.iter().zip(&expected).enumerate() {
        for (j, (g, w)) in got.iter().zip(want).enumerate() {
            if j == 1 || (g.is_empty() && w.is_empty()) {
                if g != w {
                    return Err(CliError::Report(format!("row {}: seed field {g} != {w}", i + 1)));
                }
                continue;
            }
            let parse = |s: &str| parse_f64(s, "summary field").map_err(|e| CliError::Report(format!("row {}: {e}", i + 1)));
            worst = worst.max((parse(g)? - parse(w)?).abs());
        }
    }
    Ok(worst)
}
