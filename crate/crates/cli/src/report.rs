//! Reports derived from sweep and run outputs.

use std::collections::BTreeMap;
use std::path::Path;

use modngd::io::{fmt_f64, parse_f64, read_csv, CsvWriter};

use crate::error::CliError;
use crate::sweep::{mean_std, modes_file_name, EPOCHS_CSV};

pub const DIFF_CSV: &str = "diff.csv";
pub const PRESERVATION_CSV: &str = "preservation.csv";
pub const N_PRESERVED_CSV: &str = "n_preserved.csv";

fn report_err(path: &Path, msg: impl std::fmt::Display) -> CliError {
    CliError::Report(format!("{}: {msg}", path.display()))
}

fn column(header: &[String], name: &str, path: &Path) -> Result<usize, CliError> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| report_err(path, format!("missing column {name}")))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffRow {
    pub sigma2: f64,
    pub mean_diff: f64,
    pub std_diff: f64,
}

/// Per-seed `ngd - modified_ngd` from one or more `summary.csv` files,
/// aggregated per `sigma2` and sorted by `sigma2` descending.
pub fn diff_rows(summaries: &[&Path]) -> Result<Vec<DiffRow>, CliError> {
    let mut per_sigma: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for &path in summaries {
        let (header, rows) = read_csv(path).map_err(|e| report_err(path, e))?;
        let s_col = column(&header, "sigma2", path)?;
        let k_col = column(&header, "seed", path)?;
        let m_col = column(&header, "modified_ngd", path)?;
        let n_col = column(&header, "ngd", path)?;
        for row in rows {
            if row[k_col].parse::<u64>().is_err() || row[m_col].is_empty() || row[n_col].is_empty() {
                continue;
            }
            let parse = |s: &str| parse_f64(s, "summary field").map_err(|e| report_err(path, e));
            let s2 = parse(&row[s_col])?;
            per_sigma.entry(s2.to_bits()).or_default().push(parse(&row[n_col])? - parse(&row[m_col])?);
        }
    }
    let mut out: Vec<DiffRow> = per_sigma
        .into_iter()
        .map(|(bits, v)| {
            let (mean_diff, std_diff) = mean_std(&v);
            DiffRow { sigma2: f64::from_bits(bits), mean_diff, std_diff }
        })
        .collect();
    out.sort_by(|a, b| b.sigma2.total_cmp(&a.sigma2));
    Ok(out)
}

/// Writes `sigma2,mean_diff,std_diff`.
pub fn report_diff(summaries: &[&Path], out: &Path) -> Result<Vec<DiffRow>, CliError> {
    let rows = diff_rows(summaries)?;
    let mut w = CsvWriter::create(out, &["sigma2", "mean_diff", "std_diff"])?;
    for r in &rows {
        w.row(&[fmt_f64(r.sigma2), fmt_f64(r.mean_diff), fmt_f64(r.std_diff)])?;
    }
    w.finish()?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Preservation {
    /// Fraction of epochs in which mode `i + 1` was preserved. A mode absent
    /// from an epoch's spectrum counts as not preserved.
    pub fractions: Vec<f64>,
    /// `(epoch, n_preserved)`.
    pub n_preserved: Vec<(usize, usize)>,
}

/// Reads `modes_epoch<e>.csv` for every epoch listed in the run's
/// `epochs.csv`.
pub fn preservation(run_dir: &Path) -> Result<Preservation, CliError> {
    let epochs_path = run_dir.join(EPOCHS_CSV);
    let (header, rows) = read_csv(&epochs_path).map_err(|e| report_err(&epochs_path, e))?;
    let e_col = column(&header, "epoch", &epochs_path)?;
    let epochs = rows
        .iter()
        .map(|r| r[e_col].parse::<usize>().map_err(|_| report_err(&epochs_path, format!("bad epoch {}", r[e_col]))))
        .collect::<Result<Vec<_>, _>>()?;
    if epochs.is_empty() {
        return Err(report_err(&epochs_path, "no epochs"));
    }
    let missing: Vec<String> = epochs
        .iter()
        .filter(|e| !run_dir.join(modes_file_name(**e)).exists())
        .map(|e| e.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(report_err(run_dir, format!("missing mode files for epochs {}", missing.join(", "))));
    }

    let mut counts: Vec<usize> = Vec::new();
    let mut n_preserved = Vec::with_capacity(epochs.len());
    for &e in &epochs {
        let path = run_dir.join(modes_file_name(e));
        let (header, rows) = read_csv(&path).map_err(|err| report_err(&path, err))?;
        let i_col = column(&header, "i", &path)?;
        let p_col = column(&header, "preserved", &path)?;
        let mut n = 0;
        for r in rows {
            let i: usize = r[i_col].parse().map_err(|_| report_err(&path, format!("bad mode index {}", r[i_col])))?;
            if i == 0 {
                return Err(report_err(&path, "mode indices start at 1"));
            }
            if counts.len() < i {
                counts.resize(i, 0);
            }
            match r[p_col].as_str() {
                "1" => {
                    counts[i - 1] += 1;
                    n += 1;
                }
                "0" => {}
                other => return Err(report_err(&path, format!("bad preserved flag {other}"))),
            }
        }
        n_preserved.push((e, n));
    }
    let total = epochs.len() as f64;
    Ok(Preservation { fractions: counts.iter().map(|&c| c as f64 / total).collect(), n_preserved })
}

/// Writes `preservation.csv` (`mode_index,fraction_of_epochs_preserved`) and
/// `n_preserved.csv` (`epoch,n_preserved`) into `out_dir`.
pub fn report_preservation(run_dir: &Path, out_dir: &Path) -> Result<Preservation, CliError> {
    let p = preservation(run_dir)?;
    std::fs::create_dir_all(out_dir)?;
    let mut w = CsvWriter::create(&out_dir.join(PRESERVATION_CSV), &["mode_index", "fraction_of_epochs_preserved"])?;
    for (i, f) in p.fractions.iter().enumerate() {
        w.row(&[(i + 1).to_string(), fmt_f64(*f)])?;
    }
    w.finish()?;
    let mut w = CsvWriter::create(&out_dir.join(N_PRESERVED_CSV), &["epoch", "n_preserved"])?;
    for (e, n) in &p.n_preserved {
        w.row(&[e.to_string(), n.to_string()])?;
    }
    w.finish()?;
    Ok(p)
}
