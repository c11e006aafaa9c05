//! Shared text-format helpers.
//!
//! All floats are written with 17 significant digits in scientific notation,
//! which round-trips every finite `f64` bit-for-bit through `str::parse`.
//! CSV files are UTF-8, comma separated, with a header row and LF endings.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Formats a float with 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn parse_f64(field: &str, what: &'static str) -> Result<f64> {
    field.trim().parse::<f64>().map_err(|e| Error::Format {
        what,
        detail: format!("{field:?}: {e}"),
    })
}

/// Minimal CSV writer for the numeric tables emitted by this crate.
pub struct CsvWriter {
    out: BufWriter<File>,
    columns: usize,
}

impl CsvWriter {
    pub fn create(path: &Path, header: &[&str]) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{}", header.join(","))?;
        Ok(Self {
            out,
            columns: header.len(),
        })
    }

    pub fn row<S: AsRef<str>>(&mut self, fields: &[S]) -> Result<()> {
        if fields.len() != self.columns {
            return Err(Error::InvalidArgument(format!(
                "csv row has {} fields, header has {}",
                fields.len(),
                self.columns
            )));
        }
        let mut first = true;
        for f in fields {
            if !first {
                self.out.write_all(b",")?;
            }
            first = false;
            self.out.write_all(f.as_ref().as_bytes())?;
        }
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

/// Reads a header + rows CSV into string fields. Intended for the small
/// files this crate writes itself; quoting is not supported.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().filter(|l| !l.is_empty());
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::Format {
            what: "csv",
            detail: format!("{} is empty", path.display()),
        })?
        .split(',')
        .map(str::to_owned)
        .collect();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let row: Vec<String> = line.split(',').map(str::to_owned).collect();
        if row.len() != header.len() {
            return Err(Error::Format {
                what: "csv",
                detail: format!("{} line {}: expected {} fields", path.display(), i + 2, header.len()),
            });
        }
        rows.push(row);
    }
    Ok((header, rows))
}
