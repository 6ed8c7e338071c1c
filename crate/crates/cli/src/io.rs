use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use cardprec::structure::StructureSpec;
use cardprec::synthetic::covariance_from_rows;
use cardprec::{StructuralConstraint, Support, SymmetricMatrix};
use serde::Serialize;

/// Problems with user-supplied files or flags (exit code 2).
#[derive(Debug)]
pub struct InputError(pub String);

impl fmt::Display for InputError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

pub fn input_error(msg: impl Into<String>) -> anyhow::Error {
    InputError(msg.into()).into()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum InputKind {
    Samples,
    Covariance,
}

/// Numeric CSV rows; a first line that does not parse is taken as a header.
pub fn read_numeric_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let file = File::open(path)
        .map_err(|e| input_error(format!("cannot open {}: {e}", path.display())))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(file);
    let mut rows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| input_error(format!("{}: {e}", path.display())))?;
        let parsed: std::result::Result<Vec<f64>, _> =
            record.iter().map(str::parse::<f64>).collect();
        match parsed {
            Ok(v) => {
                if let Some(bad) = v.iter().position(|x| !x.is_finite()) {
                    return Err(input_error(format!(
                        "{}: row {} column {} is not finite",
                        path.display(),
                        line + 1,
                        bad + 1
                    )));
                }
                rows.push(v)
            }
            Err(_) if line == 0 => continue,
            Err(e) => {
                return Err(input_error(format!(
                    "{}: row {}: {e}",
                    path.display(),
                    line + 1
                )));
            }
        }
    }
    if rows.is_empty() {
        return Err(input_error(format!("{}: no numeric rows", path.display())));
    }
    let width = rows[0].len();
    if let Some(bad) = rows.iter().position(|r| r.len() != width) {
        return Err(input_error(format!(
            "{}: row {} has {} columns, expected {width}",
            path.display(),
            bad + 1,
            rows[bad].len()
        )));
    }
    Ok(rows)
}

pub fn read_covariance(path: &Path) -> Result<SymmetricMatrix> {
    let rows = read_numeric_csv(path)?;
    let p = rows.len();
    if rows[0].len() != p {
        return Err(input_error(format!(
            "{}: covariance must be square, got {p} rows of {} columns",
            path.display(),
            rows[0].len()
        )));
    }
    SymmetricMatrix::from_row_major_symmetrized(p, rows.concat(), 1e-8)
        .map_err(|e| input_error(format!("{}: {e}", path.display())))
}

/// Covariance plus the number of samples behind it, when known.
pub fn read_input(path: &Path, kind: InputKind) -> Result<(SymmetricMatrix, Option<usize>)> {
    match kind {
        InputKind::Covariance => Ok((read_covariance(path)?, None)),
        InputKind::Samples => {
            let rows = read_numeric_csv(path)?;
            if rows.len() < 2 {
                return Err(input_error(format!(
                    "{}: need at least two samples",
                    path.display()
                )));
            }
            let s = covariance_from_rows(&rows).map_err(|e| input_error(e.to_string()))?;
            Ok((s, Some(rows.len())))
        }
    }
}

/// `i,j` pairs, 0-based.
pub fn read_support(path: &Path, p: usize) -> Result<Support> {
    let file = File::open(path)
        .map_err(|e| input_error(format!("cannot open {}: {e}", path.display())))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(file);
    let mut pairs = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| input_error(format!("{}: {e}", path.display())))?;
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        let parsed: std::result::Result<Vec<usize>, _> =
            record.iter().map(str::parse::<usize>).collect();
        match parsed {
            Ok(v) if v.len() == 2 => pairs.push((v[0], v[1])),
            Err(_) if line == 0 => continue,
            _ => {
                return Err(input_error(format!(
                    "{}: row {} is not an index pair",
                    path.display(),
                    line + 1
                )))
            }
        }
    }
    Support::new(p, pairs).map_err(|e| input_error(format!("{}: {e}", path.display())))
}

pub fn read_structure(path: &Path, p: usize) -> Result<Vec<StructuralConstraint>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| input_error(format!("cannot read {}: {e}", path.display())))?;
    let spec: StructureSpec =
        serde_json::from_str(&text).map_err(|e| input_error(format!("{}: {e}", path.display())))?;
    spec.into_constraints(p)
        .map_err(|e| input_error(format!("{}: {e}", path.display())))
}

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

/// Pretty JSON to `path`, or stdout when absent.
pub fn write_json(path: Option<&Path>, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match path {
        Some(p) => {
            let mut w = create(p)?;
            writeln!(w, "{text}")?;
            w.flush()?;
        }
        None => println!("{text}"),
    }
    Ok(())
}

/// CSV with the given header; floats keep full round-trip precision.
pub fn write_csv(path: Option<&Path>, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let sink: Box<dyn Write> = match path {
        Some(p) => Box::new(create(p)?),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn num(v: f64) -> String {
    format!("{v:?}")
}
