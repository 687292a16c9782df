//! CSV formats: `id,time,value[,covariate...]` for longitudinal markers and
//! `id,time,cause[,covariate...]` for survival, cause 0 meaning censored.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use cmprsk_core::data::Covariates;
use cmprsk_core::{LongitudinalRecord, SurvivalRecord};

use crate::{CliError, Result};

/// Value type of a longitudinal marker file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MarkerFamily {
    Gaussian,
    /// Values must be nonnegative integers.
    Poisson,
}

struct Table {
    required: Vec<usize>,
    covariates: Vec<(usize, String)>,
    rows: Vec<csv::StringRecord>,
}

fn read_table(reader: impl Read, path: &Path, required: &[&str]) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| CliError::input(path, format!("cannot read header: {e}")))?
        .clone();
    let mut positions = Vec::with_capacity(required.len());
    for name in required {
        match headers.iter().position(|h| h == *name) {
            Some(p) => positions.push(p),
            None => return Err(CliError::input(path, format!("missing column `{name}`"))),
        }
    }
    let covariates = headers
        .iter()
        .enumerate()
        .filter(|(k, _)| !positions.contains(k))
        .map(|(k, h)| (k, h.to_string()))
        .collect();
    let mut rows = Vec::new();
    for (k, row) in rdr.records().enumerate() {
        rows.push(row.map_err(|e| CliError::input(path, format!("row {}: {e}", k + 1)))?);
    }
    Ok(Table {
        required: positions,
        covariates,
        rows,
    })
}

fn field<T: std::str::FromStr>(row: &csv::StringRecord, col: usize, name: &str, line: usize, path: &Path) -> Result<T> {
    let raw = row.get(col).unwrap_or("");
    raw.parse()
        .map_err(|_| CliError::input(path, format!("row {line}: cannot parse {name} `{raw}`")))
}

fn covariates_of(row: &csv::StringRecord, table: &Table, line: usize, path: &Path) -> Result<Covariates> {
    let mut out = Covariates::new();
    for (col, name) in &table.covariates {
        let raw = row.get(*col).unwrap_or("");
        if raw.is_empty() {
            continue;
        }
        let v: f64 = raw
            .parse()
            .map_err(|_| CliError::input(path, format!("row {line}: cannot parse covariate `{name}` = `{raw}`")))?;
        out.insert(name.clone(), v);
    }
    Ok(out)
}

pub fn read_longitudinal(
    reader: impl Read,
    path: &Path,
    family: MarkerFamily,
    marker: usize,
) -> Result<Vec<LongitudinalRecord>> {
    let table = read_table(reader, path, &["id", "time", "value"])?;
    let mut out = Vec::with_capacity(table.rows.len());
    for (k, row) in table.rows.iter().enumerate() {
        let line = k + 1;
        let id = field(row, table.required[0], "id", line, path)?;
        let time = field(row, table.required[1], "time", line, path)?;
        let value: f64 = field(row, table.required[2], "value", line, path)?;
        if family == MarkerFamily::Poisson && !(value >= 0.0 && value.fract() == 0.0) {
            return Err(CliError::input(
                path,
                format!("row {line}: poisson value {value} is not a nonnegative integer"),
            ));
        }
        out.push(LongitudinalRecord {
            individual_id: id,
            time,
            value,
            covariates: covariates_of(row, &table, line, path)?,
            marker,
        });
    }
    Ok(out)
}

pub fn read_survival(reader: impl Read, path: &Path, n_causes: u32) -> Result<Vec<SurvivalRecord>> {
    let table = read_table(reader, path, &["id", "time", "cause"])?;
    let mut out = Vec::with_capacity(table.rows.len());
    for (k, row) in table.rows.iter().enumerate() {
        let line = k + 1;
        let time: f64 = field(row, table.required[1], "time", line, path)?;
        if !(time > 0.0) || !time.is_finite() {
            return Err(CliError::input(path, format!("row {line}: time must be positive, got {time}")));
        }
        let cause: u32 = field(row, table.required[2], "cause", line, path)?;
        if cause > n_causes {
            return Err(CliError::input(
                path,
                format!("row {line}: cause {cause} outside 0..={n_causes}"),
            ));
        }
        out.push(SurvivalRecord {
            individual_id: field(row, table.required[0], "id", line, path)?,
            time,
            cause,
            covariates: covariates_of(row, &table, line, path)?,
        });
    }
    Ok(out)
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| CliError::io(path, e))
}

pub fn load_longitudinal_csv(path: &Path, family: MarkerFamily, marker: usize) -> Result<Vec<LongitudinalRecord>> {
    read_longitudinal(open(path)?, path, family, marker)
}

pub fn load_survival_csv(path: &Path, n_causes: u32) -> Result<Vec<SurvivalRecord>> {
    read_survival(open(path)?, path, n_causes)
}

fn covariate_names<'a>(all: impl Iterator<Item = &'a Covariates>) -> Vec<String> {
    let set: BTreeSet<&String> = all.flat_map(|c| c.keys()).collect();
    set.into_iter().cloned().collect()
}

fn write_rows<'a, W: Write>(
    writer: W,
    first: [&str; 3],
    rows: impl Iterator<Item = (u64, f64, String, &'a Covariates)> + Clone,
) -> std::io::Result<()> {
    let names = covariate_names(rows.clone().map(|r| r.3));
    let mut w = csv::Writer::from_writer(writer);
    let header: Vec<&str> = first.iter().copied().chain(names.iter().map(String::as_str)).collect();
    w.write_record(&header)?;
    for (id, time, third, cov) in rows {
        let mut record = vec![id.to_string(), time.to_string(), third];
        record.extend(names.iter().map(|n| cov.get(n).map_or(String::new(), |v| v.to_string())));
        w.write_record(&record)?;
    }
    w.flush()
}

/// Writes the records of one marker with original identifiers.
pub fn write_longitudinal<W: Write>(
    writer: W,
    records: &[LongitudinalRecord],
    original_id: impl Fn(u64) -> u64,
) -> std::io::Result<()> {
    let rows = records
        .iter()
        .map(|r| (original_id(r.individual_id), r.time, r.value.to_string(), &r.covariates));
    write_rows(writer, ["id", "time", "value"], rows)
}

pub fn write_survival<W: Write>(
    writer: W,
    records: &[SurvivalRecord],
    original_id: impl Fn(u64) -> u64,
) -> std::io::Result<()> {
    let rows = records
        .iter()
        .map(|r| (original_id(r.individual_id), r.time, r.cause.to_string(), &r.covariates));
    write_rows(writer, ["id", "time", "cause"], rows)
}
