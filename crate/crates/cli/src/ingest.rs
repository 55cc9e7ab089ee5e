//! Long-format CSV ingestion: `series_id,time_index,tau,value`, one row per
//! observed point.
//!
//! Abscissae are rescaled affinely to `[0, 1]` per series; the original values
//! are kept so reports can echo them. A series listed as vector-valued gets
//! one grid point per distinct `tau` (its components). Empty values or `NA`
//! mark a missing observation. Times with no observed value in any series are
//! dropped with a warning.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use ftsgc_core::grid::{make_grid, SeriesGrid};
use ftsgc_core::{EvaluationGrid, FunctionalSample};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const HEADER: [&str; 4] = ["series_id", "time_index", "tau", "value"];

/// One raw CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongCsvRecord {
    pub series_id: String,
    pub time_index: i64,
    pub tau: f64,
    pub value: f64,
}

/// An ingested sample plus the original abscissa of every grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct IngestedData {
    pub sample: FunctionalSample,
    /// `original_tau[n][i]` for grid point `i` of series `n`.
    pub original_tau: Vec<Vec<f64>>,
}

impl IngestedData {
    pub fn series_index(&self, name: &str) -> Option<usize> {
        self.sample.series_names.iter().position(|s| s == name)
    }

    /// Keep the listed series, in the given order.
    pub fn select(&self, series: &[usize]) -> Self {
        Self {
            sample: self.sample.select_series(series),
            original_tau: series.iter().map(|&n| self.original_tau[n].clone()).collect(),
        }
    }
}

fn parse_number<T: std::str::FromStr>(field: &str, what: &str, row: u64) -> Result<T> {
    field
        .trim()
        .parse()
        .map_err(|_| CliError::ingest(Some(row), format!("{what} `{field}` is not numeric")))
}

fn is_missing(field: &str) -> bool {
    let f = field.trim();
    f.is_empty() || f.eq_ignore_ascii_case("na")
}

/// Read a long CSV file.
pub fn ingest(path: &Path, vector_series: &[String]) -> Result<IngestedData> {
    let file = std::fs::File::open(path).map_err(|e| CliError::io("ingest", path, e))?;
    ingest_reader(file, vector_series)
}

pub fn ingest_reader<R: Read>(reader: R, vector_series: &[String]) -> Result<IngestedData> {
    let mut csv = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = csv.headers().map_err(|e| CliError::ingest(None, e.to_string()))?.clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(CliError::ingest(None, "empty file"));
    }
    if headers.iter().collect::<Vec<_>>() != HEADER {
        return Err(CliError::ingest(Some(1), format!("header must be `{}`", HEADER.join(","))));
    }

    let mut order: Vec<String> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut keys = BTreeSet::new();
    // values[n][time] -> (tau, value)
    let mut values: Vec<BTreeMap<i64, Vec<(f64, f64)>>> = Vec::new();
    let mut times = BTreeSet::new();
    let mut rows = 0u64;
    for record in csv.records() {
        let record = record.map_err(|e| CliError::ingest(e.position().map(|p| p.line()), e.to_string()))?;
        let row = record.position().map(|p| p.line()).unwrap_or(0);
        rows += 1;
        if record.len() != 4 {
            return Err(CliError::ingest(Some(row), format!("expected 4 fields, found {}", record.len())));
        }
        let name = record[0].to_string();
        if name.is_empty() {
            return Err(CliError::ingest(Some(row), "empty series_id"));
        }
        let time: i64 = parse_number(&record[1], "time_index", row)?;
        let tau: f64 = parse_number(&record[2], "tau", row)?;
        if !tau.is_finite() {
            return Err(CliError::ingest(Some(row), "tau is not finite"));
        }
        if !keys.insert((name.clone(), time, tau.to_bits())) {
            return Err(CliError::ingest(
                Some(row),
                format!("duplicate key (series {name}, time {time}, tau {tau})"),
            ));
        }
        let n = *index.entry(name.clone()).or_insert_with(|| {
            order.push(name.clone());
            values.push(BTreeMap::new());
            order.len() - 1
        });
        times.insert(time);
        if is_missing(&record[3]) {
            continue;
        }
        let value: f64 = parse_number(&record[3], "value", row)?;
        if !value.is_finite() {
            return Err(CliError::ingest(Some(row), "value is not finite"));
        }
        values[n].entry(time).or_default().push((tau, value));
    }
    if rows == 0 {
        return Err(CliError::ingest(None, "empty file"));
    }
    for name in vector_series {
        if !index.contains_key(name) {
            return Err(CliError::ingest(None, format!("vector series `{name}` does not occur in the file")));
        }
    }

    let kept: Vec<i64> = times
        .iter()
        .copied()
        .filter(|t| values.iter().any(|v| v.contains_key(t)))
        .collect();
    for t in times.iter().filter(|t| !kept.contains(t)) {
        log::warn!("cli::ingest: time {t} has no observed value and is dropped");
    }
    for w in kept.windows(2) {
        if w[1] - w[0] > 1 {
            log::warn!("cli::ingest: no rows for times {} to {}; they are dropped", w[0] + 1, w[1] - 1);
        }
    }
    if kept.is_empty() {
        return Err(CliError::ingest(None, "no observed values"));
    }

    let mut grids = Vec::with_capacity(order.len());
    let mut original_tau = Vec::with_capacity(order.len());
    for (n, name) in order.iter().enumerate() {
        let mut taus: Vec<f64> = values[n].values().flatten().map(|&(t, _)| t).collect();
        taus.sort_by(f64::total_cmp);
        taus.dedup();
        let grid = if vector_series.contains(name) {
            SeriesGrid::discrete(taus.len())
        } else {
            if taus.len() < 3 {
                return Err(CliError::ingest(
                    None,
                    format!("series `{name}` has {} distinct tau values, at least 3 are required", taus.len()),
                ));
            }
            let (lo, hi) = (taus[0], taus[taus.len() - 1]);
            let scaled: Vec<f64> = taus.iter().map(|t| (t - lo) / (hi - lo)).collect();
            make_grid(&[scaled])?.series.remove(0)
        };
        grids.push(grid);
        original_tau.push(taus);
    }
    let grid = EvaluationGrid { series: grids };

    let data = kept
        .iter()
        .map(|t| {
            (0..order.len())
                .map(|n| {
                    let mut obs = values[n].get(t).cloned().unwrap_or_default();
                    obs.sort_by(|a, b| a.0.total_cmp(&b.0));
                    let pts = &grid.series[n].points;
                    let taus = &original_tau[n];
                    let abscissae = obs
                        .iter()
                        .map(|(tau, _)| pts[taus.binary_search_by(|x| x.total_cmp(tau)).expect("tau is on the grid")])
                        .collect();
                    (abscissae, obs.iter().map(|&(_, v)| v).collect())
                })
                .collect()
        })
        .collect();
    let sample = FunctionalSample::from_points(grid, order, kept, data)?;
    Ok(IngestedData { sample, original_tau })
}

/// Write the canonical long CSV: times in order, then series, then grid
/// points; only observed values.
pub fn write_long_csv<W: Write>(data: &IngestedData, writer: W) -> Result<()> {
    let out_err = |e: csv::Error| CliError::Output {
        op: "write_long_csv",
        reason: e.to_string(),
    };
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    w.write_record(HEADER).map_err(out_err)?;
    let s = &data.sample;
    for (t, row) in s.observations.iter().enumerate() {
        for (n, obs) in row.iter().enumerate() {
            for (&c, &v) in obs.incidence.columns.iter().zip(&obs.values) {
                w.serialize(LongCsvRecord {
                    series_id: s.series_names[n].clone(),
                    time_index: s.time_labels[t],
                    tau: data.original_tau[n][c],
                    value: v,
                })
                .map_err(out_err)?;
            }
        }
    }
    w.flush().map_err(|e| CliError::Output {
        op: "write_long_csv",
        reason: e.to_string(),
    })
}
