//! Price/return panels and their CSV formats.
//!
//! Both panels share one on-disk shape: a header `date,<asset_1>,...,<asset_d>`
//! followed by one row per ISO-8601 date. Numbers are written in scientific
//! notation with 17 significant digits so files round-trip bit-exactly.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dates x assets matrix of strictly positive adjusted close prices.
#[derive(Debug, Clone, PartialEq)]
pub struct PricePanel {
    pub dates: Vec<String>,
    pub assets: Vec<String>,
    pub prices: DMatrix<f64>,
    /// Rows discarded during ingestion (missing, unparsable or non-positive prices).
    pub dropped_rows: usize,
}

/// Dates x assets matrix of simple per-period returns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReturnPanel {
    pub dates: Vec<String>,
    pub assets: Vec<String>,
    pub returns: DMatrix<f64>,
}

/// Summary written next to ingested returns.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IngestReport {
    pub source: String,
    pub rows_kept: usize,
    pub rows_dropped: usize,
    pub assets: Vec<String>,
    pub first_date: String,
    pub last_date: String,
}

pub(crate) fn format_num(x: f64) -> String {
    format!("{x:.16e}")
}

fn normalize_date(raw: &str) -> Result<String> {
    let raw = raw.trim();
    let date = NaiveDate::parse_from_str(raw, "%Y-%m-%d")
        .or_else(|_| NaiveDate::parse_from_str(raw, "%Y%m%d"))
        .map_err(|_| Error::Input(format!("unparsable date '{raw}'")))?;
    Ok(date.format("%Y-%m-%d").to_string())
}

fn parse_header(headers: &csv::StringRecord) -> Result<Vec<String>> {
    let mut it = headers.iter();
    match it.next() {
        Some(first) if first.trim().eq_ignore_ascii_case("date") => {}
        _ => return Err(Error::Input("malformed header: first column must be 'date'".into())),
    }
    let assets: Vec<String> = it.map(|s| s.trim().to_string()).collect();
    if assets.is_empty() {
        return Err(Error::Input("malformed header: no asset columns".into()));
    }
    if assets.iter().any(|a| a.is_empty()) {
        return Err(Error::Input("malformed header: empty asset name".into()));
    }
    let unique: HashSet<&String> = assets.iter().collect();
    if unique.len() != assets.len() {
        return Err(Error::Input("malformed header: duplicate asset names".into()));
    }
    Ok(assets)
}

/// Reads `date,<asset>...` rows. Returns the asset header and every row whose
/// cells all pass `accept`, plus the count of rejected rows.
fn read_table<R: Read>(
    reader: R,
    accept: impl Fn(f64) -> bool,
) -> Result<(Vec<String>, Vec<(String, Vec<f64>)>, usize)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let assets = parse_header(rdr.headers()?)?;
    let mut rows = Vec::new();
    let mut dropped = 0;
    for record in rdr.records() {
        let record = record?;
        if record.iter().all(|c| c.trim().is_empty()) {
            continue;
        }
        let date = normalize_date(record.get(0).unwrap_or(""))?;
        let values: Option<Vec<f64>> = if record.len() != assets.len() + 1 {
            None
        } else {
            record
                .iter()
                .skip(1)
                .map(|c| c.trim().parse::<f64>().ok().filter(|v| v.is_finite() && accept(*v)))
                .collect()
        };
        match values {
            Some(v) => rows.push((date, v)),
            None => dropped += 1,
        }
    }
    rows.sort_by(|a, b| a.0.cmp(&b.0));
    for pair in rows.windows(2) {
        if pair[0].0 == pair[1].0 {
            return Err(Error::Input(format!("duplicate dates: {}", pair[0].0)));
        }
    }
    Ok((assets, rows, dropped))
}

fn rows_to_matrix(rows: &[(String, Vec<f64>)], d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), d, |i, j| rows[i].1[j])
}

/// Loads a price panel. Rows with any missing, unparsable or non-positive
/// price are dropped and counted.
pub fn load_price_csv(path: impl AsRef<Path>) -> Result<PricePanel> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_price_csv(file)
}

pub fn read_price_csv<R: Read>(reader: R) -> Result<PricePanel> {
    let (assets, rows, dropped) = read_table(reader, |v| v > 0.0)?;
    if rows.len() < 2 {
        return Err(Error::Input(format!(
            "need at least 2 valid price rows, found {}",
            rows.len()
        )));
    }
    let prices = rows_to_matrix(&rows, assets.len());
    Ok(PricePanel {
        dates: rows.into_iter().map(|r| r.0).collect(),
        assets,
        prices,
        dropped_rows: dropped,
    })
}

/// Simple returns `p[t+1]/p[t] - 1`, dated at `t+1`.
pub fn to_returns(panel: &PricePanel) -> Result<ReturnPanel> {
    let t = panel.prices.nrows();
    if t < 2 {
        return Err(Error::Input("need at least 2 dates to form returns".into()));
    }
    let d = panel.prices.ncols();
    let returns = DMatrix::from_fn(t - 1, d, |i, j| {
        panel.prices[(i + 1, j)] / panel.prices[(i, j)] - 1.0
    });
    Ok(ReturnPanel {
        dates: panel.dates[1..].to_vec(),
        assets: panel.assets.clone(),
        returns,
    })
}

impl PricePanel {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        write_table(writer, &self.assets, &self.dates, &self.prices)
    }
}

fn write_table<W: Write>(
    writer: W,
    assets: &[String],
    dates: &[String],
    values: &DMatrix<f64>,
) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec!["date".to_string()];
    header.extend(assets.iter().cloned());
    wtr.write_record(&header)?;
    for (i, date) in dates.iter().enumerate() {
        let mut rec = vec![date.clone()];
        rec.extend(values.row(i).iter().map(|v| format_num(*v)));
        wtr.write_record(&rec)?;
    }
    wtr.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

impl ReturnPanel {
    pub fn new(dates: Vec<String>, assets: Vec<String>, returns: DMatrix<f64>) -> Result<Self> {
        if dates.len() != returns.nrows() || assets.len() != returns.ncols() {
            return Err(Error::Dimension(format!(
                "return matrix is {}x{} but {} dates and {} assets given",
                returns.nrows(),
                returns.ncols(),
                dates.len(),
                assets.len()
            )));
        }
        if dates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Input("dates must be strictly increasing".into()));
        }
        if returns.iter().any(|r| !r.is_finite() || *r <= -1.0) {
            return Err(Error::Input("returns must be finite and > -1".into()));
        }
        Ok(Self {
            dates,
            assets,
            returns,
        })
    }

    /// Panel with synthetic sequential date labels; handy for tests and bindings.
    pub fn from_matrix(returns: DMatrix<f64>) -> Result<Self> {
        let start = NaiveDate::from_ymd_opt(2000, 1, 1).expect("valid epoch");
        let dates = (0..returns.nrows())
            .map(|i| (start + chrono::Days::new(i as u64)).format("%Y-%m-%d").to_string())
            .collect();
        let assets = (0..returns.ncols()).map(|j| format!("asset_{}", j + 1)).collect();
        Self::new(dates, assets, returns)
    }

    pub fn n_dates(&self) -> usize {
        self.returns.nrows()
    }

    pub fn n_assets(&self) -> usize {
        self.returns.ncols()
    }

    pub fn row(&self, t: usize) -> DVector<f64> {
        self.returns.row(t).transpose()
    }

    /// Rows `start..end` as a new panel.
    pub fn slice(&self, start: usize, end: usize) -> ReturnPanel {
        ReturnPanel {
            dates: self.dates[start..end].to_vec(),
            assets: self.assets.clone(),
            returns: self.returns.rows(start, end - start).into_owned(),
        }
    }

    /// Index of the last date `<= date` (string comparison on ISO dates).
    pub fn index_at_or_before(&self, date: &str) -> Option<usize> {
        match self.dates.binary_search_by(|d| d.as_str().cmp(date)) {
            Ok(i) => Some(i),
            Err(0) => None,
            Err(i) => Some(i - 1),
        }
    }

    /// Rebuilds prices from a starting price vector.
    pub fn to_prices(&self, first: &[f64]) -> DMatrix<f64> {
        let t = self.n_dates();
        let d = self.n_assets();
        let mut out = DMatrix::zeros(t + 1, d);
        for j in 0..d {
            out[(0, j)] = first[j];
            for i in 0..t {
                out[(i + 1, j)] = out[(i, j)] * (1.0 + self.returns[(i, j)]);
            }
        }
        out
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        write_table(writer, &self.assets, &self.dates, &self.returns)
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let (assets, rows, dropped) = read_table(reader, |v| v > -1.0)?;
        if dropped > 0 {
            return Err(Error::Input(format!("{dropped} invalid rows in returns file")));
        }
        if rows.is_empty() {
            return Err(Error::Input("returns file has no rows".into()));
        }
        let returns = rows_to_matrix(&rows, assets.len());
        Self::new(rows.into_iter().map(|r| r.0).collect(), assets, returns)
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(file)
    }
}
