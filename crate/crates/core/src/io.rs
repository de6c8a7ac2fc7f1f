//! Trial CSV files: `cluster_id,period,time,treatment,outcome`.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::datagen::{Dataset, Record};
use crate::error::{Error, Result};
use crate::trial::TrialDesign;

pub const COLUMNS: [&str; 5] = ["cluster_id", "period", "time", "treatment", "outcome"];

/// Period boundaries on the calendar scale of absolute times.
#[derive(Debug, Clone, PartialEq)]
pub enum PeriodCalendar {
    /// Period `j` covers `(origin + (j-1) length, origin + j length]`.
    Equal { origin: f64, length: f64 },
    /// `b_0 < b_1 < ... < b_J`; period `j` covers `(b_{j-1}, b_j]`.
    Boundaries(Vec<f64>),
}

impl PeriodCalendar {
    fn bounds(&self, period: usize) -> Result<(f64, f64)> {
        match self {
            PeriodCalendar::Equal { origin, length } => {
                if !(*length > 0.0) {
                    return Err(Error::Validation(format!(
                        "period length must be positive, got {length}"
                    )));
                }
                Ok((
                    origin + (period - 1) as f64 * length,
                    origin + period as f64 * length,
                ))
            }
            PeriodCalendar::Boundaries(b) => {
                if b.windows(2).any(|w| !(w[0] < w[1])) {
                    return Err(Error::Validation(
                        "period boundaries must increase strictly".into(),
                    ));
                }
                if period >= b.len() {
                    return Err(Error::Validation(format!(
                        "period {period} lies beyond the {} declared periods",
                        b.len().saturating_sub(1)
                    )));
                }
                Ok((b[period - 1], b[period]))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub enum TimeMode {
    /// Times already on the period scale, `t` in `[j-1, j]`.
    #[default]
    Fractional,
    /// Calendar times, standardised to `(j-1) + elapsed fraction of period j`.
    Absolute(PeriodCalendar),
}

/// Standardised recruitment time of an observation at calendar time `time`
/// in period `period`.
pub fn standardize_time(time: f64, period: usize, calendar: &PeriodCalendar) -> Result<f64> {
    let (lo, hi) = calendar.bounds(period)?;
    if !(time >= lo && time <= hi) {
        return Err(Error::Validation(format!(
            "time {time} lies outside period {period} ({lo}, {hi}]"
        )));
    }
    Ok((period - 1) as f64 + (time - lo) / (hi - lo))
}

/// Shortest-trailing form of the value printed to 17 significant digits.
/// Parsing the result gives back the same `f64`.
pub fn format_float(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let s = format!("{:.16e}", x);
    let (mant, exp) = s.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("exponent");
    let neg = mant.starts_with('-');
    let mut digits: String = mant.chars().filter(|c| c.is_ascii_digit()).collect();
    while digits.len() > 1 && digits.ends_with('0') {
        digits.pop();
    }
    let sign = if neg { "-" } else { "" };
    let body = if (-6..17).contains(&exp) {
        if exp >= 0 {
            let e = exp as usize;
            if digits.len() <= e + 1 {
                format!("{digits}{}", "0".repeat(e + 1 - digits.len()))
            } else {
                format!("{}.{}", &digits[..=e], &digits[e + 1..])
            }
        } else {
            format!("0.{}{digits}", "0".repeat((-exp - 1) as usize))
        }
    } else if digits.len() == 1 {
        format!("{digits}e{exp}")
    } else {
        format!("{}.{}e{exp}", &digits[..1], &digits[1..])
    };
    format!("{sign}{body}")
}

#[derive(Debug)]
struct Row {
    cluster: String,
    period: usize,
    time: f64,
    treatment: bool,
    outcome: f64,
}

fn parse_field<T: std::str::FromStr>(v: &str, col: &str, line: u64) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Validation(format!("line {line}: invalid {col} `{v}`")))
}

/// Read a trial CSV and infer its stepped wedge design. Clusters keep their
/// order of first appearance.
pub fn read_dataset<R: Read>(reader: R, mode: &TimeMode) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let idx: Vec<usize> = COLUMNS
        .iter()
        .map(|c| {
            headers
                .iter()
                .position(|h| h == *c)
                .ok_or_else(|| Error::Validation(format!("missing required column `{c}`")))
        })
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let get = |k: usize| rec.get(idx[k]).unwrap_or("");
        let period: usize = parse_field(get(1), "period", line)?;
        if period == 0 {
            return Err(Error::Validation(format!(
                "line {line}: periods are numbered from 1"
            )));
        }
        let raw_time: f64 = parse_field(get(2), "time", line)?;
        let time = match mode {
            TimeMode::Fractional => {
                let p = period as f64;
                if !(raw_time >= p - 1.0 && raw_time <= p) {
                    return Err(Error::Validation(format!(
                        "line {line}: time {raw_time} lies outside period {period} [{}, {period}]",
                        period - 1
                    )));
                }
                raw_time
            }
            TimeMode::Absolute(cal) => standardize_time(raw_time, period, cal)
                .map_err(|e| Error::Validation(format!("line {line}: {e}")))?,
        };
        let treatment = match get(3) {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::Validation(format!(
                    "line {line}: treatment must be 0 or 1, got `{other}`"
                )))
            }
        };
        let outcome: f64 = parse_field(get(4), "outcome", line)?;
        if !outcome.is_finite() {
            return Err(Error::Validation(format!(
                "line {line}: outcome is not finite"
            )));
        }
        rows.push(Row {
            cluster: get(0).to_string(),
            period,
            time,
            treatment,
            outcome,
        });
    }
    if rows.is_empty() {
        return Err(Error::Validation("no data rows".into()));
    }
    build_dataset(rows)
}

fn build_dataset(rows: Vec<Row>) -> Result<Dataset> {
    let mut labels: Vec<String> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for r in &rows {
        if !index.contains_key(&r.cluster) {
            index.insert(r.cluster.clone(), labels.len());
            labels.push(r.cluster.clone());
        }
    }
    let j = rows.iter().map(|r| r.period).max().unwrap_or(0);
    let n = labels.len();
    let mut status: Vec<Option<bool>> = vec![None; n * j];
    let mut sizes = vec![0usize; n * j];
    for r in &rows {
        let cell = index[&r.cluster] * j + r.period - 1;
        match status[cell] {
            Some(z) if z != r.treatment => {
                return Err(Error::Validation(format!(
                    "cluster {} period {}: treatment differs between rows",
                    r.cluster, r.period
                )))
            }
            _ => status[cell] = Some(r.treatment),
        }
        sizes[cell] += 1;
    }
    let mut seqs = Vec::with_capacity(n);
    for (i, label) in labels.iter().enumerate() {
        let cells = &status[i * j..(i + 1) * j];
        let mut first_treated = None;
        for (p, z) in cells.iter().enumerate() {
            match (z, first_treated) {
                (Some(true), None) => first_treated = Some(p + 1),
                (Some(false), Some(start)) => {
                    return Err(Error::Validation(format!(
                        "cluster {label}: treatment reverts to control in period {} after starting in period {start}",
                        p + 1
                    )))
                }
                _ => {}
            }
        }
        let start = first_treated
            .ok_or_else(|| Error::Validation(format!("cluster {label} is never treated")))?;
        if start == 1 {
            return Err(Error::Validation(format!(
                "cluster {label} is treated from the first period"
            )));
        }
        // an unobserved period before the first treated one is ambiguous
        if cells[start - 2].is_none() {
            return Err(Error::Validation(format!(
                "cluster {label}: crossover period cannot be determined because period {} is unobserved",
                start - 1
            )));
        }
        seqs.push(start - 1);
    }
    let design =
        TrialDesign::new(j, seqs, sizes, true).map_err(|e| Error::Validation(e.to_string()))?;
    let records = rows
        .into_iter()
        .map(|r| {
            let i = index[&r.cluster];
            Record {
                cluster: i,
                period: r.period,
                time: r.time,
                treatment: r.treatment,
                exposure: design.exposure(i, r.period).0,
                outcome: r.outcome,
            }
        })
        .collect();
    Dataset::new(design, records, labels)
}

pub fn read_dataset_file(path: &Path, mode: &TimeMode) -> Result<Dataset> {
    read_dataset(std::fs::File::open(path)?, mode)
}

/// Write records on the fractional time scale with canonical floats.
pub fn write_dataset<W: Write>(writer: W, dataset: &Dataset) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(writer);
    w.write_record(COLUMNS)?;
    for r in &dataset.records {
        w.write_record([
            dataset.cluster_labels[r.cluster].as_str(),
            &r.period.to_string(),
            &format_float(r.time),
            if r.treatment { "1" } else { "0" },
            &format_float(r.outcome),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_dataset_file(path: &Path, dataset: &Dataset) -> Result<()> {
    write_dataset(std::fs::File::create(path)?, dataset)
}
