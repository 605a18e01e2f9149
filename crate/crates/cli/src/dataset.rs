//! Dataset CSV files and the ground-truth sidecars written next to them.
//!
//! The first line is the header `N,T,D` (optionally `N,T,D,K,S` for the
//! true factor and state counts); every other line is `seq,t,x_1,…,x_D`.
//! An empty cell or `NaN` marks a missing entry.

use std::io::{Read, Write};
use std::path::Path;

use dsarf::{Dataset64, Tensor64};

#[derive(Debug, thiserror::Error)]
pub enum FileError {
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Csv(#[from] csv::Error),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("line {line}: {detail}")]
    Row { line: u64, detail: String },
    #[error("{0}")]
    Data(#[from] dsarf::Error),
}

pub type Result<T> = std::result::Result<T, FileError>;

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetFile {
    pub data: Dataset64,
    pub true_factors: Option<usize>,
    pub true_states: Option<usize>,
}

fn reader<R: Read>(src: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(src)
}

fn parse_count(field: &str, what: &str) -> Result<usize> {
    field.parse().map_err(|_| FileError::Header(format!("{what} = {field:?} is not a count")))
}

fn parse_index(record: &csv::StringRecord, at: usize, line: u64, what: &str) -> Result<usize> {
    record[at].parse().map_err(|_| FileError::Row {
        line,
        detail: format!("{what} {:?} is not an index", &record[at]),
    })
}

/// Missing cells are `None`.
fn parse_cell(cell: &str, line: u64, column: usize) -> Result<Option<f64>> {
    if cell.is_empty() || cell.eq_ignore_ascii_case("nan") {
        return Ok(None);
    }
    match cell.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(Some(v)),
        _ => Err(FileError::Row {
            line,
            detail: format!("column {column}: {cell:?} is not a finite number"),
        }),
    }
}

pub fn parse_dataset<R: Read>(src: R) -> Result<DatasetFile> {
    let mut rows = reader(src).into_records();
    let header = rows.next().ok_or_else(|| FileError::Header("empty file".into()))??;
    if header.len() != 3 && header.len() != 5 {
        return Err(FileError::Header(format!("expected N,T,D or N,T,D,K,S, got {} fields", header.len())));
    }
    let n = parse_count(&header[0], "N")?;
    let t = parse_count(&header[1], "T")?;
    let d = parse_count(&header[2], "D")?;
    let (true_factors, true_states) = if header.len() == 5 {
        (Some(parse_count(&header[3], "K")?), Some(parse_count(&header[4], "S")?))
    } else {
        (None, None)
    };
    let mut values = vec![0.0; n * t * d];
    let mut mask = vec![false; n * t * d];
    let mut seen = vec![false; n * t];
    let mut count = 0usize;
    for row in rows {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() != d + 2 {
            return Err(FileError::Row {
                line,
                detail: format!("expected {} columns (seq, t and D = {d} values), got {}", d + 2, row.len()),
            });
        }
        let seq = parse_index(&row, 0, line, "sequence")?;
        let step = parse_index(&row, 1, line, "time")?;
        if seq >= n || step >= t {
            return Err(FileError::Row {
                line,
                detail: format!("(seq {seq}, t {step}) outside the header's N = {n}, T = {t}"),
            });
        }
        let slot = seq * t + step;
        if std::mem::replace(&mut seen[slot], true) {
            return Err(FileError::Row {
                line,
                detail: format!("duplicate row for (seq {seq}, t {step})"),
            });
        }
        for j in 0..d {
            if let Some(v) = parse_cell(&row[j + 2], line, j + 3)? {
                values[slot * d + j] = v;
                mask[slot * d + j] = true;
            }
        }
        count += 1;
    }
    if count != n * t {
        return Err(FileError::Header(format!("header promises N·T = {} rows, file has {count}", n * t)));
    }
    Ok(DatasetFile {
        data: Dataset64::new(n, t, d, values, mask)?,
        true_factors,
        true_states,
    })
}

pub fn load_dataset(path: &Path) -> Result<DatasetFile> {
    parse_dataset(std::fs::File::open(path)?)
}

/// Shortest representation that parses back to the same `f64`.
fn cell(v: f64, observed: bool) -> String {
    if observed {
        format!("{v:?}")
    } else {
        String::new()
    }
}

pub fn write_dataset<W: Write>(out: W, file: &DatasetFile) -> Result<()> {
    let data = &file.data;
    let (n, t, d) = (data.sequences(), data.steps(), data.dim());
    let mut w = csv::WriterBuilder::new().flexible(true).from_writer(out);
    let mut header = vec![n.to_string(), t.to_string(), d.to_string()];
    if let (Some(k), Some(s)) = (file.true_factors, file.true_states) {
        header.extend([k.to_string(), s.to_string()]);
    }
    w.write_record(&header)?;
    for seq in 0..n {
        let (v, m) = data.sequence(seq);
        for step in 0..t {
            let mut row = vec![seq.to_string(), step.to_string()];
            row.extend((0..d).map(|j| cell(v[step * d + j], m[step * d + j])));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_dataset(path: &Path, file: &DatasetFile) -> Result<()> {
    write_dataset(std::fs::File::create(path)?, file)
}

/// Rows `seq,t,v_1,…` under a named header, one block per sequence.
pub fn save_series(path: &Path, columns: &[String], blocks: &[(usize, usize, &Tensor64)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["seq".to_string(), "t".to_string()];
    header.extend_from_slice(columns);
    w.write_record(&header)?;
    for &(seq, t0, values) in blocks {
        for r in 0..values.rows() {
            let mut row = vec![seq.to_string(), (t0 + r).to_string()];
            row.extend(values.row_slice(r).iter().map(|v| format!("{v:?}")));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// A file written by [`save_series`]: `(seq, t)` keys and value rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub columns: Vec<String>,
    pub keys: Vec<(usize, usize)>,
    pub rows: Vec<Vec<f64>>,
}

pub fn load_series(path: &Path) -> Result<Series> {
    let mut rows = reader(std::fs::File::open(path)?).into_records();
    let header = rows.next().ok_or_else(|| FileError::Header("empty file".into()))??;
    if header.len() < 2 || &header[0] != "seq" || &header[1] != "t" {
        return Err(FileError::Header("expected a header starting with seq,t".into()));
    }
    let columns: Vec<String> = header.iter().skip(2).map(str::to_string).collect();
    let mut out = Series {
        columns,
        keys: Vec::new(),
        rows: Vec::new(),
    };
    for row in rows {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() != header.len() {
            return Err(FileError::Row {
                line,
                detail: format!("expected {} columns, got {}", header.len(), row.len()),
            });
        }
        out.keys.push((parse_index(&row, 0, line, "sequence")?, parse_index(&row, 1, line, "time")?));
        let values = (2..row.len())
            .map(|j| parse_cell(&row[j], line, j + 1).map(|v| v.unwrap_or(f64::NAN)))
            .collect::<Result<_>>()?;
        out.rows.push(values);
    }
    Ok(out)
}

pub fn numbered(prefix: &str, count: usize) -> Vec<String> {
    (1..=count).map(|i| format!("{prefix}{i}")).collect()
}
