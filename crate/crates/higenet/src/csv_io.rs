//! CSV frames: a header row, a timestamp first column, numeric columns after.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use chrono::NaiveDateTime;
use higenet_core::data::{SchemaKind, TimeSeriesFrame};

use crate::error::{Error, Result};

/// Format written by [`write_frame`]; [`parse_timestamp`] also accepts a `T`
/// separator and a missing seconds field.
pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%d %H:%M:%S";

const ACCEPTED: [&str; 3] = [TIMESTAMP_FORMAT, "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M"];

pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    ACCEPTED.iter().find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
}

/// Parses a frame and validates it against `schema`. `source` names the
/// input in error messages; rows are reported as file line numbers.
pub fn read_frame<R: Read>(reader: R, source: &str, schema: SchemaKind, target: Option<&str>) -> Result<TimeSeriesFrame> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let csv_err = |row: usize, column: &str, message: String| Error::Csv {
        path: source.to_string(),
        row,
        column: column.to_string(),
        message,
    };
    let header = rdr.headers().map_err(|e| csv_err(1, "-", e.to_string()))?.clone();
    if header.len() < 2 {
        return Err(csv_err(1, "-", "need a timestamp column and at least one data column".into()));
    }
    let columns: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut timestamps = Vec::new();
    let mut values = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| csv_err(line, "-", e.to_string()))?;
        if rec.len() != header.len() {
            return Err(csv_err(line, "-", format!("expected {} fields, found {}", header.len(), rec.len())));
        }
        let ts = parse_timestamp(&rec[0])
            .ok_or_else(|| csv_err(line, &header[0], format!("unparseable timestamp {:?}", &rec[0])))?;
        if let Some(prev) = timestamps.last() {
            if ts <= *prev {
                return Err(csv_err(line, &header[0], format!("timestamp {ts} does not increase")));
            }
        }
        timestamps.push(ts);
        for (j, cell) in rec.iter().enumerate().skip(1) {
            let v: f64 = cell
                .parse()
                .map_err(|_| csv_err(line, &header[j], format!("non-numeric value {cell:?}")))?;
            if !v.is_finite() {
                return Err(csv_err(line, &header[j], format!("non-finite value {cell:?}")));
            }
            values.push(v);
        }
    }
    if timestamps.is_empty() {
        return Err(csv_err(2, "-", "no data rows".into()));
    }
    let target = schema.resolve_target(&columns, target)?.to_string();
    let frame = TimeSeriesFrame::new(timestamps, columns, values, &target)?;
    schema.validate(&frame)?;
    Ok(frame)
}

pub fn load_csv(path: impl AsRef<Path>, schema: SchemaKind, target: Option<&str>) -> Result<TimeSeriesFrame> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_frame(std::io::BufReader::new(file), &path.display().to_string(), schema, target)
}

/// Writes `date,<columns…>` with [`TIMESTAMP_FORMAT`] timestamps.
pub fn write_frame<W: Write>(w: W, frame: &TimeSeriesFrame) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let io = |e: csv::Error| Error::Config(format!("csv write: {e}"));
    let mut header = vec!["date".to_string()];
    header.extend(frame.columns().iter().cloned());
    wtr.write_record(&header).map_err(io)?;
    for r in 0..frame.len() {
        let mut rec = vec![frame.timestamps()[r].format(TIMESTAMP_FORMAT).to_string()];
        rec.extend(frame.row(r).iter().map(|v| v.to_string()));
        wtr.write_record(&rec).map_err(io)?;
    }
    wtr.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn save_csv(path: impl AsRef<Path>, frame: &TimeSeriesFrame) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_frame(std::io::BufWriter::new(file), frame)
}
