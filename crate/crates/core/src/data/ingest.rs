use super::{parse_timestamp, TimeSeriesFrame};
use crate::error::{Error, Result};
use chrono::{DateTime, Utc};
use std::path::Path;

/// Maps CSV header names onto canonical channel names. Order is preserved
/// and becomes the frame's channel order.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelMap {
    pub entries: Vec<(String, String)>,
}

impl ChannelMap {
    /// Header names equal the canonical names.
    pub fn identity<S: AsRef<str>>(channels: &[S]) -> Self {
        ChannelMap {
            entries: channels.iter().map(|c| (c.as_ref().to_string(), c.as_ref().to_string())).collect(),
        }
    }

    pub fn canonical(&self) -> Vec<String> {
        self.entries.iter().map(|(_, c)| c.clone()).collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, serde::Serialize)]
pub struct IngestReport {
    pub records: usize,
    pub bad_timestamps: usize,
    pub bad_values: usize,
    pub duplicates_collapsed: usize,
}

/// Reads a raw log. Rows with an unparseable timestamp or value are dropped
/// and counted; rows are sorted by time and repeated timestamps keep the
/// last row read.
pub fn ingest_csv(path: &Path, timestamp_column: &str, map: &ChannelMap) -> Result<(TimeSeriesFrame, IngestReport)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    if headers.is_empty() {
        return Err(Error::Data(format!("{}: empty file", path.display())));
    }
    let find = |name: &str| headers.iter().position(|h| h.trim() == name);
    let ts_col = find(timestamp_column).ok_or_else(|| {
        Error::Config(format!("{}: timestamp column '{timestamp_column}' not in header", path.display()))
    })?;
    let cols = map
        .entries
        .iter()
        .map(|(header, _)| {
            find(header).ok_or_else(|| Error::Config(format!("{}: missing channel column '{header}'", path.display())))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut report = IngestReport::default();
    let mut rows: Vec<(DateTime<Utc>, Vec<f64>)> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        report.records += 1;
        let Some(ts) = record.get(ts_col).and_then(parse_timestamp) else {
            report.bad_timestamps += 1;
            continue;
        };
        let values: Option<Vec<f64>> = cols
            .iter()
            .map(|&c| record.get(c).and_then(|s| s.trim().parse::<f64>().ok()).filter(|v| v.is_finite()))
            .collect();
        match values {
            Some(v) => rows.push((ts, v)),
            None => report.bad_values += 1,
        }
    }
    if report.records == 0 {
        return Err(Error::Data(format!("{}: no data rows", path.display())));
    }
    if rows.is_empty() {
        return Err(Error::Data(format!("{}: no parseable rows out of {}", path.display(), report.records)));
    }

    // stable sort keeps file order among equal timestamps, so the last one wins
    rows.sort_by_key(|(t, _)| *t);
    let mut deduped: Vec<(DateTime<Utc>, Vec<f64>)> = Vec::with_capacity(rows.len());
    for row in rows {
        match deduped.last_mut() {
            Some(last) if last.0 == row.0 => {
                *last = row;
                report.duplicates_collapsed += 1;
            }
            _ => deduped.push(row),
        }
    }
    if report.bad_timestamps > 0 || report.bad_values > 0 {
        tracing::warn!(
            path = %path.display(),
            bad_timestamps = report.bad_timestamps,
            bad_values = report.bad_values,
            "dropped unparseable rows"
        );
    }
    if report.duplicates_collapsed > 0 {
        tracing::warn!(path = %path.display(), count = report.duplicates_collapsed, "collapsed duplicate timestamps to their last row");
    }

    let timestamps = deduped.iter().map(|(t, _)| *t).collect();
    let values = deduped.into_iter().flat_map(|(_, v)| v).collect();
    let frame = TimeSeriesFrame::new(timestamps, map.canonical(), values)?;
    Ok((frame, report))
}

/// Reads a frame written by [`TimeSeriesFrame::write_csv`].
pub fn read_frame_csv(path: &Path) -> Result<TimeSeriesFrame> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let channels: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    if headers.get(0) != Some("timestamp") || channels.is_empty() {
        return Err(Error::format(path, "expected header 'timestamp,<channel>,...'"));
    }
    let mut timestamps = Vec::new();
    let mut values = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let bad = || Error::format(path, format!("line {}: malformed row", line + 2));
        timestamps.push(record.get(0).and_then(parse_timestamp).ok_or_else(bad)?);
        for i in 1..=channels.len() {
            values.push(record.get(i).and_then(|s| s.parse::<f64>().ok()).ok_or_else(bad)?);
        }
    }
    if timestamps.is_empty() {
        return Err(Error::Data(format!("{}: no data rows", path.display())));
    }
    Ok(TimeSeriesFrame::new(timestamps, channels, values)?.detect_cadence())
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.kind() {
        csv::ErrorKind::Io(_) => match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        },
        _ => Error::format(path, e.to_string()),
    }
}
