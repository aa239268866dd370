//! Timestamped multichannel frames and the preprocessing steps applied to
//! raw drilling logs: ingest, resample, normalise, split, window.

mod ingest;
mod normalize;
mod resample;
mod split;
mod window;

pub use ingest::{ingest_csv, read_frame_csv, ChannelMap, IngestReport};
pub use normalize::NormStats;
pub use resample::{resample_linear, Resampled, DEFAULT_MAX_GAP_S};
pub use split::{split, SplitSpec, Splits};
pub use window::{make_windows, Window};

use crate::error::{Error, Result};
use chrono::{DateTime, SecondsFormat, Utc};
use std::io::Write;
use std::path::Path;

/// Canonical channel names, depth channels first.
pub const DEFAULT_CHANNELS: [&str; 10] = [
    "hole_depth",
    "bit_depth",
    "block_position",
    "torque",
    "hookload",
    "rotary_speed",
    "spp",
    "mud_flow_in",
    "wob",
    "rop",
];

pub const DEPTH_CHANNELS: [&str; 3] = ["hole_depth", "bit_depth", "block_position"];

/// Rows of simultaneous channel readings, oldest first.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeriesFrame {
    timestamps: Vec<DateTime<Utc>>,
    channels: Vec<String>,
    /// Row-major `rows × channels`.
    values: Vec<f64>,
    /// Row spacing in seconds once the frame sits on a uniform grid.
    cadence_s: Option<f64>,
}

impl TimeSeriesFrame {
    pub fn new(timestamps: Vec<DateTime<Utc>>, channels: Vec<String>, values: Vec<f64>) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::Data("a frame needs at least one channel".into()));
        }
        if values.len() != timestamps.len() * channels.len() {
            return Err(Error::Data(format!(
                "{} values for {} rows of {} channels",
                values.len(),
                timestamps.len(),
                channels.len()
            )));
        }
        if timestamps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Data("timestamps must be strictly increasing".into()));
        }
        Ok(TimeSeriesFrame {
            timestamps,
            channels,
            values,
            cadence_s: None,
        })
    }

    pub(crate) fn with_cadence(mut self, cadence_s: f64) -> Self {
        self.cadence_s = Some(cadence_s);
        self
    }

    pub fn rows(&self) -> usize {
        self.timestamps.len()
    }

    pub fn width(&self) -> usize {
        self.channels.len()
    }

    pub fn timestamps(&self) -> &[DateTime<Utc>] {
        &self.timestamps
    }

    pub fn channels(&self) -> &[String] {
        &self.channels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn cadence_s(&self) -> Option<f64> {
        self.cadence_s
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.width();
        &self.values[i * d..(i + 1) * d]
    }

    pub fn value(&self, row: usize, channel: usize) -> f64 {
        self.values[row * self.width() + channel]
    }

    pub fn column(&self, channel: usize) -> Vec<f64> {
        self.values.iter().skip(channel).step_by(self.width()).copied().collect()
    }

    pub fn channel_index(&self, name: &str) -> Option<usize> {
        self.channels.iter().position(|c| c == name)
    }

    /// Copies rows `range`, keeping the cadence.
    pub fn slice_rows(&self, range: std::ops::Range<usize>) -> TimeSeriesFrame {
        let d = self.width();
        TimeSeriesFrame {
            timestamps: self.timestamps[range.clone()].to_vec(),
            channels: self.channels.clone(),
            values: self.values[range.start * d..range.end * d].to_vec(),
            cadence_s: self.cadence_s,
        }
    }

    /// Same timestamps and channels, new values.
    pub(crate) fn with_values(&self, values: Vec<f64>) -> TimeSeriesFrame {
        debug_assert_eq!(values.len(), self.values.len());
        TimeSeriesFrame {
            values,
            ..self.clone()
        }
    }

    /// Sets the cadence when the timestamps sit on a uniform grid.
    pub fn detect_cadence(mut self) -> Self {
        if self.rows() >= 2 {
            let step = self.timestamps[1] - self.timestamps[0];
            if self.timestamps.windows(2).all(|w| w[1] - w[0] == step) {
                self.cadence_s = Some(step.num_milliseconds() as f64 / 1000.0);
            }
        }
        self
    }

    /// Timestamp of row `k`, extrapolating past the end on the cadence grid.
    pub fn timestamp_at(&self, k: usize) -> Option<DateTime<Utc>> {
        if k < self.rows() {
            return Some(self.timestamps[k]);
        }
        let cadence = self.cadence_s?;
        let last = *self.timestamps.last()?;
        let extra = (k + 1 - self.rows()) as f64 * cadence;
        Some(last + chrono::Duration::milliseconds((extra * 1000.0).round() as i64))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = std::io::BufWriter::new(file);
        let mut write = || -> std::io::Result<()> {
            write!(out, "timestamp")?;
            for c in &self.channels {
                write!(out, ",{c}")?;
            }
            writeln!(out)?;
            for i in 0..self.rows() {
                write!(out, "{}", format_timestamp(self.timestamps[i]))?;
                for v in self.row(i) {
                    write!(out, ",{v}")?;
                }
                writeln!(out)?;
            }
            out.flush()
        };
        write().map_err(|e| Error::io(path, e))
    }
}

pub fn format_timestamp(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::AutoSi, true)
}

/// RFC 3339, or a naive `YYYY-MM-DD HH:MM:SS[.fff]` (`T` separator allowed)
/// read as UTC.
pub fn parse_timestamp(s: &str) -> Option<DateTime<Utc>> {
    let s = s.trim();
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Some(t.with_timezone(&Utc));
    }
    ["%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M:%S%.f"]
        .iter()
        .find_map(|f| chrono::NaiveDateTime::parse_from_str(s, f).ok())
        .map(|t| t.and_utc())
}

/// Optional cleaning step run before resampling. The default does nothing.
pub trait OutlierFilter {
    /// Returns the filtered frame and the number of rows removed.
    fn apply(&self, frame: TimeSeriesFrame) -> Result<(TimeSeriesFrame, usize)>;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct NoOutlierFilter;

impl OutlierFilter for NoOutlierFilter {
    fn apply(&self, frame: TimeSeriesFrame) -> Result<(TimeSeriesFrame, usize)> {
        Ok((frame, 0))
    }
}

#[derive(Clone, Debug)]
pub struct PreprocessConfig {
    pub cadence_s: f64,
    pub max_gap_s: f64,
    pub split: SplitSpec,
}

/// Everything `preprocess` learned along the way.
#[derive(Clone, Debug, Default, PartialEq, serde::Serialize)]
pub struct PreprocessReport {
    pub outlier_rows_removed: usize,
    pub segments: usize,
    /// Row count of every resampled segment, in time order.
    pub segment_rows: Vec<usize>,
    pub kept_segment: usize,
    pub train_rows: usize,
    pub val_rows: usize,
    pub test_rows: usize,
}

pub struct Processed {
    pub train: TimeSeriesFrame,
    pub val: TimeSeriesFrame,
    pub test: TimeSeriesFrame,
    pub stats: NormStats,
    pub report: PreprocessReport,
}

/// Filter, resample, keep the longest gap-free segment, split, then normalise
/// all three splits with statistics fitted on the training split.
pub fn preprocess(raw: TimeSeriesFrame, cfg: &PreprocessConfig, filter: &dyn OutlierFilter) -> Result<Processed> {
    if raw.width() < 2 {
        return Err(Error::Data(format!("need at least 2 channels, got {}", raw.width())));
    }
    let (filtered, removed) = filter.apply(raw)?;
    let resampled = resample_linear(&filtered, cfg.cadence_s, cfg.max_gap_s)?;
    let segment_rows: Vec<usize> = resampled.segments.iter().map(TimeSeriesFrame::rows).collect();
    // longest segment; the earliest wins ties
    let kept = segment_rows
        .iter()
        .enumerate()
        .fold(0, |best, (i, &r)| if r > segment_rows[best] { i } else { best });
    let frame = resampled.segments.into_iter().nth(kept).expect("at least one segment");
    let splits = split(&frame, &cfg.split)?;
    let stats = NormStats::fit(&splits.train)?;
    let report = PreprocessReport {
        outlier_rows_removed: removed,
        segments: segment_rows.len(),
        segment_rows,
        kept_segment: kept,
        train_rows: splits.train.rows(),
        val_rows: splits.val.rows(),
        test_rows: splits.test.rows(),
    };
    Ok(Processed {
        train: stats.normalize(&splits.train)?,
        val: stats.normalize(&splits.val)?,
        test: stats.normalize(&splits.test)?,
        stats,
        report,
    })
}


#[cfg(test)]
mod tests {
    use super::testutil::*;
    use super::*;

    #[test]
    fn frame_rejects_unsorted_or_ragged_input() {
        let ts = vec![at(0), at(4)];
        assert!(TimeSeriesFrame::new(ts.clone(), vec!["a".into()], vec![1.0]).is_err());
        assert!(TimeSeriesFrame::new(vec![at(4), at(0)], vec!["a".into()], vec![1.0, 2.0]).is_err());
        assert!(TimeSeriesFrame::new(ts, vec!["a".into()], vec![1.0, 2.0]).is_ok());
    }

    #[test]
    fn timestamp_forms() {
        let want = t0() + chrono::Duration::milliseconds(4500);
        for s in ["2007-07-06T19:23:56.5Z", "2007-07-06T21:23:56.5+02:00", "2007-07-06 19:23:56.5", " 2007-07-06T19:23:56.500 "] {
            assert_eq!(parse_timestamp(s), Some(want), "{s}");
        }
        assert_eq!(parse_timestamp("06/07/2007 00:00"), None);
    }

    #[test]
    fn cadence_detection_and_extrapolated_timestamps() {
        let f = frame(&[0, 4, 8], &["a"], &[1.0, 2.0, 3.0]).detect_cadence();
        assert_eq!(f.cadence_s(), Some(4.0));
        assert_eq!(f.timestamp_at(4), Some(at(16)));
        let g = frame(&[0, 4, 9], &["a"], &[1.0, 2.0, 3.0]).detect_cadence();
        assert_eq!(g.cadence_s(), None);
    }

    #[test]
    fn preprocess_produces_normalised_contiguous_splits() {
        let n = 100;
        let times: Vec<i64> = (0..n).map(|i| i * 4).collect();
        let values: Vec<f64> = (0..n).flat_map(|i| [i as f64, (i as f64 * 0.3).sin() + 5.0]).collect();
        let raw = frame(&times, &["a", "b"], &values);
        let cfg = PreprocessConfig {
            cadence_s: 4.0,
            max_gap_s: DEFAULT_MAX_GAP_S,
            split: SplitSpec::default(),
        };
        let p = preprocess(raw, &cfg, &NoOutlierFilter).unwrap();
        assert_eq!((p.train.rows(), p.val.rows(), p.test.rows()), (70, 10, 20));
        let mean_a: f64 = p.train.column(0).iter().sum::<f64>() / 70.0;
        assert!(mean_a.abs() < 1e-12);
        assert_eq!(p.test.timestamps()[0], at(80 * 4));
    }
}
