use super::TimeSeriesFrame;
use crate::error::{Error, Result};
use chrono::Duration;

pub const DEFAULT_MAX_GAP_S: f64 = 300.0;

/// Uniform-grid segments produced by [`resample_linear`], in time order.
#[derive(Clone, Debug)]
pub struct Resampled {
    pub segments: Vec<TimeSeriesFrame>,
    /// Raw rows that ended up in a run too short to resample.
    pub isolated_rows: usize,
}

/// Linearly interpolates `frame` onto a `cadence_s` grid starting at each
/// run's first timestamp. Raw gaps longer than `max_gap_s` are never bridged;
/// they start a new segment instead.
pub fn resample_linear(frame: &TimeSeriesFrame, cadence_s: f64, max_gap_s: f64) -> Result<Resampled> {
    if !(cadence_s > 0.0) {
        return Err(Error::Config(format!("cadence must be positive, got {cadence_s}")));
    }
    if !(max_gap_s > 0.0) {
        return Err(Error::Config(format!("max_gap must be positive, got {max_gap_s}")));
    }
    if frame.rows() < 2 {
        return Err(Error::Data(format!("resampling needs at least 2 rows, got {}", frame.rows())));
    }
    let cadence_ms = (cadence_s * 1000.0).round() as i64;
    let max_gap_ms = (max_gap_s * 1000.0).round() as i64;
    let t0 = frame.timestamps()[0];
    let ms: Vec<i64> = frame.timestamps().iter().map(|t| (*t - t0).num_milliseconds()).collect();

    let mut runs = Vec::new();
    let mut start = 0;
    for i in 1..=ms.len() {
        if i == ms.len() || ms[i] - ms[i - 1] > max_gap_ms {
            runs.push(start..i);
            start = i;
        }
    }

    let mut segments = Vec::new();
    let mut isolated_rows = 0;
    let d = frame.width();
    for run in runs {
        if run.len() < 2 {
            isolated_rows += run.len();
            continue;
        }
        let first = ms[run.start];
        let span = ms[run.end - 1] - first;
        let steps = (span / cadence_ms) as usize + 1;
        let mut timestamps = Vec::with_capacity(steps);
        let mut values = Vec::with_capacity(steps * d);
        let mut j = run.start;
        for k in 0..steps {
            let t = first + k as i64 * cadence_ms;
            while j + 1 < run.end && ms[j + 1] <= t {
                j += 1;
            }
            timestamps.push(t0 + Duration::milliseconds(t));
            if ms[j] == t || j + 1 == run.end {
                values.extend_from_slice(frame.row(j));
            } else {
                let w = (t - ms[j]) as f64 / (ms[j + 1] - ms[j]) as f64;
                let (lo, hi) = (frame.row(j), frame.row(j + 1));
                values.extend(lo.iter().zip(hi).map(|(a, b)| a + (b - a) * w));
            }
        }
        let seg = TimeSeriesFrame::new(timestamps, frame.channels().to_vec(), values)?.with_cadence(cadence_ms as f64 / 1000.0);
        segments.push(seg);
    }
    if segments.is_empty() {
        return Err(Error::Data(format!(
            "every raw gap exceeds max_gap of {max_gap_s} s; no segment has two rows to interpolate between"
        )));
    }
    if segments.len() > 1 {
        tracing::info!(segments = segments.len(), isolated_rows, "split at gaps longer than max_gap");
    }
    Ok(Resampled { segments, isolated_rows })
}
