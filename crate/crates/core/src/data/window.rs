use super::TimeSeriesFrame;
use crate::error::{Error, Result};

/// One supervised example: rows `[start, start+T)` as input and the next `τ`
/// rows as target, both row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub start: usize,
    pub input: Vec<f64>,
    pub target: Vec<f64>,
}

pub fn make_windows(frame: &TimeSeriesFrame, input_len: usize, horizon: usize, stride: usize) -> Result<Vec<Window>> {
    if input_len == 0 || horizon == 0 || stride == 0 {
        return Err(Error::Config("input length, horizon and stride must be positive".into()));
    }
    let n = frame.rows();
    if n < input_len + horizon {
        return Err(Error::Data(format!(
            "{n} rows cannot hold one window of {input_len} input + {horizon} target rows"
        )));
    }
    let d = frame.width();
    let v = frame.values();
    Ok((0..=n - input_len - horizon)
        .step_by(stride)
        .map(|k| Window {
            start: k,
            input: v[k * d..(k + input_len) * d].to_vec(),
            target: v[(k + input_len) * d..(k + input_len + horizon) * d].to_vec(),
        })
        .collect())
}
