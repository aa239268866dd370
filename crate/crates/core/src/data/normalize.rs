use super::TimeSeriesFrame;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Per-channel mean and population standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub channels: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn fit(frame: &TimeSeriesFrame) -> Result<Self> {
        let n = frame.rows();
        if n == 0 {
            return Err(Error::Data("cannot fit normalisation on an empty frame".into()));
        }
        let d = frame.width();
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(frame.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for i in 0..n {
            for (j, v) in frame.row(i).iter().enumerate() {
                var[j] += (v - mean[j]).powi(2);
            }
        }
        let std: Vec<f64> = var.iter().map(|v| (v / n as f64).sqrt()).collect();
        let flat: Vec<&str> = frame
            .channels()
            .iter()
            .zip(std.iter().zip(&mean))
            .filter(|(_, (s, m))| !(**s > 1e-12 * (1.0 + m.abs())))
            .map(|(c, _)| c.as_str())
            .collect();
        if !flat.is_empty() {
            return Err(Error::Data(format!(
                "zero variance in the training split for channel(s) {}; drop them from the channel list",
                flat.join(", ")
            )));
        }
        Ok(NormStats {
            channels: frame.channels().to_vec(),
            mean,
            std,
        })
    }

    fn check(&self, frame: &TimeSeriesFrame) -> Result<()> {
        if frame.channels() != self.channels.as_slice() {
            return Err(Error::Data(format!(
                "channel mismatch: statistics are for {:?}, frame has {:?}",
                self.channels,
                frame.channels()
            )));
        }
        Ok(())
    }

    pub fn normalize(&self, frame: &TimeSeriesFrame) -> Result<TimeSeriesFrame> {
        self.check(frame)?;
        let mut v = frame.values().to_vec();
        self.normalize_in_place(&mut v);
        Ok(frame.with_values(v))
    }

    pub fn denormalize(&self, frame: &TimeSeriesFrame) -> Result<TimeSeriesFrame> {
        self.check(frame)?;
        let mut v = frame.values().to_vec();
        self.denormalize_in_place(&mut v);
        Ok(frame.with_values(v))
    }

    /// Row-major values with this many channels per row.
    pub fn normalize_in_place(&self, values: &mut [f64]) {
        let d = self.mean.len();
        for (i, v) in values.iter_mut().enumerate() {
            *v = (*v - self.mean[i % d]) / self.std[i % d];
        }
    }

    pub fn denormalize_in_place(&self, values: &mut [f64]) {
        let d = self.mean.len();
        for (i, v) in values.iter_mut().enumerate() {
            *v = *v * self.std[i % d] + self.mean[i % d];
        }
    }
}
