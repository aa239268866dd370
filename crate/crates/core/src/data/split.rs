use super::TimeSeriesFrame;
use crate::error::{Error, Result};
use chrono::{DateTime, Utc};

/// Chronological train/val/test fractions. An annotated anomaly, given by its
/// start time, must fall entirely inside the test split.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub anomaly_start: Option<DateTime<Utc>>,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train: 0.7,
            val: 0.1,
            test: 0.2,
            anomaly_start: None,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let f = [self.train, self.val, self.test];
        if f.iter().any(|x| !(0.0..=1.0).contains(x)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions must lie in [0, 1] and sum to 1, got {}/{}/{}",
                self.train, self.val, self.test
            )));
        }
        if self.train == 0.0 {
            return Err(Error::Config("train fraction must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: TimeSeriesFrame,
    pub val: TimeSeriesFrame,
    pub test: TimeSeriesFrame,
}

/// Train and val take `round(rows * fraction)` rows each; test gets the rest.
pub fn split(frame: &TimeSeriesFrame, spec: &SplitSpec) -> Result<Splits> {
    spec.validate()?;
    let n = frame.rows();
    let n_train = ((n as f64 * spec.train).round() as usize).min(n);
    let n_val = ((n as f64 * spec.val).round() as usize).min(n - n_train);
    let test_start = n_train + n_val;
    if n_train == 0 {
        return Err(Error::Data(format!("{n} rows leave nothing for the training split")));
    }
    if let Some(anomaly) = spec.anomaly_start {
        let last = *frame.timestamps().last().expect("non-empty frame");
        if anomaly > last {
            return Err(Error::Config(format!("anomaly start {anomaly} lies after the end of the data ({last})")));
        }
        match frame.timestamps().get(test_start) {
            Some(&first_test) if anomaly >= first_test => {}
            other => {
                return Err(Error::Config(format!(
                    "anomaly starting at {anomaly} is not inside the test split (which starts at {}); \
                     enlarge the test fraction or trim the data",
                    other.map_or("<empty>".to_string(), |t| t.to_string())
                )))
            }
        }
    }
    Ok(Splits {
        train: frame.slice_rows(0..n_train),
        val: frame.slice_rows(n_train..test_start),
        test: frame.slice_rows(test_start..n),
    })
}
