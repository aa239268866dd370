//! Risk signal from forecast errors, warning threshold and alarm detection.
//!
//! Risk at a prediction target is the sum over included channels of the
//! min-max normalised relative error between the forecast and the most
//! recent ground truth available when the forecast was made. A warning
//! threshold `(1 + MSE) (μ + 2σ)` is fitted on an incident-free stretch of
//! Risk; persistent exceedances become alarm intervals.

use crate::data::{NormStats, TimeSeriesFrame};
use crate::error::{Error, Result};
use crate::model::PredictionSeries;
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

pub const DEFAULT_MIN_PERSIST: usize = 3;
/// Near-zero guard as a fraction of each channel's raw standard deviation.
pub const DEFAULT_EPSILON_FRACTION: f64 = 1e-3;

/// `|truth − pred| / |truth|` in percent, or 0 when `|truth| ≤ eps`.
pub fn relative_error(truth: f64, pred: f64, eps: f64) -> f64 {
    if truth.abs() <= eps {
        0.0
    } else {
        (truth - pred).abs() / truth.abs() * 100.0
    }
}

/// Per-channel guard `fraction × std` from training statistics.
pub fn default_epsilon(stats: &NormStats, fraction: f64) -> Vec<f64> {
    stats.std.iter().map(|s| s * fraction).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RiskSeries {
    /// Target instant of the forecast behind each row.
    pub timestamps: Vec<DateTime<Utc>>,
    /// Frame row holding the ground truth each row was compared against.
    pub truth_rows: Vec<usize>,
    /// Window that produced each row.
    pub source_window: Vec<usize>,
    pub channels: Vec<String>,
    pub excluded: Vec<String>,
    /// Row-major `rows × channels` relative errors in percent.
    pub relative: Vec<f64>,
    /// The same, min-max scaled to [0, 1] per channel over the series.
    pub normalized: Vec<f64>,
    pub risk: Vec<f64>,
}

impl RiskSeries {
    pub fn len(&self) -> usize {
        self.risk.len()
    }

    pub fn is_empty(&self) -> bool {
        self.risk.is_empty()
    }
}

/// Builds the Risk series for predictions made over `truth` (raw units).
///
/// Series row `k < τ` comes from the first window and is compared against
/// truth row `T − τ + k`. Later rows are the newest forecast of window `λ`
/// and are compared against row `T + λ`, the first row after that window's
/// input. The last window has no such row when it ends at the frame end, so
/// its entry is dropped.
pub fn risk_series(truth: &TimeSeriesFrame, preds: &PredictionSeries, excluded: &[String], eps: &[f64]) -> Result<RiskSeries> {
    let (t, tau, d) = (preds.input_len, preds.horizon, preds.channels);
    if d != truth.width() || eps.len() != d {
        return Err(Error::Alignment(format!(
            "predictions have {d} channels, truth has {}, epsilon has {}",
            truth.width(),
            eps.len()
        )));
    }
    if tau > t {
        return Err(Error::Alignment(format!(
            "horizon {tau} exceeds the input length {t}; the first window has no truth to compare against"
        )));
    }
    let expected_rows = t + preds.windows() - 1;
    if truth.rows() != expected_rows {
        let ts = |i: usize| truth.timestamp_at(i).map_or("?".into(), crate::data::format_timestamp);
        return Err(Error::Alignment(format!(
            "predictions span frame rows 0..{expected_rows} but the truth frame has {} rows ({} .. {})",
            truth.rows(),
            ts(0),
            ts(truth.rows().saturating_sub(1))
        )));
    }
    for name in excluded {
        if truth.channel_index(name).is_none() {
            tracing::warn!(channel = %name, "excluded channel is not in the data");
        }
    }
    let included: Vec<usize> = (0..d).filter(|&c| !excluded.contains(&truth.channels()[c])).collect();

    let mut timestamps = Vec::new();
    let mut truth_rows = Vec::new();
    let mut source_window = Vec::new();
    let mut relative = Vec::new();
    for k in 0..preds.rows() {
        let row = if k < tau { t - tau + k } else { t + k + 1 - tau };
        if row >= truth.rows() {
            continue;
        }
        let stamp = truth.timestamp_at(preds.target_row(k)).ok_or_else(|| {
            Error::Alignment(format!("no cadence to timestamp forecast row {k} past the end of the data"))
        })?;
        timestamps.push(stamp);
        truth_rows.push(row);
        source_window.push(preds.source_window[k]);
        let p = preds.row(k);
        relative.extend(included.iter().map(|&c| relative_error(truth.value(row, c), p[c], eps[c])));
    }

    let n = included.len();
    let rows = truth_rows.len();
    let mut normalized = vec![0.0; relative.len()];
    for j in 0..n {
        let col = (0..rows).map(|i| relative[i * n + j]);
        let (lo, hi) = col.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        let span = hi - lo;
        for i in 0..rows {
            // a flat channel carries no information; it contributes zero
            normalized[i * n + j] = if span > 0.0 { (relative[i * n + j] - lo) / span } else { 0.0 };
        }
    }
    let risk = (0..rows).map(|i| normalized[i * n..(i + 1) * n].iter().sum()).collect();
    Ok(RiskSeries {
        timestamps,
        truth_rows,
        source_window,
        channels: included.iter().map(|&c| truth.channels()[c].clone()).collect(),
        excluded: excluded.to_vec(),
        relative,
        normalized,
        risk,
    })
}

/// Where the incident-free stretch used for (μ, σ) lies, in Risk rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdConfig {
    /// Rows `k1·τ .. k2·τ` of the Risk series (frame rows `T + k1·τ ..`).
    pub k1: usize,
    pub k2: usize,
    pub min_samples: usize,
    /// Validation MSE at the configured horizon, as a fraction.
    pub mse_tau: f64,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        ThresholdConfig {
            k1: 1,
            k2: 40,
            min_samples: 100,
            mse_tau: 0.0,
        }
    }
}

impl ThresholdConfig {
    pub fn rows(&self, horizon: usize) -> std::ops::Range<usize> {
        self.k1 * horizon..self.k2 * horizon
    }
}

/// Mean and population standard deviation of `risk[range]`.
pub fn fit_normal_stats(risk: &[f64], range: std::ops::Range<usize>, min_samples: usize) -> Result<(f64, f64)> {
    if range.end > risk.len() || range.start >= range.end {
        return Err(Error::Usage(format!(
            "normal window rows {}..{} do not lie inside the {}-row risk series",
            range.start,
            range.end,
            risk.len()
        )));
    }
    let w = &risk[range];
    if w.len() < min_samples.max(1) {
        return Err(Error::Usage(format!(
            "normal window holds {} samples, fewer than the minimum {min_samples}",
            w.len()
        )));
    }
    Ok(mean_std(w))
}

fn mean_std(w: &[f64]) -> (f64, f64) {
    let n = w.len() as f64;
    let mu = w.iter().sum::<f64>() / n;
    let var = w.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    (mu, var.sqrt())
}

/// `W_v = (1 + MSE) (μ + 2σ)`.
pub fn warning_threshold(mu: f64, sigma: f64, mse_tau: f64) -> f64 {
    (1.0 + mse_tau) * (mu + 2.0 * sigma)
}

/// Which alarm interval marks the start of the early sign.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarningAnchor {
    /// The last interval starting at or before the event, so unrelated
    /// earlier excursions do not inflate the warning time.
    #[default]
    Nearest,
    /// The first interval starting at or before the event.
    Earliest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlarmInterval {
    /// Risk rows `start..end`.
    pub start: usize,
    pub end: usize,
    pub start_time: DateTime<Utc>,
    pub end_time: DateTime<Utc>,
    pub peak: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectConfig {
    pub min_persist: usize,
    pub horizon: usize,
    pub cadence_s: f64,
    pub event: Option<DateTime<Utc>>,
    pub anchor: WarningAnchor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlarmReport {
    pub mu: f64,
    pub sigma: f64,
    pub mse_tau: f64,
    pub w_v: f64,
    /// `MSE · (μ + 2σ)`: the share of the threshold owed to modelling error.
    pub modeling_part: f64,
    /// `μ + 2σ`: the share owed to normal fluctuation.
    pub fluctuation_part: f64,
    pub intervals: Vec<AlarmInterval>,
    pub t_tau_s: f64,
    pub t_p_s: Option<f64>,
    pub w_t_s: Option<f64>,
}

/// Maximal runs of `risk > w_v` lasting at least `min_persist` rows.
pub fn alarm_runs(risk: &[f64], w_v: f64, min_persist: usize) -> Vec<std::ops::Range<usize>> {
    let mut runs = Vec::new();
    let mut start = None;
    for i in 0..=risk.len() {
        let above = i < risk.len() && risk[i] > w_v;
        match (above, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                if i - s >= min_persist.max(1) {
                    runs.push(s..i);
                }
                start = None;
            }
            _ => {}
        }
    }
    runs
}

pub fn detect(risk: &[f64], timestamps: &[DateTime<Utc>], stats: (f64, f64), mse_tau: f64, cfg: &DetectConfig) -> Result<AlarmReport> {
    if risk.len() != timestamps.len() {
        return Err(Error::Alignment(format!("{} risk values for {} timestamps", risk.len(), timestamps.len())));
    }
    if cfg.min_persist == 0 {
        return Err(Error::Config("min_persist must be at least 1".into()));
    }
    let (mu, sigma) = stats;
    let w_v = warning_threshold(mu, sigma, mse_tau);
    let intervals: Vec<AlarmInterval> = alarm_runs(risk, w_v, cfg.min_persist)
        .into_iter()
        .map(|r| AlarmInterval {
            start: r.start,
            end: r.end,
            start_time: timestamps[r.start],
            end_time: timestamps[r.end - 1],
            peak: risk[r.clone()].iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
        .collect();
    let t_tau_s = cfg.horizon as f64 * cfg.cadence_s;
    let t_p_s = match cfg.event {
        Some(event) => {
            let mut before = intervals.iter().filter(|iv| iv.start_time <= event);
            let anchor = match cfg.anchor {
                WarningAnchor::Nearest => before.next_back(),
                WarningAnchor::Earliest => before.next(),
            };
            anchor.map(|iv| (event - iv.start_time).num_milliseconds() as f64 / 1000.0)
        }
        None => intervals.first().map(|iv| (iv.end - iv.start) as f64 * cfg.cadence_s),
    };
    Ok(AlarmReport {
        mu,
        sigma,
        mse_tau,
        w_v,
        modeling_part: mse_tau * (mu + 2.0 * sigma),
        fluctuation_part: mu + 2.0 * sigma,
        intervals,
        t_tau_s,
        t_p_s,
        w_t_s: t_p_s.map(|tp| t_tau_s + tp),
    })
}

/// Exceedance rate of `risk[range]` above `w_v`.
pub fn exceedance_rate(risk: &[f64], range: std::ops::Range<usize>, w_v: f64) -> f64 {
    let w = &risk[range];
    if w.is_empty() {
        return 0.0;
    }
    w.iter().filter(|&&r| r > w_v).count() as f64 / w.len() as f64
}

/// One step of [`DynamicThreshold`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThresholdState {
    pub threshold: Option<f64>,
    pub alarmed: bool,
    /// Set when the last refit found too few non-alarmed samples and the
    /// previous threshold was kept.
    pub stale: bool,
}

/// Threshold that refits (μ, σ) every `refit_every` samples over the
/// non-alarmed samples among the trailing `window_len`.
#[derive(Clone, Debug)]
pub struct DynamicThreshold {
    refit_every: usize,
    window_len: usize,
    min_samples: usize,
    mse_tau: f64,
    trailing: VecDeque<(f64, bool)>,
    since_refit: usize,
    current: Option<f64>,
    stale: bool,
}

impl DynamicThreshold {
    pub fn new(refit_every: usize, window_len: usize, min_samples: usize, mse_tau: f64) -> Result<Self> {
        if refit_every == 0 || window_len == 0 || min_samples == 0 || min_samples > window_len {
            return Err(Error::Config(format!(
                "dynamic threshold needs refit_every, window_len > 0 and 0 < min_samples <= window_len \
                 (got {refit_every}, {window_len}, {min_samples})"
            )));
        }
        Ok(DynamicThreshold {
            refit_every,
            window_len,
            min_samples,
            mse_tau,
            trailing: VecDeque::with_capacity(window_len),
            since_refit: 0,
            current: None,
            stale: false,
        })
    }

    pub fn threshold(&self) -> Option<f64> {
        self.current
    }

    pub fn push(&mut self, risk: f64) -> ThresholdState {
        let alarmed = self.current.is_some_and(|w| risk > w);
        if self.trailing.len() == self.window_len {
            self.trailing.pop_front();
        }
        self.trailing.push_back((risk, alarmed));
        self.since_refit += 1;
        // before the first fit, try as soon as enough samples exist
        if self.since_refit >= self.refit_every || (self.current.is_none() && self.trailing.len() >= self.min_samples) {
            self.since_refit = 0;
            let clean: Vec<f64> = self.trailing.iter().filter(|(_, a)| !a).map(|(r, _)| *r).collect();
            if clean.len() >= self.min_samples {
                let (mu, sigma) = mean_std(&clean);
                self.current = Some(warning_threshold(mu, sigma, self.mse_tau));
                self.stale = false;
            } else {
                self.stale = true;
            }
        }
        ThresholdState {
            threshold: self.current,
            alarmed,
            stale: self.stale,
        }
    }
}

/// Online Risk: each channel's relative error is min-max scaled over its
/// trailing `window_len` values, then summed.
#[derive(Clone, Debug)]
pub struct StreamingRisk {
    window_len: usize,
    history: Vec<VecDeque<f64>>,
}

impl StreamingRisk {
    pub fn new(channels: usize, window_len: usize) -> Self {
        StreamingRisk {
            window_len: window_len.max(1),
            history: vec![VecDeque::new(); channels],
        }
    }

    pub fn push(&mut self, relative: &[f64]) -> Result<f64> {
        if relative.len() != self.history.len() {
            return Err(Error::Dimension(format!(
                "{} relative errors for {} channels",
                relative.len(),
                self.history.len()
            )));
        }
        let mut risk = 0.0;
        for (h, &r) in self.history.iter_mut().zip(relative) {
            if h.len() == self.window_len {
                h.pop_front();
            }
            h.push_back(r);
            let (lo, hi) = h.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            if hi > lo {
                risk += (r - lo) / (hi - lo);
            }
        }
        Ok(risk)
    }
}
