//! Coupled-sine multichannel generator for tests, demos and benchmarks.
//!
//! Every channel is a positive offset plus a fixed random mixture of a few
//! shared latent sines and white noise, so channels are correlated and the
//! series is predictable from its past. An optional regime shift swaps the
//! mixture of selected channels, and rescales it, from a given row on.

use crate::data::{TimeSeriesFrame, DEFAULT_CHANNELS};
use crate::error::{Error, Result};
use chrono::{DateTime, Duration, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Latent periods in rows.
const PERIODS: [f64; 4] = [36.0, 60.0, 96.0, 150.0];

#[derive(Clone, Debug, PartialEq)]
pub struct RegimeShift {
    pub start_row: usize,
    /// Channels whose coupling changes.
    pub channels: Vec<usize>,
    /// Rows over which the new coupling is blended in.
    pub ramp: usize,
    /// Coupling strength after the shift relative to before.
    pub gain: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub rows: usize,
    pub cadence_s: f64,
    pub start: DateTime<Utc>,
    pub channels: Vec<String>,
    /// Noise standard deviation relative to the unit-variance signal.
    pub noise: f64,
    pub seed: u64,
    pub shift: Option<RegimeShift>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            rows: 20_000,
            cadence_s: 4.0,
            start: Utc.with_ymd_and_hms(2007, 7, 6, 0, 0, 0).unwrap(),
            channels: DEFAULT_CHANNELS.iter().map(|s| s.to_string()).collect(),
            noise: 0.05,
            seed: 7,
            shift: None,
        }
    }
}

/// Unit-norm mixing rows, one per channel.
fn mixing(rng: &mut ChaCha8Rng, channels: usize) -> Vec<[f64; 4]> {
    (0..channels)
        .map(|_| {
            let mut w = [0.0; 4];
            for x in &mut w {
                *x = rng.sample::<f64, _>(StandardNormal);
            }
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
            w.map(|x| x / norm)
        })
        .collect()
}

pub fn generate(spec: &SyntheticSpec) -> Result<TimeSeriesFrame> {
    let d = spec.channels.len();
    if d < 2 || spec.rows < 2 || !(spec.cadence_s > 0.0) {
        return Err(Error::Config("synthetic data needs ≥ 2 channels, ≥ 2 rows and a positive cadence".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let phases: Vec<f64> = PERIODS.iter().map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
    let normal = mixing(&mut rng, d);
    // the shifted coupling draws on the same latents in a different mix
    let shifted = mixing(&mut rng, d);
    let offsets: Vec<f64> = (0..d).map(|c| 20.0 + 10.0 * c as f64).collect();
    let scales: Vec<f64> = (0..d).map(|c| 1.0 + 0.5 * c as f64).collect();
    if let Some(s) = &spec.shift {
        if let Some(&bad) = s.channels.iter().find(|&&c| c >= d) {
            return Err(Error::Config(format!("regime shift names channel {bad} of {d}")));
        }
    }

    let mut values = Vec::with_capacity(spec.rows * d);
    let mut timestamps = Vec::with_capacity(spec.rows);
    let step_ms = (spec.cadence_s * 1000.0).round() as i64;
    for t in 0..spec.rows {
        timestamps.push(spec.start + Duration::milliseconds(step_ms * t as i64));
        let z: Vec<f64> = PERIODS
            .iter()
            .zip(&phases)
            // √2 gives each latent unit variance
            .map(|(p, ph)| std::f64::consts::SQRT_2 * (std::f64::consts::TAU * t as f64 / p + ph).sin())
            .collect();
        for c in 0..d {
            let mix = |w: &[f64; 4]| w.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>();
            let mut signal = mix(&normal[c]);
            if let Some(s) = &spec.shift {
                if t >= s.start_row && s.channels.contains(&c) {
                    let a = ((t - s.start_row + 1) as f64 / s.ramp.max(1) as f64).min(1.0);
                    signal = (1.0 - a) * signal + a * s.gain * mix(&shifted[c]);
                }
            }
            let noise: f64 = rng.sample(StandardNormal);
            values.push(offsets[c] + scales[c] * (signal + spec.noise * noise));
        }
    }
    Ok(TimeSeriesFrame::new(timestamps, spec.channels.clone(), values)?.detect_cadence())
}
