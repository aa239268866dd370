//! Flat `key = value` run configuration.
//!
//! Every key has a default; a config file and `--set key=value` flags
//! override them in that order, and `CROSSALARM_SEED` overrides `seed`
//! before the flags are applied. The effective configuration is echoed as
//! the same text format, so it can be fed straight back in.

use chrono::{DateTime, Utc};
use crossalarm_core::data::{parse_timestamp, ChannelMap, PreprocessConfig, SplitSpec, DEFAULT_CHANNELS, DEPTH_CHANNELS};
use crossalarm_core::risk::{WarningAnchor, DEFAULT_EPSILON_FRACTION, DEFAULT_MIN_PERSIST};
use crossalarm_core::train::TrainConfig;
use crossalarm_core::{Error, ModelConfig, Result};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub const SEED_ENV: &str = "CROSSALARM_SEED";

/// (key, default, description) in echo order.
const KEYS: &[(&str, &str, &str)] = &[
    ("raw_csv", "", "raw input CSV for preprocess"),
    ("timestamp_column", "timestamp", "name of the timestamp column in the raw CSV"),
    ("channels", "", "comma-separated canonical channel names, depth channels first"),
    ("channel_map", "", "header=channel pairs separated by ';' when CSV headers differ"),
    ("out_dir", "run", "directory for every artifact"),
    ("cadence_s", "4", "resampling cadence in seconds"),
    ("max_gap_s", "300", "raw gaps longer than this split the series"),
    ("split", "0.7,0.1,0.2", "train,val,test fractions"),
    ("anomaly_start", "", "RFC 3339 start of an annotated anomaly; must fall in the test split"),
    ("input_len", "96", "input window T"),
    ("horizon", "12", "forecast horizon"),
    ("seg_len", "12", "segment length"),
    ("d_model", "64", "embedding width"),
    ("heads", "4", "attention heads"),
    ("layers", "3", "encoder layers N"),
    ("routers", "3", "routers per segment position"),
    ("mlp_ratio", "4", "MLP hidden width as a multiple of d_model"),
    ("dropout", "0", "dropout probability during training"),
    ("learning_rate", "0.0001", "Adam step size"),
    ("batch_size", "32", "windows per mini-batch"),
    ("max_epochs", "20", "upper bound on epochs"),
    ("patience", "5", "epochs without validation improvement before stopping"),
    ("seed", "42", "initialisation and shuffling seed"),
    ("max_batches_per_epoch", "0", "cap on mini-batches per epoch, 0 for no cap"),
    ("train_stride", "1", "row step between training windows"),
    ("val_stride", "1", "row step between validation windows"),
    ("checkpoint", "", "checkpoint path, default <out_dir>/model.ckpt"),
    ("exclude", "", "channels left out of Risk, default the depth channels"),
    ("epsilon_fraction", "0.001", "near-zero guard as a fraction of each channel's std"),
    ("normal_k1", "1", "normal window starts k1 horizons into the risk series"),
    ("normal_k2", "40", "normal window ends k2 horizons into the risk series"),
    ("normal_start", "", "explicit RFC 3339 normal window start, overrides k1/k2"),
    ("normal_end", "", "explicit RFC 3339 normal window end"),
    ("normal_min_samples", "100", "minimum samples in the normal window"),
    ("min_persist", "3", "rows Risk must stay above the threshold to raise an alarm"),
    ("warning_anchor", "nearest", "nearest or earliest alarm before the event starts the early sign"),
    ("event", "", "RFC 3339 incident time for the warning time, default anomaly_start"),
    ("eval_stride", "1", "row step between evaluation windows"),
    ("eval_checkpoints", "", "comma-separated checkpoints for trimmed multi-run evaluation"),
    ("window_index", "0", "test window exported by export-attention"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut values: BTreeMap<String, String> = KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect();
        values.insert("channels".into(), DEFAULT_CHANNELS.join(","));
        values.insert("exclude".into(), DEPTH_CHANNELS.join(","));
        values.insert("epsilon_fraction".into(), DEFAULT_EPSILON_FRACTION.to_string());
        values.insert("min_persist".into(), DEFAULT_MIN_PERSIST.to_string());
        RunConfig { values }
    }
}

impl RunConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{origin}:{}: expected 'key = value', got '{line}'", i + 1)))?;
            cfg.set(k.trim(), v.trim()).map_err(|e| Error::Config(format!("{origin}:{}: {e}", i + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(Error::Config(format!("unknown config key '{key}'"))),
        }
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects key=value, got '{assignment}'")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(seed) = std::env::var(SEED_ENV) {
            seed.trim()
                .parse::<u64>()
                .map_err(|_| Error::Config(format!("{SEED_ENV}='{seed}' is not an unsigned integer")))?;
            self.set("seed", seed.trim())?;
        }
        Ok(())
    }

    /// The effective configuration in loadable form.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# effective configuration\n");
        for (k, _, help) in KEYS {
            out.push_str(&format!("# {help}\n{k} = {}\n", self.values[*k]));
        }
        out
    }

    pub fn str(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("undeclared config key {key}"))
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str, what: &str) -> Result<T> {
        self.str(key)
            .parse()
            .map_err(|_| Error::Config(format!("{key} = '{}' is not {what}", self.str(key))))
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        self.parsed(key, "a non-negative integer")
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        let v: f64 = self.parsed(key, "a number")?;
        if !v.is_finite() {
            return Err(Error::Config(format!("{key} must be finite")));
        }
        Ok(v)
    }

    pub fn timestamp(&self, key: &str) -> Result<Option<DateTime<Utc>>> {
        let s = self.str(key);
        if s.is_empty() {
            return Ok(None);
        }
        parse_timestamp(s)
            .map(Some)
            .ok_or_else(|| Error::Config(format!("{key} = '{s}' is not an RFC 3339 timestamp")))
    }

    fn list(&self, key: &str) -> Vec<String> {
        self.str(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect()
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.str("out_dir"))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        match self.str("checkpoint") {
            "" => self.out_dir().join("model.ckpt"),
            p => PathBuf::from(p),
        }
    }

    pub fn channels(&self) -> Result<Vec<String>> {
        let ch = self.list("channels");
        if ch.len() < 2 {
            return Err(Error::Config(format!("channels needs at least 2 names, got {}", ch.len())));
        }
        Ok(ch)
    }

    pub fn channel_map(&self) -> Result<ChannelMap> {
        let channels = self.channels()?;
        let spec = self.str("channel_map");
        if spec.is_empty() {
            return Ok(ChannelMap::identity(&channels));
        }
        let mut header_of = BTreeMap::new();
        for pair in spec.split(';').map(str::trim).filter(|s| !s.is_empty()) {
            let (header, canonical) = pair
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("channel_map entry '{pair}' is not header=channel")))?;
            header_of.insert(canonical.trim().to_string(), header.trim().to_string());
        }
        if let Some(extra) = header_of.keys().find(|c| !channels.contains(c)) {
            return Err(Error::Config(format!("channel_map maps to '{extra}', which is not in channels")));
        }
        Ok(ChannelMap {
            entries: channels
                .iter()
                .map(|c| (header_of.get(c).cloned().unwrap_or_else(|| c.clone()), c.clone()))
                .collect(),
        })
    }

    pub fn preprocess_config(&self) -> Result<PreprocessConfig> {
        let fr: Vec<f64> = self
            .list("split")
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Config(format!("split = '{}' is not three numbers", self.str("split"))))?;
        if fr.len() != 3 {
            return Err(Error::Config(format!("split needs train,val,test fractions, got {}", fr.len())));
        }
        Ok(PreprocessConfig {
            cadence_s: self.f64("cadence_s")?,
            max_gap_s: self.f64("max_gap_s")?,
            split: SplitSpec {
                train: fr[0],
                val: fr[1],
                test: fr[2],
                anomaly_start: self.timestamp("anomaly_start")?,
            },
        })
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            input_len: self.usize("input_len")?,
            horizon: self.usize("horizon")?,
            seg_len: self.usize("seg_len")?,
            d_model: self.usize("d_model")?,
            heads: self.usize("heads")?,
            layers: self.usize("layers")?,
            routers: self.usize("routers")?,
            channels: self.channels()?.len(),
            mlp_ratio: self.usize("mlp_ratio")?,
            dropout: self.f64("dropout")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn seed(&self) -> Result<u64> {
        self.parsed("seed", "an unsigned integer")
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let cap = self.usize("max_batches_per_epoch")?;
        let cfg = TrainConfig {
            learning_rate: self.f64("learning_rate")?,
            batch_size: self.usize("batch_size")?,
            max_epochs: self.usize("max_epochs")?,
            patience: self.usize("patience")?,
            seed: self.seed()?,
            max_batches_per_epoch: (cap > 0).then_some(cap),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn stride(&self, key: &str) -> Result<usize> {
        let s = self.usize(key)?;
        if s == 0 {
            return Err(Error::Config(format!("{key} must be at least 1")));
        }
        Ok(s)
    }

    pub fn excluded(&self) -> Vec<String> {
        self.list("exclude")
    }

    pub fn warning_anchor(&self) -> Result<WarningAnchor> {
        match self.str("warning_anchor") {
            "nearest" => Ok(WarningAnchor::Nearest),
            "earliest" => Ok(WarningAnchor::Earliest),
            other => Err(Error::Config(format!("warning_anchor must be nearest or earliest, got '{other}'"))),
        }
    }

    pub fn event(&self) -> Result<Option<DateTime<Utc>>> {
        match self.timestamp("event")? {
            Some(t) => Ok(Some(t)),
            None => self.timestamp("anomaly_start"),
        }
    }

    pub fn eval_checkpoints(&self) -> Vec<PathBuf> {
        self.list("eval_checkpoints").into_iter().map(PathBuf::from).collect()
    }
}
