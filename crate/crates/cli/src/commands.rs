use crate::config::RunConfig;
use crossalarm_core::checkpoint::{self, Checkpoint, CheckpointMeta};
use crossalarm_core::data::{self, format_timestamp, ingest_csv, make_windows, read_frame_csv, NoOutlierFilter, NormStats, TimeSeriesFrame, Window};
use crossalarm_core::metrics::{self, MetricsReport};
use crossalarm_core::model::{predict_series, PredictionSeries};
use crossalarm_core::nn::AttentionScores;
use crossalarm_core::risk::{self, AlarmReport, DetectConfig, ThresholdConfig};
use crossalarm_core::train::{self, TrainConfig};
use crossalarm_core::{CrossformerModel, Error, ModelConfig, Result};
use serde::Serialize;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const TRAIN_CSV: &str = "train.csv";
pub const VAL_CSV: &str = "val.csv";
pub const TEST_CSV: &str = "test.csv";
pub const STATS_JSON: &str = "norm_stats.json";
pub const PREPROCESS_REPORT: &str = "preprocess_report.json";
pub const RUN_META: &str = "run_meta.json";
pub const PREDICTIONS_CSV: &str = "predictions.csv";
pub const PROVENANCE_CSV: &str = "prediction_provenance.csv";
pub const RISK_CSV: &str = "risk.csv";
pub const ALARM_JSON: &str = "alarm_report.json";
pub const ALARM_TXT: &str = "alarm_report.txt";
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const ATTENTION_DIR: &str = "attention";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    s.push('\n');
    write_text(path, &s)
}

fn prepare_out_dir(cfg: &RunConfig, command: &str) -> Result<PathBuf> {
    let dir = cfg.out_dir();
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    write_text(&dir.join(format!("config.{command}.txt")), &cfg.to_text())?;
    Ok(dir)
}

fn read_split(dir: &Path, name: &str) -> Result<TimeSeriesFrame> {
    let path = dir.join(name);
    if !path.exists() {
        return Err(Error::Usage(format!("{} not found; run preprocess first", path.display())));
    }
    read_frame_csv(&path)
}

fn read_stats(dir: &Path) -> Result<NormStats> {
    let path = dir.join(STATS_JSON);
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.clone(),
        message: e.to_string(),
    })
}

/// Refuses a checkpoint whose architecture disagrees with the config.
fn check_model_config(stored: &ModelConfig, configured: &ModelConfig) -> Result<()> {
    if stored == configured {
        return Ok(());
    }
    let a = serde_json::to_value(stored).expect("serialisable");
    let b = serde_json::to_value(configured).expect("serialisable");
    let diffs: Vec<String> = a
        .as_object()
        .expect("struct")
        .iter()
        .filter(|(k, v)| b.get(k.as_str()) != Some(v))
        .map(|(k, v)| format!("{k}: checkpoint {v}, config {}", b[k.as_str()]))
        .collect();
    Err(Error::Config(format!("checkpoint does not match the configuration ({})", diffs.join("; "))))
}

fn check_channels(stats: &NormStats, frame: &TimeSeriesFrame) -> Result<()> {
    if stats.channels != frame.channels() {
        return Err(Error::Config(format!(
            "channel mismatch: checkpoint has {:?}, data has {:?}",
            stats.channels,
            frame.channels()
        )));
    }
    Ok(())
}

fn load_checkpoint(cfg: &RunConfig, path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::Usage(format!("{} not found; run train first", path.display())));
    }
    let ckpt = checkpoint::load(path)?;
    check_model_config(&ckpt.model.config, &cfg.model_config()?)?;
    Ok(ckpt)
}

pub fn preprocess(cfg: &RunConfig) -> Result<()> {
    let raw_path = PathBuf::from(cfg.str("raw_csv"));
    if raw_path.as_os_str().is_empty() {
        return Err(Error::Config("raw_csv is not set".into()));
    }
    let map = cfg.channel_map()?;
    let pcfg = cfg.preprocess_config()?;
    let dir = prepare_out_dir(cfg, "preprocess")?;
    let (raw, ingest) = ingest_csv(&raw_path, cfg.str("timestamp_column"), &map)?;
    let processed = data::preprocess(raw, &pcfg, &NoOutlierFilter)?;
    processed.train.write_csv(&dir.join(TRAIN_CSV))?;
    processed.val.write_csv(&dir.join(VAL_CSV))?;
    processed.test.write_csv(&dir.join(TEST_CSV))?;
    write_json(&dir.join(STATS_JSON), &processed.stats)?;

    #[derive(Serialize)]
    struct Report<'a> {
        ingest: &'a data::IngestReport,
        preprocess: &'a data::PreprocessReport,
    }
    write_json(
        &dir.join(PREPROCESS_REPORT),
        &Report {
            ingest: &ingest,
            preprocess: &processed.report,
        },
    )?;
    tracing::info!(
        train = processed.report.train_rows,
        val = processed.report.val_rows,
        test = processed.report.test_rows,
        segments = processed.report.segments,
        "preprocessed"
    );
    Ok(())
}

#[derive(Serialize)]
struct RunMeta<'a> {
    config: &'a str,
    seed: u64,
    optimizer: Optimizer,
    train: &'a TrainConfig,
    model: &'a ModelConfig,
    resumed: bool,
    train_windows: usize,
    val_windows: usize,
    parameters: usize,
    initial_val_mse: f64,
    best_epoch: usize,
    best_val_mse: f64,
    stopped_early: bool,
    history: &'a [train::EpochRecord],
    checkpoint: String,
    wall_time_s: f64,
}

#[derive(Serialize)]
struct Optimizer {
    name: &'static str,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

pub fn train(cfg: &RunConfig, resume: bool) -> Result<()> {
    let started = Instant::now();
    let model_cfg = cfg.model_config()?;
    let tcfg = cfg.train_config()?;
    let dir = prepare_out_dir(cfg, "train")?;
    let stats = read_stats(&dir)?;
    let train_frame = read_split(&dir, TRAIN_CSV)?;
    let val_frame = read_split(&dir, VAL_CSV)?;
    check_channels(&stats, &train_frame)?;
    let (t, tau) = (model_cfg.input_len, model_cfg.horizon);
    let train_w = make_windows(&train_frame, t, tau, cfg.stride("train_stride")?)?;
    let val_w = make_windows(&val_frame, t, tau, cfg.stride("val_stride")?).map_err(|e| {
        Error::Data(format!("validation split: {e}; use more data or a larger val fraction"))
    })?;
    let ckpt_path = cfg.checkpoint_path();

    let (mut model, mut prior) = if resume {
        let ck = load_checkpoint(cfg, &ckpt_path)?;
        if ck.stats != stats {
            return Err(Error::Config("checkpoint normalisation differs from the preprocessed data".into()));
        }
        tracing::info!(path = %ckpt_path.display(), epochs = ck.meta.history.len(), "resuming");
        (ck.model, ck.meta)
    } else {
        (CrossformerModel::new(model_cfg.clone(), tcfg.seed)?, CheckpointMeta::default())
    };
    let outcome = train::train(&mut model, &train_w, &val_w, &tcfg)?;

    let offset = prior.history.len();
    prior.history.extend(outcome.history.iter().cloned().map(|mut r| {
        r.epoch += offset;
        r
    }));
    let meta = CheckpointMeta {
        seed: tcfg.seed,
        best_epoch: if outcome.best_epoch > 0 { outcome.best_epoch + offset } else { prior.best_epoch },
        best_val_mse: outcome.best_val_mse,
        history: prior.history,
    };
    checkpoint::save(&ckpt_path, &model, &stats, &meta)?;
    let config_text = cfg.to_text();
    write_json(
        &dir.join(RUN_META),
        &RunMeta {
            config: &config_text,
            seed: tcfg.seed,
            optimizer: Optimizer {
                name: "adam",
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            train: &tcfg,
            model: &model.config,
            resumed: resume,
            train_windows: train_w.len(),
            val_windows: val_w.len(),
            parameters: model.params.num_scalars(),
            initial_val_mse: outcome.initial_val_mse,
            best_epoch: meta.best_epoch,
            best_val_mse: meta.best_val_mse,
            stopped_early: outcome.stopped_early,
            history: &meta.history,
            checkpoint: ckpt_path.display().to_string(),
            wall_time_s: started.elapsed().as_secs_f64(),
        },
    )?;
    tracing::info!(best_val_mse = meta.best_val_mse, best_epoch = meta.best_epoch, "training finished");
    Ok(())
}

/// Predictions over the test split, in raw units.
struct TestForecast {
    ckpt: Checkpoint,
    /// Test split in raw units.
    truth: TimeSeriesFrame,
    /// Prediction series in raw units.
    preds: PredictionSeries,
}

fn forecast_test(cfg: &RunConfig) -> Result<TestForecast> {
    let dir = cfg.out_dir();
    let ckpt = load_checkpoint(cfg, &cfg.checkpoint_path())?;
    let test = read_split(&dir, TEST_CSV)?;
    check_channels(&ckpt.stats, &test)?;
    let mut preds = predict_series(&ckpt.model, test.values(), test.rows())?;
    ckpt.stats.denormalize_in_place(&mut preds.values);
    let truth = ckpt.stats.denormalize(&test)?;
    Ok(TestForecast { ckpt, truth, preds })
}

pub fn predict(cfg: &RunConfig) -> Result<()> {
    let dir = prepare_out_dir(cfg, "predict")?;
    let TestForecast { ckpt, truth, preds } = forecast_test(cfg)?;
    let tau = ckpt.model.config.horizon;
    let t = ckpt.model.config.input_len;
    let channels = truth.channels();

    let mut out = String::from("timestamp");
    for c in channels {
        write!(out, ",{c}_truth,{c}_pred").unwrap();
    }
    out.push('\n');
    let mut prov = String::from("timestamp,source_window,input_end,steps_ahead\n");
    for k in 0..preds.rows() {
        let row = preds.target_row(k);
        let stamp = truth
            .timestamp_at(row)
            .ok_or_else(|| Error::Data("test split has no uniform cadence".into()))?;
        out.push_str(&format_timestamp(stamp));
        let p = preds.row(k);
        for (c, pv) in p.iter().enumerate() {
            if row < truth.rows() {
                write!(out, ",{},{pv}", truth.value(row, c)).unwrap();
            } else {
                write!(out, ",,{pv}").unwrap();
            }
        }
        out.push('\n');
        let lambda = preds.source_window[k];
        let input_end = lambda + t - 1;
        writeln!(
            prov,
            "{},{lambda},{},{}",
            format_timestamp(stamp),
            format_timestamp(truth.timestamps()[input_end]),
            row - input_end
        )
        .unwrap();
    }
    write_text(&dir.join(PREDICTIONS_CSV), &out)?;
    write_text(&dir.join(PROVENANCE_CSV), &prov)?;
    tracing::info!(rows = preds.rows(), horizon = tau, "predictions written");
    Ok(())
}

#[derive(Serialize)]
pub struct DetectOutput {
    pub horizon: usize,
    pub cadence_s: f64,
    pub normal_start: String,
    pub normal_end: String,
    pub normal_samples: usize,
    pub normal_exceedance_rate: f64,
    pub event: Option<String>,
    pub report: AlarmReport,
}

pub fn detect(cfg: &RunConfig) -> Result<()> {
    let dir = prepare_out_dir(cfg, "detect")?;
    let min_persist = cfg.usize("min_persist")?;
    let anchor = cfg.warning_anchor()?;
    let event = cfg.event()?;
    let TestForecast { ckpt, truth, preds } = forecast_test(cfg)?;
    let tau = ckpt.model.config.horizon;
    let cadence = truth
        .cadence_s()
        .ok_or_else(|| Error::Data("test split has no uniform cadence".into()))?;
    let eps = risk::default_epsilon(&ckpt.stats, cfg.f64("epsilon_fraction")?);
    let rs = risk::risk_series(&truth, &preds, &cfg.excluded(), &eps)?;

    let normal = match (cfg.timestamp("normal_start")?, cfg.timestamp("normal_end")?) {
        (Some(a), Some(b)) => {
            let start = rs.timestamps.partition_point(|t| *t < a);
            let end = rs.timestamps.partition_point(|t| *t <= b);
            start..end
        }
        (None, None) => ThresholdConfig {
            k1: cfg.usize("normal_k1")?,
            k2: cfg.usize("normal_k2")?,
            ..Default::default()
        }
        .rows(tau),
        _ => return Err(Error::Config("set both normal_start and normal_end, or neither".into())),
    };
    if normal.start >= normal.end || normal.end > rs.len() {
        return Err(Error::Usage(format!(
            "normal window rows {}..{} do not fit the {}-row risk series",
            normal.start,
            normal.end,
            rs.len()
        )));
    }
    if let Some(ev) = event {
        if rs.timestamps[normal.end - 1] >= ev {
            return Err(Error::Config(format!(
                "normal window ends at {}, at or after the annotated anomaly {}; the baseline would be contaminated",
                format_timestamp(rs.timestamps[normal.end - 1]),
                format_timestamp(ev)
            )));
        }
    }
    let stats = risk::fit_normal_stats(&rs.risk, normal.clone(), cfg.usize("normal_min_samples")?)?;
    let mse_tau = ckpt.meta.best_val_mse;
    let dcfg = DetectConfig {
        min_persist,
        horizon: tau,
        cadence_s: cadence,
        event,
        anchor,
    };
    let report = risk::detect(&rs.risk, &rs.timestamps, stats, mse_tau, &dcfg)?;

    let mut alarm = vec![false; rs.len()];
    for iv in &report.intervals {
        alarm[iv.start..iv.end].iter_mut().for_each(|a| *a = true);
    }
    let mut csv = String::from("timestamp,risk,threshold,alarm");
    for c in &rs.channels {
        write!(csv, ",{c}").unwrap();
    }
    csv.push('\n');
    let n = rs.channels.len();
    for i in 0..rs.len() {
        write!(csv, "{},{},{},{}", format_timestamp(rs.timestamps[i]), rs.risk[i], report.w_v, alarm[i] as u8).unwrap();
        for v in &rs.normalized[i * n..(i + 1) * n] {
            write!(csv, ",{v}").unwrap();
        }
        csv.push('\n');
    }
    write_text(&dir.join(RISK_CSV), &csv)?;

    let out = DetectOutput {
        horizon: tau,
        cadence_s: cadence,
        normal_start: format_timestamp(rs.timestamps[normal.start]),
        normal_end: format_timestamp(rs.timestamps[normal.end - 1]),
        normal_samples: normal.len(),
        normal_exceedance_rate: risk::exceedance_rate(&rs.risk, normal, report.w_v),
        event: event.map(format_timestamp),
        report,
    };
    write_json(&dir.join(ALARM_JSON), &out)?;
    write_text(&dir.join(ALARM_TXT), &alarm_table(&out))?;
    tracing::info!(w_v = out.report.w_v, alarms = out.report.intervals.len(), "detection finished");
    Ok(())
}

fn alarm_table(out: &DetectOutput) -> String {
    let r = &out.report;
    let minutes = |s: Option<f64>| s.map_or("—".to_string(), |s| format!("{:.2}", s / 60.0));
    let mut s = String::new();
    writeln!(s, "{:>5} {:>10} {:>10} {:>9} {:>10} {:>9}", "tau", "mu", "sigma", "MSE%", "W_v", "W_t(min)").unwrap();
    writeln!(
        s,
        "{:>5} {:>10.5} {:>10.5} {:>9.3} {:>10.4} {:>9}",
        out.horizon,
        r.mu,
        r.sigma,
        r.mse_tau * 100.0,
        r.w_v,
        minutes(r.w_t_s)
    )
    .unwrap();
    writeln!(s).unwrap();
    writeln!(s, "t_tau = {:.2} min, t_p = {} min", r.t_tau_s / 60.0, minutes(r.t_p_s)).unwrap();
    writeln!(s, "normal window {} .. {} ({} samples)", out.normal_start, out.normal_end, out.normal_samples).unwrap();
    writeln!(s, "alarm intervals: {}", r.intervals.len()).unwrap();
    for iv in &r.intervals {
        writeln!(s, "  {} .. {}  peak {:.4}", format_timestamp(iv.start_time), format_timestamp(iv.end_time), iv.peak).unwrap();
    }
    s
}

#[derive(Serialize)]
struct EvalRow {
    split: &'static str,
    model: String,
    mse: f64,
    mae: f64,
    n: usize,
}

pub fn eval(cfg: &RunConfig) -> Result<()> {
    let dir = prepare_out_dir(cfg, "eval")?;
    let stride = cfg.stride("eval_stride")?;
    let primary = load_checkpoint(cfg, &cfg.checkpoint_path())?;
    let c = &primary.model.config;
    let mut splits: Vec<(&'static str, Vec<Window>)> = Vec::new();
    for (name, file) in [("val", VAL_CSV), ("test", TEST_CSV)] {
        let frame = read_split(&dir, file)?;
        check_channels(&primary.stats, &frame)?;
        splits.push((name, make_windows(&frame, c.input_len, c.horizon, stride)?));
    }

    let mut extra = Vec::new();
    for p in cfg.eval_checkpoints() {
        let ck = load_checkpoint(cfg, &p)?;
        if ck.stats != primary.stats {
            return Err(Error::Config(format!("{} was trained on different normalisation", p.display())));
        }
        extra.push(ck.model);
    }

    let mut rows = Vec::new();
    for (split, windows) in &splits {
        let row = |model: String, r: MetricsReport| EvalRow {
            split,
            model,
            mse: r.mse,
            mae: r.mae,
            n: r.n,
        };
        rows.push(row("crossformer".into(), train::evaluate(&primary.model, windows)?));
        rows.push(row("persistence".into(), train::persistence_baseline(windows, c.channels)?));
        if !extra.is_empty() {
            let runs = extra.iter().map(|m| train::evaluate(m, windows)).collect::<Result<Vec<_>>>()?;
            rows.push(row(format!("trimmed_mean_of_{}", runs.len()), metrics::trimmed_report(&runs)?));
        }
    }
    let mut csv = String::from("split,model,mse,mae,n\n");
    for r in &rows {
        writeln!(csv, "{},{},{},{},{}", r.split, r.model, r.mse, r.mae, r.n).unwrap();
    }
    write_text(&dir.join(METRICS_CSV), &csv)?;
    write_json(&dir.join(METRICS_JSON), &rows)?;
    Ok(())
}

pub fn export_attention(cfg: &RunConfig) -> Result<()> {
    let dir = prepare_out_dir(cfg, "export-attention")?;
    let index = cfg.usize("window_index")?;
    let ckpt = load_checkpoint(cfg, &cfg.checkpoint_path())?;
    let test = read_split(&dir, TEST_CSV)?;
    check_channels(&ckpt.stats, &test)?;
    let c = &ckpt.model.config;
    let windows = test.rows().saturating_sub(c.input_len) + 1;
    if test.rows() < c.input_len || index >= windows {
        return Err(Error::Usage(format!(
            "window_index {index} is out of range; the test split has {} windows",
            if test.rows() < c.input_len { 0 } else { windows }
        )));
    }
    let d = c.channels;
    let window = &test.values()[index * d..(index + c.input_len) * d];
    let files = attention_files(&ckpt.model, window)?;
    let out = dir.join(ATTENTION_DIR);
    if out.exists() {
        std::fs::remove_dir_all(&out).map_err(io_err(&out))?;
    }
    std::fs::create_dir_all(&out).map_err(io_err(&out))?;
    for (name, text) in &files {
        write_text(&out.join(name), text)?;
    }
    tracing::info!(files = files.len(), dir = %out.display(), "attention exported");
    Ok(())
}

/// One CSV per (stack, layer, stage, head). Rows are `group,query` then one
/// weight per key.
pub fn attention_files(model: &CrossformerModel, window: &[f64]) -> Result<Vec<(String, String)>> {
    let mut files = Vec::new();
    let mut observer = |s: &AttentionScores<'_>| {
        let shape = s.weights.shape();
        let (groups, heads, lq, lk) = (shape[0], shape[1], shape[2], shape[3]);
        let stack = match s.tag.stack {
            crossalarm_core::nn::Stack::Encoder => "encoder",
            crossalarm_core::nn::Stack::Decoder => "decoder",
        };
        for h in 0..heads {
            let mut text = String::from("group,query");
            for k in 0..lk {
                write!(text, ",k{k}").unwrap();
            }
            text.push('\n');
            for g in 0..groups {
                for q in 0..lq {
                    write!(text, "{g},{q}").unwrap();
                    for k in 0..lk {
                        write!(text, ",{}", s.weights.get(&[g, h, q, k])).unwrap();
                    }
                    text.push('\n');
                }
            }
            files.push((format!("{stack}_l{}_{}_h{h}.csv", s.tag.layer, s.stage.as_str()), text));
        }
    };
    model.observe_attention(window, &mut observer)?;
    Ok(files)
}
