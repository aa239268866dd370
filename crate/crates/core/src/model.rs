//! Hierarchical encoder-decoder, prediction head and sliding-window
//! assembly.

use crate::attention::{Msa, TsaLayer, TsaShape};
use crate::embedding::{DswConfig, DswEmbedding};
use crate::error::{dim_err, Error, Result};
use crate::nn::{residual_norm, AttentionObserver, Graph, Init, LayerNorm, LayerTag, Linear, Mlp, ParamId, ParamStore, Stack, Stage};
use crate::tensor::{Tensor, Var};
use serde::{Deserialize, Serialize};

/// Windows per inference batch in [`predict_series`].
const INFERENCE_BATCH: usize = 64;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Input window length T.
    pub input_len: usize,
    /// Forecast horizon τ.
    pub horizon: usize,
    pub seg_len: usize,
    pub d_model: usize,
    pub heads: usize,
    /// Encoder depth N; the decoder has N + 1 layers.
    pub layers: usize,
    /// Routers per segment position, c.
    pub routers: usize,
    /// Channel count D.
    pub channels: usize,
    pub mlp_ratio: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_len: 96,
            horizon: 12,
            seg_len: 12,
            d_model: 64,
            heads: 4,
            layers: 3,
            routers: 3,
            channels: 10,
            mlp_ratio: 4,
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn dsw(&self) -> DswConfig {
        DswConfig {
            seg_len: self.seg_len,
            d_model: self.d_model,
            input_len: self.input_len,
            channels: self.channels,
        }
    }

    pub fn input_segments(&self) -> usize {
        self.input_len / self.seg_len
    }

    /// Decoder segment count ⌈τ / seg_len⌉.
    pub fn output_segments(&self) -> usize {
        self.horizon.div_ceil(self.seg_len)
    }

    /// Per-channel segment count of encoder outputs 0..=N.
    pub fn encoder_segments(&self) -> Vec<usize> {
        let mut counts = vec![self.input_segments()];
        if self.layers >= 1 {
            counts.push(self.input_segments());
        }
        for _ in 2..=self.layers {
            let prev = *counts.last().unwrap();
            counts.push(prev.div_ceil(2));
        }
        counts
    }

    pub fn validate(&self) -> Result<()> {
        self.dsw().validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} must be divisible by the head count {}",
                self.d_model, self.heads
            )));
        }
        if self.routers == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("routers and mlp_ratio must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        let counts = self.encoder_segments();
        for l in 2..=self.layers {
            if counts[l - 1] < 2 {
                return Err(Error::Config(format!(
                    "{} encoder layers need more input segments than {}: layer {l} has nothing to merge",
                    self.layers,
                    self.input_segments()
                )));
            }
        }
        if self.routers >= self.channels {
            tracing::warn!(routers = self.routers, channels = self.channels, "router count is not below the channel count");
        }
        Ok(())
    }

    fn tsa_shape(&self, segments: usize) -> TsaShape {
        TsaShape {
            segments,
            d_model: self.d_model,
            heads: self.heads,
            routers: self.routers,
            mlp_hidden: self.mlp_ratio * self.d_model,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    /// Pairwise merge `M [d_model, 2 d_model]`; absent on the first layer.
    pub merge: Option<Linear>,
    pub tsa: TsaLayer,
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub tsa: TsaLayer,
    pub cross: Msa,
    norm1: LayerNorm,
    mlp: Mlp,
    norm2: LayerNorm,
    /// Projection `W^l [seg_len, d_model]` of each decoded cell to a segment.
    pub head: Linear,
}

#[derive(Clone, Debug)]
pub struct CrossformerModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub embedding: DswEmbedding,
    pub encoder: Vec<EncoderLayer>,
    /// `E_dec [τ_seg, D, d_model]`
    pub decoder_position: ParamId,
    pub decoder: Vec<DecoderLayer>,
}

impl CrossformerModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init::new(seed);
        let embedding = DswEmbedding::new(&mut init, config.dsw())?;
        let counts = config.encoder_segments();

        let mut encoder = Vec::with_capacity(config.layers);
        for l in 1..=config.layers {
            let merge = (l > 1).then(|| Linear::new(&mut init, &format!("encoder.{l}.merge"), 2 * config.d_model, config.d_model, false));
            let tag = LayerTag { stack: Stack::Encoder, layer: l };
            let tsa = TsaLayer::new(&mut init, &format!("encoder.{l}.tsa"), tag, config.tsa_shape(counts[l]))?;
            encoder.push(EncoderLayer { merge, tsa });
        }

        let out_segs = config.output_segments();
        let decoder_position = init.gaussian("decoder.position", &[out_segs, config.channels, config.d_model], 0.02);
        let mut decoder = Vec::with_capacity(config.layers + 1);
        for l in 0..=config.layers {
            let name = format!("decoder.{l}");
            let tag = LayerTag { stack: Stack::Decoder, layer: l };
            let dm = config.d_model;
            decoder.push(DecoderLayer {
                tsa: TsaLayer::new(&mut init, &format!("{name}.tsa"), tag, config.tsa_shape(out_segs))?,
                cross: Msa::new(&mut init, &format!("{name}.cross"), dm, config.heads)?,
                norm1: LayerNorm::new(&mut init, &format!("{name}.norm1"), dm),
                mlp: Mlp::new(&mut init, &format!("{name}.mlp"), dm, config.mlp_ratio * dm),
                norm2: LayerNorm::new(&mut init, &format!("{name}.norm2"), dm),
                head: Linear::new(&mut init, &format!("{name}.head"), dm, config.seg_len, false),
            });
        }

        Ok(CrossformerModel {
            config,
            params: init.store,
            embedding,
            encoder,
            decoder_position,
            decoder,
        })
    }

    /// Encoder outputs `Z^enc,0 ..= Z^enc,N`, where output 0 is the embedding.
    pub fn encode(&self, g: &mut Graph, h: Var) -> Result<Vec<Var>> {
        let mut outputs = vec![h];
        for layer in &self.encoder {
            let prev = *outputs.last().unwrap();
            let z = match &layer.merge {
                Some(m) => merge_segments(g, prev, m)?,
                None => prev,
            };
            outputs.push(layer.tsa.forward(g, z)?);
        }
        Ok(outputs)
    }

    /// Decoder outputs `Z^dec,0 ..= Z^dec,N`; layer `l` cross-attends to
    /// encoder output `l`.
    pub fn decode(&self, g: &mut Graph, encoded: &[Var]) -> Result<Vec<Var>> {
        if encoded.len() != self.decoder.len() {
            return Err(dim_err!("decoder has {} layers but {} encoder outputs were given", self.decoder.len(), encoded.len()));
        }
        let batch = g.tape.shape(encoded[0])[0];
        let pos = g.param(self.decoder_position);
        let mut x = if batch == 1 {
            let s = g.tape.shape(pos).to_vec();
            g.tape.reshape(pos, &[1, s[0], s[1], s[2]])?
        } else {
            g.tape.tile(pos, batch)?
        };
        let mut outputs = Vec::with_capacity(self.decoder.len());
        for (layer, &enc) in self.decoder.iter().zip(encoded) {
            x = layer.forward(g, x, enc)?;
            outputs.push(x);
        }
        Ok(outputs)
    }

    /// Sums the per-layer segment projections and truncates to τ steps:
    /// `[batch, τ, D]`.
    pub fn project(&self, g: &mut Graph, decoded: &[Var]) -> Result<Var> {
        let mut total: Option<Var> = None;
        for (layer, &z) in self.decoder.iter().zip(decoded) {
            let seg = layer.head.forward(g, z)?;
            total = Some(match total {
                Some(t) => g.tape.add(t, seg)?,
                None => seg,
            });
        }
        let total = total.ok_or_else(|| dim_err!("no decoder outputs to project"))?;
        let s = g.tape.shape(total).to_vec();
        let (b, out_segs, d, seg) = (s[0], s[1], s[2], s[3]);
        let per_channel = g.tape.permute(total, &[0, 2, 1, 3])?;
        let mut series = g.tape.reshape(per_channel, &[b, d, out_segs * seg])?;
        if out_segs * seg > self.config.horizon {
            series = g.tape.slice(series, 2, 0, self.config.horizon)?;
        }
        g.tape.permute(series, &[0, 2, 1])
    }

    /// Full forward pass: `x [batch, T, D]` to `[batch, τ, D]`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let s = g.tape.shape(x);
        if s.len() != 3 || s[1] != self.config.input_len || s[2] != self.config.channels {
            return Err(dim_err!(
                "model expects [batch, {}, {}], got {s:?}",
                self.config.input_len,
                self.config.channels
            ));
        }
        let h = self.embedding.forward(g, x)?;
        let enc = self.encode(g, h)?;
        let dec = self.decode(g, &enc)?;
        self.project(g, &dec)
    }

    /// Forecasts a batch of row-major `T × D` windows stacked back to back;
    /// returns the stacked `τ × D` forecasts.
    pub fn predict_batch(&self, windows: &[f64]) -> Result<Vec<f64>> {
        let per = self.config.input_len * self.config.channels;
        if windows.is_empty() || !windows.len().is_multiple_of(per) {
            return Err(dim_err!("{} values do not form whole {}x{} windows", windows.len(), self.config.input_len, self.config.channels));
        }
        let batch = windows.len() / per;
        let mut g = Graph::inference(&self.params);
        let x = g.input(Tensor::new(vec![batch, self.config.input_len, self.config.channels], windows.to_vec())?);
        let y = self.forward(&mut g, x)?;
        Ok(g.tape.value(y).data().to_vec())
    }

    /// Forecasts the τ rows following one `T × D` window.
    pub fn predict_window(&self, window: &[f64]) -> Result<Vec<f64>> {
        if window.len() != self.config.input_len * self.config.channels {
            return Err(dim_err!(
                "window has {} values, expected {} x {}",
                window.len(),
                self.config.input_len,
                self.config.channels
            ));
        }
        self.predict_batch(window)
    }

    /// Runs one window while reporting every attention weight matrix.
    pub fn observe_attention(&self, window: &[f64], observer: &mut AttentionObserver<'_>) -> Result<Vec<f64>> {
        let mut g = Graph::inference(&self.params).with_observer(observer);
        let x = g.input(Tensor::new(vec![1, self.config.input_len, self.config.channels], window.to_vec())?);
        let y = self.forward(&mut g, x)?;
        Ok(g.tape.value(y).data().to_vec())
    }
}

impl DecoderLayer {
    fn forward(&self, g: &mut Graph, x: Var, encoded: Var) -> Result<Var> {
        let q = self.tsa.forward(g, x)?;
        let sq = g.tape.shape(q).to_vec();
        let se = g.tape.shape(encoded).to_vec();
        let (b, lq, d, dm) = (sq[0], sq[1], sq[2], sq[3]);
        if se[0] != b || se[2] != d || se[3] != dm {
            return Err(dim_err!("decoder queries {sq:?} vs encoder output {se:?}"));
        }
        let lk = se[1];
        let queries = per_channel(g, q, b, lq, d, dm)?;
        let keys = per_channel(g, encoded, b, lk, d, dm)?;
        let attended = self.cross.forward(g, queries, keys, keys, self.tsa.tag, Stage::Cross)?;
        let y = residual_norm(g, &self.norm1, queries, attended)?;
        let ff = self.mlp.forward(g, y)?;
        let y = residual_norm(g, &self.norm2, y, ff)?;
        let y = g.tape.reshape(y, &[b, d, lq, dm])?;
        g.tape.permute(y, &[0, 2, 1, 3])
    }
}

fn per_channel(g: &mut Graph, z: Var, b: usize, l: usize, d: usize, dm: usize) -> Result<Var> {
    let t = g.tape.permute(z, &[0, 2, 1, 3])?;
    g.tape.reshape(t, &[b * d, l, dm])
}

/// Merges adjacent segment pairs per channel through `M · [z_{2i}; z_{2i+1}]`.
/// With an odd count the last segment is carried over unchanged.
pub fn merge_segments(g: &mut Graph, z: Var, merge: &Linear) -> Result<Var> {
    let s = g.tape.shape(z).to_vec();
    let (b, l, d, dm) = (s[0], s[1], s[2], s[3]);
    let pairs = l / 2;
    if pairs == 0 {
        return Err(Error::Config(format!("cannot merge {l} segment(s): too many encoder layers")));
    }
    let even = if l % 2 == 0 { z } else { g.tape.slice(z, 1, 0, 2 * pairs)? };
    let x = g.tape.reshape(even, &[b, pairs, 2, d, dm])?;
    let x = g.tape.permute(x, &[0, 1, 3, 2, 4])?;
    let x = g.tape.reshape(x, &[b, pairs, d, 2 * dm])?;
    let merged = merge.forward(g, x)?;
    if l % 2 == 0 {
        Ok(merged)
    } else {
        let last = g.tape.slice(z, 1, l - 1, l)?;
        g.tape.concat(&[merged, last], 1)
    }
}

/// Sliding-window forecasts stitched into one series.
///
/// Row `k` forecasts frame row `input_len + k`. The first τ rows come from
/// window 0; each later row is the newest step of the next window.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSeries {
    pub input_len: usize,
    pub horizon: usize,
    pub channels: usize,
    /// Row-major `(Λ + τ) × D`.
    pub values: Vec<f64>,
    /// Window index λ that produced each row.
    pub source_window: Vec<usize>,
}

impl PredictionSeries {
    pub fn rows(&self) -> usize {
        self.source_window.len()
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.values[k * self.channels..(k + 1) * self.channels]
    }

    /// Frame row index the k-th prediction targets.
    pub fn target_row(&self, k: usize) -> usize {
        self.input_len + k
    }

    /// Window count Λ + 1.
    pub fn windows(&self) -> usize {
        self.rows() + 1 - self.horizon
    }
}

/// Folds per-window forecasts (each `τ × D`, in window order) into a
/// [`PredictionSeries`].
pub fn assemble_series<I>(input_len: usize, horizon: usize, channels: usize, windows: I) -> Result<PredictionSeries>
where
    I: IntoIterator<Item = Vec<f64>>,
{
    let mut series = PredictionSeries {
        input_len,
        horizon,
        channels,
        values: Vec::new(),
        source_window: Vec::new(),
    };
    for (lambda, forecast) in windows.into_iter().enumerate() {
        if forecast.len() != horizon * channels {
            return Err(dim_err!("window {lambda} forecast has {} values, expected {}", forecast.len(), horizon * channels));
        }
        if lambda == 0 {
            series.values.extend_from_slice(&forecast);
            series.source_window.extend(std::iter::repeat_n(0, horizon));
        } else {
            series.values.extend_from_slice(&forecast[(horizon - 1) * channels..]);
            series.source_window.push(lambda);
        }
    }
    if series.source_window.is_empty() {
        return Err(Error::Data("no windows to assemble".into()));
    }
    Ok(series)
}

/// Slides the model over a row-major `rows × D` matrix with stride 1.
/// Window λ reads rows `λ .. λ + T`; Λ = rows − T.
pub fn predict_series(model: &CrossformerModel, values: &[f64], rows: usize) -> Result<PredictionSeries> {
    let cfg = &model.config;
    let d = cfg.channels;
    if values.len() != rows * d {
        return Err(dim_err!("{} values for {rows} rows of {d} channels", values.len()));
    }
    if rows < cfg.input_len {
        return Err(Error::Data(format!("{rows} rows is shorter than the input window of {}", cfg.input_len)));
    }
    let windows = rows - cfg.input_len + 1;
    let per = cfg.input_len * d;
    let mut forecasts = Vec::with_capacity(windows);
    let mut start = 0;
    while start < windows {
        let end = (start + INFERENCE_BATCH).min(windows);
        let mut batch = Vec::with_capacity((end - start) * per);
        for lambda in start..end {
            batch.extend_from_slice(&values[lambda * d..lambda * d + per]);
        }
        let out = model.predict_batch(&batch)?;
        forecasts.extend(out.chunks_exact(cfg.horizon * d).map(<[f64]>::to_vec));
        start = end;
    }
    assemble_series(cfg.input_len, cfg.horizon, d, forecasts)
}
