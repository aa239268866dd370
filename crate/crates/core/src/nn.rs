//! Parameter storage and the small layer vocabulary the model is built from.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named collection of learnable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Overwrites a parameter, refusing shape changes.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(Error::Dimension(format!(
                "parameter {} has shape {:?}, got {:?}",
                self.names[id.0],
                self.values[id.0].shape(),
                value.shape()
            )));
        }
        self.values[id.0] = value;
        Ok(())
    }
}

/// Deterministic parameter initialiser.
pub struct Init {
    pub store: ParamStore,
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init {
            store: ParamStore::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Xavier-normal weight `[fan_out, fan_in]`.
    pub fn xavier(&mut self, name: &str, fan_out: usize, fan_in: usize) -> ParamId {
        let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
        let t = Tensor::randn(&[fan_out, fan_in], std, &mut self.rng);
        self.store.add(name, t)
    }

    pub fn gaussian(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let t = Tensor::randn(shape, std, &mut self.rng);
        self.store.add(name, t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        self.store.add(name, Tensor::full(shape, value))
    }
}

/// Which attention computation produced a score matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Self-attention across segments of one channel.
    Time,
    /// Routers gathering from all channels at one segment position.
    RouterAggregate,
    /// Channels reading back from the routers.
    RouterDistribute,
    /// Decoder queries attending to an encoder scale.
    Cross,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Time, Stage::RouterAggregate, Stage::RouterDistribute, Stage::Cross];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Time => "time",
            Stage::RouterAggregate => "router_aggregate",
            Stage::RouterDistribute => "router_distribute",
            Stage::Cross => "cross",
        }
    }

    fn slot(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stack {
    Encoder,
    Decoder,
}

/// Identifies one TSA/decoder layer for attention export.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct LayerTag {
    pub stack: Stack,
    pub layer: usize,
}

/// Softmax weights handed to an attention observer.
pub struct AttentionScores<'a> {
    pub tag: LayerTag,
    pub stage: Stage,
    /// `[groups, heads, queries, keys]`; groups are channels for the time
    /// stage, segment positions for router stages, channels for cross.
    pub weights: &'a Tensor,
}

pub type AttentionObserver<'a> = dyn FnMut(&AttentionScores<'_>) + 'a;

/// One forward pass: a tape plus lazily bound parameters.
pub struct Graph<'a> {
    pub tape: Tape,
    params: &'a ParamStore,
    bound: Vec<Option<Var>>,
    grad: bool,
    dropout: f64,
    rng: ChaCha8Rng,
    observer: Option<&'a mut AttentionObserver<'a>>,
    score_mults: [u64; 4],
}

impl<'a> Graph<'a> {
    /// Inference graph: parameters enter as constants.
    pub fn inference(params: &'a ParamStore) -> Self {
        Graph {
            tape: Tape::new(),
            params,
            bound: vec![None; params.len()],
            grad: false,
            dropout: 0.0,
            rng: ChaCha8Rng::seed_from_u64(0),
            observer: None,
            score_mults: [0; 4],
        }
    }

    /// Training graph: parameters require gradients and dropout is active.
    pub fn training(params: &'a ParamStore, dropout: f64, seed: u64) -> Self {
        Graph {
            grad: true,
            dropout,
            rng: ChaCha8Rng::seed_from_u64(seed),
            ..Self::inference(params)
        }
    }

    pub fn with_observer(mut self, observer: &'a mut AttentionObserver<'a>) -> Self {
        self.observer = Some(observer);
        self
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.params.get(id).clone(), self.grad);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        if self.dropout == 0.0 {
            return Ok(x);
        }
        let p = self.dropout;
        self.tape.dropout(x, p, &mut self.rng)
    }

    /// Gradient for every parameter after `tape.backward`; unbound or
    /// unreached parameters get zeros.
    pub fn param_grads(&self) -> Vec<Vec<f64>> {
        self.params
            .ids()
            .map(|id| match self.bound[id.0].and_then(|v| self.tape.grad(v)) {
                Some(g) => g.to_vec(),
                None => vec![0.0; self.params.get(id).numel()],
            })
            .collect()
    }

    /// Query-key multiplies spent computing attention scores in `stage`.
    pub fn score_multiplies(&self, stage: Stage) -> u64 {
        self.score_mults[stage.slot()]
    }

    pub(crate) fn record_scores(&mut self, tag: LayerTag, stage: Stage, weights: Var, mults: u64) {
        self.score_mults[stage.slot()] += mults;
        if let Some(obs) = self.observer.as_mut() {
            obs(&AttentionScores {
                tag,
                stage,
                weights: self.tape.value(weights),
            });
        }
    }
}

/// Affine map over the last axis; weight stored `[out, in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(init: &mut Init, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        let weight = init.xavier(&format!("{name}.weight"), fan_out, fan_in);
        let bias = bias.then(|| init.constant(&format!("{name}.bias"), &[fan_out], 0.0));
        Linear { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let y = g.tape.linear(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.tape.add(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Layer normalisation over the last axis.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(init: &mut Init, name: &str, width: usize) -> Self {
        LayerNorm {
            gain: init.constant(&format!("{name}.gain"), &[width], 1.0),
            bias: init.constant(&format!("{name}.bias"), &[width], 0.0),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let axis = g.tape.shape(x).len() - 1;
        let (gain, bias) = (g.param(self.gain), g.param(self.bias));
        g.tape.layer_norm(x, gain, bias, axis)
    }
}

/// Two-layer feed-forward block with a GELU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn new(init: &mut Init, name: &str, width: usize, hidden: usize) -> Self {
        Mlp {
            hidden: Linear::new(init, &format!("{name}.fc1"), width, hidden, true),
            out: Linear::new(init, &format!("{name}.fc2"), hidden, width, true),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, x)?;
        let h = g.tape.gelu(h)?;
        let h = g.dropout(h)?;
        self.out.forward(g, h)
    }
}

/// `LayerNorm(x + sublayer)`, the post-norm residual used throughout.
pub(crate) fn residual_norm(g: &mut Graph, norm: &LayerNorm, x: Var, sublayer: Var) -> Result<Var> {
    let sublayer = g.dropout(sublayer)?;
    let sum = g.tape.add(x, sublayer)?;
    norm.forward(g, sum)
}
