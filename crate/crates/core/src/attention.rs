//! Multi-head attention and the two-stage (cross-time, cross-dimension)
//! attention layer.
//!
//! Arrays flowing through a [`TsaLayer`] are laid out `[batch, segments,
//! channels, d_model]`. The time stage regroups them per channel, the
//! dimension stage per segment position, so each stage only ever mixes
//! information along its own axis.

use crate::error::{dim_err, Result};
use crate::nn::{residual_norm, Graph, Init, LayerNorm, LayerTag, Linear, Mlp, ParamId, Stage};
use crate::tensor::Var;

/// Multi-head scaled dot-product attention with an output projection.
#[derive(Clone, Debug)]
pub struct Msa {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
    pub d_model: usize,
}

impl Msa {
    pub fn new(init: &mut Init, name: &str, d_model: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(dim_err!("d_model {d_model} is not divisible by {heads} heads"));
        }
        Ok(Msa {
            query: Linear::new(init, &format!("{name}.query"), d_model, d_model, true),
            key: Linear::new(init, &format!("{name}.key"), d_model, d_model, true),
            value: Linear::new(init, &format!("{name}.value"), d_model, d_model, true),
            out: Linear::new(init, &format!("{name}.out"), d_model, d_model, true),
            heads,
            d_model,
        })
    }

    /// Attends `queries [g, lq, d_model]` over `keys`/`values [g, lk, d_model]`
    /// independently for each of the `g` groups.
    pub fn forward(
        &self,
        g: &mut Graph,
        queries: Var,
        keys: Var,
        values: Var,
        tag: LayerTag,
        stage: Stage,
    ) -> Result<Var> {
        let (sq, sk, sv) = (g.tape.shape(queries).to_vec(), g.tape.shape(keys).to_vec(), g.tape.shape(values).to_vec());
        if sq.len() != 3 || sk.len() != 3 || sv != sk || sq[0] != sk[0] || sq[2] != self.d_model || sk[2] != self.d_model {
            return Err(dim_err!("msa: queries {sq:?}, keys {sk:?}, values {sv:?} (d_model {})", self.d_model));
        }
        let (groups, lq, lk) = (sq[0], sq[1], sk[1]);
        let (h, dh) = (self.heads, self.d_model / self.heads);

        let q = self.query.forward(g, queries)?;
        let k = self.key.forward(g, keys)?;
        let v = self.value.forward(g, values)?;
        let q = split_heads(g, q, groups, lq, h, dh)?;
        let k = split_heads(g, k, groups, lk, h, dh)?;
        let v = split_heads(g, v, groups, lk, h, dh)?;

        let scores = g.tape.bmm(q, k, true)?;
        let scores = g.tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let weights = g.tape.softmax(scores, 2)?;
        let mults = (groups * h * lq * lk * dh) as u64;
        let shaped = g.tape.reshape(weights, &[groups, h, lq, lk])?;
        g.record_scores(tag, stage, shaped, mults);

        let ctx = g.tape.bmm(weights, v, false)?;
        let ctx = merge_heads(g, ctx, groups, lq, h, dh)?;
        self.out.forward(g, ctx)
    }
}

fn split_heads(g: &mut Graph, x: Var, groups: usize, len: usize, h: usize, dh: usize) -> Result<Var> {
    if h == 1 {
        return Ok(x);
    }
    let x = g.tape.reshape(x, &[groups, len, h, dh])?;
    let x = g.tape.permute(x, &[0, 2, 1, 3])?;
    g.tape.reshape(x, &[groups * h, len, dh])
}

fn merge_heads(g: &mut Graph, x: Var, groups: usize, len: usize, h: usize, dh: usize) -> Result<Var> {
    if h == 1 {
        return Ok(x);
    }
    let x = g.tape.reshape(x, &[groups, h, len, dh])?;
    let x = g.tape.permute(x, &[0, 2, 1, 3])?;
    g.tape.reshape(x, &[groups, len, h * dh])
}

/// Hyperparameters of a single TSA layer.
#[derive(Clone, Copy, Debug)]
pub struct TsaShape {
    pub segments: usize,
    pub d_model: usize,
    pub heads: usize,
    pub routers: usize,
    pub mlp_hidden: usize,
}

/// Two-stage attention: per-channel self-attention over segments, then
/// router-mediated exchange between channels at each segment position.
#[derive(Clone, Debug)]
pub struct TsaLayer {
    pub tag: LayerTag,
    pub shape: TsaShape,
    time_attn: Msa,
    time_norm1: LayerNorm,
    time_mlp: Mlp,
    time_norm2: LayerNorm,
    /// `[segments, routers, d_model]`
    routers: ParamId,
    aggregate: Msa,
    distribute: Msa,
    dim_norm1: LayerNorm,
    dim_mlp: Mlp,
    dim_norm2: LayerNorm,
}

impl TsaLayer {
    pub fn new(init: &mut Init, name: &str, tag: LayerTag, shape: TsaShape) -> Result<Self> {
        if shape.routers == 0 {
            return Err(crate::Error::Config("router count must be at least 1".into()));
        }
        let dm = shape.d_model;
        Ok(TsaLayer {
            tag,
            shape,
            time_attn: Msa::new(init, &format!("{name}.time.attn"), dm, shape.heads)?,
            time_norm1: LayerNorm::new(init, &format!("{name}.time.norm1"), dm),
            time_mlp: Mlp::new(init, &format!("{name}.time.mlp"), dm, shape.mlp_hidden),
            time_norm2: LayerNorm::new(init, &format!("{name}.time.norm2"), dm),
            routers: init.gaussian(&format!("{name}.dim.routers"), &[shape.segments, shape.routers, dm], 0.02),
            aggregate: Msa::new(init, &format!("{name}.dim.aggregate"), dm, shape.heads)?,
            distribute: Msa::new(init, &format!("{name}.dim.distribute"), dm, shape.heads)?,
            dim_norm1: LayerNorm::new(init, &format!("{name}.dim.norm1"), dm),
            dim_mlp: Mlp::new(init, &format!("{name}.dim.mlp"), dm, shape.mlp_hidden),
            dim_norm2: LayerNorm::new(init, &format!("{name}.dim.norm2"), dm),
        })
    }

    fn check(&self, g: &Graph, z: Var) -> Result<[usize; 4]> {
        let s = g.tape.shape(z);
        if s.len() != 4 || s[1] != self.shape.segments || s[3] != self.shape.d_model {
            return Err(dim_err!(
                "tsa layer expects [batch, {}, channels, {}], got {s:?}",
                self.shape.segments,
                self.shape.d_model
            ));
        }
        Ok([s[0], s[1], s[2], s[3]])
    }

    /// Self-attention across segments, independently per channel.
    pub fn cross_time_stage(&self, g: &mut Graph, z: Var) -> Result<Var> {
        let [b, l, d, dm] = self.check(g, z)?;
        let per_channel = if d == 1 {
            g.tape.reshape(z, &[b, l, dm])?
        } else {
            let t = g.tape.permute(z, &[0, 2, 1, 3])?;
            g.tape.reshape(t, &[b * d, l, dm])?
        };
        let attn = self.time_attn.forward(g, per_channel, per_channel, per_channel, self.tag, Stage::Time)?;
        let x = residual_norm(g, &self.time_norm1, per_channel, attn)?;
        let ff = self.time_mlp.forward(g, x)?;
        let x = residual_norm(g, &self.time_norm2, x, ff)?;
        if d == 1 {
            g.tape.reshape(x, &[b, l, 1, dm])
        } else {
            let x = g.tape.reshape(x, &[b, d, l, dm])?;
            g.tape.permute(x, &[0, 2, 1, 3])
        }
    }

    /// Router exchange across channels, independently per segment position.
    pub fn cross_dimension_stage(&self, g: &mut Graph, z: Var) -> Result<Var> {
        let [b, l, d, dm] = self.check(g, z)?;
        let c = self.shape.routers;
        let per_step = g.tape.reshape(z, &[b * l, d, dm])?;
        let routers = g.param(self.routers);
        let routers = if b == 1 { routers } else { g.tape.tile(routers, b)? };
        let routers = g.tape.reshape(routers, &[b * l, c, dm])?;

        let gathered = self.aggregate.forward(g, routers, per_step, per_step, self.tag, Stage::RouterAggregate)?;
        let received = self.distribute.forward(g, per_step, gathered, gathered, self.tag, Stage::RouterDistribute)?;
        let x = residual_norm(g, &self.dim_norm1, per_step, received)?;
        let ff = self.dim_mlp.forward(g, x)?;
        let x = residual_norm(g, &self.dim_norm2, x, ff)?;
        g.tape.reshape(x, &[b, l, d, dm])
    }

    pub fn forward(&self, g: &mut Graph, z: Var) -> Result<Var> {
        let z_time = self.cross_time_stage(g, z)?;
        self.cross_dimension_stage(g, z_time)
    }
}
