//! Dimension-segment-wise embedding.
//!
//! A `[batch, T, D]` window is cut into `T / seg_len` non-overlapping
//! segments per channel; each segment is projected to `d_model` and offset
//! by a learnable position vector indexed by (segment, channel).

use crate::error::{dim_err, Result};
use crate::nn::{Graph, Init, ParamId};
use crate::tensor::Var;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DswConfig {
    pub seg_len: usize,
    pub d_model: usize,
    pub input_len: usize,
    pub channels: usize,
}

impl DswConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seg_len == 0 || self.d_model == 0 || self.channels == 0 {
            return Err(dim_err!("seg_len, d_model and channel count must be positive"));
        }
        if self.input_len == 0 || !self.input_len.is_multiple_of(self.seg_len) {
            return Err(dim_err!(
                "input length {} is not a multiple of segment length {}; pad the window or choose input_len = k * {}",
                self.input_len,
                self.seg_len,
                self.seg_len
            ));
        }
        Ok(())
    }

    pub fn segments(&self) -> usize {
        self.input_len / self.seg_len
    }
}

/// Learnable projection `E [d_model, seg_len]` and position table
/// `E_pos [segments, channels, d_model]`.
#[derive(Clone, Debug)]
pub struct DswEmbedding {
    pub config: DswConfig,
    pub projection: ParamId,
    pub position: ParamId,
}

impl DswEmbedding {
    pub fn new(init: &mut Init, cfg: DswConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(DswEmbedding {
            config: cfg,
            projection: init.xavier("embed.projection", cfg.d_model, cfg.seg_len),
            position: init.gaussian("embed.position", &[cfg.segments(), cfg.channels, cfg.d_model], 0.02),
        })
    }

    /// `[batch, segments, channels, d_model]` embedding of `x [batch, T, D]`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let segs = segment(g, x, self.config.seg_len)?;
        self.embed(g, segs)
    }

    /// Applies `E · x_seg + E_pos[i, d]` to segments `[batch, L, D, seg_len]`.
    pub fn embed(&self, g: &mut Graph, segments: Var) -> Result<Var> {
        let cfg = self.config;
        let s = g.tape.shape(segments);
        if s.len() != 4 || s[1] != cfg.segments() || s[2] != cfg.channels || s[3] != cfg.seg_len {
            return Err(dim_err!(
                "embed expects [batch, {}, {}, {}], got {s:?}",
                cfg.segments(),
                cfg.channels,
                cfg.seg_len
            ));
        }
        let e = g.param(self.projection);
        let pos = g.param(self.position);
        let h = g.tape.linear(segments, e)?;
        g.tape.add(h, pos)
    }
}

/// Cuts `x [batch, T, D]` into `[batch, T / seg_len, D, seg_len]`; segment
/// `(i, d)` holds rows `i*seg_len .. (i+1)*seg_len` of channel `d`.
pub fn segment(g: &mut Graph, x: Var, seg_len: usize) -> Result<Var> {
    let s = g.tape.shape(x).to_vec();
    if s.len() != 3 {
        return Err(dim_err!("segment expects [batch, T, D], got {s:?}"));
    }
    let (b, t, d) = (s[0], s[1], s[2]);
    if seg_len == 0 || t % seg_len != 0 {
        return Err(dim_err!(
            "window length {t} is not a multiple of segment length {seg_len}; pad the window or change the input length"
        ));
    }
    let l = t / seg_len;
    let x = g.tape.reshape(x, &[b, l, seg_len, d])?;
    g.tape.permute(x, &[0, 1, 3, 2])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(t: usize, d: usize, seg: usize, dm: usize) -> (DswEmbedding, ParamStore) {
        let mut init = Init::new(5);
        let cfg = DswConfig { seg_len: seg, d_model: dm, input_len: t, channels: d };
        let e = DswEmbedding::new(&mut init, cfg).unwrap();
        (e, init.store)
    }

    #[test]
    fn segment_counts() {
        let store = ParamStore::new();
        let mut g = Graph::inference(&store);
        let x = g.input(Tensor::zeros(&[1, 24, 10]));
        let s = segment(&mut g, x, 12).unwrap();
        assert_eq!(g.tape.shape(s), &[1, 2, 10, 12]);

        let x = g.input(Tensor::zeros(&[1, 96, 10]));
        let s = segment(&mut g, x, 12).unwrap();
        assert_eq!(g.tape.shape(s)[1], 8);

        let x = g.input(Tensor::zeros(&[1, 13, 10]));
        let err = segment(&mut g, x, 12).unwrap_err();
        assert!(err.to_string().contains("pad"));
    }

    #[test]
    fn segments_are_a_disjoint_cover() {
        let store = ParamStore::new();
        let mut g = Graph::inference(&store);
        let (t, d, seg) = (6, 2, 3);
        let x = g.input(Tensor::from_fn(&[1, t, d], |i| i as f64));
        let s = segment(&mut g, x, seg).unwrap();
        let v = g.tape.value(s);
        for i in 0..t / seg {
            for ch in 0..d {
                for k in 0..seg {
                    assert_eq!(v.get(&[0, i, ch, k]), ((i * seg + k) * d + ch) as f64);
                }
            }
        }
    }

    #[test]
    fn zero_projection_yields_position_table() {
        let (emb, mut store) = model(8, 3, 4, 5);
        store.set(emb.projection, Tensor::zeros(&[5, 4])).unwrap();
        let pos = store.get(emb.position).clone();
        let mut g = Graph::inference(&store);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = g.input(Tensor::uniform(&[1, 8, 3], -1.0, 1.0, &mut rng));
        let h = emb.forward(&mut g, x).unwrap();
        assert_eq!(g.tape.value(h).data(), pos.data());
    }

    #[test]
    fn basis_segment_selects_projection_column() {
        let (emb, mut store) = model(4, 1, 4, 3);
        store.set(emb.position, Tensor::zeros(&[1, 1, 3])).unwrap();
        let e = store.get(emb.projection).clone();
        for k in 0..4 {
            let mut g = Graph::inference(&store);
            let x = g.input(Tensor::from_fn(&[1, 4, 1], |i| if i == k { 1.0 } else { 0.0 }));
            let h = emb.forward(&mut g, x).unwrap();
            let col: Vec<f64> = (0..3).map(|r| e.get(&[r, k])).collect();
            assert_eq!(g.tape.value(h).data(), col.as_slice());
        }
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = DswConfig { seg_len: 12, d_model: 8, input_len: 13, channels: 2 };
        assert!(cfg.validate().is_err());
    }
}
