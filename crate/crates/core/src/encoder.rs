//! Transformer encoder over covariate tokens.
//!
//! Each of the `d` covariates becomes one token: its scalar value lifts a
//! learned per-feature value embedding, and a per-feature identity
//! embedding plays the role of a position encoding. Self-attention runs
//! within a unit's own tokens, never across units of a batch, so the
//! attention matrix is a feature-by-feature map. Blocks are post-norm:
//! `h = LN(h + MHA(h))`, `h = LN(h + FF(h))`. Token outputs are pooled
//! into one `d_model` vector per unit.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::Dense;
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Mean,
    ClsToken,
}

impl std::str::FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Pooling::Mean),
            "cls_token" | "cls" => Ok(Pooling::ClsToken),
            other => Err(Error::Config(format!("unknown pooling {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub n_blocks: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub pooling: Pooling,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            n_blocks: 2,
            n_heads: 2,
            d_model: 32,
            d_ff: 64,
            pooling: Pooling::Mean,
        }
    }
}

impl EncoderConfig {
    /// Key dimension per head.
    pub fn d_k(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return Err(Error::Config("encoder sizes must be >= 1".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ln1_gain: ParamId,
    pub ln1_shift: ParamId,
    pub ff1: Dense,
    pub ff2: Dense,
    pub ln2_gain: ParamId,
    pub ln2_shift: ParamId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub n_features: usize,
    pub value_emb: ParamId,
    pub id_emb: ParamId,
    pub cls: Option<ParamId>,
    pub blocks: Vec<Block>,
}

#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// `[n, d_model]` pooled embedding.
    pub embedding: Var,
    /// Attention weights `[n, s, s]` per block, then per head.
    pub attention: Vec<Vec<Var>>,
}

/// `softmax(Q K^T / sqrt(d_k)) V` for batched `Q, K [B,s,d_k]`, `V [B,s,d_v]`.
/// Returns the output `[B,s,d_v]` and the attention weights `[B,s,s]`.
pub fn attention(g: &mut Graph, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let dk = *g.shape(q).last().unwrap_or(&0);
    if dk == 0 {
        return Err(Error::shape("attention", g.shape(q), g.shape(k)));
    }
    let logits = g.bmm(q, k, true)?;
    let scaled = g.scale(logits, 1.0 / (dk as f64).sqrt());
    let weights = g.softmax(scaled);
    let out = g.bmm(weights, v, false)?;
    Ok((out, weights))
}

/// Single-sequence attention on plain `[s, d_k]` matrices.
pub fn attention_2d(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
    let lift = |t: &Tensor| -> Result<Tensor> {
        if t.rank() != 2 {
            return Err(Error::shape("attention", t.shape(), &[0, 0]));
        }
        t.reshaped(&[1, t.shape()[0], t.shape()[1]])
    };
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.constant(lift(q)?), g.constant(lift(k)?), g.constant(lift(v)?));
    let (out, w) = attention(&mut g, qv, kv, vv)?;
    let s = q.shape()[0];
    Ok((
        g.value(out).reshaped(&[s, v.shape()[1]])?,
        g.value(w).reshaped(&[s, k.shape()[0]])?,
    ))
}

impl Encoder {
    /// Registers all encoder parameters under the `enc.` prefix.
    pub fn new(
        store: &mut ParamStore,
        n_features: usize,
        config: EncoderConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let dm = config.d_model;
        let value_emb = store.add_glorot("enc.value_emb", n_features, dm, rng);
        let id_emb = store.add_glorot("enc.id_emb", n_features, dm, rng);
        let cls = match config.pooling {
            Pooling::ClsToken => {
                let t = store.add_glorot("enc.cls", 1, dm, rng);
                let p = store.get_mut(t);
                p.tensor = p.tensor.reshaped(&[dm])?;
                p.grad = Tensor::zeros(&[dm]);
                Some(t)
            }
            Pooling::Mean => None,
        };
        let blocks = (0..config.n_blocks)
            .map(|i| {
                let name = |s: &str| format!("enc.block{i}.{s}");
                Block {
                    wq: store.add_glorot(name("wq"), dm, dm, rng),
                    wk: store.add_glorot(name("wk"), dm, dm, rng),
                    wv: store.add_glorot(name("wv"), dm, dm, rng),
                    wo: store.add_glorot(name("wo"), dm, dm, rng),
                    ln1_gain: store.add(name("ln1.gain"), Tensor::full(&[dm], 1.0)),
                    ln1_shift: store.add_zeros(name("ln1.shift"), &[dm]),
                    ff1: Dense::new(store, &name("ff1"), dm, config.d_ff, rng),
                    ff2: Dense::new(store, &name("ff2"), config.d_ff, dm, rng),
                    ln2_gain: store.add(name("ln2.gain"), Tensor::full(&[dm], 1.0)),
                    ln2_shift: store.add_zeros(name("ln2.shift"), &[dm]),
                }
            })
            .collect();
        Ok(Encoder {
            config,
            n_features,
            value_emb,
            id_emb,
            cls,
            blocks,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.value_emb, self.id_emb];
        ids.extend(self.cls);
        for b in &self.blocks {
            ids.extend([b.wq, b.wk, b.wv, b.wo, b.ln1_gain, b.ln1_shift]);
            ids.extend(b.ff1.ids());
            ids.extend(b.ff2.ids());
            ids.extend([b.ln2_gain, b.ln2_shift]);
        }
        ids
    }

    /// Tokens per unit (`d`, plus one with a cls token).
    pub fn seq_len(&self) -> usize {
        self.n_features + usize::from(self.cls.is_some())
    }

    /// `[n, d]` covariates to `[n * seq_len, d_model]` tokens.
    pub fn tokenize(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let ve = g.param(store, self.value_emb);
        let ie = g.param(store, self.id_emb);
        let cls = self.cls.map(|c| g.param(store, c));
        g.tokenize(x, ve, ie, cls)
    }

    fn self_attention(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        block: &Block,
        h: Var,
        n: usize,
    ) -> Result<(Var, Vec<Var>)> {
        let s = self.seq_len();
        let dk = self.config.d_k();
        let wq = g.param(store, block.wq);
        let wk = g.param(store, block.wk);
        let wv = g.param(store, block.wv);
        let q = g.matmul(h, wq)?;
        let k = g.matmul(h, wk)?;
        let v = g.matmul(h, wv)?;
        let mut heads = Vec::with_capacity(self.config.n_heads);
        let mut maps = Vec::with_capacity(self.config.n_heads);
        for head in 0..self.config.n_heads {
            let mut split = |t: Var| -> Result<Var> {
                let cols = g.slice_cols(t, head * dk, dk)?;
                g.reshape(cols, &[n, s, dk])
            };
            let (qh, kh, vh) = (split(q)?, split(k)?, split(v)?);
            let (out, w) = attention(g, qh, kh, vh)?;
            heads.push(g.reshape(out, &[n * s, dk])?);
            maps.push(w);
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)?
        };
        let wo = g.param(store, block.wo);
        Ok((g.matmul(merged, wo)?, maps))
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<EncoderOutput> {
        let shape = g.shape(x);
        if shape.len() != 2 || shape[1] != self.n_features {
            return Err(Error::shape("encode", shape, &[self.n_features]));
        }
        let n = shape[0];
        let s = self.seq_len();
        let mut h = self.tokenize(g, store, x)?;
        let mut attention = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            let (att, maps) = self.self_attention(g, store, block, h, n)?;
            attention.push(maps);
            let res = g.add(h, att)?;
            let (g1, s1) = (g.param(store, block.ln1_gain), g.param(store, block.ln1_shift));
            h = g.layer_norm(res, g1, s1)?;
            let ff = block.ff1.forward(g, store, h)?;
            let ff = g.relu(ff);
            let ff = block.ff2.forward(g, store, ff)?;
            let res = g.add(h, ff)?;
            let (g2, s2) = (g.param(store, block.ln2_gain), g.param(store, block.ln2_shift));
            h = g.layer_norm(res, g2, s2)?;
            if !g.value(h).is_finite() {
                return Err(Error::Numeric(format!("non-finite activation in encoder block {i}")));
            }
        }
        let embedding = match self.config.pooling {
            Pooling::Mean => {
                let dm = self.config.d_model;
                let h3 = g.reshape(h, &[n, s, dm])?;
                g.mean_axis1(h3)?
            }
            Pooling::ClsToken => {
                let rows: Vec<usize> = (0..n).map(|i| i * s).collect();
                g.select_rows(h, &rows)?
            }
        };
        Ok(EncoderOutput {
            embedding,
            attention,
        })
    }

    /// Forward-only embedding of a plain `[n, d]` covariate matrix.
    pub fn encode(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, store, xv)?;
        Ok(g.value(out.embedding).clone())
    }
}
