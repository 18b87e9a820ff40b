//! Conformer blocks: half-step feed-forward, relative-position self-attention,
//! convolution module, second half-step feed-forward, final layer norm.
//!
//! Every module takes a `valid` frame mask (`B * T`). Invalid frames are never
//! attended to and are zeroed before the depthwise convolution, so their
//! contents cannot reach valid frames.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{LayerNorm, Linear};
use crate::params::{Init, ParamId, ParamSink, ParamStore};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlockConfig {
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub depthwise_kernel: usize,
    pub num_blocks: usize,
    /// Dropout inside every conformer module.
    pub dropout: f64,
    pub attention_dropout: f64,
    /// Dropout on the front-end output.
    pub embedding_dropout: f64,
    pub long_skip: bool,
    /// Relative distances beyond this share one embedding.
    pub rel_pos_clamp: usize,
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self {
            model_dim: 512,
            heads: 8,
            ffn_dim: 2048,
            depthwise_kernel: 8,
            num_blocks: 12,
            dropout: 0.1,
            attention_dropout: 0.1,
            embedding_dropout: 0.1,
            long_skip: true,
            rel_pos_clamp: 64,
        }
    }
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.heads == 0 || self.model_dim == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return bad(format!(
                "model_dim {} must be a positive multiple of heads {}",
                self.model_dim, self.heads
            ));
        }
        if self.depthwise_kernel == 0 || self.num_blocks == 0 || self.ffn_dim == 0 {
            return bad("depthwise_kernel, num_blocks and ffn_dim must be positive".into());
        }
        for (name, p) in [
            ("dropout", self.dropout),
            ("attention_dropout", self.attention_dropout),
            ("embedding_dropout", self.embedding_dropout),
        ] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1), got {p}"));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }
}

/// `x + ½·FFN(x)` with FFN = LN → Linear → Swish → Dropout → Linear → Dropout.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub norm: LayerNorm,
    pub inner: Linear,
    pub outer: Linear,
    dropout: f64,
}

impl FeedForward {
    pub fn declare(sink: &mut impl ParamSink, name: &str, cfg: &BlockConfig) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::declare(sink, &format!("{name}.norm"), cfg.model_dim)?,
            inner: Linear::declare(sink, &format!("{name}.inner"), cfg.model_dim, cfg.ffn_dim)?,
            outer: Linear::declare(sink, &format!("{name}.outer"), cfg.ffn_dim, cfg.model_dim)?,
            dropout: cfg.dropout,
        })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let h = self.norm.forward(g, store, x)?;
        let h = self.inner.forward(g, store, h)?;
        let h = g.swish(h);
        let h = g.dropout(h, self.dropout)?;
        let h = self.outer.forward(g, store, h)?;
        let h = g.dropout(h, self.dropout)?;
        let h = g.scale(h, S::of(0.5));
        g.add(x, h)
    }
}

/// Multi-head self-attention with learned relative-position key embeddings:
/// the logit for query `i` and key `j` is `q_i · (k_j + r_{clamp(j-i)}) / √d`.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub norm: LayerNorm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    /// `[head_dim, 2·clamp + 1]`, one column per relative distance.
    pub rel_pos: ParamId,
    pub output: Linear,
    heads: usize,
    clamp: usize,
    dropout: f64,
    attention_dropout: f64,
}

impl SelfAttention {
    pub fn declare(sink: &mut impl ParamSink, name: &str, cfg: &BlockConfig) -> Result<Self> {
        let d = cfg.model_dim;
        let r = 2 * cfg.rel_pos_clamp + 1;
        Ok(Self {
            norm: LayerNorm::declare(sink, &format!("{name}.norm"), d)?,
            query: Linear::declare(sink, &format!("{name}.query"), d, d)?,
            key: Linear::declare(sink, &format!("{name}.key"), d, d)?,
            value: Linear::declare(sink, &format!("{name}.value"), d, d)?,
            rel_pos: sink.declare(
                &format!("{name}.rel_pos"),
                &[cfg.head_dim(), r],
                Init::glorot(cfg.head_dim(), r),
            )?,
            output: Linear::declare(sink, &format!("{name}.output"), d, d)?,
            heads: cfg.heads,
            clamp: cfg.rel_pos_clamp,
            dropout: cfg.dropout,
            attention_dropout: cfg.attention_dropout,
        })
    }

    /// Attention weights `[B, H, T, T]`, before attention dropout.
    pub fn weights<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var, valid: &[bool]) -> Result<(Var, Var)> {
        let s = g.shape(x).to_vec();
        let (b, t, d) = (s[0], s[1], s[2]);
        let (h, dh) = (self.heads, d / self.heads);
        let n = self.norm.forward(g, store, x)?;
        let split = |g: &mut Graph<S>, lin: &Linear, perm: &[usize]| -> Result<Var> {
            let y = lin.forward(g, store, n)?;
            let y = g.reshape(y, [b, t, h, dh])?;
            g.permute(y, perm)
        };
        let q = split(g, &self.query, &[0, 2, 1, 3])?;
        let k_t = split(g, &self.key, &[0, 2, 3, 1])?;
        let v = split(g, &self.value, &[0, 2, 1, 3])?;
        let content = g.matmul(q, k_t)?;
        let rel_table = g.param(store, self.rel_pos);
        let rel = g.matmul(q, rel_table)?;
        let rel = g.rel_pos_gather(rel, self.clamp)?;
        let logits = g.add(content, rel)?;
        let logits = g.scale(logits, S::of(1.0 / (dh as f64).sqrt()));
        let attn = g.masked_softmax(logits, valid, h * t)?;
        Ok((attn, v))
    }

    /// `x + Dropout(Linear(Attention(LN(x))))`
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var, valid: &[bool]) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (b, t, d) = (s[0], s[1], s[2]);
        let (attn, v) = self.weights(g, store, x, valid)?;
        let attn = g.dropout(attn, self.attention_dropout)?;
        let ctx = g.matmul(attn, v)?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, [b, t, d])?;
        let y = self.output.forward(g, store, ctx)?;
        let y = g.dropout(y, self.dropout)?;
        g.add(x, y)
    }
}

/// `x + Conv(x)` with Conv = LN → Pointwise(D→2D) → GLU → Depthwise(k) → LN →
/// Swish → Pointwise(D→D) → Dropout.
#[derive(Clone, Debug)]
pub struct ConvModule {
    pub norm: LayerNorm,
    pub expand: Linear,
    pub depthwise: ParamId,
    pub depthwise_bias: ParamId,
    pub mid_norm: LayerNorm,
    pub project: Linear,
    dropout: f64,
}

impl ConvModule {
    pub fn declare(sink: &mut impl ParamSink, name: &str, cfg: &BlockConfig) -> Result<Self> {
        let d = cfg.model_dim;
        let k = cfg.depthwise_kernel;
        Ok(Self {
            norm: LayerNorm::declare(sink, &format!("{name}.norm"), d)?,
            expand: Linear::declare(sink, &format!("{name}.expand"), d, 2 * d)?,
            depthwise: sink.declare(&format!("{name}.depthwise.weight"), &[k, d], Init::glorot(k, k))?,
            depthwise_bias: sink.declare(&format!("{name}.depthwise.bias"), &[d], Init::Zeros)?,
            mid_norm: LayerNorm::declare(sink, &format!("{name}.mid_norm"), d)?,
            project: Linear::declare(sink, &format!("{name}.project"), d, d)?,
            dropout: cfg.dropout,
        })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var, valid: &[bool]) -> Result<Var> {
        let h = self.norm.forward(g, store, x)?;
        let h = self.expand.forward(g, store, h)?;
        let h = g.glu(h)?;
        let h = g.mask_frames(h, valid)?;
        let w = g.param(store, self.depthwise);
        let bias = g.param(store, self.depthwise_bias);
        let h = g.depthwise_conv1d(h, w)?;
        let h = g.add_bias(h, bias)?;
        let h = self.mid_norm.forward(g, store, h)?;
        let h = g.swish(h);
        let h = self.project.forward(g, store, h)?;
        let h = g.dropout(h, self.dropout)?;
        g.add(x, h)
    }
}

#[derive(Clone, Debug)]
pub struct ConformerBlock {
    pub ffn1: FeedForward,
    pub mhsa: SelfAttention,
    pub conv: ConvModule,
    pub ffn2: FeedForward,
    pub norm: LayerNorm,
    long_skip: bool,
}

impl ConformerBlock {
    pub fn declare(sink: &mut impl ParamSink, name: &str, cfg: &BlockConfig) -> Result<Self> {
        Ok(Self {
            ffn1: FeedForward::declare(sink, &format!("{name}.ffn1"), cfg)?,
            mhsa: SelfAttention::declare(sink, &format!("{name}.mhsa"), cfg)?,
            conv: ConvModule::declare(sink, &format!("{name}.conv"), cfg)?,
            ffn2: FeedForward::declare(sink, &format!("{name}.ffn2"), cfg)?,
            norm: LayerNorm::declare(sink, &format!("{name}.norm"), cfg.model_dim)?,
            long_skip: cfg.long_skip,
        })
    }

    /// `skip` is the projected front-end output; it is required exactly when
    /// the block was built with LongSkip.
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        x: Var,
        skip: Option<Var>,
        valid: &[bool],
    ) -> Result<Var> {
        let x = match (self.long_skip, skip) {
            (true, Some(s)) => g.add(x, s)?,
            (true, None) => {
                return Err(Error::Config(
                    "LongSkip is enabled but no front-end output was supplied".into(),
                ))
            }
            (false, _) => x,
        };
        let x = self.ffn1.forward(g, store, x)?;
        let x = self.mhsa.forward(g, store, x, valid)?;
        let x = self.conv.forward(g, store, x, valid)?;
        let x = self.ffn2.forward(g, store, x)?;
        self.norm.forward(g, store, x)
    }
}

/// `L` blocks plus the shared LongSkip projection.
#[derive(Clone, Debug)]
pub struct ConformerStack {
    pub blocks: Vec<ConformerBlock>,
    pub skip: Option<Linear>,
}

impl ConformerStack {
    pub fn declare(sink: &mut impl ParamSink, cfg: &BlockConfig) -> Result<Self> {
        cfg.validate()?;
        let skip = if cfg.long_skip {
            Some(Linear::declare(sink, "blocks.long_skip", cfg.model_dim, cfg.model_dim)?)
        } else {
            None
        };
        let blocks = (0..cfg.num_blocks)
            .map(|i| ConformerBlock::declare(sink, &format!("blocks.{}", i + 1), cfg))
            .collect::<Result<_>>()?;
        Ok(Self { blocks, skip })
    }

    /// Output of every block, in order.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var, valid: &[bool]) -> Result<Vec<Var>> {
        let skip = match &self.skip {
            Some(lin) => Some(lin.forward(g, store, x)?),
            None => None,
        };
        let mut outs = Vec::with_capacity(self.blocks.len());
        let mut h = x;
        for block in &self.blocks {
            h = block.forward(g, store, h, skip, valid)?;
            outs.push(h);
        }
        Ok(outs)
    }
}
