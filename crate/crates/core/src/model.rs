//! Full acoustic model: front-end → conformer stack → output heads.

use serde::{Deserialize, Serialize};

use crate::conformer::{BlockConfig, ConformerStack};
use crate::corpus::Batch;
use crate::error::Result;
use crate::frontend::{Frontend, FrontendConfig};
use crate::graph::{lengths_mask, Graph, Var};
use crate::heads::{criterion_loss, total_loss, wire_sharing, HeadConfig, HeadSet};
use crate::params::{Census, ParamId, ParamSink, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub frontend: FrontendConfig,
    pub blocks: BlockConfig,
    pub heads: HeadConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_dim: 40,
            frontend: FrontendConfig::default(),
            blocks: BlockConfig::default(),
            heads: HeadConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.frontend.validate()?;
        self.blocks.validate()?;
        self.heads
            .validate(self.blocks.num_blocks, self.frontend.downsample_factor)
    }
}

/// Padded batch in the model's scalar type.
#[derive(Clone, Debug)]
pub struct ModelInput<S: Scalar> {
    /// `[B, T, F]`
    pub features: Tensor<S>,
    pub lengths: Vec<usize>,
    /// `B * T` labels.
    pub targets: Vec<usize>,
    /// `B * T`, true on real frames.
    pub valid: Vec<bool>,
}

impl<S: Scalar> ModelInput<S> {
    pub fn from_batch(batch: &Batch<'_>) -> Self {
        let f = &batch.padded_features;
        Self {
            features: Tensor::new(f.shape().to_vec(), f.data().iter().map(|&x| S::of(x)).collect())
                .expect("same shape"),
            lengths: batch.lengths(),
            targets: batch.padded_alignment.clone(),
            valid: batch.frame_mask.clone(),
        }
    }

    pub fn frames(&self) -> usize {
        self.features.dim(1)
    }
}

pub struct ModelOutput {
    pub frontend: Var,
    pub blocks: Vec<Var>,
    pub final_logits: Var,
    /// Logits and loss scale per intermediate head.
    pub intermediate_logits: Vec<(Var, f64)>,
}

pub struct LossOutput {
    pub total: Var,
    pub final_loss: Var,
    pub intermediate_losses: Vec<Var>,
    pub output: ModelOutput,
}

#[derive(Clone, Debug)]
pub struct AcousticModel {
    cfg: ModelConfig,
    pub frontend: Frontend,
    pub stack: ConformerStack,
    pub heads: HeadSet,
}

impl AcousticModel {
    pub fn declare(sink: &mut impl ParamSink, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.blocks.model_dim;
        let frontend = Frontend::declare(sink, &cfg.frontend, cfg.feature_dim, d)?;
        let stack = ConformerStack::declare(sink, &cfg.blocks)?;
        let heads = wire_sharing(sink, &cfg.heads, d, cfg.frontend.downsample_factor)?;
        Ok(Self {
            cfg: cfg.clone(),
            frontend,
            stack,
            heads,
        })
    }

    /// Parameter shapes for `cfg` without allocating any values.
    pub fn census(cfg: &ModelConfig) -> Result<Census> {
        let mut census = Census::default();
        Self::declare(&mut census, cfg)?;
        Ok(census)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Parameters subject to weight decay: the transposed-convolution kernels.
    pub fn weight_decay_params(&self) -> Vec<ParamId> {
        self.heads.transposed_conv_kernels()
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, input: &ModelInput<S>) -> Result<ModelOutput> {
        let frames = input.frames();
        let x = g.constant(input.features.clone());
        let (fe, lengths) = self.frontend.forward(g, store, x, &input.lengths)?;
        let fe = g.dropout(fe, self.cfg.blocks.embedding_dropout)?;
        let valid = lengths_mask(&lengths, g.shape(fe)[1]);
        let blocks = self.stack.forward(g, store, fe, &valid)?;
        let last = *blocks.last().expect("at least one block");
        let final_logits = self.heads.final_head.forward(g, store, last, frames)?;
        let mut intermediate_logits = Vec::with_capacity(self.heads.intermediate.len());
        for (head, scale) in &self.heads.intermediate {
            let crate::heads::HeadId::Intermediate(p) = head.id else {
                unreachable!("intermediate heads carry a block index")
            };
            let logits = head.forward(g, store, blocks[p - 1], frames)?;
            intermediate_logits.push((logits, *scale));
        }
        Ok(ModelOutput {
            frontend: fe,
            blocks,
            final_logits,
            intermediate_logits,
        })
    }

    /// Training objective: criterion on the final head plus scaled
    /// intermediate losses, each a mean over valid frames.
    pub fn loss<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, input: &ModelInput<S>) -> Result<LossOutput> {
        let output = self.forward(g, store, input)?;
        let criterion = self.cfg.heads.criterion();
        let final_loss = criterion_loss(g, output.final_logits, &input.targets, &input.valid, criterion)?;
        let mut scaled = Vec::new();
        for &(logits, scale) in &output.intermediate_logits {
            let l = criterion_loss(g, logits, &input.targets, &input.valid, criterion)?;
            scaled.push((l, scale));
        }
        let total = total_loss(g, final_loss, &scaled)?;
        Ok(LossOutput {
            total,
            final_loss,
            intermediate_losses: scaled.into_iter().map(|(l, _)| l).collect(),
            output,
        })
    }
}
