//! Upsampling output heads, frame-level losses and head parameter sharing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Criterion, Graph, Var};
use crate::layers::Linear;
use crate::params::{Init, ParamId, ParamSink, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub num_labels: usize,
    /// 1-based block indices whose outputs feed intermediate heads.
    pub intermediate_positions: Vec<usize>,
    pub intermediate_loss: bool,
    /// Loss weight per intermediate head, aligned with the positions.
    pub intermediate_scales: Vec<f64>,
    pub mlp_dim: usize,
    pub share_transposed_conv: bool,
    pub share_mlp: bool,
    pub focal_loss: bool,
    pub focal_gamma: f64,
    /// Must equal the front-end downsampling factor when given.
    pub upsample_factor: Option<usize>,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            num_labels: 9001,
            intermediate_positions: vec![4, 8],
            intermediate_loss: true,
            intermediate_scales: vec![0.3, 0.3],
            mlp_dim: 512,
            share_transposed_conv: true,
            share_mlp: false,
            focal_loss: true,
            focal_gamma: 2.0,
            upsample_factor: None,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self, num_blocks: usize, downsample_factor: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_labels < 2 || self.mlp_dim == 0 {
            return bad("num_labels must be >= 2 and mlp_dim positive".into());
        }
        if let Some(f) = self.upsample_factor {
            if f != downsample_factor {
                return bad(format!(
                    "upsample_factor {f} differs from downsample_factor {downsample_factor}"
                ));
            }
        }
        if self.intermediate_loss {
            if self.intermediate_scales.len() != self.intermediate_positions.len() {
                return bad(format!(
                    "{} intermediate positions but {} scales",
                    self.intermediate_positions.len(),
                    self.intermediate_scales.len()
                ));
            }
            if let Some(&p) = self
                .intermediate_positions
                .iter()
                .find(|&&p| p == 0 || p >= num_blocks)
            {
                return bad(format!(
                    "intermediate position {p} must lie in 1..{num_blocks}"
                ));
            }
            if self.intermediate_scales.iter().any(|&s| !(s >= 0.0)) {
                return bad("intermediate scales must be >= 0".into());
            }
        }
        if !(self.focal_gamma >= 0.0) {
            return bad(format!("focal_gamma must be >= 0, got {}", self.focal_gamma));
        }
        Ok(())
    }

    pub fn criterion(&self) -> Criterion {
        if self.focal_loss {
            Criterion::Focal {
                gamma: self.focal_gamma,
            }
        } else {
            Criterion::CrossEntropy
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadId {
    Final,
    /// Taps the output of this 1-based block.
    Intermediate(usize),
}

/// Transposed convolution back to frame rate, crop, optional MLP, label layer.
#[derive(Clone, Debug)]
pub struct Head {
    pub id: HeadId,
    pub tconv_weight: ParamId,
    pub tconv_bias: ParamId,
    pub mlp: Option<Linear>,
    pub output: Linear,
    factor: usize,
}

impl Head {
    /// `block_out: [B, T', D]` → logits `[B, frames, labels]`.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, block_out: Var, frames: usize) -> Result<Var> {
        let t_down = g.shape(block_out)[1];
        if t_down * self.factor < frames {
            return Err(Error::Shape {
                op: "head",
                detail: format!(
                    "{t_down} frames upsampled by {} cannot cover {frames}",
                    self.factor
                ),
            });
        }
        let w = g.param(store, self.tconv_weight);
        let b = g.param(store, self.tconv_bias);
        let x = g.transposed_conv1d(block_out, w, self.factor)?;
        let x = g.add_bias(x, b)?;
        // excess frames come off the right end
        let mut x = g.crop_time(x, frames)?;
        if let Some(mlp) = &self.mlp {
            x = mlp.forward(g, store, x)?;
            x = g.swish(x);
        }
        self.output.forward(g, store, x)
    }
}

#[derive(Clone, Debug)]
pub struct HeadSet {
    pub final_head: Head,
    /// With their loss scales.
    pub intermediate: Vec<(Head, f64)>,
}

impl HeadSet {
    pub fn all(&self) -> impl Iterator<Item = &Head> {
        std::iter::once(&self.final_head).chain(self.intermediate.iter().map(|(h, _)| h))
    }

    /// Distinct transposed-convolution kernels (the weight-decayed set).
    pub fn transposed_conv_kernels(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.all().map(|h| h.tconv_weight).collect();
        ids.sort();
        ids.dedup();
        ids
    }
}

/// Declares the heads, pointing shared heads at the same parameter names.
///
/// With `share_transposed_conv` every head uses one kernel; with `share_mlp`
/// the intermediate heads use one MLP. Gradients from all users accumulate
/// into the shared tensors.
pub fn wire_sharing(sink: &mut impl ParamSink, cfg: &HeadConfig, model_dim: usize, factor: usize) -> Result<HeadSet> {
    let mut head = |id: HeadId| -> Result<Head> {
        let own = match id {
            HeadId::Final => "heads.final".to_string(),
            HeadId::Intermediate(p) => format!("heads.block{p}"),
        };
        let tconv = if cfg.share_transposed_conv {
            "heads.shared.tconv".to_string()
        } else {
            format!("{own}.tconv")
        };
        let mlp = match id {
            HeadId::Final => None,
            HeadId::Intermediate(_) => {
                let name = if cfg.share_mlp {
                    "heads.shared.mlp".to_string()
                } else {
                    format!("{own}.mlp")
                };
                Some(Linear::declare(sink, &name, model_dim, cfg.mlp_dim)?)
            }
        };
        let out_dim = if mlp.is_some() { cfg.mlp_dim } else { model_dim };
        Ok(Head {
            id,
            tconv_weight: sink.declare(
                &format!("{tconv}.weight"),
                &[factor, model_dim, model_dim],
                Init::glorot(model_dim, model_dim),
            )?,
            tconv_bias: sink.declare(&format!("{tconv}.bias"), &[model_dim], Init::Zeros)?,
            mlp,
            output: Linear::declare(sink, &format!("{own}.output"), out_dim, cfg.num_labels)?,
            factor,
        })
    };
    let final_head = head(HeadId::Final)?;
    let intermediate = if cfg.intermediate_loss {
        cfg.intermediate_positions
            .iter()
            .zip(&cfg.intermediate_scales)
            .map(|(&p, &s)| Ok((head(HeadId::Intermediate(p))?, s)))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    Ok(HeadSet {
        final_head,
        intermediate,
    })
}

fn valid_frames(valid: &[bool]) -> usize {
    valid.iter().filter(|&&v| v).count()
}

fn mean_loss<S: Scalar>(g: &mut Graph<S>, logits: Var, targets: &[usize], valid: &[bool], criterion: Criterion) -> Result<Var> {
    let n = valid_frames(valid);
    if n == 0 {
        return Err(Error::EmptyInput("loss over zero valid frames"));
    }
    let sum = g.frame_loss(logits, targets, valid, criterion)?;
    Ok(g.scale(sum, S::of(1.0 / n as f64)))
}

/// Mean `-log p(target)` over valid frames.
pub fn cross_entropy<S: Scalar>(g: &mut Graph<S>, logits: Var, targets: &[usize], valid: &[bool]) -> Result<Var> {
    mean_loss(g, logits, targets, valid, Criterion::CrossEntropy)
}

/// Mean `-(1 - p)^γ log p` over valid frames.
pub fn focal_loss<S: Scalar>(g: &mut Graph<S>, logits: Var, targets: &[usize], valid: &[bool], gamma: f64) -> Result<Var> {
    mean_loss(g, logits, targets, valid, Criterion::Focal { gamma })
}

pub fn criterion_loss<S: Scalar>(
    g: &mut Graph<S>,
    logits: Var,
    targets: &[usize],
    valid: &[bool],
    criterion: Criterion,
) -> Result<Var> {
    mean_loss(g, logits, targets, valid, criterion)
}

/// `final + Σ scale_h · intermediate_h`
pub fn total_loss<S: Scalar>(g: &mut Graph<S>, final_loss: Var, intermediate: &[(Var, f64)]) -> Result<Var> {
    let mut total = final_loss;
    for &(l, scale) in intermediate {
        let w = g.scale(l, S::of(scale));
        total = g.add(total, w)?;
    }
    Ok(total)
}

/// Cross-entropy sum, correct count and frame count over valid frames.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FrameStats {
    pub ce_sum: f64,
    pub correct: usize,
    pub frames: usize,
}

impl FrameStats {
    pub fn merge(&mut self, other: FrameStats) {
        self.ce_sum += other.ce_sum;
        self.correct += other.correct;
        self.frames += other.frames;
    }

    pub fn ce(&self) -> f64 {
        self.ce_sum / self.frames.max(1) as f64
    }

    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.frames.max(1) as f64
    }

    pub fn frame_error_rate(&self) -> f64 {
        1.0 - self.accuracy()
    }
}

pub fn frame_stats<S: Scalar>(logits: &Tensor<S>, targets: &[usize], valid: &[bool]) -> FrameStats {
    let v = logits.dim(-1);
    let mut stats = FrameStats::default();
    for (r, row) in logits.data().chunks(v).enumerate() {
        if !valid[r] {
            continue;
        }
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<S>().ln();
        stats.ce_sum += (lse - row[targets[r]]).to_f64_lossless();
        // first maximum wins ties
        let argmax = row
            .iter()
            .enumerate()
            .fold(0, |best, (j, &x)| if x > row[best] { j } else { best });
        stats.correct += usize::from(argmax == targets[r]);
        stats.frames += 1;
    }
    stats
}
