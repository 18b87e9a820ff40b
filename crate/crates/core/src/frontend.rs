//! Convolutional front-end that also performs time downsampling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ceil_div, lengths_mask, Graph, Var};
use crate::layers::Linear;
use crate::params::{Init, ParamId, ParamSink, ParamStore};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrontendVariant {
    /// Strided convolution inside the VGG stack.
    Vgg,
    /// Unstrided VGG, then one BLSTM layer and a time max-pool.
    BlstmMaxpool,
}

/// Which VGG convolution carries the time stride.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DownsampleLayer {
    Layer2,
    Layer4,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrontendConfig {
    pub variant: FrontendVariant,
    pub conv_filters: Vec<usize>,
    pub kernel: usize,
    pub downsample_factor: usize,
    pub downsample_layer: DownsampleLayer,
    /// Units per direction of the BLSTM variant.
    pub blstm_units: usize,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            variant: FrontendVariant::Vgg,
            conv_filters: vec![32, 64, 64, 32],
            kernel: 3,
            downsample_factor: 3,
            downsample_layer: DownsampleLayer::Layer4,
            blstm_units: 512,
        }
    }
}

impl FrontendConfig {
    pub fn validate(&self) -> Result<()> {
        if self.conv_filters.len() != 4 || self.conv_filters.contains(&0) {
            return Err(Error::Config(format!(
                "conv_filters needs four positive entries, got {:?}",
                self.conv_filters
            )));
        }
        if self.kernel == 0 || self.downsample_factor == 0 || self.blstm_units == 0 {
            return Err(Error::Config(
                "kernel, downsample_factor and blstm_units must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Time stride of VGG layer `layer` (0-based).
    fn conv_stride(&self, layer: usize) -> usize {
        let strided = match (self.variant, self.downsample_layer) {
            (FrontendVariant::BlstmMaxpool, _) => None,
            (FrontendVariant::Vgg, DownsampleLayer::Layer2) => Some(1),
            (FrontendVariant::Vgg, DownsampleLayer::Layer4) => Some(3),
        };
        if strided == Some(layer) {
            self.downsample_factor
        } else {
            1
        }
    }
}

/// Output length of the front-end for an input of `t` frames.
pub fn output_frames(t: usize, factor: usize) -> usize {
    ceil_div(t, factor)
}

#[derive(Clone, Debug)]
struct Conv {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
struct Direction {
    input: Linear,
    recurrent: ParamId,
}

#[derive(Clone, Debug)]
pub struct Frontend {
    cfg: FrontendConfig,
    feature_dim: usize,
    convs: Vec<Conv>,
    blstm: Option<[Direction; 2]>,
    projection: Linear,
}

impl Frontend {
    pub fn declare(sink: &mut impl ParamSink, cfg: &FrontendConfig, feature_dim: usize, model_dim: usize) -> Result<Self> {
        cfg.validate()?;
        let k = cfg.kernel;
        let mut convs = Vec::new();
        let mut cin = 1;
        for (i, &cout) in cfg.conv_filters.iter().enumerate() {
            let name = format!("frontend.conv{}", i + 1);
            convs.push(Conv {
                weight: sink.declare(
                    &format!("{name}.weight"),
                    &[k, k, cin, cout],
                    Init::glorot(k * k * cin, k * k * cout),
                )?,
                bias: sink.declare(&format!("{name}.bias"), &[cout], Init::Zeros)?,
            });
            cin = cout;
        }
        let mut width = output_frames(feature_dim, 2) * cin;
        let blstm = match cfg.variant {
            FrontendVariant::Vgg => None,
            FrontendVariant::BlstmMaxpool => {
                let h = cfg.blstm_units;
                let mut dir = |name: &str| -> Result<Direction> {
                    Ok(Direction {
                        input: Linear::declare(sink, &format!("frontend.blstm.{name}.input"), width, 4 * h)?,
                        recurrent: sink.declare(
                            &format!("frontend.blstm.{name}.recurrent"),
                            &[h, 4 * h],
                            Init::glorot(h, 4 * h),
                        )?,
                    })
                };
                let dirs = [dir("fwd")?, dir("bwd")?];
                width = 2 * h;
                Some(dirs)
            }
        };
        let projection = Linear::declare(sink, "frontend.projection", width, model_dim)?;
        Ok(Self {
            cfg: cfg.clone(),
            feature_dim,
            convs,
            blstm,
            projection,
        })
    }

    pub fn config(&self) -> &FrontendConfig {
        &self.cfg
    }

    /// `features: [B, T, F]` → `([B, ceil(T/factor), D], downsampled lengths)`.
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        features: Var,
        lengths: &[usize],
    ) -> Result<(Var, Vec<usize>)> {
        let shape = g.shape(features).to_vec();
        if shape.len() != 3 || shape[2] != self.feature_dim {
            return Err(Error::Shape {
                op: "frontend",
                detail: format!("expected [B, T, {}], got {shape:?}", self.feature_dim),
            });
        }
        if shape[1] == 0 {
            return Err(Error::EmptyInput("frontend"));
        }
        let (b, t, f) = (shape[0], shape[1], shape[2]);
        let mut lengths = lengths.to_vec();
        let mut x = g.reshape(features, [b, t, f, 1])?;
        for (i, conv) in self.convs.iter().enumerate() {
            let stride = self.cfg.conv_stride(i);
            // zero padding frames so they act like the convolution's own padding
            x = g.mask_frames(x, &lengths_mask(&lengths, g.shape(x)[1]))?;
            let w = g.param(store, conv.weight);
            let bias = g.param(store, conv.bias);
            x = g.conv2d(x, w, stride)?;
            x = g.add_bias(x, bias)?;
            lengths.iter_mut().for_each(|l| *l = ceil_div(*l, stride));
            if i + 1 < self.convs.len() {
                x = g.swish(x);
            }
            if i == 0 {
                x = g.max_pool_feature(x)?;
            }
        }
        let s = g.shape(x).to_vec();
        x = g.reshape(x, [s[0], s[1], s[2] * s[3]])?;
        if let Some(dirs) = &self.blstm {
            x = g.mask_frames(x, &lengths_mask(&lengths, g.shape(x)[1]))?;
            let mut outs = Vec::with_capacity(2);
            for (dir, reverse) in dirs.iter().zip([false, true]) {
                let gx = dir.input.forward(g, store, x)?;
                let u = g.param(store, dir.recurrent);
                outs.push(g.lstm(gx, u, &lengths, reverse)?);
            }
            x = g.concat_last(outs[0], outs[1])?;
            let factor = self.cfg.downsample_factor;
            x = g.time_max_pool(x, &lengths, factor)?;
            lengths.iter_mut().for_each(|l| *l = ceil_div(*l, factor));
        }
        x = self.projection.forward(g, store, x)?;
        x = g.mask_frames(x, &lengths_mask(&lengths, g.shape(x)[1]))?;
        Ok((x, lengths))
    }
}
