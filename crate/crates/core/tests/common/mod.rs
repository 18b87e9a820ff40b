#![allow(dead_code)]

use cham::corpus::{generate_split, CorpusSpec, Split, Utterance};
use cham::{
    BlockConfig, DownsampleLayer, FrontendConfig, FrontendVariant, HeadConfig, ModelConfig, ModelInput, RunConfig,
    Scalar, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// D=16, 2 heads, 2 blocks, F=8, 11 labels.
pub fn tiny_model(factor: usize) -> ModelConfig {
    ModelConfig {
        feature_dim: 8,
        frontend: FrontendConfig {
            variant: FrontendVariant::Vgg,
            conv_filters: vec![2, 3, 3, 2],
            kernel: 3,
            downsample_factor: factor,
            downsample_layer: DownsampleLayer::Layer4,
            blstm_units: 4,
        },
        blocks: BlockConfig {
            model_dim: 16,
            heads: 2,
            ffn_dim: 24,
            depthwise_kernel: 4,
            num_blocks: 2,
            dropout: 0.0,
            attention_dropout: 0.0,
            embedding_dropout: 0.0,
            long_skip: true,
            rel_pos_clamp: 3,
        },
        heads: HeadConfig {
            num_labels: 11,
            intermediate_positions: vec![1],
            intermediate_loss: true,
            intermediate_scales: vec![0.3],
            mlp_dim: 12,
            share_transposed_conv: true,
            share_mlp: false,
            focal_loss: true,
            focal_gamma: 2.0,
            upsample_factor: None,
        },
    }
}

pub fn randn(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

/// Random features and labels for sequences of the given lengths, padded to
/// the longest.
pub fn random_input<S: Scalar>(lengths: &[usize], feature_dim: usize, labels: usize, seed: u64) -> ModelInput<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = *lengths.iter().max().unwrap();
    let b = lengths.len();
    let mut features = randn(&[b, t, feature_dim], &mut rng);
    let mut valid = vec![false; b * t];
    let mut targets = vec![0; b * t];
    for (bi, &len) in lengths.iter().enumerate() {
        for ti in 0..t {
            if ti < len {
                valid[bi * t + ti] = true;
                targets[bi * t + ti] = rng.random_range(0..labels);
            } else {
                for fi in 0..feature_dim {
                    features.data_mut()[(bi * t + ti) * feature_dim + fi] = 0.0;
                }
            }
        }
    }
    ModelInput {
        features: Tensor::new(features.shape().to_vec(), features.data().iter().map(|&x| S::of(x)).collect()).unwrap(),
        lengths: lengths.to_vec(),
        targets,
        valid,
    }
}

/// Baseline recipe at toy dimensions.
pub fn toy_run(labels: usize) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.run.seed = 3;
    cfg.corpus = CorpusSpec {
        num_utterances: 5,
        dev_utterances: 2,
        min_length: 190,
        max_length: 210,
        feature_dim: 40,
        num_labels: labels,
        mean_scale: 1.0,
        noise: 0.5,
        mean_segment_length: 5.0,
        seed: 7,
    };
    cfg.frontend.conv_filters = vec![8, 16, 16, 8];
    cfg.blocks = BlockConfig {
        model_dim: 64,
        heads: 4,
        ffn_dim: 256,
        depthwise_kernel: 8,
        num_blocks: 4,
        rel_pos_clamp: 16,
        ..BlockConfig::default()
    };
    cfg.heads.num_labels = labels;
    cfg.heads.intermediate_positions = vec![2];
    cfg.heads.intermediate_scales = vec![0.3];
    cfg.heads.mlp_dim = 64;
    cfg.optim.frame_budget = 250;
    cfg.optim.epochs = 60;
    cfg
}

pub fn corpus(cfg: &RunConfig) -> (Vec<Utterance>, Vec<Utterance>) {
    (
        generate_split(&cfg.corpus, Split::Train).unwrap(),
        generate_split(&cfg.corpus, Split::Dev).unwrap(),
    )
}
