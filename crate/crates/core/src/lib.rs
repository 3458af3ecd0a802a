//! Parametric texture synthesis from Gram statistics of convolutional
//! feature maps.
//!
//! An image is run through a VGG-19 style trunk; each selected layer is
//! summarized by a Gram matrix of its rectified feature maps (or a reduced
//! statistic). New textures are produced by optimizing the pixels of a
//! white-noise image with L-BFGS until their statistics match.

pub mod error;
pub mod fixtures;
pub mod gradcheck;
pub mod gram;
pub mod imageio;
pub mod network;
pub mod optim;
pub mod synth;
pub mod tensor;
pub mod weights;

pub use error::{Error, Result};
pub use gram::{
    count_parameters, describe, gram_matrix, layer_loss, layer_loss_grad, load_descriptor, save_descriptor,
    DescribeConfig, GramMatrix, LayerWeighting, PcaBasis, StatisticKind, TextureDescriptor,
};
pub use imageio::{load_ppm, postprocess, preprocess, save_ppm, Image8, PreprocessSpec};
pub use network::{build_vgg19_spec, random_init, tiny_spec, ActivationSet, Network, NetworkSpec};
pub use optim::{lbfgs_minimize, LbfgsOptions, OptimResult, Termination};
pub use synth::{synthesize, synthesize_from, SynthesisConfig, SynthesisOutput, DEFAULT_LAYERS};
pub use tensor::{ConvWeights, FeatureTensor, PoolMode};
pub use weights::{load_weights, save_weights, WeightMetadata};
