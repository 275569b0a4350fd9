//! Edge-conditioned adversarial reconstructor.

pub mod loss;
pub mod nets;
pub mod perceptual;
pub mod train;

pub use loss::{
    bce_with_logits, discriminator_loss, generator_loss, gradient_penalty, Critic, LossBreakdown,
    LossWeights, PenaltySample,
};
pub use nets::{Discriminator, DiscriminatorSpec, Generator, GeneratorSpec};
pub use perceptual::PerceptualExtractor;
pub use train::{
    train_reconstructor, validation_l1, EpochLog, ReconModel, ReconNets, ReconSample,
    ReconTrainConfig,
};
