//! Unsupervised clustering of spoken-digit audio with a variational
//! autoencoder whose latent prior is a trainable Gaussian mixture.

pub mod baselines;
pub mod cache;
pub mod dataio;
pub mod dsp;
pub mod embed;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod trainer;
pub mod util;

pub use baselines::{GmmEmResult, KMeansResult};
pub use dataio::{AudioClip, Split, SplitManifest};
pub use dsp::{DspConfig, SpectrogramSample};
pub use error::{Error, Result};
pub use loss::{LossBreakdown, ReconFamily};
pub use metrics::MetricsReport;
pub use model::{ClusterAssignment, GmmPrior, LatentGaussian, Model, ModelConfig};
pub use trainer::{Dataset, EpochRecord, TrainConfig, TrainOutcome};
