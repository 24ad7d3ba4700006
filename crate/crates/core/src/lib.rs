//! Metal artifact reduction for CT: artifact synthesis on a 2D parallel-beam
//! simulator, sinogram-domain baselines (LI, NMAR), an attention-guided
//! beta-CycleGAN trained on unpaired images, and numerical checks of the
//! optimal-transport bounds behind its loss.
//!
//! Shared domain types ([`ImageGrid`], [`Sinogram`], [`ProjectionGeometry`],
//! [`ParameterSet`], ...) are re-exported at the crate root.

pub mod attention;
pub mod classical;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod losses;
pub mod networks;
pub mod nn;
pub mod ot;
pub mod phantom;
pub mod rng;
pub mod synthesis;
pub mod tomo;
pub mod training;

pub use attention::{CbamParams, ChannelAttentionParams, FeatureMap, SpatialAttentionParams};
pub use classical::{BaselineMethod, MetalTrace};
pub use config::{Preset, RunConfig};
pub use error::{Error, Result};
pub use evaluation::MetricsRecord;
pub use losses::{LossReport, LossWeights};
pub use networks::{DiscriminatorConfig, GeneratorConfig, Mode, ParameterSet};
pub use ot::{Coupling, DiscreteMeasure, PotentialPair};
pub use synthesis::{DatasetManifest, MaterialMap, MetalMask, SpectrumModel};
pub use tomo::{FilterKind, ImageGrid, ProjectionGeometry, Sinogram};
pub use training::TrainConfig;
