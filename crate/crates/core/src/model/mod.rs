//! Generator, discriminators, identity embedder and their persistence.

pub mod checkpoint;
pub mod discriminator;
pub mod embedder;
pub mod generator;
pub mod params;

pub use checkpoint::Checkpoint;
pub use discriminator::{parsing_input, Discriminator, DiscriminatorConfig, DiscriminatorKind};
pub use embedder::{EmbedderConfig, ToyEmbedder};
pub use generator::{Fusion, Generator, GeneratorConfig, GeneratorOutput, GeneratorVars};
pub use params::{Bound, Conv, Linear, ParamId, ParamStore};
