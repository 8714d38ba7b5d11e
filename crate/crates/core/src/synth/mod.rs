//! Synthetic corpus: latents, CSI simulation and preprocessing, frozen
//! surrogate encoders, templated captions and mirroring.

pub mod captions;
pub mod csi;
pub mod dataset;
pub mod encoders;
pub mod latent;
pub mod lexicon;

pub use captions::{tokenize, Vocab};
pub use csi::{prune_subcarriers, sanitize_phase, synth_csi, CsiConfig, CsiTensor};
pub use dataset::{mirror_clip, ClipRecord, Dataset, DatasetConfig, Split, SplitMode};
pub use encoders::{FeatureConfig, SurrogateEncoders};
pub use latent::{Direction, LatentClip};
pub use lexicon::{mirror_caption, MirrorLexicon};
