//! The two-frame transformer: codec, tokens, rotary positions, segment
//! modulation, masked attention and the block stack.

pub mod codec;
pub mod config;
pub mod dit;
pub mod mask;
pub mod patchify;
pub mod rope;
pub mod sequence;
pub mod vocab;


pub use config::ModelConfig;
pub use dit::{init_params, Forward, Model};
pub use mask::{build_mask, Mask, MaskStrategy};
pub use patchify::{PatchGeometry, TwoFrameLatents};
pub use sequence::{Layout, Segment};
pub use vocab::Vocabulary;
