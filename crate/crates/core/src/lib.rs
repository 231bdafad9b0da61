//! Lossless compression with numerically invertible volume-preserving flows.

pub mod codec;
pub mod coder;
pub mod error;
pub mod fixnum;
pub mod layers;
pub mod mat;
pub mod model;
pub mod oracle;
pub mod prior;

pub use codec::{compress, compress_many, decompress, decompress_many, CodecConfig, CodelengthReport, Container};
pub use error::{Error, Result};
pub use model::FlowModel;
