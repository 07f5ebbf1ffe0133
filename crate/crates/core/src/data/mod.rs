//! Dataset ingestion, synthetic scene generation, image handling, and model
//! checkpoints.

mod checkpoint;
mod image;
mod manifest;
mod synth;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, ClassifierModel, DetectorModel, Model, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use image::{letterbox, Image, LetterboxTransform};
pub use manifest::{
    load_manifest, save_manifest, Dataset, PixelBox, SampleAnnotation, Split,
};
pub use synth::{default_styles, generate_scene, styles_for_count, synthesize, ClassStyle, SynthConfig};

use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("image error: {0}")]
    Image(String),
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error("checkpoint has bad magic bytes")]
    BadMagic,
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint checksum mismatch")]
    ChecksumMismatch,
    #[error("checkpoint file is truncated")]
    Truncated,
    #[error("checkpoint parse error: {0}")]
    Parse(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// True for errors caused by the filesystem rather than file contents.
    pub fn is_io(&self) -> bool {
        matches!(self, Self::Io { .. })
    }
}

/// FNV-1a 64-bit hash; the checkpoint content checksum and the manifest hash
/// printed by the synthesizer.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_known_vectors() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"hello"), 0xa430d84680aabd0b);
    }
}
