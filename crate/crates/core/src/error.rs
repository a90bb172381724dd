use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the quantization pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing blob: {0}")]
    MissingBlob(PathBuf),

    #[error("manifest parse error: {0}")]
    Manifest(String),

    #[error("unknown layer kind `{0}`")]
    UnknownLayerKind(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid batch-norm statistics in channel {channel}: sigma2 + eps = {value}")]
    InvalidBatchNorm { channel: usize, value: f32 },

    #[error("batch norm already folded")]
    AlreadyFolded,

    #[error("degenerate layer: every channel range is zero")]
    DegenerateLayer,

    #[error("degenerate range: {0}")]
    DegenerateRange(String),

    #[error("shift overflow: weight scaled by 2^{shift} in channel {channel} is not finite")]
    ShiftOverflow { channel: usize, shift: u8 },

    #[error("bias overflow in channel {channel}: {value} does not fit in int32")]
    BiasOverflow { channel: usize, value: f64 },

    #[error("scale compound {0} needs an exponent outside [-32, 31]")]
    CompoundExponent(f64),

    #[error("accumulator overflow: {0}")]
    AccumulatorOverflow(String),

    #[error("geometry mismatch: {0}")]
    Geometry(String),

    #[error("corrupt sparse tensor: {0}")]
    CorruptSparse(String),

    #[error("quantized model parse error: {0}")]
    Format(String),

    #[error("calibration needs at least one representative input")]
    EmptyCalibration,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("layer {index}: {source}")]
    Layer {
        index: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Attach a layer index to an error raised while processing that layer.
    pub fn at_layer(self, index: usize) -> Self {
        match self {
            e @ Error::Layer { .. } => e,
            e => Error::Layer {
                index,
                source: Box::new(e),
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
