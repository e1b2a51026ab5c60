//! Crate-wide pipeline error.

use std::fmt;

use crate::image::ImageError;
use crate::kvrecord::RecordError;
use crate::numerics::TensorError;
use crate::vocab::OutOfVocabulary;
use crate::world::WorldError;

#[derive(Debug)]
pub enum PipelineError {
    Tensor(TensorError),
    World(WorldError),
    Record(RecordError),
    Image(ImageError),
    Vocab(OutOfVocabulary),
    Io(std::io::Error),
    /// A prompt contained no instruction boundary marker.
    ZeroInstructions,
    /// Empty text where at least one token is required.
    EmptyText,
    /// A low-rank adapter was requested with rank >= min(rows, cols).
    LoraRankTooLarge { rank: usize, limit: usize },
    /// Paired sequences disagree in length.
    LengthMismatch { left: usize, right: usize },
    /// A projected vector had zero norm where a direction is required.
    ZeroNormProjection { side: &'static str, row: usize },
    /// Refinement was attempted while the surrogate is still trainable.
    SurrogateNotFrozen,
    /// Training phases must run main -> surrogate -> refine.
    PhaseOrder { detail: String },
    /// Checkpoint file malformed or missing required blocks.
    Checkpoint(String),
    /// An evaluation split contained no episodes.
    EmptySplit,
    /// Top-level configuration problem.
    Config(String),
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Tensor(e) => write!(f, "{e}"),
            Self::World(e) => write!(f, "{e}"),
            Self::Record(e) => write!(f, "{e}"),
            Self::Image(e) => write!(f, "{e}"),
            Self::Vocab(e) => write!(f, "{e}"),
            Self::Io(e) => write!(f, "io error: {e}"),
            Self::ZeroInstructions => write!(f, "prompt contains no instruction boundary marker"),
            Self::EmptyText => write!(f, "text input is empty"),
            Self::LoraRankTooLarge { rank, limit } => {
                write!(f, "adapter rank {rank} must be below min dimension {limit}")
            }
            Self::LengthMismatch { left, right } => {
                write!(f, "length mismatch: {left} vs {right}")
            }
            Self::ZeroNormProjection { side, row } => {
                write!(f, "zero-norm projected vector ({side} row {row})")
            }
            Self::SurrogateNotFrozen => {
                write!(f, "refinement requires the surrogate parameters to be frozen")
            }
            Self::PhaseOrder { detail } => write!(f, "phase order violation: {detail}"),
            Self::Checkpoint(s) => write!(f, "checkpoint error: {s}"),
            Self::EmptySplit => write!(f, "evaluation split is empty"),
            Self::Config(s) => write!(f, "config error: {s}"),
        }
    }
}

impl std::error::Error for PipelineError {}

impl From<TensorError> for PipelineError {
    fn from(e: TensorError) -> Self {
        Self::Tensor(e)
    }
}
impl From<WorldError> for PipelineError {
    fn from(e: WorldError) -> Self {
        Self::World(e)
    }
}
impl From<RecordError> for PipelineError {
    fn from(e: RecordError) -> Self {
        Self::Record(e)
    }
}
impl From<ImageError> for PipelineError {
    fn from(e: ImageError) -> Self {
        Self::Image(e)
    }
}
impl From<OutOfVocabulary> for PipelineError {
    fn from(e: OutOfVocabulary) -> Self {
        Self::Vocab(e)
    }
}
impl From<std::io::Error> for PipelineError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e)
    }
}

pub type PipelineResult<T> = Result<T, PipelineError>;
