use std::fmt;
use std::path::PathBuf;

/// Pipeline stage tag attached to errors raised while orchestrating a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Preprocess,
    Score,
    Aggregate,
    Evaluate,
    Sweep,
    Synth,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Stage::Config => "config",
            Stage::Preprocess => "preprocess",
            Stage::Score => "score",
            Stage::Aggregate => "aggregate",
            Stage::Evaluate => "evaluate",
            Stage::Sweep => "sweep",
            Stage::Synth => "synth",
        };
        f.write_str(name)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },

    #[error("duplicate patient_id {0:?} in manifest")]
    DuplicatePatient(String),

    #[error("unknown label {0:?} (expected \"covid\" or \"non-covid\")")]
    UnknownLabel(String),

    #[error("manifest {0} has no entries")]
    EmptyManifest(PathBuf),

    #[error("volume directory {0} contains no slice images")]
    EmptyVolume(PathBuf),

    #[error("unsupported slice format: {0}")]
    UnsupportedFormat(PathBuf),

    #[error("corrupt image {path}: {message}")]
    CorruptImage { path: PathBuf, message: String },

    #[error("invalid slice image: {0}")]
    InvalidSlice(String),

    #[error(
        "crop window {window_height}x{window_width}@({top},{left}) does not fit slice {height}x{width}"
    )]
    CropOutOfBounds {
        height: usize,
        width: usize,
        top: usize,
        left: usize,
        window_height: usize,
        window_width: usize,
    },

    #[error("strict mode requires 512x512 slices, got {height}x{width}")]
    UnexpectedDims { height: usize, width: usize },

    #[error("degenerate slice {height}x{width}: resize needs at least 2x2")]
    DegenerateSlice { height: usize, width: usize },

    #[error("invalid parameter {name}: {message}")]
    InvalidParameter { name: &'static str, message: String },

    #[error("tensor archive: {0}")]
    Archive(String),

    #[error("scores {source_name} line {line}: {message}")]
    ScoreParse {
        source_name: String,
        line: u64,
        message: String,
    },

    #[error("score count mismatch for patient {patient_id}: {expected} slices, {actual} scores")]
    ScoreCountMismatch {
        patient_id: String,
        expected: usize,
        actual: usize,
    },

    #[error("scorer backend: {0}")]
    Backend(String),

    #[error("training set must contain both classes, found only {0}")]
    SingleClass(String),

    #[error("no scores for patient {0}")]
    NoScores(String),

    #[error("patient {0} has no ground-truth label")]
    MissingLabel(String),

    #[error("patient {0} has predictions but is absent from ground truth")]
    IdMismatch(String),

    #[error("empty confusion matrix")]
    EmptyMatrix,

    #[error("{0}")]
    Format(String),

    #[error("stage {stage}: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(name: &'static str, message: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            message: message.into(),
        }
    }

    pub fn at_stage(self, stage: Stage) -> Self {
        match self {
            already @ Error::Stage { .. } => already,
            other => Error::Stage {
                stage,
                source: Box::new(other),
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
