//! Error taxonomy for the packing pipeline.
//!
//! Every fallible operation in the crate returns [`Result`]. Variants are
//! grouped by pipeline stage so the CLI can map them onto exit codes:
//! I/O problems exit 3, everything else here is a validation failure and
//! exits 1. Verification findings (a container that parses but fails the
//! attention/weight checks) are reported separately and exit 2.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Underlying file-system failure, annotated with the path involved.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// A corpus line that is not a valid record. Lines are 1-based.
    #[error("corpus line {line}: {msg}")]
    MalformedLine { line: usize, msg: String },

    /// An instruction referencing a task the prompt map does not declare.
    #[error("instruction {id:?} has unknown task {task:?} (known: {known})")]
    UnknownTask {
        id: String,
        task: String,
        known: String,
    },

    /// A structurally invalid conversation (role order, empty text, ...).
    #[error("instruction {id:?}: {msg}")]
    InvalidInstruction { id: String, msg: String },

    /// The same instruction id appeared more than once.
    #[error("duplicate instruction id {id:?}")]
    DuplicateId { id: String },

    /// An operation that needs at least one instruction got none.
    #[error("corpus is empty")]
    EmptyCorpus,

    /// Balanced/mixed planning needs every declared task to be populated.
    #[error("task {task:?} has no instructions in the corpus")]
    EmptyTask { task: String },

    /// The chunk width must equal the number of declared tasks.
    #[error("n_mix is {n_mix} but the prompt map declares {task_count} tasks; they must be equal")]
    NMixMismatch { n_mix: usize, task_count: usize },

    /// Strict no-replacement planning hit an undersized task.
    #[error("task {task:?} has {have} instructions but {need} are needed without replacement")]
    ReplacementForbidden {
        task: String,
        have: usize,
        need: usize,
    },

    /// A chunk that cannot fit into a single pack even when empty.
    #[error("chunk of {token_length} tokens exceeds max_len {max_len} (instructions: {ids})")]
    ChunkOverflow {
        ids: String,
        token_length: usize,
        max_len: usize,
    },

    /// Tokenization produced an empty response span.
    #[error("instruction {id:?}: assistant turn produced zero response tokens")]
    ZeroResponseTokens { id: String },

    /// Tokenizer could not encode its input.
    #[error("tokenizer error: {msg}")]
    Tokenize { msg: String },

    /// Invalid configuration file or option combination.
    #[error("config error: {msg}")]
    Config { msg: String },

    /// A batch container file that violates the format.
    #[error("container error on {path}: {msg}")]
    Container { path: String, msg: String },

    /// Item index past the end of a container.
    #[error("item {index} out of range: container holds {len} items")]
    ItemOutOfRange { index: usize, len: usize },

    /// Densification refused: the dense matrix would be too large.
    #[error("refusing to densify a mask of {real_len} tokens (guard is {guard})")]
    DensifyTooLarge { real_len: usize, guard: usize },

    /// Chunk arity did not match what the weighting scheme requires.
    #[error("pack chunk holds {got} instructions, expected {expected}")]
    ChunkArity { got: usize, expected: usize },

    /// Ill-formed input handed to the reference attention model.
    #[error("oracle input error: {msg}")]
    OracleInput { msg: String },
}

impl Error {
    /// Process exit code the CLI maps this error onto.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::Container { .. } => 3,
            _ => 1,
        }
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
