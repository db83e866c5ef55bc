use alloc::string::String;

/// Errors raised by the pipeline stages.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("span [{start}, {end}) out of range for {len} tokens")]
    Range { start: usize, end: usize, len: usize },

    #[error("unbalanced tag `{tag}` at token {index}")]
    UnbalancedTag { tag: String, index: usize },

    #[error("nested tag `{tag}` at token {index} inside `{outer}` opened at {outer_index}")]
    NestedTag {
        tag: String,
        index: usize,
        outer: String,
        outer_index: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("inconsistent input: {0}")]
    Consistency(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("unknown token `{0}`")]
    UnknownToken(String),
}

pub type Result<T> = core::result::Result<T, Error>;
