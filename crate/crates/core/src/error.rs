use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    Shape { expected: Vec<usize>, got: Vec<usize> },

    #[error("unknown token `{0}` in prompt")]
    Vocabulary(String),

    #[error("prompt has {got} tokens, the encoder holds at most {max}")]
    PromptTooLong { got: usize, max: usize },

    #[error("attention injection rejected: {0}")]
    Injection(String),

    #[error("backbone does not support {0}")]
    Unsupported(&'static str),

    #[error("non-finite value at denoising step {step}: {what}")]
    Numeric { step: usize, what: String },

    #[error("training diverged at step {step} (loss {loss})")]
    Training { step: usize, loss: f64 },

    #[error("configuration error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn shape(expected: &[usize], got: &[usize]) -> Self {
        Error::Shape {
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
