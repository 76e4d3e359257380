use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("kv capacity exhausted: need {needed} tokens, {available} can be freed (capacity {capacity})")]
    Capacity {
        needed: usize,
        available: usize,
        capacity: usize,
    },

    #[error("unknown agent '{0}'")]
    UnknownAgent(String),

    #[error("flow graph compile error in agent '{agent}': {message}")]
    Compile { agent: String, message: String },

    #[error("deadlock: {0}")]
    Deadlock(String),

    #[error("runtime error: {0}")]
    Runtime(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(String),

    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Self::InvalidInput(msg.into())
    }

    pub fn compile(agent: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Compile {
            agent: agent.into(),
            message: message.into(),
        }
    }

    /// Short machine-readable tag, used in protocol error responses.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::InvalidInput(_) => "invalid_input",
            Self::Capacity { .. } => "capacity",
            Self::UnknownAgent(_) => "unknown_agent",
            Self::Compile { .. } => "compile",
            Self::Deadlock(_) => "deadlock",
            Self::Runtime(_) => "runtime",
            Self::Config(_) => "config",
            Self::Io(_) => "io",
            Self::Internal(_) => "internal",
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Self::InvalidInput(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Self::Io(e.to_string())
    }
}
