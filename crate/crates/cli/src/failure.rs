use infometic_core::Error;

pub const BAD_INPUT: u8 = 1;
pub const CHECKPOINT: u8 = 2;
pub const DIVERGED: u8 = 3;

/// A terminal error with its process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn input(message: impl Into<String>) -> Self {
        Self {
            code: BAD_INPUT,
            message: message.into(),
        }
    }

    pub fn checkpoint(message: impl Into<String>) -> Self {
        Self {
            code: CHECKPOINT,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Checkpoint(_) | Error::DimensionMismatch(_) | Error::MissingTemperature => {
                CHECKPOINT
            }
            Error::Diverged { .. } => DIVERGED,
            _ => BAD_INPUT,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::input(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::input(e.to_string())
    }
}

/// Attaches a path or item name to an error message, keeping its exit code.
pub trait Context<T> {
    fn context(self, what: impl std::fmt::Display) -> Result<T, Failure>;
}

impl<T, E: Into<Failure>> Context<T> for Result<T, E> {
    fn context(self, what: impl std::fmt::Display) -> Result<T, Failure> {
        self.map_err(|e| {
            let f = e.into();
            Failure {
                code: f.code,
                message: format!("{what}: {}", f.message),
            }
        })
    }
}
