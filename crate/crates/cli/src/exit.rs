use std::fmt;

pub const GENERAL: i32 = 1;
pub const MANIFEST: i32 = 2;
pub const DIVERGED: i32 = 3;
pub const NOT_INTACT: i32 = 4;
pub const NO_VALID_REGION: i32 = 5;
pub const MISSING_ASSET: i32 = 6;

/// A failed command: the process exit code and the message for stderr.
#[derive(Debug, PartialEq, Eq)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    pub fn new(code: i32, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn general(message: impl Into<String>) -> Self {
        Self::new(GENERAL, message)
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<voxaug::Error> for Failure {
    fn from(e: voxaug::Error) -> Self {
        let code = match e {
            voxaug::Error::Diverged { .. } => DIVERGED,
            voxaug::Error::Manifest(_) => MANIFEST,
            _ => GENERAL,
        };
        Self::new(code, e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::general(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Self::general(e.to_string())
    }
}
