use std::fmt;

/// Process-level failure carrying its exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad arguments, unreadable or malformed input: exit 2.
    Input(String),
    /// The computation itself broke down: exit 3.
    Numerical(String),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Input(_) => 2,
            Self::Numerical(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Input(m) | Self::Numerical(m) => f.write_str(m),
        }
    }
}

impl From<npmix::Error> for CliError {
    fn from(e: npmix::Error) -> Self {
        use npmix::Error as E;
        match e {
            E::InvalidArgument(_) | E::InvalidState(_) => Self::Input(e.to_string()),
            _ => Self::Numerical(e.to_string()),
        }
    }
}

pub fn input<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Input(msg.into()))
}

/// Attach a path to an I/O-ish error.
pub trait Context<T> {
    fn at(self, what: &std::path::Path) -> CliResult<T>;
}

impl<T, E: fmt::Display> Context<T> for Result<T, E> {
    fn at(self, what: &std::path::Path) -> CliResult<T> {
        self.map_err(|e| CliError::Input(format!("{}: {e}", what.display())))
    }
}
