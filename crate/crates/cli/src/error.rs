use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{0}")]
    Data(String),

    /// A library error attributed to one input field or flag.
    #[error("{field}: {source}")]
    Field {
        field: &'static str,
        #[source]
        source: reatt::Error,
    },

    #[error(transparent)]
    Core(#[from] reatt::Error),
}

pub type CliResult<T> = Result<T, CliError>;

fn core_exit_code(e: &reatt::Error) -> u8 {
    if e.is_numeric() {
        3
    } else if matches!(e, reatt::Error::Config(_)) {
        1
    } else {
        2
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Field { source, .. } | CliError::Core(source) => core_exit_code(source),
        }
    }
}

/// Attaches the name of the offending field to a library error.
pub trait FieldContext<T> {
    fn field(self, name: &'static str) -> CliResult<T>;
}

impl<T> FieldContext<T> for reatt::Result<T> {
    fn field(self, name: &'static str) -> CliResult<T> {
        self.map_err(|source| CliError::Field { field: name, source })
    }
}
