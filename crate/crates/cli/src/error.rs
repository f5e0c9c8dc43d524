use thiserror::Error;
use xlin_core::Category;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] xlin_core::Error),
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("numeric: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn category(&self) -> Category {
        match self {
            CliError::Core(e) => e.category(),
            CliError::Config(_) => Category::Config,
            CliError::Io(_) => Category::Io,
            CliError::Numeric(_) => Category::Numeric,
        }
    }

    /// Process exit code for the error's category.
    pub fn exit_code(&self) -> i32 {
        match self.category() {
            Category::Config => 2,
            Category::Io => 3,
            Category::Contract => 4,
            Category::Numeric => 5,
        }
    }
}

impl From<toml::de::Error> for CliError {
    fn from(e: toml::de::Error) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
