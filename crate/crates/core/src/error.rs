use std::fmt;

/// Errors produced anywhere in the engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("state error: {0}")]
    State(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("at {site}: {source}")]
    AtSite {
        site: String,
        #[source]
        source: Box<Error>,
    },
    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(msg: impl fmt::Display) -> Self {
        Error::Dimension(msg.to_string())
    }

    pub(crate) fn domain(msg: impl fmt::Display) -> Self {
        Error::Domain(msg.to_string())
    }

    /// Innermost site name, if the error was tagged with one.
    pub fn site(&self) -> Option<&str> {
        match self {
            Error::AtSite { site, source } => source.site().or(Some(site)),
            _ => None,
        }
    }
}

/// Attach a site name to an error result.
pub(crate) trait AtSite<T> {
    fn at(self, site: &str) -> Result<T>;
}

impl<T> AtSite<T> for Result<T> {
    fn at(self, site: &str) -> Result<T> {
        self.map_err(|e| match e {
            e @ Error::AtSite { .. } => e,
            e => Error::AtSite {
                site: site.to_string(),
                source: Box::new(e),
            },
        })
    }
}
