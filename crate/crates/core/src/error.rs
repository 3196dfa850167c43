use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// The plan's parent/child links do not form a single rooted tree.
    #[error("invalid plan structure: {0}")]
    Structure(String),
    /// An operator kind, table or column is not present in the catalog.
    #[error("catalog error: {0}")]
    Catalog(String),
    #[error("invalid catalog definition: {0}")]
    InvalidCatalog(String),
    /// Shapes of inputs and parameters do not line up.
    #[error("configuration error: {0}")]
    Config(String),
    /// A label cannot be used (nonpositive runtime, zero-time root, ...).
    #[error("label error: {0}")]
    Label(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("data integrity error: {0}")]
    DataIntegrity(String),
    /// An explanation was requested for a node without an estimated contribution.
    #[error("missing estimated contribution for subtree rooted at node {0}")]
    Coverage(usize),
    #[error("undefined: {0}")]
    Undefined(&'static str),
    #[error("numeric divergence: {0}")]
    Divergence(String),
}
