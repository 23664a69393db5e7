use thiserror::Error;

/// Errors surfaced by the simulation, design, and estimation layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{field}`: {message}")]
    InvalidParameter { field: String, message: String },

    #[error("config error{}: {message}", location_suffix(.location))]
    Config {
        location: Option<String>,
        message: String,
    },

    #[error("schema error{}: {message}", location_suffix(.location))]
    Schema {
        location: Option<String>,
        message: String,
    },

    #[error("unknown node label `{0}`")]
    UnknownNode(String),

    #[error("graph is cyclic: no topological order exists")]
    CyclicGraph,

    #[error("node sets must be disjoint: `{0}` appears in more than one of x/y/z")]
    OverlappingNodeSets(String),

    #[error("design/protocol mismatch: {0}")]
    DesignProtocolMismatch(String),

    #[error("design `{0}` requires ground-truth trajectories but none were supplied")]
    MissingTruth(String),

    #[error("design matrix is rank deficient (column `{0}` is redundant or constant)")]
    RankDeficient(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(
        "monte carlo budget too small: {requested} draws give se ~{projected_se:.2e}, \
         need ~{required} draws for target se {target_se:.2e}"
    )]
    InsufficientDraws {
        requested: usize,
        required: usize,
        projected_se: f64,
        target_se: f64,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

fn location_suffix(location: &Option<String>) -> String {
    match location {
        Some(loc) => format!(" at {loc}"),
        None => String::new(),
    }
}

impl Error {
    pub fn invalid_parameter(field: &str, message: impl Into<String>) -> Self {
        Error::InvalidParameter {
            field: field.to_string(),
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Error::Config {
            location: None,
            message: message.into(),
        }
    }

    pub fn schema(location: Option<String>, message: impl Into<String>) -> Self {
        Error::Schema {
            location,
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
