use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("taxonomy error: {0}")]
    Taxonomy(String),

    #[error("non-positive box dimensions: x={x} y={y} w={w} h={h}")]
    InvalidBox { x: f64, y: f64, w: f64, h: f64 },

    #[error("coco parse error: {0}")]
    Coco(String),

    #[error("event log error: {0}")]
    EventLog(String),

    #[error("reliability model error: {0}")]
    Reliability(String),

    #[error("correspondence error: {0}")]
    Correspondence(String),

    #[error("consensus error: {0}")]
    Consensus(String),

    #[error("scoring error: {0}")]
    Scoring(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("simulation error: {0}")]
    Simulation(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn json(path: impl AsRef<std::path::Path>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
