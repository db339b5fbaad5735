use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VehicleError {
    #[error("non-finite value in `{0}`")]
    NonFinite(&'static str),
    #[error("`{field}` = {value} out of range (expected {expected})")]
    OutOfRange {
        field: &'static str,
        value: f64,
        expected: &'static str,
    },
    #[error("{head} index {index} out of range for {cardinality} choices")]
    ActionIndex {
        head: &'static str,
        index: usize,
        cardinality: usize,
    },
}

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("geometry parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid geometry at {path}: {message}")]
    Invalid { path: String, message: String },
}

impl GeometryError {
    pub(crate) fn invalid(path: impl Into<String>, message: impl Into<String>) -> Self {
        GeometryError::Invalid {
            path: path.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RandomizationError {
    #[error("{row} grid has {expected} points but {got} replicas were requested")]
    ReplicaCount {
        row: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid grid [{start}:{step}:{end}]")]
    BadGrid { start: f64, step: f64, end: f64 },
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Vehicle(#[from] VehicleError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Randomization(#[from] RandomizationError),
    #[error("missing action for live agent {agent}")]
    MissingAction { agent: usize },
    #[error("{0}")]
    Config(String),
}

#[derive(Debug, Error)]
pub enum ReplicaError {
    #[error("replica count must be at least 1")]
    ZeroReplicas,
    #[error("instances mode runs each replica in its own OS process; use the process launcher")]
    OutOfProcess,
    #[error("agents-mode spawn poses overlap across families {a} and {b} without collision isolation")]
    OverlappingFamilies { a: usize, b: usize },
    #[error("replica {replica} faulted: {source}")]
    Faulted {
        replica: usize,
        #[source]
        source: ScenarioError,
    },
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("worker pool: {0}")]
    Pool(String),
}

#[derive(Debug, Error)]
pub enum LearnError {
    #[error("non-finite loss ({what}); update rolled back")]
    NonFiniteLoss { what: &'static str },
    #[error("observation width {got} does not match network input {expected}")]
    ObservationWidth { expected: usize, got: usize },
    #[error("demonstrations required (bc strength > 0 or gail enabled) but none were provided")]
    MissingDemonstrations,
    #[error("buffer holds {got} tuples, update needs {expected}")]
    BufferSize { expected: usize, got: usize },
}

#[derive(Debug, Error)]
pub enum FileFormatError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Record { line: usize, message: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum DemoError {
    #[error("at least one lap must be requested")]
    ZeroLaps,
    #[error("driver crashed at step {step} after {completed} of {requested} laps; partial recording rejected")]
    Crashed {
        step: usize,
        completed: usize,
        requested: usize,
    },
    #[error("step budget of {steps} exhausted after {completed} of {requested} laps")]
    Incomplete {
        steps: usize,
        completed: usize,
        requested: usize,
    },
    #[error(transparent)]
    File(#[from] FileFormatError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Replica(#[from] ReplicaError),
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Learn(#[from] LearnError),
    #[error(transparent)]
    Replica(#[from] ReplicaError),
    #[error(transparent)]
    File(#[from] FileFormatError),
}

impl From<std::io::Error> for TrainError {
    fn from(e: std::io::Error) -> Self {
        TrainError::File(FileFormatError::Io(e))
    }
}
