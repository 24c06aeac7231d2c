use thiserror::Error;

/// Errors raised while building or analysing a flow network.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlownetError {
    #[error("edge ({0}, {1}) references a link outside 1..={2}")]
    EdgeOutOfRange(usize, usize, usize),
    #[error("self-loop on link {0}")]
    SelfLoop(usize),
    #[error("link graph contains a cycle through link {0}")]
    CycleDetected(usize),
    #[error("link {0} has no upstream link but is not the origin")]
    MultipleOrigins(usize),
    #[error("link {0} has no downstream link but is not the destination")]
    MultipleDestinations(usize),
    #[error("link {0} does not lie on any origin-destination path")]
    UnreachableLink(usize),
    #[error("the origin link must have infinite storage")]
    OriginFiniteStorage,
    #[error("network needs at least one link")]
    EmptyNetwork,
    #[error("mode chain is not ergodic: mode {0} cannot reach every other mode")]
    NotErgodic(usize),
    #[error("invalid mode system: {0}")]
    InvalidModes(String),
    #[error("invalid flow function on link {link}: {reason}")]
    InvalidFlow { link: usize, reason: String },
    #[error("invalid control law: {0}")]
    InvalidControl(String),
    #[error("fixed-point iteration for {0} did not converge")]
    FixedPointDiverged(&'static str),
    #[error("extremal problem has {0} free coordinates (limit {1})")]
    TooManyFreeCoordinates(usize, usize),
    #[error("a_k construction needs strictly negative drifts; link {0} has drift {1}")]
    NonnegativeDrift(usize, f64),
    #[error("control structure violated: {0}")]
    StructureViolated(String),
    #[error("state became non-finite at t = {0}")]
    NonFiniteState(f64),
    #[error("singular linear system: {0}")]
    Singular(&'static str),
    #[error("scenario error: {0}")]
    Scenario(String),
}

pub type Result<T, E = FlownetError> = std::result::Result<T, E>;
