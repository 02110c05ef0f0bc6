use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("{modes} modes need a Fock dimension of 2^{modes}, above the dense budget {max_dim}")]
    ModeCountExceeded { modes: usize, max_dim: usize },

    #[error("site {site} is outside the lattice of {modes} modes")]
    SiteOutOfRange { site: usize, modes: usize },

    #[error("kernel is not Hermitian at ({x}, {y}): residual {residual:e}")]
    KernelNotHermitian { x: usize, y: usize, residual: f64 },

    #[error("kernel entry ({x}, {y}) is nonzero at distance {distance} beyond range {range}")]
    RangeViolation { x: usize, y: usize, distance: f64, range: f64 },

    #[error("eigendecomposition failed: {0}")]
    EigenFailure(String),

    #[error("exponent {exponent:.1} exceeds the overflow budget {budget}")]
    OverflowRisk { exponent: f64, budget: f64 },

    #[error("item {index} is not even in creation/annihilation operators")]
    OddOperatorUnsupported { index: usize },

    #[error("cumulant order {order} exceeds the configured maximum {max}")]
    CumulantOrderExceeded { order: usize, max: usize },

    #[error("series terms grew for three consecutive orders up to order {order}")]
    SeriesDivergenceSuspected { order: usize },

    #[error("switch evaluated at positive time {t}")]
    PositiveTimeUnsupported { t: f64 },

    #[error("unitarity defect {defect:e} exceeds tolerance {tolerance:e}")]
    UnitarityLost { defect: f64, tolerance: f64 },

    #[error("quadrature needs {nodes} nodes, above the budget {budget}")]
    QuadratureBudgetExceeded { nodes: usize, budget: usize },

    #[error("requested tolerance {requested:e} is below the certified budget {budget:e}")]
    BudgetUnattainable { requested: f64, budget: f64 },

    #[error("fit is degenerate: {0}")]
    DegenerateFit(String),

    #[error("observable {index} is not quadratic")]
    ObservableNotQuadratic { index: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

pub type Result<T> = std::result::Result<T, Error>;
