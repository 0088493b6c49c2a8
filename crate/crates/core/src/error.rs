use thiserror::Error;

use crate::map_family::Branch;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("x = {0} sits on the singularity")]
    Singularity(f64),
    #[error("x = {0} lies outside I = [-1/2, 1/2]")]
    Domain(f64),
    #[error("y = {y} has no preimage on the {branch:?} branch")]
    NoPreimage { branch: Branch, y: f64 },
    #[error("orbit hit the singular set at step {step}")]
    SingularOrbit { step: usize },
    #[error("omega index {index} is outside the window [{lo}, {hi}]")]
    Window { index: i64, lo: i64, hi: i64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("x = {0} lies outside the singular neighbourhood")]
    OutsideDelta0(f64),
    #[error("level r = {0} is below r0, the cell is empty")]
    EmptyCell(i64),
    #[error("cell index m = {m} out of range for level r = {r}")]
    CellIndex { r: i64, m: u64 },
    #[error("interval [{0}, {1}] straddles the singularity")]
    Straddle(f64, f64),
    #[error("fit failed: {0}")]
    Fit(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("no full return found within t* = {t_star} iterates")]
    NoFullReturn { t_star: usize },
    #[error("x = {0} is in the unreturned residual set")]
    Unreturned(f64),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
