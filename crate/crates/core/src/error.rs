use thiserror::Error;

use crate::mask::TokenRole;
use crate::testbed::GoalId;

#[derive(Debug, Error)]
pub enum TestbedError {
    #[error("invalid corpus config: {0}")]
    InvalidConfig(String),
    #[error("discount must lie in (0, 1), got {0}")]
    InvalidGamma(f64),
    #[error("transition row (state {state}, action {action}) sums to {sum}")]
    RowNotStochastic { state: usize, action: usize, sum: f64 },
    #[error("transition row (state {state}, action {action}) has an invalid entry")]
    InvalidTransition { state: usize, action: usize },
    #[error("{goal} points at state {state}, outside the state space")]
    StateOutOfRange { goal: GoalId, state: usize },
    #[error("index out of range: state {state}, action {action}")]
    IndexOutOfRange { state: usize, action: usize },
    #[error("unknown {0}")]
    UnknownGoal(GoalId),
    #[error("{goal} is unreachable from start state {start}")]
    UnreachableGoal { goal: GoalId, start: usize },
    #[error("{goal} has no start state from which it is reachable")]
    UnreachableGoalNoStart { goal: GoalId },
    #[error("expert transition at state {state}, action {action} is stochastic")]
    StochasticExpert { state: usize, action: usize },
    #[error("occupancy iteration did not converge: residual {residual:e} after {iterations} iterations")]
    NonConvergent { residual: f64, iterations: usize },
    #[error("corpus format error: {0}")]
    Format(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error, PartialEq)]
pub enum CrlError {
    #[error("discount must lie in (0, 1), got {0}")]
    InvalidGamma(f64),
    #[error("empty batch")]
    EmptyBatch,
    #[error("sample {index}: timestep {t} outside 1..={horizon}")]
    InvalidTimestep { index: usize, t: usize, horizon: usize },
    #[error("task {task} maps to both {first} and {second}")]
    InconsistentTask { task: usize, first: GoalId, second: GoalId },
    #[error("anchor {0} has an empty positive set")]
    EmptyPositiveSet(usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("similarity columns {found:?} do not match the batch goals {expected:?}")]
    ColumnMismatch { expected: Vec<GoalId>, found: Vec<GoalId> },
    #[error("target token {token} at row {row} outside vocabulary of size {vocab}")]
    TokenOutOfRange { row: usize, token: usize, vocab: usize },
    #[error("lambda_crl must be >= 0, got {0}")]
    NegativeLambda(f64),
    #[error("non-finite value: {0}")]
    NonFinite(String),
}

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("feature dimension {found} does not match encoder input {expected}")]
    FeatureDim { expected: usize, found: usize },
    #[error("non-finite input feature at coordinate {0}")]
    NonFiniteInput(usize),
    #[error("unknown {0}")]
    UnknownGoal(GoalId),
    #[error("cannot normalize a zero-norm embedding")]
    ZeroNorm,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at step {step} (parameter norms {param_norms:?})")]
    NonFiniteLoss { step: usize, param_norms: Vec<f64> },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Crl(#[from] CrlError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum MaskError {
    #[error("role {found:?} at position {position} follows {previous:?} within segment {segment}")]
    RoleOrder {
        position: usize,
        segment: usize,
        previous: TokenRole,
        found: TokenRole,
    },
    #[error("segment ids must be non-decreasing (position {0})")]
    SegmentOrder(usize),
    #[error("query {0} has no permitted key")]
    EmptyRow(usize),
    #[error("sample {index} has length {len}, above the pack limit {limit}")]
    Oversize { index: usize, len: usize, limit: usize },
    #[error("block size must be >= 1")]
    BlockSize,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("mask dump parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Crl(#[from] CrlError),
}

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("flow time {0} outside [0, 1]")]
    InvalidTau(f64),
    #[error("non-finite velocity prediction")]
    NonFinite,
    #[error("steps must be >= 1")]
    Steps,
}

#[derive(Debug, Error)]
pub enum ShardError {
    #[error("shard {0} is empty")]
    EmptyShard(usize),
    #[error("assignment covers {found} samples, batch has {expected}")]
    Size { expected: usize, found: usize },
    #[error("sample {index} assigned to shard {shard} of {num_shards}")]
    ShardOutOfRange { index: usize, shard: usize, num_shards: usize },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Crl(#[from] CrlError),
}

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error(transparent)]
    Testbed(#[from] TestbedError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("oracle has no positive occupancy for {goal} at state {state}, action {action}")]
    ZeroOccupancy { goal: GoalId, state: usize, action: usize },
}
