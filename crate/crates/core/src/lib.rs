//! Contrastive goal-reaching representations for vision-language-action
//! training: synthetic MDP testbed, contrastive objectives, encoders, role
//! masking, flow-matching action head and sharded gradient aggregation.

pub mod checkpoint;
pub mod crl;
pub mod encoders;
pub mod error;
pub mod flow;
pub mod gradcheck;
pub mod mask;
pub mod optim;
pub mod shard;
pub mod testbed;
pub mod verify;

pub use error::{CrlError, EncoderError, FlowError, MaskError, ShardError, TestbedError, VerifyError};
pub use testbed::GoalId;
