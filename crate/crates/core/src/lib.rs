//! Joint channel and power allocation for multi-channel interference networks.
//!
//! The crate covers the whole pipeline: channel simulation and the binary
//! dataset format ([`channel`], [`dataset`]), exact rate evaluation
//! ([`rate`]), the multi-channel WMMSE solver ([`ewmmse`]), reference
//! allocators ([`baselines`]), the per-channel message-passing allocator with
//! hand-written gradients ([`gnn`]), its primal-dual trainer ([`trainer`]),
//! and the experiment harness ([`harness`]).

pub mod baselines;
pub mod channel;
pub mod dataset;
pub mod error;
pub mod ewmmse;
pub mod gnn;
pub mod harness;
pub mod matrix;
pub mod rate;
pub mod rng;
pub mod trainer;

pub use channel::{ChannelInstance, NetworkConfig, Topology};
pub use dataset::{read_dataset, write_dataset, Dataset};
pub use error::{Error, Result};
pub use matrix::Matrix;
pub use rate::{Allocation, RateReport};
