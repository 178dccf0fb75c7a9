//! XOR intersession network coding relay with a discrete-event wireless simulator.

pub mod ack;
pub mod codec;
pub mod key_repo;
pub mod link_state;
pub mod medium;
pub mod model;
pub mod scheduler;
pub mod metrics;
pub mod sim;
pub mod config;
pub mod harness;
