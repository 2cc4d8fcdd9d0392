//! Command implementations behind the `uoe` binary.

pub mod ablate;
pub mod bench;
pub mod config;
pub mod corpus;
pub mod flops;
pub mod train;
pub mod verify;
