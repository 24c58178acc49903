pub mod control;
pub mod guest;
pub mod ids;
pub mod medium;
pub mod node;
pub mod proto;
pub mod subsystem;

pub use node::{Node, NodeConfig, NodeError, Outcome};
