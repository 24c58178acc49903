pub mod bench;
pub mod exit;
pub mod workload;
