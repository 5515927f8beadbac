//! Discrete-event simulator of sliced 5G access and core networks.

pub mod cn;
pub mod grid;
pub mod ids;
pub mod mac;
pub mod offload;
pub mod phy;
pub mod ran;
pub mod scenario;
pub mod sim;
pub mod world;
pub mod report;
pub mod runner;
