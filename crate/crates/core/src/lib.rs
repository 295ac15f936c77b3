pub mod engine;
pub mod harness;
pub mod mac;
pub mod metrics;
pub mod mlo;
pub mod network;
pub mod ofdma;
pub mod phy;
pub mod scenario;
