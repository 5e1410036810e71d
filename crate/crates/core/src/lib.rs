//! Deterministic simulation of an off-chain fast-payment network:
//! guaranteed payments backed by collateralized guarantors, randomized
//! sharding, group supervision with punishment, and TEE-certified
//! withdrawal to a mocked public chain.

pub mod crypto;
pub mod external_chain;
pub mod ledger;
pub mod messages;
pub mod protocol;
pub mod rng;
pub mod sharding;
pub mod simulator;
pub mod tee;
pub mod wire;
