//! Epoch randomness beacon, shard assignment, and guarantor election.
//!
//! Shards are indexed by the upper `s` bits of a 20-byte value: the
//! payer address for transactions, the address xored with the epoch's
//! global hash for guarantors. Election ranks a roster by address xor
//! transaction id, smallest first.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::crypto::{hash_digest, Address, Digest, ADDRESS_LEN, DIGEST_LEN};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ShardingError {
    #[error("bit count {0} exceeds value width {1}")]
    BitCountTooLarge(u32, u32),
    #[error("expected {expected} end-block hashes, got {got}")]
    WrongEndBlockCount { expected: usize, got: usize },
    #[error("guarantor set is empty")]
    NoGuarantors,
    #[error("shard {0} has an empty roster")]
    EmptyShard(u32),
    #[error("invalid security parameter: {0}")]
    BadParams(String),
}

/// Exact unsigned rational, used for the collateral ratio, fee split,
/// and compensation/punishment weights. Token amounts stay integral:
/// applying a ratio floors the product.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ratio {
    pub num: u64,
    pub den: u64,
}

impl Ratio {
    pub const fn new(num: u64, den: u64) -> Ratio {
        assert!(den != 0);
        Ratio { num, den }
    }

    pub fn apply_floor(&self, amount: u64) -> u64 {
        ((amount as u128 * self.num as u128) / self.den as u128) as u64
    }

    pub fn ge(&self, other: &Ratio) -> bool {
        self.num as u128 * other.den as u128 >= other.num as u128 * self.den as u128
    }

    pub fn le_one(&self) -> bool {
        self.num <= self.den
    }

    pub fn add(&self, other: &Ratio) -> Ratio {
        // fits in u64 for all configured weights; checked to be safe
        let num = (self.num as u128 * other.den as u128 + other.num as u128 * self.den as u128)
            .try_into()
            .expect("ratio numerator overflow");
        let den = (self.den as u128 * other.den as u128)
            .try_into()
            .expect("ratio denominator overflow");
        Ratio { num, den }
    }
}

/// The protocol's security parameter bundle.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SecurityParams {
    /// Shard count is 2^shard_bits.
    pub shard_bits: u32,
    /// Blocks each shard produces per epoch.
    pub blocks_per_epoch: u64,
    /// Multiplier on (c + fee) locked from the guarantor's deposit.
    pub collateral_ratio: Ratio,
    /// Payee compensation per arbitrated token.
    pub compensation_weight: Ratio,
    /// Arbitration-block producer reward per arbitrated token.
    pub punishment_weight: Ratio,
    /// Validity window of a withdrawal certification, in sim time units.
    pub time_interval: u64,
    /// Guarantor's share of the guarantee fee; the rest goes to signers.
    pub fee_share_guarantor: Ratio,
    /// Width of the block-expectation window.
    pub expectation_window: u64,
}

impl SecurityParams {
    pub fn shard_count(&self) -> u32 {
        1u32 << self.shard_bits
    }

    pub fn validate(&self) -> Result<(), ShardingError> {
        if self.shard_bits > 16 {
            return Err(ShardingError::BadParams("shard_bits > 16".into()));
        }
        if self.blocks_per_epoch == 0 {
            return Err(ShardingError::BadParams("blocks_per_epoch = 0".into()));
        }
        if self.time_interval == 0 {
            return Err(ShardingError::BadParams("time_interval = 0".into()));
        }
        if self.expectation_window == 0 {
            return Err(ShardingError::BadParams("expectation_window = 0".into()));
        }
        if !self.fee_share_guarantor.le_one() {
            return Err(ShardingError::BadParams("fee_share_guarantor > 1".into()));
        }
        if !self.collateral_ratio.ge(&Ratio::new(1, 1)) {
            return Err(ShardingError::BadParams("collateral_ratio < 1".into()));
        }
        // Guarantees must stay arbitrable from the locked collateral:
        // ratio * (c + fee) >= c * (comp + punish) for all c, fee.
        let owed = self.compensation_weight.add(&self.punishment_weight);
        if !self.collateral_ratio.ge(&owed) {
            return Err(ShardingError::BadParams(
                "collateral_ratio below compensation + punishment weight".into(),
            ));
        }
        Ok(())
    }
}

impl Default for SecurityParams {
    fn default() -> Self {
        SecurityParams {
            shard_bits: 1,
            blocks_per_epoch: 2,
            collateral_ratio: Ratio::new(2, 1),
            compensation_weight: Ratio::new(3, 2),
            punishment_weight: Ratio::new(1, 2),
            time_interval: 30_000,
            fee_share_guarantor: Ratio::new(1, 2),
            expectation_window: 3,
        }
    }
}

/// Per-epoch shard rosters derived from the randomness beacon.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochState {
    pub epoch_index: u64,
    pub global_hash: Digest,
    pub rosters: BTreeMap<u32, Vec<Address>>,
}

impl EpochState {
    pub fn roster(&self, shard: u32) -> &[Address] {
        self.rosters.get(&shard).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn shard_of(&self, guarantor: &Address) -> Option<u32> {
        self.rosters
            .iter()
            .find(|(_, roster)| roster.contains(guarantor))
            .map(|(shard, _)| *shard)
    }
}

/// Integer formed by the `k` most-significant bits of `value`.
pub fn upper_bits(k: u32, value: &[u8]) -> Result<u64, ShardingError> {
    let width = (value.len() * 8) as u32;
    if k > width || k > 64 {
        return Err(ShardingError::BitCountTooLarge(k, width.min(64)));
    }
    let mut out = 0u64;
    for bit in 0..k {
        let byte = value[(bit / 8) as usize];
        let b = (byte >> (7 - bit % 8)) & 1;
        out = (out << 1) | b as u64;
    }
    Ok(out)
}

/// SHA-256 of the bytewise xor-fold of one end-block hash per shard.
pub fn compute_global_hash(
    end_blocks: &[Digest],
    shard_count: u32,
) -> Result<Digest, ShardingError> {
    if end_blocks.len() != shard_count as usize {
        return Err(ShardingError::WrongEndBlockCount {
            expected: shard_count as usize,
            got: end_blocks.len(),
        });
    }
    let mut folded = [0u8; DIGEST_LEN];
    for d in end_blocks {
        for (acc, b) in folded.iter_mut().zip(d.as_bytes()) {
            *acc ^= b;
        }
    }
    Ok(hash_digest(&folded))
}

/// Genesis beacon value before any blocks exist.
pub fn genesis_global_hash(seed: u64) -> Digest {
    hash_digest(&seed.to_be_bytes())
}

fn xor_with_hash(global_hash: &Digest, addr: &Address) -> [u8; ADDRESS_LEN] {
    let mut out = [0u8; ADDRESS_LEN];
    for i in 0..ADDRESS_LEN {
        out[i] = global_hash.as_bytes()[i] ^ addr.as_bytes()[i];
    }
    out
}

/// Shard of a guarantor for the epoch: upper `s` bits of the address
/// xored with the first 20 bytes of the global hash.
pub fn guarantor_shard(global_hash: &Digest, addr: &Address, shard_bits: u32) -> u32 {
    upper_bits(shard_bits, &xor_with_hash(global_hash, addr)).expect("shard_bits <= 160") as u32
}

/// Assign every guarantor to a shard; rosters are address-sorted for
/// determinism. Empty rosters are returned, not rejected: whether an
/// empty shard is fatal is the caller's (epoch-start) decision.
pub fn assign_guarantor_shards(
    global_hash: &Digest,
    guarantors: &BTreeSet<Address>,
    shard_bits: u32,
) -> Result<BTreeMap<u32, Vec<Address>>, ShardingError> {
    if guarantors.is_empty() {
        return Err(ShardingError::NoGuarantors);
    }
    let mut rosters: BTreeMap<u32, Vec<Address>> = BTreeMap::new();
    for shard in 0..(1u32 << shard_bits) {
        rosters.insert(shard, Vec::new());
    }
    for addr in guarantors {
        let shard = guarantor_shard(global_hash, addr, shard_bits);
        rosters.get_mut(&shard).expect("shard in range").push(*addr);
    }
    // BTreeSet iteration is already address-ordered
    Ok(rosters)
}

/// A shard without a consensus group cannot produce blocks.
pub fn check_no_empty_shard(rosters: &BTreeMap<u32, Vec<Address>>) -> Result<(), ShardingError> {
    for (shard, roster) in rosters {
        if roster.is_empty() {
            return Err(ShardingError::EmptyShard(*shard));
        }
    }
    Ok(())
}

/// Shard keeping the payer's ledger: upper `s` bits of the address.
pub fn assign_tx_shard(payer: &Address, shard_bits: u32) -> u32 {
    upper_bits(shard_bits, payer.as_bytes()).expect("shard_bits <= 160") as u32
}

/// Roster sorted ascending by address xor transaction id. The head is
/// the elected guarantor; the rest is the fallback order.
pub fn elect_guarantor(roster: &[Address], txinfo_id: &Digest) -> Vec<Address> {
    let mut ranked: Vec<([u8; ADDRESS_LEN], Address)> = roster
        .iter()
        .map(|addr| (xor_with_hash(txinfo_id, addr), *addr))
        .collect();
    ranked.sort();
    ranked.into_iter().map(|(_, addr)| addr).collect()
}
