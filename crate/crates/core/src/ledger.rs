//! Internal-environment state: accounts, collateral locking, per-shard
//! record chains, the arbitration chain, and settlement.
//!
//! Tokens are unsigned integers in the smallest unit. Fee splits use
//! floor division; the guarantor takes floor(fee * share), each group
//! signer takes floor(rest / k), and the division remainder goes back
//! to the guarantor, so every settlement conserves tokens exactly.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::crypto::{
    group_sign, hash_digest, verify, Address, Digest, GroupSignature, KeyPair, PublicKeys,
    Signature,
};
use crate::external_chain::{AccountKind, MembershipEntry, PublicChainState};
use crate::messages::{Guarantee, Rosters, VerifyCtx};
use crate::rng::SplitMix64;
use crate::sharding::{EpochState, SecurityParams};
use crate::wire::{Reader, WireCodec, WireError, Writer};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum LedgerError {
    #[error("duplicate address in membership list: {0}")]
    DuplicateAddress(Address),
    #[error("unknown account: {0}")]
    UnknownAccount(Address),
    #[error("insufficient available deposit")]
    InsufficientDeposit,
    #[error("insufficient balance")]
    InsufficientBalance,
    #[error("invalid block: {0}")]
    InvalidBlock(String),
    #[error("no guarantors registered")]
    NoGuarantors,
}

/// Internal-environment account. `pending_exposure` reserves balance
/// for guarantees that are issued but not yet settled, so concurrent
/// transactions cannot jointly overcommit it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Account {
    pub addr: Address,
    pub kind: AccountKind,
    pub balance: u64,
    pub deposit: u64,
    pub locked: u64,
    pub next_txsn: u64,
    pub next_guarsn: u64,
    pub withdrawal_locked: bool,
    pub pending_exposure: u64,
}

impl Account {
    pub fn available_deposit(&self) -> u64 {
        self.deposit - self.locked
    }

    pub fn spendable_balance(&self) -> u64 {
        self.balance.saturating_sub(self.pending_exposure)
    }
}

/// Chain content of a record-chain block.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Record {
    /// A guarantee broadcast by the payee with their counter-signature;
    /// inclusion in the payer-shard chain triggers settlement.
    Settlement {
        guarantee: Guarantee,
        payee_sig: Signature,
    },
    /// Withdrawal deduction already applied when the group accepted the
    /// request; recorded here so TEE audits and replay can see it.
    WithdrawalDeduction { addr: Address, token: u64 },
    /// Compensating restore after the TEE rejected a withdrawal check.
    WithdrawalRestore { addr: Address, token: u64 },
}

impl Record {
    pub fn settlement_guarantee(&self) -> Option<&Guarantee> {
        match self {
            Record::Settlement { guarantee, .. } => Some(guarantee),
            _ => None,
        }
    }
}

impl WireCodec for Record {
    fn encode_into(&self, w: &mut Writer) {
        match self {
            Record::Settlement {
                guarantee,
                payee_sig,
            } => {
                w.u32(0);
                guarantee.encode_into(w);
                w.signature(payee_sig);
            }
            Record::WithdrawalDeduction { addr, token } => {
                w.u32(1);
                w.address(addr);
                w.u64(*token);
            }
            Record::WithdrawalRestore { addr, token } => {
                w.u32(2);
                w.address(addr);
                w.u64(*token);
            }
        }
    }

    fn decode_from(r: &mut Reader) -> Result<Self, WireError> {
        match r.u32()? {
            0 => Ok(Record::Settlement {
                guarantee: Guarantee::decode_from(r)?,
                payee_sig: r.signature()?,
            }),
            1 => Ok(Record::WithdrawalDeduction {
                addr: r.address()?,
                token: r.u64()?,
            }),
            2 => Ok(Record::WithdrawalRestore {
                addr: r.address()?,
                token: r.u64()?,
            }),
            _ => Err(WireError::BadValue),
        }
    }
}

/// Per-shard block signed by the shard's consensus group.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub shard: u32,
    pub height: u64,
    pub prev_hash: Digest,
    pub records: Vec<Record>,
    pub producer_gsig: GroupSignature,
    pub hash: Digest,
}

impl Block {
    /// What the producer group signs: everything except the gsig.
    pub fn signing_payload(
        shard: u32,
        height: u64,
        prev_hash: &Digest,
        records: &[Record],
    ) -> Vec<u8> {
        let mut w = Writer::new();
        w.u32(shard);
        w.u64(height);
        w.digest(prev_hash);
        w.u64(records.len() as u64);
        for rec in records {
            rec.encode_into(&mut w);
        }
        w.finish()
    }

    pub fn compute_hash(&self) -> Digest {
        let mut w = Writer::new();
        w.u32(self.shard);
        w.u64(self.height);
        w.digest(&self.prev_hash);
        w.u64(self.records.len() as u64);
        for rec in &self.records {
            rec.encode_into(&mut w);
        }
        self.producer_gsig.encode_into(&mut w);
        hash_digest(&w.finish())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordChain {
    pub shard: u32,
    pub blocks: Vec<Block>,
}

impl RecordChain {
    pub fn height(&self) -> u64 {
        self.blocks.len() as u64
    }

    pub fn head_hash(&self) -> Digest {
        self.blocks
            .last()
            .map(|b| b.hash)
            .unwrap_or(Digest([0u8; 32]))
    }
}

/// Outcome of a successful arbitration claim. The applied transfer
/// amounts are recorded so a replay reproduces balances exactly.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArbitrationRecord {
    pub guarantee: Guarantee,
    pub claimant: Address,
    /// Tokens owed to the claimant: amount * compensation_weight.
    pub compensation_owed: u64,
    /// Tokens owed to the arbitration block producer.
    pub punishment_owed: u64,
    /// How the payout was actually funded, filled in on application.
    pub paid_compensation: u64,
    pub paid_punishment: u64,
    pub from_deposit: u64,
    pub from_balance: u64,
    pub loss: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArbitrationBlock {
    pub height: u64,
    pub prev_hash: Digest,
    pub records: Vec<ArbitrationRecord>,
    pub producer: Address,
    pub hash: Digest,
}

impl ArbitrationBlock {
    fn compute_hash(&self) -> Digest {
        let mut w = Writer::new();
        w.u64(self.height);
        w.digest(&self.prev_hash);
        w.u64(self.records.len() as u64);
        for rec in &self.records {
            // content hash over the serialized record fields
            rec.guarantee.encode_into(&mut w);
            w.address(&rec.claimant);
            w.u64(rec.compensation_owed);
            w.u64(rec.punishment_owed);
            w.u64(rec.paid_compensation);
            w.u64(rec.paid_punishment);
            w.u64(rec.from_deposit);
            w.u64(rec.from_balance);
            w.u64(rec.loss);
        }
        w.address(&self.producer);
        hash_digest(&w.finish())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArbitrationChain {
    pub blocks: Vec<ArbitrationBlock>,
}

impl ArbitrationChain {
    pub fn head_hash(&self) -> Digest {
        self.blocks
            .last()
            .map(|b| b.hash)
            .unwrap_or(Digest([0u8; 32]))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossEvent {
    pub guarantor: Address,
    pub amount: u64,
}

/// Aggregate root of the internal environment.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LedgerState {
    pub accounts: BTreeMap<Address, Account>,
    pub record_chains: BTreeMap<u32, RecordChain>,
    pub arbitration_chain: ArbitrationChain,
    pub epoch: EpochState,
    /// All epoch states since genesis, indexed by epoch number, so any
    /// recorded block revalidates against the roster that signed it.
    pub epoch_history: Vec<EpochState>,
    /// Withdrawals deducted internally but not yet paid out externally.
    pub pending_withdrawals: BTreeMap<Address, u64>,
    pub loss_events: Vec<LossEvent>,
    /// Bootstrap record, kept for replay audits.
    pub membership: Vec<MembershipEntry>,
}

impl Rosters for LedgerState {
    fn roster(&self, epoch: u64, shard: u32) -> Option<&[Address]> {
        let state = self.epoch_history.get(epoch as usize)?;
        if state.epoch_index != epoch {
            return None;
        }
        Some(state.roster(shard))
    }
}

/// One membership entry becomes one account: clients convert their
/// deposit 1:1 into internal balance, guarantors keep it as deposit.
pub fn bootstrap_from_membership(
    membership: &[MembershipEntry],
    genesis_epoch: EpochState,
) -> Result<LedgerState, LedgerError> {
    let mut accounts = BTreeMap::new();
    for entry in membership {
        let (balance, deposit) = match entry.kind {
            AccountKind::Client => (entry.deposit, 0),
            AccountKind::Guarantor => (0, entry.deposit),
        };
        let account = Account {
            addr: entry.addr,
            kind: entry.kind,
            balance,
            deposit,
            locked: 0,
            next_txsn: 0,
            next_guarsn: 0,
            withdrawal_locked: false,
            pending_exposure: 0,
        };
        if accounts.insert(entry.addr, account).is_some() {
            return Err(LedgerError::DuplicateAddress(entry.addr));
        }
    }
    let mut record_chains = BTreeMap::new();
    for shard in genesis_epoch.rosters.keys() {
        record_chains.insert(
            *shard,
            RecordChain {
                shard: *shard,
                blocks: Vec::new(),
            },
        );
    }
    Ok(LedgerState {
        accounts,
        record_chains,
        arbitration_chain: ArbitrationChain::default(),
        epoch_history: vec![genesis_epoch.clone()],
        epoch: genesis_epoch,
        pending_withdrawals: BTreeMap::new(),
        loss_events: Vec::new(),
        membership: membership.to_vec(),
    })
}

impl LedgerState {
    pub fn account(&self, addr: &Address) -> Result<&Account, LedgerError> {
        self.accounts
            .get(addr)
            .ok_or(LedgerError::UnknownAccount(*addr))
    }

    pub fn account_mut(&mut self, addr: &Address) -> Result<&mut Account, LedgerError> {
        self.accounts
            .get_mut(addr)
            .ok_or(LedgerError::UnknownAccount(*addr))
    }

    pub fn chain(&self, shard: u32) -> &RecordChain {
        self.record_chains.get(&shard).expect("shard chain exists")
    }

    /// Reserve guarantor deposit for an issued guarantee.
    pub fn lock_capacity(&mut self, guarantor: &Address, amount: u64) -> Result<(), LedgerError> {
        let account = self.account_mut(guarantor)?;
        if account.available_deposit() < amount {
            return Err(LedgerError::InsufficientDeposit);
        }
        account.locked += amount;
        Ok(())
    }

    /// Release locks held by members of the observing group for every
    /// guarantee recorded in a valid block of the guarantees' shard.
    pub fn unlock_on_block(
        &mut self,
        observer_roster: &[Address],
        block: &Block,
        params: &SecurityParams,
        keys: &dyn PublicKeys,
    ) -> Vec<(Address, u64)> {
        let mut releases: Vec<(Address, u64)> = Vec::new();
        {
            let ctx = VerifyCtx {
                keys,
                rosters: self,
                shard_bits: params.shard_bits,
            };
            let Some(block_roster) = self.roster(block.producer_gsig.epoch, block.shard) else {
                return releases;
            };
            if !validate_block(block, block_roster, &ctx) {
                return releases;
            }
            for record in &block.records {
                let Some(guarantee) = record.settlement_guarantee() else {
                    continue;
                };
                if guarantee.expectation().shard != block.shard {
                    continue;
                }
                let guarantor = *guarantee.guarantor();
                if !observer_roster.contains(&guarantor) {
                    continue;
                }
                let tx = guarantee.txinfo();
                let amount = params
                    .collateral_ratio
                    .apply_floor(tx.amount + tx.guarantee_fee);
                releases.push((guarantor, amount));
            }
        }
        for (guarantor, amount) in &releases {
            if let Ok(account) = self.account_mut(guarantor) {
                // punishment may already have shrunk the deposit
                account.locked = account.locked.saturating_sub(*amount);
            }
        }
        releases
    }

    /// Move the transaction amount and split the guarantee fee.
    pub fn apply_settlement(
        &mut self,
        guarantee: &Guarantee,
        params: &SecurityParams,
    ) -> Result<(), LedgerError> {
        let tx = guarantee.txinfo().clone();
        let total = tx.amount + tx.guarantee_fee;
        {
            let payer = self.account_mut(&tx.payer)?;
            if payer.balance < total {
                return Err(LedgerError::InsufficientBalance);
            }
            payer.balance -= total;
            payer.pending_exposure = payer.pending_exposure.saturating_sub(total);
        }
        self.account_mut(&tx.payee)?.balance += tx.amount;

        let guarantor = *guarantee.guarantor();
        let fee = tx.guarantee_fee;
        let guarantor_share = params.fee_share_guarantor.apply_floor(fee);
        let rest = fee - guarantor_share;
        let signers: Vec<Address> = guarantee
            .gsig
            .member_sigs
            .iter()
            .map(|(a, _)| *a)
            .collect();
        let per_signer = if signers.is_empty() {
            0
        } else {
            rest / signers.len() as u64
        };
        let remainder = rest - per_signer * signers.len() as u64;
        self.account_mut(&guarantor)?.balance += guarantor_share + remainder;
        for signer in &signers {
            self.account_mut(signer)?.balance += per_signer;
        }
        Ok(())
    }

    /// Build the next block for a shard from pending records. Pending
    /// settlements are included only when the expectation window covers
    /// the new height and the payer can still cover the amount.
    pub fn produce_block(
        &self,
        shard: u32,
        pending: &[Record],
        roster_keys: &[&KeyPair],
    ) -> Block {
        let chain = self.chain(shard);
        let height = chain.height();
        let prev_hash = chain.head_hash();
        let records: Vec<Record> = pending
            .iter()
            .filter(|rec| match rec {
                Record::Settlement { guarantee, .. } => {
                    let exp = guarantee.expectation();
                    let tx = guarantee.txinfo();
                    let affordable = self
                        .accounts
                        .get(&tx.payer)
                        .map(|a| a.balance >= tx.amount + tx.guarantee_fee)
                        .unwrap_or(false);
                    exp.height_min <= height && height <= exp.height_max && affordable
                }
                _ => true,
            })
            .cloned()
            .collect();
        let payload = Block::signing_payload(shard, height, &prev_hash, &records);
        let producer_gsig = group_sign(self.epoch.epoch_index, shard, roster_keys, &payload);
        let mut block = Block {
            shard,
            height,
            prev_hash,
            records,
            producer_gsig,
            hash: Digest([0u8; 32]),
        };
        block.hash = block.compute_hash();
        block
    }

    /// Append a validated block to its shard chain and apply its
    /// settlements. Deductions and restores were applied when they
    /// happened; the block only records them.
    pub fn apply_block(
        &mut self,
        block: Block,
        params: &SecurityParams,
        keys: &dyn PublicKeys,
    ) -> Result<(), LedgerError> {
        {
            let ctx = VerifyCtx {
                keys,
                rosters: self,
                shard_bits: params.shard_bits,
            };
            let roster = self
                .roster(block.producer_gsig.epoch, block.shard)
                .ok_or_else(|| LedgerError::InvalidBlock("unknown producer roster".into()))?;
            if !validate_block(&block, roster, &ctx) {
                return Err(LedgerError::InvalidBlock("validation failed".into()));
            }
        }
        let chain = self.chain(block.shard);
        if block.height != chain.height() || block.prev_hash != chain.head_hash() {
            return Err(LedgerError::InvalidBlock("broken chain link".into()));
        }
        for record in &block.records {
            if let Some(guarantee) = record.settlement_guarantee() {
                self.apply_settlement(&guarantee.clone(), params)?;
            }
        }
        self.record_chains
            .get_mut(&block.shard)
            .expect("shard chain exists")
            .blocks
            .push(block);
        Ok(())
    }

    /// Produce the next arbitration block: the producer is drawn by a
    /// seeded uniform lottery over registered guarantors (the stand-in
    /// for proof of work), and punishment payouts are applied.
    pub fn append_arbitration_block(
        &mut self,
        mut records: Vec<ArbitrationRecord>,
        rng: &mut SplitMix64,
    ) -> Result<&ArbitrationBlock, LedgerError> {
        let guarantors: Vec<Address> = self
            .accounts
            .values()
            .filter(|a| a.kind == AccountKind::Guarantor)
            .map(|a| a.addr)
            .collect();
        if guarantors.is_empty() {
            return Err(LedgerError::NoGuarantors);
        }
        let producer = guarantors[rng.next_below(guarantors.len() as u64) as usize];

        for record in &mut records {
            self.apply_punishment(record, &producer)?;
        }
        let height = self.arbitration_chain.blocks.len() as u64;
        let prev_hash = self.arbitration_chain.head_hash();
        let mut block = ArbitrationBlock {
            height,
            prev_hash,
            records,
            producer,
            hash: Digest([0u8; 32]),
        };
        block.hash = block.compute_hash();
        self.arbitration_chain.blocks.push(block);
        Ok(self.arbitration_chain.blocks.last().expect("just pushed"))
    }

    /// Pay compensation and punishment from the convicted guarantor,
    /// deposit first, then balance. A shortfall is logged, not minted.
    fn apply_punishment(
        &mut self,
        record: &mut ArbitrationRecord,
        producer: &Address,
    ) -> Result<(), LedgerError> {
        let guarantor = *record.guarantee.guarantor();
        let owed = record.compensation_owed + record.punishment_owed;
        let (from_deposit, from_balance) = {
            let account = self.account_mut(&guarantor)?;
            let from_deposit = owed.min(account.deposit);
            let from_balance = (owed - from_deposit).min(account.balance);
            account.deposit -= from_deposit;
            account.balance -= from_balance;
            account.locked = account.locked.min(account.deposit);
            (from_deposit, from_balance)
        };
        let paid = from_deposit + from_balance;
        let paid_compensation = paid.min(record.compensation_owed);
        let paid_punishment = paid - paid_compensation;
        self.account_mut(&record.claimant)?.balance += paid_compensation;
        self.account_mut(producer)?.balance += paid_punishment;
        record.from_deposit = from_deposit;
        record.from_balance = from_balance;
        record.paid_compensation = paid_compensation;
        record.paid_punishment = paid_punishment;
        record.loss = owed - paid;
        if record.loss > 0 {
            self.loss_events.push(LossEvent {
                guarantor,
                amount: record.loss,
            });
        }
        Ok(())
    }

    /// Sum of all internal tokens, including locked deposit.
    pub fn internal_total(&self) -> u64 {
        self.accounts.values().map(|a| a.balance + a.deposit).sum()
    }

    pub fn pending_withdrawal_total(&self) -> u64 {
        self.pending_withdrawals.values().sum()
    }

    /// Exact global conservation: the contract account backs every
    /// internal token plus withdrawals in flight, and the external
    /// chain's own books balance.
    pub fn check_conservation(&self, external: &PublicChainState) -> Result<(), String> {
        if !external.check_conservation() {
            return Err("external balances + contract balance != initial total".into());
        }
        let backed = self.internal_total() + self.pending_withdrawal_total();
        if backed != external.contract_balance {
            return Err(format!(
                "internal total {} + pending withdrawals {} != contract balance {}",
                self.internal_total(),
                self.pending_withdrawal_total(),
                external.contract_balance
            ));
        }
        for account in self.accounts.values() {
            if account.locked > account.deposit {
                return Err(format!("account {} locked > deposit", account.addr));
            }
        }
        Ok(())
    }

    /// Revalidate every stored block from genesis: hash links, group
    /// signatures against the epoch that produced them, record
    /// structure, and the epoch/height correspondence.
    pub fn check_chain_integrity(
        &self,
        params: &SecurityParams,
        keys: &dyn PublicKeys,
    ) -> Result<(), String> {
        let ctx = VerifyCtx {
            keys,
            rosters: self,
            shard_bits: params.shard_bits,
        };
        for (shard, chain) in &self.record_chains {
            let mut prev = Digest([0u8; 32]);
            for (i, block) in chain.blocks.iter().enumerate() {
                if block.shard != *shard || block.height != i as u64 {
                    return Err(format!("shard {shard} block {i}: bad height or shard"));
                }
                if block.prev_hash != prev {
                    return Err(format!("shard {shard} block {i}: broken hash link"));
                }
                let expected_epoch = block.height / params.blocks_per_epoch;
                if block.producer_gsig.epoch != expected_epoch {
                    return Err(format!("shard {shard} block {i}: wrong epoch"));
                }
                let roster = self
                    .roster(block.producer_gsig.epoch, *shard)
                    .ok_or_else(|| format!("shard {shard} block {i}: unknown roster"))?;
                if !validate_block(block, roster, &ctx) {
                    return Err(format!("shard {shard} block {i}: validation failed"));
                }
                prev = block.hash;
            }
        }
        let mut prev = Digest([0u8; 32]);
        for (i, block) in self.arbitration_chain.blocks.iter().enumerate() {
            if block.height != i as u64 || block.prev_hash != prev {
                return Err(format!("arbitration block {i}: broken link"));
            }
            if block.hash != block.compute_hash() {
                return Err(format!("arbitration block {i}: bad hash"));
            }
            prev = block.hash;
        }
        Ok(())
    }

    /// Rebuild balances and deposits from the bootstrap membership plus
    /// every recorded effect, and compare with the live accounts.
    /// `unrecorded` covers effects applied but not yet in any block.
    pub fn replay_balances(
        &self,
        params: &SecurityParams,
        unrecorded: &[Record],
    ) -> Result<(), String> {
        let mut balance: BTreeMap<Address, i128> = BTreeMap::new();
        let mut deposit: BTreeMap<Address, i128> = BTreeMap::new();
        for entry in &self.membership {
            match entry.kind {
                AccountKind::Client => {
                    *balance.entry(entry.addr).or_insert(0) += entry.deposit as i128
                }
                AccountKind::Guarantor => {
                    *deposit.entry(entry.addr).or_insert(0) += entry.deposit as i128
                }
            }
        }
        let mut apply = |record: &Record| match record {
            Record::Settlement { guarantee, .. } => {
                let tx = guarantee.txinfo();
                let total = (tx.amount + tx.guarantee_fee) as i128;
                *balance.entry(tx.payer).or_insert(0) -= total;
                *balance.entry(tx.payee).or_insert(0) += tx.amount as i128;
                let fee = tx.guarantee_fee;
                let guarantor_share = params.fee_share_guarantor.apply_floor(fee);
                let rest = fee - guarantor_share;
                let k = guarantee.gsig.member_sigs.len() as u64;
                let per_signer = if k == 0 { 0 } else { rest / k };
                let remainder = rest - per_signer * k;
                *balance.entry(*guarantee.guarantor()).or_insert(0) +=
                    (guarantor_share + remainder) as i128;
                for (signer, _) in &guarantee.gsig.member_sigs {
                    *balance.entry(*signer).or_insert(0) += per_signer as i128;
                }
            }
            Record::WithdrawalDeduction { addr, token } => {
                *balance.entry(*addr).or_insert(0) -= *token as i128;
            }
            Record::WithdrawalRestore { addr, token } => {
                *balance.entry(*addr).or_insert(0) += *token as i128;
            }
        };
        for chain in self.record_chains.values() {
            for block in &chain.blocks {
                for record in &block.records {
                    apply(record);
                }
            }
        }
        for record in unrecorded {
            apply(record);
        }
        for block in &self.arbitration_chain.blocks {
            for rec in &block.records {
                let guarantor = *rec.guarantee.guarantor();
                *deposit.entry(guarantor).or_insert(0) -= rec.from_deposit as i128;
                *balance.entry(guarantor).or_insert(0) -= rec.from_balance as i128;
                *balance.entry(rec.claimant).or_insert(0) += rec.paid_compensation as i128;
                *balance.entry(block.producer).or_insert(0) += rec.paid_punishment as i128;
            }
        }
        for account in self.accounts.values() {
            let b = balance.get(&account.addr).copied().unwrap_or(0);
            let d = deposit.get(&account.addr).copied().unwrap_or(0);
            if b != account.balance as i128 || d != account.deposit as i128 {
                return Err(format!(
                    "replay mismatch for {}: balance {b} vs {}, deposit {d} vs {}",
                    account.addr, account.balance, account.deposit
                ));
            }
        }
        Ok(())
    }
}

/// True iff the hash recomputes, the producer group signature meets the
/// roster threshold, and every record is structurally valid.
pub fn validate_block(block: &Block, roster: &[Address], ctx: &VerifyCtx) -> bool {
    if block.hash != block.compute_hash() || roster.is_empty() {
        return false;
    }
    if block.producer_gsig.shard != block.shard {
        return false;
    }
    let payload =
        Block::signing_payload(block.shard, block.height, &block.prev_hash, &block.records);
    let threshold = crate::crypto::group_threshold(roster.len());
    if !crate::crypto::group_verify(roster, threshold, &payload, &block.producer_gsig, ctx.keys) {
        return false;
    }
    block.records.iter().all(|record| match record {
        Record::Settlement {
            guarantee,
            payee_sig,
        } => {
            guarantee.verify_structure(ctx)
                && payee_sig.signer == guarantee.txinfo().payee
                && ctx
                    .keys
                    .public_key_of(&guarantee.txinfo().payee)
                    .map(|pk| verify(&pk, &guarantee.encode(), payee_sig))
                    .unwrap_or(false)
        }
        Record::WithdrawalDeduction { token, .. } => *token > 0,
        Record::WithdrawalRestore { token, .. } => *token > 0,
    })
}
