//! Node-role steps of the guarantee handshake, withdrawal group step,
//! arbitration filing, and the epoch transition.
//!
//! Every operation is a guard-then-act function over the shared ledger
//! view: on failure nothing is mutated.

use std::collections::BTreeSet;

use crate::crypto::{group_sign, sign, Address, Digest, KeyPair, PublicKeys};
use crate::ledger::{ArbitrationRecord, LedgerState, Record};
use crate::messages::{
    BlockExpectation, Guarantee, PreGuarantee1, PreGuarantee2, Rosters, TxInfo, VerifyCtx,
    WithdrawalCheck, WithdrawalRequest,
};
use crate::sharding::{
    assign_guarantor_shards, assign_tx_shard, check_no_empty_shard, compute_global_hash,
    elect_guarantor, EpochState, SecurityParams, ShardingError,
};
use crate::wire::WireCodec;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ProtocolFailure {
    #[error("invalid signatures")]
    BadSignatures,
    #[error("payer cannot cover amount plus fee")]
    InsufficientBalance,
    #[error("transaction serial number is not the expected next value")]
    InvalidTxSn,
    #[error("party is locked for withdrawal")]
    WithdrawalLocked,
    #[error("guarantor is not the justified election candidate")]
    NotElectedCandidate,
    #[error("a guarantee response for this transaction was already accepted")]
    DuplicateResponse,
    #[error("shard correspondence check failed")]
    ShardMismatch,
    #[error("guarantor deposit cannot cover the collateral")]
    InsufficientDeposit,
    #[error("guarantee serial number is not the expected next value")]
    InvalidGuarSn,
    #[error("a guarantee was already group-signed for this transaction")]
    AlreadyGuaranteed,
    #[error("group signature is from a stale epoch")]
    StaleEpoch,
    #[error("guarantee does not match the co-signed transaction")]
    Mismatch,
    #[error("unknown account")]
    UnknownAccount,
    #[error("a withdrawal is already pending for this address")]
    WithdrawalPending,
    #[error("expectation window has not fully elapsed")]
    WindowNotElapsed,
    #[error("the guarantee is recorded; the claim is unfounded")]
    GuaranteeRecorded,
    #[error("epoch is not complete: {0}")]
    EpochIncomplete(String),
    #[error("reshuffle failed: {0}")]
    Reshuffle(#[from] ShardingError),
}

/// Per-shard group bookkeeping that is not part of the ledger proper.
#[derive(Clone, Debug, Default)]
pub struct GroupState {
    /// At-most-once guard: transaction ids already group-signed.
    pub guaranteed_ids: BTreeSet<Digest>,
}

fn ctx<'a>(
    keys: &'a dyn PublicKeys,
    ledger: &'a LedgerState,
    params: &SecurityParams,
) -> VerifyCtx<'a> {
    VerifyCtx {
        keys,
        rosters: ledger,
        shard_bits: params.shard_bits,
    }
}

/// The elected guarantor checks a transaction and answers with the
/// first pre-guarantee. `candidate_rank` states which election fallback
/// position the responding guarantor claims (0 = elected head).
pub fn verify_txinfo(
    guarantor: &KeyPair,
    txinfo: &TxInfo,
    candidate_rank: usize,
    ledger: &mut LedgerState,
    params: &SecurityParams,
    keys: &dyn PublicKeys,
) -> Result<PreGuarantee1, ProtocolFailure> {
    if !txinfo.verify_structure(keys) {
        return Err(ProtocolFailure::BadSignatures);
    }
    let shard = assign_tx_shard(&txinfo.payer, params.shard_bits);
    let roster = ledger
        .roster(ledger.epoch.epoch_index, shard)
        .ok_or(ProtocolFailure::ShardMismatch)?;
    let order = elect_guarantor(roster, &txinfo.id);
    if order.get(candidate_rank) != Some(&guarantor.address()) {
        return Err(ProtocolFailure::NotElectedCandidate);
    }
    let payer = ledger
        .account(&txinfo.payer)
        .map_err(|_| ProtocolFailure::UnknownAccount)?;
    let payee = ledger
        .account(&txinfo.payee)
        .map_err(|_| ProtocolFailure::UnknownAccount)?;
    if payer.withdrawal_locked || payee.withdrawal_locked {
        return Err(ProtocolFailure::WithdrawalLocked);
    }
    if txinfo.txsn_payer != payer.next_txsn || txinfo.txsn_payee != payee.next_txsn {
        return Err(ProtocolFailure::InvalidTxSn);
    }
    let total = txinfo.amount + txinfo.guarantee_fee;
    if payer.spendable_balance() < total {
        return Err(ProtocolFailure::InsufficientBalance);
    }
    // all guards passed: reserve the exposure and consume the serials
    let guar_sn = ledger
        .account(&guarantor.address())
        .map_err(|_| ProtocolFailure::UnknownAccount)?
        .next_guarsn;
    {
        let payer = ledger.account_mut(&txinfo.payer).expect("checked");
        payer.pending_exposure += total;
        payer.next_txsn += 1;
    }
    ledger.account_mut(&txinfo.payee).expect("checked").next_txsn += 1;

    let height = ledger.chain(shard).height();
    let expectation = BlockExpectation {
        shard,
        height_min: height + 1,
        height_max: height + 1 + params.expectation_window,
    };
    Ok(PreGuarantee1::assemble(
        txinfo.clone(),
        guar_sn,
        expectation,
        guarantor,
    ))
}

/// The payer counter-signs the first valid response per transaction.
/// `expected_candidate` is the guarantor the payer currently accepts,
/// per the election order and elapsed fallback timeouts.
pub fn payer_counter_sign(
    payer: &KeyPair,
    pg1: PreGuarantee1,
    expected_candidate: &Address,
    responded: &mut BTreeSet<Digest>,
    ledger: &LedgerState,
    params: &SecurityParams,
    keys: &dyn PublicKeys,
) -> Result<PreGuarantee2, ProtocolFailure> {
    if pg1.txinfo.payer != payer.address() {
        return Err(ProtocolFailure::Mismatch);
    }
    if !pg1.verify_structure(&ctx(keys, ledger, params)) {
        return Err(ProtocolFailure::BadSignatures);
    }
    if pg1.expectation.shard != assign_tx_shard(&payer.address(), params.shard_bits) {
        return Err(ProtocolFailure::ShardMismatch);
    }
    if &pg1.guarantor != expected_candidate {
        return Err(ProtocolFailure::NotElectedCandidate);
    }
    if !responded.insert(pg1.txinfo.id) {
        return Err(ProtocolFailure::DuplicateResponse);
    }
    Ok(PreGuarantee2::assemble(pg1, payer))
}

/// The guarantor's group verifies the counter-signed response, locks
/// the collateral, and produces the final guarantee.
pub fn group_generate_guarantee(
    roster_keys: &[&KeyPair],
    pg2: PreGuarantee2,
    candidate_rank: usize,
    group: &mut GroupState,
    ledger: &mut LedgerState,
    params: &SecurityParams,
    keys: &dyn PublicKeys,
) -> Result<Guarantee, ProtocolFailure> {
    if !pg2.verify_structure(&ctx(keys, ledger, params)) {
        return Err(ProtocolFailure::BadSignatures);
    }
    let txinfo = &pg2.pg1.txinfo;
    let shard = pg2.pg1.expectation.shard;
    let epoch = ledger.epoch.epoch_index;
    let roster = ledger
        .roster(epoch, shard)
        .ok_or(ProtocolFailure::ShardMismatch)?;
    let order = elect_guarantor(roster, &txinfo.id);
    if order.get(candidate_rank) != Some(&pg2.pg1.guarantor) {
        return Err(ProtocolFailure::NotElectedCandidate);
    }
    if group.guaranteed_ids.contains(&txinfo.id) {
        return Err(ProtocolFailure::AlreadyGuaranteed);
    }
    let guarantor_account = ledger
        .account(&pg2.pg1.guarantor)
        .map_err(|_| ProtocolFailure::UnknownAccount)?;
    if pg2.pg1.guar_sn != guarantor_account.next_guarsn {
        return Err(ProtocolFailure::InvalidGuarSn);
    }
    let collateral = params
        .collateral_ratio
        .apply_floor(txinfo.amount + txinfo.guarantee_fee);
    if guarantor_account.available_deposit() < collateral {
        return Err(ProtocolFailure::InsufficientDeposit);
    }
    ledger
        .lock_capacity(&pg2.pg1.guarantor, collateral)
        .map_err(|_| ProtocolFailure::InsufficientDeposit)?;
    ledger
        .account_mut(&pg2.pg1.guarantor)
        .expect("checked")
        .next_guarsn += 1;
    group.guaranteed_ids.insert(txinfo.id);

    let gsig = group_sign(epoch, shard, roster_keys, &pg2.encode());
    Ok(Guarantee { pg2, gsig })
}

/// The payee accepts a guarantee only if the full chain verifies, the
/// group signature is from the current epoch, and the transaction is
/// the one the payee co-signed.
pub fn payee_verify(
    payee: &KeyPair,
    guarantee: &Guarantee,
    ledger: &LedgerState,
    params: &SecurityParams,
    keys: &dyn PublicKeys,
) -> Result<(), ProtocolFailure> {
    let txinfo = guarantee.txinfo();
    if txinfo.payee != payee.address() {
        return Err(ProtocolFailure::Mismatch);
    }
    if !guarantee.verify_structure(&ctx(keys, ledger, params)) {
        return Err(ProtocolFailure::BadSignatures);
    }
    if guarantee.gsig.epoch != ledger.epoch.epoch_index {
        return Err(ProtocolFailure::StaleEpoch);
    }
    Ok(())
}

/// The payee's countersigned broadcast, the record the payer-shard
/// group packs into a block to settle the transaction.
pub fn payee_settlement_record(payee: &KeyPair, guarantee: &Guarantee) -> Record {
    Record::Settlement {
        guarantee: guarantee.clone(),
        payee_sig: sign(payee, &guarantee.encode()),
    }
}

/// The requester's shard group deducts the tokens immediately and
/// endorses the withdrawal check for the TEE.
pub fn handle_withdrawal_request(
    roster_keys: &[&KeyPair],
    request: WithdrawalRequest,
    ledger: &mut LedgerState,
    params: &SecurityParams,
    keys: &dyn PublicKeys,
) -> Result<(WithdrawalCheck, Record), ProtocolFailure> {
    if !request.verify_structure(keys) {
        return Err(ProtocolFailure::BadSignatures);
    }
    let shard = assign_tx_shard(&request.addr, params.shard_bits);
    if ledger.roster(ledger.epoch.epoch_index, shard).is_none() {
        return Err(ProtocolFailure::ShardMismatch);
    }
    if ledger.pending_withdrawals.contains_key(&request.addr) {
        return Err(ProtocolFailure::WithdrawalPending);
    }
    let account = ledger
        .account(&request.addr)
        .map_err(|_| ProtocolFailure::UnknownAccount)?;
    if account.spendable_balance() < request.token {
        return Err(ProtocolFailure::InsufficientBalance);
    }
    ledger.account_mut(&request.addr).expect("checked").balance -= request.token;
    ledger
        .pending_withdrawals
        .insert(request.addr, request.token);
    let record = Record::WithdrawalDeduction {
        addr: request.addr,
        token: request.token,
    };
    let gsig = group_sign(
        ledger.epoch.epoch_index,
        shard,
        roster_keys,
        &request.encode(),
    );
    Ok((WithdrawalCheck { request, gsig }, record))
}

/// The payee claims compensation for a guarantee that never appeared in
/// its expectation window. Valid only after the window has fully
/// elapsed and only if no block in the window records the guarantee.
pub fn file_arbitration(
    claimant: &Address,
    guarantee: &Guarantee,
    ledger: &LedgerState,
    params: &SecurityParams,
    keys: &dyn PublicKeys,
) -> Result<ArbitrationRecord, ProtocolFailure> {
    if claimant != &guarantee.txinfo().payee {
        return Err(ProtocolFailure::Mismatch);
    }
    if !guarantee.verify_structure(&ctx(keys, ledger, params)) {
        return Err(ProtocolFailure::BadSignatures);
    }
    let exp = guarantee.expectation();
    let chain = ledger.chain(exp.shard);
    if chain.height() <= exp.height_max {
        return Err(ProtocolFailure::WindowNotElapsed);
    }
    let id = guarantee.txinfo().id;
    for block in &chain.blocks {
        if block.height < exp.height_min || block.height > exp.height_max {
            continue;
        }
        for record in &block.records {
            if let Some(recorded) = record.settlement_guarantee() {
                if recorded.txinfo().id == id {
                    return Err(ProtocolFailure::GuaranteeRecorded);
                }
            }
        }
    }
    let amount = guarantee.txinfo().amount;
    Ok(ArbitrationRecord {
        guarantee: guarantee.clone(),
        claimant: *claimant,
        compensation_owed: params.compensation_weight.apply_floor(amount),
        punishment_owed: params.punishment_weight.apply_floor(amount),
        paid_compensation: 0,
        paid_punishment: 0,
        from_deposit: 0,
        from_balance: 0,
        loss: 0,
    })
}

/// Close the epoch once every shard has produced its block quota,
/// derive the next beacon value from the end blocks, and reshuffle.
pub fn epoch_tick(
    ledger: &mut LedgerState,
    params: &SecurityParams,
) -> Result<EpochState, ProtocolFailure> {
    let epoch = ledger.epoch.epoch_index;
    let target = (epoch + 1) * params.blocks_per_epoch;
    let mut end_hashes = Vec::with_capacity(params.shard_count() as usize);
    for shard in 0..params.shard_count() {
        let chain = ledger.chain(shard);
        if chain.height() != target {
            return Err(ProtocolFailure::EpochIncomplete(format!(
                "shard {shard} at height {} of {target}",
                chain.height()
            )));
        }
        end_hashes.push(chain.head_hash());
    }
    let global_hash = compute_global_hash(&end_hashes, params.shard_count())?;
    let guarantors: BTreeSet<Address> = ledger
        .accounts
        .values()
        .filter(|a| a.kind == crate::external_chain::AccountKind::Guarantor)
        .map(|a| a.addr)
        .collect();
    let rosters = assign_guarantor_shards(&global_hash, &guarantors, params.shard_bits)?;
    check_no_empty_shard(&rosters)?;
    let next = EpochState {
        epoch_index: epoch + 1,
        global_hash,
        rosters,
    };
    ledger.epoch_history.push(next.clone());
    ledger.epoch = next.clone();
    Ok(next)
}
