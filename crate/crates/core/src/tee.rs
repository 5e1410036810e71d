//! Mock trusted execution environment. Holds the published signing key,
//! audits withdrawal checks against the internal ledger, and issues
//! certifications. Modeled as an honest, non-failing oracle.

use std::collections::BTreeMap;

use crate::crypto::{Address, KeyPair, PublicKeys};
use crate::ledger::{LedgerState, Record};
use crate::messages::{VerifyCtx, WithdrawalCertification, WithdrawalCheck};
use crate::sharding::SecurityParams;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum TeeError {
    #[error("withdrawal check failed structural validation")]
    InvalidCheck,
    #[error("a check is already pending for this address")]
    AlreadyPending,
    #[error("no pending check for this address")]
    NoPendingCheck,
    #[error("unknown account")]
    UnknownAccount,
}

/// Result of auditing a pending check against the ledger. On rejection
/// the deducted tokens have already been restored; the compensating
/// record must be included in the shard's next block.
#[derive(Debug)]
pub enum CertifyOutcome {
    Certified(WithdrawalCertification),
    Rejected { restore: Option<Record> },
}

pub struct TeeState {
    keys: KeyPair,
    pending: BTreeMap<Address, WithdrawalCheck>,
}

impl TeeState {
    pub fn new(keys: KeyPair) -> Self {
        TeeState {
            keys,
            pending: BTreeMap::new(),
        }
    }

    pub fn keys(&self) -> &KeyPair {
        &self.keys
    }

    pub fn has_pending(&self, addr: &Address) -> bool {
        self.pending.contains_key(addr)
    }

    /// Accept a group-signed check and broadcast the account lock:
    /// while locked, the account cannot appear in new transactions.
    pub fn submit_check(
        &mut self,
        check: WithdrawalCheck,
        ledger: &mut LedgerState,
        params: &SecurityParams,
        keys: &dyn PublicKeys,
    ) -> Result<(), TeeError> {
        let ctx = VerifyCtx {
            keys,
            rosters: ledger,
            shard_bits: params.shard_bits,
        };
        if !check.verify_structure(&ctx) {
            return Err(TeeError::InvalidCheck);
        }
        let addr = check.request.addr;
        if self.pending.contains_key(&addr) {
            return Err(TeeError::AlreadyPending);
        }
        ledger
            .account_mut(&addr)
            .map_err(|_| TeeError::UnknownAccount)?
            .withdrawal_locked = true;
        self.pending.insert(addr, check);
        Ok(())
    }

    /// Audit the pending check against the recorded deduction. The lock
    /// is always relieved: by certification on an exact match, or by
    /// rejection plus a compensating restore otherwise.
    pub fn certify(
        &mut self,
        addr: &Address,
        now: u64,
        ledger: &mut LedgerState,
    ) -> Result<CertifyOutcome, TeeError> {
        let check = self.pending.remove(addr).ok_or(TeeError::NoPendingCheck)?;
        let account = ledger
            .account_mut(addr)
            .map_err(|_| TeeError::UnknownAccount)?;
        account.withdrawal_locked = false;
        let deducted = ledger.pending_withdrawals.get(addr).copied();
        if deducted == Some(check.request.token) {
            let cert =
                WithdrawalCertification::assemble(&self.keys, now, *addr, check.request.token);
            Ok(CertifyOutcome::Certified(cert))
        } else {
            // deduction absent or amount differs: undo whatever the
            // group deducted and record the restore
            let restore = match ledger.pending_withdrawals.remove(addr) {
                Some(token) => {
                    ledger
                        .account_mut(addr)
                        .map_err(|_| TeeError::UnknownAccount)?
                        .balance += token;
                    Some(Record::WithdrawalRestore { addr: *addr, token })
                }
                None => None,
            };
            Ok(CertifyOutcome::Rejected { restore })
        }
    }
}
