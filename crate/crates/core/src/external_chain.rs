//! Mock public blockchain hosting the contract account, the membership
//! list, and the withdraw contract. Contract calls are instantaneous;
//! confirmation latency on the real chain is only a simulator metric.

use std::collections::{BTreeMap, BTreeSet};

use ed25519_dalek::VerifyingKey;
use serde::{Deserialize, Serialize};

use crate::crypto::{hash_digest, verify, Address, Digest, PublicKeys, Signature};
use crate::messages::WithdrawalCertification;
use crate::wire::{WireCodec, Writer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccountKind {
    Guarantor,
    Client,
}

impl AccountKind {
    fn tag(&self) -> u8 {
        match self {
            AccountKind::Guarantor => 0,
            AccountKind::Client => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MembershipEntry {
    pub addr: Address,
    pub kind: AccountKind,
    pub deposit: u64,
    pub active: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WithdrawLogEntry {
    pub addr: Address,
    pub token: u64,
    pub time: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ContractCall {
    pub contract: String,
    pub addr: Address,
    pub amount: u64,
    pub time: u64,
    pub outcome: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CallStatus {
    Success,
    Failure,
}

/// State of the public chain visible to the simulation: personal
/// balances plus the contract account.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PublicChainState {
    pub balances: BTreeMap<Address, u64>,
    pub contract_balance: u64,
    pub membership: Vec<MembershipEntry>,
    /// pk_PRETRUST, published at genesis.
    pub tee_pk: String,
    pub withdrawn_log: Vec<WithdrawLogEntry>,
    used_certs: BTreeSet<Digest>,
    pub call_log: Vec<ContractCall>,
    pub initial_total: u64,
}

pub fn registration_payload(addr: &Address, deposit: u64, kind: AccountKind) -> Vec<u8> {
    let mut w = Writer::new();
    w.address(addr);
    w.u64(deposit);
    w.u64(kind.tag() as u64);
    w.finish()
}

impl PublicChainState {
    pub fn new(tee_pk: &VerifyingKey) -> Self {
        PublicChainState {
            balances: BTreeMap::new(),
            contract_balance: 0,
            membership: Vec::new(),
            tee_pk: hex::encode(tee_pk.as_bytes()),
            withdrawn_log: Vec::new(),
            used_certs: BTreeSet::new(),
            call_log: Vec::new(),
            initial_total: 0,
        }
    }

    pub fn tee_public_key(&self) -> Option<VerifyingKey> {
        let raw = hex::decode(&self.tee_pk).ok()?;
        let bytes: [u8; 32] = raw.try_into().ok()?;
        VerifyingKey::from_bytes(&bytes).ok()
    }

    /// Genesis funding of a personal balance.
    pub fn fund(&mut self, addr: Address, amount: u64) {
        *self.balances.entry(addr).or_insert(0) += amount;
        self.initial_total += amount;
    }

    pub fn balance_of(&self, addr: &Address) -> u64 {
        self.balances.get(addr).copied().unwrap_or(0)
    }

    /// RegisterAccount contract: moves the deposit into the contract
    /// account and appends a membership entry. Failure leaves no trace
    /// beyond the call log.
    pub fn register_account(
        &mut self,
        keys: &dyn PublicKeys,
        addr: Address,
        deposit: u64,
        kind: AccountKind,
        sig: &Signature,
        now: u64,
    ) -> CallStatus {
        let payload = registration_payload(&addr, deposit, kind);
        let sig_ok = sig.signer == addr
            && keys
                .public_key_of(&addr)
                .map(|pk| verify(&pk, &payload, sig))
                .unwrap_or(false);
        let status = if sig_ok && deposit > 0 && self.balance_of(&addr) >= deposit {
            *self.balances.get_mut(&addr).expect("funded") -= deposit;
            self.contract_balance += deposit;
            self.membership.push(MembershipEntry {
                addr,
                kind,
                deposit,
                active: true,
            });
            CallStatus::Success
        } else {
            CallStatus::Failure
        };
        self.log("RegisterAccount", addr, deposit, now, status);
        status
    }

    /// Withdraw contract: pays out a TEE-certified amount if the
    /// certification is fresh and unused. Boundary is inclusive:
    /// now - cert.time <= time_interval passes.
    pub fn withdraw(
        &mut self,
        cert: &WithdrawalCertification,
        now: u64,
        time_interval: u64,
    ) -> CallStatus {
        let cert_id = hash_digest(&cert.encode());
        let fresh = now
            .checked_sub(cert.time)
            .map(|age| age <= time_interval)
            .unwrap_or(false);
        let sig_ok = self
            .tee_public_key()
            .map(|pk| cert.verify_against(&pk))
            .unwrap_or(false);
        let status = if sig_ok
            && fresh
            && !self.used_certs.contains(&cert_id)
            && self.contract_balance >= cert.token
        {
            self.used_certs.insert(cert_id);
            self.contract_balance -= cert.token;
            *self.balances.entry(cert.addr).or_insert(0) += cert.token;
            self.withdrawn_log.push(WithdrawLogEntry {
                addr: cert.addr,
                token: cert.token,
                time: now,
            });
            CallStatus::Success
        } else {
            CallStatus::Failure
        };
        self.log("Withdraw", cert.addr, cert.token, now, status);
        status
    }

    pub fn read_membership(&self) -> &[MembershipEntry] {
        &self.membership
    }

    /// contract_balance + personal balances is constant over all calls.
    pub fn check_conservation(&self) -> bool {
        let personal: u64 = self.balances.values().sum();
        personal + self.contract_balance == self.initial_total
    }

    pub fn call_log_json_lines(&self) -> String {
        self.call_log
            .iter()
            .map(|c| serde_json::to_string(c).expect("serializable"))
            .collect::<Vec<_>>()
            .join("\n")
    }

    fn log(&mut self, contract: &str, addr: Address, amount: u64, time: u64, status: CallStatus) {
        self.call_log.push(ContractCall {
            contract: contract.to_string(),
            addr,
            amount,
            time,
            outcome: match status {
                CallStatus::Success => "SUCCESS".to_string(),
                CallStatus::Failure => "FAILURE".to_string(),
            },
        });
    }
}
