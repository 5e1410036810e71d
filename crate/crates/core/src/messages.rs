//! The signed message chain of the guarantee handshake and the
//! withdrawal message family.
//!
//! Field layouts follow the protocol tables: a transaction carries two
//! party signatures, each pre-guarantee stage wraps the previous stage
//! and adds one signature, and the final guarantee carries the group
//! signature of the guarantor's shard. Structural validation checks
//! every embedded signature and every recomputable field.

use ed25519_dalek::VerifyingKey;
use serde::{Deserialize, Serialize};

use crate::crypto::{
    group_threshold, group_verify, hash_digest, sign, verify, Address, Digest, GroupSignature,
    KeyPair, PublicKeys, Signature,
};
use crate::sharding::assign_tx_shard;
use crate::wire::{Reader, WireCodec, WireError, Writer};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum MessageError {
    #[error("transaction amount must be positive")]
    NonPositiveAmount,
    #[error("withdrawal amount must be positive")]
    NonPositiveWithdrawal,
}

/// Roster lookup by (epoch, shard) for group-signature checks. Past
/// epochs stay resolvable so recorded blocks revalidate from genesis.
pub trait Rosters {
    fn roster(&self, epoch: u64, shard: u32) -> Option<&[Address]>;
}

/// Everything structural validation needs from the environment.
pub struct VerifyCtx<'a> {
    pub keys: &'a dyn PublicKeys,
    pub rosters: &'a dyn Rosters,
    pub shard_bits: u32,
}

fn sig_valid(keys: &dyn PublicKeys, expected_signer: &Address, payload: &[u8], sig: &Signature) -> bool {
    if &sig.signer != expected_signer {
        return false;
    }
    match keys.public_key_of(expected_signer) {
        Some(pk) => verify(&pk, payload, sig),
        None => false,
    }
}

fn gsig_valid<'a>(
    ctx: &'a VerifyCtx,
    payload: &[u8],
    gsig: &GroupSignature,
) -> Option<&'a [Address]> {
    let roster = ctx.rosters.roster(gsig.epoch, gsig.shard)?;
    if roster.is_empty() {
        return None;
    }
    let threshold = group_threshold(roster.len());
    if group_verify(roster, threshold, payload, gsig, ctx.keys) {
        Some(roster)
    } else {
        None
    }
}

impl WireCodec for GroupSignature {
    fn encode_into(&self, w: &mut Writer) {
        w.u64(self.epoch);
        w.u32(self.shard);
        w.u64(self.member_sigs.len() as u64);
        for (addr, sig) in &self.member_sigs {
            w.address(addr);
            w.signature(sig);
        }
    }

    fn decode_from(r: &mut Reader) -> Result<Self, WireError> {
        let epoch = r.u64()?;
        let shard = r.u32()?;
        let count = r.u64()?;
        if count > 1 << 20 {
            return Err(WireError::BadLength);
        }
        let mut member_sigs = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let addr = r.address()?;
            let sig = r.signature()?;
            member_sigs.push((addr, sig));
        }
        Ok(GroupSignature {
            epoch,
            shard,
            member_sigs,
        })
    }
}

/// Co-signed transaction statement: payer pays payee `amount`, offering
/// `guarantee_fee` on top.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TxInfo {
    pub payer: Address,
    pub payee: Address,
    pub amount: u64,
    pub guarantee_fee: u64,
    pub txsn_payer: u64,
    pub txsn_payee: u64,
    pub sig_payer: Signature,
    pub sig_payee: Signature,
    pub id: Digest,
}

impl TxInfo {
    /// m1: the payment statement itself.
    fn m1(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.address(&self.payer);
        w.address(&self.payee);
        w.u64(self.amount);
        w.finish()
    }

    /// Payer signs (m1, m2): statement, payer serial, fee.
    pub fn payer_payload(&self) -> Vec<u8> {
        let mut out = self.m1();
        out.extend_from_slice(&self.txsn_payer.to_be_bytes());
        out.extend_from_slice(&self.guarantee_fee.to_be_bytes());
        out
    }

    /// Payee signs (m1 || m3): statement, payee serial.
    pub fn payee_payload(&self) -> Vec<u8> {
        let mut out = self.m1();
        out.extend_from_slice(&self.txsn_payee.to_be_bytes());
        out
    }

    /// id = Hash(m4 || m5), the two signatures.
    pub fn compute_id(sig_payer: &Signature, sig_payee: &Signature) -> Digest {
        let mut data = Vec::with_capacity(128);
        data.extend_from_slice(&sig_payer.bytes);
        data.extend_from_slice(&sig_payee.bytes);
        hash_digest(&data)
    }

    pub fn verify_structure(&self, keys: &dyn PublicKeys) -> bool {
        self.amount > 0
            && self.id == Self::compute_id(&self.sig_payer, &self.sig_payee)
            && sig_valid(keys, &self.payer, &self.payer_payload(), &self.sig_payer)
            && sig_valid(keys, &self.payee, &self.payee_payload(), &self.sig_payee)
    }
}

impl WireCodec for TxInfo {
    fn encode_into(&self, w: &mut Writer) {
        w.address(&self.payer);
        w.address(&self.payee);
        w.u64(self.amount);
        w.u64(self.guarantee_fee);
        w.u64(self.txsn_payer);
        w.u64(self.txsn_payee);
        w.signature(&self.sig_payer);
        w.signature(&self.sig_payee);
        w.digest(&self.id);
    }

    fn decode_from(r: &mut Reader) -> Result<Self, WireError> {
        Ok(TxInfo {
            payer: r.address()?,
            payee: r.address()?,
            amount: r.u64()?,
            guarantee_fee: r.u64()?,
            txsn_payer: r.u64()?,
            txsn_payee: r.u64()?,
            sig_payer: r.signature()?,
            sig_payee: r.signature()?,
            id: r.digest()?,
        })
    }
}

pub fn assemble_txinfo(
    payer: &KeyPair,
    payee: &KeyPair,
    amount: u64,
    guarantee_fee: u64,
    txsn_payer: u64,
    txsn_payee: u64,
) -> Result<TxInfo, MessageError> {
    if amount == 0 {
        return Err(MessageError::NonPositiveAmount);
    }
    let mut tx = TxInfo {
        payer: payer.address(),
        payee: payee.address(),
        amount,
        guarantee_fee,
        txsn_payer,
        txsn_payee,
        sig_payer: Signature {
            bytes: [0; 64],
            signer: payer.address(),
        },
        sig_payee: Signature {
            bytes: [0; 64],
            signer: payee.address(),
        },
        id: Digest([0; 32]),
    };
    tx.sig_payer = sign(payer, &tx.payer_payload());
    tx.sig_payee = sign(payee, &tx.payee_payload());
    tx.id = TxInfo::compute_id(&tx.sig_payer, &tx.sig_payee);
    Ok(tx)
}

/// Height range in the payer's shard within which the final guarantee
/// is expected to be recorded.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockExpectation {
    pub shard: u32,
    pub height_min: u64,
    pub height_max: u64,
}

impl WireCodec for BlockExpectation {
    fn encode_into(&self, w: &mut Writer) {
        w.u32(self.shard);
        w.u64(self.height_min);
        w.u64(self.height_max);
    }

    fn decode_from(r: &mut Reader) -> Result<Self, WireError> {
        Ok(BlockExpectation {
            shard: r.u32()?,
            height_min: r.u64()?,
            height_max: r.u64()?,
        })
    }
}

/// Guarantor's response: the transaction, its guarantee serial, and the
/// expected recording window, signed by the guarantor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreGuarantee1 {
    pub txinfo: TxInfo,
    pub guar_sn: u64,
    pub expectation: BlockExpectation,
    pub guarantor: Address,
    pub sig_guarantor: Signature,
}

impl PreGuarantee1 {
    pub fn signing_payload(
        txinfo: &TxInfo,
        guar_sn: u64,
        expectation: &BlockExpectation,
        guarantor: &Address,
    ) -> Vec<u8> {
        let mut w = Writer::new();
        txinfo.encode_into(&mut w);
        w.u64(guar_sn);
        expectation.encode_into(&mut w);
        w.address(guarantor);
        w.finish()
    }

    pub fn assemble(
        txinfo: TxInfo,
        guar_sn: u64,
        expectation: BlockExpectation,
        guarantor: &KeyPair,
    ) -> PreGuarantee1 {
        let payload =
            Self::signing_payload(&txinfo, guar_sn, &expectation, &guarantor.address());
        let sig_guarantor = sign(guarantor, &payload);
        PreGuarantee1 {
            txinfo,
            guar_sn,
            expectation,
            guarantor: guarantor.address(),
            sig_guarantor,
        }
    }

    pub fn verify_structure(&self, ctx: &VerifyCtx) -> bool {
        self.txinfo.verify_structure(ctx.keys)
            && self.expectation.height_min <= self.expectation.height_max
            && self.expectation.shard == assign_tx_shard(&self.txinfo.payer, ctx.shard_bits)
            && sig_valid(
                ctx.keys,
                &self.guarantor,
                &Self::signing_payload(&self.txinfo, self.guar_sn, &self.expectation, &self.guarantor),
                &self.sig_guarantor,
            )
    }
}

impl WireCodec for PreGuarantee1 {
    fn encode_into(&self, w: &mut Writer) {
        self.txinfo.encode_into(w);
        w.u64(self.guar_sn);
        self.expectation.encode_into(w);
        w.address(&self.guarantor);
        w.signature(&self.sig_guarantor);
    }

    fn decode_from(r: &mut Reader) -> Result<Self, WireError> {
        Ok(PreGuarantee1 {
            txinfo: TxInfo::decode_from(r)?,
            guar_sn: r.u64()?,
            expectation: BlockExpectation::decode_from(r)?,
            guarantor: r.address()?,
            sig_guarantor: r.signature()?,
        })
    }
}

/// The payer's counter-signature over the guarantor's response.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreGuarantee2 {
    pub pg1: PreGuarantee1,
    pub sig_payer: Signature,
}

impl PreGuarantee2 {
    pub fn assemble(pg1: PreGuarantee1, payer: &KeyPair) -> PreGuarantee2 {
        let sig_payer = sign(payer, &pg1.encode());
        PreGuarantee2 { pg1, sig_payer }
    }

    pub fn verify_structure(&self, ctx: &VerifyCtx) -> bool {
        self.pg1.verify_structure(ctx)
            && sig_valid(
                ctx.keys,
                &self.pg1.txinfo.payer,
                &self.pg1.encode(),
                &self.sig_payer,
            )
    }
}

impl WireCodec for PreGuarantee2 {
    fn encode_into(&self, w: &mut Writer) {
        self.pg1.encode_into(w);
        w.signature(&self.sig_payer);
    }

    fn decode_from(r: &mut Reader) -> Result<Self, WireError> {
        Ok(PreGuarantee2 {
            pg1: PreGuarantee1::decode_from(r)?,
            sig_payer: r.signature()?,
        })
    }
}

/// The final warranty: the counter-signed response plus the group
/// signature of the guarantor's shard in the signing epoch.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Guarantee {
    pub pg2: PreGuarantee2,
    pub gsig: GroupSignature,
}

impl Guarantee {
    pub fn verify_structure(&self, ctx: &VerifyCtx) -> bool {
        if !self.pg2.verify_structure(ctx) {
            return false;
        }
        match gsig_valid(ctx, &self.pg2.encode(), &self.gsig) {
            Some(roster) => roster.contains(&self.pg2.pg1.guarantor),
            None => false,
        }
    }

    pub fn txinfo(&self) -> &TxInfo {
        &self.pg2.pg1.txinfo
    }

    pub fn guarantor(&self) -> &Address {
        &self.pg2.pg1.guarantor
    }

    pub fn expectation(&self) -> &BlockExpectation {
        &self.pg2.pg1.expectation
    }
}

impl WireCodec for Guarantee {
    fn encode_into(&self, w: &mut Writer) {
        self.pg2.encode_into(w);
        self.gsig.encode_into(w);
    }

    fn decode_from(r: &mut Reader) -> Result<Self, WireError> {
        Ok(Guarantee {
            pg2: PreGuarantee2::decode_from(r)?,
            gsig: GroupSignature::decode_from(r)?,
        })
    }
}

/// A client's request to move internal balance back to the public chain.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WithdrawalRequest {
    pub addr: Address,
    pub token: u64,
    pub sig: Signature,
}

impl WithdrawalRequest {
    fn signing_payload(addr: &Address, token: u64) -> Vec<u8> {
        let mut w = Writer::new();
        w.address(addr);
        w.u64(token);
        w.finish()
    }

    pub fn assemble(keys: &KeyPair, token: u64) -> Result<WithdrawalRequest, MessageError> {
        if token == 0 {
            return Err(MessageError::NonPositiveWithdrawal);
        }
        let addr = keys.address();
        let sig = sign(keys, &Self::signing_payload(&addr, token));
        Ok(WithdrawalRequest { addr, token, sig })
    }

    pub fn verify_structure(&self, keys: &dyn PublicKeys) -> bool {
        self.token > 0
            && sig_valid(
                keys,
                &self.addr,
                &Self::signing_payload(&self.addr, self.token),
                &self.sig,
            )
    }
}

impl WireCodec for WithdrawalRequest {
    fn encode_into(&self, w: &mut Writer) {
        w.address(&self.addr);
        w.u64(self.token);
        w.signature(&self.sig);
    }

    fn decode_from(r: &mut Reader) -> Result<Self, WireError> {
        Ok(WithdrawalRequest {
            addr: r.address()?,
            token: r.u64()?,
            sig: r.signature()?,
        })
    }
}

/// A request endorsed by the requester's shard group after deducting
/// the tokens internally.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WithdrawalCheck {
    pub request: WithdrawalRequest,
    pub gsig: GroupSignature,
}

impl WithdrawalCheck {
    pub fn verify_structure(&self, ctx: &VerifyCtx) -> bool {
        self.request.verify_structure(ctx.keys)
            && self.gsig.shard == assign_tx_shard(&self.request.addr, ctx.shard_bits)
            && gsig_valid(ctx, &self.request.encode(), &self.gsig).is_some()
    }
}

impl WireCodec for WithdrawalCheck {
    fn encode_into(&self, w: &mut Writer) {
        self.request.encode_into(w);
        self.gsig.encode_into(w);
    }

    fn decode_from(r: &mut Reader) -> Result<Self, WireError> {
        Ok(WithdrawalCheck {
            request: WithdrawalRequest::decode_from(r)?,
            gsig: GroupSignature::decode_from(r)?,
        })
    }
}

/// TEE-signed permission to withdraw on the public chain. The signature
/// covers time, address, and token so none of them can be altered after
/// certification.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WithdrawalCertification {
    pub time: u64,
    pub addr: Address,
    pub token: u64,
    pub sig_tee: Signature,
}

impl WithdrawalCertification {
    pub fn signing_payload(time: u64, addr: &Address, token: u64) -> Vec<u8> {
        let mut w = Writer::new();
        w.u64(time);
        w.address(addr);
        w.u64(token);
        w.finish()
    }

    pub fn assemble(tee: &KeyPair, time: u64, addr: Address, token: u64) -> Self {
        let sig_tee = sign(tee, &Self::signing_payload(time, &addr, token));
        WithdrawalCertification {
            time,
            addr,
            token,
            sig_tee,
        }
    }

    pub fn verify_against(&self, tee_pk: &VerifyingKey) -> bool {
        verify(
            tee_pk,
            &Self::signing_payload(self.time, &self.addr, self.token),
            &self.sig_tee,
        )
    }
}

impl WireCodec for WithdrawalCertification {
    fn encode_into(&self, w: &mut Writer) {
        w.u64(self.time);
        w.address(&self.addr);
        w.u64(self.token);
        w.signature(&self.sig_tee);
    }

    fn decode_from(r: &mut Reader) -> Result<Self, WireError> {
        Ok(WithdrawalCertification {
            time: r.u64()?,
            addr: r.address()?,
            token: r.u64()?,
            sig_tee: r.signature()?,
        })
    }
}


#[cfg(test)]
mod tests {
    use super::fixtures::guarantee_fixture;
    use super::*;
    use crate::crypto::group_threshold;
    use proptest::prelude::*;

    #[test]
    fn assembled_txinfo_verifies() {
        let f = guarantee_fixture();
        let tx = assemble_txinfo(&f.payer, &f.payee, 10, 1, 0, 0).unwrap();
        assert!(tx.verify_structure(&f.dir));
    }

    #[test]
    fn zero_amount_rejected() {
        let f = guarantee_fixture();
        assert_eq!(
            assemble_txinfo(&f.payer, &f.payee, 0, 1, 0, 0),
            Err(MessageError::NonPositiveAmount)
        );
    }

    #[test]
    fn tampered_amount_fails_verification() {
        let f = guarantee_fixture();
        let mut tx = assemble_txinfo(&f.payer, &f.payee, 10, 1, 0, 0).unwrap();
        tx.amount = 11;
        assert!(!tx.verify_structure(&f.dir));
    }

    #[test]
    fn txinfo_id_is_hash_of_signatures() {
        let f = guarantee_fixture();
        let tx = assemble_txinfo(&f.payer, &f.payee, 10, 1, 0, 0).unwrap();
        let mut concat = Vec::new();
        concat.extend_from_slice(&tx.sig_payer.bytes);
        concat.extend_from_slice(&tx.sig_payee.bytes);
        assert_eq!(tx.id, hash_digest(&concat));
    }

    #[test]
    fn full_guarantee_chain_verifies() {
        let f = guarantee_fixture();
        assert!(f.guarantee.verify_structure(&f.ctx()));
    }

    #[test]
    fn below_threshold_gsig_fails() {
        let f = guarantee_fixture();
        let mut g = f.guarantee.clone();
        let threshold = group_threshold(f.group.len());
        g.gsig.member_sigs.truncate(threshold - 1);
        assert!(!g.verify_structure(&f.ctx()));
    }

    #[test]
    fn edited_inner_amount_fails_at_every_stage() {
        let f = guarantee_fixture();
        let mut g = f.guarantee.clone();
        g.pg2.pg1.txinfo.amount = 9999;
        assert!(!g.pg2.pg1.txinfo.verify_structure(&f.dir));
        assert!(!g.pg2.pg1.verify_structure(&f.ctx()));
        assert!(!g.pg2.verify_structure(&f.ctx()));
        assert!(!g.verify_structure(&f.ctx()));
    }

    #[test]
    fn unknown_epoch_gsig_fails() {
        let f = guarantee_fixture();
        let mut g = f.guarantee.clone();
        g.gsig.epoch = 7;
        assert!(!g.verify_structure(&f.ctx()));
    }

    #[test]
    fn withdrawal_certification_covers_token() {
        let f = guarantee_fixture();
        let tee = crate::crypto::keygen(&crate::crypto::seed_from("tee", 0));
        let mut cert = WithdrawalCertification::assemble(&tee, 100, f.payer.address(), 7);
        assert!(cert.verify_against(&tee.public_key()));
        cert.token = 8;
        assert!(!cert.verify_against(&tee.public_key()));
    }

    #[test]
    fn guarantee_roundtrip() {
        let f = guarantee_fixture();
        let bytes = f.guarantee.encode();
        let back = Guarantee::decode(&bytes).unwrap();
        assert_eq!(back, f.guarantee);
        assert!(back.verify_structure(&f.ctx()));
    }

    proptest! {
        // Flipping any single byte of the wire form either fails to
        // decode or fails structural validation.
        #[test]
        fn mutation_soundness(pos in 0usize..2048, bit in 0u8..8) {
            let f = guarantee_fixture();
            let mut bytes = f.guarantee.encode();
            let pos = pos % bytes.len();
            bytes[pos] ^= 1 << bit;
            match Guarantee::decode(&bytes) {
                Err(_) => {}
                Ok(g) => prop_assert!(!g.verify_structure(&f.ctx())),
            }
        }

        #[test]
        fn txinfo_roundtrip_preserves_validity(amount in 1u64..1_000_000, fee in 0u64..1000) {
            let f = guarantee_fixture();
            let tx = assemble_txinfo(&f.payer, &f.payee, amount, fee, 3, 4).unwrap();
            let back = TxInfo::decode(&tx.encode()).unwrap();
            prop_assert_eq!(&back, &tx);
            prop_assert!(back.verify_structure(&f.dir));
        }
    }
}
