//! Hashing, key pairs, addresses, individual signatures, and the
//! threshold multi-signature used for group accountability.
//!
//! Hash is SHA-256 and signatures are Ed25519 so test vectors are
//! bit-exact across implementations. Key generation is deterministic
//! from a 32-byte seed, which keeps whole-system runs replayable.

use std::collections::BTreeMap;
use std::fmt;

use ed25519_dalek::{Signer, SigningKey, Verifier, VerifyingKey};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest as Sha2Digest, Sha256};

pub const DIGEST_LEN: usize = 32;
pub const ADDRESS_LEN: usize = 20;
pub const SIGNATURE_LEN: usize = 64;
pub const PUBLIC_KEY_LEN: usize = 32;

/// 256-bit hash value.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Digest(pub [u8; DIGEST_LEN]);

impl Digest {
    pub fn as_bytes(&self) -> &[u8; DIGEST_LEN] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Digest> {
        let raw = hex::decode(s).ok()?;
        let bytes: [u8; DIGEST_LEN] = raw.try_into().ok()?;
        Some(Digest(bytes))
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", self.to_hex())
    }
}

impl Serialize for Digest {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Digest::from_hex(&s).ok_or_else(|| serde::de::Error::custom("bad digest hex"))
    }
}

/// SHA-256 of the input.
pub fn hash_digest(data: &[u8]) -> Digest {
    let mut hasher = Sha256::new();
    hasher.update(data);
    Digest(hasher.finalize().into())
}

/// 20-byte party identifier, the truncated hash of a public key.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Address(pub [u8; ADDRESS_LEN]);

impl Address {
    pub fn as_bytes(&self) -> &[u8; ADDRESS_LEN] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Address> {
        let raw = hex::decode(s).ok()?;
        let bytes: [u8; ADDRESS_LEN] = raw.try_into().ok()?;
        Some(Address(bytes))
    }
}

impl fmt::Debug for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Address({})", self.to_hex())
    }
}

impl fmt::Display for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for Address {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Address {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Address::from_hex(&s).ok_or_else(|| serde::de::Error::custom("bad address hex"))
    }
}

/// First 20 bytes of the SHA-256 of the public key.
pub fn derive_address(pk: &VerifyingKey) -> Address {
    let digest = hash_digest(pk.as_bytes());
    let mut out = [0u8; ADDRESS_LEN];
    out.copy_from_slice(&digest.0[..ADDRESS_LEN]);
    Address(out)
}

/// Ed25519 key pair derived deterministically from a seed.
#[derive(Clone)]
pub struct KeyPair {
    signing: SigningKey,
}

impl KeyPair {
    pub fn public_key(&self) -> VerifyingKey {
        self.signing.verifying_key()
    }

    pub fn address(&self) -> Address {
        derive_address(&self.public_key())
    }
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "KeyPair({})", self.address())
    }
}

pub fn keygen(seed: &[u8; 32]) -> KeyPair {
    KeyPair {
        signing: SigningKey::from_bytes(seed),
    }
}

/// Signature over a message together with the signer's address.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct Signature {
    pub bytes: [u8; SIGNATURE_LEN],
    pub signer: Address,
}

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Signature(by {})", self.signer)
    }
}

impl Serialize for Signature {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut st = s.serialize_struct("Signature", 2)?;
        st.serialize_field("bytes", &hex::encode(self.bytes))?;
        st.serialize_field("signer", &self.signer)?;
        st.end()
    }
}

impl<'de> Deserialize<'de> for Signature {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            bytes: String,
            signer: Address,
        }
        let raw = Raw::deserialize(d)?;
        let decoded = hex::decode(&raw.bytes).map_err(serde::de::Error::custom)?;
        let bytes: [u8; SIGNATURE_LEN] = decoded
            .try_into()
            .map_err(|_| serde::de::Error::custom("bad signature length"))?;
        Ok(Signature {
            bytes,
            signer: raw.signer,
        })
    }
}

pub fn sign(keys: &KeyPair, message: &[u8]) -> Signature {
    Signature {
        bytes: keys.signing.sign(message).to_bytes(),
        signer: keys.address(),
    }
}

/// Malformed signature bytes verify as false, never panic.
pub fn verify(pk: &VerifyingKey, message: &[u8], sig: &Signature) -> bool {
    if derive_address(pk) != sig.signer {
        return false;
    }
    let parsed = ed25519_dalek::Signature::from_bytes(&sig.bytes);
    pk.verify(message, &parsed).is_ok()
}

/// Lookup of the public key registered for an address.
pub trait PublicKeys {
    fn public_key_of(&self, addr: &Address) -> Option<VerifyingKey>;
}

/// In-memory address book of registered public keys.
#[derive(Clone, Default)]
pub struct KeyDirectory {
    keys: BTreeMap<Address, VerifyingKey>,
}

impl KeyDirectory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, pk: VerifyingKey) -> Address {
        let addr = derive_address(&pk);
        self.keys.insert(addr, pk);
        addr
    }

    pub fn entries(&self) -> impl Iterator<Item = (&Address, &VerifyingKey)> {
        self.keys.iter()
    }

    pub fn hex_entries(&self) -> Vec<(String, String)> {
        self.keys
            .iter()
            .map(|(addr, pk)| (addr.to_string(), hex::encode(pk.as_bytes())))
            .collect()
    }

    pub fn from_hex_entries(entries: &[(String, String)]) -> Option<Self> {
        let mut dir = KeyDirectory::new();
        for (addr_hex, pk_hex) in entries {
            let raw = hex::decode(pk_hex).ok()?;
            let bytes: [u8; PUBLIC_KEY_LEN] = raw.try_into().ok()?;
            let pk = VerifyingKey::from_bytes(&bytes).ok()?;
            if dir.insert(pk) != Address::from_hex(addr_hex)? {
                return None;
            }
        }
        Some(dir)
    }
}

impl PublicKeys for KeyDirectory {
    fn public_key_of(&self, addr: &Address) -> Option<VerifyingKey> {
        self.keys.get(addr).copied()
    }
}

/// Threshold multi-signature by a consensus group roster.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupSignature {
    pub epoch: u64,
    pub shard: u32,
    pub member_sigs: Vec<(Address, Signature)>,
}

/// Byzantine-quorum threshold: ceil(2n/3).
pub fn group_threshold(roster_size: usize) -> usize {
    (2 * roster_size + 2) / 3
}

pub fn group_sign(
    epoch: u64,
    shard: u32,
    roster_keys: &[&KeyPair],
    message: &[u8],
) -> GroupSignature {
    let mut member_sigs: Vec<(Address, Signature)> = roster_keys
        .iter()
        .map(|k| (k.address(), sign(k, message)))
        .collect();
    member_sigs.sort_by_key(|(a, _)| *a);
    GroupSignature {
        epoch,
        shard,
        member_sigs,
    }
}

/// True iff at least `threshold` signatures are present and every
/// included signature is valid and from a distinct roster member.
/// Strict on purpose: a single corrupted entry voids the whole group
/// signature, keeping the wire form canonical.
pub fn group_verify(
    roster: &[Address],
    threshold: usize,
    message: &[u8],
    gsig: &GroupSignature,
    keys: &dyn PublicKeys,
) -> bool {
    let mut seen = std::collections::BTreeSet::new();
    for (addr, sig) in &gsig.member_sigs {
        if addr != &sig.signer || !roster.contains(addr) || !seen.insert(*addr) {
            return false;
        }
        let Some(pk) = keys.public_key_of(addr) else {
            return false;
        };
        if !verify(&pk, message, sig) {
            return false;
        }
    }
    seen.len() >= threshold
}

/// Deterministic seed material: SHA-256 of a label and an index.
pub fn seed_from(label: &str, index: u64) -> [u8; 32] {
    let mut data = label.as_bytes().to_vec();
    data.extend_from_slice(&index.to_be_bytes());
    hash_digest(&data).0
}
