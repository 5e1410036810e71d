//! Cross-check vectors: a checked-in JSON file with hashes, addresses,
//! signatures, and one full guarantee chain. The file is validated two
//! ways: byte-for-byte against deterministic regeneration, and
//! semantically from the file contents alone, so an alternate-language
//! implementation can re-validate it.
//!
//! Regenerate with PRETRUST_REGEN_VECTORS=1.

use serde_json::{json, Value};

use pretrust::crypto::{
    group_sign, hash_digest, keygen, seed_from, sign, Address, KeyDirectory, KeyPair, PublicKeys,
    Signature,
};
use pretrust::messages::{
    assemble_txinfo, BlockExpectation, Guarantee, PreGuarantee1, PreGuarantee2, Rosters, VerifyCtx,
};
use pretrust::sharding::{assign_tx_shard, elect_guarantor, SecurityParams};
use pretrust::wire::WireCodec;

const VECTOR_PATH: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/testdata/vectors.json");

struct FixedRoster {
    epoch: u64,
    shard: u32,
    roster: Vec<Address>,
}

impl Rosters for FixedRoster {
    fn roster(&self, epoch: u64, shard: u32) -> Option<&[Address]> {
        (epoch == self.epoch && shard == self.shard).then_some(self.roster.as_slice())
    }
}

fn guarantee_chain() -> (Guarantee, Vec<KeyPair>, KeyPair, KeyPair, u32) {
    let params = SecurityParams::default();
    let payer = keygen(&seed_from("vector-payer", 0));
    let payee = keygen(&seed_from("vector-payee", 0));
    let group: Vec<KeyPair> = (0..3).map(|i| keygen(&seed_from("vector-group", i))).collect();
    let mut roster: Vec<Address> = group.iter().map(|k| k.address()).collect();
    roster.sort();
    let shard = assign_tx_shard(&payer.address(), params.shard_bits);

    let tx = assemble_txinfo(&payer, &payee, 10, 1, 0, 0).unwrap();
    let head = elect_guarantor(&roster, &tx.id)[0];
    let guarantor = group.iter().find(|k| k.address() == head).unwrap();
    let expectation = BlockExpectation {
        shard,
        height_min: 1,
        height_max: 4,
    };
    let pg1 = PreGuarantee1::assemble(tx, 0, expectation, guarantor);
    let pg2 = PreGuarantee2::assemble(pg1, &payer);
    let refs: Vec<&KeyPair> = group.iter().collect();
    let gsig = group_sign(0, shard, &refs, &pg2.encode());
    (Guarantee { pg2, gsig }, group, payer, payee, shard)
}

fn build_vectors() -> Value {
    // hash vectors, including the two published SHA-256 test inputs
    let hash_inputs: [&[u8]; 3] = [b"", b"abc", &0u64.to_be_bytes()];
    let hashes: Vec<Value> = hash_inputs
        .iter()
        .map(|input| {
            json!({
                "input_hex": hex::encode(input),
                "sha256_hex": hex::encode(hash_digest(input).0),
            })
        })
        .collect();

    // keys and detached signatures
    let keys: Vec<Value> = (0..3u64)
        .map(|i| {
            let seed = seed_from("vector-key", i);
            let kp = keygen(&seed);
            let message = format!("vector message {i}");
            let sig = sign(&kp, message.as_bytes());
            json!({
                "seed_hex": hex::encode(seed),
                "public_key_hex": hex::encode(kp.public_key().as_bytes()),
                "address_hex": kp.address().to_string(),
                "message_hex": hex::encode(message.as_bytes()),
                "signature_hex": hex::encode(sig.bytes),
            })
        })
        .collect();

    // one full guarantee chain with everything needed to re-verify it
    let (guarantee, group, payer, payee, shard) = guarantee_chain();
    let mut participants: Vec<(String, String)> = Vec::new();
    for kp in [&payer, &payee].into_iter().chain(group.iter()) {
        participants.push((
            kp.address().to_string(),
            hex::encode(kp.public_key().as_bytes()),
        ));
    }
    participants.sort();
    let mut roster: Vec<String> = group.iter().map(|k| k.address().to_string()).collect();
    roster.sort();
    let guarantee_obj = json!({
        "payer_address": payer.address().to_string(),
        "payee_address": payee.address().to_string(),
        "guarantor_address": guarantee.guarantor().to_string(),
        "amount": 10,
        "guarantee_fee": 1,
        "epoch": 0,
        "shard": shard,
        "roster": roster,
        "participants": participants,
        "txinfo_id_hex": hex::encode(guarantee.txinfo().id.0),
        "wire_hex": hex::encode(guarantee.encode()),
        "collateral": 22,
    });

    json!({
        "hashes": hashes,
        "keys": keys,
        "guarantee": guarantee_obj,
    })
}

/// Criterion: the checked-in file equals deterministic regeneration and
/// validates end-to-end from its own contents.
pub fn validate_checked_in_file() {
    let expected = build_vectors();
    if std::env::var("PRETRUST_REGEN_VECTORS").as_deref() == Ok("1") {
        std::fs::create_dir_all(std::path::Path::new(VECTOR_PATH).parent().unwrap()).unwrap();
        std::fs::write(VECTOR_PATH, serde_json::to_string_pretty(&expected).unwrap()).unwrap();
    }
    let raw = std::fs::read_to_string(VECTOR_PATH).expect("vector file present");
    let file: Value = serde_json::from_str(&raw).unwrap();
    assert_eq!(file, expected, "vector file does not match regeneration");

    // semantic validation from the file alone
    for entry in file["hashes"].as_array().unwrap() {
        let input = hex::decode(entry["input_hex"].as_str().unwrap()).unwrap();
        assert_eq!(
            hex::encode(hash_digest(&input).0),
            entry["sha256_hex"].as_str().unwrap()
        );
    }
    // published SHA-256 answers for the first two inputs
    assert_eq!(
        file["hashes"][0]["sha256_hex"],
        "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
    );
    assert_eq!(
        file["hashes"][1]["sha256_hex"],
        "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
    );

    for entry in file["keys"].as_array().unwrap() {
        let pk_hex = entry["public_key_hex"].as_str().unwrap().to_string();
        let addr_hex = entry["address_hex"].as_str().unwrap().to_string();
        let dir =
            KeyDirectory::from_hex_entries(&[(addr_hex.clone(), pk_hex)]).expect("valid entry");
        let addr = Address::from_hex(&addr_hex).unwrap();
        let message = hex::decode(entry["message_hex"].as_str().unwrap()).unwrap();
        let sig_bytes: [u8; 64] = hex::decode(entry["signature_hex"].as_str().unwrap())
            .unwrap()
            .try_into()
            .unwrap();
        let sig = Signature {
            bytes: sig_bytes,
            signer: addr,
        };
        let pk = dir.public_key_of(&addr).unwrap();
        assert!(pretrust::crypto::verify(&pk, &message, &sig));
    }

    let g = &file["guarantee"];
    let wire = hex::decode(g["wire_hex"].as_str().unwrap()).unwrap();
    let guarantee = Guarantee::decode(&wire).expect("wire form decodes");
    let participants: Vec<(String, String)> = g["participants"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| {
            (
                p[0].as_str().unwrap().to_string(),
                p[1].as_str().unwrap().to_string(),
            )
        })
        .collect();
    let dir = KeyDirectory::from_hex_entries(&participants).expect("participants valid");
    let roster: Vec<Address> = g["roster"]
        .as_array()
        .unwrap()
        .iter()
        .map(|a| Address::from_hex(a.as_str().unwrap()).unwrap())
        .collect();
    let rosters = FixedRoster {
        epoch: g["epoch"].as_u64().unwrap(),
        shard: g["shard"].as_u64().unwrap() as u32,
        roster,
    };
    let params = SecurityParams::default();
    let ctx = VerifyCtx {
        keys: &dir,
        rosters: &rosters,
        shard_bits: params.shard_bits,
    };
    assert!(guarantee.verify_structure(&ctx), "guarantee verifies");
    assert_eq!(
        hex::encode(guarantee.txinfo().id.0),
        g["txinfo_id_hex"].as_str().unwrap()
    );
    assert_eq!(
        params
            .collateral_ratio
            .apply_floor(guarantee.txinfo().amount + guarantee.txinfo().guarantee_fee),
        g["collateral"].as_u64().unwrap()
    );
    // corrupting any wire byte must not validate (spot check)
    let mut bad = wire.clone();
    bad[40] ^= 1;
    match Guarantee::decode(&bad) {
        Err(_) => {}
        Ok(forged) => assert!(!forged.verify_structure(&ctx)),
    }
}
