//! Acceptance suite: one test per criterion, each ending in a single
//! PASS line (a failed assertion is the FAIL case).

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use pretrust::crypto::{
    hash_digest, keygen, seed_from, sign, Address, Digest, KeyDirectory, KeyPair,
};
use pretrust::external_chain::{
    registration_payload, AccountKind, CallStatus, MembershipEntry, PublicChainState,
};
use pretrust::ledger::bootstrap_from_membership;
use pretrust::messages::{assemble_txinfo, Rosters, WithdrawalCertification};
use pretrust::protocol::{
    file_arbitration, group_generate_guarantee, payer_counter_sign, verify_txinfo, GroupState,
    ProtocolFailure,
};
use pretrust::sharding::{
    assign_guarantor_shards, assign_tx_shard, compute_global_hash, elect_guarantor,
    guarantor_shard, upper_bits, EpochState, SecurityParams,
};
use pretrust::simulator::{builtin_config, run_scenario, Scenario, SimOutput};

// ---------- shared world-building helpers ----------

struct World {
    ledger: pretrust::ledger::LedgerState,
    params: SecurityParams,
    dir: KeyDirectory,
    payer: KeyPair,
    payee: KeyPair,
    group: Vec<KeyPair>,
    shard: u32,
}

fn world(payer_balance: u64, guarantor_deposit: u64) -> World {
    let params = SecurityParams::default();
    let payer = keygen(&seed_from("acc-payer", 0));
    let payee = keygen(&seed_from("acc-payee", 0));
    let group: Vec<KeyPair> = (0..3).map(|i| keygen(&seed_from("acc-g", i))).collect();
    let mut dir = KeyDirectory::new();
    for k in [&payer, &payee].into_iter().chain(group.iter()) {
        dir.insert(k.public_key());
    }
    let shard = assign_tx_shard(&payer.address(), params.shard_bits);
    let mut roster: Vec<Address> = group.iter().map(|k| k.address()).collect();
    roster.sort();
    let mut rosters = BTreeMap::new();
    for s in 0..params.shard_count() {
        rosters.insert(s, roster.clone());
    }
    let genesis = EpochState {
        epoch_index: 0,
        global_hash: hash_digest(b"acceptance"),
        rosters,
    };
    let mut members = vec![
        MembershipEntry {
            addr: payer.address(),
            kind: AccountKind::Client,
            deposit: payer_balance,
            active: true,
        },
        MembershipEntry {
            addr: payee.address(),
            kind: AccountKind::Client,
            deposit: 1,
            active: true,
        },
    ];
    for g in &group {
        members.push(MembershipEntry {
            addr: g.address(),
            kind: AccountKind::Guarantor,
            deposit: guarantor_deposit,
            active: true,
        });
    }
    let ledger = bootstrap_from_membership(&members, genesis).unwrap();
    World {
        ledger,
        params,
        dir,
        payer,
        payee,
        group,
        shard,
    }
}

fn elected(w: &World, id: &Digest) -> KeyPair {
    let roster = w.ledger.roster(0, w.shard).unwrap().to_vec();
    let head = elect_guarantor(&roster, id)[0];
    w.group
        .iter()
        .find(|k| k.address() == head)
        .unwrap()
        .clone()
}

fn client_addr(i: u64) -> Address {
    keygen(&seed_from("sim-client", i)).address()
}

fn run(scenario: Scenario, seed: u64) -> SimOutput {
    let mut config = builtin_config(scenario);
    config.seed = seed;
    run_scenario(config).unwrap()
}

// ---------- criterion 1: formula conformance against oracles ----------

/// Oracle: interpret the first eight bytes as a big-endian integer and
/// shift; valid for the k <= 64 used by the library.
fn oracle_upper_bits(k: u32, value: &[u8]) -> u64 {
    assert!(k <= 64 && value.len() >= 8);
    if k == 0 {
        return 0;
    }
    let head = u64::from_be_bytes(value[..8].try_into().unwrap());
    head >> (64 - k)
}

fn oracle_global_hash(end_blocks: &[Digest]) -> Digest {
    let mut folded = vec![0u8; 32];
    for d in end_blocks {
        for (i, b) in d.as_bytes().iter().enumerate() {
            folded[i] ^= b;
        }
    }
    hash_digest(&folded)
}

fn oracle_xor20(a: &[u8], b: &[u8]) -> Vec<u8> {
    (0..20).map(|i| a[i] ^ b[i]).collect()
}

#[test]
fn criterion_1_formula_conformance() {
    let start = Instant::now();
    let addrs: Vec<Address> = (0..1000)
        .map(|i| keygen(&seed_from("oracle-addr", i)).address())
        .collect();
    let addr_set: BTreeSet<Address> = addrs.iter().copied().collect();

    let mut gh = hash_digest(b"oracle-epoch-0");
    for epoch in 0..50u64 {
        // upper_bits against the big-integer-shift oracle
        for k in [0u32, 1, 5, 20, 64] {
            assert_eq!(
                upper_bits(k, gh.as_bytes()).unwrap(),
                oracle_upper_bits(k, gh.as_bytes()),
                "upper_bits({k}) at epoch {epoch}"
            );
        }
        // global hash against an independently written fold
        let ends: Vec<Digest> = (0..4)
            .map(|s| hash_digest(format!("end-{epoch}-{s}").as_bytes()))
            .collect();
        assert_eq!(compute_global_hash(&ends, 4).unwrap(), oracle_global_hash(&ends));

        // shard assignment per guarantor
        let rosters = assign_guarantor_shards(&gh, &addr_set, 2).unwrap();
        let mut oracle_rosters: BTreeMap<u32, Vec<Address>> = BTreeMap::new();
        for s in 0..4 {
            oracle_rosters.insert(s, Vec::new());
        }
        for addr in &addrs {
            let x = oracle_xor20(gh.as_bytes(), addr.as_bytes());
            let shard = (x[0] >> 6) as u32; // top 2 bits of the xor
            assert_eq!(guarantor_shard(&gh, addr, 2), shard);
            oracle_rosters.get_mut(&shard).unwrap().push(*addr);
        }
        for roster in oracle_rosters.values_mut() {
            roster.sort();
        }
        assert_eq!(rosters, oracle_rosters, "rosters at epoch {epoch}");

        // transaction shard is the plain address prefix
        for addr in addrs.iter().take(50) {
            assert_eq!(
                assign_tx_shard(addr, 2) as u8,
                addr.as_bytes()[0] >> 6,
                "tx shard"
            );
        }

        // election order: sort hex strings of the xor with the id
        let id = hash_digest(format!("tx-{epoch}").as_bytes());
        let roster = &rosters[&0];
        let order = elect_guarantor(roster, &id);
        let mut oracle: Vec<(String, Address)> = roster
            .iter()
            .map(|a| (hex::encode(oracle_xor20(id.as_bytes(), a.as_bytes())), *a))
            .collect();
        oracle.sort();
        let oracle_order: Vec<Address> = oracle.into_iter().map(|(_, a)| a).collect();
        assert_eq!(order, oracle_order, "election at epoch {epoch}");

        gh = hash_digest(gh.as_bytes());
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 10, "took {elapsed:?}");
    println!("PASS: criterion 1 formula conformance ({elapsed:?})");
}

// ---------- criterion 2: algorithm guard boundaries ----------

#[test]
fn criterion_2_algorithm_guards() {
    // RegisterAccount: deposit == balance passes, deposit = balance + 1 fails
    let kp = keygen(&seed_from("acc-reg", 0));
    let mut dir = KeyDirectory::new();
    dir.insert(kp.public_key());
    let tee = keygen(&seed_from("acc-tee", 0));
    let mut chain = PublicChainState::new(&tee.public_key());
    chain.fund(kp.address(), 10);
    let sig_ok = sign(
        &kp,
        &registration_payload(&kp.address(), 10, AccountKind::Client),
    );
    assert_eq!(
        chain.register_account(&dir, kp.address(), 10, AccountKind::Client, &sig_ok, 0),
        CallStatus::Success
    );
    let kp2 = keygen(&seed_from("acc-reg", 1));
    dir.insert(kp2.public_key());
    chain.fund(kp2.address(), 10);
    let sig_over = sign(
        &kp2,
        &registration_payload(&kp2.address(), 11, AccountKind::Client),
    );
    assert_eq!(
        chain.register_account(&dir, kp2.address(), 11, AccountKind::Client, &sig_over, 0),
        CallStatus::Failure
    );

    // VerifyTxInfo: balance >= c + fee, exact boundary
    let mut w = world(11, 100);
    let tx = assemble_txinfo(&w.payer, &w.payee, 10, 1, 0, 0).unwrap();
    let g = elected(&w, &tx.id);
    assert!(verify_txinfo(&g, &tx, 0, &mut w.ledger, &w.params, &w.dir).is_ok());
    let mut w = world(10, 100);
    let tx = assemble_txinfo(&w.payer, &w.payee, 10, 1, 0, 0).unwrap();
    let g = elected(&w, &tx.id);
    assert_eq!(
        verify_txinfo(&g, &tx, 0, &mut w.ledger, &w.params, &w.dir).unwrap_err(),
        ProtocolFailure::InsufficientBalance
    );

    // GenerateGuarantee: lock is exactly (c + fee) * ratio = 22
    let full_handshake = |w: &mut World| {
        let tx = assemble_txinfo(&w.payer, &w.payee, 10, 1, 0, 0).unwrap();
        let g = elected(w, &tx.id);
        let pg1 = verify_txinfo(&g, &tx, 0, &mut w.ledger, &w.params, &w.dir).unwrap();
        let mut responded = BTreeSet::new();
        let pg2 = payer_counter_sign(
            &w.payer,
            pg1,
            &g.address(),
            &mut responded,
            &w.ledger,
            &w.params,
            &w.dir,
        )
        .unwrap();
        let refs: Vec<&KeyPair> = w.group.iter().collect();
        let mut group_state = GroupState::default();
        group_generate_guarantee(
            &refs,
            pg2,
            0,
            &mut group_state,
            &mut w.ledger,
            &w.params,
            &w.dir,
        )
    };
    let mut w = world(11, 22);
    let guarantee = full_handshake(&mut w).unwrap();
    assert_eq!(w.ledger.account(guarantee.guarantor()).unwrap().locked, 22);
    let mut w = world(11, 21);
    assert_eq!(
        full_handshake(&mut w).unwrap_err(),
        ProtocolFailure::InsufficientDeposit
    );

    // Withdraw: age == time_interval passes, one tick later fails
    let mut chain = PublicChainState::new(&tee.public_key());
    chain.fund(kp.address(), 10);
    let sig = sign(
        &kp,
        &registration_payload(&kp.address(), 10, AccountKind::Client),
    );
    chain.register_account(&dir, kp.address(), 10, AccountKind::Client, &sig, 0);
    let cert = WithdrawalCertification::assemble(&tee, 100, kp.address(), 5);
    assert_eq!(chain.withdraw(&cert, 100 + 50, 50), CallStatus::Success);
    let cert2 = WithdrawalCertification::assemble(&tee, 200, kp.address(), 5);
    assert_eq!(chain.withdraw(&cert2, 200 + 51, 50), CallStatus::Failure);

    // Arbitration: claim fails while the guarantee is recorded, succeeds
    // with exact amounts when it was omitted
    let mut w = world(100, 300);
    let guarantee = full_handshake(&mut w).unwrap();
    let refs: Vec<&KeyPair> = w.group.iter().collect();
    let record = pretrust::protocol::payee_settlement_record(&w.payee, &guarantee);
    let b = w.ledger.produce_block(w.shard, &[], &refs);
    w.ledger.apply_block(b, &w.params, &w.dir).unwrap();
    let b = w.ledger.produce_block(w.shard, &[record], &refs);
    assert_eq!(b.records.len(), 1);
    w.ledger.apply_block(b, &w.params, &w.dir).unwrap();
    for _ in 0..w.params.expectation_window + 1 {
        let b = w.ledger.produce_block(w.shard, &[], &refs);
        w.ledger.apply_block(b, &w.params, &w.dir).unwrap();
    }
    assert_eq!(
        file_arbitration(&w.payee.address(), &guarantee, &w.ledger, &w.params, &w.dir)
            .unwrap_err(),
        ProtocolFailure::GuaranteeRecorded
    );
    let mut w = world(100, 300);
    let guarantee = full_handshake(&mut w).unwrap();
    let refs: Vec<&KeyPair> = w.group.iter().collect();
    for _ in 0..=guarantee.expectation().height_max {
        let b = w.ledger.produce_block(w.shard, &[], &refs);
        w.ledger.apply_block(b, &w.params, &w.dir).unwrap();
    }
    let claim =
        file_arbitration(&w.payee.address(), &guarantee, &w.ledger, &w.params, &w.dir).unwrap();
    // c = 10: compensation 15, punishment 5
    assert_eq!(claim.compensation_owed, 15);
    assert_eq!(claim.punishment_owed, 5);

    println!("PASS: criterion 2 algorithm guard boundaries");
}

// ---------- criterion 3: token conservation ----------

#[test]
fn criterion_3_token_conservation() {
    let start = Instant::now();
    let scenarios = [
        Scenario::HappyPath,
        Scenario::OmitGuarantee,
        Scenario::Overspend,
        Scenario::ReplaySn,
        Scenario::StaleGsig,
        Scenario::ExpiredCert,
        Scenario::SilentGuarantor,
        Scenario::WithdrawalRoundtrip,
    ];
    for scenario in scenarios {
        for seed in [1u64, 42, 20_240_817] {
            // epoch-boundary conservation is audited inside the run;
            // a violation is an Err here
            let out = run(scenario, seed);
            assert_eq!(
                out.metrics.summary.conservation,
                "PASS",
                "{} seed {seed}",
                scenario.name()
            );
            out.ledger.check_conservation(&out.external).unwrap();
        }
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 60, "took {elapsed:?}");
    println!("PASS: criterion 3 token conservation ({elapsed:?})");
}

// ---------- criterion 4: adversary outcomes ----------

#[test]
fn criterion_4_adversary_outcomes() {
    // omit_guarantee: c = 40 -> payee +60, arbitration producer +20
    let out = run(Scenario::OmitGuarantee, 42);
    assert_eq!(out.metrics.transactions[0].outcome, "compensated");
    assert_eq!(out.ledger.account(&client_addr(1)).unwrap().balance, 560);
    let block = &out.ledger.arbitration_chain.blocks[0];
    assert_eq!(block.records[0].paid_compensation, 60);
    assert_eq!(block.records[0].paid_punishment, 20);
    assert_eq!(block.records[0].loss, 0);
    assert_eq!(out.ledger.account(&block.producer).unwrap().balance, 20);

    // overspend: the attacked transaction moves nothing; only tx0 settles
    let out = run(Scenario::Overspend, 42);
    assert_eq!(out.metrics.transactions[1].outcome, "rejected");
    assert_eq!(out.ledger.account(&client_addr(1)).unwrap().balance, 510);
    assert_eq!(out.ledger.account(&client_addr(2)).unwrap().balance, 500);

    // replay_sn: the replayed serial numbers are rejected
    let out = run(Scenario::ReplaySn, 42);
    assert_eq!(out.metrics.transactions[1].outcome, "rejected");
    assert_eq!(out.ledger.account(&client_addr(0)).unwrap().balance, 489);
    assert_eq!(out.ledger.account(&client_addr(1)).unwrap().balance, 510);

    // stale_gsig: the stale-epoch guarantee is rejected by the payee
    let out = run(Scenario::StaleGsig, 42);
    assert_eq!(out.metrics.transactions[1].outcome, "rejected");
    assert_eq!(out.ledger.account(&client_addr(2)).unwrap().balance, 500);
    for account in out.ledger.accounts.values() {
        assert_eq!(account.locked, 0, "no stale collateral left locked");
    }

    // expired_cert: nothing moves on the public chain
    let out = run(Scenario::ExpiredCert, 42);
    assert_eq!(out.external.balance_of(&client_addr(0)), 500);
    assert!(out.external.withdrawn_log.is_empty());

    // silent_guarantor: the fallback candidate completes the transaction
    let out = run(Scenario::SilentGuarantor, 42);
    assert_eq!(out.metrics.transactions[0].outcome, "settled");
    assert_eq!(out.ledger.account(&client_addr(1)).unwrap().balance, 510);

    println!("PASS: criterion 4 adversary outcomes");
}

// ---------- criterion 5: latency vs on-chain baseline ----------

#[test]
fn criterion_5_latency_claim() {
    let out = run(Scenario::HappyPath, 42);
    for line in &out.metrics.transactions {
        assert_eq!(line.latency_ms, Some(60), "tx {}", line.tx);
    }
    let baseline = out.metrics.summary.baseline_ms;
    assert_eq!(baseline, 600_000);
    assert!(baseline / 60 >= 10_000, "four orders of magnitude");
    println!("PASS: criterion 5 latency 60ms vs 600s baseline");
}

// ---------- criterion 6: reshuffle uniformity ----------

#[test]
fn criterion_6_reshuffle_uniformity() {
    let addrs: BTreeSet<Address> = (0..1000)
        .map(|i| keygen(&seed_from("chi-addr", i)).address())
        .collect();
    let mut counts = [0u64; 4];
    let mut gh = hash_digest(b"chi-epoch");
    for _ in 0..200 {
        let rosters = assign_guarantor_shards(&gh, &addrs, 2).unwrap();
        for (shard, roster) in rosters {
            counts[shard as usize] += roster.len() as u64;
        }
        gh = hash_digest(gh.as_bytes());
    }
    let total: u64 = counts.iter().sum();
    assert_eq!(total, 200_000);
    let expected = total as f64 / 4.0;
    let chi2: f64 = counts
        .iter()
        .map(|&c| {
            let d = c as f64 - expected;
            d * d / expected
        })
        .sum();
    // chi-square critical value, df = 3, significance 0.01
    assert!(chi2 < 11.345, "chi2 = {chi2}");
    println!("PASS: criterion 6 reshuffle uniformity (chi2 = {chi2:.3})");
}

// ---------- criterion 7: determinism ----------

#[test]
fn criterion_7_determinism() {
    for scenario in [
        Scenario::HappyPath,
        Scenario::OmitGuarantee,
        Scenario::Overspend,
        Scenario::ReplaySn,
        Scenario::StaleGsig,
        Scenario::ExpiredCert,
        Scenario::SilentGuarantor,
        Scenario::WithdrawalRoundtrip,
    ] {
        let a = run(scenario, 42).metrics.to_json_lines();
        let b = run(scenario, 42).metrics.to_json_lines();
        assert_eq!(a, b, "{}", scenario.name());
    }
    println!("PASS: criterion 7 byte-identical reruns");
}

// ---------- criterion 8: cross-check vectors ----------

mod vectors;

#[test]
fn criterion_8_cross_check_vectors() {
    vectors::validate_checked_in_file();
    println!("PASS: criterion 8 cross-check vectors");
}
