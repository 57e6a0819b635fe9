//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use poe_core::crypto::{check_multisig, keygen, sign, Digest256, MultiSigSet};
use poe_core::event::EventRole;
use poe_core::ledger::{forensic_review, scan_ledger_file, verify_ledger_bytes, Ledger, UnconfirmedReason};
use poe_core::net::{BaseStation, CellId, Position};
use poe_core::protocol::{validate_event, AccidentContext, ThresholdRule};
use poe_core::sim::config::{Area, PopulationSpec};
use poe_core::sim::{
    run_scenario, run_scenario_on, AttackSpec, Classification, CollusionBehavior, LogLevel, ScenarioConfig,
    TamperField, VehicleSpec,
};
use poe_core::{DmvRegistry, RegistryEntry, ReputationScore, VehicleId};

const FIG2_BUDGET: Duration = Duration::from_secs(1);
const SCALE_BUDGET: Duration = Duration::from_secs(5);
const BIT_FLIPS: usize = 1000;
const LEDGER_BLOCKS: usize = 10;
const ATTACK_RUNS: u64 = 100;
const DETERMINISM_RUNS: usize = 20;
const SPEED_TOLERANCE: f64 = 2.0;
const SHIPPED: [&str; 8] = [
    "fig2_normal",
    "extreme_1",
    "extreme_2",
    "extreme_3",
    "attack_fake_witness",
    "attack_tamper",
    "attack_collusion",
    "forensics_speed",
];

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn load(name: &str) -> ScenarioConfig {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(format!("{name}.json"));
    ScenarioConfig::load(&p).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn normal_path() -> Check {
    let cfg = load("fig2_normal");
    let start = Instant::now();
    let out = run_scenario(&cfg).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    ensure(out.classification == Classification::Normal, || {
        format!("classified {}", out.classification)
    })?;
    let blocks = out.ledger.blocks();
    ensure(blocks.len() == 1, || format!("{} blocks", blocks.len()))?;
    let reporters: Vec<u32> = blocks[0].events.iter().map(|e| e.reporter.0).collect();
    ensure(reporters == [1, 2, 3, 4, 5], || format!("events from {reporters:?}"))?;
    ensure(elapsed < FIG2_BUDGET, || format!("took {elapsed:?}"))?;
    let mut cases = Vec::new();
    for (m, n) in [(4usize, 3u32), (5, 3)] {
        let mut c = cfg.clone();
        c.protocol.m = m;
        c.protocol.threshold = ThresholdRule::Fixed(n);
        let out = run_scenario(&c).map_err(|e| e.to_string())?;
        let b = out.ledger.blocks().first().ok_or(format!("{n}-of-{m}: no block"))?;
        let ms = &b.multisig;
        ensure(ms.federation.len() == m && ms.threshold_n == n, || {
            format!("{n}-of-{m}: got {}-of-{}", ms.threshold_n, ms.federation.len())
        })?;
        let ok = check_multisig(&b.endorsement_digest(), ms, &out.registry).map_err(|e| e.to_string())?;
        ensure(ok && b.events.len() == 5, || {
            format!("{n}-of-{m}: multisig {ok}, {} events", b.events.len())
        })?;
        cases.push(format!("{n}-of-{m} ({} sigs)", ms.signatures.len()));
    }
    Ok(format!(
        "Normal, 1 block, events A..E, multisig {} in {elapsed:.1?}",
        cases.join(", ")
    ))
}

fn extremes() -> Check {
    let mut parts = Vec::new();
    for (name, class) in [
        ("extreme_1", Classification::NoWitnessNoVerifier),
        ("extreme_2", Classification::NoWitness),
        ("extreme_3", Classification::NoVerifier),
    ] {
        let out = run_scenario(&load(name)).map_err(|e| e.to_string())?;
        ensure(out.classification == class, || {
            format!("{name}: classified {}", out.classification)
        })?;
        let blocks = out.ledger.blocks();
        let unconfirmed = &out.ledger.unconfirmed;
        match class {
            Classification::NoWitness => {
                ensure(blocks.len() == 1, || format!("{name}: {} blocks", blocks.len()))?;
                ensure(
                    blocks[0].events.iter().all(|e| e.role == EventRole::Accident) && blocks[0].events.len() == 2,
                    || format!("{name}: block holds non-accident events"),
                )?;
            }
            _ => {
                ensure(blocks.is_empty(), || format!("{name}: {} blocks", blocks.len()))?;
                ensure(!unconfirmed.is_empty(), || format!("{name}: no unconfirmed records"))?;
                ensure(
                    unconfirmed.iter().all(|r| r.reason == UnconfirmedReason::NoVerifier),
                    || format!("{name}: unexpected unconfirmed reason"),
                )?;
                let has_witness = unconfirmed
                    .iter()
                    .flat_map(|r| &r.events)
                    .any(|e| e.role == EventRole::Witness);
                let want_witness = class == Classification::NoVerifier;
                ensure(has_witness == want_witness, || {
                    format!("{name}: witness events present = {has_witness}")
                })?;
            }
        }
        parts.push(format!("{name} {class}"));
    }
    Ok(parts.join(", "))
}

/// Sequential accidents on one DMV chain.
fn honest_ledger() -> (Ledger, DmvRegistry) {
    let base = load("fig2_normal");
    let mut ledger = Ledger::new();
    let mut registry = DmvRegistry::default();
    for i in 0..LEDGER_BLOCKS as u64 {
        let mut cfg = base.clone();
        cfg.seed = 1000 + i;
        cfg.accident.time_ms = 60_000 + i * 10_000;
        let out = run_scenario_on(&cfg, ledger).unwrap();
        ledger = out.ledger;
        registry = out.registry;
    }
    (ledger, registry)
}

fn tamper_evidence() -> Check {
    let (ledger, registry) = honest_ledger();
    ensure(ledger.len() >= LEDGER_BLOCKS, || {
        format!("only {} blocks", ledger.len())
    })?;
    let bytes = ledger.to_file_bytes();
    ensure(verify_ledger_bytes(&bytes, &registry).valid, || {
        "honest ledger fails".into()
    })?;
    let spans = scan_ledger_file(&bytes).spans;
    // Height owning a byte: the record whose prefix or payload holds it.
    let height_of = |pos: usize| -> u64 { spans.iter().position(|s| pos < s.end).map_or(0, |i| i as u64) };
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    for trial in 0..BIT_FLIPS {
        let pos = rng.gen_range(0..bytes.len());
        let bit = rng.gen_range(0..8);
        let mut bad = bytes.clone();
        bad[pos] ^= 1 << bit;
        let report = verify_ledger_bytes(&bad, &registry);
        let h = height_of(pos);
        ensure(!report.valid, || {
            format!("trial {trial}: flip at byte {pos} bit {bit} undetected")
        })?;
        let got = report.first_bad_height.unwrap();
        ensure(got <= h, || {
            format!("trial {trial}: flip in height {h} reported at {got}")
        })?;
    }
    Ok(format!(
        "{BIT_FLIPS}/{BIT_FLIPS} flips over {} blocks ({} bytes) detected",
        ledger.len(),
        bytes.len()
    ))
}

fn threshold_semantics() -> Check {
    let msg = Digest256([7; 32]);
    let other = Digest256([8; 32]);
    let mut cases = 0u64;
    for m in 1..=7u32 {
        let ids: Vec<VehicleId> = (1..=m).map(VehicleId).collect();
        let keys: Vec<_> = ids.iter().map(|id| keygen(&[id.0 as u8; 32])).collect();
        let mut registry = DmvRegistry::default();
        for (id, k) in ids.iter().zip(&keys) {
            registry
                .register(
                    *id,
                    RegistryEntry {
                        plate: format!("P{}", id.0),
                        vin: format!("V{}", id.0),
                        public_key: k.public(),
                        reputation: ReputationScore::from_milli(50_000),
                    },
                )
                .unwrap();
        }
        for n in 1..=m {
            for subset in 0u32..(1 << m) {
                // Members outside the subset alternate between no signature
                // and a signature over a different digest.
                for noise in [false, true] {
                    let mut ms = MultiSigSet {
                        federation: ids.clone(),
                        threshold_n: n,
                        signatures: Default::default(),
                    };
                    for (i, (id, k)) in ids.iter().zip(&keys).enumerate() {
                        if subset & (1 << i) != 0 {
                            ms.signatures.insert(*id, sign(k, &msg));
                        } else if noise {
                            ms.signatures.insert(*id, sign(k, &other));
                        }
                    }
                    // Brute-force oracle straight on ed25519.
                    let valid = ms
                        .signatures
                        .iter()
                        .filter(|(id, s)| {
                            let vk =
                                ed25519_dalek::VerifyingKey::from_bytes(&registry.public_key(**id).unwrap().0).unwrap();
                            vk.verify_strict(&msg.0, &ed25519_dalek::Signature::from_bytes(&s.0))
                                .is_ok()
                        })
                        .count() as u32;
                    let got = check_multisig(&msg, &ms, &registry).unwrap();
                    ensure(got == (valid >= n), || {
                        format!("m={m} n={n} subset={subset:b} noise={noise}: got {got}")
                    })?;
                    cases += 1;
                }
            }
        }
    }
    Ok(format!("{cases} (m, n, subset) cases match the oracle"))
}

fn fake_witness_runs() -> Result<String, String> {
    let base = load("fig2_normal");
    let mut rejected = 0;
    for seed in 0..ATTACK_RUNS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cfg = base.clone();
        cfg.seed = seed;
        cfg.attacks.clear();
        let fakes: Vec<VehicleId> = (0..rng.gen_range(1..=3)).map(|i| VehicleId(900 + i)).collect();
        for f in &fakes {
            cfg.world.vehicles.push(VehicleSpec::new(
                f.0,
                rng.gen_range(4000.0..6000.0),
                rng.gen_range(-1500.0..1500.0),
            ));
        }
        let delay = rng.gen_range(cfg.protocol.reply_window_ms + 1..=4 * cfg.protocol.reply_window_ms);
        cfg.attacks.push(AttackSpec::FakeWitnessRelay {
            relayer: VehicleId(rng.gen_range(3..=5)),
            fake_witnesses: fakes.clone(),
            relay_delay_ms: delay,
        });
        let out = run_scenario(&cfg).map_err(|e| e.to_string())?;
        let in_block = out
            .ledger
            .blocks()
            .iter()
            .flat_map(|b| &b.events)
            .any(|e| fakes.contains(&e.reporter));
        let a = &out.metrics.attacks[0];
        ensure(!in_block && !a.succeeded, || {
            format!("seed {seed}: fake event accepted (delay {delay})")
        })?;
        ensure(a.mitigation.as_deref() == Some("reply window"), || {
            format!("seed {seed}: mitigated by {a}")
        })?;
        rejected += 1;
    }
    Ok(format!("fake witness rejected {rejected}/{ATTACK_RUNS}"))
}

fn tamper_runs() -> Result<String, String> {
    let base = load("fig2_normal");
    let fields = [
        TamperField::Speed,
        TamperField::LocationX,
        TamperField::LocationY,
        TamperField::Timestamp,
        TamperField::Heading,
    ];
    let mut leaked = 0;
    let mut blocks = 0;
    for seed in 0..ATTACK_RUNS {
        let mut rng = ChaCha8Rng::seed_from_u64(10_000 + seed);
        let mut cfg = base.clone();
        cfg.seed = seed;
        cfg.attacks = vec![AttackSpec::TamperEvent {
            attacker: VehicleId(rng.gen_range(1..=5)),
            field: fields[rng.gen_range(0..fields.len())],
            delta: rng.gen_range(1.0..30.0),
        }];
        let out = run_scenario(&cfg).map_err(|e| e.to_string())?;
        blocks += out.ledger.len();
        leaked += out
            .ledger
            .blocks()
            .iter()
            .flat_map(|b| &b.events)
            .filter(|e| !e.digest_matches())
            .count();
    }
    ensure(leaked == 0, || format!("{leaked} tampered events entered blocks"))?;
    Ok(format!(
        "tampered events in blocks 0 over {ATTACK_RUNS} runs ({blocks} blocks)"
    ))
}

fn collusion_sweep() -> Result<String, String> {
    let mut cfg = load("attack_collusion");
    let probe = run_scenario(&cfg).map_err(|e| e.to_string())?;
    let fed = probe.metrics.federation.ok_or("no federation")?;
    ensure(fed.size() == 5, || format!("federation of {}", fed.size()))?;
    let n = fed.threshold_n as usize;
    let mut line = Vec::new();
    for c in 0..=fed.size() {
        cfg.attacks = vec![AttackSpec::TamperEvent {
            attacker: VehicleId(3),
            field: TamperField::Speed,
            delta: 6.5,
        }];
        if c > 0 {
            cfg.attacks.push(AttackSpec::ColludingVerifiers {
                members: fed.members[..c].to_vec(),
                behavior: CollusionBehavior::ApproveTampered,
            });
        }
        let out = run_scenario(&cfg).map_err(|e| e.to_string())?;
        let ctx = AccidentContext {
            accident_id: out.accident_id,
            accident_vehicles: cfg.accident.colliding.iter().copied().collect::<BTreeSet<_>>(),
            scene: Position::new(2.0, 1.5),
            accident_time: cfg.accident.time_ms,
            dsrc_range: cfg.protocol.dsrc_range,
            reply_window: cfg.protocol.reply_window_ms,
        };
        let bad = out
            .ledger
            .blocks()
            .iter()
            .flat_map(|b| &b.events)
            .any(|e| !validate_event(e, &out.registry, &ctx).ok);
        let reported = out
            .metrics
            .attacks
            .iter()
            .any(|a| a.kind == "colluding_verifiers" && a.succeeded);
        let expected = c > fed.size() / 2 && c >= n;
        ensure(bad == expected && reported == expected, || {
            format!("c={c}: tampered in block {bad}, reported {reported}, expected {expected}")
        })?;
        line.push(format!("c={c}:{}", if bad { "succeeds" } else { "fails" }));
    }
    Ok(format!("collusion (m=5, n={n}) {}", line.join(" ")))
}

fn attack_suite() -> Check {
    Ok([fake_witness_runs()?, tamper_runs()?, collusion_sweep()?].join("; "))
}

fn determinism() -> Check {
    for name in SHIPPED {
        let cfg = load(name);
        let first = run_scenario(&cfg).map_err(|e| e.to_string())?;
        let reference = (
            first.ledger.to_file_bytes(),
            first.ledger.unconfirmed_file_bytes(),
            first.transcript.to_jsonl(LogLevel::Full),
        );
        for i in 1..DETERMINISM_RUNS {
            let out = run_scenario(&cfg).map_err(|e| e.to_string())?;
            let again = (
                out.ledger.to_file_bytes(),
                out.ledger.unconfirmed_file_bytes(),
                out.transcript.to_jsonl(LogLevel::Full),
            );
            ensure(again == reference, || format!("{name}: run {i} differs"))?;
        }
    }
    Ok(format!(
        "{} scenarios x {DETERMINISM_RUNS} runs byte-identical",
        SHIPPED.len()
    ))
}

fn forensics() -> Check {
    let cfg = load("forensics_speed");
    let out = run_scenario(&cfg).map_err(|e| e.to_string())?;
    let report = forensic_review(&out.ledger, &out.accident_id, SPEED_TOLERANCE).map_err(|e| e.to_string())?;
    let flagged: Vec<u32> = report.flagged().map(|c| c.subject.0).collect();
    ensure(flagged == [2], || format!("flagged {flagged:?}"))?;
    let b = report.comparisons.iter().find(|c| c.subject.0 == 2).unwrap();
    let reported = b.self_reported.unwrap();
    let median = b.median_estimate.unwrap();
    ensure((reported - 8.9).abs() < 1e-9 && (median - 13.4).abs() < 1e-9, || {
        format!("B {reported} vs {median}")
    })?;

    let mut fixed = cfg.clone();
    for v in &mut fixed.world.vehicles {
        if v.id.0 == 2 {
            v.sensor_speed = None;
        }
    }
    let out = run_scenario(&fixed).map_err(|e| e.to_string())?;
    let report = forensic_review(&out.ledger, &out.accident_id, SPEED_TOLERANCE).map_err(|e| e.to_string())?;
    let n = report.flagged().count();
    ensure(n == 0, || format!("consistent variant flags {n}"))?;
    Ok(format!(
        "B self-reports {reported:.1} vs median {median:.1}, flagged; consistent variant 0 flags"
    ))
}

fn scale() -> Check {
    let mut cfg = load("fig2_normal");
    cfg.name = "scale_1000".into();
    cfg.world.base_stations = (0..10u32)
        .map(|i| BaseStation {
            id: CellId(i + 1),
            position: Position::new(1000.0 + 2000.0 * (i % 5) as f64, 1000.0 + 2000.0 * (i / 5) as f64),
        })
        .collect();
    let mut a = VehicleSpec::new(1, 5000.0, 1000.0);
    a.reputation = ReputationScore::from_milli(60_000);
    let b = VehicleSpec::new(2, 5004.0, 1003.0);
    cfg.world.vehicles = vec![a, b];
    cfg.world.population = Some(PopulationSpec {
        count: 998,
        first_id: 100,
        area: Area {
            min_x: 0.0,
            min_y: 0.0,
            max_x: 10_000.0,
            max_y: 4000.0,
        },
        reputation: (20.0, 90.0),
        max_speed: 20.0,
        seed: None,
    });
    let start = Instant::now();
    let out = run_scenario(&cfg).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let total = cfg.all_vehicles().len();
    ensure(total == 1000, || format!("{total} vehicles"))?;
    ensure(out.metrics.blocks == 1, || {
        format!("{} blocks ({})", out.metrics.blocks, out.classification)
    })?;
    ensure(elapsed < SCALE_BUDGET, || format!("took {elapsed:?}"))?;
    Ok(format!(
        "{total} vehicles, 10 cells: {} with {} witnesses, {} messages, {elapsed:.1?}",
        out.classification,
        out.metrics.witnesses.len(),
        out.metrics.messages_sent
    ))
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("normal path (fig2)", normal_path),
        ("extreme scenarios", extremes),
        ("tamper evidence", tamper_evidence),
        ("threshold semantics", threshold_semantics),
        ("attack suite", attack_suite),
        ("determinism", determinism),
        ("forensics", forensics),
        ("scale sanity", scale),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let result = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        match result {
            Ok(detail) => println!("PASS [{}] {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL [{}] {name}: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
