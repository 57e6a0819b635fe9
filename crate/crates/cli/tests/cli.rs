use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn scenario(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(name)
}

fn poe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_poe")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn run(name: &str, out: &Path) -> Output {
    poe(&[
        "run",
        "--scenario",
        scenario(name).to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ])
}

fn accident_of(o: &Output) -> String {
    stdout(o)
        .lines()
        .find_map(|l| l.strip_prefix("accident: "))
        .unwrap()
        .to_string()
}

#[test]
fn run_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let o = run("fig2_normal.json", dir.path());
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.contains("seed: 42"));
    assert!(text.contains("classification: Normal, blocks: 1"));
    for f in [
        "ledger.poel",
        "unconfirmed.poeu",
        "transcript.jsonl",
        "metrics.json",
        "registry.json",
        "ledger.json",
    ] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
}

#[test]
fn run_missing_scenario_exits_2_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = run("no_such_scenario.json", dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no_such_scenario.json"));
}

#[test]
fn run_bad_field_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    let mut cfg: serde_json::Value = serde_json::from_slice(&fs::read(scenario("fig2_normal.json")).unwrap()).unwrap();
    cfg["accident"]["colliding"] = serde_json::json!([1, 999]);
    fs::write(&path, cfg.to_string()).unwrap();
    let o = poe(&[
        "run",
        "--scenario",
        path.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("accident.colliding"));
}

#[test]
fn seed_override_is_printed_and_only_moves_the_federation() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let base = run("fig2_normal.json", a.path());
    let o = poe(&[
        "run",
        "--scenario",
        scenario("fig2_normal.json").to_str().unwrap(),
        "--out",
        b.path().to_str().unwrap(),
        "--seed",
        "7",
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("seed: 7"));
    let strip = |s: String| -> Vec<String> {
        s.lines()
            .filter(|l| !l.starts_with("seed:") && !l.starts_with("federation:") && !l.starts_with("output:"))
            .map(str::to_string)
            .collect()
    };
    assert_eq!(strip(stdout(&base)), strip(stdout(&o)));
}

#[test]
fn verify_honest_and_empty_ledgers() {
    let dir = tempfile::tempdir().unwrap();
    run("fig2_normal.json", dir.path());
    let ledger = dir.path().join("ledger.poel");
    let o = poe(&["verify", "--ledger", ledger.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("valid: 1 blocks"));

    let empty = dir.path().join("empty.poel");
    fs::write(&empty, b"POEL\x01").unwrap();
    let o = poe(&[
        "verify",
        "--ledger",
        empty.to_str().unwrap(),
        "--registry",
        dir.path().join("registry.json").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("0 blocks"));
}

#[test]
fn verify_flipped_bit_exits_1_with_height() {
    let dir = tempfile::tempdir().unwrap();
    run("fig2_normal.json", dir.path());
    let ledger = dir.path().join("ledger.poel");
    let mut bytes = fs::read(&ledger).unwrap();
    let i = bytes.len() - 40;
    bytes[i] ^= 0x10;
    fs::write(&ledger, bytes).unwrap();
    let o = poe(&["verify", "--ledger", ledger.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("first_bad_height: 0"));
}

#[test]
fn verify_bad_magic_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    run("fig2_normal.json", dir.path());
    let ledger = dir.path().join("ledger.poel");
    let mut bytes = fs::read(&ledger).unwrap();
    bytes[0] = b'X';
    fs::write(&ledger, bytes).unwrap();
    let o = poe(&["verify", "--ledger", ledger.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn forensics_table_and_unknown_accident() {
    let dir = tempfile::tempdir().unwrap();
    let o = run("forensics_speed.json", dir.path());
    let ledger = dir.path().join("ledger.poel");
    let aid = accident_of(&o);
    let o = poe(&[
        "forensics",
        "--ledger",
        ledger.to_str().unwrap(),
        "--accident",
        &aid,
        "--tolerance",
        "2",
    ]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text
        .lines()
        .any(|l| l.trim_start().starts_with("2 ") && l.ends_with("FLAGGED")));
    assert!(text.contains("flagged: 1"));

    let o = poe(&[
        "forensics",
        "--ledger",
        ledger.to_str().unwrap(),
        "--accident",
        "00000000000000000000000000000000",
        "--tolerance",
        "2",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn forensics_without_discrepancy_flags_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let o = run("fig2_normal.json", dir.path());
    let aid = accident_of(&o);
    let ledger = dir.path().join("ledger.poel");
    let o = poe(&[
        "forensics",
        "--ledger",
        ledger.to_str().unwrap(),
        "--accident",
        &aid,
        "--tolerance",
        "2",
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("flagged: 0"));
}

fn attack(file: &str, out: &Path) -> Output {
    poe(&[
        "attack",
        "--scenario",
        scenario("fig2_normal.json").to_str().unwrap(),
        "--attack",
        scenario("attacks").join(file).to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ])
}

#[test]
fn attack_summaries() {
    for (file, expect) in [
        ("fake_witness.json", "mitigated: reply window"),
        ("tamper.json", "mitigated: digest mismatch"),
        ("impersonate.json", "mitigated: signature check"),
    ] {
        let dir = tempfile::tempdir().unwrap();
        let o = attack(file, dir.path());
        assert_eq!(o.status.code(), Some(0), "{file}");
        assert!(stdout(&o).contains(expect), "{file}: {}", stdout(&o));
        assert!(dir.path().join("ledger.poel").is_file());
    }
}

#[test]
fn collusion_at_threshold_reports_success() {
    let dir = tempfile::tempdir().unwrap();
    let o = run("fig2_normal.json", dir.path());
    let members: Vec<u32> = stdout(&o)
        .lines()
        .find_map(|l| l.strip_prefix("federation: ["))
        .and_then(|l| l.split(']').next())
        .unwrap()
        .split(", ")
        .map(|s| s.parse().unwrap())
        .collect();
    let spec = serde_json::json!([
        {"kind": "tamper_event", "attacker": 3, "field": "speed", "delta": 6.5},
        {"kind": "colluding_verifiers", "members": &members[..4], "behavior": "approve_tampered"}
    ]);
    let path = dir.path().join("collusion.json");
    fs::write(&path, spec.to_string()).unwrap();
    let o = attack(path.to_str().unwrap(), &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("colluding_verifiers: succeeded"), "{}", stdout(&o));
}

#[test]
fn invalid_attack_spec_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(
        &path,
        r#"{"kind": "tamper_event", "attacker": 999, "field": "speed", "delta": 1.0}"#,
    )
    .unwrap();
    let o = attack(path.to_str().unwrap(), dir.path());
    assert_eq!(o.status.code(), Some(2));
    fs::write(&path, r#"{"kind": "teleport"}"#).unwrap();
    let o = attack(path.to_str().unwrap(), dir.path());
    assert_eq!(o.status.code(), Some(2));
}
