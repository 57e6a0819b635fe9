use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use poe_core::ledger::{forensic_review, verify_ledger_bytes, Ledger, DEFAULT_SPEED_TOLERANCE, LEDGER_MAGIC, VERSION};
use poe_core::sim::{inject_attack, AttackSpec, LogLevel, ScenarioConfig, SimOutcome, REGISTRY_FILE};
use poe_core::{run_scenario, AccidentId, DmvRegistry};

#[derive(Parser)]
#[command(name = "poe", version, about = "Proof-of-Event accident recording simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write its ledger, transcript and metrics.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Replaces the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Check a ledger file's hash chain and multi-signatures.
    Verify {
        #[arg(long)]
        ledger: PathBuf,
        /// Registry holding the signers' keys; defaults to registry.json
        /// next to the ledger.
        #[arg(long)]
        registry: Option<PathBuf>,
    },
    /// Compare accident vehicles' self-reported speeds with witness estimates.
    Forensics {
        #[arg(long)]
        ledger: PathBuf,
        #[arg(long)]
        accident: String,
        /// Allowed deviation in m/s.
        #[arg(long, default_value_t = DEFAULT_SPEED_TOLERANCE)]
        tolerance: f64,
    },
    /// Run a scenario with one or more attacks injected.
    Attack {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        attack: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Failure with its exit status: 2 for unusable input, 1 otherwise.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn input(message: impl fmt::Display) -> Self {
        Self {
            code: 2,
            message: message.to_string(),
        }
    }

    fn internal(message: impl fmt::Display) -> Self {
        Self {
            code: 1,
            message: message.to_string(),
        }
    }
}

fn read(path: &Path) -> Result<Vec<u8>, Failure> {
    fs::read(path).map_err(|e| Failure::input(format!("{}: {e}", path.display())))
}

fn load_scenario(path: &Path) -> Result<ScenarioConfig, Failure> {
    ScenarioConfig::load(path).map_err(|e| Failure::input(format!("{}: {e}", path.display())))
}

fn print_header(cfg: &ScenarioConfig) {
    println!("scenario: {}", cfg.name);
    println!("seed: {}", cfg.seed);
}

fn finish_run(out: &SimOutcome, dir: &Path) -> Result<(), Failure> {
    out.write_outputs(dir, LogLevel::from_env())
        .map_err(|e| Failure::internal(format!("{}: {e}", dir.display())))?;
    println!("accident: {}", out.accident_id);
    println!("classification: {}, blocks: {}", out.classification, out.metrics.blocks);
    if let Some(fed) = &out.metrics.federation {
        let ids: Vec<String> = fed.members.iter().map(|v| v.0.to_string()).collect();
        println!(
            "federation: [{}], leader {}, threshold {}",
            ids.join(", "),
            fed.leader.0,
            fed.threshold_n
        );
    }
    if out.metrics.unconfirmed_records > 0 {
        println!("unconfirmed records: {}", out.metrics.unconfirmed_records);
    }
    for r in &out.metrics.events_rejected {
        let reasons: Vec<&str> = r.reasons.iter().map(|x| x.label()).collect();
        println!("rejected event from {}: {}", r.reporter.0, reasons.join(", "));
    }
    println!("output: {}", dir.display());
    Ok(())
}

fn cmd_run(scenario: &Path, out: &Path, seed: Option<u64>) -> Result<(), Failure> {
    let mut cfg = load_scenario(scenario)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    print_header(&cfg);
    let outcome = run_scenario(&cfg).map_err(Failure::input)?;
    finish_run(&outcome, out)
}

fn cmd_verify(ledger: &Path, registry: Option<&Path>) -> Result<(), Failure> {
    let bytes = read(ledger)?;
    let registry_path = registry
        .map(Path::to_path_buf)
        .unwrap_or_else(|| ledger.with_file_name(REGISTRY_FILE));
    let registry: DmvRegistry = serde_json::from_slice(&read(&registry_path)?)
        .map_err(|e| Failure::input(format!("{}: {e}", registry_path.display())))?;
    // A damaged header means this is not a ledger file at all.
    if bytes.len() < 5 || bytes[..4] != LEDGER_MAGIC || bytes[4] != VERSION {
        return Err(Failure::input(format!(
            "{}: not a version {VERSION} ledger file",
            ledger.display()
        )));
    }
    let report = verify_ledger_bytes(&bytes, &registry);
    if report.valid {
        println!("valid: {} blocks", report.blocks);
        return Ok(());
    }
    let height = report.first_bad_height.expect("invalid report names a height");
    println!("invalid: {} blocks", report.blocks);
    println!("first_bad_height: {height}");
    for (h, fault) in &report.faults {
        println!("  height {h}: {fault:?}");
    }
    Err(Failure {
        code: 1,
        message: format!("chain broken at height {height}"),
    })
}

fn cmd_forensics(ledger: &Path, accident: &str, tolerance: f64) -> Result<(), Failure> {
    let ledger =
        Ledger::from_file_bytes(&read(ledger)?).map_err(|e| Failure::input(format!("{}: {e}", ledger.display())))?;
    let id = AccidentId::from_hex(accident).map_err(|e| Failure::input(format!("--accident: {e}")))?;
    let report = forensic_review(&ledger, &id, tolerance).map_err(Failure::input)?;
    println!("accident: {id}");
    println!("tolerance: {tolerance} m/s");
    println!(
        "{:>8}  {:>9}  {:>9}  {:>9}  {:>9}  {:>9}  flag",
        "vehicle", "reported", "median", "deviation", "spread", "estimates"
    );
    let num = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"));
    for c in &report.comparisons {
        println!(
            "{:>8}  {:>9}  {:>9}  {:>9}  {:>9}  {:>9}  {}",
            c.subject.0,
            num(c.self_reported),
            num(c.median_estimate),
            num(c.deviation),
            num(c.spread),
            c.witness_estimates.len(),
            if c.flagged { "FLAGGED" } else { "" }
        );
    }
    println!("flagged: {}", report.flagged().count());
    Ok(())
}

fn cmd_attack(scenario: &Path, attack: &Path, out: &Path) -> Result<(), Failure> {
    let mut cfg = load_scenario(scenario)?;
    let raw = read(attack)?;
    let specs: Vec<AttackSpec> = match serde_json::from_slice::<serde_json::Value>(&raw) {
        Ok(serde_json::Value::Array(_)) => serde_json::from_slice(&raw),
        Ok(_) => serde_json::from_slice(&raw).map(|s| vec![s]),
        Err(e) => Err(e),
    }
    .map_err(|e| Failure::input(format!("{}: {e}", attack.display())))?;
    for spec in specs {
        cfg = inject_attack(&cfg, spec).map_err(|e| Failure::input(format!("{}: {e}", attack.display())))?;
    }
    print_header(&cfg);
    let outcome = run_scenario(&cfg).map_err(Failure::input)?;
    finish_run(&outcome, out)?;
    for a in &outcome.metrics.attacks {
        println!("{a}");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { scenario, out, seed } => cmd_run(scenario, out, *seed),
        Command::Verify { ledger, registry } => cmd_verify(ledger, registry.as_deref()),
        Command::Forensics {
            ledger,
            accident,
            tolerance,
        } => cmd_forensics(ledger, accident, *tolerance),
        Command::Attack { scenario, attack, out } => cmd_attack(scenario, attack, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
