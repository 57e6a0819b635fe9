//! Proof-of-Event accident recording with dynamic federation consensus.
//!
//! Vehicles involved in an accident gather signed event records from
//! nearby witnesses, a reputation-weighted federation of community vehicles
//! validates them, and the lead verifier assembles an n-of-m co-signed block
//! that the DMV appends to a hash-chained ledger.
//!
//! Modules, bottom-up:
//!
//! - [`codec`]: normative canonical byte encoding
//! - [`crypto`], [`registry`]: digests, signatures, multisig, DMV registry
//! - [`net`]: base-station cells and DSRC reachability
//! - [`event`]: EDR logs and signed event records
//! - [`protocol`]: federation selection, validation, block assembly and the
//!   per-vehicle state machine
//! - [`ledger`]: the DMV chain, file format and forensic review
//! - [`sim`]: deterministic discrete-event harness, scenarios and attacks

pub mod codec;
pub mod crypto;
pub mod event;
pub mod ledger;
pub mod net;
pub mod protocol;
pub mod registry;
pub mod sim;

pub use codec::{Canonical, DecodeError};
pub use crypto::{check_multisig, digest, keygen, sign, verify, Digest256, KeyPair, MultiSigSet, PublicKey, Signature};
pub use event::{AccidentId, EdrLog, EdrSample, EventData, EventRole, Observation};
pub use net::{BaseStation, CellId, Position, Velocity, WorldState};
pub use protocol::{Federation, Message, ProtocolParams, Role, SignedMessage, ThresholdRule};
pub use registry::{DmvRegistry, RegistryEntry, ReputationScore, VehicleId};
pub use sim::{run_scenario, Classification, ScenarioConfig, SimOutcome};
