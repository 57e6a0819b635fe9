//! The DMV's append-only chain of accident blocks.
//!
//! Two digests are attached to every block:
//!
//! - the *endorsement digest* covers the accident id, the accepted events,
//!   the federation, threshold and leader. Verifiers sign it, so it must not
//!   depend on the signatures themselves, nor on the chain position the DMV
//!   assigns on arrival.
//! - the *block hash* covers every field except itself (signatures and chain
//!   position included) and is what the next block links to.

mod file;
pub mod forensics;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::codec::{Canonical, DecodeError, Decoder, Encoder};
use crate::crypto::{check_multisig, digest, Digest256, MultiSigSet};
use crate::event::{AccidentId, EventData};
use crate::registry::{DmvRegistry, VehicleId};

pub use file::{
    decode_unconfirmed_file, encode_unconfirmed_file, scan_ledger_file, verify_ledger_bytes, FramingError, LedgerScan,
    LEDGER_MAGIC, UNCONFIRMED_MAGIC, VERSION,
};
pub use forensics::{forensic_review, DiscrepancyReport, ForensicError, SubjectComparison, DEFAULT_SPEED_TOLERANCE};

const ENDORSEMENT_DOMAIN: &[u8] = b"POE/endorsement/v1";

/// Digest that federation members sign for a candidate block.
pub fn endorsement_digest(
    accident_id: &AccidentId,
    events: &[EventData],
    federation: &[VehicleId],
    threshold_n: u32,
    leader: VehicleId,
) -> Digest256 {
    let mut enc = Encoder::new();
    enc.raw(ENDORSEMENT_DOMAIN)
        .value(accident_id)
        .list(events)
        .list(federation)
        .u32(threshold_n)
        .value(&leader);
    digest(&enc.finish())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub height: u64,
    pub prev_hash: Digest256,
    pub accident_id: AccidentId,
    pub events: Vec<EventData>,
    pub multisig: MultiSigSet,
    pub leader: VehicleId,
    pub created_at: u64,
    pub block_hash: Digest256,
}

impl Block {
    fn encode_preimage(&self, enc: &mut Encoder) {
        enc.u64(self.height)
            .value(&self.prev_hash)
            .value(&self.accident_id)
            .list(&self.events)
            .value(&self.multisig)
            .value(&self.leader)
            .u64(self.created_at);
    }

    pub fn recompute_hash(&self) -> Digest256 {
        let mut enc = Encoder::new();
        self.encode_preimage(&mut enc);
        digest(&enc.finish())
    }

    pub fn hash_matches(&self) -> bool {
        self.recompute_hash() == self.block_hash
    }

    /// Recomputes and stores `block_hash`.
    pub fn seal(&mut self) {
        self.block_hash = self.recompute_hash();
    }

    pub fn endorsement_digest(&self) -> Digest256 {
        endorsement_digest(
            &self.accident_id,
            &self.events,
            &self.multisig.federation,
            self.multisig.threshold_n,
            self.leader,
        )
    }

    pub fn header(&self) -> BlockHeader {
        BlockHeader {
            height: self.height,
            prev_hash: self.prev_hash,
            accident_id: self.accident_id,
            block_hash: self.block_hash,
        }
    }
}

impl Canonical for Block {
    fn encode(&self, enc: &mut Encoder) {
        self.encode_preimage(enc);
        enc.value(&self.block_hash);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(Self {
            height: dec.u64()?,
            prev_hash: dec.value()?,
            accident_id: dec.value()?,
            events: dec.list()?,
            multisig: dec.value()?,
            leader: dec.value()?,
            created_at: dec.u64()?,
            block_hash: dec.value()?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockHeader {
    pub height: u64,
    pub prev_hash: Digest256,
    pub accident_id: AccidentId,
    pub block_hash: Digest256,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum UnconfirmedReason {
    /// No federation could be formed.
    NoVerifier,
    /// The federation did not reach its signature threshold in time.
    ThresholdNotMet,
    /// No event survived validation.
    EmptyEventSet,
}

impl Canonical for UnconfirmedReason {
    fn encode(&self, enc: &mut Encoder) {
        enc.u8(match self {
            UnconfirmedReason::NoVerifier => 0,
            UnconfirmedReason::ThresholdNotMet => 1,
            UnconfirmedReason::EmptyEventSet => 2,
        });
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let offset = dec.position();
        match dec.u8()? {
            0 => Ok(Self::NoVerifier),
            1 => Ok(Self::ThresholdNotMet),
            2 => Ok(Self::EmptyEventSet),
            tag => Err(DecodeError::BadTag {
                what: "unconfirmed reason",
                tag,
                offset,
            }),
        }
    }
}

/// Evidence the DMV keeps outside the chain when no block could be built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnconfirmedEventRecord {
    pub accident_id: AccidentId,
    pub reason: UnconfirmedReason,
    pub submitted_by: VehicleId,
    pub recorded_at: u64,
    pub events: Vec<EventData>,
}

impl Canonical for UnconfirmedEventRecord {
    fn encode(&self, enc: &mut Encoder) {
        enc.value(&self.accident_id)
            .value(&self.reason)
            .value(&self.submitted_by)
            .u64(self.recorded_at)
            .list(&self.events);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(Self {
            accident_id: dec.value()?,
            reason: dec.value()?,
            submitted_by: dec.value()?,
            recorded_at: dec.u64()?,
            events: dec.list()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AppendError {
    #[error("block height {got}, expected {expected}")]
    BadHeight { expected: u64, got: u64 },
    #[error("prev_hash {got} does not match tip {expected}")]
    BadPrevHash { expected: Digest256, got: Digest256 },
    #[error("stored block hash does not match block contents")]
    BadBlockHash,
    #[error("multi-signature threshold not satisfied")]
    MultisigFailed,
}

/// Why a stored block failed verification.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChainFault {
    /// The file header or a record frame is unreadable.
    Framing(String),
    /// The record could not be decoded as a block.
    Undecodable(String),
    BadHeight {
        expected: u64,
        got: u64,
    },
    BadPrevHash,
    BadBlockHash,
    MultisigFailed,
    /// Structurally fine, but descends from an earlier bad block.
    Unanchored,
}

impl From<AppendError> for ChainFault {
    fn from(e: AppendError) -> Self {
        match e {
            AppendError::BadHeight { expected, got } => ChainFault::BadHeight { expected, got },
            AppendError::BadPrevHash { .. } => ChainFault::BadPrevHash,
            AppendError::BadBlockHash => ChainFault::BadBlockHash,
            AppendError::MultisigFailed => ChainFault::MultisigFailed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainReport {
    pub valid: bool,
    pub blocks: usize,
    pub first_bad_height: Option<u64>,
    /// Every failing position with the fault found there.
    pub faults: BTreeMap<u64, ChainFault>,
}

impl ChainReport {
    fn from_faults(blocks: usize, faults: BTreeMap<u64, ChainFault>) -> Self {
        Self {
            valid: faults.is_empty(),
            blocks,
            first_bad_height: faults.keys().next().copied(),
            faults,
        }
    }
}

/// Checks one block against its expected position and predecessor hash.
pub fn check_block(
    block: &Block,
    expected_height: u64,
    expected_prev: &Digest256,
    registry: &DmvRegistry,
) -> Result<(), AppendError> {
    if block.height != expected_height {
        return Err(AppendError::BadHeight {
            expected: expected_height,
            got: block.height,
        });
    }
    if block.prev_hash != *expected_prev {
        return Err(AppendError::BadPrevHash {
            expected: *expected_prev,
            got: block.prev_hash,
        });
    }
    if !block.hash_matches() {
        return Err(AppendError::BadBlockHash);
    }
    match check_multisig(&block.endorsement_digest(), &block.multisig, registry) {
        Ok(true) => Ok(()),
        _ => Err(AppendError::MultisigFailed),
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Ledger {
    blocks: Vec<Block>,
    pub unconfirmed: Vec<UnconfirmedEventRecord>,
}

impl Ledger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Wraps blocks without checking them; see [`Ledger::verify_chain`].
    pub fn from_blocks(blocks: Vec<Block>) -> Self {
        Self {
            blocks,
            unconfirmed: Vec::new(),
        }
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Hash the next block must link to; all zeros before genesis.
    pub fn tip_hash(&self) -> Digest256 {
        self.blocks.last().map_or(Digest256::ZERO, |b| b.block_hash)
    }

    pub fn next_height(&self) -> u64 {
        self.blocks.len() as u64
    }

    /// Appends `block` iff it extends the current tip and all block
    /// invariants hold; the ledger is unchanged otherwise.
    pub fn append_block(&mut self, block: Block, registry: &DmvRegistry) -> Result<(), AppendError> {
        check_block(&block, self.next_height(), &self.tip_hash(), registry)?;
        self.blocks.push(block);
        Ok(())
    }

    /// Places `block` at the tip and appends it. The chain position is the
    /// DMV's to assign; the endorsement signatures do not cover it.
    pub fn accept_block(&mut self, mut block: Block, registry: &DmvRegistry) -> Result<u64, AppendError> {
        block.height = self.next_height();
        block.prev_hash = self.tip_hash();
        block.seal();
        let height = block.height;
        self.append_block(block, registry)?;
        Ok(height)
    }

    pub fn verify_chain(&self, registry: &DmvRegistry) -> ChainReport {
        verify_blocks(self.blocks.iter().map(Ok), registry)
    }

    pub fn find_accident(&self, accident_id: &AccidentId) -> Option<&Block> {
        self.blocks.iter().find(|b| b.accident_id == *accident_id)
    }

    pub fn to_file_bytes(&self) -> Vec<u8> {
        file::encode_ledger_file(&self.blocks)
    }

    pub fn unconfirmed_file_bytes(&self) -> Vec<u8> {
        file::encode_unconfirmed_file(&self.unconfirmed)
    }

    /// Strict parse: any framing or decode error fails the whole file.
    pub fn from_file_bytes(bytes: &[u8]) -> Result<Self, FramingError> {
        let scan = scan_ledger_file(bytes);
        if let Some((_, err)) = scan.framing {
            return Err(err);
        }
        let blocks = scan
            .records
            .into_iter()
            .enumerate()
            .map(|(i, r)| {
                r.map_err(|e| FramingError::Record {
                    index: i,
                    reason: e.to_string(),
                })
            })
            .collect::<Result<_, _>>()?;
        Ok(Self::from_blocks(blocks))
    }
}

/// Walks a sequence of decoded (or undecodable) records. Linkage is checked
/// against the *recomputed* hash of the predecessor, and every block after
/// the first fault is at best [`ChainFault::Unanchored`].
pub(crate) fn verify_blocks<'a, I>(records: I, registry: &DmvRegistry) -> ChainReport
where
    I: IntoIterator<Item = Result<&'a Block, &'a DecodeError>>,
{
    let mut faults = BTreeMap::new();
    let mut prev = Digest256::ZERO;
    let mut count = 0usize;
    for (i, rec) in records.into_iter().enumerate() {
        let height = i as u64;
        count += 1;
        match rec {
            Err(e) => {
                faults.insert(height, ChainFault::Undecodable(e.to_string()));
                prev = Digest256::ZERO;
            }
            Ok(block) => {
                if let Err(e) = check_block(block, height, &prev, registry) {
                    faults.insert(height, e.into());
                } else if !faults.is_empty() {
                    faults.insert(height, ChainFault::Unanchored);
                }
                prev = block.recompute_hash();
            }
        }
    }
    ChainReport::from_faults(count, faults)
}
