//! On-disk ledger framing.
//!
//! ```text
//! file    := magic version record*
//! magic   := "POEL" (blocks) | "POEU" (unconfirmed records)
//! version := 0x01
//! record  := u32-be length, canonical bytes
//! ```

use std::ops::Range;

use crate::codec::{Canonical, DecodeError};
use crate::registry::DmvRegistry;

use super::{verify_blocks, Block, ChainFault, ChainReport, UnconfirmedEventRecord};

pub const LEDGER_MAGIC: [u8; 4] = *b"POEL";
pub const UNCONFIRMED_MAGIC: [u8; 4] = *b"POEU";
pub const VERSION: u8 = 1;

const HEADER_LEN: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FramingError {
    #[error("bad magic bytes (expected {expected:?})")]
    BadMagic { expected: String },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u8),
    #[error("record {index}: truncated length prefix")]
    TruncatedLength { index: usize },
    #[error("record {index}: length {len} exceeds the {available} bytes left")]
    RecordOverrun { index: usize, len: usize, available: usize },
    #[error("record {index}: {reason}")]
    Record { index: usize, reason: String },
}

fn encode_framed<T: Canonical>(magic: [u8; 4], items: &[T]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(&magic);
    out.push(VERSION);
    for item in items {
        let bytes = item.to_canonical_bytes();
        out.extend_from_slice(&(bytes.len() as u32).to_be_bytes());
        out.extend_from_slice(&bytes);
    }
    out
}

pub(crate) fn encode_ledger_file(blocks: &[Block]) -> Vec<u8> {
    encode_framed(LEDGER_MAGIC, blocks)
}

pub fn encode_unconfirmed_file(records: &[UnconfirmedEventRecord]) -> Vec<u8> {
    encode_framed(UNCONFIRMED_MAGIC, records)
}

/// Result of reading a framed file as far as the framing allows.
#[derive(Debug, Clone)]
pub struct LedgerScan<T = Block> {
    pub records: Vec<Result<T, DecodeError>>,
    /// Byte range of each record payload, parallel to `records`.
    pub spans: Vec<Range<usize>>,
    /// First framing failure and the record index it occurred at. Nothing
    /// after it is read.
    pub framing: Option<(usize, FramingError)>,
}

fn scan_framed<T: Canonical>(magic: [u8; 4], bytes: &[u8]) -> LedgerScan<T> {
    let mut scan = LedgerScan {
        records: Vec::new(),
        spans: Vec::new(),
        framing: None,
    };
    if bytes.len() < 4 || bytes[..4] != magic {
        scan.framing = Some((
            0,
            FramingError::BadMagic {
                expected: String::from_utf8_lossy(&magic).into_owned(),
            },
        ));
        return scan;
    }
    match bytes.get(4) {
        Some(&VERSION) => {}
        Some(&v) => {
            scan.framing = Some((0, FramingError::UnsupportedVersion(v)));
            return scan;
        }
        None => {
            scan.framing = Some((0, FramingError::TruncatedLength { index: 0 }));
            return scan;
        }
    }
    let mut pos = HEADER_LEN;
    while pos < bytes.len() {
        let index = scan.records.len();
        let Some(prefix) = bytes.get(pos..pos + 4) else {
            scan.framing = Some((index, FramingError::TruncatedLength { index }));
            break;
        };
        let len = u32::from_be_bytes(prefix.try_into().unwrap()) as usize;
        pos += 4;
        let available = bytes.len() - pos;
        if len > available {
            scan.framing = Some((index, FramingError::RecordOverrun { index, len, available }));
            break;
        }
        let span = pos..pos + len;
        scan.records.push(T::from_canonical_bytes(&bytes[span.clone()]));
        scan.spans.push(span);
        pos += len;
    }
    scan
}

pub fn scan_ledger_file(bytes: &[u8]) -> LedgerScan<Block> {
    scan_framed(LEDGER_MAGIC, bytes)
}

pub fn decode_unconfirmed_file(bytes: &[u8]) -> Result<Vec<UnconfirmedEventRecord>, FramingError> {
    let scan = scan_framed::<UnconfirmedEventRecord>(UNCONFIRMED_MAGIC, bytes);
    if let Some((_, e)) = scan.framing {
        return Err(e);
    }
    scan.records
        .into_iter()
        .enumerate()
        .map(|(index, r)| {
            r.map_err(|e| FramingError::Record {
                index,
                reason: e.to_string(),
            })
        })
        .collect()
}

/// Chain verification straight from file bytes. Header damage is reported
/// at height 0; a broken frame at record `i` is reported at height `i`.
pub fn verify_ledger_bytes(bytes: &[u8], registry: &DmvRegistry) -> ChainReport {
    let scan = scan_ledger_file(bytes);
    let mut report = verify_blocks(scan.records.iter().map(|r| r.as_ref()), registry);
    if let Some((index, err)) = scan.framing {
        report.faults.insert(index as u64, ChainFault::Framing(err.to_string()));
        report.blocks = report.blocks.max(index + 1);
        report.valid = false;
        report.first_bad_height = report.faults.keys().next().copied();
    }
    report
}
