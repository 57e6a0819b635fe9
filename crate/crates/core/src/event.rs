//! EDR histories and signed, digested accident event records.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::codec::{Canonical, DecodeError, Decoder, Encoder};
use crate::crypto::{digest, sign, verify, Digest256, KeyPair, Signature};
use crate::net::{CellId, Position};
use crate::registry::{DmvRegistry, VehicleId};

pub const DEFAULT_EDR_CAPACITY: usize = 600;
pub const DEFAULT_EDR_PERIOD_MS: u64 = 100;
pub const DEFAULT_WINDOW_HALF_WIDTH_MS: u64 = 5000;

/// 16-byte content-derived accident name.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AccidentId(pub [u8; 16]);

impl AccidentId {
    /// Truncated digest of `(cell of first accident vehicle, time, sorted ids)`.
    pub fn derive(first_cell: CellId, time_ms: u64, vehicles: &BTreeSet<VehicleId>) -> Self {
        let mut enc = Encoder::new();
        enc.u32(first_cell.0).u64(time_ms);
        enc.list(&vehicles.iter().copied().collect::<Vec<_>>());
        let d = digest(&enc.finish());
        let mut out = [0u8; 16];
        out.copy_from_slice(&d.0[..16]);
        Self(out)
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, hex::FromHexError> {
        let mut out = [0u8; 16];
        hex::decode_to_slice(s, &mut out)?;
        Ok(Self(out))
    }
}

impl fmt::Display for AccidentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for AccidentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "AccidentId({})", self.to_hex())
    }
}

impl Serialize for AccidentId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for AccidentId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        Self::from_hex(&String::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

impl Canonical for AccidentId {
    fn encode(&self, enc: &mut Encoder) {
        enc.raw(&self.0);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(Self(dec.array()?))
    }
}

/// A witness's estimate of another vehicle's speed, recorded alongside its
/// own sensor sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub subject: VehicleId,
    pub estimated_speed: f64,
}

impl Canonical for Observation {
    fn encode(&self, enc: &mut Encoder) {
        enc.value(&self.subject).f64(self.estimated_speed);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(Self {
            subject: dec.value()?,
            estimated_speed: dec.f64()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdrSample {
    /// Milliseconds since scenario start.
    pub t: u64,
    pub position: Position,
    /// m/s
    pub speed: f64,
    /// Degrees in `[0, 360)`.
    pub heading: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub observations: Vec<Observation>,
}

impl EdrSample {
    pub fn is_valid(&self) -> bool {
        self.speed >= 0.0 && (0.0..360.0).contains(&self.heading) && self.position.is_finite()
    }

    pub fn observation_of(&self, subject: VehicleId) -> Option<f64> {
        self.observations
            .iter()
            .find(|o| o.subject == subject)
            .map(|o| o.estimated_speed)
    }
}

impl Canonical for EdrSample {
    fn encode(&self, enc: &mut Encoder) {
        enc.u64(self.t)
            .value(&self.position)
            .f64(self.speed)
            .f64(self.heading)
            .list(&self.observations);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(Self {
            t: dec.u64()?,
            position: dec.value()?,
            speed: dec.f64()?,
            heading: dec.f64()?,
            observations: dec.list()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EventError {
    #[error("sample at t={t} does not follow t={last}")]
    NonMonotonic { t: u64, last: u64 },
    #[error("sample at t={0} has out-of-range speed or heading")]
    BadSample(u64),
    #[error("vehicle {0} is not registered with the DMV")]
    UnregisteredVehicle(VehicleId),
    #[error("EDR capacity must be positive")]
    ZeroCapacity,
}

/// Bounded, strictly time-ordered sample history. Oldest samples are evicted
/// once capacity is reached.
#[derive(Debug, Clone, PartialEq)]
pub struct EdrLog {
    capacity: usize,
    samples: VecDeque<EdrSample>,
}

impl EdrLog {
    pub fn new(capacity: usize) -> Result<Self, EventError> {
        if capacity == 0 {
            return Err(EventError::ZeroCapacity);
        }
        Ok(Self {
            capacity,
            samples: VecDeque::with_capacity(capacity),
        })
    }

    pub fn record(&mut self, sample: EdrSample) -> Result<(), EventError> {
        if !sample.is_valid() {
            return Err(EventError::BadSample(sample.t));
        }
        if let Some(last) = self.samples.back() {
            if sample.t <= last.t {
                return Err(EventError::NonMonotonic {
                    t: sample.t,
                    last: last.t,
                });
            }
        }
        if self.samples.len() == self.capacity {
            self.samples.pop_front();
        }
        self.samples.push_back(sample);
        Ok(())
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> impl Iterator<Item = &EdrSample> {
        self.samples.iter()
    }
}

/// Samples with `|t - t_center| <= half_width`, in log order.
pub fn edr_window(log: &EdrLog, t_center: u64, half_width: u64) -> Vec<EdrSample> {
    log.samples()
        .filter(|s| s.t.abs_diff(t_center) <= half_width)
        .cloned()
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EventRole {
    Accident,
    Witness,
}

impl Canonical for EventRole {
    fn encode(&self, enc: &mut Encoder) {
        enc.u8(match self {
            EventRole::Accident => 0,
            EventRole::Witness => 1,
        });
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let offset = dec.position();
        match dec.u8()? {
            0 => Ok(EventRole::Accident),
            1 => Ok(EventRole::Witness),
            tag => Err(DecodeError::BadTag {
                what: "event role",
                tag,
                offset,
            }),
        }
    }
}

/// One participant's account of an accident.
///
/// `digest` covers `(accident_id, reporter, role, location, timestamp,
/// edr_window)` in that order; `signature` is the reporter's signature over
/// `digest`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventData {
    pub accident_id: AccidentId,
    pub reporter: VehicleId,
    pub role: EventRole,
    pub location: Position,
    pub timestamp: u64,
    pub edr_window: Vec<EdrSample>,
    pub digest: Digest256,
    pub signature: Signature,
}

impl EventData {
    pub fn preimage(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        self.encode_preimage(&mut enc);
        enc.finish()
    }

    fn encode_preimage(&self, enc: &mut Encoder) {
        enc.value(&self.accident_id)
            .value(&self.reporter)
            .value(&self.role)
            .value(&self.location)
            .u64(self.timestamp)
            .list(&self.edr_window);
    }

    pub fn recompute_digest(&self) -> Digest256 {
        digest(&self.preimage())
    }

    pub fn digest_matches(&self) -> bool {
        self.recompute_digest() == self.digest
    }

    /// Signature check against the reporter's registered key; `false` when
    /// the reporter is unknown.
    pub fn signature_valid(&self, registry: &DmvRegistry) -> bool {
        registry
            .public_key(self.reporter)
            .is_ok_and(|pk| verify(&pk, &self.digest, &self.signature))
    }

    /// Sample nearest to `t` (earlier sample wins ties).
    pub fn sample_nearest(&self, t: u64) -> Option<&EdrSample> {
        self.edr_window.iter().min_by_key(|s| (s.t.abs_diff(t), s.t))
    }
}

impl Canonical for EventData {
    fn encode(&self, enc: &mut Encoder) {
        self.encode_preimage(enc);
        enc.value(&self.digest).value(&self.signature);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(Self {
            accident_id: dec.value()?,
            reporter: dec.value()?,
            role: dec.value()?,
            location: dec.value()?,
            timestamp: dec.u64()?,
            edr_window: dec.list()?,
            digest: dec.value()?,
            signature: dec.value()?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowParams {
    pub t_center: u64,
    pub half_width: u64,
}

/// Everything a vehicle contributes to its own event record.
#[derive(Debug, Clone, Copy)]
pub struct Reporter<'a> {
    pub id: VehicleId,
    pub keys: &'a KeyPair,
    pub position: Position,
    pub edr: &'a EdrLog,
}

pub fn make_event_data(
    vehicle: Reporter<'_>,
    role: EventRole,
    accident_id: AccidentId,
    now: u64,
    window: WindowParams,
    registry: &DmvRegistry,
) -> Result<EventData, EventError> {
    if !registry.contains(vehicle.id) {
        return Err(EventError::UnregisteredVehicle(vehicle.id));
    }
    let mut event = EventData {
        accident_id,
        reporter: vehicle.id,
        role,
        location: vehicle.position,
        timestamp: now,
        edr_window: edr_window(vehicle.edr, window.t_center, window.half_width),
        digest: Digest256::ZERO,
        signature: Signature([0; 64]),
    };
    event.digest = event.recompute_digest();
    event.signature = sign(vehicle.keys, &event.digest);
    Ok(event)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::keygen;
    use crate::registry::{RegistryEntry, ReputationScore};
    use proptest::prelude::*;

    fn sample(t: u64, speed: f64) -> EdrSample {
        EdrSample {
            t,
            position: Position::new(t as f64 / 100.0, 0.0),
            speed,
            heading: 90.0,
            observations: vec![],
        }
    }

    fn log_of(n: u64, spacing: u64) -> EdrLog {
        let mut log = EdrLog::new(n as usize).unwrap();
        for i in 0..n {
            log.record(sample(i * spacing, 10.0)).unwrap();
        }
        log
    }

    fn setup() -> (DmvRegistry, KeyPair, EdrLog) {
        let kp = keygen(&[7; 32]);
        let mut reg = DmvRegistry::default();
        reg.register(
            VehicleId(3),
            RegistryEntry {
                plate: "C".into(),
                vin: "VIN-C".into(),
                public_key: kp.public(),
                reputation: ReputationScore::from_points(60.0).unwrap(),
            },
        )
        .unwrap();
        let mut log = log_of(100, 100);
        log.samples.back_mut().unwrap().observations.push(Observation {
            subject: VehicleId(2),
            estimated_speed: 13.4,
        });
        (reg, kp, log)
    }

    fn make(reg: &DmvRegistry, kp: &KeyPair, log: &EdrLog) -> EventData {
        make_event_data(
            Reporter {
                id: VehicleId(3),
                keys: kp,
                position: Position::new(120.0, 60.0),
                edr: log,
            },
            EventRole::Witness,
            AccidentId([9; 16]),
            9_910,
            WindowParams {
                t_center: 9_900,
                half_width: 5_000,
            },
            reg,
        )
        .unwrap()
    }

    #[test]
    fn window_exact_center_only() {
        let mut log = EdrLog::new(4).unwrap();
        log.record(sample(100, 1.0)).unwrap();
        log.record(sample(200, 1.0)).unwrap();
        assert_eq!(edr_window(&log, 200, 0), vec![sample(200, 1.0)]);
    }

    #[test]
    fn window_of_empty_log() {
        assert!(edr_window(&EdrLog::new(1).unwrap(), 5, 100).is_empty());
    }

    #[test]
    fn window_matches_brute_force() {
        let log = log_of(100, 100);
        let expected: Vec<u64> = (0..100u64)
            .map(|i| i * 100)
            .filter(|t| (*t as i64 - 5000).abs() <= 250)
            .collect();
        assert_eq!(expected, vec![4800, 4900, 5000, 5100, 5200]);
        let got: Vec<u64> = edr_window(&log, 5000, 250).iter().map(|s| s.t).collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn ring_buffer_evicts_oldest() {
        let mut log = EdrLog::new(3).unwrap();
        for t in 1..=5 {
            log.record(sample(t, 1.0)).unwrap();
        }
        assert_eq!(log.samples().map(|s| s.t).collect::<Vec<_>>(), vec![3, 4, 5]);
    }

    #[test]
    fn rejects_out_of_order_and_bad_samples() {
        let mut log = EdrLog::new(3).unwrap();
        log.record(sample(5, 1.0)).unwrap();
        assert!(matches!(
            log.record(sample(5, 1.0)),
            Err(EventError::NonMonotonic { .. })
        ));
        assert!(matches!(log.record(sample(6, -1.0)), Err(EventError::BadSample(6))));
        let mut s = sample(7, 1.0);
        s.heading = 360.0;
        assert!(log.record(s).is_err());
    }

    #[test]
    fn event_is_self_consistent_and_deterministic() {
        let (reg, kp, log) = setup();
        let e = make(&reg, &kp, &log);
        assert!(e.digest_matches());
        assert!(e.signature_valid(&reg));
        assert_eq!(e.timestamp, 9_910);
        assert_eq!(e.location, Position::new(120.0, 60.0));
        assert_eq!(e.edr_window.len(), 51);
        assert_eq!(e.to_canonical_bytes(), make(&reg, &kp, &log).to_canonical_bytes());
    }

    #[test]
    fn tampered_speed_breaks_digest() {
        let (reg, kp, log) = setup();
        let mut e = make(&reg, &kp, &log);
        e.edr_window[10].speed += 3.0;
        assert!(!e.digest_matches());
    }

    #[test]
    fn unregistered_reporter() {
        let (_, kp, log) = setup();
        let err = make_event_data(
            Reporter {
                id: VehicleId(3),
                keys: &kp,
                position: Position::default(),
                edr: &log,
            },
            EventRole::Accident,
            AccidentId([0; 16]),
            0,
            WindowParams {
                t_center: 0,
                half_width: 0,
            },
            &DmvRegistry::default(),
        );
        assert_eq!(err, Err(EventError::UnregisteredVehicle(VehicleId(3))));
    }

    #[test]
    fn accident_id_is_content_derived() {
        let ids: BTreeSet<_> = [VehicleId(2), VehicleId(1)].into();
        let a = AccidentId::derive(CellId(1), 60_000, &ids);
        assert_eq!(a, AccidentId::derive(CellId(1), 60_000, &ids));
        assert_ne!(a, AccidentId::derive(CellId(1), 60_001, &ids));
        assert_ne!(a, AccidentId::derive(CellId(2), 60_000, &ids));
    }

    // Each field mutation must break the digest or the signature.
    proptest! {
        #[test]
        fn any_single_field_mutation_is_detected(field in 0usize..9, delta in 1u32..1000) {
            let (reg, kp, log) = setup();
            let mut e = make(&reg, &kp, &log);
            let d = delta as f64 * 0.01;
            match field {
                0 => e.accident_id.0[0] ^= 1,
                1 => e.reporter = VehicleId(e.reporter.0 + delta),
                2 => e.role = EventRole::Accident,
                3 => e.location.x += d,
                4 => e.timestamp += delta as u64,
                5 => e.edr_window[0].speed += d,
                6 => e.edr_window.pop().map(|_| ()).unwrap(),
                7 => e.digest.0[(delta % 32) as usize] ^= 1,
                _ => e.signature.0[(delta % 64) as usize] ^= 1,
            }
            prop_assert!(!(e.digest_matches() && e.signature_valid(&reg)));
        }

        #[test]
        fn canonical_round_trip(extra in 0u64..10_000) {
            let (reg, kp, log) = setup();
            let mut e = make(&reg, &kp, &log);
            e.timestamp += extra;
            let bytes = e.to_canonical_bytes();
            let back = EventData::from_canonical_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_canonical_bytes(), bytes);
        }
    }
}
