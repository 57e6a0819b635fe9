//! Cross-examination of accident and witness speed reports.

use serde::{Deserialize, Serialize};

use crate::event::{AccidentId, EventData, EventRole};
use crate::registry::VehicleId;

use super::Ledger;

pub const DEFAULT_SPEED_TOLERANCE: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ForensicError {
    #[error("accident {0} is not recorded in any block")]
    NotFound(AccidentId),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WitnessEstimate {
    pub witness: VehicleId,
    pub speed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectComparison {
    pub subject: VehicleId,
    /// The subject's own EDR speed at the accident time, if it has samples.
    pub self_reported: Option<f64>,
    pub witness_estimates: Vec<WitnessEstimate>,
    pub median_estimate: Option<f64>,
    /// `|self_reported - median_estimate|`
    pub deviation: Option<f64>,
    /// Range of the witness estimates.
    pub spread: Option<f64>,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscrepancyReport {
    pub accident_id: AccidentId,
    pub tolerance: f64,
    pub comparisons: Vec<SubjectComparison>,
}

impl DiscrepancyReport {
    pub fn flagged(&self) -> impl Iterator<Item = &SubjectComparison> {
        self.comparisons.iter().filter(|c| c.flagged)
    }
}

fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len().is_multiple_of(2) {
        (v[mid - 1] + v[mid]) / 2.0
    } else {
        v[mid]
    })
}

/// Observation of `subject` closest in time to `t` within a witness record.
fn witness_estimate(witness: &EventData, subject: VehicleId, t: u64) -> Option<f64> {
    witness
        .edr_window
        .iter()
        .filter_map(|s| s.observation_of(subject).map(|v| (s.t.abs_diff(t), s.t, v)))
        .min_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)))
        .map(|(_, _, v)| v)
}

pub fn compare_subject(subject: &EventData, witnesses: &[&EventData], tolerance: f64) -> SubjectComparison {
    let t = subject.timestamp;
    let self_reported = subject.sample_nearest(t).map(|s| s.speed);
    let witness_estimates: Vec<_> = witnesses
        .iter()
        .filter_map(|w| {
            witness_estimate(w, subject.reporter, t).map(|speed| WitnessEstimate {
                witness: w.reporter,
                speed,
            })
        })
        .collect();
    let speeds: Vec<f64> = witness_estimates.iter().map(|e| e.speed).collect();
    let median_estimate = median(&speeds);
    let spread = (!speeds.is_empty()).then(|| {
        let max = speeds.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = speeds.iter().copied().fold(f64::INFINITY, f64::min);
        max - min
    });
    let deviation = self_reported.zip(median_estimate).map(|(s, m)| (s - m).abs());
    SubjectComparison {
        subject: subject.reporter,
        self_reported,
        witness_estimates,
        median_estimate,
        deviation,
        spread,
        flagged: deviation.is_some_and(|d| d > tolerance),
    }
}

/// Compares each accident vehicle's self-reported speed with the witnesses'
/// estimates of it, flagging deviations beyond `tolerance` (m/s).
pub fn forensic_review(
    ledger: &Ledger,
    accident_id: &AccidentId,
    tolerance: f64,
) -> Result<DiscrepancyReport, ForensicError> {
    let block = ledger
        .find_accident(accident_id)
        .ok_or(ForensicError::NotFound(*accident_id))?;
    let witnesses: Vec<&EventData> = block.events.iter().filter(|e| e.role == EventRole::Witness).collect();
    let comparisons = block
        .events
        .iter()
        .filter(|e| e.role == EventRole::Accident)
        .map(|e| compare_subject(e, &witnesses, tolerance))
        .collect();
    Ok(DiscrepancyReport {
        accident_id: *accident_id,
        tolerance,
        comparisons,
    })
}
