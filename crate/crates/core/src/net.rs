//! Planar world: base stations, Voronoi cell assignment and the DSRC disk.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::codec::{Canonical, DecodeError, Decoder, Encoder};
use crate::registry::VehicleId;

pub const DEFAULT_DSRC_RANGE_M: f64 = 300.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CellId(pub u32);

impl fmt::Display for CellId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Meters in the plane.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Position {
    pub x: f64,
    pub y: f64,
}

impl Position {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Position) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl Canonical for Position {
    fn encode(&self, enc: &mut Encoder) {
        enc.f64(self.x).f64(self.y);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(Self {
            x: dec.f64()?,
            y: dec.f64()?,
        })
    }
}

/// Meters per second.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Velocity {
    pub vx: f64,
    pub vy: f64,
}

impl Velocity {
    pub fn speed(&self) -> f64 {
        self.vx.hypot(self.vy)
    }

    /// Compass heading in degrees, clockwise from +y, in `[0, 360)`.
    pub fn heading_deg(&self) -> f64 {
        if self.vx == 0.0 && self.vy == 0.0 {
            return 0.0;
        }
        let h = self.vx.atan2(self.vy).to_degrees().rem_euclid(360.0);
        if h >= 360.0 {
            0.0
        } else {
            h
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaseStation {
    pub id: CellId,
    pub position: Position,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub position: Position,
    #[serde(default)]
    pub velocity: Velocity,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NetError {
    #[error("no base stations")]
    NoBaseStations,
    #[error("unknown vehicle {0}")]
    UnknownVehicle(VehicleId),
    #[error("duplicate cell id {0}")]
    DuplicateCell(CellId),
    #[error("dsrc range must be positive, got {0}")]
    BadRange(f64),
    #[error("non-finite coordinate for {0}")]
    NonFinite(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub vehicles: BTreeMap<VehicleId, VehicleState>,
    pub base_stations: Vec<BaseStation>,
    pub dsrc_range: f64,
}

impl WorldState {
    pub fn validate(&self) -> Result<(), NetError> {
        if self.base_stations.is_empty() {
            return Err(NetError::NoBaseStations);
        }
        if !(self.dsrc_range > 0.0 && self.dsrc_range.is_finite()) {
            return Err(NetError::BadRange(self.dsrc_range));
        }
        let mut seen = BTreeSet::new();
        for bs in &self.base_stations {
            if !seen.insert(bs.id) {
                return Err(NetError::DuplicateCell(bs.id));
            }
            if !bs.position.is_finite() {
                return Err(NetError::NonFinite(format!("base station {}", bs.id)));
            }
        }
        for (id, v) in &self.vehicles {
            if !v.position.is_finite() || !v.velocity.vx.is_finite() || !v.velocity.vy.is_finite() {
                return Err(NetError::NonFinite(format!("vehicle {id}")));
            }
        }
        Ok(())
    }

    pub fn position(&self, id: VehicleId) -> Result<Position, NetError> {
        self.vehicles
            .get(&id)
            .map(|v| v.position)
            .ok_or(NetError::UnknownVehicle(id))
    }

    pub fn cell_of(&self, id: VehicleId) -> Result<CellId, NetError> {
        assign_cell(&self.position(id)?, &self.base_stations)
    }

    /// Cell assignment for every vehicle.
    pub fn cells(&self) -> Result<BTreeMap<VehicleId, CellId>, NetError> {
        self.vehicles
            .iter()
            .map(|(id, v)| Ok((*id, assign_cell(&v.position, &self.base_stations)?)))
            .collect()
    }
}

/// Nearest base station by Euclidean distance; ties go to the smaller id.
pub fn assign_cell(p: &Position, stations: &[BaseStation]) -> Result<CellId, NetError> {
    stations
        .iter()
        .map(|bs| (bs.position.distance(p), bs.id))
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .map(|(_, id)| id)
        .ok_or(NetError::NoBaseStations)
}

/// Every vehicle sharing a cell with at least one accident vehicle,
/// accident vehicles included.
pub fn vehicular_network(
    accident_ids: &BTreeSet<VehicleId>,
    world: &WorldState,
) -> Result<BTreeSet<VehicleId>, NetError> {
    let cells = world.cells()?;
    vehicular_network_in(accident_ids, &cells)
}

/// Same as [`vehicular_network`] over a precomputed cell map.
pub fn vehicular_network_in(
    accident_ids: &BTreeSet<VehicleId>,
    cells: &BTreeMap<VehicleId, CellId>,
) -> Result<BTreeSet<VehicleId>, NetError> {
    let accident_cells = accident_ids
        .iter()
        .map(|id| cells.get(id).copied().ok_or(NetError::UnknownVehicle(*id)))
        .collect::<Result<BTreeSet<_>, _>>()?;
    Ok(cells
        .iter()
        .filter(|(_, c)| accident_cells.contains(c))
        .map(|(id, _)| *id)
        .collect())
}

/// Vehicles within `world.dsrc_range` of `from`, boundary inclusive.
pub fn dsrc_reachable(from: &Position, world: &WorldState) -> BTreeSet<VehicleId> {
    world
        .vehicles
        .iter()
        .filter(|(_, v)| v.position.distance(from) <= world.dsrc_range)
        .map(|(id, _)| *id)
        .collect()
}

/// Centroid of the given positions.
pub fn centroid(points: impl IntoIterator<Item = Position>) -> Option<Position> {
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
    for p in points {
        sx += p.x;
        sy += p.y;
        n += 1;
    }
    (n > 0).then(|| Position::new(sx / n as f64, sy / n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bs(id: u32, x: f64, y: f64) -> BaseStation {
        BaseStation {
            id: CellId(id),
            position: Position::new(x, y),
        }
    }

    fn world(vehicles: &[(u32, f64, f64)], stations: Vec<BaseStation>, range: f64) -> WorldState {
        WorldState {
            vehicles: vehicles
                .iter()
                .map(|&(id, x, y)| {
                    (
                        VehicleId(id),
                        VehicleState {
                            position: Position::new(x, y),
                            velocity: Velocity::default(),
                        },
                    )
                })
                .collect(),
            base_stations: stations,
            dsrc_range: range,
        }
    }

    #[test]
    fn single_station_owns_everything() {
        let stations = [bs(4, 0.0, 0.0)];
        for p in [Position::new(1e6, -3.0), Position::new(0.0, 0.0)] {
            assert_eq!(assign_cell(&p, &stations).unwrap(), CellId(4));
        }
    }

    #[test]
    fn equidistant_tie_goes_to_smaller_id() {
        let stations = [bs(7, 10.0, 0.0), bs(2, -10.0, 0.0)];
        assert_eq!(assign_cell(&Position::new(0.0, 5.0), &stations).unwrap(), CellId(2));
    }

    #[test]
    fn no_stations_is_an_error() {
        assert_eq!(assign_cell(&Position::default(), &[]), Err(NetError::NoBaseStations));
    }

    #[test]
    fn nearest_station_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let stations: Vec<_> = (0..5)
            .map(|i| bs(i, rng.gen_range(-1000.0..1000.0), rng.gen_range(-1000.0..1000.0)))
            .collect();
        for _ in 0..100 {
            let p = Position::new(rng.gen_range(-1500.0..1500.0), rng.gen_range(-1500.0..1500.0));
            let mut best = (f64::INFINITY, u32::MAX);
            for s in &stations {
                let d = ((s.position.x - p.x).powi(2) + (s.position.y - p.y).powi(2)).sqrt();
                if d < best.0 || (d == best.0 && s.id.0 < best.1) {
                    best = (d, s.id.0);
                }
            }
            assert_eq!(assign_cell(&p, &stations).unwrap(), CellId(best.1));
        }
    }

    #[test]
    fn network_is_union_of_accident_cells() {
        let w = world(
            &[
                (1, -100.0, 0.0),
                (2, 100.0, 0.0),
                (3, -90.0, 5.0),
                (4, 95.0, 0.0),
                (5, 0.0, 500.0),
            ],
            vec![bs(1, -100.0, 0.0), bs(2, 100.0, 0.0), bs(3, 0.0, 500.0)],
            300.0,
        );
        let acc: BTreeSet<_> = [VehicleId(1), VehicleId(2)].into();
        let net = vehicular_network(&acc, &w).unwrap();
        let cells = w.cells().unwrap();
        let expected: BTreeSet<_> = w
            .vehicles
            .keys()
            .filter(|v| acc.iter().any(|a| cells[a] == cells[v]))
            .copied()
            .collect();
        assert_eq!(net, expected);
        assert_eq!(net, [1, 2, 3, 4].map(VehicleId).into());
    }

    #[test]
    fn lone_accident_vehicle_is_singleton() {
        let w = world(
            &[(1, 0.0, 0.0), (2, 1000.0, 0.0)],
            vec![bs(1, 0.0, 0.0), bs(2, 1000.0, 0.0)],
            300.0,
        );
        let acc: BTreeSet<_> = [VehicleId(1)].into();
        assert_eq!(vehicular_network(&acc, &w).unwrap(), acc);
    }

    #[test]
    fn unknown_accident_vehicle() {
        let w = world(&[(1, 0.0, 0.0)], vec![bs(1, 0.0, 0.0)], 300.0);
        let acc: BTreeSet<_> = [VehicleId(9)].into();
        assert_eq!(vehicular_network(&acc, &w), Err(NetError::UnknownVehicle(VehicleId(9))));
    }

    #[test]
    fn dsrc_boundary_is_inclusive() {
        let w = world(&[(1, 300.0, 0.0), (2, 301.0, 0.0)], vec![bs(1, 0.0, 0.0)], 300.0);
        assert_eq!(dsrc_reachable(&Position::default(), &w), [VehicleId(1)].into());
    }

    #[test]
    fn fig2_layout() {
        // A, B at the scene; C, D, E nearby; community further out.
        let w = world(
            &[
                (1, 0.0, 0.0),
                (2, 6.0, 0.0),
                (3, 120.0, 60.0),
                (4, -150.0, 90.0),
                (5, 40.0, -220.0),
                (8, 900.0, 100.0),
                (9, -700.0, -400.0),
                (10, 500.0, 900.0),
            ],
            vec![bs(1, 0.0, 0.0)],
            300.0,
        );
        let scene = centroid([Position::new(0.0, 0.0), Position::new(6.0, 0.0)]).unwrap();
        assert_eq!(dsrc_reachable(&scene, &w), [1, 2, 3, 4, 5].map(VehicleId).into());
    }

    #[test]
    fn heading_convention() {
        assert_eq!(Velocity { vx: 0.0, vy: 1.0 }.heading_deg(), 0.0);
        assert!((Velocity { vx: 1.0, vy: 0.0 }.heading_deg() - 90.0).abs() < 1e-12);
        assert!((Velocity { vx: -1.0, vy: 0.0 }.heading_deg() - 270.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn dsrc_monotone_in_range(
            pts in prop::collection::vec((-1000.0f64..1000.0, -1000.0f64..1000.0), 1..40),
            r1 in 1.0f64..800.0,
            extra in 0.0f64..500.0,
        ) {
            let vs: Vec<_> = pts.iter().enumerate().map(|(i, &(x, y))| (i as u32, x, y)).collect();
            let small = world(&vs, vec![bs(1, 0.0, 0.0)], r1);
            let large = world(&vs, vec![bs(1, 0.0, 0.0)], r1 + extra);
            let a = dsrc_reachable(&Position::default(), &small);
            let b = dsrc_reachable(&Position::default(), &large);
            prop_assert!(a.is_subset(&b));
        }

        #[test]
        fn cells_partition_vehicles(
            pts in prop::collection::vec((-1000.0f64..1000.0, -1000.0f64..1000.0), 1..40),
            stations in prop::collection::vec((-1000.0f64..1000.0, -1000.0f64..1000.0), 1..6),
            pick in 0usize..40,
        ) {
            let vs: Vec<_> = pts.iter().enumerate().map(|(i, &(x, y))| (i as u32, x, y)).collect();
            let st = stations.iter().enumerate().map(|(i, &(x, y))| bs(i as u32, x, y)).collect();
            let w = world(&vs, st, 300.0);
            let cells = w.cells().unwrap();
            prop_assert_eq!(cells.len(), w.vehicles.len());
            let acc: BTreeSet<_> = [VehicleId((pick % vs.len()) as u32)].into();
            let net = vehicular_network(&acc, &w).unwrap();
            prop_assert!(acc.is_subset(&net));
            for (id, c) in &cells {
                let same = acc.iter().any(|a| cells[a] == *c);
                prop_assert_eq!(net.contains(id), same);
            }
        }
    }
}
