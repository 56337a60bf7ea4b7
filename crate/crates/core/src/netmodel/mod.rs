//! Road-network model: intersections, roads, movement lanes and the fixed
//! four-phase signal program.
//!
//! The model is deliberately coarser than a microscopic road description.
//! Every road that feeds a signalized intersection carries one lane per
//! turning movement (through / left / right); physical multi-lane roads are
//! collapsed onto these movement lanes when a file is loaded. Roads that
//! leave the network end in a single uncontrolled exit lane.
//!
//! Through and left lanes are signal-controlled. Right-turn lanes are never
//! signal-controlled: right turns are always allowed.

pub mod cityflow;
pub mod flow;
pub mod grid;

pub use flow::{synth_flow, FlowEntry, FlowSpec, SpawnEvent, SynthFlowCfg};
pub use grid::synth_grid;

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("topology error: {0}")]
    Topology(String),
    #[error("route error: {0}")]
    Route(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Compass direction, used both for the side of an intersection a lane
/// arrives at (its approach) and for travel headings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Compass {
    North,
    South,
    East,
    West,
}

impl Compass {
    pub const ALL: [Compass; 4] = [Compass::North, Compass::South, Compass::East, Compass::West];

    /// Side of the intersection a road arrives at, given its travel heading.
    /// A road heading west enters through the eastern side.
    pub fn approach_of_heading(heading: Compass) -> Compass {
        heading.opposite()
    }

    pub fn opposite(self) -> Compass {
        match self {
            Compass::North => Compass::South,
            Compass::South => Compass::North,
            Compass::East => Compass::West,
            Compass::West => Compass::East,
        }
    }

    /// Heading after performing `movement` while traveling toward `self`
    /// (right-hand traffic: heading north, a left turn ends up heading west).
    pub fn turn(self, movement: Movement) -> Compass {
        match movement {
            Movement::Through => self,
            Movement::Left => match self {
                Compass::North => Compass::West,
                Compass::West => Compass::South,
                Compass::South => Compass::East,
                Compass::East => Compass::North,
            },
            Movement::Right => match self {
                Compass::North => Compass::East,
                Compass::East => Compass::South,
                Compass::South => Compass::West,
                Compass::West => Compass::North,
            },
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Compass::North => "North",
            Compass::South => "South",
            Compass::East => "East",
            Compass::West => "West",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Movement {
    Through,
    Left,
    Right,
}

impl Movement {
    pub const ALL: [Movement; 3] = [Movement::Through, Movement::Left, Movement::Right];

    fn lane_suffix(self) -> &'static str {
        match self {
            Movement::Through => "through",
            Movement::Left => "left",
            Movement::Right => "right",
        }
    }
}

/// The four signal phases. Declaration order is the canonical order: it is
/// the tie-break order used by every argmax in the crate and the cycling
/// order of the fixed-time controller.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum PhaseId {
    /// East through + west through.
    Etwt,
    /// East left + west left.
    Elwl,
    /// North through + south through.
    Ntst,
    /// North left + south left.
    Nlsl,
}

impl PhaseId {
    pub const ALL: [PhaseId; 4] = [PhaseId::Etwt, PhaseId::Elwl, PhaseId::Ntst, PhaseId::Nlsl];

    pub fn index(self) -> usize {
        match self {
            PhaseId::Etwt => 0,
            PhaseId::Elwl => 1,
            PhaseId::Ntst => 2,
            PhaseId::Nlsl => 3,
        }
    }

    pub fn from_index(i: usize) -> Option<PhaseId> {
        PhaseId::ALL.get(i).copied()
    }

    /// The two (approach, movement) pairs this phase releases.
    pub fn movements(self) -> [(Compass, Movement); 2] {
        match self {
            PhaseId::Etwt => [(Compass::East, Movement::Through), (Compass::West, Movement::Through)],
            PhaseId::Elwl => [(Compass::East, Movement::Left), (Compass::West, Movement::Left)],
            PhaseId::Ntst => [(Compass::North, Movement::Through), (Compass::South, Movement::Through)],
            PhaseId::Nlsl => [(Compass::North, Movement::Left), (Compass::South, Movement::Left)],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PhaseId::Etwt => "ETWT",
            PhaseId::Elwl => "ELWL",
            PhaseId::Ntst => "NTST",
            PhaseId::Nlsl => "NLSL",
        }
    }
}

impl std::fmt::Display for PhaseId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for PhaseId {
    type Err = NetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let up = s.trim().to_ascii_uppercase();
        PhaseId::ALL
            .into_iter()
            .find(|p| p.name() == up)
            .ok_or_else(|| NetError::Parse(format!("unknown phase id {s:?}")))
    }
}

/// One phase of a concrete intersection: the controlled lanes it releases.
#[derive(Debug, Clone, PartialEq)]
pub struct Phase {
    pub id: PhaseId,
    /// Lane indices into [`RoadNetwork::lanes`], approach order as in
    /// [`PhaseId::movements`].
    pub lanes: [usize; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn dist(self, other: Point) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Road {
    pub id: String,
    pub from: String,
    pub to: String,
    /// Polyline geometry, at least two points.
    pub points: Vec<Point>,
    /// Polyline length in meters.
    pub length: f64,
    /// Lane indices carried by this road.
    pub lanes: Vec<usize>,
}

impl Road {
    /// Travel heading of the final polyline segment, snapped to the dominant
    /// axis.
    pub fn end_heading(&self) -> Compass {
        let a = self.points[self.points.len() - 2];
        let b = self.points[self.points.len() - 1];
        let (dx, dy) = (b.x - a.x, b.y - a.y);
        if dx.abs() >= dy.abs() {
            if dx >= 0.0 {
                Compass::East
            } else {
                Compass::West
            }
        } else if dy >= 0.0 {
            Compass::North
        } else {
            Compass::South
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lane {
    pub id: String,
    /// Index of the road carrying this lane.
    pub road: usize,
    pub movement: Movement,
    /// Side of the downstream intersection this lane arrives at. `None` for
    /// exit lanes, which end at the network boundary.
    pub approach: Option<Compass>,
    pub length: f64,
    /// Number of equal-length observation segments.
    pub segment_count: usize,
    /// Road a crossing vehicle continues onto. `None` for exit lanes.
    pub downstream_road: Option<usize>,
    /// True for through/left lanes at a signalized intersection. Right-turn
    /// and exit lanes are uncontrolled.
    pub controlled: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Intersection {
    pub id: String,
    pub pos: Point,
    /// Incoming lane index per (approach, movement). Always holds all eight
    /// (approach, through/left) entries; right entries where the network has
    /// them.
    pub incoming: BTreeMap<(Compass, Movement), usize>,
}

impl Intersection {
    pub fn controlled_lanes(&self) -> impl Iterator<Item = usize> + '_ {
        self.incoming
            .iter()
            .filter(|((_, m), _)| *m != Movement::Right)
            .map(|(_, idx)| *idx)
    }
}

#[derive(Debug, Clone)]
pub struct RoadNetwork {
    pub intersections: Vec<Intersection>,
    pub roads: Vec<Road>,
    pub lanes: Vec<Lane>,
    /// Boundary (virtual) node positions by id.
    pub boundary_nodes: BTreeMap<String, Point>,
    road_index: HashMap<String, usize>,
    lane_index: HashMap<String, usize>,
    intersection_index: HashMap<String, usize>,
}

impl PartialEq for RoadNetwork {
    fn eq(&self, other: &Self) -> bool {
        // Index maps are derived from the rest.
        self.intersections == other.intersections
            && self.roads == other.roads
            && self.lanes == other.lanes
            && self.boundary_nodes == other.boundary_nodes
    }
}

impl RoadNetwork {
    pub fn road_idx(&self, id: &str) -> Option<usize> {
        self.road_index.get(id).copied()
    }

    pub fn lane_idx(&self, id: &str) -> Option<usize> {
        self.lane_index.get(id).copied()
    }

    pub fn intersection_idx(&self, id: &str) -> Option<usize> {
        self.intersection_index.get(id).copied()
    }

    /// The four phases of intersection `idx`, in canonical phase order.
    pub fn phase_table(&self, idx: usize) -> [Phase; 4] {
        let inter = &self.intersections[idx];
        PhaseId::ALL.map(|id| {
            let [a, b] = id.movements();
            Phase {
                id,
                lanes: [inter.incoming[&a], inter.incoming[&b]],
            }
        })
    }

    /// Signalized intersection controlling `lane`, if any.
    pub fn lane_intersection(&self, lane: usize) -> Option<usize> {
        let road = &self.roads[self.lanes[lane].road];
        if self.lanes[lane].approach.is_some() {
            self.intersection_idx(&road.to)
        } else {
            None
        }
    }

    /// True when the road with index `road` leaves the network.
    pub fn road_exits(&self, road: usize) -> bool {
        self.boundary_nodes.contains_key(&self.roads[road].to)
    }
}

/// Node description consumed by [`build_network`].
#[derive(Debug, Clone)]
pub struct NodeSpec {
    pub id: String,
    pub pos: Point,
    pub controlled: bool,
}

/// Road description consumed by [`build_network`].
#[derive(Debug, Clone)]
pub struct RoadSpec {
    pub id: String,
    pub from: String,
    pub to: String,
    pub points: Vec<Point>,
}

/// Turning-movement description: traveling on `road`, performing `movement`
/// continues onto `end_road`.
#[derive(Debug, Clone)]
pub struct LinkSpec {
    pub road: String,
    pub movement: Movement,
    pub end_road: String,
}

/// Assembles and validates a [`RoadNetwork`] from node / road / link
/// descriptions. Shared by the file loader and the synthetic generator.
pub fn build_network(
    nodes: Vec<NodeSpec>,
    roads: Vec<RoadSpec>,
    links: Vec<LinkSpec>,
) -> Result<RoadNetwork, NetError> {
    let mut intersection_index = HashMap::new();
    let mut boundary_nodes = BTreeMap::new();
    let mut intersections = Vec::new();
    for node in &nodes {
        if node.controlled {
            if intersection_index.insert(node.id.clone(), intersections.len()).is_some() {
                return Err(NetError::Topology(format!("duplicate intersection id {:?}", node.id)));
            }
            intersections.push(Intersection {
                id: node.id.clone(),
                pos: node.pos,
                incoming: BTreeMap::new(),
            });
        } else if boundary_nodes.insert(node.id.clone(), node.pos).is_some() {
            return Err(NetError::Topology(format!("duplicate boundary node id {:?}", node.id)));
        }
    }
    if intersections.is_empty() {
        return Err(NetError::Topology("network has no controlled intersections".into()));
    }

    let mut road_index = HashMap::new();
    let mut built_roads = Vec::new();
    for spec in &roads {
        if spec.points.len() < 2 {
            return Err(NetError::Parse(format!("road {:?} has fewer than two points", spec.id)));
        }
        let node_exists = |id: &str| intersection_index.contains_key(id) || boundary_nodes.contains_key(id);
        if !node_exists(&spec.from) {
            return Err(NetError::Topology(format!("road {:?} references unknown node {:?}", spec.id, spec.from)));
        }
        if !node_exists(&spec.to) {
            return Err(NetError::Topology(format!("road {:?} references unknown node {:?}", spec.id, spec.to)));
        }
        let length: f64 = spec.points.windows(2).map(|w| w[0].dist(w[1])).sum();
        if !(length > 0.0) {
            return Err(NetError::Topology(format!("road {:?} has zero length", spec.id)));
        }
        if road_index.insert(spec.id.clone(), built_roads.len()).is_some() {
            return Err(NetError::Topology(format!("duplicate road id {:?}", spec.id)));
        }
        built_roads.push(Road {
            id: spec.id.clone(),
            from: spec.from.clone(),
            to: spec.to.clone(),
            points: spec.points.clone(),
            length,
            lanes: Vec::new(),
        });
    }

    // Movement lanes, one per (road, movement) link.
    let mut lanes: Vec<Lane> = Vec::new();
    let mut seen = HashMap::new();
    for link in &links {
        let road = *road_index
            .get(&link.road)
            .ok_or_else(|| NetError::Topology(format!("link references unknown road {:?}", link.road)))?;
        let end_road = *road_index
            .get(&link.end_road)
            .ok_or_else(|| NetError::Topology(format!("link references unknown road {:?}", link.end_road)))?;
        let at = built_roads[road].to.clone();
        if !intersection_index.contains_key(&at) {
            return Err(NetError::Topology(format!(
                "link on road {:?} turns at {:?}, which is not a controlled intersection",
                link.road, at
            )));
        }
        if built_roads[end_road].from != at {
            return Err(NetError::Topology(format!(
                "link {:?} -> {:?} is not contiguous at {:?}",
                link.road, link.end_road, at
            )));
        }
        match seen.entry((road, link.movement)) {
            std::collections::hash_map::Entry::Occupied(prev) => {
                if *prev.get() != end_road {
                    return Err(NetError::Topology(format!(
                        "conflicting {:?} links on road {:?}",
                        link.movement, link.road
                    )));
                }
                continue; // duplicate of an identical link
            }
            std::collections::hash_map::Entry::Vacant(slot) => {
                slot.insert(end_road);
            }
        }
        let approach = Compass::approach_of_heading(built_roads[road].end_heading());
        lanes.push(Lane {
            id: format!("{}_{}", built_roads[road].id, link.movement.lane_suffix()),
            road,
            movement: link.movement,
            approach: Some(approach),
            length: built_roads[road].length,
            segment_count: 3,
            downstream_road: Some(end_road),
            controlled: link.movement != Movement::Right,
        });
    }

    // Exit lanes on roads that leave the network.
    for (road_idx, road) in built_roads.iter().enumerate() {
        if boundary_nodes.contains_key(&road.to) {
            lanes.push(Lane {
                id: format!("{}_exit", road.id),
                road: road_idx,
                movement: Movement::Through,
                approach: None,
                length: road.length,
                segment_count: 3,
                downstream_road: None,
                controlled: false,
            });
        }
    }

    // Stable lane order: by (road, movement), exit lanes behind turn lanes.
    lanes.sort_by_key(|l| (l.road, l.movement, l.approach.is_none()));
    let mut lane_index = HashMap::new();
    for (idx, lane) in lanes.iter().enumerate() {
        if lane_index.insert(lane.id.clone(), idx).is_some() {
            return Err(NetError::Topology(format!("duplicate lane id {:?}", lane.id)));
        }
        built_roads[lane.road].lanes.push(idx);
    }

    // Register incoming lanes and check the eight-lane contract.
    for (idx, lane) in lanes.iter().enumerate() {
        let Some(approach) = lane.approach else { continue };
        let at = &built_roads[lane.road].to;
        let inter = &mut intersections[intersection_index[at]];
        if inter.incoming.insert((approach, lane.movement), idx).is_some() {
            return Err(NetError::Topology(format!(
                "intersection {:?} has two {:?} {:?} lanes",
                at, approach, lane.movement
            )));
        }
    }
    for inter in &intersections {
        for approach in Compass::ALL {
            for movement in [Movement::Through, Movement::Left] {
                if !inter.incoming.contains_key(&(approach, movement)) {
                    return Err(NetError::Topology(format!(
                        "intersection {:?} is missing its {} {:?} lane",
                        inter.id,
                        approach.label().to_ascii_lowercase(),
                        movement
                    )));
                }
            }
        }
    }

    Ok(RoadNetwork {
        intersections,
        roads: built_roads,
        lanes,
        boundary_nodes,
        road_index,
        lane_index,
        intersection_index,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phase_movements_partition_controlled_lanes() {
        let mut seen = std::collections::BTreeSet::new();
        for phase in PhaseId::ALL {
            for pair in phase.movements() {
                assert!(seen.insert(pair), "{pair:?} appears in two phases");
                assert_ne!(pair.1, Movement::Right);
            }
        }
        assert_eq!(seen.len(), 8);
    }

    #[test]
    fn phase_id_round_trips_through_strings() {
        for phase in PhaseId::ALL {
            let parsed: PhaseId = phase.name().parse().unwrap();
            assert_eq!(parsed, phase);
            let lax: PhaseId = phase.name().to_ascii_lowercase().parse().unwrap();
            assert_eq!(lax, phase);
        }
        assert!("EEEE".parse::<PhaseId>().is_err());
        assert!("".parse::<PhaseId>().is_err());
    }

    #[test]
    fn turn_geometry_matches_right_hand_traffic() {
        assert_eq!(Compass::West.turn(Movement::Through), Compass::West);
        assert_eq!(Compass::West.turn(Movement::Left), Compass::South);
        assert_eq!(Compass::West.turn(Movement::Right), Compass::North);
        for heading in Compass::ALL {
            assert_eq!(heading.turn(Movement::Left), heading.turn(Movement::Right).opposite());
        }
    }

    #[test]
    fn approach_is_opposite_of_heading() {
        // A road heading west arrives at the eastern side of the junction.
        assert_eq!(Compass::approach_of_heading(Compass::West), Compass::East);
        assert_eq!(Compass::approach_of_heading(Compass::North), Compass::South);
    }
}
