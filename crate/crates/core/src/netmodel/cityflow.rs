//! Reading and writing the CityFlow-style roadnet / flow JSON files.
//!
//! Only a subset of the schema is interpreted: road geometry, turn types and
//! flow entries. Physical per-lane data (`laneLinks`, lane widths) and the
//! embedded signal programs are accepted and ignored; this model imposes its
//! own four-phase program and collapses multi-lane roads onto one lane per
//! turning movement. The saver emits the same subset, so synthetic networks
//! round-trip exactly. The exact grammar is documented in `docs/formats.md`.

use super::{
    build_network, FlowEntry, FlowSpec, LinkSpec, Movement, NetError, NodeSpec, PhaseId, Point, RoadNetwork,
    RoadSpec,
};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Deserialize)]
struct CfRoadnet {
    intersections: Vec<CfIntersection>,
    roads: Vec<CfRoad>,
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct CfIntersection {
    id: String,
    point: Point,
    #[serde(default, rename = "virtual")]
    is_virtual: bool,
    #[serde(default)]
    road_links: Vec<CfRoadLink>,
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct CfRoadLink {
    #[serde(rename = "type")]
    kind: String,
    start_road: String,
    end_road: String,
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct CfRoad {
    id: String,
    points: Vec<Point>,
    start_intersection: String,
    end_intersection: String,
}

fn movement_of(kind: &str) -> Result<Movement, NetError> {
    match kind {
        "go_straight" => Ok(Movement::Through),
        "turn_left" => Ok(Movement::Left),
        "turn_right" => Ok(Movement::Right),
        other => Err(NetError::Parse(format!("unknown road link type {other:?}"))),
    }
}

fn movement_kind(movement: Movement) -> &'static str {
    match movement {
        Movement::Through => "go_straight",
        Movement::Left => "turn_left",
        Movement::Right => "turn_right",
    }
}

pub fn load_roadnet_str(json: &str) -> Result<RoadNetwork, NetError> {
    let raw: CfRoadnet = serde_json::from_str(json).map_err(|e| NetError::Parse(format!("roadnet: {e}")))?;
    let nodes = raw
        .intersections
        .iter()
        .map(|i| NodeSpec {
            id: i.id.clone(),
            pos: i.point,
            controlled: !i.is_virtual,
        })
        .collect();
    let roads = raw
        .roads
        .iter()
        .map(|r| RoadSpec {
            id: r.id.clone(),
            from: r.start_intersection.clone(),
            to: r.end_intersection.clone(),
            points: r.points.clone(),
        })
        .collect();
    let mut links = Vec::new();
    for inter in &raw.intersections {
        if inter.is_virtual {
            continue;
        }
        for link in &inter.road_links {
            links.push(LinkSpec {
                road: link.start_road.clone(),
                movement: movement_of(&link.kind)?,
                end_road: link.end_road.clone(),
            });
        }
    }
    build_network(nodes, roads, links)
}

pub fn load_roadnet(path: &Path) -> Result<RoadNetwork, NetError> {
    let json = std::fs::read_to_string(path)?;
    load_roadnet_str(&json).map_err(|e| annotate(e, path))
}

fn annotate(err: NetError, path: &Path) -> NetError {
    match err {
        NetError::Parse(m) => NetError::Parse(format!("{}: {m}", path.display())),
        NetError::Topology(m) => NetError::Topology(format!("{}: {m}", path.display())),
        other => other,
    }
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct CfIntersectionOut {
    id: String,
    point: Point,
    #[serde(rename = "virtual")]
    is_virtual: bool,
    roads: Vec<String>,
    road_links: Vec<CfRoadLinkOut>,
    traffic_light: CfTrafficLight,
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct CfRoadLinkOut {
    #[serde(rename = "type")]
    kind: &'static str,
    start_road: String,
    end_road: String,
    lane_links: Vec<()>,
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct CfTrafficLight {
    lightphases: Vec<CfLightPhase>,
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct CfLightPhase {
    time: f64,
    available_road_links: Vec<usize>,
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct CfRoadOut {
    id: String,
    points: Vec<Point>,
    lanes: Vec<CfLaneOut>,
    start_intersection: String,
    end_intersection: String,
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct CfLaneOut {
    width: f64,
    max_speed: f64,
}

/// Renders `net` back into roadnet JSON (the readable subset only).
pub fn roadnet_json(net: &RoadNetwork) -> String {
    let incident = |node: &str| -> Vec<String> {
        net.roads
            .iter()
            .filter(|r| r.from == node || r.to == node)
            .map(|r| r.id.clone())
            .collect()
    };
    let mut intersections = Vec::new();
    for inter in &net.intersections {
        let mut road_links = Vec::new();
        let mut link_lanes = Vec::new();
        for (_, &lane_idx) in &inter.incoming {
            let lane = &net.lanes[lane_idx];
            road_links.push(CfRoadLinkOut {
                kind: movement_kind(lane.movement),
                start_road: net.roads[lane.road].id.clone(),
                end_road: net.roads[lane.downstream_road.expect("incoming lanes have downstream roads")].id.clone(),
                lane_links: Vec::new(),
            });
            link_lanes.push(lane_idx);
        }
        // Four green phases; right turns are released in all of them.
        let lightphases: Vec<CfLightPhase> = PhaseId::ALL
            .iter()
            .map(|phase| {
                let allowed = phase.movements();
                CfLightPhase {
                    time: 30.0,
                    available_road_links: link_lanes
                        .iter()
                        .enumerate()
                        .filter(|(_, &l)| {
                            let lane = &net.lanes[l];
                            lane.movement == Movement::Right
                                || allowed.contains(&(lane.approach.unwrap(), lane.movement))
                        })
                        .map(|(i, _)| i)
                        .collect(),
                }
            })
            .collect();
        intersections.push(CfIntersectionOut {
            id: inter.id.clone(),
            point: inter.pos,
            is_virtual: false,
            roads: incident(&inter.id),
            road_links,
            traffic_light: CfTrafficLight { lightphases },
        });
    }
    for (id, &point) in &net.boundary_nodes {
        intersections.push(CfIntersectionOut {
            id: id.clone(),
            point,
            is_virtual: true,
            roads: incident(id),
            road_links: Vec::new(),
            traffic_light: CfTrafficLight { lightphases: Vec::new() },
        });
    }
    let roads: Vec<CfRoadOut> = net
        .roads
        .iter()
        .map(|r| CfRoadOut {
            id: r.id.clone(),
            points: r.points.clone(),
            lanes: (0..3)
                .map(|_| CfLaneOut {
                    width: 3.0,
                    max_speed: 11.11,
                })
                .collect(),
            start_intersection: r.from.clone(),
            end_intersection: r.to.clone(),
        })
        .collect();
    let doc = serde_json::json!({ "intersections": intersections, "roads": roads });
    serde_json::to_string_pretty(&doc).expect("roadnet serializes")
}

pub fn save_roadnet(net: &RoadNetwork, path: &Path) -> Result<(), NetError> {
    std::fs::write(path, roadnet_json(net))?;
    Ok(())
}

fn default_max_speed() -> f64 {
    11.11
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct CfVehicle {
    #[serde(default = "default_max_speed")]
    max_speed: f64,
    #[serde(default, skip_deserializing)]
    length: f64,
    #[serde(default, skip_deserializing)]
    width: f64,
}

impl Default for CfVehicle {
    fn default() -> Self {
        CfVehicle {
            max_speed: default_max_speed(),
            length: 5.0,
            width: 2.0,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct CfFlowEntry {
    #[serde(default)]
    vehicle: CfVehicle,
    route: Vec<String>,
    interval: f64,
    start_time: f64,
    end_time: f64,
}

pub fn load_flow_str(json: &str) -> Result<FlowSpec, NetError> {
    let raw: Vec<CfFlowEntry> = serde_json::from_str(json).map_err(|e| NetError::Parse(format!("flow: {e}")))?;
    let entries: Vec<FlowEntry> = raw
        .into_iter()
        .map(|e| FlowEntry {
            route: e.route,
            start_time: e.start_time,
            end_time: e.end_time,
            interval: e.interval,
            max_speed: e.vehicle.max_speed,
        })
        .collect();
    for (idx, entry) in entries.iter().enumerate() {
        entry.validate(idx)?;
    }
    Ok(FlowSpec { entries })
}

pub fn load_flow(path: &Path) -> Result<FlowSpec, NetError> {
    let json = std::fs::read_to_string(path)?;
    load_flow_str(&json).map_err(|e| annotate(e, path))
}

pub fn flow_json(spec: &FlowSpec) -> String {
    let raw: Vec<CfFlowEntry> = spec
        .entries
        .iter()
        .map(|e| CfFlowEntry {
            vehicle: CfVehicle {
                max_speed: e.max_speed,
                ..CfVehicle::default()
            },
            route: e.route.clone(),
            interval: e.interval,
            start_time: e.start_time,
            end_time: e.end_time,
        })
        .collect();
    serde_json::to_string_pretty(&raw).expect("flow serializes")
}

pub fn save_flow(spec: &FlowSpec, path: &Path) -> Result<(), NetError> {
    std::fs::write(path, flow_json(spec))?;
    Ok(())
}
