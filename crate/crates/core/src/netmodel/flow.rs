//! Traffic demand: flow entries, their expansion into spawn events, and a
//! seeded synthetic generator.

use super::{Compass, Movement, NetError, RoadNetwork};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// One demand entry. Spawns a vehicle on `route[0]` every `interval` seconds
/// from `start_time` through `end_time` inclusive, which yields
/// `floor((end_time - start_time) / interval) + 1` vehicles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowEntry {
    /// Road ids, in travel order.
    pub route: Vec<String>,
    pub start_time: f64,
    pub end_time: f64,
    pub interval: f64,
    pub max_speed: f64,
}

impl FlowEntry {
    pub fn vehicle_count(&self) -> u64 {
        ((self.end_time - self.start_time) / self.interval).floor() as u64 + 1
    }

    pub(crate) fn validate(&self, idx: usize) -> Result<(), NetError> {
        if self.route.is_empty() {
            return Err(NetError::Parse(format!("flow entry {idx} has an empty route")));
        }
        if !(self.interval > 0.0) {
            return Err(NetError::Parse(format!("flow entry {idx} has non-positive interval")));
        }
        if !(self.end_time >= self.start_time) || self.start_time < 0.0 {
            return Err(NetError::Parse(format!("flow entry {idx} has an invalid time range")));
        }
        if !(self.max_speed > 0.0) {
            return Err(NetError::Parse(format!("flow entry {idx} has non-positive max_speed")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FlowSpec {
    pub entries: Vec<FlowEntry>,
}

/// One vehicle to be injected, produced by [`FlowSpec::expand`]. Roads are
/// resolved to indices into the network.
#[derive(Debug, Clone, PartialEq)]
pub struct SpawnEvent {
    /// Tick at which the vehicle becomes due.
    pub time: u64,
    pub route: Vec<usize>,
    pub max_speed: f64,
}

impl FlowSpec {
    /// Total vehicles this demand describes.
    pub fn vehicle_count(&self) -> u64 {
        self.entries.iter().map(FlowEntry::vehicle_count).sum()
    }

    /// Checks entry fields and that every route exists in `net` and is
    /// contiguous (each consecutive road pair is joined by a movement lane).
    pub fn validate(&self, net: &RoadNetwork) -> Result<(), NetError> {
        for (idx, entry) in self.entries.iter().enumerate() {
            entry.validate(idx)?;
            let mut prev: Option<usize> = None;
            for id in &entry.route {
                let road = net
                    .road_idx(id)
                    .ok_or_else(|| NetError::Route(format!("flow entry {idx}: road {id:?} is not in the network")))?;
                if let Some(prev) = prev {
                    let joined = net.roads[prev]
                        .lanes
                        .iter()
                        .any(|&l| net.lanes[l].downstream_road == Some(road));
                    if !joined {
                        return Err(NetError::Route(format!(
                            "flow entry {idx}: no movement joins {:?} to {id:?}",
                            net.roads[prev].id
                        )));
                    }
                }
                prev = Some(road);
            }
        }
        Ok(())
    }

    /// Expands entries into per-vehicle spawn events, sorted by spawn time
    /// with the original entry order as tie-break.
    pub fn expand(&self, net: &RoadNetwork) -> Result<Vec<SpawnEvent>, NetError> {
        self.validate(net)?;
        let mut events = Vec::new();
        for entry in &self.entries {
            let route: Vec<usize> = entry.route.iter().map(|id| net.road_idx(id).unwrap()).collect();
            for k in 0..entry.vehicle_count() {
                events.push(SpawnEvent {
                    time: (entry.start_time + k as f64 * entry.interval).floor() as u64,
                    route: route.clone(),
                    max_speed: entry.max_speed,
                });
            }
        }
        events.sort_by_key(|e| e.time);
        Ok(events)
    }
}

/// Configuration for [`synth_flow`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthFlowCfg {
    /// Seconds over which arrivals are generated.
    pub duration: u64,
    pub seed: u64,
    /// Per-second arrival probability on each entry road (Bernoulli thinning
    /// of a Poisson process, one draw per road per second).
    pub rate: f64,
    /// Multiplier on `rate` keyed by the side the entry road arrives from.
    #[serde(default)]
    pub approach_scale: BTreeMap<Compass, f64>,
    /// Relative odds of continuing through / left / right at each junction.
    pub movement_weights: [f64; 3],
    pub max_speed: f64,
}

impl Default for SynthFlowCfg {
    fn default() -> Self {
        SynthFlowCfg {
            duration: 3600,
            seed: 0,
            rate: 0.05,
            approach_scale: BTreeMap::new(),
            movement_weights: [0.6, 0.2, 0.2],
            max_speed: 11.11,
        }
    }
}

/// Draws seeded Poisson-like arrivals on every entry road of `net` and walks
/// each vehicle through the network with weighted random turns until it
/// leaves. Deterministic for a fixed network and configuration.
pub fn synth_flow(net: &RoadNetwork, cfg: &SynthFlowCfg) -> Result<FlowSpec, NetError> {
    if !(0.0..=1.0).contains(&cfg.rate) {
        return Err(NetError::Parse("synthetic flow rate must be within [0, 1]".into()));
    }
    if cfg.movement_weights.iter().any(|w| *w < 0.0) || cfg.movement_weights.iter().sum::<f64>() <= 0.0 {
        return Err(NetError::Parse("synthetic movement weights must be non-negative and not all zero".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let entry_roads: Vec<usize> = (0..net.roads.len())
        .filter(|&r| net.boundary_nodes.contains_key(&net.roads[r].from))
        .collect();
    if entry_roads.is_empty() {
        return Err(NetError::Topology("network has no entry roads".into()));
    }

    // Walks should not circle forever on unlucky draws; past this many roads
    // the vehicle keeps going straight, which reaches a boundary on any grid.
    let max_turns = 4 * (net.intersections.len() + 4);

    let mut entries = Vec::new();
    for t in 0..cfg.duration {
        for &road in &entry_roads {
            let side = entry_side(net, road);
            let scale = side.and_then(|s| cfg.approach_scale.get(&s)).copied().unwrap_or(1.0);
            let p = (cfg.rate * scale).clamp(0.0, 1.0);
            if !rng.gen_bool(p) {
                continue;
            }
            let route = random_route(net, road, cfg.movement_weights, max_turns, &mut rng);
            entries.push(FlowEntry {
                route,
                start_time: t as f64,
                end_time: t as f64,
                interval: 1.0,
                max_speed: cfg.max_speed,
            });
        }
    }
    Ok(FlowSpec { entries })
}

fn entry_side(net: &RoadNetwork, road: usize) -> Option<Compass> {
    net.roads[road]
        .lanes
        .iter()
        .find_map(|&l| net.lanes[l].approach)
}

fn random_route(
    net: &RoadNetwork,
    start: usize,
    weights: [f64; 3],
    max_turns: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<String> {
    let mut route = vec![net.roads[start].id.clone()];
    let mut road = start;
    for turn in 0.. {
        if net.road_exits(road) {
            break;
        }
        let options: Vec<(Movement, usize)> = net.roads[road]
            .lanes
            .iter()
            .filter_map(|&l| Some((net.lanes[l].movement, net.lanes[l].downstream_road?)))
            .collect();
        if options.is_empty() {
            break;
        }
        let next = if turn >= max_turns {
            options
                .iter()
                .find(|(m, _)| *m == Movement::Through)
                .unwrap_or(&options[0])
                .1
        } else {
            let total: f64 = options.iter().map(|(m, _)| weights[movement_slot(*m)]).sum();
            if total <= 0.0 {
                options[0].1
            } else {
                let mut draw = rng.gen_range(0.0..total);
                let mut chosen = options[0].1;
                for (m, r) in &options {
                    let w = weights[movement_slot(*m)];
                    if draw < w {
                        chosen = *r;
                        break;
                    }
                    draw -= w;
                }
                chosen
            }
        };
        route.push(net.roads[next].id.clone());
        road = next;
    }
    route
}

fn movement_slot(m: Movement) -> usize {
    match m {
        Movement::Through => 0,
        Movement::Left => 1,
        Movement::Right => 2,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::grid::synth_grid;

    fn entry(start: f64, end: f64, interval: f64) -> FlowEntry {
        FlowEntry {
            route: vec!["road_0_1_0".into(), "road_1_1_0".into()],
            start_time: start,
            end_time: end,
            interval,
            max_speed: 11.11,
        }
    }

    #[test]
    fn vehicle_count_follows_floor_formula() {
        assert_eq!(entry(0.0, 100.0, 2.0).vehicle_count(), 51);
        assert_eq!(entry(0.0, 99.0, 2.0).vehicle_count(), 50);
        assert_eq!(entry(10.0, 10.0, 5.0).vehicle_count(), 1);
        assert_eq!(entry(0.0, 7.0, 3.0).vehicle_count(), 3);
    }

    #[test]
    fn expand_matches_count_and_is_time_sorted() {
        let net = synth_grid(1, 1, 300.0).unwrap();
        let spec = FlowSpec {
            entries: vec![entry(5.0, 30.0, 7.0), entry(0.0, 0.0, 1.0)],
        };
        let events = spec.expand(&net).unwrap();
        assert_eq!(events.len() as u64, spec.vehicle_count());
        assert!(events.windows(2).all(|w| w[0].time <= w[1].time));
        assert_eq!(events[0].time, 0);
    }

    #[test]
    fn invalid_entries_are_rejected() {
        let net = synth_grid(1, 1, 300.0).unwrap();
        let mut bad = entry(0.0, 10.0, 0.0);
        assert!(matches!(
            FlowSpec { entries: vec![bad.clone()] }.validate(&net),
            Err(NetError::Parse(_))
        ));
        bad.interval = 2.0;
        bad.end_time = -1.0;
        assert!(FlowSpec { entries: vec![bad] }.validate(&net).is_err());
    }

    #[test]
    fn unknown_and_disconnected_routes_are_route_errors() {
        let net = synth_grid(1, 1, 300.0).unwrap();
        let mut e = entry(0.0, 0.0, 1.0);
        e.route = vec!["road_9_9_0".into()];
        assert!(matches!(
            FlowSpec { entries: vec![e.clone()] }.validate(&net),
            Err(NetError::Route(_))
        ));
        // Both roads exist but nothing turns from the northern entry onto it.
        e.route = vec!["road_1_2_3".into(), "road_1_2_3".into()];
        assert!(matches!(
            FlowSpec { entries: vec![e] }.validate(&net),
            Err(NetError::Route(_))
        ));
    }

    #[test]
    fn synth_flow_is_deterministic_per_seed() {
        let net = synth_grid(2, 2, 300.0).unwrap();
        let cfg = SynthFlowCfg {
            duration: 200,
            seed: 7,
            rate: 0.1,
            ..SynthFlowCfg::default()
        };
        let a = synth_flow(&net, &cfg).unwrap();
        let b = synth_flow(&net, &cfg).unwrap();
        assert_eq!(a, b);
        let c = synth_flow(
            &net,
            &SynthFlowCfg {
                seed: 8,
                ..cfg.clone()
            },
        )
        .unwrap();
        assert_ne!(a, c);
        a.validate(&net).unwrap();
    }

    #[test]
    fn synth_routes_enter_at_boundary_and_leave_network() {
        let net = synth_grid(2, 3, 250.0).unwrap();
        let cfg = SynthFlowCfg {
            duration: 300,
            seed: 3,
            rate: 0.08,
            ..SynthFlowCfg::default()
        };
        let spec = synth_flow(&net, &cfg).unwrap();
        assert!(!spec.entries.is_empty());
        for e in &spec.entries {
            let first = net.road_idx(&e.route[0]).unwrap();
            let last = net.road_idx(e.route.last().unwrap()).unwrap();
            assert!(net.boundary_nodes.contains_key(&net.roads[first].from));
            assert!(net.road_exits(last));
        }
    }

    #[test]
    fn approach_scale_shifts_demand() {
        let net = synth_grid(1, 1, 300.0).unwrap();
        let mut scale = BTreeMap::new();
        scale.insert(Compass::North, 1.0);
        scale.insert(Compass::South, 1.0);
        scale.insert(Compass::East, 0.0);
        scale.insert(Compass::West, 0.0);
        let cfg = SynthFlowCfg {
            duration: 500,
            seed: 11,
            rate: 0.2,
            approach_scale: scale,
            ..SynthFlowCfg::default()
        };
        let spec = synth_flow(&net, &cfg).unwrap();
        assert!(!spec.entries.is_empty());
        for e in &spec.entries {
            let first = net.road_idx(&e.route[0]).unwrap();
            let side = entry_side(&net, first).unwrap();
            assert!(matches!(side, Compass::North | Compass::South));
        }
    }
}
