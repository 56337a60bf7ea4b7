//! Intersection observations: queued and approaching vehicles per phase.
//!
//! A vehicle is *queued* when it moved slower than `v_stop` in the last tick,
//! wherever it stands on the lane. Faster vehicles are *approaching* and are
//! binned into the lane's equal-length segments, segment 1 touching the stop
//! line; a vehicle exactly on a segment boundary belongs to the segment
//! nearer the stop line.

use crate::netmodel::{Compass, PhaseId};
use crate::simcore::Simulation;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaneObservation {
    /// Lane id, stable across runs of the same network.
    pub lane: String,
    pub approach: Compass,
    /// Queued vehicle count (n_q).
    pub queued: u32,
    /// Approaching vehicles per segment (n_s), segment 1 first.
    pub approaching: Vec<u32>,
    /// Queued vehicles on the road this lane discharges onto; zero when the
    /// movement exits the network.
    pub downstream_queued: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseObservation {
    pub phase: PhaseId,
    /// The two released lanes, in [`PhaseId::movements`] order
    /// (east/west or north/south).
    pub lanes: [LaneObservation; 2],
}

impl PhaseObservation {
    pub fn queued_total(&self) -> u32 {
        self.lanes.iter().map(|l| l.queued).sum()
    }

    /// Total approaching vehicles in 1-based segment `seg`.
    pub fn segment_total(&self, seg: usize) -> u32 {
        self.lanes.iter().map(|l| l.approaching[seg - 1]).sum()
    }

    pub fn downstream_queued_total(&self) -> u32 {
        self.lanes.iter().map(|l| l.downstream_queued).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntersectionObservation {
    pub intersection: String,
    /// Simulation time the snapshot was taken at.
    pub t: u64,
    /// All four phases in canonical order.
    pub phases: [PhaseObservation; 4],
}

impl IntersectionObservation {
    pub fn phase(&self, id: PhaseId) -> &PhaseObservation {
        &self.phases[id.index()]
    }

    /// Queued vehicles across all eight controlled lanes.
    pub fn queued_total(&self) -> u32 {
        self.phases.iter().map(PhaseObservation::queued_total).sum()
    }

    /// Segment count of the underlying lanes (uniform per observation).
    pub fn segment_count(&self) -> usize {
        self.phases[0].lanes[0].approaching.len()
    }
}

/// 1-based segment index for a vehicle `front` meters into a lane of length
/// `len` split into `segments` parts. Segment 1 touches the stop line.
pub fn segment_of(front: f64, len: f64, segments: usize) -> usize {
    let distance = (len - front).max(0.0);
    let idx = (distance * segments as f64 / len).ceil() as usize;
    idx.clamp(1, segments)
}

/// Snapshot of one intersection at the current simulation time.
pub fn observe(sim: &Simulation, intersection: usize) -> IntersectionObservation {
    let net = sim.net();
    let v_stop = sim.cfg().v_stop;
    let queued_on_lane = |lane: usize| -> u32 {
        sim.lane_occupancy(lane).filter(|&(_, speed)| speed < v_stop).count() as u32
    };
    let phases = net.phase_table(intersection).map(|phase| {
        let lanes = phase.lanes.map(|lane_idx| {
            let lane = &net.lanes[lane_idx];
            let mut approaching = vec![0u32; lane.segment_count];
            let mut queued = 0u32;
            for (front, speed) in sim.lane_occupancy(lane_idx) {
                if speed < v_stop {
                    queued += 1;
                } else {
                    approaching[segment_of(front, lane.length, lane.segment_count) - 1] += 1;
                }
            }
            let downstream_queued = match lane.downstream_road {
                Some(road) if !net.road_exits(road) => {
                    net.roads[road].lanes.iter().map(|&l| queued_on_lane(l)).sum()
                }
                _ => 0,
            };
            LaneObservation {
                lane: lane.id.clone(),
                approach: lane.approach.expect("controlled lanes have an approach"),
                queued,
                approaching,
                downstream_queued,
            }
        });
        PhaseObservation { phase: phase.id, lanes }
    });
    IntersectionObservation {
        intersection: net.intersections[intersection].id.clone(),
        t: sim.time(),
        phases,
    }
}

/// Observations for every intersection, in network order.
pub fn observe_all(sim: &Simulation) -> Vec<IntersectionObservation> {
    (0..sim.net().intersections.len()).map(|i| observe(sim, i)).collect()
}
