//! Episode driver: runs a controller against the simulator for a fixed
//! horizon and captures everything the offline pipeline needs (per-tick
//! queue totals, per-switch observations and actions, per-vehicle travel
//! records) in a reproducible, serializable log.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agents::{Controller, ControllerError};
use crate::critic::{featurize, Transition};
use crate::netmodel::{FlowSpec, NetError, PhaseId, RoadNetwork};
use crate::observe::{observe, IntersectionObservation};
use crate::simcore::{SimConfig, SimError, Simulation};

#[derive(Debug, thiserror::Error)]
pub enum EpisodeError {
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("log serialization: {0}")]
    Serde(#[from] serde_json::Error),
    #[error("log io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed log: {0}")]
    Malformed(String),
}

/// Header line of an episode log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMeta {
    pub controller: String,
    pub deterministic: bool,
    pub seed: u64,
    pub episode_len: u64,
    /// Controlled intersection ids, in simulation order.
    pub intersections: Vec<String>,
    /// Vehicles scheduled to spawn within the horizon.
    pub scheduled: u64,
}

/// One control decision at a switch boundary, together with the
/// observation the controller saw when it made it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchRecord {
    pub t: u64,
    pub intersection: String,
    pub action: PhaseId,
    /// False when the controller kept the already-active phase.
    pub changed: bool,
    pub observation: IntersectionObservation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleRecord {
    pub id: u32,
    pub sched: u64,
    pub entered: Option<u64>,
    pub finished: Option<u64>,
    pub wait: u32,
}

/// Aggregate waiting statistics for one intersection over the episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntersectionWaitRecord {
    pub intersection: String,
    /// Total vehicle-ticks spent below the stop threshold on incoming lanes.
    pub wait_ticks: u64,
    /// Distinct vehicles that queued here at least once.
    pub queuers: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub meta: EpisodeMeta,
    /// Network-wide queued-vehicle count after each tick; length equals
    /// `meta.episode_len`.
    pub tick_queue: Vec<u32>,
    pub switches: Vec<SwitchRecord>,
    pub vehicles: Vec<VehicleRecord>,
    pub intersection_wait: Vec<IntersectionWaitRecord>,
}

/// Wire format: one JSON object per line, discriminated by `kind`.
#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LogLine {
    Meta(EpisodeMeta),
    Tick { t: u64, queued: u32 },
    Switch(SwitchRecord),
    Vehicle(VehicleRecord),
    IntersectionWait(IntersectionWaitRecord),
}

impl EpisodeLog {
    /// Serializes to JSONL: meta first, then ticks, switches, vehicles,
    /// and intersection waits, each in their stored order.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let mut push = |line: &LogLine| {
            out.push_str(&serde_json::to_string(line).expect("log line serializes"));
            out.push('\n');
        };
        push(&LogLine::Meta(self.meta.clone()));
        for (t, &queued) in self.tick_queue.iter().enumerate() {
            push(&LogLine::Tick { t: t as u64, queued });
        }
        for s in &self.switches {
            push(&LogLine::Switch(s.clone()));
        }
        for v in &self.vehicles {
            push(&LogLine::Vehicle(v.clone()));
        }
        for w in &self.intersection_wait {
            push(&LogLine::IntersectionWait(w.clone()));
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, EpisodeError> {
        let mut meta: Option<EpisodeMeta> = None;
        let mut ticks: Vec<(u64, u32)> = Vec::new();
        let mut switches = Vec::new();
        let mut vehicles = Vec::new();
        let mut waits = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parsed: LogLine = serde_json::from_str(line)
                .map_err(|e| EpisodeError::Malformed(format!("line {}: {e}", ln + 1)))?;
            match parsed {
                LogLine::Meta(m) => {
                    if meta.replace(m).is_some() {
                        return Err(EpisodeError::Malformed("duplicate meta line".into()));
                    }
                }
                LogLine::Tick { t, queued } => ticks.push((t, queued)),
                LogLine::Switch(s) => switches.push(s),
                LogLine::Vehicle(v) => vehicles.push(v),
                LogLine::IntersectionWait(w) => waits.push(w),
            }
        }
        let meta = meta.ok_or_else(|| EpisodeError::Malformed("missing meta line".into()))?;
        ticks.sort_by_key(|&(t, _)| t);
        for (i, &(t, _)) in ticks.iter().enumerate() {
            if t != i as u64 {
                return Err(EpisodeError::Malformed(format!(
                    "tick lines not contiguous: expected t={i}, got t={t}"
                )));
            }
        }
        if ticks.len() as u64 != meta.episode_len {
            return Err(EpisodeError::Malformed(format!(
                "tick count {} does not match episode_len {}",
                ticks.len(),
                meta.episode_len
            )));
        }
        Ok(EpisodeLog {
            meta,
            tick_queue: ticks.into_iter().map(|(_, q)| q).collect(),
            switches,
            vehicles,
            intersection_wait: waits,
        })
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), EpisodeError> {
        w.write_all(self.to_jsonl().as_bytes())?;
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(mut r: R) -> Result<Self, EpisodeError> {
        let mut text = String::new();
        r.read_to_string(&mut text)?;
        Self::from_jsonl(&text)
    }

    /// Hex SHA-256 of the canonical JSONL encoding. Two runs produced the
    /// same episode iff their digests match.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.to_jsonl().as_bytes());
        let out = h.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Switch records for one intersection, in time order.
    pub fn switches_for(&self, intersection: &str) -> Vec<&SwitchRecord> {
        self.switches
            .iter()
            .filter(|s| s.intersection == intersection)
            .collect()
    }
}

/// Runs `controller` for `cfg.episode_len` ticks. Each tick, every
/// intersection whose green has run its course is asked for a decision
/// (in simulation id order) before the world advances one second.
pub fn run_episode(
    net: &RoadNetwork,
    flow: &FlowSpec,
    controller: &mut dyn Controller,
    cfg: &SimConfig,
) -> Result<EpisodeLog, EpisodeError> {
    let spawns = flow.expand(net)?;
    let mut sim = Simulation::new(net, &spawns, cfg.clone())?;

    let n = net.intersections.len();
    let mut tick_queue = Vec::with_capacity(cfg.episode_len as usize);
    let mut switches = Vec::new();

    for _ in 0..cfg.episode_len {
        for ix in 0..n {
            if !sim.switch_ready(ix) {
                continue;
            }
            let obs = observe(&sim, ix);
            let action = controller.decide(&obs, sim.time())?;
            let changed = action != sim.signal(ix).active;
            switches.push(SwitchRecord {
                t: sim.time(),
                intersection: net.intersections[ix].id.clone(),
                action,
                changed,
                observation: obs,
            });
            sim.apply_action(ix, action)?;
        }
        let report = sim.step();
        tick_queue.push(report.queued);
    }

    // Spawns scheduled past the horizon never participate in the episode
    // and would skew truncation-based travel times, so they are dropped.
    let vehicles: Vec<VehicleRecord> = sim
        .vehicles()
        .iter()
        .filter(|v| v.sched < cfg.episode_len)
        .map(|v| VehicleRecord {
            id: v.id,
            sched: v.sched,
            entered: v.entered,
            finished: v.finished,
            wait: v.wait,
        })
        .collect();
    let scheduled = vehicles.len() as u64;

    let intersection_wait = (0..n)
        .map(|ix| IntersectionWaitRecord {
            intersection: net.intersections[ix].id.clone(),
            wait_ticks: sim.intersection_wait()[ix],
            queuers: sim.intersection_queuers()[ix].len() as u64,
        })
        .collect();

    Ok(EpisodeLog {
        meta: EpisodeMeta {
            controller: controller.name().to_string(),
            deterministic: controller.is_deterministic(),
            seed: cfg.seed,
            episode_len: cfg.episode_len,
            intersections: net.intersections.iter().map(|i| i.id.clone()).collect(),
            scheduled,
        },
        tick_queue,
        switches,
        vehicles,
        intersection_wait,
    })
}

/// Builds TD transitions from consecutive switch records of each
/// intersection. The reward for acting at switch k is the negative queued
/// total seen at switch k+1; the pair ending at an intersection's final
/// switch is marked terminal so the learner does not bootstrap past the
/// end of the data.
pub fn transitions_from_log(log: &EpisodeLog) -> Vec<Transition<f64>> {
    let mut by_ix: BTreeMap<&str, Vec<&SwitchRecord>> = BTreeMap::new();
    for s in &log.switches {
        by_ix.entry(s.intersection.as_str()).or_default().push(s);
    }
    let mut out = Vec::new();
    for (_, recs) in by_ix {
        for k in 0..recs.len().saturating_sub(1) {
            let cur = recs[k];
            let next = recs[k + 1];
            out.push(Transition {
                o: featurize(&cur.observation),
                a: cur.action.index(),
                r: -(next.observation.queued_total() as f64),
                o_next: featurize(&next.observation),
                terminal: k + 2 == recs.len(),
            });
        }
    }
    out
}
