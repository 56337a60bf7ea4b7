//! Configuration loading and flag merging.
//!
//! Every run is described by an optional JSON config file plus flat command
//! line flags; flags win over file values, file values win over defaults.
//! The fully merged result is written back into the output directory as
//! `config.json` so any run can be reproduced from its artifacts alone.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use tsc_core::agents::{
    Controller, CriticPolicy, FixedTimeController, GreedyController, MaxPressureController,
    RandomController,
};
use tsc_core::critic::CriticNet;
use tsc_core::llmclient::{
    BackendConfig, BackendError, ChatBackend, HttpBackend, StubBackend, TranscriptReplay,
};
use tsc_core::netmodel::cityflow::{load_flow, load_roadnet};
use tsc_core::netmodel::{synth_flow, synth_grid, FlowSpec, PhaseId, RoadNetwork, SynthFlowCfg};
use tsc_core::simcore::SimConfig;

use crate::CliError;

/// Optional values as they appear in a config file. Field names match the
/// command line flags with `-` replaced by `_`.
#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub roadnet: Option<PathBuf>,
    pub synthetic: Option<String>,
    pub flow: Option<PathBuf>,
    pub rate: Option<f64>,
    pub flow_duration: Option<u64>,
    pub flow_seed: Option<u64>,
    pub controller: Option<String>,
    pub order: Option<String>,
    pub critic_weights: Option<PathBuf>,
    pub backend: Option<PathBuf>,
    pub episode_len: Option<u64>,
    pub seed: Option<u64>,
    pub green_s: Option<u64>,
    pub yellow_s: Option<u64>,
    pub all_red_s: Option<u64>,
    pub initial_phase: Option<String>,
    pub out: Option<PathBuf>,
    pub k: Option<usize>,
    pub per_intersection: Option<bool>,
    pub episodes: Option<Vec<PathBuf>>,
    pub records: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    pub batches: Option<PathBuf>,
    pub lr: Option<f64>,
    pub gamma: Option<f64>,
    pub steps: Option<usize>,
    pub capacity: Option<usize>,
    pub sample_size: Option<usize>,
    pub target_sync: Option<usize>,
    pub divergence_threshold: Option<f64>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<FileConfig, CliError> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("config file {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("config file {}: {e}", path.display())))
    }
}

/// Network source after merging: a roadnet file or a synthetic RxC grid.
#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "snake_case", tag = "source")]
pub enum NetSource {
    File { roadnet: PathBuf },
    Synthetic { rows: usize, cols: usize, road_len: f64 },
}

/// Demand source after merging: a flow file or seeded synthetic arrivals.
#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "snake_case", tag = "source")]
pub enum FlowSource {
    File { flow: PathBuf },
    Synthetic { rate: f64, duration: u64, seed: u64 },
}

pub fn resolve_net_source(
    roadnet: Option<PathBuf>,
    synthetic: Option<String>,
) -> Result<NetSource, CliError> {
    match (roadnet, synthetic) {
        (Some(_), Some(_)) => Err(CliError::Config(
            "give either --roadnet or --synthetic, not both".into(),
        )),
        (None, None) => Err(CliError::Config(
            "a network is required: --roadnet FILE or --synthetic RxC".into(),
        )),
        (Some(p), None) => {
            if !p.exists() {
                return Err(CliError::Config(format!(
                    "roadnet file {} does not exist",
                    p.display()
                )));
            }
            Ok(NetSource::File { roadnet: p })
        }
        (None, Some(spec)) => {
            let (grid, road_len) = match spec.split_once(':') {
                Some((g, len)) => {
                    let len: f64 = len.parse().map_err(|_| {
                        CliError::Config(format!("bad road length in --synthetic {spec:?}"))
                    })?;
                    (g.to_string(), len)
                }
                None => (spec.clone(), 300.0),
            };
            let (rows, cols) = grid
                .split_once(['x', 'X'])
                .and_then(|(r, c)| Some((r.parse().ok()?, c.parse().ok()?)))
                .ok_or_else(|| {
                    CliError::Config(format!(
                        "bad --synthetic {spec:?}; expected RxC like 2x3 or 2x3:400"
                    ))
                })?;
            if rows == 0 || cols == 0 {
                return Err(CliError::Config("synthetic grid needs rows, cols >= 1".into()));
            }
            Ok(NetSource::Synthetic { rows, cols, road_len })
        }
    }
}

pub fn resolve_flow_source(
    flow: Option<PathBuf>,
    rate: Option<f64>,
    duration: Option<u64>,
    flow_seed: Option<u64>,
    episode_len: u64,
) -> Result<FlowSource, CliError> {
    match (flow, rate) {
        (Some(_), Some(_)) => Err(CliError::Config(
            "give either --flow or --rate (synthetic demand), not both".into(),
        )),
        (None, None) => Err(CliError::Config(
            "a demand is required: --flow FILE or --rate R".into(),
        )),
        (Some(p), None) => {
            if !p.exists() {
                return Err(CliError::Config(format!(
                    "flow file {} does not exist",
                    p.display()
                )));
            }
            Ok(FlowSource::File { flow: p })
        }
        (None, Some(rate)) => {
            if !(rate > 0.0 && rate <= 1.0) {
                return Err(CliError::Config(format!(
                    "--rate must be a per-second probability in (0, 1], got {rate}"
                )));
            }
            Ok(FlowSource::Synthetic {
                rate,
                duration: duration.unwrap_or(episode_len),
                seed: flow_seed.unwrap_or(1),
            })
        }
    }
}

pub fn build_network(source: &NetSource) -> Result<RoadNetwork, CliError> {
    match source {
        NetSource::File { roadnet } => {
            load_roadnet(roadnet).map_err(|e| CliError::Config(format!("roadnet: {e}")))
        }
        NetSource::Synthetic { rows, cols, road_len } => synth_grid(*rows, *cols, *road_len)
            .map_err(|e| CliError::Config(format!("synthetic grid: {e}"))),
    }
}

pub fn build_flow(source: &FlowSource, net: &RoadNetwork) -> Result<FlowSpec, CliError> {
    match source {
        FlowSource::File { flow } => {
            let spec = load_flow(flow).map_err(|e| CliError::Config(format!("flow: {e}")))?;
            spec.validate(net)
                .map_err(|e| CliError::Config(format!("flow: {e}")))?;
            Ok(spec)
        }
        FlowSource::Synthetic { rate, duration, seed } => synth_flow(
            net,
            &SynthFlowCfg {
                duration: *duration,
                seed: *seed,
                rate: *rate,
                ..Default::default()
            },
        )
        .map_err(|e| CliError::Config(format!("synthetic flow: {e}"))),
    }
}

pub fn parse_phase(name: &str) -> Result<PhaseId, CliError> {
    PhaseId::from_str(name)
        .map_err(|_| CliError::Config(format!("unknown phase {name:?}; use ETWT/ELWL/NTST/NLSL")))
}

pub fn parse_order(order: &str) -> Result<Vec<PhaseId>, CliError> {
    order.split(',').map(|p| parse_phase(p.trim())).collect()
}

/// Simulation timing overrides merged into a [`SimConfig`].
#[allow(clippy::too_many_arguments)]
pub fn merged_sim_config(
    episode_len: u64,
    seed: u64,
    green_s: Option<u64>,
    yellow_s: Option<u64>,
    all_red_s: Option<u64>,
    initial_phase: Option<&str>,
) -> Result<SimConfig, CliError> {
    let mut cfg = SimConfig {
        episode_len,
        seed,
        ..Default::default()
    };
    if let Some(g) = green_s {
        if g == 0 {
            return Err(CliError::Config("--green-s must be >= 1".into()));
        }
        cfg.green_s = g;
    }
    if let Some(y) = yellow_s {
        cfg.yellow_s = y;
    }
    if let Some(a) = all_red_s {
        cfg.all_red_s = a;
    }
    if let Some(p) = initial_phase {
        cfg.initial_phase = parse_phase(p)?;
    }
    Ok(cfg)
}

/// Backend selection file: `{"kind": "...", ...}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum BackendSpec {
    Http {
        #[serde(flatten)]
        config: BackendConfig,
    },
    /// Replies with a worked-out comparison of the queue counts in the
    /// prompt; deterministic and network-free.
    StubGreedy,
    /// Cycles through the given responses.
    StubRoundRobin { responses: Vec<String> },
    /// Responses keyed by prompt hash.
    StubCanned { responses: BTreeMap<String, String> },
    /// Replays a recorded transcript, keyed by prompt hash.
    Replay { transcript: PathBuf },
}

pub fn load_backend_spec(path: &Path) -> Result<BackendSpec, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("backend file {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("backend file {}: {e}", path.display())))
}

pub fn build_backend(spec: &BackendSpec) -> Result<Box<dyn ChatBackend>, CliError> {
    match spec {
        BackendSpec::Http { config } => {
            let backend = HttpBackend::new(config.clone()).map_err(|e| match e {
                BackendError::InvalidRequest(_) => CliError::Config(e.to_string()),
                other => CliError::Backend(other.to_string()),
            })?;
            Ok(Box::new(backend))
        }
        BackendSpec::StubGreedy => Ok(Box::new(StubBackend::greedy())),
        BackendSpec::StubRoundRobin { responses } => {
            if responses.is_empty() {
                return Err(CliError::Config("stub-round-robin needs responses".into()));
            }
            Ok(Box::new(StubBackend::round_robin(responses.clone())))
        }
        BackendSpec::StubCanned { responses } => {
            Ok(Box::new(StubBackend::canned(responses.clone())))
        }
        BackendSpec::Replay { transcript } => {
            let replay = TranscriptReplay::from_path(transcript)
                .map_err(|e| CliError::Config(format!("transcript {}: {e}", transcript.display())))?;
            Ok(Box::new(replay))
        }
    }
}

/// Controllers that need no backend. `llm` is built separately because the
/// run needs access to the records it accumulates.
pub fn build_plain_controller(
    kind: &str,
    order: Option<&str>,
    critic_weights: Option<&Path>,
    seed: u64,
) -> Result<Box<dyn Controller>, CliError> {
    match kind {
        "random" => Ok(Box::new(RandomController::new(seed))),
        "fixedtime" => {
            let ctl = match order {
                Some(o) => FixedTimeController::new(parse_order(o)?)
                    .map_err(|e| CliError::Config(e.to_string()))?,
                None => FixedTimeController::canonical(),
            };
            Ok(Box::new(ctl))
        }
        "maxpressure" => Ok(Box::new(MaxPressureController)),
        "greedy" => Ok(Box::new(GreedyController)),
        "critic" => {
            let path = critic_weights.ok_or_else(|| {
                CliError::Config("--critic-weights is required with --controller critic".into())
            })?;
            let file = fs::File::open(path)
                .map_err(|e| CliError::Config(format!("critic weights {}: {e}", path.display())))?;
            let net = CriticNet::<f64>::load(file)
                .map_err(|e| CliError::Config(format!("critic weights {}: {e}", path.display())))?;
            Ok(Box::new(CriticPolicy::new(net)))
        }
        "llm" => Err(CliError::Config(
            "llm controller is handled by the caller".into(),
        )),
        other => Err(CliError::Config(format!(
            "unknown controller {other:?}; use random|fixedtime|maxpressure|greedy|critic|llm"
        ))),
    }
}

/// Writes the resolved snapshot for a command into `out/config.json`.
pub fn write_snapshot<T: Serialize>(out_dir: &Path, snapshot: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(snapshot)
        .map_err(|e| CliError::Io(format!("config snapshot: {e}")))?;
    fs::write(out_dir.join("config.json"), text + "\n")
        .map_err(|e| CliError::Io(format!("config snapshot: {e}")))
}
