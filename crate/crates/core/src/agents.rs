//! The Controller contract and every policy implementation: random,
//! fixed-time cycling, max-pressure, the greedy queue heuristic, the
//! critic-argmax policy, and the LLM agent with its greedy fallback.
//!
//! Controllers are pure functions of (observation, t, seed): any internal
//! randomness is seeded per intersection, so decisions for one intersection
//! never depend on how many others are being served.

use crate::critic::{featurize, CriticNet};
use crate::finetune::ReasoningRecord;
use crate::llmclient::ChatBackend;
use crate::netmodel::PhaseId;
use crate::observe::IntersectionObservation;
use crate::prompting::{parse_decision, render_prompt, PromptError, PromptSections};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error("phase order {0:?} is not a permutation of the four phases")]
    InvalidOrder(Vec<PhaseId>),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("critic: {0}")]
    Critic(#[from] crate::critic::CriticError),
}

/// A signal-control policy. One decision is requested per switch-ready
/// intersection; the returned phase is applied for the next green.
pub trait Controller {
    fn name(&self) -> &str;

    /// Whether decisions are a pure function of (obs, t, seed).
    fn is_deterministic(&self) -> bool;

    fn decide(&mut self, obs: &IntersectionObservation, t: u64) -> Result<PhaseId, ControllerError>;
}

/// First phase attaining the maximum of `score` in canonical order.
fn argmax_canonical<S: PartialOrd + Copy>(score: impl Fn(PhaseId) -> S) -> PhaseId {
    let mut best = PhaseId::Etwt;
    let mut best_score = score(best);
    for phase in &PhaseId::ALL[1..] {
        let s = score(*phase);
        if s > best_score {
            best = *phase;
            best_score = s;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Random.

/// Uniform random phase choice, seeded independently per intersection so that
/// concurrent service order cannot change any decision stream.
pub struct RandomController {
    seed: u64,
    rngs: BTreeMap<String, ChaCha8Rng>,
}

impl RandomController {
    pub fn new(seed: u64) -> RandomController {
        RandomController {
            seed,
            rngs: BTreeMap::new(),
        }
    }

    fn rng_for(&mut self, intersection: &str) -> &mut ChaCha8Rng {
        let seed = self.seed;
        self.rngs.entry(intersection.to_string()).or_insert_with(|| {
            let digest = Sha256::digest(intersection.as_bytes());
            let stream = u64::from_le_bytes(digest[..8].try_into().unwrap());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream);
            rng
        })
    }
}

impl Controller for RandomController {
    fn name(&self) -> &str {
        "random"
    }

    fn is_deterministic(&self) -> bool {
        false
    }

    fn decide(&mut self, obs: &IntersectionObservation, _t: u64) -> Result<PhaseId, ControllerError> {
        let rng = self.rng_for(&obs.intersection);
        Ok(PhaseId::from_index(rng.gen_range(0..4)).unwrap())
    }
}

// ---------------------------------------------------------------------------
// Fixed-time.

/// Cycles through a fixed phase order, one green per decision, with an
/// independent cursor per intersection.
pub struct FixedTimeController {
    order: [PhaseId; 4],
    cursors: BTreeMap<String, usize>,
}

impl FixedTimeController {
    /// `order` must be a permutation of the four phases.
    pub fn new(order: Vec<PhaseId>) -> Result<FixedTimeController, ControllerError> {
        let mut seen = [false; 4];
        for p in &order {
            seen[p.index()] = true;
        }
        if order.len() != 4 || seen != [true; 4] {
            return Err(ControllerError::InvalidOrder(order));
        }
        Ok(FixedTimeController {
            order: [order[0], order[1], order[2], order[3]],
            cursors: BTreeMap::new(),
        })
    }

    /// The canonical cycle ETWT → ELWL → NTST → NLSL.
    pub fn canonical() -> FixedTimeController {
        Self::new(PhaseId::ALL.to_vec()).unwrap()
    }
}

impl Controller for FixedTimeController {
    fn name(&self) -> &str {
        "fixedtime"
    }

    fn is_deterministic(&self) -> bool {
        true
    }

    fn decide(&mut self, obs: &IntersectionObservation, _t: u64) -> Result<PhaseId, ControllerError> {
        let cursor = self.cursors.entry(obs.intersection.clone()).or_insert(0);
        let phase = self.order[*cursor % 4];
        *cursor += 1;
        Ok(phase)
    }
}

// ---------------------------------------------------------------------------
// Max-pressure.

/// Per-phase pressure: for each released lane, queued vehicles minus the
/// queue on its downstream road (0 at network boundaries).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PressureTable(pub [i64; 4]);

impl PressureTable {
    pub fn of(obs: &IntersectionObservation) -> PressureTable {
        let mut table = [0i64; 4];
        for phase in &obs.phases {
            let pressure: i64 = phase
                .lanes
                .iter()
                .map(|l| i64::from(l.queued) - i64::from(l.downstream_queued))
                .sum();
            table[phase.phase.index()] = pressure;
        }
        PressureTable(table)
    }

    pub fn get(&self, phase: PhaseId) -> i64 {
        self.0[phase.index()]
    }
}

/// Greedily releases the highest-pressure phase; ties fall to the earliest
/// phase in canonical order.
pub struct MaxPressureController;

impl Controller for MaxPressureController {
    fn name(&self) -> &str {
        "maxpressure"
    }

    fn is_deterministic(&self) -> bool {
        true
    }

    fn decide(&mut self, obs: &IntersectionObservation, _t: u64) -> Result<PhaseId, ControllerError> {
        let table = PressureTable::of(obs);
        Ok(argmax_canonical(|p| table.get(p)))
    }
}

// ---------------------------------------------------------------------------
// Greedy queue heuristic.

/// Releases the phase with the most early-queued vehicles. Doubles as the
/// LLM agent's fallback and as the canned-reasoning source that keeps the
/// full prompt→completion→parse loop testable offline.
pub struct GreedyController;

/// A short reasoning text justifying `choice` by queue comparison, ending in
/// the machine-readable tag.
pub fn compose_greedy_reasoning(obs: &IntersectionObservation, choice: PhaseId) -> String {
    let listing: Vec<String> = PhaseId::ALL
        .iter()
        .map(|p| format!("signal {} has {} early queued vehicles", p, obs.phase(*p).queued_total()))
        .collect();
    format!(
        "Step 1: Comparing early queues, {}. The allowed lanes of signal {} demonstrate the heaviest \
         congestion, so releasing them improves the traffic condition most significantly.\n\
         Step 2: <signal>{}</signal>",
        listing.join(", "),
        choice,
        choice
    )
}

impl GreedyController {
    pub fn choose(obs: &IntersectionObservation) -> PhaseId {
        argmax_canonical(|p| obs.phase(p).queued_total())
    }
}

impl Controller for GreedyController {
    fn name(&self) -> &str {
        "greedy"
    }

    fn is_deterministic(&self) -> bool {
        true
    }

    fn decide(&mut self, obs: &IntersectionObservation, _t: u64) -> Result<PhaseId, ControllerError> {
        Ok(Self::choose(obs))
    }
}

// ---------------------------------------------------------------------------
// Critic-argmax policy.

/// Plays the argmax of a trained action-value network; ties fall to the
/// canonical order.
pub struct CriticPolicy {
    net: CriticNet<f64>,
}

impl CriticPolicy {
    pub fn new(net: CriticNet<f64>) -> CriticPolicy {
        CriticPolicy { net }
    }
}

impl Controller for CriticPolicy {
    fn name(&self) -> &str {
        "critic"
    }

    fn is_deterministic(&self) -> bool {
        true
    }

    fn decide(&mut self, obs: &IntersectionObservation, _t: u64) -> Result<PhaseId, ControllerError> {
        let q = self.net.forward(&featurize(obs))?;
        Ok(argmax_canonical(|p| q[p.index()]))
    }
}

// ---------------------------------------------------------------------------
// LLM agent.

/// Renders the prompt, asks the backend, parses the tagged choice. On a
/// missing/invalid tag or a transport failure that survives the client's
/// retries, the greedy heuristic decides instead and the raw response is
/// logged. Every decision leaves a [`ReasoningRecord`] whose reasoning text
/// parses back to the recorded action.
pub struct LlmAgent<B: ChatBackend> {
    backend: B,
    sections: PromptSections,
    fallback: GreedyController,
    records: Vec<ReasoningRecord>,
    fallback_count: usize,
}

impl<B: ChatBackend> LlmAgent<B> {
    pub fn new(backend: B, sections: PromptSections) -> LlmAgent<B> {
        LlmAgent {
            backend,
            sections,
            fallback: GreedyController,
            records: Vec::new(),
            fallback_count: 0,
        }
    }

    /// Records accumulated so far, draining the internal buffer.
    pub fn take_records(&mut self) -> Vec<ReasoningRecord> {
        std::mem::take(&mut self.records)
    }

    pub fn fallback_count(&self) -> usize {
        self.fallback_count
    }

    pub fn backend(&self) -> &B {
        &self.backend
    }

    /// Consumes the agent, releasing the backend (and with it anything it
    /// buffered, e.g. a transcript recorder's sink).
    pub fn into_backend(self) -> B {
        self.backend
    }
}

impl<B: ChatBackend> Controller for LlmAgent<B> {
    fn name(&self) -> &str {
        "llm"
    }

    fn is_deterministic(&self) -> bool {
        false
    }

    fn decide(&mut self, obs: &IntersectionObservation, t: u64) -> Result<PhaseId, ControllerError> {
        let prompt = render_prompt(obs, &self.sections)?;
        let features: Vec<f64> = featurize(obs);
        match self.backend.complete(&prompt) {
            Ok(raw) => {
                let parsed = parse_decision(&raw);
                if let Some(phase) = parsed.phase {
                    self.records.push(ReasoningRecord {
                        t,
                        prompt,
                        reasoning: raw,
                        action: phase,
                        features,
                        source: self.backend.name().to_string(),
                    });
                    return Ok(phase);
                }
                log::warn!("unparseable completion at {} t={t}; falling back: {raw:?}", obs.intersection);
            }
            Err(e) => {
                log::warn!("backend failure at {} t={t}; falling back: {e}", obs.intersection);
            }
        }
        self.fallback_count += 1;
        let phase = self.fallback.decide(obs, t)?;
        self.records.push(ReasoningRecord {
            t,
            prompt,
            reasoning: compose_greedy_reasoning(obs, phase),
            action: phase,
            features,
            source: format!("fallback-{}", self.fallback.name()),
        });
        Ok(phase)
    }
}
