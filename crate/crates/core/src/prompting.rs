//! Rendering observations into decision prompts and parsing choices back.
//!
//! The prompt is plain text with a fixed scaffold: a scene description, a
//! state listing (one block per signal phase, printed in the order ETWT,
//! NTST, ELWL, NLSL), the question, a commonsense note, and the answer-format
//! requirements. The responder is expected to reason in free text and commit
//! to exactly one phase inside a `<signal>...</signal>` tag; parsing takes
//! the last such tag, case-insensitively.

use crate::netmodel::{Compass, Movement, PhaseId};
use crate::observe::IntersectionObservation;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("observation has {got} segments per lane, template describes {want}")]
    SegmentMismatch { got: usize, want: usize },
}

/// Order in which the four signal blocks are printed. Differs from the
/// canonical enum order: through phases are listed before left-turn phases.
pub const PROMPT_BLOCK_ORDER: [PhaseId; 4] = [PhaseId::Etwt, PhaseId::Ntst, PhaseId::Elwl, PhaseId::Nlsl];

/// Editable prompt sections. The defaults reproduce the standard template;
/// swapping any of them changes the prompt everywhere it is rendered.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptSections {
    /// Scenario description: geometry, lanes, segments, vehicle classes.
    pub scene: String,
    /// What the signal phases are and what the state listing contains.
    pub action_space: String,
    /// The question asked under "Please answer:".
    pub task: String,
    /// Domain guidance under "Note:".
    pub knowledge: String,
    /// Segments per lane the prose above describes.
    pub segments: usize,
}

impl Default for PromptSections {
    fn default() -> Self {
        PromptSections {
            scene: "A traffic light regulates a four-section intersection with northern, southern, \
                    eastern, and western sections, each containing two lanes: one for through traffic \
                    and one for left-turns. Each lane is further divided into three segments. Segment 1 \
                    is the closest to the intersection. Segment 2 is in the middle. Segment 3 is the \
                    farthest. In a lane, there may be early queued vehicles and approaching vehicles \
                    traveling in different segments. Early queued vehicles have arrived at the \
                    intersection and await passage permission. Approaching vehicles will arrive at the \
                    intersection in the future."
                .into(),
            action_space: "The traffic light has 4 signal phases. Each signal relieves vehicles' flow \
                    in the group of two specific lanes. The state of the intersection is listed below. \
                    It describes:\n\
                    - The group of lanes relieving vehicles' flow under each traffic light phase.\n\
                    - The number of early queued vehicles of the allowed lanes of each signal.\n\
                    - The number of approaching vehicles in different segments of the allowed lanes of \
                    each signal."
                .into(),
            task: "Which is the most effective traffic signal that will most significantly improve the \
                    traffic condition during the next phase?"
                .into(),
            knowledge: "The traffic congestion is primarily dictated by the early queued vehicles, with \
                    the MOST significant impact. You MUST pay the MOST attention to lanes with long \
                    queue lengths. It is NOT URGENT to consider vehicles in distant segments since they \
                    are unlikely to reach the intersection soon."
                .into(),
            segments: 3,
        }
    }
}

const REQUIREMENTS: &str = "Requirements:\n\
    - Let's think step by step.\n\
    - You can only choose one of the signals listed above.\n\
    - You must follow the following steps to provide your analysis: Step 1: Provide your analysis for \
    identifying the optimal traffic signal. Step 2: Answer your chosen signal.\n\
    - Your choice can only be given after finishing the analysis.\n\
    - Your choice must be identified by the tag: <signal>YOUR_CHOICE</signal>.";

/// A rendered prompt, tagged with where and when it was taken.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptText {
    pub intersection: String,
    pub t: u64,
    pub text: String,
}

fn approach_adjective(c: Compass) -> &'static str {
    match c {
        Compass::North => "Northern",
        Compass::South => "southern",
        Compass::East => "Eastern",
        Compass::West => "western",
    }
}

fn movement_noun(m: Movement) -> &'static str {
    match m {
        Movement::Through => "through",
        Movement::Left => "left-turn",
        Movement::Right => "right-turn",
    }
}

/// "Eastern and western through lanes", etc.
pub fn allowed_lanes_text(phase: PhaseId) -> String {
    let [(a, m), (b, _)] = phase.movements();
    format!(
        "{} and {} {} lanes",
        approach_adjective(a),
        approach_adjective(b).to_ascii_lowercase(),
        movement_noun(m)
    )
}

/// Renders the full decision prompt for one observation.
pub fn render_prompt(obs: &IntersectionObservation, sections: &PromptSections) -> Result<PromptText, PromptError> {
    let got = obs.segment_count();
    if got != sections.segments {
        return Err(PromptError::SegmentMismatch {
            got,
            want: sections.segments,
        });
    }
    let mut blocks = String::new();
    for phase_id in PROMPT_BLOCK_ORDER {
        let phase = obs.phase(phase_id);
        let [first, second] = &phase.lanes;
        blocks.push_str(&format!("Signal: {}\n", phase_id.name()));
        blocks.push_str(&format!("Allowed lanes: {}\n", allowed_lanes_text(phase_id)));
        blocks.push_str(&format!(
            "- Early queued: {} ({}), {} ({}), {} (Total)\n",
            first.queued,
            first.approach.label(),
            second.queued,
            second.approach.label(),
            phase.queued_total()
        ));
        for seg in 1..=sections.segments {
            blocks.push_str(&format!(
                "- Segment {}: {} ({}), {} ({}), {} (Total)\n",
                seg,
                first.approaching[seg - 1],
                first.approach.label(),
                second.approaching[seg - 1],
                second.approach.label(),
                phase.segment_total(seg)
            ));
        }
    }
    let text = format!(
        "{}\n\n{}\n\n{}\nPlease answer:\n{}\n\nNote:\n{}\n\n{}",
        sections.scene,
        sections.action_space,
        blocks, // ends with '\n', giving the blank line before "Please answer:"
        sections.task,
        sections.knowledge,
        REQUIREMENTS
    );
    Ok(PromptText {
        intersection: obs.intersection.clone(),
        t: obs.t,
        text,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParseStatus {
    /// A valid phase was extracted.
    Ok,
    /// No usable tag; the caller should fall back to another policy.
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedDecision {
    /// The chosen phase, unset when parsing fell through.
    pub phase: Option<PhaseId>,
    /// The full response text, kept as the reasoning trajectory.
    pub reasoning: String,
    pub status: ParseStatus,
}

/// Extracts the decision from a response: the last `<signal>...</signal>`
/// span, matched case-insensitively and trimmed. Anything else (missing tag,
/// unknown phase name) yields `Fallback` with the phase unset.
pub fn parse_decision(response: &str) -> ParsedDecision {
    let phase = last_tag_span(response).and_then(|s| s.trim().parse::<PhaseId>().ok());
    ParsedDecision {
        phase,
        reasoning: response.to_string(),
        status: if phase.is_some() { ParseStatus::Ok } else { ParseStatus::Fallback },
    }
}

fn last_tag_span(text: &str) -> Option<&str> {
    // ASCII lowercasing preserves byte offsets.
    let lower = text.to_ascii_lowercase();
    let close = lower.rfind("</signal>")?;
    let open = lower[..close].rfind("<signal>")?;
    Some(&text[open + "<signal>".len()..close])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::observe::{LaneObservation, PhaseObservation};

    /// Observation with per-phase queued counts and zero approaching traffic.
    fn obs_with_queues(queues: [u32; 4]) -> IntersectionObservation {
        let phases = PhaseId::ALL.map(|id| {
            let [(a, _), (b, _)] = id.movements();
            let mk = |approach: Compass, queued: u32| LaneObservation {
                lane: format!("lane_{}_{}", id.name(), approach.label()),
                approach,
                queued,
                approaching: vec![0, 0, 0],
                downstream_queued: 0,
            };
            PhaseObservation {
                phase: id,
                lanes: [mk(a, queues[id.index()]), mk(b, 0)],
            }
        });
        IntersectionObservation {
            intersection: "intersection_1_1".into(),
            t: 0,
            phases,
        }
    }

    #[test]
    fn rendering_is_deterministic_and_contains_all_blocks() {
        let obs = obs_with_queues([5, 0, 2, 7]);
        let sections = PromptSections::default();
        let a = render_prompt(&obs, &sections).unwrap();
        let b = render_prompt(&obs, &sections).unwrap();
        assert_eq!(a, b);
        for phase in PhaseId::ALL {
            assert!(a.text.contains(&format!("Signal: {phase}")));
            assert!(a.text.contains(&allowed_lanes_text(phase)));
        }
        assert!(a.text.contains("Requirements:"));
        assert!(a.text.contains("<signal>YOUR_CHOICE</signal>."));
        assert!(a.text.ends_with("</signal>."));
        // Blocks appear in the display order, through phases first.
        let positions: Vec<usize> = PROMPT_BLOCK_ORDER
            .iter()
            .map(|p| a.text.find(&format!("Signal: {p}")).unwrap())
            .collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn zero_observation_renders_zero_counts() {
        let obs = obs_with_queues([0, 0, 0, 0]);
        let text = render_prompt(&obs, &PromptSections::default()).unwrap().text;
        assert!(text.contains("- Early queued: 0 (East), 0 (West), 0 (Total)"));
        assert!(text.contains("- Segment 3: 0 (North), 0 (South), 0 (Total)"));
    }

    #[test]
    fn queue_counts_land_in_their_phase_block() {
        let obs = obs_with_queues([5, 0, 2, 7]);
        let text = render_prompt(&obs, &PromptSections::default()).unwrap().text;
        assert!(text.contains("- Early queued: 5 (East), 0 (West), 5 (Total)"));
        assert!(text.contains("- Early queued: 2 (North), 0 (South), 2 (Total)"));
        assert!(text.contains("- Early queued: 7 (North), 0 (South), 7 (Total)"));
    }

    #[test]
    fn segment_mismatch_is_rejected() {
        let mut obs = obs_with_queues([0, 0, 0, 0]);
        for phase in obs.phases.iter_mut() {
            for lane in phase.lanes.iter_mut() {
                lane.approaching = vec![0, 0, 0, 0];
            }
        }
        assert_eq!(
            render_prompt(&obs, &PromptSections::default()),
            Err(PromptError::SegmentMismatch { got: 4, want: 3 })
        );
    }

    #[test]
    fn differing_observations_render_differently() {
        let base = obs_with_queues([1, 2, 3, 4]);
        let sections = PromptSections::default();
        let base_text = render_prompt(&base, &sections).unwrap().text;
        for i in 0..4 {
            let mut queues = [1, 2, 3, 4];
            queues[i] += 1;
            let other = render_prompt(&obs_with_queues(queues), &sections).unwrap().text;
            assert_ne!(base_text, other);
        }
    }

    #[test]
    fn parses_every_phase_round_trip() {
        for phase in PhaseId::ALL {
            let response = format!("Step 1: reasoning.\nStep 2: <signal>{phase}</signal>");
            let parsed = parse_decision(&response);
            assert_eq!(parsed.status, ParseStatus::Ok);
            assert_eq!(parsed.phase, Some(phase));
            assert_eq!(parsed.reasoning, response);
        }
    }

    #[test]
    fn last_tag_wins() {
        let parsed = parse_decision("first <signal>ETWT</signal>, revised: <signal>NLSL</signal>");
        assert_eq!(parsed.phase, Some(PhaseId::Nlsl));
    }

    #[test]
    fn tag_matching_is_case_insensitive_and_trimmed() {
        let parsed = parse_decision("<SIGNAL>  etwt </SIGNAL>");
        assert_eq!(parsed.phase, Some(PhaseId::Etwt));
    }

    #[test]
    fn missing_or_bad_tags_fall_back() {
        for response in [
            "no tag at all",
            "<signal>unterminated",
            "</signal> only close <signal>",
            "<signal>FOOBAR</signal>",
            "",
        ] {
            let parsed = parse_decision(response);
            assert_eq!(parsed.status, ParseStatus::Fallback, "{response:?}");
            assert_eq!(parsed.phase, None);
        }
    }
}
