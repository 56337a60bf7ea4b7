//! The prompt renderer against a frozen fixture: any wording or layout
//! change in the default template must be deliberate and show up here.

use tsc_core::observe::IntersectionObservation;
use tsc_core::prompting::{render_prompt, PromptSections};

fn golden_observation() -> IntersectionObservation {
    serde_json::from_str(include_str!("fixtures/golden_observation.json")).unwrap()
}

fn golden_text() -> &'static str {
    let raw = include_str!("fixtures/golden_prompt.txt");
    // The fixture file is newline-terminated; the rendered prompt is not.
    raw.strip_suffix('\n').unwrap_or(raw)
}

#[test]
fn golden_prompt_matches_byte_for_byte() {
    let obs = golden_observation();
    let prompt = render_prompt(&obs, &PromptSections::default()).unwrap();
    assert_eq!(prompt.intersection, "intersection_1_1");
    assert_eq!(prompt.t, 360);
    assert_eq!(prompt.text, golden_text());
}

#[test]
fn golden_prompt_is_stable_across_renders() {
    let obs = golden_observation();
    let sections = PromptSections::default();
    let a = render_prompt(&obs, &sections).unwrap();
    let b = render_prompt(&obs, &sections).unwrap();
    assert_eq!(a.text, b.text);
}
