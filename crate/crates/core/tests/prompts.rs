//! Frozen prompts. Set `NREP_BLESS=1` to rewrite the goldens after an
//! intended prompt change (and regenerate the replay fixture).

mod support;

use nrep_core::catalog::{apply_filter, FilterLevel};
use nrep_core::generation::{build_generation_prompt, FewShotExample};
use nrep_core::linking::{build_linking_prompt, parse_linking_response, LinkingFewShots, LinkingPrediction, DEFAULT_SYSTEM_PROMPT};
use nrep_core::llm::ChatMessage;
use nrep_core::representation::{render, RepresentationFormat};
use support::{golden, manifest_dir, toy_catalog};

fn check(name: &str, messages: &[ChatMessage]) {
    let text = serde_json::to_string_pretty(messages).unwrap() + "\n";
    if std::env::var_os("NREP_BLESS").is_some() {
        std::fs::write(manifest_dir().join("tests/golden").join(name), &text).unwrap();
    }
    assert_eq!(text, golden(name), "{name} drifted");
}

#[test]
fn linking_prompt_with_hint() {
    let schema = render(&toy_catalog(), RepresentationFormat::MSchema);
    let messages = build_linking_prompt(
        DEFAULT_SYSTEM_PROMPT,
        &schema,
        "How many orders were placed in May 2023?",
        Some("May 2023 refers to order_date LIKE '2023-05%'"),
        &LinkingFewShots::default(),
    );
    assert_eq!(messages.len(), 8);
    check("prompt.linking.json", &messages);
}

#[test]
fn generation_prompt_with_fewshot() {
    let cat = toy_catalog();
    let pred = parse_linking_response(&golden("linker_output.txt")).unwrap();
    let schema = render(&apply_filter(&cat, &pred, FilterLevel::FullFiltering), RepresentationFormat::MacSchema);
    let example = FewShotExample {
        question: "How many products are there?".into(),
        schema_text: render(
            &apply_filter(&cat, &LinkingPrediction::from_pairs([("products".to_string(), vec![])]), FilterLevel::TableOnly),
            RepresentationFormat::MacSchema,
        ),
        sql: "SELECT COUNT(*) FROM products".into(),
        source_db: "toy".into(),
    };
    let messages = build_generation_prompt(&schema, "Which users placed an order in June 2023?", None, &[example]);
    assert_eq!(messages.len(), 4);
    check("prompt.generation.json", &messages);
}
