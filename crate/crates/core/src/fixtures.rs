//! Embedded default assets and small reference fixtures.

use std::collections::{BTreeMap, HashMap};

use crate::assessment::{HeuristicConfig, QualityHeads, ScenarioWeights, DEFAULT_HIDDEN};
use crate::genome::{
    parse_template_library, ComponentCategory, Origin, PromptComponent, PromptGenome,
    ScenarioKind, TemplateLibrary,
};
use crate::representation::{parse_lexicon, Dims, Lexicon, ProjectionWeights};
use crate::verification::{parse_guidelines, GuidelineStatement};

pub const LEXICON_JSON: &str = include_str!("../assets/lexicon.json");
pub const GUIDELINES_JSON: &str = include_str!("../assets/guidelines.json");
pub const PROMPT_EXAMPLES_JSON: &str = include_str!("../assets/prompt_examples_library.json");
pub const DESK_LIBRARY_JSON: &str = include_str!("../assets/desk_library.json");
pub const PROJECTION_JSON: &str = include_str!("../assets/default_projection.json");
pub const HEADS_JSON: &str = include_str!("../assets/default_heads.json");

pub const PROJECTION_SEED: u64 = 17;
pub const HEADS_SEED: u64 = 29;
pub const EMBEDDING_SEED: u64 = 7;

pub fn default_lexicon() -> Lexicon {
    parse_lexicon(LEXICON_JSON.as_bytes()).expect("embedded lexicon is valid")
}

pub fn default_guidelines() -> Vec<GuidelineStatement> {
    parse_guidelines(GUIDELINES_JSON.as_bytes()).expect("embedded guidelines are valid")
}

pub fn prompt_examples_library() -> TemplateLibrary {
    parse_template_library(PROMPT_EXAMPLES_JSON.as_bytes()).expect("embedded library is valid")
}

/// Five categories with six diagnosis templates each.
pub fn desk_library() -> TemplateLibrary {
    parse_template_library(DESK_LIBRARY_JSON.as_bytes()).expect("embedded library is valid")
}

pub fn desk_slot_values() -> HashMap<String, String> {
    HashMap::from([
        ("specialty".to_string(), "rheumatology".to_string()),
        (
            "case".to_string(),
            "a 72-year-old with new headache and jaw claudication".to_string(),
        ),
    ])
}

pub fn default_projection_weights() -> ProjectionWeights {
    ProjectionWeights::from_json(PROJECTION_JSON.as_bytes()).expect("embedded weights are valid")
}

pub fn default_quality_heads() -> QualityHeads {
    QualityHeads::from_json(HEADS_JSON.as_bytes()).expect("embedded heads are valid")
}

pub fn seeded_projection_weights() -> ProjectionWeights {
    ProjectionWeights::seeded(PROJECTION_SEED, Dims::default())
}

pub fn seeded_quality_heads() -> QualityHeads {
    QualityHeads::seeded(HEADS_SEED, Dims::default().d_final, DEFAULT_HIDDEN)
}

/// Four-component history genome with hand-countable heuristic scores
/// (0.8, 0.6, 0.4, 0.9) under the returned config and uniform weights.
pub fn evaluation_fixture() -> (PromptGenome, Lexicon, HeuristicConfig, ScenarioWeights) {
    let c = |cat, text: &str| PromptComponent::new(cat, text, 0.5, Origin::Library).unwrap();
    let genome = PromptGenome::new(
        0,
        ScenarioKind::History,
        vec![
            c(ComponentCategory::RoleDefinition, "You are a cardiologist."),
            c(ComponentCategory::ReasoningFramework, "Assess chest pain."),
            c(ComponentCategory::InformationRequest, "Request ECG."),
            c(ComponentCategory::BoundaryStatement, "Guaranteed."),
        ],
    )
    .unwrap();
    let keywords = ["assess", "ecg", "differential", "workup", "history"]
        .map(String::from)
        .to_vec();
    let config = HeuristicConfig {
        scenario_keywords: BTreeMap::from([(ScenarioKind::History, keywords)]),
        ..HeuristicConfig::default()
    };
    (genome, default_lexicon(), config, ScenarioWeights::uniform())
}
