//! Component-structured prompts, the template library, and their file formats.
//!
//! A [`PromptGenome`] is an ordered list of [`PromptComponent`]s, at most one per
//! [`ComponentCategory`], always stored in canonical category order. Every
//! constructor validates that invariant, so downstream operators never see a
//! malformed genome.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum GenomeError {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("duplicate template id `{0}`")]
    DuplicateId(String),
    #[error("unknown category `{0}`")]
    UnknownCategory(String),
    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),
    #[error("unknown complexity `{0}`")]
    UnknownComplexity(String),
    #[error("template `{id}`: {reason}")]
    InvalidTemplate { id: String, reason: String },
    #[error("template `{0}` not found")]
    UnknownTemplate(String),
    #[error("template `{id}` has category {actual}, chosen for {expected}")]
    CategoryMismatch {
        id: String,
        expected: ComponentCategory,
        actual: ComponentCategory,
    },
    #[error("template `{id}` is not available for scenario {scenario}")]
    ScenarioMismatch { id: String, scenario: ScenarioKind },
    #[error("missing value for slot `{0}`")]
    MissingSlot(String),
    #[error("invalid component: {0}")]
    InvalidComponent(String),
    #[error("invalid genome: {0}")]
    InvalidGenome(String),
}

impl From<serde_json::Error> for GenomeError {
    fn from(e: serde_json::Error) -> Self {
        GenomeError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        }
    }
}

/// Functional role of a prompt fragment. Declaration order is the canonical order.
#[derive(
    Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum ComponentCategory {
    RoleDefinition,
    ReasoningFramework,
    InformationRequest,
    UncertaintyExpression,
    BoundaryStatement,
}

impl ComponentCategory {
    pub const ALL: [ComponentCategory; 5] = [
        ComponentCategory::RoleDefinition,
        ComponentCategory::ReasoningFramework,
        ComponentCategory::InformationRequest,
        ComponentCategory::UncertaintyExpression,
        ComponentCategory::BoundaryStatement,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ComponentCategory::RoleDefinition => "role_definition",
            ComponentCategory::ReasoningFramework => "reasoning_framework",
            ComponentCategory::InformationRequest => "information_request",
            ComponentCategory::UncertaintyExpression => "uncertainty_expression",
            ComponentCategory::BoundaryStatement => "boundary_statement",
        }
    }

    /// Position in canonical order.
    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for ComponentCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ComponentCategory {
    type Err = GenomeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ComponentCategory::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| GenomeError::UnknownCategory(s.to_string()))
    }
}

#[derive(
    Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Diagnosis,
    Treatment,
    History,
    Education,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 4] = [
        ScenarioKind::Diagnosis,
        ScenarioKind::Treatment,
        ScenarioKind::History,
        ScenarioKind::Education,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioKind::Diagnosis => "diagnosis",
            ScenarioKind::Treatment => "treatment",
            ScenarioKind::History => "history",
            ScenarioKind::Education => "education",
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScenarioKind {
    type Err = GenomeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ScenarioKind::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| GenomeError::UnknownScenario(s.to_string()))
    }
}

/// Which operator produced a component.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Library,
    CrossoverA,
    CrossoverB,
    Fusion,
    Mutation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Complexity {
    Straightforward,
    Moderate,
    Complex,
}

impl FromStr for Complexity {
    type Err = GenomeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "straightforward" => Ok(Complexity::Straightforward),
            "moderate" => Ok(Complexity::Moderate),
            "complex" => Ok(Complexity::Complex),
            other => Err(GenomeError::UnknownComplexity(other.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawComponent")]
pub struct PromptComponent {
    category: ComponentCategory,
    text: String,
    quality: f64,
    origin: Origin,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawComponent {
    category: ComponentCategory,
    text: String,
    quality: f64,
    origin: Origin,
}

impl TryFrom<RawComponent> for PromptComponent {
    type Error = GenomeError;

    fn try_from(raw: RawComponent) -> Result<Self, Self::Error> {
        PromptComponent::new(raw.category, raw.text, raw.quality, raw.origin)
    }
}

impl PromptComponent {
    pub fn new(
        category: ComponentCategory,
        text: impl Into<String>,
        quality: f64,
        origin: Origin,
    ) -> Result<Self, GenomeError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(GenomeError::InvalidComponent(format!(
                "{category} text is empty"
            )));
        }
        check_unit(quality).map_err(GenomeError::InvalidComponent)?;
        Ok(PromptComponent {
            category,
            text,
            quality,
            origin,
        })
    }

    pub fn category(&self) -> ComponentCategory {
        self.category
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn quality(&self) -> f64 {
        self.quality
    }

    pub fn origin(&self) -> Origin {
        self.origin
    }

    pub fn with_text(&self, text: impl Into<String>) -> Result<Self, GenomeError> {
        PromptComponent::new(self.category, text, self.quality, self.origin)
    }

    /// Quality is clamped into [0, 1]; non-finite values map to 0.
    pub fn with_quality(mut self, quality: f64) -> Self {
        self.quality = if quality.is_finite() {
            quality.clamp(0.0, 1.0)
        } else {
            0.0
        };
        self
    }

    pub fn with_origin(mut self, origin: Origin) -> Self {
        self.origin = origin;
        self
    }
}

fn check_unit(q: f64) -> Result<(), String> {
    if q.is_finite() && (0.0..=1.0).contains(&q) {
        Ok(())
    } else {
        Err(format!("quality {q} outside [0, 1]"))
    }
}

/// The unit of evolution: category-typed components in canonical order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGenome")]
pub struct PromptGenome {
    id: u64,
    scenario: ScenarioKind,
    components: Vec<PromptComponent>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGenome {
    id: u64,
    scenario: ScenarioKind,
    components: Vec<PromptComponent>,
}

impl TryFrom<RawGenome> for PromptGenome {
    type Error = GenomeError;

    fn try_from(raw: RawGenome) -> Result<Self, Self::Error> {
        PromptGenome::new(raw.id, raw.scenario, raw.components)
    }
}

impl PromptGenome {
    pub fn new(
        id: u64,
        scenario: ScenarioKind,
        components: Vec<PromptComponent>,
    ) -> Result<Self, GenomeError> {
        if components.is_empty() {
            return Err(GenomeError::InvalidGenome("no components".into()));
        }
        for pair in components.windows(2) {
            if pair[0].category >= pair[1].category {
                return Err(GenomeError::InvalidGenome(format!(
                    "{} followed by {} breaks canonical order or uniqueness",
                    pair[0].category, pair[1].category
                )));
            }
        }
        Ok(PromptGenome {
            id,
            scenario,
            components,
        })
    }

    /// Builds a genome from components in any order; fails on duplicate categories.
    pub fn from_unordered(
        id: u64,
        scenario: ScenarioKind,
        mut components: Vec<PromptComponent>,
    ) -> Result<Self, GenomeError> {
        components.sort_by_key(|c| c.category);
        PromptGenome::new(id, scenario, components)
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn with_id(mut self, id: u64) -> Self {
        self.id = id;
        self
    }

    pub fn scenario(&self) -> ScenarioKind {
        self.scenario
    }

    pub fn components(&self) -> &[PromptComponent] {
        &self.components
    }

    pub fn into_components(self) -> Vec<PromptComponent> {
        self.components
    }

    pub fn component(&self, category: ComponentCategory) -> Option<&PromptComponent> {
        self.components
            .binary_search_by_key(&category, |c| c.category)
            .ok()
            .map(|i| &self.components[i])
    }

    pub fn categories(&self) -> impl Iterator<Item = ComponentCategory> + '_ {
        self.components.iter().map(|c| c.category)
    }

    pub fn is_canonical(&self) -> bool {
        self.components
            .windows(2)
            .all(|p| p[0].category < p[1].category)
    }
}

/// Component texts joined by a single newline.
pub fn render_text(genome: &PromptGenome) -> String {
    let mut out = String::new();
    for (i, c) in genome.components.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        out.push_str(&c.text);
    }
    out
}

pub fn serialize_genome(genome: &PromptGenome) -> Vec<u8> {
    serde_json::to_vec(genome).expect("genome serialization is infallible")
}

pub fn deserialize_genome(bytes: &[u8]) -> Result<PromptGenome, GenomeError> {
    Ok(serde_json::from_slice(bytes)?)
}

const MARKER_OPEN: &str = "[[";
const MARKER_CLOSE: &str = "]]";

static MARKER_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\[\[([a-z_]+)\]\]").expect("valid marker regex"));

/// Renders with a `[[category]]` line before each component.
pub fn render_marked(genome: &PromptGenome) -> String {
    let mut out = String::new();
    for c in &genome.components {
        out.push_str(MARKER_OPEN);
        out.push_str(c.category.as_str());
        out.push_str(MARKER_CLOSE);
        out.push('\n');
        out.push_str(&c.text);
        out.push('\n');
    }
    out
}

/// Splits marked text back into `(category, text)` parts.
///
/// Text before the first recognised marker is attached to the first part.
/// Repeated categories are concatenated with a space, unknown markers stay in
/// the text, and empty parts are dropped. The result is in canonical order.
pub fn split_marked(text: &str) -> Vec<(ComponentCategory, String)> {
    let mut parts: BTreeMap<ComponentCategory, String> = BTreeMap::new();
    let mut leading = String::new();
    let mut current: Option<ComponentCategory> = None;
    let mut cursor = 0;

    let mut push = |cat: Option<ComponentCategory>, chunk: &str, leading: &mut String| {
        let chunk = chunk.trim();
        if chunk.is_empty() {
            return;
        }
        match cat {
            None => join_into(leading, chunk),
            Some(cat) => join_into(parts.entry(cat).or_default(), chunk),
        }
    };

    for caps in MARKER_RE.captures_iter(text) {
        let whole = caps.get(0).expect("match");
        let Ok(cat) = caps[1].parse::<ComponentCategory>() else {
            continue;
        };
        push(current, &text[cursor..whole.start()], &mut leading);
        current = Some(cat);
        cursor = whole.end();
    }
    push(current, &text[cursor..], &mut leading);

    if !leading.is_empty() {
        match parts.iter_mut().next() {
            Some((_, first)) => {
                let mut merged = leading;
                join_into(&mut merged, first);
                *first = merged;
            }
            None => return Vec::new(),
        }
    }
    parts.into_iter().collect()
}

fn join_into(dst: &mut String, chunk: &str) {
    if !dst.is_empty() {
        dst.push(' ');
    }
    dst.push_str(chunk);
}

static SLOT_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"\{\{\s*([A-Za-z_][A-Za-z0-9_]*)\s*\}\}").expect("valid slot regex")
});

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Template {
    pub id: String,
    pub category: ComponentCategory,
    pub scenarios: BTreeSet<ScenarioKind>,
    pub complexity: Complexity,
    pub text: String,
    pub base_quality: f64,
}

impl Template {
    /// Slot names in order of first appearance.
    pub fn slots(&self) -> Vec<&str> {
        SLOT_RE
            .captures_iter(&self.text)
            .map(|c| c.get(1).expect("group").as_str())
            .collect()
    }

    pub fn render(&self, slot_values: &HashMap<String, String>) -> Result<String, GenomeError> {
        for slot in self.slots() {
            if !slot_values.contains_key(slot) {
                return Err(GenomeError::MissingSlot(slot.to_string()));
            }
        }
        let rendered = SLOT_RE.replace_all(&self.text, |caps: &regex::Captures<'_>| {
            slot_values[&caps[1]].clone()
        });
        Ok(rendered.trim().to_string())
    }

    fn validate(&self) -> Result<(), GenomeError> {
        let invalid = |reason: String| GenomeError::InvalidTemplate {
            id: self.id.clone(),
            reason,
        };
        if self.id.trim().is_empty() {
            return Err(invalid("empty id".into()));
        }
        if self.text.trim().is_empty() {
            return Err(invalid("empty text".into()));
        }
        if self.scenarios.is_empty() {
            return Err(invalid("no scenarios listed".into()));
        }
        check_unit(self.base_quality).map_err(invalid)?;
        let mut seen = HashSet::new();
        for slot in self.slots() {
            if !seen.insert(slot) {
                return Err(invalid(format!("slot `{slot}` appears more than once")));
            }
        }
        Ok(())
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLibrary {
    templates: Vec<RawTemplate>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTemplate {
    id: String,
    category: String,
    scenarios: Vec<String>,
    complexity: String,
    text: String,
    base_quality: f64,
}

/// Templates indexed by `(category, scenario)`.
#[derive(Clone, Debug, Default)]
pub struct TemplateLibrary {
    templates: Vec<Template>,
    by_id: HashMap<String, usize>,
    index: BTreeMap<(ComponentCategory, ScenarioKind), Vec<usize>>,
}

impl TemplateLibrary {
    pub fn new(templates: Vec<Template>) -> Result<Self, GenomeError> {
        let mut by_id = HashMap::with_capacity(templates.len());
        let mut index: BTreeMap<_, Vec<usize>> = BTreeMap::new();
        for (i, t) in templates.iter().enumerate() {
            t.validate()?;
            if by_id.insert(t.id.clone(), i).is_some() {
                return Err(GenomeError::DuplicateId(t.id.clone()));
            }
            for &s in &t.scenarios {
                index.entry((t.category, s)).or_default().push(i);
            }
        }
        Ok(TemplateLibrary {
            templates,
            by_id,
            index,
        })
    }

    pub fn templates(&self) -> &[Template] {
        &self.templates
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Template> {
        self.by_id.get(id).map(|&i| &self.templates[i])
    }

    pub fn candidates(
        &self,
        category: ComponentCategory,
        scenario: ScenarioKind,
    ) -> impl Iterator<Item = &Template> + '_ {
        self.index
            .get(&(category, scenario))
            .into_iter()
            .flatten()
            .map(|&i| &self.templates[i])
    }

    /// Categories with at least one template for `scenario`, in canonical order.
    pub fn categories_for(&self, scenario: ScenarioKind) -> Vec<ComponentCategory> {
        ComponentCategory::ALL
            .into_iter()
            .filter(|&c| self.index.contains_key(&(c, scenario)))
            .collect()
    }

    /// `(category, scenario)` pairs among `categories` with fewer than two
    /// templates; Replace mutation has no alternative there.
    pub fn sparse_pairs(
        &self,
        scenario: ScenarioKind,
        categories: &[ComponentCategory],
    ) -> Vec<ComponentCategory> {
        categories
            .iter()
            .copied()
            .filter(|&c| self.candidates(c, scenario).count() < 2)
            .collect()
    }
}

pub fn parse_template_library(bytes: &[u8]) -> Result<TemplateLibrary, GenomeError> {
    let raw: RawLibrary = serde_json::from_slice(bytes)?;
    let mut templates = Vec::with_capacity(raw.templates.len());
    for t in raw.templates {
        let scenarios = t
            .scenarios
            .iter()
            .map(|s| s.parse())
            .collect::<Result<BTreeSet<_>, _>>()?;
        templates.push(Template {
            category: t.category.parse()?,
            complexity: t.complexity.parse()?,
            id: t.id,
            scenarios,
            text: t.text,
            base_quality: t.base_quality,
        });
    }
    TemplateLibrary::new(templates)
}

/// Instantiates one template per chosen category.
pub fn assemble_genome(
    library: &TemplateLibrary,
    scenario: ScenarioKind,
    choices: &BTreeMap<ComponentCategory, String>,
    slot_values: &HashMap<String, String>,
) -> Result<PromptGenome, GenomeError> {
    let mut components = Vec::with_capacity(choices.len());
    for (&category, id) in choices {
        let template = library
            .get(id)
            .ok_or_else(|| GenomeError::UnknownTemplate(id.clone()))?;
        components.push(instantiate(template, category, scenario, slot_values)?);
    }
    PromptGenome::new(0, scenario, components)
}

pub(crate) fn instantiate(
    template: &Template,
    category: ComponentCategory,
    scenario: ScenarioKind,
    slot_values: &HashMap<String, String>,
) -> Result<PromptComponent, GenomeError> {
    if template.category != category {
        return Err(GenomeError::CategoryMismatch {
            id: template.id.clone(),
            expected: category,
            actual: template.category,
        });
    }
    if !template.scenarios.contains(&scenario) {
        return Err(GenomeError::ScenarioMismatch {
            id: template.id.clone(),
            scenario,
        });
    }
    let text = template.render(slot_values)?;
    PromptComponent::new(category, text, template.base_quality, Origin::Library)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lib_json(templates: &str) -> String {
        format!(r#"{{"templates": [{templates}]}}"#)
    }

    fn tpl(id: &str, category: &str, text: &str) -> String {
        format!(
            r#"{{"id": "{id}", "category": "{category}", "scenarios": ["diagnosis"], "complexity": "moderate", "text": "{text}", "base_quality": 0.5}}"#
        )
    }

    fn full_library() -> TemplateLibrary {
        let ts: Vec<String> = ComponentCategory::ALL
            .iter()
            .map(|c| tpl(&format!("t_{c}"), c.as_str(), &format!("Text for {c}.")))
            .collect();
        parse_template_library(lib_json(&ts.join(",")).as_bytes()).unwrap()
    }

    #[test]
    fn parses_two_templates() {
        let json = lib_json(&[tpl("A", "role_definition", "x"), tpl("B", "boundary_statement", "y")].join(","));
        let lib = parse_template_library(json.as_bytes()).unwrap();
        assert_eq!(lib.len(), 2);
    }

    #[test]
    fn duplicate_id_is_named() {
        let json = lib_json(&[tpl("T1", "role_definition", "x"), tpl("T1", "boundary_statement", "y")].join(","));
        let err = parse_template_library(json.as_bytes()).unwrap_err();
        assert!(matches!(&err, GenomeError::DuplicateId(id) if id == "T1"));
        assert!(err.to_string().contains("T1"));
    }

    #[test]
    fn unknown_category_rejected() {
        let json = lib_json(&tpl("A", "diagnostic_reasoning", "x"));
        let err = parse_template_library(json.as_bytes()).unwrap_err();
        assert!(matches!(err, GenomeError::UnknownCategory(c) if c == "diagnostic_reasoning"));
    }

    #[test]
    fn malformed_json_reports_position() {
        let err = parse_template_library(b"{\n  \"templates\": [,]\n}").unwrap_err();
        match err {
            GenomeError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn repeated_slot_rejected() {
        let json = lib_json(&tpl("A", "role_definition", "{{x}} and {{x}}"));
        assert!(matches!(
            parse_template_library(json.as_bytes()),
            Err(GenomeError::InvalidTemplate { .. })
        ));
    }

    #[test]
    fn prompt_examples_fixture_parses() {
        let bytes = include_bytes!("../assets/prompt_examples_library.json");
        let lib = parse_template_library(bytes).unwrap();
        assert_eq!(lib.len(), 4);
        let t = lib.get("diagnostic_reasoning").unwrap();
        assert_eq!(t.slots(), vec!["specialty", "case"]);
    }

    #[test]
    fn assemble_orders_canonically() {
        let lib = full_library();
        let choices: BTreeMap<_, _> = ComponentCategory::ALL
            .iter()
            .rev()
            .map(|c| (*c, format!("t_{c}")))
            .collect();
        let g = assemble_genome(&lib, ScenarioKind::Diagnosis, &choices, &HashMap::new()).unwrap();
        assert_eq!(g.categories().collect::<Vec<_>>(), ComponentCategory::ALL.to_vec());
        assert!(g.components().iter().all(|c| c.origin() == Origin::Library && c.quality() == 0.5));
    }

    #[test]
    fn assemble_subset() {
        let lib = full_library();
        let choices = BTreeMap::from([
            (ComponentCategory::BoundaryStatement, "t_boundary_statement".to_string()),
            (ComponentCategory::RoleDefinition, "t_role_definition".to_string()),
        ]);
        let g = assemble_genome(&lib, ScenarioKind::Diagnosis, &choices, &HashMap::new()).unwrap();
        assert_eq!(g.components().len(), 2);
    }

    #[test]
    fn missing_slot_named() {
        let json = lib_json(&tpl("A", "role_definition", "Patient with {{condition}}."));
        let lib = parse_template_library(json.as_bytes()).unwrap();
        let choices = BTreeMap::from([(ComponentCategory::RoleDefinition, "A".to_string())]);
        let err = assemble_genome(&lib, ScenarioKind::Diagnosis, &choices, &HashMap::new()).unwrap_err();
        assert!(matches!(err, GenomeError::MissingSlot(s) if s == "condition"));
    }

    #[test]
    fn mismatches_rejected() {
        let lib = full_library();
        let wrong_cat = BTreeMap::from([(ComponentCategory::RoleDefinition, "t_boundary_statement".to_string())]);
        assert!(matches!(
            assemble_genome(&lib, ScenarioKind::Diagnosis, &wrong_cat, &HashMap::new()),
            Err(GenomeError::CategoryMismatch { .. })
        ));
        let ok = BTreeMap::from([(ComponentCategory::RoleDefinition, "t_role_definition".to_string())]);
        assert!(matches!(
            assemble_genome(&lib, ScenarioKind::Education, &ok, &HashMap::new()),
            Err(GenomeError::ScenarioMismatch { .. })
        ));
    }

    fn comp(cat: ComponentCategory, text: &str) -> PromptComponent {
        PromptComponent::new(cat, text, 0.5, Origin::Library).unwrap()
    }

    #[test]
    fn render_joins_with_newline() {
        let one = PromptGenome::new(1, ScenarioKind::Diagnosis, vec![comp(ComponentCategory::RoleDefinition, "X")]).unwrap();
        assert_eq!(render_text(&one), "X");
        let two = PromptGenome::new(
            1,
            ScenarioKind::Diagnosis,
            vec![comp(ComponentCategory::RoleDefinition, "A"), comp(ComponentCategory::BoundaryStatement, "B")],
        )
        .unwrap();
        assert_eq!(render_text(&two), "A\nB");
        assert_eq!(render_text(&two), render_text(&two));
    }

    #[test]
    fn genome_rejects_disorder_and_duplicates() {
        let r = PromptGenome::new(
            0,
            ScenarioKind::Diagnosis,
            vec![comp(ComponentCategory::BoundaryStatement, "B"), comp(ComponentCategory::RoleDefinition, "A")],
        );
        assert!(r.is_err());
        let r = PromptGenome::from_unordered(
            0,
            ScenarioKind::Diagnosis,
            vec![comp(ComponentCategory::RoleDefinition, "B"), comp(ComponentCategory::RoleDefinition, "A")],
        );
        assert!(r.is_err());
        assert!(PromptGenome::new(0, ScenarioKind::Diagnosis, vec![]).is_err());
        assert!(PromptComponent::new(ComponentCategory::RoleDefinition, "   ", 0.5, Origin::Library).is_err());
        assert!(PromptComponent::new(ComponentCategory::RoleDefinition, "x", 1.5, Origin::Library).is_err());
    }

    #[test]
    fn round_trip_preserves_quality_bits() {
        let c = PromptComponent::new(ComponentCategory::ReasoningFramework, "reason", 0.37, Origin::Fusion).unwrap();
        let g = PromptGenome::new(9, ScenarioKind::Treatment, vec![c]).unwrap();
        let back = deserialize_genome(&serialize_genome(&g)).unwrap();
        assert_eq!(back, g);
        assert_eq!(back.components()[0].quality().to_bits(), 0.37f64.to_bits());
    }

    #[test]
    fn unknown_category_in_genome_bytes() {
        let bytes = br#"{"id":1,"scenario":"diagnosis","components":[{"category":"foo","text":"x","quality":0.5,"origin":"library"}]}"#;
        assert!(matches!(deserialize_genome(bytes), Err(GenomeError::Parse { .. })));
    }

    #[test]
    fn invariant_violation_in_genome_bytes() {
        let bytes = br#"{"id":1,"scenario":"diagnosis","components":[
            {"category":"boundary_statement","text":"x","quality":0.5,"origin":"library"},
            {"category":"role_definition","text":"y","quality":0.5,"origin":"library"}]}"#;
        assert!(deserialize_genome(bytes).is_err());
    }

    #[test]
    fn marked_text_round_trip() {
        let g = PromptGenome::new(
            3,
            ScenarioKind::History,
            vec![comp(ComponentCategory::RoleDefinition, "A b."), comp(ComponentCategory::UncertaintyExpression, "C d.")],
        )
        .unwrap();
        let parts = split_marked(&render_marked(&g));
        assert_eq!(
            parts,
            vec![
                (ComponentCategory::RoleDefinition, "A b.".to_string()),
                (ComponentCategory::UncertaintyExpression, "C d.".to_string())
            ]
        );
    }

    #[test]
    fn split_marked_merges_repeats_and_keeps_broken_markers() {
        let parts = split_marked(
            "lead [[boundary_statement]] one [[role_definition]] two [[boundary_statement]] three [[role_defin]] x",
        );
        assert_eq!(
            parts,
            vec![
                (ComponentCategory::RoleDefinition, "lead two".to_string()),
                (ComponentCategory::BoundaryStatement, "one three [[role_defin]] x".to_string()),
            ]
        );
        assert!(split_marked("no markers at all").is_empty());
    }

    fn arb_genome() -> impl Strategy<Value = PromptGenome> {
        (
            any::<u64>(),
            0usize..4,
            proptest::collection::btree_map(0usize..5, ("[a-zA-Z ,.()]{0,20}[a-z]", 0.0f64..=1.0, 0usize..5), 1..=5),
        )
            .prop_map(|(id, s, comps)| {
                let origins = [Origin::Library, Origin::CrossoverA, Origin::CrossoverB, Origin::Fusion, Origin::Mutation];
                let components = comps
                    .into_iter()
                    .map(|(c, (text, q, o))| PromptComponent::new(ComponentCategory::ALL[c], text, q, origins[o]).unwrap())
                    .collect();
                PromptGenome::new(id, ScenarioKind::ALL[s], components).unwrap()
            })
    }

    proptest! {
        #[test]
        fn serialize_round_trip_is_identity(g in arb_genome()) {
            let back = deserialize_genome(&serialize_genome(&g)).unwrap();
            prop_assert!(back.is_canonical());
            prop_assert_eq!(back, g);
        }
    }
}
