//! Semantic verification gate.
//!
//! Four independent checks over a rendered genome (terminology, reasoning
//! coherence, guideline alignment, boundary statements) combined into a single
//! score that is compared against a threshold.

use std::collections::{BTreeMap, HashSet};
use std::sync::{Arc, LazyLock};

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::genome::{render_text, ComponentCategory, PromptGenome, ScenarioKind};
use crate::representation::{
    cosine, identify_concepts, normalize_token, normalized_words, tokenize, EmbeddingProvider,
    Lexicon, RepresentationError, Vector,
};

pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;
/// Score for checks with nothing to judge (empty chain, no guidelines).
pub const NEUTRAL: f64 = 0.5;

#[derive(Debug, thiserror::Error)]
pub enum VerificationError {
    #[error("invalid verification config: {0}")]
    Config(String),
    #[error("unknown risk category {0:?}")]
    UnknownRiskCategory(String),
    #[error(transparent)]
    Backend(#[from] RepresentationError),
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
}

impl From<serde_json::Error> for VerificationError {
    fn from(e: serde_json::Error) -> Self {
        VerificationError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        }
    }
}

fn weights_problem(name: &str, w: &[f64]) -> Option<String> {
    if let Some(v) = w.iter().find(|v| !v.is_finite() || !(0.0..=1.0).contains(*v)) {
        return Some(format!("{name} weight {v} outside [0, 1]"));
    }
    let sum: f64 = w.iter().sum();
    ((sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE).then(|| format!("{name} weights sum to {sum}, expected 1"))
}

// ---------------------------------------------------------------------------
// Terminology

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TermConfig {
    /// Weight of the lexicon-mapping indicator.
    pub w_u: f64,
    /// Weight of the context-compatibility fraction.
    pub w_c: f64,
    /// Tokens on each side of a term that form its context window.
    pub window: usize,
    /// Unmapped tokens ending in one of these count as candidate terms.
    pub medical_suffixes: Vec<String>,
    pub min_suffix_token_len: usize,
    /// Semantic types that are mutually compatible; a type may appear in several groups.
    pub compatible_types: Vec<Vec<String>>,
}

impl Default for TermConfig {
    fn default() -> Self {
        let s = |xs: &[&str]| xs.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        TermConfig {
            w_u: 0.7,
            w_c: 0.3,
            window: 5,
            medical_suffixes: s(&[
                "itis", "osis", "emia", "algia", "ectomy", "otomy", "oscopy", "opathy", "plasty",
                "megaly", "uria", "penia", "oma",
            ]),
            min_suffix_token_len: 7,
            compatible_types: vec![
                s(&[
                    "Sign or Symptom",
                    "Disease or Syndrome",
                    "Finding",
                    "Clinical Attribute",
                    "Cell",
                    "Diagnostic Procedure",
                    "Laboratory Procedure",
                ]),
                s(&[
                    "Disease or Syndrome",
                    "Finding",
                    "Clinical Attribute",
                    "Pharmacologic Substance",
                    "Therapeutic or Preventive Procedure",
                    "Health Care Activity",
                ]),
                s(&[
                    "Health Care Activity",
                    "Diagnostic Procedure",
                    "Laboratory Procedure",
                    "Therapeutic or Preventive Procedure",
                ]),
            ],
        }
    }
}

impl TermConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Some(p) = weights_problem("terminology (w_u, w_c)", &[self.w_u, self.w_c]) {
            out.push(p);
        }
        if self.medical_suffixes.iter().any(|s| s.trim().is_empty()) {
            out.push("empty medical suffix".into());
        }
        out
    }

    fn compatible(&self, a: Option<&str>, b: Option<&str>) -> bool {
        match (a, b) {
            (Some(a), Some(b)) if a == b => true,
            (Some(a), Some(b)) => self
                .compatible_types
                .iter()
                .any(|g| g.iter().any(|t| t == a) && g.iter().any(|t| t == b)),
            _ => false,
        }
    }

    fn has_medical_suffix(&self, word: &str) -> bool {
        word.chars().count() >= self.min_suffix_token_len
            && self
                .medical_suffixes
                .iter()
                .any(|s| word.ends_with(&s.to_lowercase()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TermEvidence {
    pub term: String,
    pub concept_id: Option<String>,
    /// Token range, inclusive.
    pub start: usize,
    pub end: usize,
    pub context: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TermReport {
    pub score: f64,
    pub vacuous: bool,
    pub terms: Vec<TermEvidence>,
}

/// Mean over candidate terms of `w_u * mapped + w_c * context`.
///
/// Candidates are lexicon spans plus unmatched tokens carrying a medical
/// suffix. A term's context is the fraction of other candidates overlapping
/// its window whose semantic type is compatible with its own; unmapped terms
/// have no type and so are compatible with nothing. A window with no other
/// candidates has context 1.
pub fn verify_terminology(genome: &PromptGenome, lexicon: &Lexicon, cfg: &TermConfig) -> TermReport {
    verify_terminology_text(&render_text(genome), lexicon, cfg)
}

pub fn verify_terminology_text(text: &str, lexicon: &Lexicon, cfg: &TermConfig) -> TermReport {
    let tokens: Vec<String> = tokenize(text).into_iter().map(|t| t.text).collect();
    let spans = identify_concepts(&tokens, lexicon);
    let mut covered = vec![false; tokens.len()];
    let mut terms: Vec<(TermEvidence, Option<String>)> = Vec::new();
    for s in &spans {
        covered[s.start..=s.end].iter_mut().for_each(|c| *c = true);
        let ty = lexicon.get(&s.concept_id).map(|e| e.semantic_type.clone());
        terms.push((
            TermEvidence {
                term: tokens[s.start..=s.end].join(" "),
                concept_id: Some(s.concept_id.clone()),
                start: s.start,
                end: s.end,
                context: 0.0,
            },
            ty,
        ));
    }
    for (i, tok) in tokens.iter().enumerate() {
        let w = normalize_token(tok);
        if !covered[i] && cfg.has_medical_suffix(&w) {
            terms.push((
                TermEvidence {
                    term: w,
                    concept_id: None,
                    start: i,
                    end: i,
                    context: 0.0,
                },
                None,
            ));
        }
    }
    terms.sort_by_key(|(t, _)| t.start);
    if terms.is_empty() {
        return TermReport {
            score: 1.0,
            vacuous: true,
            terms: Vec::new(),
        };
    }

    let types: Vec<Option<String>> = terms.iter().map(|(_, ty)| ty.clone()).collect();
    let mut total = 0.0;
    let mut evidence = Vec::with_capacity(terms.len());
    for (i, (mut t, _)) in terms.clone().into_iter().enumerate() {
        let lo = t.start.saturating_sub(cfg.window);
        let hi = t.end + cfg.window;
        let mut neighbours = 0usize;
        let mut compatible = 0usize;
        for (j, (o, _)) in terms.iter().enumerate() {
            if j == i || o.end < lo || o.start > hi {
                continue;
            }
            neighbours += 1;
            if cfg.compatible(types[i].as_deref(), types[j].as_deref()) {
                compatible += 1;
            }
        }
        t.context = if neighbours == 0 {
            1.0
        } else {
            compatible as f64 / neighbours as f64
        };
        let mapped = if t.concept_id.is_some() { 1.0 } else { 0.0 };
        total += cfg.w_u * mapped + cfg.w_c * t.context;
        evidence.push(t);
    }
    TermReport {
        score: (total / evidence.len() as f64).clamp(0.0, 1.0),
        vacuous: false,
        terms: evidence,
    }
}

// ---------------------------------------------------------------------------
// Reasoning chain

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClinicalStage {
    Presentation,
    Differential,
    Evidence,
    Recommendation,
    Boundary,
}

impl ClinicalStage {
    pub const ALL: [ClinicalStage; 5] = [
        ClinicalStage::Presentation,
        ClinicalStage::Differential,
        ClinicalStage::Evidence,
        ClinicalStage::Recommendation,
        ClinicalStage::Boundary,
    ];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainStep {
    /// Enumeration cue or stage keyword that opened the step.
    pub marker: String,
    pub text: String,
    pub stage: Option<ClinicalStage>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChainConfig {
    /// Word cues; numbered cues such as `(1)` and `2.` are always recognised.
    pub enumeration_cues: Vec<String>,
    pub stage_keywords: BTreeMap<ClinicalStage, Vec<String>>,
}

impl Default for ChainConfig {
    fn default() -> Self {
        let s = |xs: &[&str]| xs.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        ChainConfig {
            enumeration_cues: s(&["first", "second", "third", "then", "next", "finally", "lastly"]),
            stage_keywords: BTreeMap::from([
                (
                    ClinicalStage::Presentation,
                    s(&["symptoms", "presentation", "presenting", "complaint", "history", "examination", "findings", "signs"]),
                ),
                (
                    ClinicalStage::Differential,
                    s(&["differential", "differential diagnosis", "possible causes", "diagnoses", "hypotheses"]),
                ),
                (
                    ClinicalStage::Evidence,
                    s(&["workup", "tests", "testing", "evidence", "investigations", "labs", "imaging", "pre-test probabilities", "probability"]),
                ),
                (
                    ClinicalStage::Recommendation,
                    s(&["recommend", "recommendation", "recommendations", "treatment", "management", "plan", "options"]),
                ),
                (
                    ClinicalStage::Boundary,
                    s(&["red flags", "limitations", "referral", "escalate", "escalation", "uncertainty", "emergency"]),
                ),
            ]),
        }
    }
}

static NUMBERED_CUE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\(\d+\)|\b\d+[.)](?:\s|$)").expect("valid regex"));

/// Positions (word index, phrase length) of whole-word occurrences.
fn phrase_positions(words: &[String], phrase: &str) -> Vec<usize> {
    let needle = normalized_words(phrase);
    if needle.is_empty() || needle.len() > words.len() {
        return Vec::new();
    }
    (0..=words.len() - needle.len())
        .filter(|&i| words[i..i + needle.len()] == needle[..])
        .collect()
}

impl ChainConfig {
    /// Stage of the earliest keyword occurrence in `text`, longest keyword on ties.
    pub fn classify(&self, text: &str) -> Option<ClinicalStage> {
        let words = normalized_words(text);
        let mut best: Option<(usize, std::cmp::Reverse<usize>, ClinicalStage)> = None;
        for (&stage, kws) in &self.stage_keywords {
            for kw in kws {
                let len = normalized_words(kw).len();
                if let Some(&pos) = phrase_positions(&words, kw).first() {
                    let key = (pos, std::cmp::Reverse(len), stage);
                    if best.is_none_or(|b| key < b) {
                        best = Some(key);
                    }
                }
            }
        }
        best.map(|(.., s)| s)
    }

    /// Non-overlapping keyword occurrences in text order.
    fn keyword_steps(&self, text: &str) -> Vec<ChainStep> {
        let words = normalized_words(text);
        let mut hits: Vec<(usize, usize, ClinicalStage, String)> = Vec::new();
        for (&stage, kws) in &self.stage_keywords {
            for kw in kws {
                let len = normalized_words(kw).len();
                for pos in phrase_positions(&words, kw) {
                    hits.push((pos, len, stage, kw.clone()));
                }
            }
        }
        hits.sort_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)).then(a.2.cmp(&b.2)));
        let mut steps = Vec::new();
        let mut next_free = 0;
        for (pos, len, stage, kw) in hits {
            if pos < next_free {
                continue;
            }
            next_free = pos + len;
            steps.push(ChainStep {
                marker: kw,
                text: words[pos..pos + len].join(" "),
                stage: Some(stage),
            });
        }
        steps
    }
}

/// Steps of the reasoning-framework component.
///
/// When enumeration cues are present the text is cut at each cue and every
/// segment becomes one step, classified by its earliest stage keyword. Without
/// cues each stage-keyword occurrence is a step.
pub fn extract_reasoning_chain(genome: &PromptGenome, cfg: &ChainConfig) -> Vec<ChainStep> {
    match genome.component(ComponentCategory::ReasoningFramework) {
        Some(c) => extract_chain_text(c.text(), cfg),
        None => Vec::new(),
    }
}

pub fn extract_chain_text(text: &str, cfg: &ChainConfig) -> Vec<ChainStep> {
    let mut cues: Vec<(usize, usize)> = NUMBERED_CUE
        .find_iter(text)
        .map(|m| (m.start(), m.end()))
        .collect();
    let lower = text.to_lowercase();
    let word_cues: HashSet<String> = cfg.enumeration_cues.iter().map(|c| c.to_lowercase()).collect();
    for tok in tokenize(&lower) {
        let w = normalize_token(&tok.text);
        if word_cues.contains(&w) {
            // Lowercasing can change byte lengths; fall back to keyword mode then.
            if lower.len() != text.len() {
                cues.clear();
                break;
            }
            cues.push((tok.start, tok.end));
        }
    }
    cues.sort_unstable();
    cues.dedup_by(|b, a| b.0 < a.1);
    if cues.is_empty() {
        return cfg.keyword_steps(text);
    }
    cues.iter()
        .enumerate()
        .map(|(i, &(start, end))| {
            let seg_end = cues.get(i + 1).map_or(text.len(), |c| c.0);
            let body = text[end..seg_end].trim().trim_end_matches([',', ';']).trim().to_string();
            ChainStep {
                marker: text[start..end].trim().to_string(),
                stage: cfg.classify(&body),
                text: body,
            }
        })
        .collect()
}

/// Scores a reasoning chain in `[0, 1]`.
pub trait CoherenceScorer: Send + Sync {
    fn score(&self, chain: &[ChainStep]) -> f64;
}

/// Fraction of adjacent classified steps whose stages do not go backwards.
#[derive(Clone, Copy, Debug, Default)]
pub struct AdjacencyCoherence;

impl CoherenceScorer for AdjacencyCoherence {
    fn score(&self, chain: &[ChainStep]) -> f64 {
        score_reasoning_coherence(chain)
    }
}

pub fn score_reasoning_coherence(chain: &[ChainStep]) -> f64 {
    let stages: Vec<ClinicalStage> = chain.iter().filter_map(|s| s.stage).collect();
    if stages.len() < 2 {
        return NEUTRAL;
    }
    let ok = stages.windows(2).filter(|w| w[0] <= w[1]).count();
    ok as f64 / (stages.len() - 1) as f64
}

// ---------------------------------------------------------------------------
// Guidelines

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidelineStatement {
    pub id: String,
    pub text: String,
    pub evidence_weight: f64,
}

pub fn validate_guidelines(guidelines: &[GuidelineStatement]) -> Result<(), VerificationError> {
    let mut seen = HashSet::new();
    for g in guidelines {
        if !seen.insert(g.id.as_str()) {
            return Err(VerificationError::Config(format!("duplicate guideline id {:?}", g.id)));
        }
        if !(g.evidence_weight > 0.0 && g.evidence_weight <= 1.0) {
            return Err(VerificationError::Config(format!(
                "guideline {:?}: evidence_weight {} outside (0, 1]",
                g.id, g.evidence_weight
            )));
        }
        if g.text.trim().is_empty() {
            return Err(VerificationError::Config(format!("guideline {:?} has empty text", g.id)));
        }
    }
    Ok(())
}

pub fn parse_guidelines(bytes: &[u8]) -> Result<Vec<GuidelineStatement>, VerificationError> {
    let g: Vec<GuidelineStatement> = serde_json::from_slice(bytes)?;
    validate_guidelines(&g)?;
    Ok(g)
}

/// Guidelines with their sentence embeddings computed once.
#[derive(Clone, Debug)]
pub struct GuidelineIndex {
    statements: Vec<GuidelineStatement>,
    embeddings: Vec<Vector>,
}

impl GuidelineIndex {
    pub fn new(
        statements: Vec<GuidelineStatement>,
        provider: &dyn EmbeddingProvider,
    ) -> Result<Self, VerificationError> {
        validate_guidelines(&statements)?;
        let embeddings = statements
            .iter()
            .map(|g| provider.embed(&g.text).map(|e| e.cls))
            .collect::<Result<_, _>>()?;
        Ok(GuidelineIndex {
            statements,
            embeddings,
        })
    }

    pub fn statements(&self) -> &[GuidelineStatement] {
        &self.statements
    }

    pub fn is_empty(&self) -> bool {
        self.statements.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidelineMatch {
    pub sentence: String,
    pub guideline_id: String,
    pub similarity: f64,
    pub contribution: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GuidelineReport {
    pub score: f64,
    pub vacuous: bool,
    pub matches: Vec<GuidelineMatch>,
}

pub fn default_recommendation_cues() -> Vec<String> {
    ["recommend", "recommended", "recommends", "should", "first-line", "indicated"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

static SENTENCE_END: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"[.!?]+(?:\s+|$)|\n+").expect("valid regex"));

pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut last = 0;
    for m in SENTENCE_END.find_iter(text) {
        out.push(text[last..m.end()].trim().to_string());
        last = m.end();
    }
    out.push(text[last..].trim().to_string());
    out.retain(|s| !s.is_empty());
    out
}

pub fn recommendation_sentences(text: &str, cues: &[String]) -> Vec<String> {
    split_sentences(text)
        .into_iter()
        .filter(|s| {
            let words = normalized_words(s);
            cues.iter().any(|c| !phrase_positions(&words, c).is_empty())
        })
        .collect()
}

/// Mean over recommendation sentences of `max_g clamp(cos, 0, 1) * w_g`.
pub fn verify_guidelines(
    genome: &PromptGenome,
    index: &GuidelineIndex,
    provider: &dyn EmbeddingProvider,
    cues: &[String],
) -> Result<GuidelineReport, VerificationError> {
    verify_guidelines_text(&render_text(genome), index, provider, cues)
}

pub fn verify_guidelines_text(
    text: &str,
    index: &GuidelineIndex,
    provider: &dyn EmbeddingProvider,
    cues: &[String],
) -> Result<GuidelineReport, VerificationError> {
    if index.is_empty() {
        log::warn!("no guidelines loaded; guideline check scores neutral");
        return Ok(GuidelineReport {
            score: NEUTRAL,
            vacuous: false,
            matches: Vec::new(),
        });
    }
    let sentences = recommendation_sentences(text, cues);
    if sentences.is_empty() {
        return Ok(GuidelineReport {
            score: 1.0,
            vacuous: true,
            matches: Vec::new(),
        });
    }
    let mut matches = Vec::with_capacity(sentences.len());
    for sentence in sentences {
        let e = provider.embed(&sentence)?.cls;
        let (best, sim, contribution) = index
            .embeddings
            .iter()
            .zip(&index.statements)
            .map(|(ge, g)| {
                let sim = cosine(&e, ge).clamp(0.0, 1.0);
                (g, sim, sim * g.evidence_weight)
            })
            .fold(None::<(&GuidelineStatement, f64, f64)>, |acc, cur| match acc {
                Some(a) if a.2 >= cur.2 => Some(a),
                _ => Some(cur),
            })
            .expect("index is nonempty");
        matches.push(GuidelineMatch {
            sentence,
            guideline_id: best.id.clone(),
            similarity: sim,
            contribution,
        });
    }
    let score = matches.iter().map(|m| m.contribution).sum::<f64>() / matches.len() as f64;
    Ok(GuidelineReport {
        score: score.clamp(0.0, 1.0),
        vacuous: false,
        matches,
    })
}

// ---------------------------------------------------------------------------
// Boundaries

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RiskCategory {
    pub name: String,
    pub required_elements: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LiabilityKind {
    /// Violated when the pattern is present.
    Forbidden,
    /// Violated when the pattern is absent.
    Required,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LiabilityRule {
    pub kind: LiabilityKind,
    pub pattern: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundaryRuleSet {
    pub presence_patterns: Vec<String>,
    pub risk_categories: Vec<RiskCategory>,
    pub liability_rules: Vec<LiabilityRule>,
    /// Weights of presence, completeness and accuracy.
    pub alpha: [f64; 3],
}

impl Default for BoundaryRuleSet {
    fn default() -> Self {
        let s = |xs: &[&str]| xs.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        let risk = |name: &str, req: &[&str]| RiskCategory {
            name: name.into(),
            required_elements: s(req),
        };
        let forbid = |p: &str| LiabilityRule {
            kind: LiabilityKind::Forbidden,
            pattern: p.into(),
        };
        BoundaryRuleSet {
            presence_patterns: s(&[
                "consult healthcare provider",
                "emergency situations",
                "not substitute for medical advice",
            ]),
            risk_categories: vec![
                risk("diagnosis", &["differential diagnosis", "further evaluation", "clinical judgment"]),
                risk("treatment", &["contraindications", "individualized", "clinical judgment"]),
                risk("emergency", &["call emergency services", "seek immediate care"]),
                risk("medication", &["dosage", "interactions", "prescribing clinician"]),
            ],
            liability_rules: vec![
                forbid("guarantee"),
                forbid("definitive diagnosis"),
                forbid("no need to see a doctor"),
                forbid("replaces professional"),
            ],
            alpha: [0.4, 0.4, 0.2],
        }
    }
}

impl BoundaryRuleSet {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Some(p) = weights_problem("boundary alpha", &self.alpha) {
            out.push(p);
        }
        if self.presence_patterns.is_empty() || self.presence_patterns.iter().any(|p| p.trim().is_empty()) {
            out.push("presence_patterns must be a nonempty list of nonempty phrases".into());
        }
        let mut names = HashSet::new();
        for r in &self.risk_categories {
            if !names.insert(r.name.as_str()) {
                out.push(format!("duplicate risk category {:?}", r.name));
            }
            if r.required_elements.is_empty() || r.required_elements.iter().any(|p| p.trim().is_empty()) {
                out.push(format!("risk category {:?} needs nonempty required_elements", r.name));
            }
        }
        if self.liability_rules.iter().any(|r| r.pattern.trim().is_empty()) {
            out.push("empty liability pattern".into());
        }
        out
    }

    pub fn validate(&self) -> Result<(), VerificationError> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(VerificationError::Config(p.join("; ")))
        }
    }

    pub fn risk_category(&self, name: &str) -> Option<&RiskCategory> {
        self.risk_categories.iter().find(|r| r.name == name)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BoundaryReport {
    pub score: f64,
    pub presence: f64,
    pub completeness: f64,
    pub accuracy: f64,
    pub matched_patterns: Vec<String>,
    pub addressed_elements: Vec<String>,
    pub violated_rules: Vec<String>,
}

fn fold_text(text: &str) -> String {
    text.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

pub fn verify_boundaries(
    genome: &PromptGenome,
    rules: &BoundaryRuleSet,
    risk_category: &str,
) -> Result<BoundaryReport, VerificationError> {
    verify_boundaries_text(&render_text(genome), rules, risk_category)
}

/// `alpha1 * presence + alpha2 * completeness + alpha3 * accuracy`, all by
/// case-insensitive substring match with whitespace runs collapsed.
pub fn verify_boundaries_text(
    text: &str,
    rules: &BoundaryRuleSet,
    risk_category: &str,
) -> Result<BoundaryReport, VerificationError> {
    let risk = rules
        .risk_category(risk_category)
        .ok_or_else(|| VerificationError::UnknownRiskCategory(risk_category.to_string()))?;
    let hay = fold_text(text);
    let contains = |p: &str| hay.contains(&fold_text(p));

    let matched_patterns: Vec<String> = rules
        .presence_patterns
        .iter()
        .filter(|p| contains(p))
        .cloned()
        .collect();
    let addressed_elements: Vec<String> = risk
        .required_elements
        .iter()
        .filter(|p| contains(p))
        .cloned()
        .collect();
    let violated_rules: Vec<String> = rules
        .liability_rules
        .iter()
        .filter(|r| match r.kind {
            LiabilityKind::Forbidden => contains(&r.pattern),
            LiabilityKind::Required => !contains(&r.pattern),
        })
        .map(|r| r.pattern.clone())
        .collect();

    let presence = matched_patterns.len() as f64 / rules.presence_patterns.len() as f64;
    let completeness = addressed_elements.len() as f64 / risk.required_elements.len() as f64;
    let accuracy = if rules.liability_rules.is_empty() {
        1.0
    } else {
        1.0 - violated_rules.len() as f64 / rules.liability_rules.len() as f64
    };
    let [a1, a2, a3] = rules.alpha;
    Ok(BoundaryReport {
        score: a1 * presence + a2 * completeness + a3 * accuracy,
        presence,
        completeness,
        accuracy,
        matched_patterns,
        addressed_elements,
        violated_rules,
    })
}

// ---------------------------------------------------------------------------
// Integration

/// Weights of terminology, logic, guideline and boundary sub-scores.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct VerificationWeights([f64; 4]);

impl VerificationWeights {
    pub fn new(beta: [f64; 4]) -> Result<Self, VerificationError> {
        match weights_problem("verification beta", &beta) {
            Some(p) => Err(VerificationError::Config(p)),
            None => Ok(VerificationWeights(beta)),
        }
    }

    pub fn beta(&self) -> [f64; 4] {
        self.0
    }
}

impl Default for VerificationWeights {
    fn default() -> Self {
        VerificationWeights([0.3, 0.25, 0.25, 0.2])
    }
}

impl TryFrom<[f64; 4]> for VerificationWeights {
    type Error = VerificationError;
    fn try_from(b: [f64; 4]) -> Result<Self, Self::Error> {
        VerificationWeights::new(b)
    }
}

impl From<VerificationWeights> for [f64; 4] {
    fn from(w: VerificationWeights) -> Self {
        w.0
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VerificationEvidence {
    pub terminology: TermReport,
    pub chain: Vec<ChainStep>,
    pub guidelines: GuidelineReport,
    pub boundary: BoundaryReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub v_term: f64,
    pub v_logic: f64,
    pub v_guideline: f64,
    pub v_boundary: f64,
    pub v_total: f64,
    pub tau: f64,
    pub pass: bool,
    pub evidence: VerificationEvidence,
}

impl VerificationReport {
    pub fn is_consistent(&self, weights: &VerificationWeights) -> bool {
        let b = weights.beta();
        let v = b[0] * self.v_term + b[1] * self.v_logic + b[2] * self.v_guideline + b[3] * self.v_boundary;
        (v - self.v_total).abs() <= 1e-9 && self.pass == (self.v_total >= self.tau)
    }
}

pub fn validate_tau(tau: f64) -> Result<(), VerificationError> {
    if tau > 0.0 && tau <= 1.0 {
        Ok(())
    } else {
        Err(VerificationError::Config(format!("tau {tau} outside (0, 1]")))
    }
}

/// `V = beta . (v_term, v_logic, v_guideline, v_boundary)`; passes at `V >= tau`.
pub fn integrated_verification(
    sub_scores: [f64; 4],
    weights: &VerificationWeights,
    tau: f64,
) -> Result<VerificationReport, VerificationError> {
    validate_tau(tau)?;
    if let Some(s) = sub_scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(VerificationError::Config(format!("sub-score {s} outside [0, 1]")));
    }
    let v_total = weights
        .beta()
        .iter()
        .zip(sub_scores)
        .map(|(b, s)| b * s)
        .sum::<f64>()
        .clamp(0.0, 1.0);
    let [v_term, v_logic, v_guideline, v_boundary] = sub_scores;
    Ok(VerificationReport {
        v_term,
        v_logic,
        v_guideline,
        v_boundary,
        v_total,
        tau,
        pass: v_total >= tau,
        evidence: VerificationEvidence::default(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerificationConfig {
    pub terminology: TermConfig,
    pub chain: ChainConfig,
    pub recommendation_cues: Vec<String>,
    pub weights: VerificationWeights,
    pub tau: f64,
    /// Risk category checked for each scenario.
    pub scenario_risk: BTreeMap<ScenarioKind, String>,
}

impl Default for VerificationConfig {
    fn default() -> Self {
        VerificationConfig {
            terminology: TermConfig::default(),
            chain: ChainConfig::default(),
            recommendation_cues: default_recommendation_cues(),
            weights: VerificationWeights::default(),
            tau: 0.75,
            scenario_risk: BTreeMap::from([
                (ScenarioKind::Diagnosis, "diagnosis".into()),
                (ScenarioKind::Treatment, "treatment".into()),
                (ScenarioKind::History, "diagnosis".into()),
                (ScenarioKind::Education, "medication".into()),
            ]),
        }
    }
}

impl VerificationConfig {
    pub fn problems(&self, rules: &BoundaryRuleSet) -> Vec<String> {
        let mut out = self.terminology.problems();
        if validate_tau(self.tau).is_err() {
            out.push(format!("tau {} outside (0, 1]", self.tau));
        }
        for (s, r) in &self.scenario_risk {
            if rules.risk_category(r).is_none() {
                out.push(format!("scenario {s} maps to unknown risk category {r:?}"));
            }
        }
        out
    }
}

/// Runs all four checks with shared, immutable resources.
#[derive(Clone)]
pub struct Verifier {
    lexicon: Arc<Lexicon>,
    provider: Arc<dyn EmbeddingProvider>,
    guidelines: Arc<GuidelineIndex>,
    rules: BoundaryRuleSet,
    config: VerificationConfig,
    coherence: Arc<dyn CoherenceScorer>,
}

impl Verifier {
    pub fn new(
        lexicon: Arc<Lexicon>,
        provider: Arc<dyn EmbeddingProvider>,
        guidelines: Arc<GuidelineIndex>,
        rules: BoundaryRuleSet,
        config: VerificationConfig,
    ) -> Result<Self, VerificationError> {
        let mut problems = rules.problems();
        problems.extend(config.problems(&rules));
        if !problems.is_empty() {
            return Err(VerificationError::Config(problems.join("; ")));
        }
        Ok(Verifier {
            lexicon,
            provider,
            guidelines,
            rules,
            config,
            coherence: Arc::new(AdjacencyCoherence),
        })
    }

    pub fn with_coherence(mut self, scorer: Arc<dyn CoherenceScorer>) -> Self {
        self.coherence = scorer;
        self
    }

    pub fn config(&self) -> &VerificationConfig {
        &self.config
    }

    pub fn rules(&self) -> &BoundaryRuleSet {
        &self.rules
    }

    pub fn verify(&self, genome: &PromptGenome) -> Result<VerificationReport, VerificationError> {
        let text = render_text(genome);
        let terminology = verify_terminology_text(&text, &self.lexicon, &self.config.terminology);
        let chain = extract_reasoning_chain(genome, &self.config.chain);
        let v_logic = self.coherence.score(&chain).clamp(0.0, 1.0);
        let guidelines = verify_guidelines_text(
            &text,
            &self.guidelines,
            self.provider.as_ref(),
            &self.config.recommendation_cues,
        )?;
        let risk = self
            .config
            .scenario_risk
            .get(&genome.scenario())
            .ok_or_else(|| VerificationError::Config(format!("no risk category for scenario {}", genome.scenario())))?;
        let boundary = verify_boundaries_text(&text, &self.rules, risk)?;
        let mut report = integrated_verification(
            [terminology.score, v_logic, guidelines.score, boundary.score],
            &self.config.weights,
            self.config.tau,
        )?;
        report.evidence = VerificationEvidence {
            terminology,
            chain,
            guidelines,
            boundary,
        };
        Ok(report)
    }
}
