//! Multi-dimensional quality scoring.
//!
//! Two local backends produce the four dimension scores: a feed-forward
//! [`QualityHead`] per dimension over the final prompt representation, and a
//! deterministic text [`HeuristicScorer`] that needs no weights at all. The
//! scenario-weighted sum of the dimension scores is the integrated quality.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::genome::{render_text, ComponentCategory, PromptComponent, PromptGenome, ScenarioKind};
use crate::representation::{
    glorot, identify_concepts, matrix_from_rows, matrix_rows, normalized_words, tokenize,
    vector_from, Lexicon, Matrix, PromptEncoder, RepresentationError, Vector,
};

pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;
pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const DEFAULT_HIDDEN: usize = 512;

#[derive(Debug, thiserror::Error)]
pub enum AssessmentError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("missing score for dimension {0}")]
    MissingDimension(Dimension),
    #[error("invalid scenario weights: {0}")]
    Weights(String),
    #[error("invalid quality heads: {0}")]
    Heads(String),
    #[error(transparent)]
    Representation(#[from] RepresentationError),
    #[error("scorer backend error: {0}")]
    Backend(String),
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
}

impl From<serde_json::Error> for AssessmentError {
    fn from(e: serde_json::Error) -> Self {
        AssessmentError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        }
    }
}

#[derive(
    Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum Dimension {
    Clarity,
    Specificity,
    Relevance,
    /// Higher is lower risk.
    AccuracyRisk,
}

impl Dimension {
    pub const ALL: [Dimension; 4] = [
        Dimension::Clarity,
        Dimension::Specificity,
        Dimension::Relevance,
        Dimension::AccuracyRisk,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Dimension::Clarity => "clarity",
            Dimension::Specificity => "specificity",
            Dimension::Relevance => "relevance",
            Dimension::AccuracyRisk => "accuracy_risk",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Four scores indexed by [`Dimension::index`].
pub type DimensionScores = [f64; 4];

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Tanh approximation: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
pub fn gelu(x: f64) -> f64 {
    const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044_715 * x * x * x)).tanh())
}

/// Zero-mean, unit-variance normalization followed by gain and bias.
pub fn layer_norm(x: &Vector, gain: &Vector, bias: &Vector) -> Vector {
    let n = x.len() as f64;
    let mean = x.mean();
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    Vector::from_fn(x.len(), |i, _| (x[i] - mean) * inv * gain[i] + bias[i])
}

#[derive(Clone, Debug, PartialEq)]
pub struct QualityHead {
    pub w1: Matrix,
    pub b1: Vector,
    pub ln_gain: Vector,
    pub ln_bias: Vector,
    pub w2: Vector,
    pub b2: f64,
}

impl QualityHead {
    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        QualityHead {
            w1: Matrix::zeros(hidden, input_dim),
            b1: Vector::zeros(hidden),
            ln_gain: Vector::from_element(hidden, 1.0),
            ln_bias: Vector::zeros(hidden),
            w2: Vector::zeros(hidden),
            b2: 0.0,
        }
    }

    fn seeded(rng: &mut ChaCha8Rng, input_dim: usize, hidden: usize) -> Self {
        let w2 = glorot(rng, hidden, 1).column(0).into_owned();
        QualityHead {
            w1: glorot(rng, hidden, input_dim),
            b1: Vector::zeros(hidden),
            ln_gain: Vector::from_element(hidden, 1.0),
            ln_bias: Vector::zeros(hidden),
            w2,
            b2: rng.gen_range(-0.1..0.1),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden(&self) -> usize {
        self.w1.nrows()
    }
}

/// `sigmoid(W2 . GeLU(LayerNorm(W1 z + b1)) + b2)`.
pub fn score_dimension_head(z: &Vector, head: &QualityHead) -> Result<f64, AssessmentError> {
    if z.len() != head.input_dim() {
        return Err(AssessmentError::Shape(format!(
            "representation has dimension {}, head expects {}",
            z.len(),
            head.input_dim()
        )));
    }
    let pre = &head.w1 * z + &head.b1;
    let normed = layer_norm(&pre, &head.ln_gain, &head.ln_bias);
    let activated = normed.map(gelu);
    Ok(sigmoid(head.w2.dot(&activated) + head.b2))
}

#[derive(Clone, Debug, PartialEq)]
pub struct QualityHeads {
    heads: [QualityHead; 4],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeadFile {
    w1: Vec<Vec<f64>>,
    b1: Vec<f64>,
    ln_gain: Vec<f64>,
    ln_bias: Vec<f64>,
    w2: Vec<f64>,
    b2: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeadsFile {
    input_dim: usize,
    hidden: usize,
    heads: BTreeMap<Dimension, HeadFile>,
}

impl QualityHeads {
    pub fn new(heads: [QualityHead; 4]) -> Result<Self, AssessmentError> {
        let d = heads[0].input_dim();
        for (dim, h) in Dimension::ALL.iter().zip(&heads) {
            let hidden = h.hidden();
            let ok = h.input_dim() == d
                && h.b1.len() == hidden
                && h.ln_gain.len() == hidden
                && h.ln_bias.len() == hidden
                && h.w2.len() == hidden
                && hidden > 0;
            if !ok {
                return Err(AssessmentError::Heads(format!("{dim} head has inconsistent shapes")));
            }
        }
        Ok(QualityHeads { heads })
    }

    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        QualityHeads {
            heads: std::array::from_fn(|_| QualityHead::zeros(input_dim, hidden)),
        }
    }

    pub fn seeded(seed: u64, input_dim: usize, hidden: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        QualityHeads {
            heads: std::array::from_fn(|_| QualityHead::seeded(&mut rng, input_dim, hidden)),
        }
    }

    pub fn head(&self, dim: Dimension) -> &QualityHead {
        &self.heads[dim.index()]
    }

    pub fn input_dim(&self) -> usize {
        self.heads[0].input_dim()
    }

    pub fn score(&self, z: &Vector) -> Result<DimensionScores, AssessmentError> {
        let mut out = [0.0; 4];
        for dim in Dimension::ALL {
            out[dim.index()] = score_dimension_head(z, self.head(dim))?;
        }
        Ok(out)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, AssessmentError> {
        let f: HeadsFile = serde_json::from_slice(bytes)?;
        let bad = AssessmentError::Heads;
        let mut heads = Vec::with_capacity(4);
        for dim in Dimension::ALL {
            let h = f
                .heads
                .get(&dim)
                .ok_or_else(|| bad(format!("missing head for {dim}")))?;
            let name = |n: &str| format!("{dim}.{n}");
            heads.push(QualityHead {
                w1: matrix_from_rows(&h.w1, f.hidden, f.input_dim, &name("w1")).map_err(bad)?,
                b1: vector_from(&h.b1, f.hidden, &name("b1")).map_err(bad)?,
                ln_gain: vector_from(&h.ln_gain, f.hidden, &name("ln_gain")).map_err(bad)?,
                ln_bias: vector_from(&h.ln_bias, f.hidden, &name("ln_bias")).map_err(bad)?,
                w2: vector_from(&h.w2, f.hidden, &name("w2")).map_err(bad)?,
                b2: if h.b2.is_finite() {
                    h.b2
                } else {
                    return Err(bad(name("b2 is not finite")));
                },
            });
        }
        let heads: [QualityHead; 4] = heads.try_into().expect("four heads");
        QualityHeads::new(heads)
    }

    pub fn to_json(&self) -> Vec<u8> {
        let heads = Dimension::ALL
            .iter()
            .map(|&d| {
                let h = self.head(d);
                (
                    d,
                    HeadFile {
                        w1: matrix_rows(&h.w1),
                        b1: h.b1.iter().copied().collect(),
                        ln_gain: h.ln_gain.iter().copied().collect(),
                        ln_bias: h.ln_bias.iter().copied().collect(),
                        w2: h.w2.iter().copied().collect(),
                        b2: h.b2,
                    },
                )
            })
            .collect();
        let f = HeadsFile {
            input_dim: self.input_dim(),
            hidden: self.heads[0].hidden(),
            heads,
        };
        serde_json::to_vec(&f).expect("heads serialize")
    }
}

/// Per-scenario dimension weights; each row is nonnegative and sums to one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<ScenarioKind, BTreeMap<Dimension, f64>>")]
#[serde(into = "BTreeMap<ScenarioKind, BTreeMap<Dimension, f64>>")]
pub struct ScenarioWeights {
    rows: BTreeMap<ScenarioKind, [f64; 4]>,
}

impl ScenarioWeights {
    pub fn new(rows: BTreeMap<ScenarioKind, [f64; 4]>) -> Result<Self, AssessmentError> {
        let errors = Self::problems(&rows);
        if errors.is_empty() {
            Ok(ScenarioWeights { rows })
        } else {
            Err(AssessmentError::Weights(errors.join("; ")))
        }
    }

    /// Every violated invariant, one message per problem.
    pub fn problems(rows: &BTreeMap<ScenarioKind, [f64; 4]>) -> Vec<String> {
        let mut errors = Vec::new();
        for (s, w) in rows {
            if let Some((d, v)) = Dimension::ALL
                .iter()
                .zip(w)
                .find(|(_, v)| !v.is_finite() || **v < 0.0)
            {
                errors.push(format!("scenario {s}: weight for {d} is {v}, must be >= 0"));
            }
            let sum: f64 = w.iter().sum();
            if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
                errors.push(format!("scenario {s}: weights sum to {sum}, expected 1"));
            }
        }
        errors
    }

    /// Uniform weights for every scenario.
    pub fn uniform() -> Self {
        ScenarioWeights {
            rows: ScenarioKind::ALL.iter().map(|&s| (s, [0.25; 4])).collect(),
        }
    }

    pub fn weights(&self, scenario: ScenarioKind) -> Result<[f64; 4], AssessmentError> {
        self.rows
            .get(&scenario)
            .copied()
            .ok_or_else(|| AssessmentError::Weights(format!("no weights for scenario {scenario}")))
    }
}

impl Default for ScenarioWeights {
    /// Accuracy risk weighted 0.4 where the prompt leads to clinical
    /// recommendations (diagnosis, treatment), 0.25 elsewhere; the rest split evenly.
    fn default() -> Self {
        let rows = ScenarioKind::ALL
            .iter()
            .map(|&s| {
                let acc = match s {
                    ScenarioKind::Diagnosis | ScenarioKind::Treatment => 0.4,
                    ScenarioKind::History | ScenarioKind::Education => 0.25,
                };
                let rest = (1.0 - acc) / 3.0;
                (s, [rest, rest, rest, acc])
            })
            .collect();
        ScenarioWeights { rows }
    }
}

impl TryFrom<BTreeMap<ScenarioKind, BTreeMap<Dimension, f64>>> for ScenarioWeights {
    type Error = AssessmentError;

    fn try_from(raw: BTreeMap<ScenarioKind, BTreeMap<Dimension, f64>>) -> Result<Self, Self::Error> {
        let mut rows = BTreeMap::new();
        for (s, m) in raw {
            let mut w = [0.0; 4];
            for d in Dimension::ALL {
                w[d.index()] = *m.get(&d).ok_or_else(|| {
                    AssessmentError::Weights(format!("scenario {s}: missing weight for {d}"))
                })?;
            }
            rows.insert(s, w);
        }
        ScenarioWeights::new(rows)
    }
}

impl From<ScenarioWeights> for BTreeMap<ScenarioKind, BTreeMap<Dimension, f64>> {
    fn from(w: ScenarioWeights) -> Self {
        w.rows
            .into_iter()
            .map(|(s, row)| (s, Dimension::ALL.iter().map(|&d| (d, row[d.index()])).collect()))
            .collect()
    }
}

/// `Q = sum_c w_c(s) s_c`.
pub fn integrated_quality(
    scores: &BTreeMap<Dimension, f64>,
    scenario: ScenarioKind,
    weights: &ScenarioWeights,
) -> Result<f64, AssessmentError> {
    let w = weights.weights(scenario)?;
    let mut q = 0.0;
    for d in Dimension::ALL {
        let s = scores
            .get(&d)
            .ok_or(AssessmentError::MissingDimension(d))?;
        q += w[d.index()] * s;
    }
    Ok(q.clamp(0.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Head,
    Heuristic,
    Remote,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub scores: BTreeMap<Dimension, f64>,
    pub weights: BTreeMap<Dimension, f64>,
    pub quality: f64,
    pub provenance: Provenance,
}

impl QualityReport {
    pub fn new(scores: DimensionScores, weights: [f64; 4], provenance: Provenance) -> Self {
        let quality = Dimension::ALL
            .iter()
            .map(|d| weights[d.index()] * scores[d.index()])
            .sum::<f64>()
            .clamp(0.0, 1.0);
        let as_map = |v: [f64; 4]| Dimension::ALL.iter().map(|&d| (d, v[d.index()])).collect();
        QualityReport {
            scores: as_map(scores),
            weights: as_map(weights),
            quality,
            provenance,
        }
    }

    pub fn score(&self, dim: Dimension) -> f64 {
        self.scores[&dim]
    }

    /// Recomputes Q from the recorded scores and weights.
    pub fn is_consistent(&self) -> bool {
        let q: f64 = Dimension::ALL
            .iter()
            .map(|d| self.weights[d] * self.scores[d])
            .sum();
        (q.clamp(0.0, 1.0) - self.quality).abs() <= 1e-9
    }
}

/// Produces the four dimension scores for a genome.
pub trait DimensionScorer: Send + Sync {
    fn provenance(&self) -> Provenance;
    fn score(&self, genome: &PromptGenome) -> Result<DimensionScores, AssessmentError>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeuristicConfig {
    /// Concept-token density at which specificity saturates.
    pub specificity_cap: f64,
    pub scenario_keywords: BTreeMap<ScenarioKind, Vec<String>>,
    /// Phrases that signal unsupported or overconfident claims.
    pub claim_patterns: Vec<String>,
}

impl Default for HeuristicConfig {
    fn default() -> Self {
        let kw = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        HeuristicConfig {
            specificity_cap: 0.5,
            scenario_keywords: BTreeMap::from([
                (
                    ScenarioKind::Diagnosis,
                    kw(&["differential diagnosis", "symptoms", "workup", "red flags", "examination", "confidence", "probability", "evidence"]),
                ),
                (
                    ScenarioKind::Treatment,
                    kw(&["treatment options", "contraindications", "evidence", "dosage", "adverse effects", "guidelines", "patient factors", "monitoring"]),
                ),
                (
                    ScenarioKind::History,
                    kw(&["medical history", "current medications", "allergies", "timeline", "family history", "social history", "comorbidities", "review of systems"]),
                ),
                (
                    ScenarioKind::Education,
                    kw(&["explain", "plain language", "analogies", "comprehension", "concerns", "lifestyle", "follow-up", "warning signs"]),
                ),
            ]),
            claim_patterns: kw(&["always", "never", "guaranteed", "definitely", "certainly", "cure", "no risk", "without exception", "proven"]),
        }
    }
}

/// Deterministic text-feature scorer.
///
/// Over the normalized (lowercased, punctuation-stripped, nonempty) tokens of
/// the rendered prompt, with `n` the token count:
///
/// * clarity: `present categories / 5`, times 0.8 if the order is not canonical;
/// * specificity: `min(1, (lexicon-matched tokens / n) / specificity_cap)`;
/// * relevance: fraction of the scenario's keywords present as whole-word
///   phrases (0.5 when the scenario has no keywords);
/// * accuracy_risk: `1 - min(1, claim-pattern occurrences / n)`.
#[derive(Clone, Debug)]
pub struct HeuristicScorer {
    lexicon: Arc<Lexicon>,
    config: HeuristicConfig,
}

impl HeuristicScorer {
    pub fn new(lexicon: Arc<Lexicon>, config: HeuristicConfig) -> Self {
        HeuristicScorer { lexicon, config }
    }

    pub fn lexicon(&self) -> &Lexicon {
        &self.lexicon
    }

    pub fn config(&self) -> &HeuristicConfig {
        &self.config
    }

    pub fn score_genome(&self, genome: &PromptGenome) -> DimensionScores {
        let order_bonus = if genome.is_canonical() { 1.0 } else { 0.8 };
        let present = genome.components().len() as f64;
        let clarity = present / ComponentCategory::ALL.len() as f64 * order_bonus;
        let [specificity, relevance, accuracy] =
            self.text_scores(&render_text(genome), genome.scenario());
        [clarity, specificity, relevance, accuracy]
    }

    /// Mean of the four dimension scores with the component scored alone.
    pub fn component_quality(&self, component: &PromptComponent, scenario: ScenarioKind) -> f64 {
        let clarity = 1.0 / ComponentCategory::ALL.len() as f64;
        let [s, r, a] = self.text_scores(component.text(), scenario);
        (clarity + s + r + a) / 4.0
    }

    fn text_scores(&self, text: &str, scenario: ScenarioKind) -> [f64; 3] {
        let raw: Vec<String> = tokenize(text).into_iter().map(|t| t.text).collect();
        let words = normalized_words(text);
        let n = words.len();
        let specificity = if n == 0 {
            0.0
        } else {
            let matched: usize = identify_concepts(&raw, &self.lexicon)
                .iter()
                .map(|s| s.len())
                .sum();
            ((matched as f64 / n as f64) / self.config.specificity_cap).min(1.0)
        };
        let haystack = format!(" {} ", words.join(" "));
        let relevance = match self.config.scenario_keywords.get(&scenario) {
            Some(kws) if !kws.is_empty() => {
                let hits = kws
                    .iter()
                    .filter(|k| phrase_count(&haystack, k) > 0)
                    .count();
                hits as f64 / kws.len() as f64
            }
            _ => 0.5,
        };
        let accuracy = if n == 0 {
            1.0
        } else {
            let hits: usize = self
                .config
                .claim_patterns
                .iter()
                .map(|p| phrase_count(&haystack, p))
                .sum();
            1.0 - (hits as f64 / n as f64).min(1.0)
        };
        [specificity, relevance, accuracy]
    }
}

/// Whole-word occurrences of `phrase` in a space-padded normalized haystack.
pub(crate) fn phrase_count(padded_haystack: &str, phrase: &str) -> usize {
    let words = normalized_words(phrase);
    if words.is_empty() {
        return 0;
    }
    let needle = format!(" {} ", words.join(" "));
    // Overlapping matches share the separating space, so step past the
    // needle minus its trailing space.
    let mut count = 0;
    let mut from = 0;
    while let Some(pos) = padded_haystack[from..].find(&needle) {
        count += 1;
        from += pos + needle.len() - 1;
    }
    count
}

pub fn heuristic_dimension_score(
    genome: &PromptGenome,
    dim: Dimension,
    lexicon: &Arc<Lexicon>,
    config: &HeuristicConfig,
) -> f64 {
    HeuristicScorer::new(Arc::clone(lexicon), config.clone()).score_genome(genome)[dim.index()]
}

impl DimensionScorer for HeuristicScorer {
    fn provenance(&self) -> Provenance {
        Provenance::Heuristic
    }

    fn score(&self, genome: &PromptGenome) -> Result<DimensionScores, AssessmentError> {
        Ok(self.score_genome(genome))
    }
}

/// Quality heads over the encoder's final representation.
#[derive(Clone)]
pub struct HeadScorer {
    encoder: PromptEncoder,
    heads: Arc<QualityHeads>,
}

impl HeadScorer {
    pub fn new(encoder: PromptEncoder, heads: Arc<QualityHeads>) -> Result<Self, AssessmentError> {
        if encoder.weights.dims.d_final != heads.input_dim() {
            return Err(AssessmentError::Shape(format!(
                "encoder output {} does not match head input {}",
                encoder.weights.dims.d_final,
                heads.input_dim()
            )));
        }
        Ok(HeadScorer { encoder, heads })
    }
}

impl DimensionScorer for HeadScorer {
    fn provenance(&self) -> Provenance {
        Provenance::Head
    }

    fn score(&self, genome: &PromptGenome) -> Result<DimensionScores, AssessmentError> {
        let z = self.encoder.encode(genome)?;
        self.heads.score(&z)
    }
}

/// Scores with a primary backend, optionally falling back on failure.
#[derive(Clone)]
pub struct Assessor {
    primary: Arc<dyn DimensionScorer>,
    fallback: Option<Arc<dyn DimensionScorer>>,
    weights: ScenarioWeights,
}

impl Assessor {
    pub fn new(primary: Arc<dyn DimensionScorer>, weights: ScenarioWeights) -> Self {
        Assessor {
            primary,
            fallback: None,
            weights,
        }
    }

    pub fn with_fallback(mut self, fallback: Arc<dyn DimensionScorer>) -> Self {
        self.fallback = Some(fallback);
        self
    }

    pub fn weights(&self) -> &ScenarioWeights {
        &self.weights
    }

    pub fn assess(&self, genome: &PromptGenome) -> Result<QualityReport, AssessmentError> {
        assess(genome, self.primary.as_ref(), self.fallback.as_deref(), &self.weights)
    }
}

pub fn assess(
    genome: &PromptGenome,
    scorer: &dyn DimensionScorer,
    fallback: Option<&dyn DimensionScorer>,
    weights: &ScenarioWeights,
) -> Result<QualityReport, AssessmentError> {
    let w = weights.weights(genome.scenario())?;
    let (scores, provenance) = match scorer.score(genome) {
        Ok(s) => (s, scorer.provenance()),
        Err(e) => match fallback {
            Some(fb) => {
                log::warn!("quality scorer failed ({e}); using {:?} fallback", fb.provenance());
                (fb.score(genome)?, fb.provenance())
            }
            None => return Err(e),
        },
    };
    let scores = scores.map(|s| if s.is_finite() { s.clamp(0.0, 1.0) } else { 0.0 });
    Ok(QualityReport::new(scores, w, provenance))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::genome::Origin;
    use crate::representation::{Dims, HashEmbedder, ProjectionWeights};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn scores_map(v: [f64; 4]) -> BTreeMap<Dimension, f64> {
        Dimension::ALL.iter().map(|&d| (d, v[d.index()])).collect()
    }

    #[test]
    fn zero_head_is_half() {
        let head = QualityHead::zeros(8, 16);
        let z = Vector::from_fn(8, |i, _| i as f64 - 3.0);
        assert_eq!(score_dimension_head(&z, &head).unwrap(), 0.5);
    }

    #[test]
    fn bias_only_head() {
        let mut head = QualityHead::seeded(&mut ChaCha8Rng::seed_from_u64(1), 8, 16);
        head.w2 = Vector::zeros(16);
        head.b2 = 4.0;
        let z = Vector::from_element(8, 0.3);
        let expected = 1.0 / (1.0 + (-4.0f64).exp());
        assert_abs_diff_eq!(score_dimension_head(&z, &head).unwrap(), expected, epsilon = 1e-15);
        assert_abs_diff_eq!(expected, 0.9820, epsilon = 1e-4);
    }

    #[test]
    fn head_shape_mismatch() {
        let head = QualityHead::zeros(8, 16);
        assert!(matches!(score_dimension_head(&Vector::zeros(7), &head), Err(AssessmentError::Shape(_))));
    }

    fn erf(x: f64) -> f64 {
        // Abramowitz-Stegun 7.1.26 is too coarse; integrate exp(-t^2) with Simpson.
        let n = 20_000;
        let h = x / n as f64;
        let f = |t: f64| (-t * t).exp();
        let mut s = f(0.0) + f(x);
        for i in 1..n {
            let t = i as f64 * h;
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(t);
        }
        s * h / 3.0 * 2.0 / std::f64::consts::PI.sqrt()
    }

    #[test]
    fn gelu_close_to_exact() {
        for i in -40..=40 {
            let x = i as f64 / 8.0;
            let exact = 0.5 * x * (1.0 + erf(x / 2f64.sqrt()));
            assert!((gelu(x) - exact).abs() < 1e-3, "x={x}");
        }
        assert_eq!(gelu(0.0), 0.0);
    }

    #[test]
    fn layer_norm_moments() {
        let x = Vector::from_vec(vec![1.0, 2.0, 3.0, 6.0]);
        let y = layer_norm(&x, &Vector::from_element(4, 1.0), &Vector::zeros(4));
        assert_abs_diff_eq!(y.mean(), 0.0, epsilon = 1e-12);
        let var = y.iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert_abs_diff_eq!(var, 1.0, epsilon = 1e-4);
    }

    #[test]
    fn integrated_quality_examples() {
        let mut rows = BTreeMap::new();
        rows.insert(ScenarioKind::Diagnosis, [1.0, 0.0, 0.0, 0.0]);
        let clarity_only = ScenarioWeights::new(rows).unwrap();
        let s = scores_map([0.37, 0.9, 0.1, 0.2]);
        assert_eq!(integrated_quality(&s, ScenarioKind::Diagnosis, &clarity_only).unwrap(), 0.37);
        let half = scores_map([0.5; 4]);
        assert_abs_diff_eq!(integrated_quality(&half, ScenarioKind::Treatment, &ScenarioWeights::default()).unwrap(), 0.5, epsilon = 1e-12);
        // 0.25 * (0.8 + 0.6 + 0.4 + 0.9) = 0.25 * 2.7
        let s = scores_map([0.8, 0.6, 0.4, 0.9]);
        assert_abs_diff_eq!(integrated_quality(&s, ScenarioKind::History, &ScenarioWeights::uniform()).unwrap(), 0.675, epsilon = 1e-12);
        let mut missing = s.clone();
        missing.remove(&Dimension::Relevance);
        assert!(matches!(
            integrated_quality(&missing, ScenarioKind::History, &ScenarioWeights::uniform()),
            Err(AssessmentError::MissingDimension(Dimension::Relevance))
        ));
    }

    #[test]
    fn scenario_weight_validation() {
        let bad = BTreeMap::from([(ScenarioKind::Education, [0.3, 0.3, 0.2, 0.1])]);
        let err = ScenarioWeights::new(bad).unwrap_err().to_string();
        assert!(err.contains("education"), "{err}");
        let neg = BTreeMap::from([(ScenarioKind::Diagnosis, [1.2, -0.2, 0.0, 0.0])]);
        assert!(ScenarioWeights::new(neg).is_err());
        let d = ScenarioWeights::default();
        assert_eq!(d.weights(ScenarioKind::Diagnosis).unwrap()[3], 0.4);
        assert_eq!(d.weights(ScenarioKind::Education).unwrap(), [0.25; 4]);
        let json = serde_json::to_string(&d).unwrap();
        let back: ScenarioWeights = serde_json::from_str(&json).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn heuristic_full_coverage_clarity() {
        let lex = Arc::new(fixtures::default_lexicon());
        let comps = ComponentCategory::ALL
            .iter()
            .map(|&c| PromptComponent::new(c, "Plain words here.", 0.5, Origin::Library).unwrap())
            .collect();
        let g = PromptGenome::new(0, ScenarioKind::Diagnosis, comps).unwrap();
        let cfg = HeuristicConfig::default();
        assert_eq!(heuristic_dimension_score(&g, Dimension::Clarity, &lex, &cfg), 1.0);
        assert_eq!(heuristic_dimension_score(&g, Dimension::Specificity, &lex, &cfg), 0.0);
    }

    #[test]
    fn heuristic_fixture_scores() {
        // Fixture: 10 normalized tokens, 3 inside lexicon spans ("chest pain", "ECG"),
        // 4 of 5 categories, 2 of 5 keywords, 1 claim pattern.
        let (genome, lexicon, config, _) = fixtures::evaluation_fixture();
        let scorer = HeuristicScorer::new(Arc::new(lexicon), config);
        let s = scorer.score_genome(&genome);
        assert_eq!(normalized_words(&render_text(&genome)).len(), 10);
        assert_abs_diff_eq!(s[Dimension::Clarity.index()], 0.8, epsilon = 1e-12);
        assert_abs_diff_eq!(s[Dimension::Specificity.index()], 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(s[Dimension::Relevance.index()], 0.4, epsilon = 1e-12);
        assert_abs_diff_eq!(s[Dimension::AccuracyRisk.index()], 0.9, epsilon = 1e-12);
    }

    #[test]
    fn phrase_counting() {
        assert_eq!(phrase_count(" always and always ", "always"), 2);
        assert_eq!(phrase_count(" alwaysx ", "always"), 0);
        assert_eq!(phrase_count(" no risk no risk ", "no risk"), 2);
    }

    #[test]
    fn assess_heuristic_is_deterministic() {
        let (genome, lexicon, config, weights) = fixtures::evaluation_fixture();
        let scorer = HeuristicScorer::new(Arc::new(lexicon), config);
        let a = Assessor::new(Arc::new(scorer), weights);
        let r1 = a.assess(&genome).unwrap();
        let r2 = a.assess(&genome).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(r1.provenance, Provenance::Heuristic);
        assert!(r1.is_consistent());
        assert_abs_diff_eq!(r1.quality, 0.675, epsilon = 1e-12);
    }

    #[test]
    fn assess_zero_heads() {
        let lex = Arc::new(fixtures::default_lexicon());
        let dims = Dims::default();
        let enc = PromptEncoder::new(
            Arc::new(HashEmbedder::new(1, dims.d).unwrap()),
            lex,
            Arc::new(ProjectionWeights::seeded(2, dims)),
        )
        .unwrap();
        let scorer = HeadScorer::new(enc, Arc::new(QualityHeads::zeros(dims.d_final, 32))).unwrap();
        let (genome, ..) = fixtures::evaluation_fixture();
        let r = assess(&genome, &scorer, None, &ScenarioWeights::default()).unwrap();
        assert!(r.scores.values().all(|&s| s == 0.5));
        assert_abs_diff_eq!(r.quality, 0.5, epsilon = 1e-12);
        assert_eq!(r.provenance, Provenance::Head);
    }

    struct Failing;
    impl DimensionScorer for Failing {
        fn provenance(&self) -> Provenance {
            Provenance::Remote
        }
        fn score(&self, _: &PromptGenome) -> Result<DimensionScores, AssessmentError> {
            Err(AssessmentError::Backend("down".into()))
        }
    }

    #[test]
    fn fallback_records_provenance() {
        let (genome, lexicon, config, weights) = fixtures::evaluation_fixture();
        let heuristic = HeuristicScorer::new(Arc::new(lexicon), config);
        assert!(matches!(assess(&genome, &Failing, None, &weights), Err(AssessmentError::Backend(_))));
        let r = assess(&genome, &Failing, Some(&heuristic), &weights).unwrap();
        assert_eq!(r.provenance, Provenance::Heuristic);
    }

    #[test]
    fn heads_file_round_trip() {
        let h = QualityHeads::seeded(5, 4, 6);
        assert_eq!(QualityHeads::from_json(&h.to_json()).unwrap(), h);
        let mut v: serde_json::Value = serde_json::from_slice(&h.to_json()).unwrap();
        v["heads"]["clarity"]["b1"] = serde_json::json!([0.0]);
        assert!(QualityHeads::from_json(&serde_json::to_vec(&v).unwrap()).is_err());
    }

    proptest! {
        #[test]
        fn head_output_in_open_unit_interval(seed in any::<u64>(), z in proptest::collection::vec(-10.0f64..10.0, 6)) {
            let heads = QualityHeads::seeded(seed, 6, 12);
            let z = Vector::from_vec(z);
            for s in heads.score(&z).unwrap() {
                prop_assert!(s > 0.0 && s < 1.0);
            }
        }

        #[test]
        fn quality_monotone_in_each_dimension(
            base in proptest::collection::vec(0.0f64..1.0, 4),
            dim in 0usize..4,
            bump in 0.0f64..0.5,
            s in 0usize..4,
        ) {
            let w = ScenarioWeights::default();
            let scenario = ScenarioKind::ALL[s];
            let before: [f64; 4] = base.clone().try_into().unwrap();
            let mut after = before;
            after[dim] = (after[dim] + bump).min(1.0);
            let q0 = integrated_quality(&scores_map(before), scenario, &w).unwrap();
            let q1 = integrated_quality(&scores_map(after), scenario, &w).unwrap();
            prop_assert!(q1 >= q0);
            let r = QualityReport::new(after, w.weights(scenario).unwrap(), Provenance::Heuristic);
            prop_assert!(r.is_consistent());
            prop_assert!((0.0..=1.0).contains(&r.quality));
        }
    }
}
