//! Prompt representation: token embeddings, lexicon concept spans, concept
//! attention, and the terminology / reasoning-structure / final projections.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::genome::{render_text, ComponentCategory, PromptGenome};

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

/// Minimum normalized edit similarity for a fuzzy lexicon match.
pub const FUZZY_THRESHOLD: f64 = 0.8;

#[derive(Debug, thiserror::Error)]
pub enum RepresentationError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("no concepts")]
    NoConcepts,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("embedding backend error: {0}")]
    Backend(String),
    #[error("invalid lexicon: {0}")]
    InvalidLexicon(String),
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<serde_json::Error> for RepresentationError {
    fn from(e: serde_json::Error) -> Self {
        RepresentationError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        }
    }
}

/// A whitespace-delimited token with its byte range in the source text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

pub fn tokenize(text: &str) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut start = None;
    for (i, ch) in text.char_indices() {
        match (ch.is_whitespace(), start) {
            (true, Some(s)) => {
                tokens.push(Token {
                    text: text[s..i].to_string(),
                    start: s,
                    end: i,
                });
                start = None;
            }
            (false, None) => start = Some(i),
            _ => {}
        }
    }
    if let Some(s) = start {
        tokens.push(Token {
            text: text[s..].to_string(),
            start: s,
            end: text.len(),
        });
    }
    tokens
}

/// Lowercases and strips leading/trailing punctuation; may return "".
pub fn normalize_token(token: &str) -> String {
    token
        .trim_matches(|c: char| !c.is_alphanumeric())
        .to_lowercase()
}

/// Normalized tokens of `text`, dropping punctuation-only tokens.
pub fn normalized_words(text: &str) -> Vec<String> {
    tokenize(text)
        .iter()
        .map(|t| normalize_token(&t.text))
        .filter(|t| !t.is_empty())
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    OfflineHash,
    Remote,
}

/// Output of an embedding provider for one text.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub tokens: Vec<String>,
    /// One row per token, `n x d`.
    pub hidden: Matrix,
    pub cls: Vector,
}

pub trait EmbeddingProvider: Send + Sync {
    fn kind(&self) -> BackendKind;
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Embedding, RepresentationError>;
}

/// Seeded feature-hashing embedder.
///
/// Each token hashes its normalized form (weight 1) and its boundary-padded
/// character trigrams (weight 0.5) into `dim` signed buckets; the token vector
/// is the L2-normalized sum. The CLS vector is the L2-normalized token mean.
#[derive(Clone, Debug)]
pub struct HashEmbedder {
    seed: u64,
    dim: usize,
}

pub const DEFAULT_EMBEDDING_DIM: usize = 64;

impl HashEmbedder {
    pub fn new(seed: u64, dim: usize) -> Result<Self, RepresentationError> {
        if dim == 0 {
            return Err(RepresentationError::Shape("embedding dimension must be > 0".into()));
        }
        Ok(HashEmbedder { seed, dim })
    }

    pub fn token_vector(&self, token: &str) -> Vector {
        let norm = normalize_token(token);
        let key = if norm.is_empty() {
            token.to_lowercase()
        } else {
            norm
        };
        let mut v = Vector::zeros(self.dim);
        self.add_feature(&mut v, key.as_bytes(), 1.0);
        let padded: Vec<char> = format!("^{key}$").chars().collect();
        for tri in padded.windows(3) {
            let s: String = tri.iter().collect();
            self.add_feature(&mut v, s.as_bytes(), 0.5);
        }
        normalize_in_place(&mut v);
        v
    }

    fn add_feature(&self, v: &mut Vector, bytes: &[u8], weight: f64) {
        let h = stable_hash(self.seed, bytes);
        let bucket = (h % self.dim as u64) as usize;
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        v[bucket] += sign * weight;
    }
}

impl EmbeddingProvider for HashEmbedder {
    fn kind(&self) -> BackendKind {
        BackendKind::OfflineHash
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Embedding, RepresentationError> {
        let tokens: Vec<String> = tokenize(text).into_iter().map(|t| t.text).collect();
        if tokens.is_empty() {
            return Err(RepresentationError::EmptyText);
        }
        let mut hidden = Matrix::zeros(tokens.len(), self.dim);
        for (i, t) in tokens.iter().enumerate() {
            hidden.set_row(i, &self.token_vector(t).transpose());
        }
        let mut cls = hidden.row_mean().transpose();
        normalize_in_place(&mut cls);
        Ok(Embedding {
            tokens,
            hidden,
            cls,
        })
    }
}

fn normalize_in_place(v: &mut Vector) {
    let n = v.norm();
    if n > 0.0 {
        *v /= n;
    }
}

/// FNV-1a over `seed || bytes`, finished with the splitmix64 mixer.
fn stable_hash(seed: u64, bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in seed.to_le_bytes().iter().chain(bytes) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

/// Cosine similarity; zero when either vector has zero norm.
pub fn cosine(a: &Vector, b: &Vector) -> f64 {
    let denom = a.norm() * b.norm();
    if denom == 0.0 {
        0.0
    } else {
        a.dot(b) / denom
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LexiconEntry {
    pub surface_forms: Vec<String>,
    pub concept_id: String,
    pub semantic_type: String,
    pub taxonomy_depth: u32,
    pub type_priority: f64,
}

#[derive(Clone, Debug)]
struct SurfaceForm {
    entry: usize,
    tokens: Vec<String>,
    joined: String,
    chars: usize,
    hist: CharHist,
}

const HIST_BUCKETS: usize = 64;
type CharHist = [u16; HIST_BUCKETS];

fn char_hist(s: &str) -> CharHist {
    let mut h = [0u16; HIST_BUCKETS];
    for c in s.chars() {
        let b = &mut h[c as usize % HIST_BUCKETS];
        *b = b.saturating_add(1);
    }
    h
}

/// Lower bound on the edit distance: every edit moves at most one character
/// in and one out of the multiset.
fn bag_distance(a: &CharHist, b: &CharHist) -> usize {
    let (mut extra, mut missing) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        if x > y {
            extra += usize::from(x - y);
        } else {
            missing += usize::from(y - x);
        }
    }
    extra.max(missing)
}

/// Validated lexicon with pre-normalized surface forms.
#[derive(Clone, Debug, Default)]
pub struct Lexicon {
    entries: Vec<LexiconEntry>,
    forms: Vec<SurfaceForm>,
    by_id: HashMap<String, usize>,
    exact: HashMap<String, Vec<usize>>,
    /// Form indices grouped by token count.
    by_tokens: Vec<Vec<usize>>,
    max_form_tokens: usize,
}

impl Lexicon {
    pub fn new(entries: Vec<LexiconEntry>) -> Result<Self, RepresentationError> {
        let mut by_id = HashMap::new();
        let mut forms = Vec::new();
        let mut exact: HashMap<String, Vec<usize>> = HashMap::new();
        for (i, e) in entries.iter().enumerate() {
            if by_id.insert(e.concept_id.clone(), i).is_some() {
                return Err(RepresentationError::InvalidLexicon(format!(
                    "duplicate concept_id `{}`",
                    e.concept_id
                )));
            }
            if e.surface_forms.is_empty() {
                return Err(RepresentationError::InvalidLexicon(format!(
                    "`{}` has no surface forms",
                    e.concept_id
                )));
            }
            if !(0.0..=1.0).contains(&e.type_priority) {
                return Err(RepresentationError::InvalidLexicon(format!(
                    "`{}` type_priority {} outside [0, 1]",
                    e.concept_id, e.type_priority
                )));
            }
            for sf in &e.surface_forms {
                let tokens = normalized_words(sf);
                if tokens.is_empty() {
                    return Err(RepresentationError::InvalidLexicon(format!(
                        "`{}` has an empty surface form",
                        e.concept_id
                    )));
                }
                let joined = tokens.join(" ");
                exact.entry(joined.clone()).or_default().push(forms.len());
                forms.push(SurfaceForm {
                    entry: i,
                    chars: joined.chars().count(),
                    hist: char_hist(&joined),
                    tokens,
                    joined,
                });
            }
        }
        let max_form_tokens = forms.iter().map(|f| f.tokens.len()).max().unwrap_or(0);
        let mut by_tokens = vec![Vec::new(); max_form_tokens + 1];
        for (k, f) in forms.iter().enumerate() {
            by_tokens[f.tokens.len()].push(k);
        }
        Ok(Lexicon {
            entries,
            forms,
            by_id,
            exact,
            by_tokens,
            max_form_tokens,
        })
    }

    pub fn entries(&self) -> &[LexiconEntry] {
        &self.entries
    }

    pub fn get(&self, concept_id: &str) -> Option<&LexiconEntry> {
        self.by_id.get(concept_id).map(|&i| &self.entries[i])
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn parse_lexicon(bytes: &[u8]) -> Result<Lexicon, RepresentationError> {
    let entries: Vec<LexiconEntry> = serde_json::from_slice(bytes)?;
    Lexicon::new(entries)
}

pub fn load_lexicon(path: &Path) -> Result<Lexicon, RepresentationError> {
    parse_lexicon(&fs::read(path)?)
}

/// A matched concept over tokens `start..=end`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptSpan {
    pub concept_id: String,
    pub start: usize,
    pub end: usize,
    pub confidence: f64,
}

impl ConceptSpan {
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// `1 - levenshtein / max_len` over characters.
pub fn edit_similarity(a: &str, b: &str) -> f64 {
    strsim::normalized_levenshtein(a, b)
}

fn consider<'a>(best: &mut Option<(usize, f64, &'a str)>, len: usize, conf: f64, id: &'a str) {
    let better = match *best {
        None => true,
        Some((bl, bc, bid)) => len > bl || (len == bl && (conf > bc || (conf == bc && id < bid))),
    };
    if better {
        *best = Some((len, conf, id));
    }
}

/// Greedy left-to-right longest match against the lexicon.
///
/// Candidates at a position are ranked by span length, then confidence, then
/// the lexicographically smallest concept id. Fuzzy candidates below
/// [`FUZZY_THRESHOLD`] are discarded.
pub fn identify_concepts<S: AsRef<str>>(tokens: &[S], lexicon: &Lexicon) -> Vec<ConceptSpan> {
    let norm: Vec<String> = tokens.iter().map(|t| normalize_token(t.as_ref())).collect();
    let n = norm.len();
    let mut spans = Vec::new();
    let mut i = 0;
    while i < n {
        if norm[i].is_empty() {
            i += 1;
            continue;
        }
        let mut best: Option<(usize, f64, &str)> = None;
        let max_len = lexicon.max_form_tokens.min(n - i);
        for len in 1..=max_len {
            let window = &norm[i..i + len];
            if window.iter().any(String::is_empty) {
                break;
            }
            let joined = window.join(" ");
            if let Some(hits) = lexicon.exact.get(&joined) {
                for &f in hits {
                    let id = lexicon.entries[lexicon.forms[f].entry].concept_id.as_str();
                    consider(&mut best, len, 1.0, id);
                }
            }
            let chars = joined.chars().count();
            let hist = char_hist(&joined);
            for form in lexicon.by_tokens[len].iter().map(|&k| &lexicon.forms[k]) {
                let longest = chars.max(form.chars) as f64;
                let diff = chars.abs_diff(form.chars) as f64;
                if form.joined == joined || 1.0 - diff / longest < FUZZY_THRESHOLD {
                    continue;
                }
                if 1.0 - bag_distance(&hist, &form.hist) as f64 / longest < FUZZY_THRESHOLD {
                    continue;
                }
                let sim = edit_similarity(&joined, &form.joined);
                if sim >= FUZZY_THRESHOLD {
                    let id = lexicon.entries[form.entry].concept_id.as_str();
                    consider(&mut best, len, sim, id);
                }
            }
        }
        match best {
            Some((len, conf, id)) => {
                spans.push(ConceptSpan {
                    concept_id: id.to_string(),
                    start: i,
                    end: i + len - 1,
                    confidence: conf,
                });
                i += len;
            }
            None => i += 1,
        }
    }
    spans
}

/// Concept ids found in `text`, deduplicated in order of first appearance.
pub fn concept_set(text: &str, lexicon: &Lexicon) -> Vec<String> {
    let tokens: Vec<String> = tokenize(text).into_iter().map(|t| t.text).collect();
    let mut seen = HashSet::new();
    identify_concepts(&tokens, lexicon)
        .into_iter()
        .filter(|s| seen.insert(s.concept_id.clone()))
        .map(|s| s.concept_id)
        .collect()
}

/// Mean of hidden rows `start..=end`.
pub fn concept_representation(
    hidden: &Matrix,
    span: &ConceptSpan,
) -> Result<Vector, RepresentationError> {
    if span.start > span.end || span.end >= hidden.nrows() {
        return Err(RepresentationError::Shape(format!(
            "span {}..={} outside {} rows",
            span.start,
            span.end,
            hidden.nrows()
        )));
    }
    let rows = hidden.rows(span.start, span.len());
    Ok(rows.row_mean().transpose())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionWeights {
    pub w_s: f64,
    pub w_h: f64,
    pub w_p: f64,
}

/// Per-concept inputs to the attention logits.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionFactors {
    /// Semantic-type priority.
    pub semantic: f64,
    /// `1 / (1 + taxonomy_depth)`.
    pub hierarchy: f64,
    /// `1 - start / n`.
    pub position: f64,
}

impl AttentionFactors {
    pub fn for_span(entry: &LexiconEntry, span: &ConceptSpan, n_tokens: usize) -> Self {
        AttentionFactors {
            semantic: entry.type_priority,
            hierarchy: 1.0 / (1.0 + f64::from(entry.taxonomy_depth)),
            position: 1.0 - span.start as f64 / n_tokens.max(1) as f64,
        }
    }

    fn logit(&self, w: &AttentionWeights) -> f64 {
        w.w_s * self.semantic + w.w_h * self.hierarchy + w.w_p * self.position
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn concept_attention(
    factors: &[AttentionFactors],
    weights: &AttentionWeights,
) -> Result<Vec<f64>, RepresentationError> {
    if factors.is_empty() {
        return Err(RepresentationError::NoConcepts);
    }
    let logits: Vec<f64> = factors.iter().map(|f| f.logit(weights)).collect();
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(RepresentationError::NonFinite("attention logits".into()));
    }
    Ok(softmax(&logits))
}

/// `W_g [cls; sum_i alpha_i m_i] + b_g`. With no concepts the pooled half is zero.
pub fn terminology_representation(
    cls: &Vector,
    concept_vectors: &[Vector],
    alpha: &[f64],
    w_g: &Matrix,
    b_g: &Vector,
) -> Result<Vector, RepresentationError> {
    let d = cls.len();
    if concept_vectors.len() != alpha.len() {
        return Err(RepresentationError::Shape(format!(
            "{} concept vectors but {} attention weights",
            concept_vectors.len(),
            alpha.len()
        )));
    }
    let mut pooled = Vector::zeros(d);
    for (m, a) in concept_vectors.iter().zip(alpha) {
        if m.len() != d {
            return Err(RepresentationError::Shape(format!(
                "concept vector has dimension {}, expected {d}",
                m.len()
            )));
        }
        pooled.axpy(*a, m, 1.0);
    }
    let joined = concat(cls, &pooled);
    affine(w_g, &joined, b_g, "W_g")
}

/// Softmax over present components of their quality; absent slots get zero weight.
pub fn reasoning_weights(genome: &PromptGenome) -> [f64; 5] {
    let present: Vec<(usize, f64)> = genome
        .components()
        .iter()
        .map(|c| (c.category().index(), c.quality()))
        .collect();
    let mut w = [0.0; 5];
    if present.is_empty() {
        return w;
    }
    let probs = softmax(&present.iter().map(|p| p.1).collect::<Vec<_>>());
    for ((slot, _), p) in present.iter().zip(probs) {
        w[*slot] = p;
    }
    w
}

/// `r_P = sum_j w_j e_j` over the canonical category slots.
pub fn reasoning_structure_encoding(genome: &PromptGenome, pw: &ProjectionWeights) -> Vector {
    let mut r = Vector::zeros(pw.dims.k);
    for (w, e) in reasoning_weights(genome).iter().zip(&pw.reasoning_embeddings) {
        if *w > 0.0 {
            r.axpy(*w, e, 1.0);
        }
    }
    r
}

/// `W_f [z_P; r_P] + b_f`.
pub fn final_representation(
    z: &Vector,
    r: &Vector,
    pw: &ProjectionWeights,
) -> Result<Vector, RepresentationError> {
    affine(&pw.w_f, &concat(z, r), &pw.b_f, "W_f")
}

fn concat(a: &Vector, b: &Vector) -> Vector {
    Vector::from_iterator(a.len() + b.len(), a.iter().chain(b.iter()).copied())
}

fn affine(w: &Matrix, x: &Vector, b: &Vector, name: &str) -> Result<Vector, RepresentationError> {
    if w.ncols() != x.len() || w.nrows() != b.len() {
        return Err(RepresentationError::Shape(format!(
            "{name} is {}x{}, input {} and bias {}",
            w.nrows(),
            w.ncols(),
            x.len(),
            b.len()
        )));
    }
    let out = w * x + b;
    if out.iter().any(|v| !v.is_finite()) {
        return Err(RepresentationError::NonFinite(name.into()));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dims {
    /// Token embedding width.
    pub d: usize,
    /// Terminology representation width.
    pub d_prime: usize,
    /// Final representation width.
    pub d_final: usize,
    /// Reasoning slots, one per canonical category.
    pub k: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Dims {
            d: DEFAULT_EMBEDDING_DIM,
            d_prime: 32,
            d_final: 16,
            k: ComponentCategory::ALL.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionWeights {
    pub dims: Dims,
    pub attention: AttentionWeights,
    pub w_g: Matrix,
    pub b_g: Vector,
    pub w_f: Matrix,
    pub b_f: Vector,
    pub reasoning_embeddings: Vec<Vector>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProjectionWeightsFile {
    dims: Dims,
    attention: AttentionWeights,
    w_g: Vec<Vec<f64>>,
    b_g: Vec<f64>,
    w_f: Vec<Vec<f64>>,
    b_f: Vec<f64>,
    reasoning_embeddings: Vec<Vec<f64>>,
}

pub(crate) fn matrix_from_rows(
    rows: &[Vec<f64>],
    nrows: usize,
    ncols: usize,
    name: &str,
) -> Result<Matrix, String> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(format!("{name} must be {nrows}x{ncols}"));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(format!("{name} has non-finite entries"));
    }
    Ok(Matrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub(crate) fn vector_from(values: &[f64], len: usize, name: &str) -> Result<Vector, String> {
    if values.len() != len {
        return Err(format!("{name} must have length {len}"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(format!("{name} has non-finite entries"));
    }
    Ok(Vector::from_column_slice(values))
}

pub(crate) fn matrix_rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Glorot-uniform matrix from a seeded stream.
pub(crate) fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-limit..limit))
}

impl ProjectionWeights {
    /// Deterministic weights for a fixed seed; used to produce the shipped default file.
    pub fn seeded(seed: u64, dims: Dims) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w_g = glorot(&mut rng, dims.d_prime, 2 * dims.d);
        let w_f = glorot(&mut rng, dims.d_final, dims.d_prime + dims.k);
        let reasoning_embeddings = (0..dims.k)
            .map(|_| Vector::from_fn(dims.k, |_, _| rng.gen_range(-1.0..1.0)))
            .collect();
        ProjectionWeights {
            dims,
            attention: AttentionWeights {
                w_s: 1.0,
                w_h: 0.5,
                w_p: 0.25,
            },
            w_g,
            b_g: Vector::zeros(dims.d_prime),
            w_f,
            b_f: Vector::zeros(dims.d_final),
            reasoning_embeddings,
        }
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, RepresentationError> {
        let f: ProjectionWeightsFile = serde_json::from_slice(bytes)?;
        let dims = f.dims;
        let bad = RepresentationError::InvalidWeights;
        if dims.d == 0 || dims.d_prime == 0 || dims.d_final == 0 {
            return Err(bad("dimensions must be > 0".into()));
        }
        if dims.k != ComponentCategory::ALL.len() {
            return Err(bad(format!(
                "k must equal the number of categories ({}), got {}",
                ComponentCategory::ALL.len(),
                dims.k
            )));
        }
        let a = f.attention;
        if ![a.w_s, a.w_h, a.w_p].iter().all(|v| v.is_finite()) {
            return Err(bad("attention weights must be finite".into()));
        }
        let w_g = matrix_from_rows(&f.w_g, dims.d_prime, 2 * dims.d, "w_g").map_err(bad)?;
        let b_g = vector_from(&f.b_g, dims.d_prime, "b_g").map_err(bad)?;
        let w_f =
            matrix_from_rows(&f.w_f, dims.d_final, dims.d_prime + dims.k, "w_f").map_err(bad)?;
        let b_f = vector_from(&f.b_f, dims.d_final, "b_f").map_err(bad)?;
        if f.reasoning_embeddings.len() != dims.k {
            return Err(bad(format!("reasoning_embeddings must have {} rows", dims.k)));
        }
        let reasoning_embeddings = f
            .reasoning_embeddings
            .iter()
            .map(|e| vector_from(e, dims.k, "reasoning_embeddings"))
            .collect::<Result<_, _>>()
            .map_err(bad)?;
        Ok(ProjectionWeights {
            dims,
            attention: a,
            w_g,
            b_g,
            w_f,
            b_f,
            reasoning_embeddings,
        })
    }

    pub fn to_json(&self) -> Vec<u8> {
        let f = ProjectionWeightsFile {
            dims: self.dims,
            attention: self.attention,
            w_g: matrix_rows(&self.w_g),
            b_g: self.b_g.iter().copied().collect(),
            w_f: matrix_rows(&self.w_f),
            b_f: self.b_f.iter().copied().collect(),
            reasoning_embeddings: self
                .reasoning_embeddings
                .iter()
                .map(|e| e.iter().copied().collect())
                .collect(),
        };
        serde_json::to_vec(&f).expect("weights serialize")
    }
}

/// Full pipeline from genome to final representation.
#[derive(Clone)]
pub struct PromptEncoder {
    pub provider: Arc<dyn EmbeddingProvider>,
    pub lexicon: Arc<Lexicon>,
    pub weights: Arc<ProjectionWeights>,
}

impl PromptEncoder {
    pub fn new(
        provider: Arc<dyn EmbeddingProvider>,
        lexicon: Arc<Lexicon>,
        weights: Arc<ProjectionWeights>,
    ) -> Result<Self, RepresentationError> {
        if provider.dim() != weights.dims.d {
            return Err(RepresentationError::Shape(format!(
                "provider dimension {} does not match weights d = {}",
                provider.dim(),
                weights.dims.d
            )));
        }
        Ok(PromptEncoder {
            provider,
            lexicon,
            weights,
        })
    }

    pub fn encode(&self, genome: &PromptGenome) -> Result<Vector, RepresentationError> {
        let emb = self.provider.embed(&render_text(genome))?;
        let spans = identify_concepts(&emb.tokens, &self.lexicon);
        let n = emb.tokens.len();
        let mut factors = Vec::with_capacity(spans.len());
        let mut vectors = Vec::with_capacity(spans.len());
        for span in &spans {
            let entry = self
                .lexicon
                .get(&span.concept_id)
                .expect("span ids come from the lexicon");
            factors.push(AttentionFactors::for_span(entry, span, n));
            vectors.push(concept_representation(&emb.hidden, span)?);
        }
        let alpha = if spans.is_empty() {
            Vec::new()
        } else {
            concept_attention(&factors, &self.weights.attention)?
        };
        let w = &self.weights;
        let z = terminology_representation(&emb.cls, &vectors, &alpha, &w.w_g, &w.b_g)?;
        let r = reasoning_structure_encoding(genome, w);
        final_representation(&z, &r, w)
    }
}
