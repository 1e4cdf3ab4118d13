use std::collections::{BTreeMap, HashSet};

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::index;
use rand::Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use super::engine::SearchSpace;
use super::{EvolutionConfig, EvolutionError, Member};
use crate::genome::{
    render_marked, split_marked, ComponentCategory, Origin, PromptComponent, PromptGenome,
};
use crate::representation::{concept_set, identify_concepts, normalize_token, tokenize, Lexicon};

/// Draws `population_size` genomes, picking each category's template with
/// probability proportional to its base quality (uniformly if all are zero).
/// Genome ids are `0..population_size`.
pub fn init_population<R: Rng>(
    space: &SearchSpace,
    cfg: &EvolutionConfig,
    rng: &mut R,
) -> Result<Vec<PromptGenome>, EvolutionError> {
    let mut samplers = Vec::new();
    for (&cat, pool) in space.pools() {
        let weights: Vec<f64> = pool.iter().map(|(t, _)| t.base_quality).collect();
        let dist = if weights.iter().all(|&w| w == 0.0) {
            WeightedIndex::new(vec![1.0; weights.len()])
        } else {
            WeightedIndex::new(&weights)
        }
        .map_err(|e| EvolutionError::Config(format!("template weights for {cat}: {e}")))?;
        samplers.push((pool, dist));
    }
    (0..cfg.population_size)
        .map(|id| {
            let components = samplers
                .iter()
                .map(|(pool, dist)| pool[dist.sample(rng)].1.clone())
                .collect();
            Ok(PromptGenome::new(id as u64, space.scenario, components)?)
        })
        .collect()
}

/// Picks from a tournament sample of `(genome id, F)`: with probability
/// `p_sel` the highest F (lowest id on ties), otherwise a uniform member.
pub fn select_from_sample<R: Rng>(sample: &[(u64, f64)], p_sel: f64, rng: &mut R) -> usize {
    if rng.gen::<f64>() < p_sel {
        let mut best = 0;
        for (i, &(id, f)) in sample.iter().enumerate().skip(1) {
            let (bid, bf) = sample[best];
            if f > bf || (f == bf && id < bid) {
                best = i;
            }
        }
        best
    } else {
        rng.gen_range(0..sample.len())
    }
}

/// Index of the selected member; the sample is drawn without replacement.
pub fn tournament_select<R: Rng>(
    members: &[Member],
    cfg: &EvolutionConfig,
    rng: &mut R,
) -> Result<usize, EvolutionError> {
    let k = cfg.tournament_size;
    if k > members.len() || k == 0 {
        return Err(EvolutionError::Config(format!(
            "tournament size {k} exceeds population {}",
            members.len()
        )));
    }
    let picked = index::sample(rng, members.len(), k).into_vec();
    let sample: Vec<(u64, f64)> = picked
        .iter()
        .map(|&i| (members[i].genome.id(), members[i].fitness.f))
        .collect();
    Ok(picked[select_from_sample(&sample, cfg.p_sel, rng)])
}

/// `clamp(p_m (1 + beta_adapt sigma / mu), p_m_min, p_m_max)`; unchanged when `mu <= 0`.
pub fn adaptive_mutation_update(p_m: f64, sigma: f64, mu: f64, cfg: &EvolutionConfig) -> f64 {
    if mu <= 0.0 || !mu.is_finite() {
        log::warn!("mean fitness {mu} is not positive; mutation rate left at {p_m}");
        return p_m;
    }
    (p_m * (1.0 + cfg.beta_adapt * sigma / mu)).clamp(cfg.p_m_min, cfg.p_m_max)
}

/// `p_m_base * gamma^g * (1 - q)^beta_q` before clamping.
pub fn raw_component_mutation_probability(g: usize, q: f64, p_m_base: f64, cfg: &EvolutionConfig) -> f64 {
    let damping = if q >= 1.0 { 0.0 } else { (1.0 - q).powf(cfg.beta_q) };
    p_m_base * cfg.gamma.powi(g as i32) * damping
}

/// The raw law clamped to `[p_m_min, p_m_max]`, except that zero stays zero.
pub fn component_mutation_probability(g: usize, q: f64, p_m_base: f64, cfg: &EvolutionConfig) -> f64 {
    let raw = raw_component_mutation_probability(g, q, p_m_base, cfg);
    if raw <= 0.0 {
        0.0
    } else {
        raw.clamp(cfg.p_m_min, cfg.p_m_max)
    }
}

/// Per-category counts of changed components plus Replace fallbacks.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MutationLog {
    pub modified: BTreeMap<ComponentCategory, usize>,
    pub replace_fallbacks: usize,
}

impl MutationLog {
    fn touch(&mut self, cat: ComponentCategory) {
        *self.modified.entry(cat).or_default() += 1;
    }
}

/// Component-level recombination.
///
/// A category present in only one parent is copied. Otherwise one uniform
/// draw `r` decides, in this order: parent a if `q_a > q_b + delta` or
/// `r < p_a`; parent b if `q_b > q_a + delta` or `r < p_b`; fusion
/// otherwise. `p_a = Q_a / (Q_a + Q_b)` (0.5 when both are zero).
pub fn crossover<R: Rng>(
    a: &Member,
    b: &Member,
    space: &SearchSpace,
    cfg: &EvolutionConfig,
    rng: &mut R,
    log: &mut MutationLog,
) -> Result<PromptGenome, EvolutionError> {
    if a.genome.scenario() != b.genome.scenario() {
        return Err(EvolutionError::ScenarioMismatch);
    }
    let (qa, qb) = (a.fitness.q, b.fitness.q);
    let p_a = if qa + qb > 0.0 { qa / (qa + qb) } else { 0.5 };
    let p_b = 1.0 - p_a;
    let cats: std::collections::BTreeSet<ComponentCategory> =
        a.genome.categories().chain(b.genome.categories()).collect();
    let mut out = Vec::with_capacity(cats.len());
    for cat in cats {
        let child = match (a.genome.component(cat), b.genome.component(cat)) {
            (Some(ca), None) => ca.clone().with_origin(Origin::CrossoverA),
            (None, Some(cb)) => cb.clone().with_origin(Origin::CrossoverB),
            (Some(ca), Some(cb)) => {
                let r: f64 = rng.gen();
                let (q_ca, q_cb) = (ca.quality(), cb.quality());
                if q_ca > q_cb + cfg.delta || r < p_a {
                    ca.clone().with_origin(Origin::CrossoverA)
                } else if q_cb > q_ca + cfg.delta || r < p_b {
                    cb.clone().with_origin(Origin::CrossoverB)
                } else {
                    let fused = semantic_fusion(ca, cb, &space.lexicon)?;
                    let scaffold = if q_cb > q_ca { cb } else { ca };
                    if fused.text() != scaffold.text() {
                        log.touch(cat);
                        space.rescore(fused)
                    } else {
                        fused.with_origin(Origin::Fusion)
                    }
                }
            }
            (None, None) => unreachable!("category taken from a parent"),
        };
        out.push(child);
    }
    Ok(PromptGenome::new(0, a.genome.scenario(), out)?)
}

/// Byte ranges of sentences, each including its terminal punctuation.
fn sentence_ranges(text: &str) -> Vec<(usize, usize)> {
    static END: std::sync::LazyLock<Regex> =
        std::sync::LazyLock::new(|| Regex::new(r"[.!?]+(?:\s+|$)").expect("valid regex"));
    let mut out = Vec::new();
    let mut last = 0;
    for m in END.find_iter(text) {
        out.push((last, m.end()));
        last = m.end();
    }
    if last < text.len() && !text[last..].trim().is_empty() {
        out.push((last, text.len()));
    }
    if out.is_empty() {
        out.push((0, text.len()));
    }
    out
}

struct ConceptPhrase {
    id: String,
    phrase: String,
    byte_start: usize,
}

fn concept_phrases(text: &str, lexicon: &Lexicon) -> Vec<ConceptPhrase> {
    let tokens = tokenize(text);
    let raw: Vec<&str> = tokens.iter().map(|t| t.text.as_str()).collect();
    identify_concepts(&raw, lexicon)
        .into_iter()
        .map(|s| ConceptPhrase {
            phrase: tokens[s.start..=s.end]
                .iter()
                .map(|t| normalize_token(&t.text))
                .collect::<Vec<_>>()
                .join(" "),
            byte_start: tokens[s.start].start,
            id: s.concept_id,
        })
        .collect()
}

/// Merges two same-category components around the better one's text.
///
/// The scaffold is the higher-quality component (a on ties). Concepts of the
/// other component that the scaffold lacks are appended as `, concept` to the
/// scaffold sentence holding the most concepts (the last sentence if none
/// has any), before its terminal punctuation. Returns the scaffold unchanged
/// when there is nothing to add; otherwise quality is `max(q_a, q_b)` and the
/// origin is fusion.
pub fn semantic_fusion(
    a: &PromptComponent,
    b: &PromptComponent,
    lexicon: &Lexicon,
) -> Result<PromptComponent, EvolutionError> {
    if a.category() != b.category() {
        return Err(EvolutionError::CategoryMismatch(a.category(), b.category()));
    }
    let (scaffold, other) = if b.quality() > a.quality() { (b, a) } else { (a, b) };
    let text = scaffold.text();
    let own = concept_phrases(text, lexicon);
    let have: HashSet<&str> = own.iter().map(|c| c.id.as_str()).collect();
    let mut seen = HashSet::new();
    let missing: Vec<String> = concept_phrases(other.text(), lexicon)
        .into_iter()
        .filter(|c| !have.contains(c.id.as_str()) && seen.insert(c.id.clone()))
        .map(|c| c.phrase)
        .collect();
    if missing.is_empty() {
        return Ok(scaffold.clone());
    }
    let sentences = sentence_ranges(text);
    let counts: Vec<usize> = sentences
        .iter()
        .map(|&(s, e)| own.iter().filter(|c| c.byte_start >= s && c.byte_start < e).count())
        .collect();
    let max = counts.iter().copied().max().unwrap_or(0);
    let target = if max == 0 {
        sentences.len() - 1
    } else {
        counts.iter().position(|&c| c == max).expect("max is present")
    };
    let (s, e) = sentences[target];
    let body = text[s..e]
        .trim_end()
        .trim_end_matches(['.', '!', '?', ';', ':', ',']);
    let at = s + body.len();
    let fused = format!("{}, {}{}", &text[..at], missing.join(", "), &text[at..]);
    Ok(scaffold
        .with_text(fused)?
        .with_quality(a.quality().max(b.quality()))
        .with_origin(Origin::Fusion))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MutationOp {
    Synonym,
    Elaborate,
    Simplify,
    Replace,
}

impl MutationOp {
    const ALL: [MutationOp; 4] = [
        MutationOp::Synonym,
        MutationOp::Elaborate,
        MutationOp::Simplify,
        MutationOp::Replace,
    ];
}

fn core_range(tok: &str) -> (usize, usize) {
    let lead = tok.len() - tok.trim_start_matches(|c: char| !c.is_alphanumeric()).len();
    let trail = tok.len() - tok.trim_end_matches(|c: char| !c.is_alphanumeric()).len();
    (lead, tok.len() - trail.min(tok.len() - lead))
}

fn op_synonym<R: Rng>(text: &str, lexicon: &Lexicon, rng: &mut R) -> Option<String> {
    let tokens = tokenize(text);
    let raw: Vec<&str> = tokens.iter().map(|t| t.text.as_str()).collect();
    let options: Vec<(usize, usize, Vec<&str>)> = identify_concepts(&raw, lexicon)
        .into_iter()
        .filter_map(|s| {
            let current: Vec<String> = raw[s.start..=s.end].iter().map(|t| normalize_token(t)).collect();
            let current = current.join(" ");
            let alts: Vec<&str> = lexicon
                .get(&s.concept_id)?
                .surface_forms
                .iter()
                .map(String::as_str)
                .filter(|f| f.to_lowercase() != current)
                .collect();
            (!alts.is_empty()).then_some((s.start, s.end, alts))
        })
        .collect();
    if options.is_empty() {
        return None;
    }
    let (start, end, alts) = &options[rng.gen_range(0..options.len())];
    let alt = alts[rng.gen_range(0..alts.len())];
    let first = &tokens[*start];
    let last = &tokens[*end];
    let from = first.start + core_range(&first.text).0;
    let to = last.start + core_range(&last.text).1;
    Some(format!("{}{}{}", &text[..from], alt, &text[to..]))
}

fn op_elaborate<R: Rng>(text: &str, cat: ComponentCategory, cfg: &EvolutionConfig, rng: &mut R) -> Option<String> {
    let lower = text.to_lowercase();
    let fresh: Vec<&String> = cfg
        .elaborations
        .get(&cat)?
        .iter()
        .filter(|p| !lower.contains(&p.to_lowercase()))
        .collect();
    if fresh.is_empty() {
        return None;
    }
    let phrase = fresh[rng.gen_range(0..fresh.len())];
    Some(format!("{} {}", text.trim_end(), phrase))
}

static PARENTHETICAL: std::sync::LazyLock<Regex> =
    std::sync::LazyLock::new(|| Regex::new(r"\s*\(([^()]*)\)").expect("valid regex"));
static SPACE_BEFORE_PUNCT: std::sync::LazyLock<Regex> =
    std::sync::LazyLock::new(|| Regex::new(r"\s+([,.;:!?])").expect("valid regex"));
static MULTI_SPACE: std::sync::LazyLock<Regex> =
    std::sync::LazyLock::new(|| Regex::new(r"[ \t]{2,}").expect("valid regex"));

/// Drops non-numeric parentheticals and filler words; `None` if the result
/// is unchanged, empty, or loses a lexicon concept.
pub fn op_simplify(text: &str, cfg: &EvolutionConfig, lexicon: &Lexicon) -> Option<String> {
    let mut out = PARENTHETICAL
        .replace_all(text, |c: &regex::Captures| {
            let inner = c[1].trim();
            if !inner.is_empty() && inner.chars().all(|ch| ch.is_ascii_digit()) {
                c[0].to_string()
            } else {
                String::new()
            }
        })
        .into_owned();
    let fillers: Vec<String> = cfg.filler_words.iter().map(|w| regex::escape(w)).collect();
    if !fillers.is_empty() {
        let re = Regex::new(&format!(r"(?i)\b(?:{})\b", fillers.join("|"))).expect("escaped words");
        out = re.replace_all(&out, "").into_owned();
    }
    out = SPACE_BEFORE_PUNCT.replace_all(&out, "$1").into_owned();
    out = MULTI_SPACE.replace_all(&out, " ").trim().to_string();
    if out.is_empty() || out == text {
        return None;
    }
    let before: HashSet<String> = concept_set(text, lexicon).into_iter().collect();
    let after: HashSet<String> = concept_set(&out, lexicon).into_iter().collect();
    before.is_subset(&after).then_some(out)
}

fn op_replace<R: Rng>(component: &PromptComponent, space: &SearchSpace, rng: &mut R) -> Option<PromptComponent> {
    let pool = space.pool(component.category())?;
    let others: Vec<&PromptComponent> = pool
        .iter()
        .map(|(_, c)| c)
        .filter(|c| c.text() != component.text())
        .collect();
    if others.is_empty() {
        return None;
    }
    Some(others[rng.gen_range(0..others.len())].clone())
}

/// Applies one operator; returns the changed component or `None` for a no-op.
fn apply_op<R: Rng>(
    op: MutationOp,
    c: &PromptComponent,
    space: &SearchSpace,
    cfg: &EvolutionConfig,
    rng: &mut R,
    log: &mut MutationLog,
) -> Result<Option<PromptComponent>, EvolutionError> {
    let text = match op {
        MutationOp::Synonym => op_synonym(c.text(), &space.lexicon, rng),
        MutationOp::Elaborate => op_elaborate(c.text(), c.category(), cfg, rng),
        MutationOp::Simplify => op_simplify(c.text(), cfg, &space.lexicon),
        MutationOp::Replace => match op_replace(c, space, rng) {
            Some(r) => return Ok(Some(r)),
            None => {
                log.replace_fallbacks += 1;
                op_synonym(c.text(), &space.lexicon, rng)
            }
        },
    };
    match text {
        Some(t) if t != c.text() => Ok(Some(space.rescore(c.with_text(t)?))),
        _ => Ok(None),
    }
}

pub(crate) fn mutate_with<R: Rng>(
    genome: &PromptGenome,
    probability: impl Fn(&PromptComponent) -> f64,
    space: &SearchSpace,
    cfg: &EvolutionConfig,
    rng: &mut R,
    log: &mut MutationLog,
) -> Result<PromptGenome, EvolutionError> {
    let ops = WeightedIndex::new(cfg.mutation_ops.as_array())
        .map_err(|e| EvolutionError::Config(format!("mutation_ops: {e}")))?;
    let mut out = Vec::with_capacity(genome.components().len());
    for c in genome.components() {
        let p = probability(c);
        if rng.gen::<f64>() >= p {
            out.push(c.clone());
            continue;
        }
        let op = MutationOp::ALL[ops.sample(rng)];
        match apply_op(op, c, space, cfg, rng, log)? {
            Some(changed) => {
                log.touch(c.category());
                out.push(changed.with_origin(Origin::Mutation));
            }
            None => out.push(c.clone()),
        }
    }
    Ok(PromptGenome::new(genome.id(), genome.scenario(), out)?)
}

/// Mutates each component with probability [`component_mutation_probability`].
pub fn mutate<R: Rng>(
    genome: &PromptGenome,
    g: usize,
    p_m_base: f64,
    space: &SearchSpace,
    cfg: &EvolutionConfig,
    rng: &mut R,
    log: &mut MutationLog,
) -> Result<PromptGenome, EvolutionError> {
    mutate_with(
        genome,
        |c| component_mutation_probability(g, c.quality(), p_m_base, cfg),
        space,
        cfg,
        rng,
        log,
    )
}

/// Single-point cut of the two marked renderings, re-split by category markers.
/// Falls back to parent a when the spliced text has no recoverable component.
pub fn generic_crossover<R: Rng>(
    a: &PromptGenome,
    b: &PromptGenome,
    space: &SearchSpace,
    rng: &mut R,
) -> Result<PromptGenome, EvolutionError> {
    let (sa, sb) = (render_marked(a), render_marked(b));
    let limit = sa.len().min(sb.len());
    let mut cut = rng.gen_range(0..=limit);
    while !(sa.is_char_boundary(cut) && sb.is_char_boundary(cut)) {
        cut -= 1;
    }
    let spliced = format!("{}{}", &sa[..cut], &sb[cut..]);
    let mut components = Vec::new();
    for (cat, text) in split_marked(&spliced) {
        if let Ok(c) = PromptComponent::new(cat, text, 0.0, Origin::CrossoverA) {
            components.push(space.rescore(c));
        }
    }
    if components.is_empty() {
        return Ok(a.clone());
    }
    Ok(PromptGenome::from_unordered(0, a.scenario(), components)?)
}
