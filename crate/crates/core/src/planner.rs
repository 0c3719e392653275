//! Retrieval-augmented script generation: style selection, two-stage
//! cosine retrieval, long-script assembly, the skill-tuple grammar, and
//! walk-transition insertion.
//!
//! Planning is a pure function of (database, theme, scene) given
//! deterministic providers, so plans are reproducible and parallel-safe.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{cosine_similarity, EmbeddingError, EmbeddingProvider};
use crate::math::Vec2;
use crate::scene::Scene;
use crate::scriptdb::{Keyframe, ScriptDatabase, ScriptId, SkillId, StyleLabel};

/// Default number of styles selected per theme.
pub const DEFAULT_M: usize = 3;
/// Default scripts retrieved per style.
pub const DEFAULT_K: usize = 5;
/// Default cap on scripts combined into one long script.
pub const DEFAULT_MAX_SCRIPTS: usize = 5;

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("no scripts retrieved")]
    NoCandidates,
    #[error("unsatisfiable plan: scene lacks object categories [{}]", missing.join(", "))]
    Unsatisfiable { missing: Vec<String> },
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error("assembled keyframes fail the skill grammar")]
    InvalidSequence,
}

/// User-provided theme sentence driving style selection and retrieval.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Theme {
    pub text: String,
}

impl Theme {
    pub fn new(text: impl Into<String>) -> Self {
        let text = text.into();
        assert!(!text.trim().is_empty(), "theme text must be non-empty");
        Theme { text }
    }
}

/// Where a span of long-script keyframes came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub script: ScriptId,
    /// Start index in the assembled keyframe list (before transitions).
    pub start: usize,
    pub len: usize,
}

/// Assembled plan: keyframes, provenance, and per-keyframe scene bindings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongScript {
    pub keyframes: Vec<Keyframe>,
    pub provenance: Vec<Provenance>,
    /// Keyframe index -> scene object instance id.
    pub scene_binding: BTreeMap<usize, String>,
    /// Optional prose from a narrative provider, passed through verbatim.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prose: Option<String>,
}

impl LongScript {
    pub fn skills(&self) -> Vec<SkillId> {
        self.keyframes.iter().map(|kf| kf.skill).collect()
    }
}

/// Scene summary handed to narrative providers: geometry-free.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynopsisEntry {
    pub category: String,
    pub count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub room: Option<String>,
}

pub fn scene_synopsis(scene: &Scene) -> Vec<SynopsisEntry> {
    scene
        .categories()
        .into_iter()
        .map(|(category, count)| SynopsisEntry {
            category,
            count,
            room: None,
        })
        .collect()
}

/// External narrative role: picks styles for a theme and composes an
/// ordered subset of retrieved scripts. The deterministic fallback in
/// this module covers both when no provider is configured or one fails.
pub trait NarrativeProvider: Send + Sync {
    fn select_styles(
        &self,
        theme: &Theme,
        styles: &[StyleLabel],
        m: usize,
    ) -> Result<Vec<StyleLabel>, String>;

    /// Returns an ordered subset of the candidate ids, optionally with
    /// accompanying prose.
    fn compose(
        &self,
        theme: &Theme,
        candidates: &[(ScriptId, String)],
        synopsis: &[SynopsisEntry],
    ) -> Result<(Vec<ScriptId>, Option<String>), String>;
}

/// Top-M styles by cosine similarity between the theme embedding and the
/// style-name embedding. Distinct, ranked descending, ties by the
/// canonical style order.
pub fn select_styles_fallback(
    theme: &Theme,
    m: usize,
    provider: &dyn EmbeddingProvider,
) -> Result<Vec<StyleLabel>, EmbeddingError> {
    assert!(m >= 1);
    let query = provider.embed(&theme.text)?;
    let mut scored: Vec<(StyleLabel, f64)> = Vec::with_capacity(StyleLabel::ALL.len());
    for style in StyleLabel::ALL {
        let key = provider.embed(style.name())?;
        scored.push((style, cosine_similarity(&query, &key)?));
    }
    // Stable sort keeps canonical order among equal similarities.
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    Ok(scored.into_iter().take(m).map(|(s, _)| s).collect())
}

/// Style selection with provider fallback on failure.
pub fn select_styles(
    theme: &Theme,
    m: usize,
    provider: &dyn EmbeddingProvider,
    narrative: Option<&dyn NarrativeProvider>,
) -> Result<Vec<StyleLabel>, EmbeddingError> {
    if let Some(n) = narrative {
        match n.select_styles(theme, &StyleLabel::ALL, m) {
            Ok(mut styles) => {
                styles.dedup();
                styles.truncate(m);
                if !styles.is_empty() {
                    return Ok(styles);
                }
            }
            Err(e) => {
                eprintln!("warning: narrative style selection failed ({e}); using fallback");
            }
        }
    }
    select_styles_fallback(theme, m, provider)
}

/// Per style, the top-k database entries by descending cosine similarity
/// to the theme embedding. Ties break by ascending id; under-full style
/// buckets return what they have.
pub fn retrieve(
    db: &ScriptDatabase,
    theme: &Theme,
    styles: &[StyleLabel],
    k: usize,
    provider: &dyn EmbeddingProvider,
) -> Result<Vec<(ScriptId, f64)>, EmbeddingError> {
    assert!(k >= 1);
    let query = provider.embed(&theme.text)?;
    let mut out = Vec::new();
    for &style in styles {
        let mut bucket: Vec<(ScriptId, f64)> = db
            .query_by_style(style)
            .iter()
            .map(|id| {
                let key = db.key(id).expect("indexed id has a key");
                Ok((id.clone(), cosine_similarity(&query, key)?))
            })
            .collect::<Result<_, EmbeddingError>>()?;
        bucket.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap()
                .then_with(|| a.0.cmp(&b.0))
        });
        out.extend(bucket.into_iter().take(k));
    }
    Ok(out)
}

const CLOSED_TUPLES: [(SkillId, SkillId); 4] = [
    (SkillId::Sit, SkillId::GetUp),
    (SkillId::Lie, SkillId::GetUp),
    (SkillId::Walk, SkillId::Carry),
    (SkillId::Walk, SkillId::Reach),
];

/// True iff the sequence is a concatenation of the allowed skill tuples,
/// with Walk additionally allowed anywhere as a free transition token.
/// Dynamic program over prefix validity.
pub fn validate_skill_sequence(seq: &[SkillId]) -> bool {
    let n = seq.len();
    let mut ok = vec![false; n + 1];
    ok[0] = true;
    for i in 1..=n {
        // Single tokens: free Walk transitions and the (idle) tuple.
        if ok[i - 1] && matches!(seq[i - 1], SkillId::Walk | SkillId::Idle) {
            ok[i] = true;
        }
        if i >= 2 && ok[i - 2] && CLOSED_TUPLES.contains(&(seq[i - 2], seq[i - 1])) {
            ok[i] = true;
        }
    }
    ok[n]
}

fn is_interaction(skill: SkillId) -> bool {
    matches!(
        skill,
        SkillId::Sit | SkillId::Lie | SkillId::GetUp | SkillId::Reach | SkillId::Carry
    )
}

/// Insert neutral Walk transitions before tuple openings.
///
/// A Walk keyframe (carrying the next keyframe's object) is inserted
/// before Sit, Lie, Reach, and Carry, and before an Idle that follows an
/// interaction skill, unless the previous keyframe is already a Walk.
/// Idempotent.
pub fn insert_transitions(seq: &[Keyframe]) -> Vec<Keyframe> {
    let mut out: Vec<Keyframe> = Vec::with_capacity(seq.len());
    for kf in seq {
        let needs_walk = match kf.skill {
            SkillId::Sit | SkillId::Lie | SkillId::Reach | SkillId::Carry => true,
            SkillId::Idle => out
                .last()
                .is_some_and(|prev: &Keyframe| is_interaction(prev.skill)),
            _ => false,
        };
        if needs_walk && out.last().map(|p| p.skill) != Some(SkillId::Walk) {
            let mut walk = Keyframe::new(SkillId::Walk).with_style(StyleLabel::Neutral);
            walk.object = kf.object.clone();
            out.push(walk);
        }
        out.push(kf.clone());
    }
    out
}

/// Close dangling Sit/Lie openings by inserting a GetUp on the same
/// object, so assembled scripts always parse under the tuple grammar.
fn close_open_tuples(seq: &[Keyframe]) -> Vec<Keyframe> {
    let mut out: Vec<Keyframe> = Vec::with_capacity(seq.len());
    let mut i = 0;
    while i < seq.len() {
        let kf = &seq[i];
        out.push(kf.clone());
        if matches!(kf.skill, SkillId::Sit | SkillId::Lie)
            && seq.get(i + 1).map(|n| n.skill) != Some(SkillId::GetUp)
        {
            let mut getup = Keyframe::new(SkillId::GetUp);
            getup.object = kf.object.clone();
            out.push(getup);
        }
        i += 1;
    }
    out
}

/// Assemble a long script from retrieved candidates.
///
/// The narrative provider (or the greedy similarity fallback) picks an
/// ordered subset whose object categories all exist in the scene; the
/// keyframes are concatenated, dangling Sit/Lie closed, Walk transitions
/// inserted, and every object-bearing keyframe bound to the nearest
/// matching instance starting from `start` (scene center by default).
pub fn assemble_long_script(
    db: &ScriptDatabase,
    scene: &Scene,
    theme: &Theme,
    retrieved: &[(ScriptId, f64)],
    narrative: Option<&dyn NarrativeProvider>,
    start: Option<Vec2>,
    max_scripts: usize,
) -> Result<LongScript, PlanError> {
    if retrieved.is_empty() {
        return Err(PlanError::NoCandidates);
    }
    let categories = scene.categories();
    let mut missing: Vec<String> = Vec::new();
    let compatible: Vec<&(ScriptId, f64)> = retrieved
        .iter()
        .filter(|(id, _)| {
            let script = db.get(id).expect("retrieved id in db");
            let absent: Vec<&str> = script
                .keyframes
                .iter()
                .filter_map(|kf| kf.object.as_deref())
                .filter(|cat| !categories.contains_key(*cat))
                .collect();
            for cat in &absent {
                if !missing.iter().any(|m| m == cat) {
                    missing.push(cat.to_string());
                }
            }
            absent.is_empty()
        })
        .collect();
    if compatible.is_empty() {
        missing.sort();
        return Err(PlanError::Unsatisfiable { missing });
    }

    let mut prose = None;
    let selected: Vec<ScriptId> = match narrative {
        Some(n) => {
            let candidates: Vec<(ScriptId, String)> = compatible
                .iter()
                .map(|(id, _)| (id.clone(), db.get(id).unwrap().summary.clone()))
                .collect();
            match n.compose(theme, &candidates, &scene_synopsis(scene)) {
                Ok((ids, p)) => {
                    let valid: Vec<ScriptId> = ids
                        .into_iter()
                        .filter(|id| candidates.iter().any(|(c, _)| c == id))
                        .collect();
                    if valid.is_empty() {
                        greedy_select(&compatible, max_scripts)
                    } else {
                        prose = p;
                        valid
                    }
                }
                Err(e) => {
                    eprintln!("warning: narrative compose failed ({e}); using fallback");
                    greedy_select(&compatible, max_scripts)
                }
            }
        }
        None => greedy_select(&compatible, max_scripts),
    };

    // Concatenate whole scripts, recording provenance spans.
    let mut keyframes: Vec<Keyframe> = Vec::new();
    let mut provenance = Vec::new();
    for id in &selected {
        let script = db.get(id).expect("selected id in db");
        provenance.push(Provenance {
            script: id.clone(),
            start: keyframes.len(),
            len: script.keyframes.len(),
        });
        keyframes.extend(script.keyframes.iter().cloned());
    }

    let keyframes = insert_transitions(&close_open_tuples(&keyframes));
    if !validate_skill_sequence(&keyframes.iter().map(|kf| kf.skill).collect::<Vec<_>>()) {
        return Err(PlanError::InvalidSequence);
    }

    // Bind object categories to instances: nearest to the previous bound
    // object's centroid, starting from `start`.
    let (lo, hi) = scene.bounds;
    let mut cursor = start.unwrap_or(Vec2::new((lo.x + hi.x) / 2.0, (lo.y + hi.y) / 2.0));
    let mut scene_binding = BTreeMap::new();
    for (i, kf) in keyframes.iter().enumerate() {
        let Some(category) = kf.object.as_deref() else {
            continue;
        };
        let nearest = scene
            .objects_of_category(category)
            .min_by(|a, b| {
                let da = (a.aabb.centroid().xy() - cursor).norm_sq();
                let db_ = (b.aabb.centroid().xy() - cursor).norm_sq();
                da.partial_cmp(&db_).unwrap().then_with(|| a.id.cmp(&b.id))
            })
            .ok_or_else(|| PlanError::Unsatisfiable {
                missing: vec![category.to_string()],
            })?;
        cursor = nearest.aabb.centroid().xy();
        scene_binding.insert(i, nearest.id.clone());
    }

    Ok(LongScript {
        keyframes,
        provenance,
        scene_binding,
        prose,
    })
}

fn greedy_select(compatible: &[&(ScriptId, f64)], max_scripts: usize) -> Vec<ScriptId> {
    let mut ranked: Vec<&(ScriptId, f64)> = compatible.to_vec();
    ranked.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap()
            .then_with(|| a.0.cmp(&b.0))
    });
    let mut out = Vec::new();
    for (id, _) in ranked {
        if !out.contains(id) {
            out.push(id.clone());
        }
        if out.len() >= max_scripts {
            break;
        }
    }
    out
}

/// Full pipeline: style selection, retrieval, assembly.
pub fn plan(
    db: &ScriptDatabase,
    scene: &Scene,
    theme: &Theme,
    m: usize,
    k: usize,
    provider: &dyn EmbeddingProvider,
    narrative: Option<&dyn NarrativeProvider>,
) -> Result<LongScript, PlanError> {
    let styles = select_styles(theme, m, provider, narrative)?;
    let retrieved = retrieve(db, theme, &styles, k, provider)?;
    assemble_long_script(db, scene, theme, &retrieved, narrative, None, DEFAULT_MAX_SCRIPTS)
}

// --- HTTP narrative provider ---

#[derive(Debug, Serialize)]
struct ComposeRequest<'a> {
    theme: &'a str,
    styles: Vec<&'a str>,
    summaries: Vec<SummaryEntry<'a>>,
    scene_synopsis: &'a [SynopsisEntry],
}

#[derive(Debug, Serialize)]
struct SummaryEntry<'a> {
    id: &'a str,
    summary: &'a str,
}

#[derive(Debug, Deserialize)]
struct ComposeResponse {
    selected_ids: Vec<String>,
    #[serde(default)]
    order: Vec<usize>,
    #[serde(default)]
    prose: Option<String>,
}

#[derive(Debug, Serialize)]
struct StyleRequest<'a> {
    theme: &'a str,
    styles: Vec<&'a str>,
    m: usize,
}

#[derive(Debug, Deserialize)]
struct StyleResponse {
    styles: Vec<StyleLabel>,
}

/// Narrative provider speaking the HTTP JSON contract.
pub struct HttpNarrative {
    endpoint: String,
    client: reqwest::blocking::Client,
}

/// Environment variable naming the narrative endpoint.
pub const NARRATIVE_ENDPOINT_ENV: &str = "SCENESCRIPT_LLM_URL";

impl HttpNarrative {
    pub fn new(endpoint: impl Into<String>) -> Self {
        HttpNarrative {
            endpoint: endpoint.into(),
            client: reqwest::blocking::Client::builder()
                .timeout(std::time::Duration::from_secs(30))
                .build()
                .expect("http client"),
        }
    }

    pub fn from_env() -> Option<Self> {
        std::env::var(NARRATIVE_ENDPOINT_ENV)
            .ok()
            .map(HttpNarrative::new)
    }
}

impl NarrativeProvider for HttpNarrative {
    fn select_styles(
        &self,
        theme: &Theme,
        styles: &[StyleLabel],
        m: usize,
    ) -> Result<Vec<StyleLabel>, String> {
        let req = StyleRequest {
            theme: &theme.text,
            styles: styles.iter().map(|s| s.name()).collect(),
            m,
        };
        let resp: StyleResponse = self
            .client
            .post(format!("{}/styles", self.endpoint))
            .json(&req)
            .send()
            .and_then(|r| r.error_for_status())
            .map_err(|e| e.to_string())?
            .json()
            .map_err(|e| e.to_string())?;
        Ok(resp.styles)
    }

    fn compose(
        &self,
        theme: &Theme,
        candidates: &[(ScriptId, String)],
        synopsis: &[SynopsisEntry],
    ) -> Result<(Vec<ScriptId>, Option<String>), String> {
        let req = ComposeRequest {
            theme: &theme.text,
            styles: vec![],
            summaries: candidates
                .iter()
                .map(|(id, s)| SummaryEntry {
                    id: &id.0,
                    summary: s,
                })
                .collect(),
            scene_synopsis: synopsis,
        };
        let resp: ComposeResponse = self
            .client
            .post(format!("{}/compose", self.endpoint))
            .json(&req)
            .send()
            .and_then(|r| r.error_for_status())
            .map_err(|e| e.to_string())?
            .json()
            .map_err(|e| e.to_string())?;
        let mut ids: Vec<ScriptId> = resp.selected_ids.into_iter().map(ScriptId).collect();
        if resp.order.len() == ids.len() {
            let reordered: Vec<ScriptId> = resp
                .order
                .iter()
                .filter_map(|&i| ids.get(i).cloned())
                .collect();
            if reordered.len() == ids.len() {
                ids = reordered;
            }
        }
        Ok((ids, resp.prose))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::TestEmbedder;
    use crate::math::Vec3;
    use crate::scene::{box_object, Aabb};

    fn embedder() -> TestEmbedder {
        TestEmbedder::new(64, 0)
    }

    fn kf(skill: SkillId) -> Keyframe {
        Keyframe::new(skill)
    }

    #[test]
    fn select_styles_exact_text_match_dominates() {
        let theme = Theme::new("relaxed");
        let styles = select_styles_fallback(&theme, 1, &embedder()).unwrap();
        assert_eq!(styles, vec![StyleLabel::Relaxed]);
    }

    #[test]
    fn select_styles_m9_is_exhaustive_ranking() {
        let theme = Theme::new("a stormy evening");
        let styles = select_styles_fallback(&theme, 9, &embedder()).unwrap();
        assert_eq!(styles.len(), 9);
        let mut sorted = styles.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), 9);
    }

    #[test]
    fn select_styles_matches_brute_force_rank() {
        let e = embedder();
        let theme = Theme::new("a long tiring day at work");
        let got = select_styles_fallback(&theme, 3, &e).unwrap();
        // Oracle: score all nine, sort descending.
        let q = e.embed(&theme.text).unwrap();
        let mut scored: Vec<(StyleLabel, f64)> = StyleLabel::ALL
            .iter()
            .map(|s| (*s, cosine_similarity(&q, &e.embed(s.name()).unwrap()).unwrap()))
            .collect();
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        let want: Vec<StyleLabel> = scored.into_iter().take(3).map(|(s, _)| s).collect();
        assert_eq!(got, want);
    }

    fn styled_db(scripts_per_style: usize, styles: &[StyleLabel]) -> ScriptDatabase {
        let e = embedder();
        let mut db = ScriptDatabase::new();
        for &style in styles {
            for i in 0..scripts_per_style {
                db.insert(
                    format!("{} scene variation {i}", style.name()),
                    vec![
                        kf(SkillId::Walk).with_caption("walking", style),
                        kf(SkillId::Idle).with_caption("pausing", style),
                    ],
                    &e,
                )
                .unwrap();
            }
        }
        db
    }

    #[test]
    fn retrieve_self_similarity_ranks_first() {
        let db = styled_db(10, &[StyleLabel::Happy, StyleLabel::Tired]);
        let theme = Theme::new("happy scene variation 4");
        let got = retrieve(&db, &theme, &[StyleLabel::Happy], 3, &embedder()).unwrap();
        let top = &got[0];
        assert_eq!(
            db.get(&top.0).unwrap().summary,
            "happy scene variation 4"
        );
        assert!((top.1 - 1.0).abs() < 1e-9);
    }

    #[test]
    fn retrieve_matches_brute_force_scan() {
        let db = styled_db(10, &[StyleLabel::Happy, StyleLabel::Tired]);
        let e = embedder();
        let theme = Theme::new("an evening of mixed feelings");
        let styles = [StyleLabel::Happy, StyleLabel::Tired];
        let got = retrieve(&db, &theme, &styles, 3, &e).unwrap();
        assert_eq!(got.len(), 6);
        // Oracle: linear scan per style.
        let q = e.embed(&theme.text).unwrap();
        for (si, &style) in styles.iter().enumerate() {
            let mut scan: Vec<(ScriptId, f64)> = db
                .query_by_style(style)
                .iter()
                .map(|id| (id.clone(), cosine_similarity(&q, db.key(id).unwrap()).unwrap()))
                .collect();
            scan.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
            for (j, want) in scan.into_iter().take(3).enumerate() {
                assert_eq!(got[si * 3 + j].0, want.0);
            }
        }
    }

    #[test]
    fn retrieve_underfull_bucket() {
        let db = styled_db(1, &[StyleLabel::Sad]);
        let got = retrieve(
            &db,
            &Theme::new("anything"),
            &[StyleLabel::Sad],
            5,
            &embedder(),
        )
        .unwrap();
        assert_eq!(got.len(), 1);
    }

    #[test]
    fn grammar_accepts_closed_tuples() {
        use SkillId::*;
        assert!(validate_skill_sequence(&[Sit, GetUp]));
        assert!(validate_skill_sequence(&[Lie, GetUp]));
        assert!(validate_skill_sequence(&[Idle]));
        assert!(validate_skill_sequence(&[Walk, Carry]));
        assert!(validate_skill_sequence(&[Walk, Reach]));
        assert!(validate_skill_sequence(&[Walk, Sit, GetUp, Walk, Carry]));
        assert!(validate_skill_sequence(&[]));
    }

    #[test]
    fn grammar_rejects_unclosed_tuples() {
        use SkillId::*;
        assert!(!validate_skill_sequence(&[Sit, Lie]));
        assert!(!validate_skill_sequence(&[Sit]));
        assert!(!validate_skill_sequence(&[Carry]));
        assert!(!validate_skill_sequence(&[GetUp]));
        assert!(!validate_skill_sequence(&[Reach]));
    }

    /// Exhaustive oracle: breadth-first concatenation of allowed tuples.
    fn grammar_oracle(max_len: usize) -> std::collections::HashSet<Vec<SkillId>> {
        use SkillId::*;
        let units: Vec<Vec<SkillId>> = vec![
            vec![Walk],
            vec![Idle],
            vec![Sit, GetUp],
            vec![Lie, GetUp],
            vec![Walk, Carry],
            vec![Walk, Reach],
        ];
        let mut valid = std::collections::HashSet::new();
        valid.insert(vec![]);
        let mut frontier: Vec<Vec<SkillId>> = vec![vec![]];
        while let Some(seq) = frontier.pop() {
            for unit in &units {
                let mut next = seq.clone();
                next.extend(unit);
                if next.len() <= max_len && valid.insert(next.clone()) {
                    frontier.push(next);
                }
            }
        }
        valid
    }

    #[test]
    fn grammar_agrees_with_enumerator_up_to_len_4() {
        let valid = grammar_oracle(4);
        // Every sequence over the 7 skills, lengths 0..=4.
        let mut stack: Vec<Vec<SkillId>> = vec![vec![]];
        while let Some(seq) = stack.pop() {
            assert_eq!(
                validate_skill_sequence(&seq),
                valid.contains(&seq),
                "disagreement on {seq:?}"
            );
            if seq.len() < 4 {
                for s in SkillId::ALL {
                    let mut next = seq.clone();
                    next.push(s);
                    stack.push(next);
                }
            }
        }
    }

    #[test]
    fn transitions_inserted_before_sit() {
        let seq = vec![kf(SkillId::Sit).with_object("sofa"), kf(SkillId::GetUp).with_object("sofa")];
        let out = insert_transitions(&seq);
        assert_eq!(out.len(), 3);
        assert_eq!(out[0].skill, SkillId::Walk);
        assert_eq!(out[0].object.as_deref(), Some("sofa"));
        assert_eq!(out[0].style, Some(StyleLabel::Neutral));
    }

    #[test]
    fn transitions_idempotent() {
        let seq = vec![
            kf(SkillId::Walk),
            kf(SkillId::Idle),
            kf(SkillId::Sit).with_object("sofa"),
            kf(SkillId::GetUp).with_object("sofa"),
            kf(SkillId::Reach).with_object("shelf"),
        ];
        let once = insert_transitions(&seq);
        let twice = insert_transitions(&once);
        assert_eq!(once, twice);
        assert!(validate_skill_sequence(
            &once.iter().map(|k| k.skill).collect::<Vec<_>>()
        ));
    }

    #[test]
    fn transitions_walk_idle_reach_sit_ordering() {
        // loco -> idle -> touch -> sit: walk appears before touch and sit only.
        let seq = vec![
            kf(SkillId::Walk),
            kf(SkillId::Idle),
            kf(SkillId::Reach).with_object("shelf"),
            kf(SkillId::Sit).with_object("armchair"),
        ];
        let out = insert_transitions(&seq);
        let skills: Vec<SkillId> = out.iter().map(|k| k.skill).collect();
        assert_eq!(
            skills,
            vec![
                SkillId::Walk,
                SkillId::Idle,
                SkillId::Walk,
                SkillId::Reach,
                SkillId::Walk,
                SkillId::Sit,
            ]
        );
    }

    fn test_scene() -> Scene {
        let mk = |id: &str, cat: &str, x: f64, y: f64| {
            box_object(
                id,
                cat,
                false,
                Aabb::new(Vec3::ZERO, Vec3::new(1.0, 1.0, 0.5)),
                Vec3::new(x, y, 0.0),
                0.0,
                0.25,
            )
        };
        Scene::from_objects(vec![
            mk("sofa-1", "sofa", 3.0, 0.0),
            mk("sofa-2", "sofa", -4.0, 2.0),
            mk("shelf-1", "shelf", 3.0, 3.0),
        ])
    }

    fn seated_db() -> ScriptDatabase {
        let e = embedder();
        let mut db = ScriptDatabase::new();
        db.insert(
            "a calm rest on the sofa",
            vec![
                kf(SkillId::Sit)
                    .with_object("sofa")
                    .with_caption("leaning back", StyleLabel::Relaxed),
                kf(SkillId::GetUp).with_object("sofa"),
            ],
            &e,
        )
        .unwrap();
        db.insert(
            "a nap in the bedroom",
            vec![
                kf(SkillId::Lie)
                    .with_object("bed")
                    .with_caption("lying flat", StyleLabel::Tired),
                kf(SkillId::GetUp).with_object("bed"),
            ],
            &e,
        )
        .unwrap();
        db
    }

    #[test]
    fn assemble_single_script_plus_transitions() {
        let db = seated_db();
        let scene = test_scene();
        let theme = Theme::new("a calm rest on the sofa");
        let retrieved = retrieve(&db, &theme, &[StyleLabel::Relaxed], 5, &embedder()).unwrap();
        let plan =
            assemble_long_script(&db, &scene, &theme, &retrieved, None, None, 5).unwrap();
        assert_eq!(
            plan.skills(),
            vec![SkillId::Walk, SkillId::Sit, SkillId::GetUp]
        );
        // Every object-bearing keyframe bound.
        for (i, kf) in plan.keyframes.iter().enumerate() {
            if kf.object.is_some() {
                assert!(plan.scene_binding.contains_key(&i), "keyframe {i} unbound");
            }
        }
    }

    #[test]
    fn assemble_skips_scene_incompatible_scripts() {
        let db = seated_db();
        let scene = test_scene(); // no bed
        let theme = Theme::new("a nap in the bedroom");
        let retrieved = retrieve(
            &db,
            &theme,
            &[StyleLabel::Tired, StyleLabel::Relaxed],
            5,
            &embedder(),
        )
        .unwrap();
        let plan =
            assemble_long_script(&db, &scene, &theme, &retrieved, None, None, 5).unwrap();
        // Only the sofa script is compatible.
        assert!(plan
            .keyframes
            .iter()
            .all(|kf| kf.object.as_deref() != Some("bed")));
    }

    #[test]
    fn assemble_unsatisfiable_reports_missing_categories() {
        let db = seated_db();
        let scene = Scene::from_objects(vec![]);
        let theme = Theme::new("a nap");
        let retrieved = retrieve(
            &db,
            &theme,
            &[StyleLabel::Tired, StyleLabel::Relaxed],
            5,
            &embedder(),
        )
        .unwrap();
        match assemble_long_script(&db, &scene, &theme, &retrieved, None, None, 5) {
            Err(PlanError::Unsatisfiable { missing }) => {
                assert!(missing.contains(&"sofa".to_string()));
                assert!(missing.contains(&"bed".to_string()));
            }
            other => panic!("expected unsatisfiable, got {other:?}"),
        }
    }

    #[test]
    fn greedy_selection_matches_similarity_order() {
        let db = styled_db(5, &[StyleLabel::Happy]);
        let scene = test_scene();
        let e = embedder();
        let theme = Theme::new("a cheerful morning");
        let retrieved = retrieve(&db, &theme, &[StyleLabel::Happy], 5, &e).unwrap();
        let plan =
            assemble_long_script(&db, &scene, &theme, &retrieved, None, None, 3).unwrap();
        // Oracle: ids of the top-3 by similarity, descending.
        let mut ranked = retrieved.clone();
        ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
        let want: Vec<ScriptId> = ranked.into_iter().take(3).map(|(id, _)| id).collect();
        let got: Vec<ScriptId> = plan.provenance.iter().map(|p| p.script.clone()).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn binding_picks_nearest_instance() {
        let db = seated_db();
        let scene = test_scene();
        let theme = Theme::new("a calm rest on the sofa");
        let retrieved = retrieve(&db, &theme, &[StyleLabel::Relaxed], 5, &embedder()).unwrap();
        let plan = assemble_long_script(
            &db,
            &scene,
            &theme,
            &retrieved,
            None,
            Some(Vec2::new(3.0, 0.0)),
            5,
        )
        .unwrap();
        // Start sits on sofa-1's centroid, so sofa-1 wins the binding.
        assert!(plan.scene_binding.values().any(|id| id == "sofa-1"));
        assert!(!plan.scene_binding.values().any(|id| id == "sofa-2"));
    }
}
