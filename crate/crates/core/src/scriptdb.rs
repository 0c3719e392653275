//! Short-script data model, validation, persistence, and embedding-keyed
//! indexing.
//!
//! A short script is a handful of keyframes plus a one-sentence summary
//! and a style label. The database stores scripts keyed by unit-norm
//! summary embeddings and partitioned by style for retrieval.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{EmbeddingError, EmbeddingProvider, EmbeddingVector};

/// Persistence schema version for `.sdb` files.
pub const SDB_VERSION: u32 = 1;

/// The seven skills a keyframe may request.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum SkillId {
    Walk,
    Idle,
    Sit,
    Lie,
    GetUp,
    Reach,
    Carry,
}

impl SkillId {
    pub const ALL: [SkillId; 7] = [
        SkillId::Walk,
        SkillId::Idle,
        SkillId::Sit,
        SkillId::Lie,
        SkillId::GetUp,
        SkillId::Reach,
        SkillId::Carry,
    ];

    /// Skills that must name an object to interact with.
    pub fn requires_object(self) -> bool {
        matches!(
            self,
            SkillId::Sit | SkillId::Lie | SkillId::Reach | SkillId::Carry | SkillId::GetUp
        )
    }

    /// Reach and GetUp run without text conditions.
    pub fn text_conditioned(self) -> bool {
        !matches!(self, SkillId::Reach | SkillId::GetUp)
    }
}

impl fmt::Display for SkillId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SkillId::Walk => "walk",
            SkillId::Idle => "idle",
            SkillId::Sit => "sit",
            SkillId::Lie => "lie",
            SkillId::GetUp => "get_up",
            SkillId::Reach => "reach",
            SkillId::Carry => "carry",
        };
        f.write_str(s)
    }
}

/// Eight stylized labels plus neutral.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum StyleLabel {
    Neutral,
    Happy,
    Angry,
    Hurried,
    Tired,
    Sad,
    Stressed,
    Drunk,
    Relaxed,
}

impl StyleLabel {
    pub const ALL: [StyleLabel; 9] = [
        StyleLabel::Neutral,
        StyleLabel::Happy,
        StyleLabel::Angry,
        StyleLabel::Hurried,
        StyleLabel::Tired,
        StyleLabel::Sad,
        StyleLabel::Stressed,
        StyleLabel::Drunk,
        StyleLabel::Relaxed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StyleLabel::Neutral => "neutral",
            StyleLabel::Happy => "happy",
            StyleLabel::Angry => "angry",
            StyleLabel::Hurried => "hurried",
            StyleLabel::Tired => "tired",
            StyleLabel::Sad => "sad",
            StyleLabel::Stressed => "stressed",
            StyleLabel::Drunk => "drunk",
            StyleLabel::Relaxed => "relaxed",
        }
    }
}

impl fmt::Display for StyleLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One planned behavior unit: skill, optional object category, optional
/// caption, optional style.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Keyframe {
    pub skill: SkillId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style: Option<StyleLabel>,
}

impl Keyframe {
    pub fn new(skill: SkillId) -> Self {
        Keyframe {
            skill,
            object: None,
            caption: None,
            style: None,
        }
    }

    pub fn with_object(mut self, object: impl Into<String>) -> Self {
        self.object = Some(object.into());
        self
    }

    pub fn with_caption(mut self, caption: impl Into<String>, style: StyleLabel) -> Self {
        self.caption = Some(caption.into());
        self.style = Some(style);
        self
    }

    pub fn with_style(mut self, style: StyleLabel) -> Self {
        self.style = Some(style);
        self
    }
}

/// Stable identifier of a stored short script.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ScriptId(pub String);

impl fmt::Display for ScriptId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Keyframes plus summary sentence and overall style label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShortScript {
    pub id: ScriptId,
    pub summary: String,
    pub style_label: StyleLabel,
    pub keyframes: Vec<Keyframe>,
}

impl ShortScript {
    /// Build a script, deriving the style label from the keyframes.
    pub fn new(
        id: impl Into<String>,
        summary: impl Into<String>,
        keyframes: Vec<Keyframe>,
    ) -> Self {
        let style_label = modal_style(&keyframes);
        ShortScript {
            id: ScriptId(id.into()),
            summary: summary.into(),
            style_label,
            keyframes,
        }
    }
}

/// Modal non-neutral style among keyframe styles; Neutral if none.
/// Ties break toward the style seen first.
pub fn modal_style(keyframes: &[Keyframe]) -> StyleLabel {
    let mut counts: Vec<(StyleLabel, usize)> = Vec::new();
    for kf in keyframes {
        if let Some(style) = kf.style {
            if style == StyleLabel::Neutral {
                continue;
            }
            match counts.iter_mut().find(|(s, _)| *s == style) {
                Some((_, c)) => *c += 1,
                None => counts.push((style, 1)),
            }
        }
    }
    let mut best: Option<(StyleLabel, usize)> = None;
    for &(style, count) in &counts {
        // Strict comparison keeps the first-seen style on ties.
        if best.map_or(true, |(_, c)| count > c) {
            best = Some((style, count));
        }
    }
    best.map(|(s, _)| s).unwrap_or(StyleLabel::Neutral)
}

/// One violated invariant; validation collects these instead of aborting.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    MissingObject { index: usize, skill: SkillId },
    ForbiddenCaption { index: usize, skill: SkillId },
    ForbiddenStyle { index: usize, skill: SkillId },
    CaptionWithoutStyle { index: usize },
    EmptyKeyframes,
    EmptySummary,
    InconsistentStyleLabel { declared: StyleLabel, modal: StyleLabel },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::MissingObject { index, skill } => {
                write!(f, "keyframe {index}: {skill} requires an object")
            }
            Violation::ForbiddenCaption { index, skill } => {
                write!(f, "keyframe {index}: {skill} does not take a caption")
            }
            Violation::ForbiddenStyle { index, skill } => {
                write!(f, "keyframe {index}: {skill} does not take a style")
            }
            Violation::CaptionWithoutStyle { index } => {
                write!(f, "keyframe {index}: caption present but style absent")
            }
            Violation::EmptyKeyframes => f.write_str("script has no keyframes"),
            Violation::EmptySummary => f.write_str("script summary is empty"),
            Violation::InconsistentStyleLabel { declared, modal } => write!(
                f,
                "style label {declared} does not match modal keyframe style {modal}"
            ),
        }
    }
}

/// Structural validation of a single keyframe. Never aborts; reports.
pub fn validate_keyframe(index: usize, kf: &Keyframe) -> Vec<Violation> {
    let mut out = Vec::new();
    if kf.skill.requires_object() && kf.object.is_none() {
        out.push(Violation::MissingObject {
            index,
            skill: kf.skill,
        });
    }
    if !kf.skill.text_conditioned() {
        if kf.caption.is_some() {
            out.push(Violation::ForbiddenCaption {
                index,
                skill: kf.skill,
            });
        }
        if kf.style.is_some() {
            out.push(Violation::ForbiddenStyle {
                index,
                skill: kf.skill,
            });
        }
    }
    if kf.caption.is_some() && kf.style.is_none() {
        out.push(Violation::CaptionWithoutStyle { index });
    }
    out
}

/// Structural validation of a whole short script.
pub fn validate_short_script(script: &ShortScript) -> Vec<Violation> {
    let mut out = Vec::new();
    if script.keyframes.is_empty() {
        out.push(Violation::EmptyKeyframes);
    }
    if script.summary.trim().is_empty() {
        out.push(Violation::EmptySummary);
    }
    for (i, kf) in script.keyframes.iter().enumerate() {
        out.extend(validate_keyframe(i, kf));
    }
    let modal = modal_style(&script.keyframes);
    if script.style_label != modal {
        out.push(Violation::InconsistentStyleLabel {
            declared: script.style_label,
            modal,
        });
    }
    out
}

#[derive(Debug, Error)]
pub enum DbError {
    #[error("invalid script {id}: {}", violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    InvalidScript {
        id: ScriptId,
        violations: Vec<Violation>,
    },
    #[error("duplicate script id {0}")]
    DuplicateId(ScriptId),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unsupported schema version {found} at line {line} (expected {SDB_VERSION})")]
    SchemaVersion { line: usize, found: u32 },
}

#[derive(Debug, Serialize, Deserialize)]
struct SdbRecord {
    id: String,
    summary: String,
    style_label: StyleLabel,
    keyframes: Vec<Keyframe>,
    key_b64: String,
    v: u32,
}

/// Script store with embedding keys and a per-style index.
///
/// Read-shared after construction; insertion requires exclusive access.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct ScriptDatabase {
    scripts: Vec<ShortScript>,
    keys: Vec<EmbeddingVector>,
    style_index: BTreeMap<StyleLabel, Vec<ScriptId>>,
    next_serial: u64,
}

impl ScriptDatabase {
    pub fn new() -> Self {
        ScriptDatabase::default()
    }

    pub fn len(&self) -> usize {
        self.scripts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scripts.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &ScriptId> {
        self.scripts.iter().map(|s| &s.id)
    }

    pub fn get(&self, id: &ScriptId) -> Option<&ShortScript> {
        self.scripts.iter().find(|s| &s.id == id)
    }

    pub fn key(&self, id: &ScriptId) -> Option<&EmbeddingVector> {
        self.scripts
            .iter()
            .position(|s| &s.id == id)
            .map(|i| &self.keys[i])
    }

    /// Validate, embed the summary, and store. Returns the assigned id.
    /// An invalid script leaves the database untouched.
    pub fn insert(
        &mut self,
        summary: impl Into<String>,
        keyframes: Vec<Keyframe>,
        provider: &dyn EmbeddingProvider,
    ) -> Result<ScriptId, DbError> {
        let id = ScriptId(format!("s{:05}", self.next_serial));
        let script = ShortScript::new(id.0.clone(), summary, keyframes);
        self.insert_script(script, provider)
    }

    /// Insert a pre-built script, keeping its id.
    pub fn insert_script(
        &mut self,
        script: ShortScript,
        provider: &dyn EmbeddingProvider,
    ) -> Result<ScriptId, DbError> {
        let violations = validate_short_script(&script);
        if !violations.is_empty() {
            return Err(DbError::InvalidScript {
                id: script.id.clone(),
                violations,
            });
        }
        if self.get(&script.id).is_some() {
            return Err(DbError::DuplicateId(script.id.clone()));
        }
        let key = provider.embed(&script.summary)?.normalize()?;
        let id = script.id.clone();
        self.style_index
            .entry(script.style_label)
            .or_default()
            .push(id.clone());
        self.scripts.push(script);
        self.keys.push(key);
        self.next_serial += 1;
        Ok(id)
    }

    /// Ids with the given style label, in insertion order.
    pub fn query_by_style(&self, style: StyleLabel) -> &[ScriptId] {
        self.style_index
            .get(&style)
            .map(|v| v.as_slice())
            .unwrap_or(&[])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ShortScript, &EmbeddingVector)> {
        self.scripts.iter().zip(self.keys.iter())
    }

    /// Write as JSON-lines, one record per script, via a temp file and
    /// rename so a failed write never leaves a partial database.
    pub fn save(&self, path: &Path) -> Result<(), DbError> {
        let tmp = path.with_extension("sdb.tmp");
        {
            let mut file = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
            for (script, key) in self.iter() {
                let record = SdbRecord {
                    id: script.id.0.clone(),
                    summary: script.summary.clone(),
                    style_label: script.style_label,
                    keyframes: script.keyframes.clone(),
                    key_b64: encode_key(key),
                    v: SDB_VERSION,
                };
                let line = serde_json::to_string(&record).expect("serializable record");
                writeln!(file, "{line}")?;
            }
            file.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Load a JSON-lines database. Keys round-trip bit-exactly.
    pub fn load(path: &Path) -> Result<Self, DbError> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut db = ScriptDatabase::new();
        for (lineno, line) in file.lines().enumerate() {
            let line = line?;
            let lineno = lineno + 1;
            if line.trim().is_empty() {
                continue;
            }
            let record: SdbRecord =
                serde_json::from_str(&line).map_err(|e| DbError::Parse {
                    line: lineno,
                    message: e.to_string(),
                })?;
            if record.v != SDB_VERSION {
                return Err(DbError::SchemaVersion {
                    line: lineno,
                    found: record.v,
                });
            }
            let key = decode_key(&record.key_b64).map_err(|message| DbError::Parse {
                line: lineno,
                message,
            })?;
            let script = ShortScript {
                id: ScriptId(record.id),
                summary: record.summary,
                style_label: record.style_label,
                keyframes: record.keyframes,
            };
            if db.get(&script.id).is_some() {
                return Err(DbError::DuplicateId(script.id));
            }
            db.style_index
                .entry(script.style_label)
                .or_default()
                .push(script.id.clone());
            db.scripts.push(script);
            db.keys.push(key);
        }
        db.next_serial = db.len() as u64;
        Ok(db)
    }
}

fn encode_key(key: &EmbeddingVector) -> String {
    let mut bytes = Vec::with_capacity(key.dim() * 8);
    for v in key.values() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

fn decode_key(b64: &str) -> Result<EmbeddingVector, String> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(b64)
        .map_err(|e| format!("bad key encoding: {e}"))?;
    if bytes.len() % 8 != 0 {
        return Err("key byte length not a multiple of 8".into());
    }
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(EmbeddingVector::new(values))
}
