//! Line-delimited JSON file formats.
//!
//! Every file starts with a header line `{"format":"<name>","version":1}`
//! followed by one JSON record per line. Blank lines are ignored on read.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::domain::{
    Category, CirScore, QueryValidator, RawQueryRecord, Ranking, ReasoningTrace, Triplet,
    VisualQuestion,
};

pub const FORMAT_VERSION: u32 = 1;

pub const TRIPLETS: &str = "vqarank-triplets";
pub const QUESTIONS: &str = "vqarank-questions";
pub const CIR_SCORES: &str = "vqarank-cir-scores";
pub const IMAGE_INDEX: &str = "vqarank-image-index";
pub const RANKINGS: &str = "vqarank-rankings";
pub const TRACES: &str = "vqarank-traces";
pub const VQA_CORPUS: &str = "vqarank-vqa-corpus";
pub const RECORDS: &str = "vqarank-records";

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{source_name}: missing or malformed format header on line 1")]
    MissingHeader { source_name: String },
    #[error("{source_name}: expected format '{expected}', found '{found}'")]
    WrongFormat {
        source_name: String,
        expected: String,
        found: String,
    },
    #[error("{source_name}: unsupported format version {found} (supported: {FORMAT_VERSION})")]
    UnsupportedVersion { source_name: String, found: u32 },
    #[error("{source_name}:{line}: {message}")]
    Record {
        source_name: String,
        line: usize,
        message: String,
    },
    #[error("{source_name}: {message}")]
    Invalid { source_name: String, message: String },
}

impl FormatError {
    fn record(source_name: &str, line: usize, message: impl ToString) -> Self {
        FormatError::Record {
            source_name: source_name.to_string(),
            line,
            message: message.to_string(),
        }
    }

    pub fn io(path: &Path, source: io::Error) -> Self {
        FormatError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormatHeader {
    pub format: String,
    pub version: u32,
}

impl FormatHeader {
    pub fn new(format: &str) -> Self {
        Self {
            format: format.to_string(),
            version: FORMAT_VERSION,
        }
    }
}

/// Parses header plus records. Returns each record with its 1-based line number.
pub fn parse_records<T: DeserializeOwned>(
    text: &str,
    source_name: &str,
    format: &str,
) -> Result<Vec<(usize, T)>, FormatError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let header_line = lines
        .find(|(_, l)| !l.trim().is_empty())
        .ok_or_else(|| FormatError::MissingHeader {
            source_name: source_name.to_string(),
        })?;
    let header: FormatHeader =
        serde_json::from_str(header_line.1).map_err(|_| FormatError::MissingHeader {
            source_name: source_name.to_string(),
        })?;
    if header.format != format {
        return Err(FormatError::WrongFormat {
            source_name: source_name.to_string(),
            expected: format.to_string(),
            found: header.format,
        });
    }
    if header.version != FORMAT_VERSION {
        return Err(FormatError::UnsupportedVersion {
            source_name: source_name.to_string(),
            found: header.version,
        });
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l)
                .map(|r| (n, r))
                .map_err(|e| FormatError::record(source_name, n, e))
        })
        .collect()
}

pub fn read_records<T: DeserializeOwned>(
    path: &Path,
    format: &str,
) -> Result<Vec<(usize, T)>, FormatError> {
    let text = std::fs::read_to_string(path).map_err(|e| FormatError::io(path, e))?;
    parse_records(&text, &path.display().to_string(), format)
}

/// Renders header plus records; the output ends with a newline.
pub fn render_records<'a, T: Serialize + 'a>(
    format: &str,
    records: impl IntoIterator<Item = &'a T>,
) -> String {
    let mut out = serde_json::to_string(&FormatHeader::new(format)).expect("header serializes");
    out.push('\n');
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    out
}

pub fn write_records<'a, T: Serialize + 'a>(
    path: &Path,
    format: &str,
    records: impl IntoIterator<Item = &'a T>,
) -> Result<(), FormatError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| FormatError::io(parent, e))?;
    }
    std::fs::write(path, render_records(format, records)).map_err(|e| FormatError::io(path, e))
}

/// Triplet ingestion record. `candidate` is the reference image id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletRecord {
    pub query_id: String,
    pub candidate: String,
    pub target: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub captions: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modification_text: Option<String>,
    pub category: String,
}

pub fn parse_triplets(text: &str, source_name: &str) -> Result<Vec<Triplet>, FormatError> {
    let mut validator = QueryValidator::new();
    parse_records::<TripletRecord>(text, source_name, TRIPLETS)?
        .into_iter()
        .map(|(line, rec)| {
            let raw = RawQueryRecord {
                query_id: rec.query_id,
                reference_image_id: rec.candidate,
                modification_text: rec.modification_text,
                captions: rec.captions,
                category: rec.category,
            };
            let query = validator
                .validate(&raw)
                .map_err(|e| FormatError::record(source_name, line, e))?;
            Ok(Triplet {
                query,
                target_image_id: rec.target,
            })
        })
        .collect()
}

pub fn load_triplets(path: &Path) -> Result<Vec<Triplet>, FormatError> {
    let text = std::fs::read_to_string(path).map_err(|e| FormatError::io(path, e))?;
    parse_triplets(&text, &path.display().to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionsRecord {
    pub query_id: String,
    pub questions: Vec<VisualQuestion>,
}

/// Question corpus: query id to its question list.
pub type QuestionCorpus = BTreeMap<String, Vec<VisualQuestion>>;

pub fn load_question_corpus(path: &Path) -> Result<QuestionCorpus, FormatError> {
    let source = path.display().to_string();
    let mut corpus = QuestionCorpus::new();
    for (line, rec) in read_records::<QuestionsRecord>(path, QUESTIONS)? {
        if corpus.insert(rec.query_id.clone(), rec.questions).is_some() {
            return Err(FormatError::record(
                &source,
                line,
                format!("duplicate query id '{}'", rec.query_id),
            ));
        }
    }
    Ok(corpus)
}

pub fn write_question_corpus(path: &Path, corpus: &QuestionCorpus) -> Result<(), FormatError> {
    let records: Vec<QuestionsRecord> = corpus
        .iter()
        .map(|(q, qs)| QuestionsRecord {
            query_id: q.clone(),
            questions: qs.clone(),
        })
        .collect();
    write_records(path, QUESTIONS, &records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CirScoreRecord {
    pub query_id: String,
    pub candidate_id: String,
    pub score: f64,
}

/// Base scores grouped by query, candidates in file order.
pub fn parse_cir_scores(
    text: &str,
    source_name: &str,
) -> Result<BTreeMap<String, Vec<CirScore>>, FormatError> {
    let mut grouped: BTreeMap<String, Vec<CirScore>> = BTreeMap::new();
    let mut seen: HashSet<(String, String)> = HashSet::new();
    for (line, rec) in parse_records::<CirScoreRecord>(text, source_name, CIR_SCORES)? {
        if !rec.score.is_finite() {
            return Err(FormatError::record(source_name, line, "score must be finite"));
        }
        if !seen.insert((rec.query_id.clone(), rec.candidate_id.clone())) {
            return Err(FormatError::record(
                source_name,
                line,
                format!(
                    "duplicate candidate '{}' for query '{}'",
                    rec.candidate_id, rec.query_id
                ),
            ));
        }
        grouped
            .entry(rec.query_id)
            .or_default()
            .push(CirScore::new(rec.candidate_id, rec.score));
    }
    Ok(grouped)
}

pub fn load_cir_scores(path: &Path) -> Result<BTreeMap<String, Vec<CirScore>>, FormatError> {
    let text = std::fs::read_to_string(path).map_err(|e| FormatError::io(path, e))?;
    parse_cir_scores(&text, &path.display().to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageIndexRecord {
    pub image_id: String,
    pub category: Category,
}

pub fn load_image_index(path: &Path) -> Result<Vec<ImageIndexRecord>, FormatError> {
    let source = path.display().to_string();
    let mut seen = HashSet::new();
    read_records::<ImageIndexRecord>(path, IMAGE_INDEX)?
        .into_iter()
        .map(|(line, rec)| {
            if !seen.insert(rec.image_id.clone()) {
                return Err(FormatError::record(
                    &source,
                    line,
                    format!("duplicate image id '{}'", rec.image_id),
                ));
            }
            Ok(rec)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingRecord {
    pub query_id: String,
    pub ranking: Ranking,
}

pub fn load_rankings(path: &Path) -> Result<BTreeMap<String, Ranking>, FormatError> {
    let source = path.display().to_string();
    let mut out = BTreeMap::new();
    for (line, rec) in read_records::<RankingRecord>(path, RANKINGS)? {
        if out.insert(rec.query_id.clone(), rec.ranking).is_some() {
            return Err(FormatError::record(
                &source,
                line,
                format!("duplicate query id '{}'", rec.query_id),
            ));
        }
    }
    Ok(out)
}

pub fn load_traces(path: &Path) -> Result<Vec<ReasoningTrace>, FormatError> {
    Ok(read_records::<ReasoningTrace>(path, TRACES)?
        .into_iter()
        .map(|(_, t)| t)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StoreRecord {
    key: String,
    response: Value,
}

/// Content-hash keyed record store, optionally backed by an append-only file.
///
/// Later records for the same key win on load. Appends write one complete
/// line per call, so concurrent writers never interleave partial records.
#[derive(Debug, Default)]
pub struct RecordStore {
    entries: RwLock<HashMap<String, Value>>,
    file: Option<Mutex<File>>,
    path: Option<PathBuf>,
}

impl RecordStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn parse(text: &str, source_name: &str) -> Result<Self, FormatError> {
        let entries = parse_records::<StoreRecord>(text, source_name, RECORDS)?
            .into_iter()
            .map(|(_, r)| (r.key, r.response))
            .collect();
        Ok(Self {
            entries: RwLock::new(entries),
            file: None,
            path: None,
        })
    }

    /// Read-only load.
    pub fn load(path: &Path) -> Result<Self, FormatError> {
        let text = std::fs::read_to_string(path).map_err(|e| FormatError::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Opens (creating if needed) a store that appends new records to `path`.
    pub fn open_append(path: &Path) -> Result<Self, FormatError> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| FormatError::io(parent, e))?;
        }
        let existing = match std::fs::read_to_string(path) {
            Ok(text) if !text.trim().is_empty() => Some(text),
            Ok(_) => None,
            Err(e) if e.kind() == io::ErrorKind::NotFound => None,
            Err(e) => return Err(FormatError::io(path, e)),
        };
        let mut store = match &existing {
            Some(text) => Self::parse(text, &path.display().to_string())?,
            None => Self::in_memory(),
        };
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| FormatError::io(path, e))?;
        if existing.is_none() {
            let mut header = serde_json::to_string(&FormatHeader::new(RECORDS)).unwrap();
            header.push('\n');
            file.write_all(header.as_bytes())
                .map_err(|e| FormatError::io(path, e))?;
        }
        store.file = Some(Mutex::new(file));
        store.path = Some(path.to_path_buf());
        Ok(store)
    }

    pub fn get(&self, key: &str) -> Option<Value> {
        self.entries.read().unwrap().get(key).cloned()
    }

    pub fn insert(&self, key: &str, response: Value) -> Result<(), FormatError> {
        if let Some(file) = &self.file {
            let mut line = serde_json::to_string(&StoreRecord {
                key: key.to_string(),
                response: response.clone(),
            })
            .expect("records serialize");
            line.push('\n');
            let mut f = file.lock().unwrap();
            f.write_all(line.as_bytes()).map_err(|e| {
                FormatError::io(self.path.as_deref().unwrap_or(Path::new("<store>")), e)
            })?;
        }
        self.entries
            .write()
            .unwrap()
            .insert(key.to_string(), response);
        Ok(())
    }

    /// Snapshot of all entries, sorted by key.
    pub fn entries(&self) -> Vec<(String, Value)> {
        let mut v: Vec<_> = self
            .entries
            .read()
            .unwrap()
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        v.sort_by(|a, b| a.0.cmp(&b.0));
        v
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Renders the entries in key order as a complete store file.
    pub fn render(&self) -> String {
        let records: Vec<StoreRecord> = self
            .entries()
            .into_iter()
            .map(|(key, response)| StoreRecord { key, response })
            .collect();
        render_records(RECORDS, &records)
    }
}
