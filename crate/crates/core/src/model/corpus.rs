//! On-disk corpus format.
//!
//! A corpus directory holds `transcripts/<group_id>.json` and, optionally,
//! `annotations/<group_id>.json`. A single `.jsonl` file with one
//! `{"transcript": .., "annotation": ..}` object per line is accepted as an archive.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{CellTable, FactorSet, MentionLabel, MentionStyleEntry, PerceptionLabel, Step1Result};
use super::{EgocentrismResult, GroupAnnotation, Transcript};

pub const FORMAT_VERSION: &str = "1.0";
const SUPPORTED_MAJOR: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("malformed file for group `{group_id}`: {detail}")]
    MalformedFile { group_id: String, detail: String },
    #[error("group `{0}` appears more than once")]
    DuplicateGroup(String),
    #[error("annotation for `{0}` has no matching transcript")]
    OrphanAnnotation(String),
    #[error("group `{group_id}` uses unsupported format_version `{version}`")]
    UnsupportedVersion { group_id: String, version: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusEntry {
    pub transcript: Transcript,
    pub annotation: Option<GroupAnnotation>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Corpus {
    pub entries: Vec<CorpusEntry>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, group_id: &str) -> Option<&CorpusEntry> {
        self.entries
            .iter()
            .find(|e| e.transcript.group_id == group_id)
    }
}

#[derive(Serialize, Deserialize)]
struct TranscriptDoc {
    format_version: String,
    #[serde(flatten)]
    transcript: Transcript,
}

#[derive(Serialize, Deserialize)]
struct AnnotationDoc {
    format_version: String,
    group_id: String,
    step1: Step1Result,
    step12: EgocentrismResult,
    mentioned: CellTable<MentionLabel>,
    perception: CellTable<PerceptionLabel>,
    interpretation: CellTable<FactorSet>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mention_style: Option<Vec<MentionStyleEntry>>,
}

#[derive(Serialize, Deserialize)]
struct ArchiveLine {
    transcript: TranscriptDoc,
    #[serde(default)]
    annotation: Option<AnnotationDoc>,
}

fn check_version(group_id: &str, version: &str) -> Result<(), CorpusError> {
    let major = version
        .split('.')
        .next()
        .and_then(|m| m.parse::<u32>().ok());
    if major == Some(SUPPORTED_MAJOR) {
        Ok(())
    } else {
        Err(CorpusError::UnsupportedVersion {
            group_id: group_id.to_string(),
            version: version.to_string(),
        })
    }
}

fn malformed(group_id: &str, detail: impl ToString) -> CorpusError {
    CorpusError::MalformedFile {
        group_id: group_id.to_string(),
        detail: detail.to_string(),
    }
}

fn peek_group_id(bytes: &str) -> Option<String> {
    serde_json::from_str::<serde_json::Value>(bytes)
        .ok()?
        .get("group_id")?
        .as_str()
        .map(str::to_string)
}

fn transcript_from_doc(doc: TranscriptDoc) -> Result<Transcript, CorpusError> {
    let t = doc.transcript;
    check_version(&t.group_id, &doc.format_version)?;
    t.validate().map_err(|d| malformed(&t.group_id, d))?;
    Ok(t)
}

fn annotation_from_doc(doc: AnnotationDoc) -> Result<(String, GroupAnnotation), CorpusError> {
    check_version(&doc.group_id, &doc.format_version)?;
    let a = GroupAnnotation {
        step1: doc.step1,
        step12: doc.step12,
        mentioned: doc.mentioned,
        perception: doc.perception,
        interpretation: doc.interpretation,
        mention_style: doc.mention_style,
    };
    a.validate().map_err(|d| malformed(&doc.group_id, d))?;
    Ok((doc.group_id, a))
}

fn parse_transcript(fallback_id: &str, text: &str) -> Result<Transcript, CorpusError> {
    let doc: TranscriptDoc = serde_json::from_str(text).map_err(|e| {
        malformed(
            &peek_group_id(text).unwrap_or_else(|| fallback_id.to_string()),
            e,
        )
    })?;
    transcript_from_doc(doc)
}

fn parse_annotation(
    fallback_id: &str,
    text: &str,
) -> Result<(String, GroupAnnotation), CorpusError> {
    let doc: AnnotationDoc = serde_json::from_str(text).map_err(|e| {
        malformed(
            &peek_group_id(text).unwrap_or_else(|| fallback_id.to_string()),
            e,
        )
    })?;
    annotation_from_doc(doc)
}

fn json_files(dir: &Path) -> Result<Vec<PathBuf>, CorpusError> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    Ok(files)
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn pair(
    transcripts: Vec<Transcript>,
    annotations: Vec<(String, GroupAnnotation)>,
) -> Result<Corpus, CorpusError> {
    let mut by_id: BTreeMap<String, CorpusEntry> = BTreeMap::new();
    for t in transcripts {
        let id = t.group_id.clone();
        if by_id.contains_key(&id) {
            return Err(CorpusError::DuplicateGroup(id));
        }
        by_id.insert(
            id,
            CorpusEntry {
                transcript: t,
                annotation: None,
            },
        );
    }
    let mut seen = HashSet::new();
    for (id, a) in annotations {
        if !seen.insert(id.clone()) {
            return Err(CorpusError::DuplicateGroup(id));
        }
        match by_id.get_mut(&id) {
            Some(entry) => entry.annotation = Some(a),
            None => return Err(CorpusError::OrphanAnnotation(id)),
        }
    }
    Ok(Corpus {
        entries: by_id.into_values().collect(),
    })
}

/// Load and validate a corpus directory or `.jsonl` archive. Entries come back
/// sorted by group id.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus, CorpusError> {
    let path = path.as_ref();
    if path.is_file() {
        return load_archive(path);
    }
    if !path.is_dir() {
        return Err(CorpusError::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "corpus path not found"),
        });
    }
    let mut transcripts = Vec::new();
    for f in json_files(&path.join("transcripts"))? {
        let text = fs::read_to_string(&f).map_err(io_err(&f))?;
        transcripts.push(parse_transcript(&stem(&f), &text)?);
    }
    let mut annotations = Vec::new();
    for f in json_files(&path.join("annotations"))? {
        let text = fs::read_to_string(&f).map_err(io_err(&f))?;
        annotations.push(parse_annotation(&stem(&f), &text)?);
    }
    pair(transcripts, annotations)
}

fn load_archive(path: &Path) -> Result<Corpus, CorpusError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut transcripts = Vec::new();
    let mut annotations = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ArchiveLine = serde_json::from_str(line).map_err(|e| {
            malformed(
                &peek_group_id(line).unwrap_or_else(|| format!("line {}", i + 1)),
                e,
            )
        })?;
        transcripts.push(transcript_from_doc(rec.transcript)?);
        if let Some(a) = rec.annotation {
            annotations.push(annotation_from_doc(a)?);
        }
    }
    pair(transcripts, annotations)
}

fn annotation_doc(group_id: &str, a: &GroupAnnotation) -> AnnotationDoc {
    AnnotationDoc {
        format_version: FORMAT_VERSION.to_string(),
        group_id: group_id.to_string(),
        step1: a.step1.clone(),
        step12: a.step12.clone(),
        mentioned: a.mentioned.clone(),
        perception: a.perception.clone(),
        interpretation: a.interpretation.clone(),
        mention_style: a.mention_style.clone(),
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CorpusError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| malformed(&stem(path), e))?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

/// Write a corpus in the directory layout understood by [`load_corpus`].
pub fn save_corpus(dir: impl AsRef<Path>, corpus: &Corpus) -> Result<(), CorpusError> {
    let dir = dir.as_ref();
    let tdir = dir.join("transcripts");
    let adir = dir.join("annotations");
    fs::create_dir_all(&tdir).map_err(io_err(&tdir))?;
    if corpus.entries.iter().any(|e| e.annotation.is_some()) {
        fs::create_dir_all(&adir).map_err(io_err(&adir))?;
    }
    for e in &corpus.entries {
        let id = &e.transcript.group_id;
        let doc = TranscriptDoc {
            format_version: FORMAT_VERSION.to_string(),
            transcript: e.transcript.clone(),
        };
        write_json(&tdir.join(format!("{id}.json")), &doc)?;
        if let Some(a) = &e.annotation {
            write_json(&adir.join(format!("{id}.json")), &annotation_doc(id, a))?;
        }
    }
    Ok(())
}
