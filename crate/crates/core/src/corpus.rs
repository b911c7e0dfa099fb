//! Document corpus: manifest loading, paragraph-aware chunking and the
//! persisted chunked-corpus file.
//!
//! Offsets in [`DocumentChunk::char_span`] and sizes in [`ChunkPolicy`] are
//! counted in Unicode scalar values, not bytes.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Version stamped into persisted corpus files.
pub const CORPUS_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("manifest not found: {}", .0.display())]
    ManifestNotFound(PathBuf),
    #[error("manifest parse error in {} at line {line}, column {column}: {message}", path.display())]
    ManifestParseError {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("duplicate doc_id {0:?} in manifest")]
    DuplicateDocId(String),
    #[error("document {doc_id:?} has unknown category {category:?} (expected \"regulatory\" or \"safety\")")]
    UnknownCategory { doc_id: String, category: String },
    #[error("cannot read document {doc_id:?} at {}: {reason}", path.display())]
    UnreadableDocument {
        doc_id: String,
        path: PathBuf,
        reason: String,
    },
    #[error("document is empty")]
    EmptyDocument,
    #[error("document {doc_id:?}: {source}")]
    InDocument {
        doc_id: String,
        #[source]
        source: Box<CorpusError>,
    },
    #[error("invalid chunk policy: {0}")]
    InvalidPolicy(String),
    #[error("corpus has no {0} document")]
    MissingCategory(Category),
    #[error("corpus file: {0}")]
    CorpusFile(String),
}

/// Document category; decides which agents may retrieve a chunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Regulatory,
    Safety,
}

impl Category {
    pub const ALL: [Category; 2] = [Category::Regulatory, Category::Safety];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Regulatory => "regulatory",
            Category::Safety => "safety",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "regulatory" => Some(Category::Regulatory),
            "safety" => Some(Category::Safety),
            _ => None,
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentMeta {
    pub doc_id: String,
    pub title: String,
    pub category: Category,
    pub agency: String,
    /// Resolved path of the plain-text content.
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentChunk {
    pub chunk_id: String,
    pub doc_id: String,
    pub section_label: String,
    pub text: String,
    pub category: Category,
    /// Half-open `[start, end)` character offsets into the source document.
    pub char_span: (usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitPreference {
    ParagraphBoundary,
    HardCut,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChunkPolicy {
    pub target_chars: usize,
    pub overlap_chars: usize,
    pub split_preference: SplitPreference,
}

impl Default for ChunkPolicy {
    fn default() -> Self {
        Self {
            target_chars: 1600,
            overlap_chars: 200,
            split_preference: SplitPreference::ParagraphBoundary,
        }
    }
}

impl ChunkPolicy {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.target_chars == 0 {
            return Err(CorpusError::InvalidPolicy("target_chars must be positive".into()));
        }
        if self.overlap_chars >= self.target_chars {
            return Err(CorpusError::InvalidPolicy(format!(
                "overlap_chars ({}) must be smaller than target_chars ({})",
                self.overlap_chars, self.target_chars
            )));
        }
        Ok(())
    }
}

/// A loaded document set. `chunks` stays empty until [`chunk_corpus`] runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub documents: Vec<DocumentMeta>,
    pub chunks: Vec<DocumentChunk>,
    pub chunk_policy: Option<ChunkPolicy>,
    /// Document texts, parallel to `documents`. Not persisted.
    #[serde(skip)]
    texts: Vec<String>,
}

impl Corpus {
    pub fn from_parts(documents: Vec<DocumentMeta>, texts: Vec<String>) -> Result<Self, CorpusError> {
        assert_eq!(documents.len(), texts.len(), "one text per document");
        let mut seen = HashSet::new();
        for doc in &documents {
            if !seen.insert(doc.doc_id.as_str()) {
                return Err(CorpusError::DuplicateDocId(doc.doc_id.clone()));
            }
        }
        Ok(Self {
            documents,
            chunks: Vec::new(),
            chunk_policy: None,
            texts,
        })
    }

    pub fn text_of(&self, doc_id: &str) -> Option<&str> {
        self.documents
            .iter()
            .position(|d| d.doc_id == doc_id)
            .and_then(|i| self.texts.get(i))
            .map(String::as_str)
    }

    pub fn document(&self, doc_id: &str) -> Option<&DocumentMeta> {
        self.documents.iter().find(|d| d.doc_id == doc_id)
    }

    pub fn chunk(&self, chunk_id: &str) -> Option<&DocumentChunk> {
        self.chunks.iter().find(|c| c.chunk_id == chunk_id)
    }

    pub fn is_chunked(&self) -> bool {
        !self.chunks.is_empty()
    }

    pub fn has_category(&self, category: Category) -> bool {
        self.documents.iter().any(|d| d.category == category)
    }

    /// Checks that every listed category has at least one document.
    pub fn require_categories(&self, categories: &[Category]) -> Result<(), CorpusError> {
        for &c in categories {
            if !self.has_category(c) {
                return Err(CorpusError::MissingCategory(c));
            }
        }
        Ok(())
    }

    pub fn count_by_category(&self, category: Category) -> usize {
        self.chunks.iter().filter(|c| c.category == category).count()
    }

    /// SHA-256 over document metadata (minus filesystem paths) and all chunks.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for doc in &self.documents {
            for field in [doc.doc_id.as_str(), doc.title.as_str(), doc.category.as_str(), doc.agency.as_str()] {
                hasher.update(field.as_bytes());
                hasher.update([0u8]);
            }
        }
        for chunk in &self.chunks {
            for field in [chunk.chunk_id.as_str(), chunk.section_label.as_str(), chunk.text.as_str()] {
                hasher.update(field.as_bytes());
                hasher.update([0u8]);
            }
            hasher.update((chunk.char_span.0 as u64).to_le_bytes());
            hasher.update((chunk.char_span.1 as u64).to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Persisted<'a> {
            schema_version: u32,
            #[serde(flatten)]
            corpus: &'a Corpus,
        }
        serde_json::to_string_pretty(&Persisted {
            schema_version: CORPUS_SCHEMA_VERSION,
            corpus: self,
        })
        .expect("corpus serializes")
    }

    /// Parses a persisted corpus. Document texts are not restored.
    pub fn from_json(json: &str) -> Result<Self, CorpusError> {
        #[derive(Deserialize)]
        struct Persisted {
            schema_version: u32,
            #[serde(flatten)]
            corpus: Corpus,
        }
        let p: Persisted = serde_json::from_str(json).map_err(|e| CorpusError::CorpusFile(e.to_string()))?;
        if p.schema_version != CORPUS_SCHEMA_VERSION {
            return Err(CorpusError::CorpusFile(format!(
                "unsupported schema_version {}",
                p.schema_version
            )));
        }
        let mut corpus = p.corpus;
        for chunk in &corpus.chunks {
            if corpus.document(&chunk.doc_id).is_none() {
                return Err(CorpusError::CorpusFile(format!(
                    "chunk {} references unknown document {}",
                    chunk.chunk_id, chunk.doc_id
                )));
            }
        }
        corpus.texts = vec![String::new(); corpus.documents.len()];
        Ok(corpus)
    }
}

#[derive(Deserialize)]
struct ManifestRecord {
    doc_id: String,
    title: String,
    category: String,
    agency: String,
    path: PathBuf,
}

/// Reads a JSON manifest and the documents it lists. Relative document paths
/// resolve against the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Corpus, CorpusError> {
    let raw = match fs::read_to_string(path) {
        Ok(raw) => raw,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(CorpusError::ManifestNotFound(path.to_path_buf()))
        }
        Err(e) => {
            return Err(CorpusError::ManifestParseError {
                path: path.to_path_buf(),
                line: 0,
                column: 0,
                message: e.to_string(),
            })
        }
    };
    let records: Vec<ManifestRecord> =
        serde_json::from_str(&raw).map_err(|e| CorpusError::ManifestParseError {
            path: path.to_path_buf(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;

    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut seen = HashSet::new();
    let mut documents = Vec::with_capacity(records.len());
    let mut texts = Vec::with_capacity(records.len());
    for rec in records {
        if !seen.insert(rec.doc_id.clone()) {
            return Err(CorpusError::DuplicateDocId(rec.doc_id));
        }
        let category = Category::parse(&rec.category).ok_or_else(|| CorpusError::UnknownCategory {
            doc_id: rec.doc_id.clone(),
            category: rec.category.clone(),
        })?;
        let doc_path = if rec.path.is_absolute() {
            rec.path
        } else {
            base.join(rec.path)
        };
        let text = fs::read(&doc_path)
            .map_err(|e| e.to_string())
            .and_then(|bytes| String::from_utf8(bytes).map_err(|e| e.to_string()))
            .map_err(|reason| CorpusError::UnreadableDocument {
                doc_id: rec.doc_id.clone(),
                path: doc_path.clone(),
                reason,
            })?;
        documents.push(DocumentMeta {
            doc_id: rec.doc_id,
            title: rec.title,
            category,
            agency: rec.agency,
            path: doc_path,
        });
        texts.push(text);
    }
    Corpus::from_parts(documents, texts)
}

/// Returns a warning when the manifest was last modified longer ago than
/// `max_age`. Stale corpora can miss regulatory updates.
pub fn staleness_warning(path: &Path, max_age: Duration) -> Option<String> {
    let modified = fs::metadata(path).and_then(|m| m.modified()).ok()?;
    let age = SystemTime::now().duration_since(modified).ok()?;
    (age > max_age).then(|| {
        format!(
            "manifest {} was last modified {} days ago; the corpus may be missing recent regulatory updates",
            path.display(),
            age.as_secs() / 86_400
        )
    })
}

/// Content span of one paragraph, in char offsets. Separators are excluded.
#[derive(Debug, Clone, Copy)]
struct Paragraph {
    start: usize,
    end: usize,
}

/// Splits on runs of two or more newlines (blank lines may carry spaces).
/// Returns paragraph content spans plus the offsets where each paragraph
/// after the first begins; those are the preferred cut points.
fn paragraphs(chars: &[char]) -> (Vec<Paragraph>, Vec<usize>) {
    let n = chars.len();
    let mut paras = Vec::new();
    let mut boundaries = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < n {
        if chars[i] == '\n' {
            // scan the whitespace run and count its newlines
            let mut j = i;
            let mut newlines = 0;
            while j < n && chars[j].is_whitespace() {
                if chars[j] == '\n' {
                    newlines += 1;
                }
                j += 1;
            }
            if newlines >= 2 && j < n {
                paras.push(Paragraph { start, end: i });
                boundaries.push(j);
                start = j;
            }
            i = j.max(i + 1);
        } else {
            i += 1;
        }
    }
    paras.push(Paragraph { start, end: n });
    (paras, boundaries)
}

/// Splits one document into overlapping chunks.
///
/// Each chunk is at most `target_chars` long. Under `ParagraphBoundary` the
/// cut lands on the last paragraph start inside the window, provided the
/// next chunk would still make progress; otherwise it falls back to a hard
/// cut. Consecutive chunks overlap by exactly `overlap_chars`.
/// Whitespace-only windows are not emitted.
pub fn chunk_document(doc: &DocumentMeta, text: &str, policy: &ChunkPolicy) -> Result<Vec<DocumentChunk>, CorpusError> {
    policy.validate()?;
    if text.trim().is_empty() {
        return Err(CorpusError::EmptyDocument);
    }
    let chars: Vec<char> = text.chars().collect();
    let n = chars.len();
    let (paras, boundaries) = paragraphs(&chars);

    let mut spans = Vec::new();
    let mut start = 0;
    loop {
        if n - start <= policy.target_chars {
            spans.push((start, n));
            break;
        }
        let hard_end = start + policy.target_chars;
        let mut end = hard_end;
        if policy.split_preference == SplitPreference::ParagraphBoundary {
            let min_end = start + policy.overlap_chars;
            if let Some(&b) = boundaries.iter().rev().find(|&&b| b <= hard_end && b > min_end) {
                end = b;
            }
        }
        spans.push((start, end));
        start = end - policy.overlap_chars;
    }

    let mut chunks = Vec::with_capacity(spans.len());
    for (start, end) in spans {
        let slice: String = chars[start..end].iter().collect();
        if slice.trim().is_empty() {
            continue;
        }
        let para_no = paras
            .iter()
            .position(|p| p.start < end && start < p.end.max(p.start + 1))
            .map_or(1, |i| i + 1);
        chunks.push(DocumentChunk {
            chunk_id: chunk_id(&doc.doc_id, chunks.len()),
            doc_id: doc.doc_id.clone(),
            section_label: format!("Paragraph {para_no}"),
            text: slice,
            category: doc.category,
            char_span: (start, end),
        });
    }
    Ok(chunks)
}

pub fn chunk_id(doc_id: &str, ordinal: usize) -> String {
    format!("{doc_id}#{ordinal}")
}

/// Splits a chunk id back into `(doc_id, ordinal)`.
pub fn parse_chunk_id(chunk_id: &str) -> Option<(&str, usize)> {
    let (doc, ord) = chunk_id.rsplit_once('#')?;
    Some((doc, ord.parse().ok()?))
}

/// Chunks every document in manifest order.
pub fn chunk_corpus(mut corpus: Corpus, policy: &ChunkPolicy) -> Result<Corpus, CorpusError> {
    policy.validate()?;
    let mut chunks = Vec::new();
    for (doc, text) in corpus.documents.iter().zip(&corpus.texts) {
        let doc_chunks = chunk_document(doc, text, policy).map_err(|e| CorpusError::InDocument {
            doc_id: doc.doc_id.clone(),
            source: Box::new(e),
        })?;
        chunks.extend(doc_chunks);
    }
    corpus.chunks = chunks;
    corpus.chunk_policy = Some(*policy);
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn doc(id: &str, category: Category) -> DocumentMeta {
        DocumentMeta {
            doc_id: id.into(),
            title: id.to_uppercase(),
            category,
            agency: "DOE".into(),
            path: PathBuf::from(format!("{id}.txt")),
        }
    }

    fn hard(target: usize, overlap: usize) -> ChunkPolicy {
        ChunkPolicy {
            target_chars: target,
            overlap_chars: overlap,
            split_preference: SplitPreference::HardCut,
        }
    }

    fn write_manifest(dir: &Path, body: &str) -> PathBuf {
        let path = dir.join("manifest.json");
        fs::write(&path, body).unwrap();
        path
    }

    #[test]
    fn short_text_is_one_chunk() {
        let text = "x".repeat(500);
        let chunks = chunk_document(&doc("a", Category::Safety), &text, &ChunkPolicy::default()).unwrap();
        assert_eq!(chunks.len(), 1);
        assert_eq!(chunks[0].char_span, (0, 500));
        assert_eq!(chunks[0].chunk_id, "a#0");
        assert_eq!(chunks[0].section_label, "Paragraph 1");
    }

    #[test]
    fn hard_cut_offsets() {
        // start 0 -> end 1600, next start 1600 - 200 = 1400, remaining 1600 fits
        let text = "y".repeat(3000);
        let chunks = chunk_document(&doc("a", Category::Safety), &text, &hard(1600, 200)).unwrap();
        let spans: Vec<_> = chunks.iter().map(|c| c.char_span).collect();
        assert_eq!(spans, vec![(0, 1600), (1400, 3000)]);
    }

    #[test]
    fn empty_text_rejected() {
        let err = chunk_document(&doc("a", Category::Safety), "", &ChunkPolicy::default()).unwrap_err();
        assert!(matches!(err, CorpusError::EmptyDocument));
        let err = chunk_document(&doc("a", Category::Safety), " \n\n ", &ChunkPolicy::default()).unwrap_err();
        assert!(matches!(err, CorpusError::EmptyDocument));
    }

    #[test]
    fn paragraph_boundary_preferred() {
        let p1 = "a".repeat(60);
        let p2 = "b".repeat(60);
        let p3 = "c".repeat(60);
        let text = format!("{p1}\n\n{p2}\n\n{p3}");
        let policy = ChunkPolicy {
            target_chars: 100,
            overlap_chars: 10,
            split_preference: SplitPreference::ParagraphBoundary,
        };
        let chunks = chunk_document(&doc("d", Category::Regulatory), &text, &policy).unwrap();
        // first cut at the start of paragraph 2 (offset 62)
        assert_eq!(chunks[0].char_span, (0, 62));
        assert_eq!(chunks[1].char_span.0, 52);
        assert_eq!(chunks[0].section_label, "Paragraph 1");
        assert_eq!(chunks[1].section_label, "Paragraph 1");
        assert!(chunks.iter().all(|c| c.text.chars().count() <= 100));
        assert_eq!(chunks.last().unwrap().char_span.1, text.chars().count());
        assert_eq!(chunks.last().unwrap().section_label, "Paragraph 2");
    }

    #[test]
    fn oversized_paragraph_falls_back_to_hard_cut() {
        let text = format!("{}\n\nshort", "z".repeat(250));
        let policy = ChunkPolicy {
            target_chars: 100,
            overlap_chars: 20,
            split_preference: SplitPreference::ParagraphBoundary,
        };
        let chunks = chunk_document(&doc("d", Category::Regulatory), &text, &policy).unwrap();
        assert_eq!(chunks[0].char_span, (0, 100));
        assert_eq!(chunks[1].char_span, (80, 180));
    }

    #[test]
    fn chunk_id_round_trip() {
        assert_eq!(parse_chunk_id("iaea-sf-1#12"), Some(("iaea-sf-1", 12)));
        assert_eq!(parse_chunk_id("weird#id#3"), Some(("weird#id", 3)));
        assert_eq!(parse_chunk_id("nohash"), None);
    }

    #[test]
    fn policy_validation() {
        assert!(hard(100, 100).validate().is_err());
        assert!(hard(0, 0).validate().is_err());
        assert!(hard(100, 99).validate().is_ok());
    }

    #[test]
    fn load_manifest_two_docs() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("r.txt"), "Regulatory text.").unwrap();
        fs::write(dir.path().join("s.txt"), "Safety text.").unwrap();
        let m = write_manifest(
            dir.path(),
            r#"[
              {"doc_id": "doe-qa", "title": "QA", "category": "regulatory", "agency": "DOE", "path": "r.txt"},
              {"doc_id": "usgs-geo", "title": "Geo", "category": "safety", "agency": "USGS", "path": "s.txt"}
            ]"#,
        );
        let corpus = load_manifest(&m).unwrap();
        assert_eq!(corpus.documents.len(), 2);
        assert!(corpus.chunks.is_empty());
        assert_eq!(corpus.text_of("usgs-geo"), Some("Safety text."));
        assert_eq!(corpus.documents[1].category, Category::Safety);
    }

    #[test]
    fn load_manifest_errors() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("r.txt"), "text").unwrap();

        let missing = load_manifest(&dir.path().join("nope.json")).unwrap_err();
        assert!(matches!(missing, CorpusError::ManifestNotFound(_)));

        let m = write_manifest(
            dir.path(),
            r#"[
              {"doc_id": "iaea-sf-1", "title": "A", "category": "regulatory", "agency": "IAEA", "path": "r.txt"},
              {"doc_id": "iaea-sf-1", "title": "B", "category": "safety", "agency": "IAEA", "path": "r.txt"}
            ]"#,
        );
        assert!(matches!(load_manifest(&m).unwrap_err(), CorpusError::DuplicateDocId(id) if id == "iaea-sf-1"));

        let m = write_manifest(
            dir.path(),
            r#"[{"doc_id": "x", "title": "A", "category": "Environmental", "agency": "EPA", "path": "r.txt"}]"#,
        );
        assert!(matches!(load_manifest(&m).unwrap_err(), CorpusError::UnknownCategory { category, .. } if category == "Environmental"));

        let m = write_manifest(dir.path(), "[\n  {\"doc_id\": \"x\", \"title\": \"A\"}\n]");
        match load_manifest(&m).unwrap_err() {
            CorpusError::ManifestParseError { line, message, .. } => {
                assert_eq!(line, 2);
                assert!(message.contains("category"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }

        let m = write_manifest(
            dir.path(),
            r#"[{"doc_id": "x", "title": "A", "category": "safety", "agency": "EPA", "path": "absent.txt"}]"#,
        );
        assert!(matches!(load_manifest(&m).unwrap_err(), CorpusError::UnreadableDocument { .. }));
    }

    #[test]
    fn chunk_corpus_ids_and_errors() {
        let corpus = Corpus::from_parts(
            vec![doc("docA", Category::Regulatory), doc("docB", Category::Safety)],
            vec!["alpha".into(), "beta".into()],
        )
        .unwrap();
        let chunked = chunk_corpus(corpus.clone(), &ChunkPolicy::default()).unwrap();
        let ids: Vec<_> = chunked.chunks.iter().map(|c| c.chunk_id.as_str()).collect();
        assert_eq!(ids, ["docA#0", "docB#0"]);
        let again = chunk_corpus(corpus, &ChunkPolicy::default()).unwrap();
        assert_eq!(
            serde_json::to_string(&chunked.chunks).unwrap(),
            serde_json::to_string(&again.chunks).unwrap()
        );

        let bad = Corpus::from_parts(
            vec![doc("big", Category::Regulatory), doc("hollow", Category::Safety)],
            vec!["w ".repeat(1500), String::new()],
        )
        .unwrap();
        let err = chunk_corpus(bad, &ChunkPolicy::default()).unwrap_err();
        assert!(matches!(&err, CorpusError::InDocument { doc_id, .. } if doc_id == "hollow"));
        assert!(err.to_string().contains("hollow"));
    }

    #[test]
    fn corpus_file_round_trip() {
        let corpus = Corpus::from_parts(
            vec![doc("docA", Category::Regulatory), doc("docB", Category::Safety)],
            vec!["alpha\n\nbeta".into(), "gamma".into()],
        )
        .unwrap();
        let chunked = chunk_corpus(corpus, &ChunkPolicy::default()).unwrap();
        let json = chunked.to_json();
        assert!(json.contains("\"schema_version\": 1"));
        let back = Corpus::from_json(&json).unwrap();
        assert_eq!(back.chunks, chunked.chunks);
        assert_eq!(back.documents, chunked.documents);
        assert_eq!(back.content_hash(), chunked.content_hash());
        assert!(Corpus::from_json(&json.replace("\"schema_version\": 1", "\"schema_version\": 9")).is_err());
    }

    #[test]
    fn missing_category_detected() {
        let corpus = Corpus::from_parts(vec![doc("a", Category::Regulatory)], vec!["t".into()]).unwrap();
        assert!(corpus.require_categories(&[Category::Regulatory]).is_ok());
        assert!(matches!(
            corpus.require_categories(&Category::ALL),
            Err(CorpusError::MissingCategory(Category::Safety))
        ));
    }

    #[test]
    fn stale_manifest_warning() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_manifest(dir.path(), "[]");
        assert!(staleness_warning(&m, Duration::from_secs(3600)).is_none());
        let old = SystemTime::now() - Duration::from_secs(400 * 86_400);
        fs::File::options().write(true).open(&m).unwrap().set_modified(old).unwrap();
        let warning = staleness_warning(&m, Duration::from_secs(365 * 86_400)).unwrap();
        assert!(warning.contains("400 days"), "{warning}");
    }

    /// Rebuilds the source from chunk spans, skipping each overlap. Spans not
    /// covered by any chunk are taken from `text` and must be whitespace, since
    /// only whitespace-only chunks are dropped.
    fn reconstruct(chunks: &[DocumentChunk], policy: &ChunkPolicy, text: &str) -> String {
        let chars: Vec<char> = text.chars().collect();
        let mut out = String::new();
        let mut covered = 0;
        for c in chunks {
            let (s, e) = c.char_span;
            if s > covered {
                let gap: String = chars[covered..s].iter().collect();
                assert!(gap.trim().is_empty(), "non-blank gap before chunk {}", c.chunk_id);
                out.push_str(&gap);
            } else if !out.is_empty() {
                // exact unless a blank chunk was dropped in between
                assert!(covered - s <= policy.overlap_chars);
            }
            out.extend(c.text.chars().skip(covered.saturating_sub(s)));
            covered = e;
        }
        let tail: String = chars[covered..].iter().collect();
        assert!(tail.trim().is_empty(), "non-blank tail after last chunk");
        out.push_str(&tail);
        out
    }

    fn text_strategy() -> impl Strategy<Value = String> {
        let word = "[a-zA-Z0-9éß]{1,12}";
        let sep = prop_oneof![Just(" "), Just(" "), Just(". "), Just("\n"), Just("\n\n"), Just("\n \n")];
        proptest::collection::vec((word, sep), 1..400)
            .prop_map(|parts| parts.into_iter().map(|(w, s)| format!("{w}{s}")).collect::<String>())
    }

    proptest! {
        #[test]
        fn chunking_covers_text(
            text in text_strategy(),
            target in 20usize..300,
            overlap_frac in 0.0f64..0.5,
            paragraph in any::<bool>(),
        ) {
            let policy = ChunkPolicy {
                target_chars: target,
                overlap_chars: (target as f64 * overlap_frac) as usize,
                split_preference: if paragraph { SplitPreference::ParagraphBoundary } else { SplitPreference::HardCut },
            };
            let d = doc("p", Category::Safety);
            let chunks = chunk_document(&d, &text, &policy).unwrap();
            let again = chunk_document(&d, &text, &policy).unwrap();
            prop_assert_eq!(&chunks, &again);
            prop_assert_eq!(reconstruct(&chunks, &policy, &text), text.clone());
            for (i, c) in chunks.iter().enumerate() {
                prop_assert!(c.char_span.0 < c.char_span.1);
                prop_assert!(c.char_span.1 - c.char_span.0 <= target);
                prop_assert!(!c.text.trim().is_empty());
                prop_assert_eq!(parse_chunk_id(&c.chunk_id), Some(("p", i)));
            }
        }
    }
}
