//! Corpus ingestion and the reference retriever.
//!
//! Pages are embedded as hashed term-frequency vectors over their
//! `text_proxy` and ranked by cosine similarity. Ties break by doc id so
//! rankings (and everything scored from them) are reproducible.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use twox_hash::XxHash64;

use crate::types::{PageImage, PixelSource, TypeError};

pub const DEFAULT_DIMS: usize = 1024;
pub const DEFAULT_K: usize = 5;
const HASH_SEED: u64 = 0;

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("duplicate doc_id {0:?}")]
    DuplicateId(String),
    #[error("search depth k must be at least 1")]
    ZeroK,
    #[error("embedding dims must be a power of two >= 8, got {0}")]
    BadDims(usize),
    #[error("remote retriever: {0}")]
    Remote(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub doc_id: String,
    pub score: f64,
}

/// Ranked results of one Search action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub step_index: usize,
    pub k: usize,
    pub entries: Vec<Candidate>,
}

impl CandidateSet {
    pub fn doc_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|c| c.doc_id.as_str())
    }
}

/// Score descending, doc id ascending.
pub fn rank_candidates(entries: &mut [Candidate]) {
    entries.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.doc_id.cmp(&b.doc_id))
    });
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pages: Vec<PageImage>,
    by_id: HashMap<String, usize>,
}

impl Corpus {
    pub fn new(pages: Vec<PageImage>) -> Result<Self, RetrievalError> {
        let mut by_id = HashMap::with_capacity(pages.len());
        for (i, p) in pages.iter().enumerate() {
            if by_id.insert(p.doc_id.clone(), i).is_some() {
                return Err(RetrievalError::DuplicateId(p.doc_id.clone()));
            }
        }
        Ok(Self { pages, by_id })
    }

    pub fn pages(&self) -> &[PageImage] {
        &self.pages
    }

    pub fn get(&self, doc_id: &str) -> Option<&PageImage> {
        self.by_id.get(doc_id).map(|&i| &self.pages[i])
    }

    pub fn len(&self) -> usize {
        self.pages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pages.is_empty()
    }
}

/// One line of a corpus manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRow {
    pub doc_id: String,
    #[serde(default)]
    pub image_path: Option<PathBuf>,
    pub width: u32,
    pub height: u32,
    #[serde(default)]
    pub text_proxy: String,
}

impl ManifestRow {
    fn into_page(self, base: &Path) -> Result<PageImage, TypeError> {
        let page = PageImage::new(self.doc_id, self.width, self.height, self.text_proxy)?;
        Ok(match self.image_path {
            Some(p) if !p.as_os_str().is_empty() => page.with_source(PixelSource::File {
                path: if p.is_absolute() { p } else { base.join(p) },
            }),
            _ => page,
        })
    }
}

/// Reads a line-delimited corpus manifest. Relative image paths resolve
/// against the manifest's directory.
pub fn ingest_corpus(manifest: &Path) -> Result<Corpus, RetrievalError> {
    let text = fs::read_to_string(manifest).map_err(|source| RetrievalError::Io {
        path: manifest.to_owned(),
        source,
    })?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    parse_corpus_manifest(&text, base)
}

pub fn parse_corpus_manifest(text: &str, base: &Path) -> Result<Corpus, RetrievalError> {
    let mut pages = Vec::new();
    let mut seen = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let row: ManifestRow = serde_json::from_str(line).map_err(|e| RetrievalError::Schema {
            line: line_no,
            message: e.to_string(),
        })?;
        if row.doc_id.is_empty() {
            return Err(RetrievalError::Schema {
                line: line_no,
                message: "empty doc_id".into(),
            });
        }
        if seen.insert(row.doc_id.clone(), line_no).is_some() {
            return Err(RetrievalError::DuplicateId(row.doc_id));
        }
        let page = row.into_page(base).map_err(|e| RetrievalError::Schema {
            line: line_no,
            message: e.to_string(),
        })?;
        pages.push(page);
    }
    Corpus::new(pages)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn dims(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &EmbeddingVector) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum()
    }
}

pub fn token_bucket(token: &str, dims: usize) -> usize {
    (XxHash64::oneshot(HASH_SEED, token.as_bytes()) as usize) & (dims - 1)
}

pub fn check_dims(dims: usize) -> Result<(), RetrievalError> {
    if dims < 8 || !dims.is_power_of_two() {
        return Err(RetrievalError::BadDims(dims));
    }
    Ok(())
}

/// L2-normalized hashed term frequencies of the lowercased whitespace tokens.
///
/// `dims` must be a power of two no smaller than 8; see [`check_dims`].
pub fn embed(text: &str, dims: usize) -> EmbeddingVector {
    debug_assert!(check_dims(dims).is_ok());
    let mut values = vec![0.0; dims];
    for tok in text.to_lowercase().split_whitespace() {
        values[token_bucket(tok, dims)] += 1.0;
    }
    let mut v = EmbeddingVector { values };
    let norm = v.norm();
    if norm > 0.0 {
        v.values.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

/// Anything that can rank corpus pages for a query.
pub trait Retriever: Send + Sync {
    /// Returns at most `k` candidates, already ranked.
    fn retrieve(
        &self,
        corpus: &Corpus,
        query: &str,
        k: usize,
    ) -> Result<Vec<Candidate>, RetrievalError>;
}

/// Brute-force cosine index over page embeddings. Immutable once built.
#[derive(Debug, Clone)]
pub struct TfIndex {
    dims: usize,
    vectors: Vec<EmbeddingVector>,
}

impl TfIndex {
    pub fn build(corpus: &Corpus, dims: usize) -> Result<Self, RetrievalError> {
        check_dims(dims)?;
        let vectors = corpus
            .pages()
            .iter()
            .map(|p| embed(&p.text_proxy, dims))
            .collect();
        Ok(Self { dims, vectors })
    }

    pub fn dims(&self) -> usize {
        self.dims
    }
}

impl Retriever for TfIndex {
    fn retrieve(
        &self,
        corpus: &Corpus,
        query: &str,
        k: usize,
    ) -> Result<Vec<Candidate>, RetrievalError> {
        if k == 0 {
            return Err(RetrievalError::ZeroK);
        }
        let q = embed(query, self.dims);
        let mut entries: Vec<Candidate> = corpus
            .pages()
            .iter()
            .zip(&self.vectors)
            .map(|(page, v)| Candidate {
                doc_id: page.doc_id.clone(),
                score: q.dot(v),
            })
            .collect();
        rank_candidates(&mut entries);
        entries.truncate(k);
        Ok(entries)
    }
}

/// Top-k search producing the candidate set for search number `step_index`.
pub fn search(
    retriever: &dyn Retriever,
    corpus: &Corpus,
    query: &str,
    k: usize,
    step_index: usize,
) -> Result<CandidateSet, RetrievalError> {
    Ok(CandidateSet {
        step_index,
        k,
        entries: retriever.retrieve(corpus, query, k)?,
    })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RemoteSearchRequest {
    pub query: String,
    pub k: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RemoteSearchResponse {
    pub results: Vec<Candidate>,
}

/// Client for an external embedding service speaking
/// `{query, k}` → `{results: [{doc_id, score}]}`.
pub struct RemoteRetriever {
    url: String,
    agent: ureq::Agent,
}

impl RemoteRetriever {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            agent: ureq::Agent::new_with_defaults(),
        }
    }
}

impl Retriever for RemoteRetriever {
    fn retrieve(
        &self,
        corpus: &Corpus,
        query: &str,
        k: usize,
    ) -> Result<Vec<Candidate>, RetrievalError> {
        if k == 0 {
            return Err(RetrievalError::ZeroK);
        }
        let req = RemoteSearchRequest {
            query: query.to_owned(),
            k,
        };
        let resp: RemoteSearchResponse = self
            .agent
            .post(&self.url)
            .send_json(&req)
            .and_then(|mut r| r.body_mut().read_json())
            .map_err(|e| RetrievalError::Remote(e.to_string()))?;
        let mut entries: Vec<Candidate> = resp
            .results
            .into_iter()
            .filter(|c| corpus.get(&c.doc_id).is_some())
            .collect();
        rank_candidates(&mut entries);
        entries.dedup_by(|a, b| a.doc_id == b.doc_id);
        entries.truncate(k);
        Ok(entries)
    }
}
