//! Demonstration bank construction, embedding, exact nearest-neighbor
//! retrieval with leakage exclusion, and context-length statistics.
//!
//! Nearest neighbor search is brute-force cosine over unit vectors: banks at
//! desk scale stay well under 10^5 items and exactness keeps the oracle
//! tests meaningful.

use crate::model::{estimate_tokens, Demonstration, TaskItem};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("duplicate demonstration id {0:?}")]
    DuplicateId(String),
    #[error("retrieval bank is empty")]
    EmptyBank,
    #[error("embedding transport error: {0}")]
    Transport(String),
    #[error("invalid demonstration: {0}")]
    InvalidDemo(String),
    #[error("io error at {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed jsonl at {path} line {line}: {source}")]
    Jsonl { path: String, line: usize, source: serde_json::Error },
}

/// Text-to-unit-vector embedding backend.
pub trait Embedder: Send + Sync {
    fn embed(&self, text: &str) -> Result<Vec<f32>, RetrievalError>;
    fn dim(&self) -> usize;
    /// Identifies the embedder + parameters; persisted indexes are only
    /// reused when the tag matches.
    fn tag(&self) -> String;
}

/// Deterministic test embedder: component j accumulates a seeded hash of
/// each token (a commutative multiset hash), then the vector is
/// L2-normalized. Identical token multisets embed identically.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    pub dim: usize,
    pub seed: u64,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        HashEmbedder { dim: 64, seed: 0x5EED }
    }
}

fn fnv1a64(parts: &[&[u8]]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for part in parts {
        for &b in *part {
            hash ^= b as u64;
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
        hash ^= 0xff;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

impl Embedder for HashEmbedder {
    fn embed(&self, text: &str) -> Result<Vec<f32>, RetrievalError> {
        // sorted multiset so accumulation order never depends on token order
        let mut tokens: Vec<String> =
            text.split_whitespace().map(|t| t.to_lowercase()).collect();
        tokens.sort_unstable();
        let mut acc = vec![0f64; self.dim];
        for token in &tokens {
            for (j, slot) in acc.iter_mut().enumerate() {
                let h = fnv1a64(&[&self.seed.to_le_bytes(), token.as_bytes(), &(j as u64).to_le_bytes()]);
                *slot += (h as f64 / u64::MAX as f64) * 2.0 - 1.0;
            }
        }
        let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
        let vector = if norm > 1e-12 {
            acc.iter().map(|v| (v / norm) as f32).collect()
        } else {
            let mut unit = vec![0f32; self.dim];
            unit[0] = 1.0;
            unit
        };
        Ok(vector)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn tag(&self) -> String {
        format!("hash{}/seed={}", self.dim, self.seed)
    }
}

/// Live embedding endpoint: POST `{base_url}/embeddings` with `{input:[text]}`.
pub struct HttpEmbedder {
    client: reqwest::blocking::Client,
    base_url: String,
    api_key: Option<String>,
    dim: usize,
}

impl HttpEmbedder {
    pub fn new(base_url: impl Into<String>, api_key: Option<String>, dim: usize) -> Self {
        HttpEmbedder {
            client: reqwest::blocking::Client::new(),
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key,
            dim,
        }
    }
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f32>,
}

impl Embedder for HttpEmbedder {
    fn embed(&self, text: &str) -> Result<Vec<f32>, RetrievalError> {
        let url = format!("{}/embeddings", self.base_url);
        let mut builder = self.client.post(&url).json(&serde_json::json!({ "input": [text] }));
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder.send().map_err(|e| RetrievalError::Transport(e.to_string()))?;
        if !response.status().is_success() {
            return Err(RetrievalError::Transport(format!("HTTP {}", response.status())));
        }
        let parsed: EmbeddingResponse =
            response.json().map_err(|e| RetrievalError::Transport(e.to_string()))?;
        let mut vector = parsed
            .data
            .into_iter()
            .next()
            .ok_or_else(|| RetrievalError::Transport("empty embedding response".into()))?
            .embedding;
        let norm = vector.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        if norm > 1e-12 {
            for v in &mut vector {
                *v = (*v as f64 / norm) as f32;
            }
        }
        Ok(vector)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn tag(&self) -> String {
        format!("http/{}", self.base_url)
    }
}

/// Embedded demonstration bank. Immutable after build; retrieval is
/// read-only and safe for concurrent queries.
#[derive(Debug, Clone)]
pub struct DemoBank {
    items: Vec<Demonstration>,
    vectors: Vec<Vec<f32>>,
    dim: usize,
    excluded_ids: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub demo_id: String,
    pub score: f32,
}

impl DemoBank {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn excluded_ids(&self) -> &BTreeSet<String> {
        &self.excluded_ids
    }

    pub fn get(&self, demo_id: &str) -> Option<&Demonstration> {
        self.items.iter().find(|d| d.id == demo_id)
    }

    pub fn items(&self) -> &[Demonstration] {
        &self.items
    }

    pub fn vectors(&self) -> &[Vec<f32>] {
        &self.vectors
    }
}

/// Embeds every non-excluded demonstration's question. Excluded items are
/// dropped entirely so they can never be retrieved.
pub fn build_bank(
    demos: &[Demonstration],
    exclude_ids: &BTreeSet<String>,
    embedder: &dyn Embedder,
) -> Result<DemoBank, RetrievalError> {
    let mut seen = BTreeSet::new();
    for demo in demos {
        demo.validate().map_err(|e| RetrievalError::InvalidDemo(e.to_string()))?;
        if !seen.insert(demo.id.as_str()) {
            return Err(RetrievalError::DuplicateId(demo.id.clone()));
        }
    }
    let mut items = Vec::new();
    let mut vectors = Vec::new();
    for demo in demos {
        if exclude_ids.contains(&demo.id) {
            continue;
        }
        vectors.push(embedder.embed(&demo.question)?);
        items.push(demo.clone());
    }
    Ok(DemoBank { items, vectors, dim: embedder.dim(), excluded_ids: exclude_ids.clone() })
}

/// Top-k by cosine similarity, descending; ties break by ascending demo id.
pub fn retrieve(
    bank: &DemoBank,
    query_vector: &[f32],
    k: usize,
) -> Result<Vec<RetrievalResult>, RetrievalError> {
    assert!(k >= 1, "k must be >= 1");
    if bank.is_empty() {
        return Err(RetrievalError::EmptyBank);
    }
    let mut scored: Vec<(f32, &str)> = bank
        .vectors
        .iter()
        .zip(&bank.items)
        .map(|(v, item)| (dot(query_vector, v), item.id.as_str()))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    Ok(scored
        .into_iter()
        .take(k.min(bank.len()))
        .map(|(score, id)| RetrievalResult { demo_id: id.to_string(), score })
        .collect())
}

/// Embeds the query text and retrieves.
pub fn retrieve_text(
    bank: &DemoBank,
    embedder: &dyn Embedder,
    query_text: &str,
    k: usize,
) -> Result<Vec<RetrievalResult>, RetrievalError> {
    let query = embedder.embed(query_text)?;
    retrieve(bank, &query, k)
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One row of the context-length table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatRow {
    pub component: String,
    pub avg_tokens: f64,
    pub max_tokens: u64,
}

/// Average and maximum token length of exemplar components and target
/// questions, chars/4 estimator; averages reported to 2 decimals.
pub fn context_stats(demos: &[Demonstration], targets: &[TaskItem]) -> Vec<StatRow> {
    assert!(!demos.is_empty() && !targets.is_empty(), "inputs must be non-empty");
    let row = |component: &str, lengths: Vec<u64>| {
        let avg = lengths.iter().sum::<u64>() as f64 / lengths.len() as f64;
        StatRow {
            component: component.to_string(),
            avg_tokens: (avg * 100.0).round() / 100.0,
            max_tokens: lengths.into_iter().max().unwrap_or(0),
        }
    };
    vec![
        row(
            "demonstration question",
            demos.iter().map(|d| estimate_tokens(&d.question, None)).collect(),
        ),
        row(
            "reasoning demonstration (CoT trace)",
            demos.iter().map(|d| estimate_tokens(&d.cot_trace, None)).collect(),
        ),
        row(
            "demonstration answer",
            demos.iter().map(|d| estimate_tokens(&d.answer, None)).collect(),
        ),
        row(
            "target question",
            targets.iter().map(|t| estimate_tokens(&t.question, None)).collect(),
        ),
    ]
}

/// Reads demonstrations from JSONL, one object per line.
pub fn load_demos_jsonl(path: &Path) -> Result<Vec<Demonstration>, RetrievalError> {
    let file = std::fs::File::open(path)
        .map_err(|source| RetrievalError::Io { path: path.display().to_string(), source })?;
    let mut demos = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line
            .map_err(|source| RetrievalError::Io { path: path.display().to_string(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        let demo: Demonstration = serde_json::from_str(&line).map_err(|source| {
            RetrievalError::Jsonl { path: path.display().to_string(), line: i + 1, source }
        })?;
        demos.push(demo);
    }
    Ok(demos)
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct IndexManifest {
    dim: usize,
    count: usize,
    ids: Vec<String>,
    embedder_tag: String,
}

/// Persists the bank: demos as JSONL, vectors as little-endian f32, plus a
/// JSON manifest used to detect staleness.
pub fn save_index(dir: &Path, bank: &DemoBank, embedder_tag: &str) -> Result<(), RetrievalError> {
    let io_err = |source| RetrievalError::Io { path: dir.display().to_string(), source };
    std::fs::create_dir_all(dir).map_err(io_err)?;
    let manifest = IndexManifest {
        dim: bank.dim,
        count: bank.items.len(),
        ids: bank.items.iter().map(|d| d.id.clone()).collect(),
        embedder_tag: embedder_tag.to_string(),
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )
    .map_err(io_err)?;
    let mut bin = std::fs::File::create(dir.join("vectors.bin")).map_err(io_err)?;
    for vector in &bank.vectors {
        for v in vector {
            bin.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    let mut demos = std::fs::File::create(dir.join("demos.jsonl")).map_err(io_err)?;
    for item in &bank.items {
        let line = serde_json::to_string(item).expect("demo serializes");
        writeln!(demos, "{line}").map_err(io_err)?;
    }
    Ok(())
}

/// Loads a persisted index, re-embedding when the manifest does not match
/// the stored demos and embedder.
pub fn load_index(dir: &Path, embedder: &dyn Embedder) -> Result<DemoBank, RetrievalError> {
    let demos = load_demos_jsonl(&dir.join("demos.jsonl"))?;
    let manifest_path = dir.join("manifest.json");
    let rebuild = |demos: &[Demonstration]| build_bank(demos, &BTreeSet::new(), embedder);

    let manifest: IndexManifest = match std::fs::read_to_string(&manifest_path)
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok())
    {
        Some(m) => m,
        None => {
            log::warn!("missing or unreadable manifest in {}; re-embedding", dir.display());
            return rebuild(&demos);
        }
    };
    let ids: Vec<String> = demos.iter().map(|d| d.id.clone()).collect();
    if manifest.embedder_tag != embedder.tag()
        || manifest.dim != embedder.dim()
        || manifest.count != demos.len()
        || manifest.ids != ids
    {
        log::warn!("stale index manifest in {}; re-embedding", dir.display());
        return rebuild(&demos);
    }
    let bytes = std::fs::read(dir.join("vectors.bin"))
        .map_err(|source| RetrievalError::Io { path: dir.display().to_string(), source })?;
    if bytes.len() != manifest.count * manifest.dim * 4 {
        log::warn!("vector file size mismatch in {}; re-embedding", dir.display());
        return rebuild(&demos);
    }
    let mut vectors = Vec::with_capacity(manifest.count);
    for chunk in bytes.chunks_exact(manifest.dim * 4) {
        vectors.push(
            chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect::<Vec<f32>>(),
        );
    }
    Ok(DemoBank { items: demos, vectors, dim: manifest.dim, excluded_ids: BTreeSet::new() })
}
