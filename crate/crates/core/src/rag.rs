//! Retrieval of the visible action space: tools and few-shot examples.
//!
//! Retrieval is two-stage. Stage one ranks the whole registry by cosine
//! similarity to the query embedding and keeps `k * recall_multiplier`
//! candidates; stage two (optional) reorders that pool with a rerank model
//! and keeps `k`. Ties always break by ascending item name.

use std::cmp::Ordering;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conversation::{Role, Trajectory};
use crate::policy::EMPTY_SECTION;

/// Tolerance on the L2 norm of stored embeddings.
pub const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum RagError {
    #[error("embedding provider failed on {item:?}: {message}")]
    ProviderFailure { item: String, message: String },
    #[error("rerank provider failed on {item:?}: {message}")]
    RerankFailure { item: String, message: String },
    #[error("registry is not indexed")]
    UnindexedRegistry,
    #[error("duplicate item name {0:?}")]
    DuplicateName(String),
    #[error("embedding for {item:?} has dimension {got}, registry uses {expected}")]
    DimensionMismatch {
        item: String,
        expected: usize,
        got: usize,
    },
    #[error("embedding for {item:?} has norm {norm}, expected 1")]
    NotUnitNorm { item: String, norm: f64 },
    #[error("reading {path}: {message}")]
    Load { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolSpec {
    pub name: String,
    pub description: String,
    pub input_example: String,
    pub output_example: String,
    pub callable_id: String,
    #[serde(default, skip_serializing)]
    pub embedding: Option<Vec<f64>>,
}

impl ToolSpec {
    /// Prompt block for this tool: name, description and examples.
    pub fn render(&self) -> String {
        format!(
            "- {}: {}\n  Input example: {}\n  Output example: {}",
            self.name, self.description, self.input_example, self.output_example
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotExample {
    pub task_type: String,
    pub content: String,
    #[serde(default, skip_serializing)]
    pub embedding: Option<Vec<f64>>,
}

/// Something a registry can store and retrieve.
pub trait Retrievable: Clone {
    /// Unique within a registry; also the tie-break key.
    fn name(&self) -> &str;
    /// Text that gets embedded and reranked.
    fn retrieval_text(&self) -> String;
    fn embedding(&self) -> Option<&[f64]>;
    fn set_embedding(&mut self, embedding: Vec<f64>);
}

impl Retrievable for ToolSpec {
    fn name(&self) -> &str {
        &self.name
    }

    fn retrieval_text(&self) -> String {
        format!("{} {} {}", self.name.replace('_', " "), self.description, self.input_example)
    }

    fn embedding(&self) -> Option<&[f64]> {
        self.embedding.as_deref()
    }

    fn set_embedding(&mut self, embedding: Vec<f64>) {
        self.embedding = Some(embedding);
    }
}

impl Retrievable for FewShotExample {
    /// Few-shot examples are keyed by their content.
    fn name(&self) -> &str {
        &self.content
    }

    fn retrieval_text(&self) -> String {
        format!("{} {}", self.task_type, self.content)
    }

    fn embedding(&self) -> Option<&[f64]> {
        self.embedding.as_deref()
    }

    fn set_embedding(&mut self, embedding: Vec<f64>) {
        self.embedding = Some(embedding);
    }
}

pub trait EmbeddingProvider: Send + Sync {
    fn dimension(&self) -> usize;
    /// Deterministic unit vector of length [`dimension`](Self::dimension).
    fn embed(&self, text: &str) -> Result<Vec<f64>, String>;
}

pub trait RerankProvider: Send + Sync {
    /// Higher is more relevant.
    fn score(&self, query: &str, candidate: &str) -> Result<f64, String>;
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Lower-cased characters with a boundary marker on each side, so short words
/// still yield n-grams.
fn padded_chars(text: &str) -> Vec<char> {
    let mut chars = vec!['\u{2}'];
    chars.extend(text.chars().flat_map(char::to_lowercase).map(|c| {
        if c.is_whitespace() || c == '_' {
            ' '
        } else {
            c
        }
    }));
    chars.push('\u{3}');
    chars
}

/// Feature-hashed character n-grams projected to a fixed dimension and
/// L2-normalised. Needs no model weights and is stable across platforms.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    dimension: usize,
    ngram: usize,
}

impl HashingEmbedder {
    pub fn new(dimension: usize, ngram: usize) -> Self {
        assert!(dimension > 0 && ngram > 0);
        Self { dimension, ngram }
    }
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        Self::new(256, 3)
    }
}

impl EmbeddingProvider for HashingEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, String> {
        let mut v = vec![0.0f64; self.dimension];
        let chars = padded_chars(text);
        let mut buf = String::new();
        for window in chars.windows(self.ngram.min(chars.len())) {
            buf.clear();
            buf.extend(window);
            let h = fnv1a(buf.as_bytes());
            let bucket = (h % self.dimension as u64) as usize;
            let sign = if (h >> 63) & 1 == 0 { 1.0 } else { -1.0 };
            v[bucket] += sign;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            v[0] = 1.0;
        } else {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        Ok(v)
    }
}

/// Dice overlap of lower-cased word sets, with underscores splitting words.
/// A stand-in for a cross-encoder reranker in tests and offline runs.
#[derive(Debug, Clone, Default)]
pub struct OverlapReranker;

impl OverlapReranker {
    fn words(text: &str) -> std::collections::BTreeSet<String> {
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(str::to_lowercase)
            .collect()
    }
}

impl RerankProvider for OverlapReranker {
    fn score(&self, query: &str, candidate: &str) -> Result<f64, String> {
        let q = Self::words(query);
        let c = Self::words(candidate);
        let shared = q.intersection(&c).count();
        Ok(2.0 * shared as f64 / (q.len() + c.len()).max(1) as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    pub k_tools: usize,
    pub k_shots: usize,
    pub recall_multiplier: usize,
    pub rerank_enabled: bool,
    /// When false the whole registry is injected (no retrieval at all).
    pub selector_enabled: bool,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            k_tools: 5,
            k_shots: 3,
            recall_multiplier: 4,
            rerank_enabled: true,
            selector_enabled: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Registry<T> {
    items: Vec<T>,
    dimension: Option<usize>,
    indexed: bool,
}

impl<T: Retrievable> Registry<T> {
    /// An unindexed registry. Names must be unique.
    pub fn new(items: Vec<T>) -> Result<Self, RagError> {
        for (i, item) in items.iter().enumerate() {
            if items[..i].iter().any(|o| o.name() == item.name()) {
                return Err(RagError::DuplicateName(item.name().to_string()));
            }
        }
        Ok(Self {
            items,
            dimension: None,
            indexed: false,
        })
    }

    /// Accepts items that already carry unit-norm embeddings of one dimension.
    pub fn from_embedded(items: Vec<T>) -> Result<Self, RagError> {
        let mut reg = Self::new(items)?;
        let mut dim = None;
        for item in &reg.items {
            let e = item.embedding().ok_or(RagError::UnindexedRegistry)?;
            check_vector(item.name(), e, *dim.get_or_insert(e.len()))?;
        }
        reg.dimension = dim;
        reg.indexed = true;
        Ok(reg)
    }

    pub fn items(&self) -> &[T] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn is_indexed(&self) -> bool {
        self.indexed
    }

    pub fn dimension(&self) -> Option<usize> {
        self.dimension
    }

    pub fn get(&self, name: &str) -> Option<&T> {
        self.items.iter().find(|i| i.name() == name)
    }
}

fn check_vector(name: &str, e: &[f64], expected: usize) -> Result<(), RagError> {
    if e.len() != expected {
        return Err(RagError::DimensionMismatch {
            item: name.to_string(),
            expected,
            got: e.len(),
        });
    }
    let norm = e.iter().map(|x| x * x).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > NORM_TOLERANCE {
        return Err(RagError::NotUnitNorm {
            item: name.to_string(),
            norm,
        });
    }
    Ok(())
}

/// Embeds every item, overwriting existing embeddings.
pub fn index_registry<T: Retrievable>(
    items: Vec<T>,
    provider: &dyn EmbeddingProvider,
) -> Result<Registry<T>, RagError> {
    let mut reg = Registry::new(items)?;
    let dim = provider.dimension();
    for item in &mut reg.items {
        let e = provider
            .embed(&item.retrieval_text())
            .map_err(|message| RagError::ProviderFailure {
                item: item.name().to_string(),
                message,
            })?;
        check_vector(item.name(), &e, dim)?;
        item.set_embedding(e);
    }
    reg.dimension = Some(dim);
    reg.indexed = true;
    Ok(reg)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Descending score, then ascending name.
fn by_score_then_name(a: (f64, &str), b: (f64, &str)) -> Ordering {
    b.0.partial_cmp(&a.0)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.1.cmp(b.1))
}

/// Two-stage retrieval against an already-embedded query.
pub fn retrieve_by_vector<'r, T: Retrievable>(
    registry: &'r Registry<T>,
    query_text: &str,
    query_vec: &[f64],
    k: usize,
    config: &RetrievalConfig,
    reranker: Option<&dyn RerankProvider>,
) -> Result<Vec<&'r T>, RagError> {
    if !registry.indexed {
        return Err(RagError::UnindexedRegistry);
    }
    let mut scored: Vec<(f64, &T)> = registry
        .items
        .iter()
        .map(|item| {
            let e = item.embedding().expect("indexed registry items carry embeddings");
            (dot(e, query_vec), item)
        })
        .collect();
    scored.sort_by(|a, b| by_score_then_name((a.0, a.1.name()), (b.0, b.1.name())));

    let pool_size = k
        .saturating_mul(config.recall_multiplier.max(1))
        .min(registry.len());
    scored.truncate(pool_size);

    if let (true, Some(reranker)) = (config.rerank_enabled, reranker) {
        let mut reranked = Vec::with_capacity(scored.len());
        for (_, item) in scored {
            let s = reranker
                .score(query_text, &item.retrieval_text())
                .map_err(|message| RagError::RerankFailure {
                    item: item.name().to_string(),
                    message,
                })?;
            reranked.push((s, item));
        }
        reranked.sort_by(|a, b| by_score_then_name((a.0, a.1.name()), (b.0, b.1.name())));
        scored = reranked;
    }
    scored.truncate(k.min(registry.len()));
    Ok(scored.into_iter().map(|(_, item)| item).collect())
}

pub fn retrieve<'r, T: Retrievable>(
    registry: &'r Registry<T>,
    query: &str,
    k: usize,
    config: &RetrievalConfig,
    embedder: &dyn EmbeddingProvider,
    reranker: Option<&dyn RerankProvider>,
) -> Result<Vec<&'r T>, RagError> {
    if !registry.indexed {
        return Err(RagError::UnindexedRegistry);
    }
    let q = embedder.embed(query).map_err(|message| RagError::ProviderFailure {
        item: query.to_string(),
        message,
    })?;
    retrieve_by_vector(registry, query, &q, k, config, reranker)
}

/// The tools and examples visible to one step, rendered for injection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActionSpace {
    pub tool_descriptions: String,
    pub few_shots: String,
    pub selected_tool_ids: Vec<String>,
}

pub fn render_tools<'a>(tools: impl IntoIterator<Item = &'a ToolSpec>) -> String {
    let blocks: Vec<String> = tools.into_iter().map(ToolSpec::render).collect();
    blocks.join("\n")
}

pub fn render_few_shots<'a>(shots: impl IntoIterator<Item = &'a FewShotExample>) -> String {
    let blocks: Vec<String> = shots
        .into_iter()
        .enumerate()
        .map(|(i, s)| format!("Example {} ({}):\n{}", i + 1, s.task_type, s.content.trim_end()))
        .collect();
    if blocks.is_empty() {
        EMPTY_SECTION.to_string()
    } else {
        blocks.join("\n\n")
    }
}

/// The retrieval query for the current step: the (rewritten) user query,
/// followed by the latest thought when one exists.
pub fn retrieval_query(trajectory: &Trajectory) -> String {
    let mut q = trajectory.query().unwrap_or_default().to_string();
    if let Some(thought) = trajectory.latest(Role::Thought) {
        q.push('\n');
        q.push_str(&thought.content);
    }
    q
}

/// Embedding and rerank providers used by the selector.
pub struct Providers<'a> {
    pub embedder: &'a dyn EmbeddingProvider,
    pub reranker: Option<&'a dyn RerankProvider>,
}

pub fn select_action_space(
    trajectory: &Trajectory,
    tools: &Registry<ToolSpec>,
    shots: &Registry<FewShotExample>,
    config: &RetrievalConfig,
    providers: &Providers<'_>,
) -> Result<ActionSpace, RagError> {
    if !config.selector_enabled {
        return Ok(ActionSpace {
            tool_descriptions: render_tools(tools.items()),
            few_shots: render_few_shots(shots.items()),
            selected_tool_ids: tools.items().iter().map(|t| t.name.clone()).collect(),
        });
    }
    let query = retrieval_query(trajectory);
    let q = providers
        .embedder
        .embed(&query)
        .map_err(|message| RagError::ProviderFailure {
            item: query.clone(),
            message,
        })?;
    let picked_tools = retrieve_by_vector(tools, &query, &q, config.k_tools, config, providers.reranker)?;
    let picked_shots = if config.k_shots == 0 || shots.is_empty() {
        Vec::new()
    } else {
        retrieve_by_vector(shots, &query, &q, config.k_shots, config, providers.reranker)?
    };
    Ok(ActionSpace {
        tool_descriptions: render_tools(picked_tools.iter().copied()),
        few_shots: render_few_shots(picked_shots.iter().copied()),
        selected_tool_ids: picked_tools.iter().map(|t| t.name.clone()).collect(),
    })
}

pub fn load_tools(path: &Path) -> Result<Vec<ToolSpec>, RagError> {
    load_json(path)
}

pub fn load_few_shots(path: &Path) -> Result<Vec<FewShotExample>, RagError> {
    load_json(path)
}

fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, RagError> {
    let load_err = |message: String| RagError::Load {
        path: path.display().to_string(),
        message,
    };
    let text = std::fs::read_to_string(path).map_err(|e| load_err(e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| load_err(e.to_string()))
}
