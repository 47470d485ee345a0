use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{normalize_for_embedding, EvalError};
use crate::backends::Backends;
use crate::catalog::{ActionCatalog, ActionLabel};
use crate::exec::Execution;

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64, EvalError> {
    if u.len() != v.len() {
        return Err(EvalError::DimensionMismatch {
            left: u.len(),
            right: v.len(),
        });
    }
    let (mut dot, mut nu, mut nv) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return Err(EvalError::ZeroVector);
    }
    Ok((dot / (nu.sqrt() * nv.sqrt())).clamp(-1.0, 1.0))
}

/// Catalog action embeddings for one encoder, stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingCache {
    pub encoder_id: String,
    pub catalog_digest: String,
    pub vectors: Vec<Vec<f64>>,
}

impl EmbeddingCache {
    pub fn path(dir: &Path, encoder_id: &str, catalog_digest: &str) -> PathBuf {
        let short = &catalog_digest[..catalog_digest.len().min(16)];
        dir.join(format!("{}-{short}.json", crate::scenario::slug(encoder_id)))
    }

    /// Cached vectors, if a cache file for exactly this encoder and
    /// catalog exists and is readable.
    pub fn load(dir: &Path, encoder_id: &str, catalog_digest: &str) -> Option<Self> {
        let bytes = fs::read(Self::path(dir, encoder_id, catalog_digest)).ok()?;
        let cache: Self = serde_json::from_slice(&bytes).ok()?;
        (cache.encoder_id == encoder_id && cache.catalog_digest == catalog_digest).then_some(cache)
    }

    pub fn store(&self, dir: &Path) -> Result<PathBuf, EvalError> {
        fs::create_dir_all(dir).map_err(|e| EvalError::io(dir, e))?;
        let path = Self::path(dir, &self.encoder_id, &self.catalog_digest);
        let bytes = serde_json::to_vec(self).expect("cache serializes");
        fs::write(&path, bytes).map_err(|e| EvalError::io(&path, e))?;
        Ok(path)
    }
}

/// Maps response embeddings to the closest catalog action.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionMatcher {
    encoder_id: String,
    labels: Vec<ActionLabel>,
    vectors: Vec<Vec<f64>>,
}

impl ActionMatcher {
    pub fn from_embeddings(
        encoder_id: impl Into<String>,
        catalog: &ActionCatalog,
        vectors: Vec<Vec<f64>>,
    ) -> Result<Self, EvalError> {
        if vectors.len() != catalog.len() {
            return Err(EvalError::LabelCount {
                expected: catalog.len(),
                found: vectors.len(),
            });
        }
        let dim = vectors.first().map_or(0, Vec::len);
        for v in &vectors {
            if v.len() != dim {
                return Err(EvalError::DimensionMismatch { left: dim, right: v.len() });
            }
            if v.iter().all(|x| *x == 0.0) {
                return Err(EvalError::ZeroVector);
            }
        }
        Ok(Self {
            encoder_id: encoder_id.into(),
            labels: catalog.actions().to_vec(),
            vectors,
        })
    }

    /// Embeds the catalog with `encoder_id`, reusing `cache_dir` when given.
    pub fn build(
        backends: &Backends,
        catalog: &ActionCatalog,
        encoder_id: &str,
        cache_dir: Option<&Path>,
    ) -> Result<Self, EvalError> {
        let digest = catalog.digest();
        if let Some(cache) = cache_dir.and_then(|d| EmbeddingCache::load(d, encoder_id, &digest)) {
            log::debug!("using cached catalog embeddings for {encoder_id}");
            return Self::from_embeddings(encoder_id, catalog, cache.vectors);
        }
        let texts: Vec<String> = catalog.texts().map(normalize_for_embedding).collect();
        let vectors: Vec<Vec<f64>> = backends
            .embed(&texts, encoder_id)?
            .into_iter()
            .map(|e| e.values)
            .collect();
        if let Some(dir) = cache_dir {
            let cache = EmbeddingCache {
                encoder_id: encoder_id.to_string(),
                catalog_digest: digest,
                vectors: vectors.clone(),
            };
            cache.store(dir)?;
        }
        Self::from_embeddings(encoder_id, catalog, vectors)
    }

    pub fn encoder_id(&self) -> &str {
        &self.encoder_id
    }

    pub fn labels(&self) -> &[ActionLabel] {
        &self.labels
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    /// Argmax of cosine similarity over the catalog; the lowest index wins
    /// ties.
    pub fn match_vector(&self, v: &[f64]) -> Result<&ActionLabel, EvalError> {
        let mut best: Option<(usize, f64)> = None;
        for (i, a) in self.vectors.iter().enumerate() {
            let c = cosine(v, a)?;
            if best.is_none_or(|(_, b)| c > b) {
                best = Some((i, c));
            }
        }
        let (i, _) = best.ok_or(EvalError::LabelCount { expected: 1, found: 0 })?;
        Ok(&self.labels[i])
    }

    pub fn match_text(&self, backends: &Backends, text: &str) -> Result<ActionLabel, EvalError> {
        let v = backends.embed(&[normalize_for_embedding(text)], &self.encoder_id)?;
        self.match_vector(&v[0].values).cloned()
    }

    /// Catalog index for each text. Embedding requests go out in chunks of
    /// `batch_size`.
    pub fn match_batch(
        &self,
        backends: &Backends,
        texts: &[String],
        batch_size: usize,
        execution: Execution,
    ) -> Result<Vec<usize>, EvalError> {
        let normalized: Vec<String> = texts.iter().map(|t| normalize_for_embedding(t)).collect();
        let chunks: Vec<&[String]> = normalized.chunks(batch_size.max(1)).collect();
        let embedded = execution.map(&chunks, |chunk| backends.embed(chunk, &self.encoder_id));
        let mut vectors = Vec::with_capacity(texts.len());
        for batch in embedded {
            vectors.extend(batch?.into_iter().map(|e| e.values));
        }
        execution
            .map(&vectors, |v| self.match_vector(v).map(|l| l.index))
            .into_iter()
            .collect()
    }
}

/// One-off match without a cache.
pub fn match_action(
    backends: &Backends,
    response_text: &str,
    catalog: &ActionCatalog,
    encoder_id: &str,
) -> Result<ActionLabel, EvalError> {
    ActionMatcher::build(backends, catalog, encoder_id, None)?.match_text(backends, response_text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::mock::{FixtureEncoder, MockEncoder};
    use std::sync::Arc;

    #[test]
    fn analytic_cosines() {
        assert!((cosine(&[1.0, 0.0], &[1.0, 0.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap().abs() < 1e-12);
        let c = cosine(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-9);
        assert!(matches!(cosine(&[1.0], &[1.0, 2.0]), Err(EvalError::DimensionMismatch { .. })));
        assert!(matches!(cosine(&[0.0, 0.0], &[1.0, 2.0]), Err(EvalError::ZeroVector)));
    }

    #[test]
    fn exact_text_matches_itself() {
        let catalog = ActionCatalog::bundled();
        let b = Backends::builder().embedder(Arc::new(MockEncoder::new("sbert", 384))).build();
        let label = match_action(&b, &catalog.actions()[12].text, &catalog, "sbert").unwrap();
        assert_eq!(label.index, 12);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let catalog = ActionCatalog::from_texts(&(0..12).map(|i| format!("action {i}")).collect::<Vec<_>>()).unwrap();
        let mut enc = FixtureEncoder::new("fx", 3);
        for i in 0..12 {
            let v = if i == 3 || i == 9 { vec![1.0, 0.0, 0.0] } else { vec![0.0, 1.0, 0.2] };
            enc.insert(format!("action {i}"), v);
        }
        enc.insert("query", vec![2.0, 0.0, 0.0]);
        let b = Backends::builder().embedder(Arc::new(enc)).build();
        assert_eq!(match_action(&b, "query", &catalog, "fx").unwrap().index, 3);
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let catalog = ActionCatalog::bundled();
        let enc = Arc::new(MockEncoder::new("sbert", 16));
        let b = Backends::builder().embedder(enc.clone()).build();
        let m1 = ActionMatcher::build(&b, &catalog, "sbert", Some(dir.path())).unwrap();
        let m2 = ActionMatcher::build(&b, &catalog, "sbert", Some(dir.path())).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(enc.calls(), 1);
        assert!(EmbeddingCache::load(dir.path(), "sbert", &catalog.digest()).is_some());
        assert!(EmbeddingCache::load(dir.path(), "sbert", "other").is_none());
    }

    #[test]
    fn batch_matches_single() {
        let catalog = ActionCatalog::bundled();
        let b = Backends::builder().embedder(Arc::new(MockEncoder::new("sbert", 64))).build();
        let m = ActionMatcher::build(&b, &catalog, "sbert", None).unwrap();
        let texts: Vec<String> = (0..50).map(|i| format!("I could use some help with thing {i}")).collect();
        let batch = m.match_batch(&b, &texts, 7, Execution::Parallel).unwrap();
        let seq = m.match_batch(&b, &texts, 50, Execution::Sequential).unwrap();
        assert_eq!(batch, seq);
        for (t, idx) in texts.iter().zip(&batch) {
            assert_eq!(m.match_text(&b, t).unwrap().index, *idx);
        }
    }
}
