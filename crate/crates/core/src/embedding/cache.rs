use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{EmbedError, Embedder, EmbedderDescriptor, Embedding};
use crate::behavior::{hex, BehaviorImage};

type Key = (String, [u8; 32]);

/// Embeddings keyed by `(backend_id, content hash)`.
///
/// Values are deterministic per key, so concurrent writers racing on the same
/// key store identical vectors.
#[derive(Debug, Default)]
pub struct EmbeddingCache {
    entries: RwLock<HashMap<Key, Vec<f64>>>,
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    backend: String,
    hash: String,
    vector: Vec<f64>,
}

pub fn text_hash(text: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"text\0");
    h.update(text.as_bytes());
    h.finalize().into()
}

impl EmbeddingCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, backend: &str, hash: &[u8; 32]) -> Option<Vec<f64>> {
        self.entries
            .read()
            .expect("cache lock")
            .get(&(backend.to_string(), *hash))
            .cloned()
    }

    pub fn insert(&self, backend: &str, hash: [u8; 32], vector: Vec<f64>) {
        self.entries
            .write()
            .expect("cache lock")
            .insert((backend.to_string(), hash), vector);
    }

    /// Writes one JSON line per entry, sorted by key.
    pub fn save(&self, path: &Path) -> Result<(), EmbedError> {
        let entries = self.entries.read().expect("cache lock");
        let mut keys: Vec<&Key> = entries.keys().collect();
        keys.sort();
        let tmp = path.with_extension("jsonl.tmp");
        {
            let mut out = BufWriter::new(std::fs::File::create(&tmp)?);
            for key in keys {
                let line = CacheLine {
                    backend: key.0.clone(),
                    hash: hex(&key.1),
                    vector: entries[key].clone(),
                };
                serde_json::to_writer(&mut out, &line).map_err(|e| EmbedError::Protocol(e.to_string()))?;
                out.write_all(b"\n")?;
            }
            out.flush()?;
        }
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EmbedError> {
        let cache = Self::new();
        if !path.exists() {
            return Ok(cache);
        }
        let reader = BufReader::new(std::fs::File::open(path)?);
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: CacheLine = serde_json::from_str(&line)
                .map_err(|e| EmbedError::Protocol(format!("cache line {i}: {e}")))?;
            let hash = parse_hash(&parsed.hash)
                .ok_or_else(|| EmbedError::Protocol(format!("cache line {i}: bad hash")))?;
            cache.insert(&parsed.backend, hash, parsed.vector);
        }
        Ok(cache)
    }
}

fn parse_hash(s: &str) -> Option<[u8; 32]> {
    if s.len() != 64 {
        return None;
    }
    let mut out = [0u8; 32];
    for (i, byte) in out.iter_mut().enumerate() {
        *byte = u8::from_str_radix(s.get(2 * i..2 * i + 2)?, 16).ok()?;
    }
    Some(out)
}

/// Wraps an embedder with a content-addressed cache.
pub struct CachedEmbedder<E> {
    inner: E,
    cache: Arc<EmbeddingCache>,
}

impl<E: Embedder> CachedEmbedder<E> {
    pub fn new(inner: E, cache: Arc<EmbeddingCache>) -> Self {
        Self { inner, cache }
    }

    pub fn cache(&self) -> &Arc<EmbeddingCache> {
        &self.cache
    }

    pub fn inner(&self) -> &E {
        &self.inner
    }

    fn lookup(&self, hash: &[u8; 32]) -> Option<Embedding> {
        let id = self.inner.backend_id();
        self.cache
            .get(id, hash)
            .map(|v| Embedding::from_unit(id, v).expect("cached vectors are unit norm"))
    }
}

impl<E: Embedder> Embedder for CachedEmbedder<E> {
    fn descriptor(&self) -> &EmbedderDescriptor {
        self.inner.descriptor()
    }

    fn embed_image(&self, image: &BehaviorImage) -> Result<Embedding, EmbedError> {
        let hash = image.content_hash();
        if let Some(e) = self.lookup(&hash) {
            return Ok(e);
        }
        let e = self.inner.embed_image(image)?;
        self.cache.insert(self.inner.backend_id(), hash, e.vector().to_vec());
        Ok(e)
    }

    fn embed_text(&self, text: &str) -> Result<Embedding, EmbedError> {
        let hash = text_hash(text);
        if let Some(e) = self.lookup(&hash) {
            return Ok(e);
        }
        let e = self.inner.embed_text(text)?;
        self.cache.insert(self.inner.backend_id(), hash, e.vector().to_vec());
        Ok(e)
    }

    fn embed_images(&self, images: &[&BehaviorImage]) -> Result<Vec<Embedding>, EmbedError> {
        let hashes: Vec<[u8; 32]> = images.iter().map(|i| i.content_hash()).collect();
        let mut out: Vec<Option<Embedding>> = hashes.iter().map(|h| self.lookup(h)).collect();
        let missing: Vec<usize> = (0..images.len()).filter(|&i| out[i].is_none()).collect();
        if !missing.is_empty() {
            let batch: Vec<&BehaviorImage> = missing.iter().map(|&i| images[i]).collect();
            let fresh = self.inner.embed_images(&batch)?;
            for (&i, e) in missing.iter().zip(fresh) {
                self.cache.insert(self.inner.backend_id(), hashes[i], e.vector().to_vec());
                out[i] = Some(e);
            }
        }
        Ok(out.into_iter().map(|e| e.expect("filled")).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::ToyEmbedder;
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct Counting {
        inner: ToyEmbedder,
        calls: AtomicUsize,
    }

    impl Embedder for Counting {
        fn descriptor(&self) -> &EmbedderDescriptor {
            self.inner.descriptor()
        }
        fn embed_image(&self, image: &BehaviorImage) -> Result<Embedding, EmbedError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.inner.embed_image(image)
        }
        fn embed_text(&self, text: &str) -> Result<Embedding, EmbedError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.inner.embed_text(text)
        }
    }

    #[test]
    fn repeated_inputs_hit_the_cache() {
        let cached = CachedEmbedder::new(
            Counting { inner: ToyEmbedder::default(), calls: AtomicUsize::new(0) },
            Arc::new(EmbeddingCache::new()),
        );
        let img = BehaviorImage::black();
        let a = cached.embed_image(&img).unwrap();
        let b = cached.embed_image(&img).unwrap();
        let _ = cached.embed_text("a pink square").unwrap();
        let _ = cached.embed_text("a pink square").unwrap();
        let batch = cached.embed_images(&[&img, &img]).unwrap();
        assert_eq!(a, b);
        assert_eq!(batch[1], a);
        assert_eq!(cached.inner().calls.load(Ordering::SeqCst), 2);
        assert_eq!(cached.cache().len(), 2);
    }

    #[test]
    fn cache_persists_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let cache = EmbeddingCache::new();
        let e = ToyEmbedder::default().embed_text("a blue ring").unwrap();
        cache.insert("toy", text_hash("a blue ring"), e.vector().to_vec());
        cache.save(&path).unwrap();
        let loaded = EmbeddingCache::load(&path).unwrap();
        assert_eq!(loaded.get("toy", &text_hash("a blue ring")).unwrap(), e.vector());
    }
}
