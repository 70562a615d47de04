//! Content-addressed response cache.
//!
//! Keys are SHA-256 digests of the canonical JSON of
//! `{"provider": id, "endpoint": name, "request": request}`. Entries live in
//! memory and, when a directory is configured, as `<dir>/<k[..2]>/<k>.json`.
//! Lookups are concurrent; misses for the same key are serialized through a
//! striped lock so concurrent identical requests cause one transport call.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{DetectRequest, Detection, EmbedRequest, EmbeddingVector, GenerationRequest, Provider};
use crate::error::{Error, Result};
use crate::hashing::content_hash;

const STRIPES: usize = 64;

pub struct ResponseCache {
    dir: Option<PathBuf>,
    memory: RwLock<HashMap<String, serde_json::Value>>,
    stripes: Vec<Mutex<()>>,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        Self::with_dir(None)
    }

    pub fn on_disk(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self::with_dir(Some(dir)))
    }

    fn with_dir(dir: Option<PathBuf>) -> Self {
        Self {
            dir,
            memory: RwLock::new(HashMap::new()),
            stripes: (0..STRIPES).map(|_| Mutex::new(())).collect(),
        }
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    fn path_for(&self, key: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(&key[..2]).join(format!("{key}.json")))
    }

    pub fn get(&self, key: &str) -> Option<serde_json::Value> {
        if let Some(v) = self.memory.read().expect("cache lock poisoned").get(key) {
            return Some(v.clone());
        }
        let path = self.path_for(key)?;
        let text = fs::read_to_string(path).ok()?;
        let value: serde_json::Value = serde_json::from_str(&text).ok()?;
        self.memory
            .write()
            .expect("cache lock poisoned")
            .insert(key.to_string(), value.clone());
        Some(value)
    }

    pub fn put(&self, key: &str, value: serde_json::Value) -> Result<()> {
        if let Some(path) = self.path_for(key) {
            let parent = path.parent().expect("cache paths have a parent");
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            let tmp = path.with_extension(format!("tmp{}", std::process::id()));
            let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            f.write_all(serde_json::to_string(&value)?.as_bytes())
                .map_err(|e| Error::io(&tmp, e))?;
            drop(f);
            fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        }
        self.memory
            .write()
            .expect("cache lock poisoned")
            .insert(key.to_string(), value);
        Ok(())
    }

    fn stripe(&self, key: &str) -> &Mutex<()> {
        let idx = usize::from_str_radix(&key[..4], 16).unwrap_or(0) % STRIPES;
        &self.stripes[idx]
    }

    /// Returns the cached value for `key` or computes, stores and returns it.
    /// The flag is `true` on a hit.
    pub fn get_or_compute<T, F>(&self, key: &str, compute: F) -> Result<(T, bool)>
    where
        T: Serialize + DeserializeOwned,
        F: FnOnce() -> Result<T>,
    {
        if let Some(v) = self.get(key) {
            return Ok((serde_json::from_value(v)?, true));
        }
        let _guard = self.stripe(key).lock().expect("stripe lock poisoned");
        if let Some(v) = self.get(key) {
            return Ok((serde_json::from_value(v)?, true));
        }
        let value = compute()?;
        self.put(key, serde_json::to_value(&value)?)?;
        Ok((value, false))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderStats {
    pub transport_calls: u64,
    pub cache_hits: u64,
    pub errors: u64,
}

/// A provider whose responses are served from a [`ResponseCache`] when possible.
pub struct CachedProvider<P> {
    inner: P,
    cache: Arc<ResponseCache>,
    transport_calls: AtomicU64,
    cache_hits: AtomicU64,
    errors: AtomicU64,
}

impl<P: Provider> CachedProvider<P> {
    pub fn new(inner: P, cache: Arc<ResponseCache>) -> Self {
        Self {
            inner,
            cache,
            transport_calls: AtomicU64::new(0),
            cache_hits: AtomicU64::new(0),
            errors: AtomicU64::new(0),
        }
    }

    pub fn stats(&self) -> ProviderStats {
        ProviderStats {
            transport_calls: self.transport_calls.load(Ordering::Relaxed),
            cache_hits: self.cache_hits.load(Ordering::Relaxed),
            errors: self.errors.load(Ordering::Relaxed),
        }
    }

    pub fn inner(&self) -> &P {
        &self.inner
    }

    pub fn cache_key<R: Serialize>(&self, endpoint: &str, req: &R) -> Result<String> {
        content_hash(&json!({
            "provider": self.inner.id(),
            "endpoint": endpoint,
            "request": req,
        }))
    }

    fn call<R, T, F>(&self, endpoint: &str, req: &R, f: F) -> Result<T>
    where
        R: Serialize,
        T: Serialize + DeserializeOwned,
        F: FnOnce() -> Result<T>,
    {
        let key = self.cache_key(endpoint, req)?;
        let result = self.cache.get_or_compute(&key, || {
            self.transport_calls.fetch_add(1, Ordering::Relaxed);
            f()
        });
        match result {
            Ok((v, hit)) => {
                if hit {
                    self.cache_hits.fetch_add(1, Ordering::Relaxed);
                }
                Ok(v)
            }
            Err(e) => {
                self.errors.fetch_add(1, Ordering::Relaxed);
                Err(e)
            }
        }
    }
}

impl<P: Provider> Provider for CachedProvider<P> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn generate(&self, req: &GenerationRequest) -> Result<String> {
        self.call("generate", req, || self.inner.generate(req))
    }

    fn embed(&self, req: &EmbedRequest) -> Result<EmbeddingVector> {
        self.call("embed", req, || self.inner.embed(req))
    }

    fn detect(&self, req: &DetectRequest) -> Result<Vec<Detection>> {
        self.call("detect", req, || self.inner.detect(req))
    }
}
