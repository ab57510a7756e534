use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{request_key, BackendError, Completion, CompletionBackend, CompletionRequest};

/// One JSON file per request key at `{dir}/{key[..2]}/{key}.json`.
#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(&key[..2]).join(format!("{key}.json"))
    }

    pub fn get(&self, key: &str) -> Result<Option<Completion>, BackendError> {
        let path = self.path_for(key);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => {
                return Err(BackendError::Cache {
                    path: path.display().to_string(),
                    message: e.to_string(),
                })
            }
        };
        let mut completion: Completion =
            serde_json::from_slice(&bytes).map_err(|e| BackendError::Cache {
                path: path.display().to_string(),
                message: format!("corrupt entry: {e}"),
            })?;
        if completion.candidates.is_empty() {
            return Err(BackendError::Cache {
                path: path.display().to_string(),
                message: "corrupt entry: no candidates".into(),
            });
        }
        completion.cached = true;
        Ok(Some(completion))
    }

    /// Writes through a temporary file and renames, so readers never see a
    /// partial entry.
    pub fn put(&self, key: &str, completion: &Completion) -> Result<(), BackendError> {
        let path = self.path_for(key);
        let to_err = |e: std::io::Error| BackendError::Cache {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        let parent = path.parent().expect("cache paths have a parent");
        fs::create_dir_all(parent).map_err(to_err)?;
        let mut stored = completion.clone();
        stored.cached = false;
        let body = serde_json::to_vec_pretty(&stored).expect("completions serialize");
        let tmp = parent.join(format!(
            ".{key}.{}.{:?}.tmp",
            std::process::id(),
            std::thread::current().id()
        ));
        let mut f = fs::File::create(&tmp).map_err(to_err)?;
        f.write_all(&body).map_err(to_err)?;
        f.sync_all().map_err(to_err)?;
        drop(f);
        fs::rename(&tmp, &path).map_err(to_err)
    }
}

/// Consults the cache before delegating; stores every fresh completion once.
pub struct CachedBackend<B> {
    inner: B,
    cache: Option<ResponseCache>,
}

impl<B: CompletionBackend> CachedBackend<B> {
    pub fn new(inner: B, cache: Option<ResponseCache>) -> Self {
        Self { inner, cache }
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }

    /// Returns the request key together with the completion.
    pub fn complete_keyed(
        &self,
        request: &CompletionRequest,
    ) -> Result<(String, Completion), BackendError> {
        request.validate()?;
        let key = request_key(&self.inner.backend_id(), request);
        if let Some(cache) = &self.cache {
            if let Some(hit) = cache.get(&key)? {
                return Ok((key, hit));
            }
        }
        let mut completion = self.inner.complete(request)?;
        if completion.candidates.is_empty() {
            return Err(BackendError::Response("backend returned no candidates".into()));
        }
        completion.cached = false;
        if let Some(cache) = &self.cache {
            cache.put(&key, &completion)?;
        }
        Ok((key, completion))
    }
}

impl<B: CompletionBackend> CompletionBackend for CachedBackend<B> {
    fn backend_id(&self) -> String {
        self.inner.backend_id()
    }

    fn complete(&self, request: &CompletionRequest) -> Result<Completion, BackendError> {
        self.complete_keyed(request).map(|(_, c)| c)
    }
}

#[cfg(test)]
mod tests {
    use std::sync::atomic::{AtomicUsize, Ordering};

    use super::super::CompletionCandidate;
    use super::*;

    struct Counting(AtomicUsize);

    impl CompletionBackend for Counting {
        fn backend_id(&self) -> String {
            "counting".into()
        }

        fn complete(&self, request: &CompletionRequest) -> Result<Completion, BackendError> {
            self.0.fetch_add(1, Ordering::SeqCst);
            Ok(Completion {
                candidates: vec![CompletionCandidate {
                    text: format!("echo {}", request.prompt_text),
                    token_logprobs: None,
                }],
                model_id: "counting".into(),
                cached: false,
            })
        }
    }

    #[test]
    fn second_call_is_cached_and_identical() {
        let dir = tempfile::tempdir().unwrap();
        let backend = CachedBackend::new(Counting(AtomicUsize::new(0)), Some(ResponseCache::new(dir.path())));
        let req = CompletionRequest::greedy("hi", 5);
        let (k1, a) = backend.complete_keyed(&req).unwrap();
        let (k2, b) = backend.complete_keyed(&req).unwrap();
        assert_eq!(k1, k2);
        assert!(!a.cached);
        assert!(b.cached);
        assert_eq!(a.candidates, b.candidates);
        assert_eq!(backend.inner().0.load(Ordering::SeqCst), 1);
        let path = ResponseCache::new(dir.path()).path_for(&k1);
        assert!(path.starts_with(dir.path().join(&k1[..2])));
    }

    #[test]
    fn corrupt_entry_names_file() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::new(dir.path());
        let req = CompletionRequest::greedy("hi", 5);
        let key = request_key("counting", &req);
        let path = cache.path_for(&key);
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(&path, b"{oops").unwrap();
        let backend = CachedBackend::new(Counting(AtomicUsize::new(0)), Some(cache));
        match backend.complete(&req) {
            Err(BackendError::Cache { path: p, .. }) => assert!(p.ends_with(".json")),
            other => panic!("unexpected {other:?}"),
        }
    }
}
