//! Stage cache keyed by (config fingerprint, seed, stage name). Every stage
//! artifact is one directory written by populating a temporary sibling and
//! renaming it into place, so concurrent runs never observe partial state.
//! A present-but-unreadable artifact is reported as corruption, never
//! silently rebuilt.

use std::path::{Path, PathBuf};

use super::PipelineError;

pub struct StageCache {
    root: PathBuf,
}

impl StageCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        StageCache { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn stage_dir(&self, fingerprint: &str, seed: u64, stage: &str) -> PathBuf {
        self.root.join(fingerprint).join(format!("s{seed}")).join(stage)
    }

    /// Load the stage artifact if present, otherwise build it atomically.
    /// Returns the artifact and whether it was a cache hit.
    pub fn ensure<T>(
        &self,
        fingerprint: &str,
        seed: u64,
        stage: &str,
        build: impl FnOnce(&Path) -> Result<T, PipelineError>,
        load: impl Fn(&Path) -> Result<T, PipelineError>,
    ) -> Result<(T, bool), PipelineError> {
        let dir = self.stage_dir(fingerprint, seed, stage);
        if dir.is_dir() {
            let value = load(&dir).map_err(|e| PipelineError::CacheCorrupt {
                stage: stage.to_string(),
                reason: e.to_string(),
            })?;
            return Ok((value, true));
        }
        let parent = dir.parent().expect("stage dir has a parent");
        std::fs::create_dir_all(parent)?;
        let tmp = parent.join(format!(
            ".tmp-{stage}-{}-{}",
            std::process::id(),
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_nanos())
                .unwrap_or(0)
        ));
        std::fs::create_dir_all(&tmp)?;
        let built = match build(&tmp) {
            Ok(v) => v,
            Err(e) => {
                let _ = std::fs::remove_dir_all(&tmp);
                return Err(e);
            }
        };
        match std::fs::rename(&tmp, &dir) {
            Ok(()) => Ok((built, false)),
            Err(_) if dir.is_dir() => {
                // A concurrent run won the rename; its artifact is identical
                // by determinism, so drop ours and use the cached one.
                let _ = std::fs::remove_dir_all(&tmp);
                let value = load(&dir).map_err(|e| PipelineError::CacheCorrupt {
                    stage: stage.to_string(),
                    reason: e.to_string(),
                })?;
                Ok((value, true))
            }
            Err(e) => {
                let _ = std::fs::remove_dir_all(&tmp);
                Err(PipelineError::Io(e))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp_root(tag: &str) -> PathBuf {
        std::env::temp_dir().join(format!("zslu-cache-{tag}-{}", std::process::id()))
    }

    #[test]
    fn builds_once_then_hits() {
        let root = tmp_root("hit");
        let _ = std::fs::remove_dir_all(&root);
        let cache = StageCache::new(&root);
        let build = |dir: &Path| -> Result<u32, PipelineError> {
            std::fs::write(dir.join("v.txt"), "42")?;
            Ok(42)
        };
        let load = |dir: &Path| -> Result<u32, PipelineError> {
            Ok(std::fs::read_to_string(dir.join("v.txt"))
                .map_err(PipelineError::Io)?
                .parse()
                .unwrap())
        };
        let (v1, hit1) = cache.ensure("fp", 3, "stage-a", build, load).unwrap();
        assert_eq!((v1, hit1), (42, false));
        let (v2, hit2) = cache
            .ensure("fp", 3, "stage-a", |_| panic!("must not rebuild"), load)
            .unwrap();
        assert_eq!((v2, hit2), (42, true));
        std::fs::remove_dir_all(&root).unwrap();
    }

    #[test]
    fn corrupt_artifact_is_reported_not_rebuilt() {
        let root = tmp_root("corrupt");
        let _ = std::fs::remove_dir_all(&root);
        let cache = StageCache::new(&root);
        let dir = cache.stage_dir("fp", 1, "stage-b");
        std::fs::create_dir_all(&dir).unwrap();
        std::fs::write(dir.join("v.txt"), "garbage").unwrap();
        let load = |dir: &Path| -> Result<u32, PipelineError> {
            std::fs::read_to_string(dir.join("v.txt"))
                .map_err(PipelineError::Io)?
                .trim()
                .parse()
                .map_err(|_| PipelineError::Data("not a number".to_string()))
        };
        let err = cache
            .ensure("fp", 1, "stage-b", |_| panic!("must not rebuild"), load)
            .unwrap_err();
        match &err {
            PipelineError::CacheCorrupt { stage, .. } => assert_eq!(stage, "stage-b"),
            other => panic!("expected CacheCorrupt, got {other:?}"),
        }
        assert_eq!(err.exit_code(), 5);
        std::fs::remove_dir_all(&root).unwrap();
    }

    #[test]
    fn failed_build_leaves_no_artifact() {
        let root = tmp_root("fail");
        let _ = std::fs::remove_dir_all(&root);
        let cache = StageCache::new(&root);
        let r: Result<(u32, bool), _> = cache.ensure(
            "fp",
            2,
            "stage-c",
            |_| Err(PipelineError::Data("boom".to_string())),
            |_| Ok(1),
        );
        assert!(r.is_err());
        assert!(!cache.stage_dir("fp", 2, "stage-c").exists());
        std::fs::remove_dir_all(&root).unwrap();
    }
}
