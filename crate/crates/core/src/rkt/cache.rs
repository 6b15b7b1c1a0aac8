use std::io;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{deserialize_rkt, serialize_rkt, BuildConfig, RktNode};
use crate::rubric::Rubric;

/// On-disk store of built trees keyed by a content hash of everything that
/// influences construction.
#[derive(Debug, Clone)]
pub struct TreeCache {
    dir: PathBuf,
}

#[derive(Serialize)]
struct KeyMaterial<'a> {
    rubric: &'a Rubric,
    config: &'a BuildConfig,
    template_version: &'a str,
    backend_id: &'a str,
}

impl TreeCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn key(
        rubric: &Rubric,
        config: &BuildConfig,
        template_version: &str,
        backend_id: &str,
    ) -> String {
        crate::json_digest(&KeyMaterial {
            rubric,
            config,
            template_version,
            backend_id,
        })
    }

    pub fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.rkt.json"))
    }

    /// A cached tree, or `None` when absent or unreadable.
    pub fn load(&self, key: &str) -> Option<RktNode> {
        let text = std::fs::read_to_string(self.path_for(key)).ok()?;
        match deserialize_rkt(&text) {
            Ok(tree) => Some(tree),
            Err(e) => {
                tracing::warn!(key, error = %e, "ignoring corrupt cache entry");
                None
            }
        }
    }

    pub fn store(&self, key: &str, root: &RktNode) -> io::Result<PathBuf> {
        std::fs::create_dir_all(&self.dir)?;
        let path = self.path_for(key);
        write_atomic(&path, serialize_rkt(root).as_bytes())?;
        Ok(path)
    }
}

/// Write through a temporary file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    use std::io::Write;
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}
