use std::io;
use std::path::{Component, Path, PathBuf};

/// True for references the pipeline must not read from local disk.
pub fn is_remote(image_ref: &str) -> bool {
    let lower = image_ref.to_ascii_lowercase();
    lower.starts_with("http://") || lower.starts_with("https://")
}

/// Resolves `image_ref`s relative to a root directory.
#[derive(Clone, Debug)]
pub struct LocalImages {
    root: PathBuf,
}

impl LocalImages {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Local path for `image_ref`, or `None` for remote refs and refs that
    /// escape the root with `..`.
    pub fn resolve(&self, image_ref: &str) -> Option<PathBuf> {
        if is_remote(image_ref) {
            return None;
        }
        let rel = Path::new(image_ref.strip_prefix("file://").unwrap_or(image_ref));
        if rel.components().any(|c| matches!(c, Component::ParentDir)) {
            return None;
        }
        if rel.is_absolute() {
            return Some(rel.to_path_buf());
        }
        Some(self.root.join(rel))
    }

    pub fn read(&self, image_ref: &str) -> io::Result<Vec<u8>> {
        let path = self.resolve(image_ref).ok_or_else(|| {
            io::Error::new(io::ErrorKind::Unsupported, format!("not a local image reference: {image_ref}"))
        })?;
        std::fs::read(path)
    }
}
