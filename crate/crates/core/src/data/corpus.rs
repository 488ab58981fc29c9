use std::path::{Path, PathBuf};

use log::warn;

use crate::data::image::ImageView;
use crate::error::{Result, SaipError};
use crate::scalar::Scalar;

const EXTENSIONS: [&str; 6] = ["png", "jpg", "jpeg", "bmp", "ppm", "pnm"];

/// Sorted listing of image files under a root directory. Keys are paths
/// relative to the root, using `/` separators.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusIndex {
    pub root: PathBuf,
    pub keys: Vec<String>,
}

impl CorpusIndex {
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn path(&self, i: usize) -> PathBuf {
        self.root.join(&self.keys[i])
    }
}

fn walk(dir: &Path, root: &Path, out: &mut Vec<String>) -> Result<()> {
    let entries = std::fs::read_dir(dir).map_err(|e| SaipError::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| SaipError::io(dir, e))?;
        let path = entry.path();
        let ft = entry.file_type().map_err(|e| SaipError::io(&path, e))?;
        if ft.is_dir() {
            walk(&path, root, out)?;
        } else if path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        {
            let rel = path.strip_prefix(root).expect("walked under root");
            let key = rel
                .components()
                .map(|c| c.as_os_str().to_string_lossy().into_owned())
                .collect::<Vec<_>>()
                .join("/");
            out.push(key);
        }
    }
    Ok(())
}

pub fn index_corpus(root: &Path) -> Result<CorpusIndex> {
    if !root.is_dir() {
        return Err(SaipError::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "corpus root is not a directory"),
        ));
    }
    let mut keys = Vec::new();
    walk(root, root, &mut keys)?;
    if keys.is_empty() {
        return Err(SaipError::EmptyCorpus(root.to_path_buf()));
    }
    keys.sort();
    Ok(CorpusIndex {
        root: root.to_path_buf(),
        keys,
    })
}

/// An image that could not be turned into an anchor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SkipReport {
    pub key: String,
    pub reason: String,
}

/// Decoded anchors for every readable image of an index, held in memory.
#[derive(Clone, Debug)]
pub struct Corpus<T> {
    pub anchors: Vec<ImageView<T>>,
}

impl<T: Scalar> Corpus<T> {
    /// Decodes and anchors every indexed image; undecodable files are
    /// skipped and reported.
    pub fn load(index: &CorpusIndex, anchor_hw: [usize; 2]) -> Result<(Self, Vec<SkipReport>)> {
        let mut anchors = Vec::with_capacity(index.len());
        let mut skipped = Vec::new();
        for (i, key) in index.keys.iter().enumerate() {
            match load_anchor(&index.path(i), key, anchor_hw) {
                Ok(a) => anchors.push(a),
                Err(e) => {
                    warn!("skipping {key}: {e}");
                    skipped.push(SkipReport {
                        key: key.clone(),
                        reason: e.to_string(),
                    });
                }
            }
        }
        if anchors.is_empty() {
            return Err(SaipError::EmptyCorpus(index.root.clone()));
        }
        Ok((Corpus { anchors }, skipped))
    }

    pub fn from_anchors(anchors: Vec<ImageView<T>>) -> Result<Self> {
        if anchors.is_empty() {
            return Err(SaipError::EmptyCorpus(PathBuf::from("<memory>")));
        }
        Ok(Corpus { anchors })
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

pub fn load_anchor<T: Scalar>(path: &Path, key: &str, anchor_hw: [usize; 2]) -> Result<ImageView<T>> {
    let raw = image::open(path)
        .map_err(|e| SaipError::Decode {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?
        .to_rgb8();
    Ok(super::views::make_anchor(&raw, anchor_hw, key))
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{Rgb, RgbImage};

    #[test]
    fn index_is_sorted_and_stable() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["b.png", "a.png", "c.jpg"] {
            RgbImage::from_pixel(4, 4, Rgb([1, 2, 3]))
                .save(dir.path().join(name))
                .unwrap();
        }
        std::fs::write(dir.path().join("notes.txt"), "x").unwrap();
        let idx = index_corpus(dir.path()).unwrap();
        assert_eq!(idx.keys, vec!["a.png", "b.png", "c.jpg"]);
        assert_eq!(index_corpus(dir.path()).unwrap(), idx);
    }

    #[test]
    fn nested_directories_are_indexed() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("sub")).unwrap();
        RgbImage::new(2, 2).save(dir.path().join("sub/x.png")).unwrap();
        RgbImage::new(2, 2).save(dir.path().join("y.png")).unwrap();
        let idx = index_corpus(dir.path()).unwrap();
        assert_eq!(idx.keys, vec!["sub/x.png", "y.png"]);
    }

    #[test]
    fn empty_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let e = index_corpus(dir.path()).unwrap_err();
        assert!(e.to_string().contains("empty corpus"));
    }

    #[test]
    fn undecodable_files_are_skipped_with_report() {
        let dir = tempfile::tempdir().unwrap();
        RgbImage::new(8, 4).save(dir.path().join("good.png")).unwrap();
        std::fs::write(dir.path().join("bad.png"), b"not an image").unwrap();
        let idx = index_corpus(dir.path()).unwrap();
        let (corpus, skipped) = Corpus::<f32>::load(&idx, [8, 8]).unwrap();
        assert_eq!(corpus.len(), 1);
        assert_eq!(skipped.len(), 1);
        assert_eq!(skipped[0].key, "bad.png");
    }
}
