//! JSON Lines dataset manifests. Each line binds an image id to a split, an
//! embedding tensor, one prompt box and optional mask, image and scene
//! references; paths are relative to the manifest's directory.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use super::tensor::read_pdt1;
use crate::error::{Error, Result};
use crate::prompts::PromptBox;
use crate::segmenters::{ImageRef, SoftMask, SyntheticScene};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!(
                "unknown split '{other}' (expected train, val or test)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub split: String,
    pub embedding: String,
    #[serde(rename = "box")]
    pub b: PromptBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    /// Path handed to external segmenters, resolved like the other refs
    /// but not required to exist.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<SyntheticScene>,
}

/// All records of one image id.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGroup {
    pub id: String,
    pub split: Split,
    pub embedding: PathBuf,
    pub mask: Option<PathBuf>,
    pub image: ImageRef,
    pub boxes: Vec<PromptBox>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub path: PathBuf,
    pub base: PathBuf,
    pub images: Vec<ImageGroup>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ImageGroup> {
        self.images.iter().filter(move |g| g.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    pub fn record_count(&self) -> usize {
        self.images.iter().map(|g| g.boxes.len()).sum()
    }
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    // External segmenters run in their own directory, so image refs are absolute.
    let image_base = std::path::absolute(&base).map_err(|e| Error::io(&base, e))?;
    let err = |line: usize, message: String| Error::Manifest {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut groups: Vec<ImageGroup> = Vec::new();
    let mut by_id: HashMap<String, usize> = HashMap::new();
    let mut seen: HashSet<(String, [u64; 4])> = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(raw).map_err(|e| err(line, format!("malformed record: {e}")))?;
        let split: Split = rec.split.parse().map_err(|e: Error| err(line, e.to_string()))?;
        if rec.id.is_empty() {
            return Err(err(line, "empty image id".into()));
        }
        let key = (rec.id.clone(), rec.b.to_array().map(f64::to_bits));
        if !seen.insert(key) {
            return Err(err(line, format!("duplicate (id, box) pair for '{}'", rec.id)));
        }
        let resolve = |rel: &str, what: &str| -> Result<PathBuf> {
            let p = base.join(rel);
            if p.is_file() {
                Ok(p)
            } else {
                Err(err(line, format!("{what} '{rel}' does not exist")))
            }
        };
        let embedding = resolve(&rec.embedding, "embedding")?;
        let mask = rec.mask.as_deref().map(|m| resolve(m, "mask")).transpose()?;
        if let Some(scene) = &rec.scene {
            scene.validate().map_err(|e| err(line, format!("invalid scene: {e}")))?;
        }
        match by_id.get(&rec.id) {
            Some(&g) => {
                let group = &mut groups[g];
                if group.split != split
                    || group.embedding != embedding
                    || group.mask != mask
                    || (rec.scene.is_some() && group.image.scene != rec.scene)
                {
                    return Err(err(
                        line,
                        format!("record for '{}' disagrees with the image's earlier records", rec.id),
                    ));
                }
                group.boxes.push(rec.b);
            }
            None => {
                by_id.insert(rec.id.clone(), groups.len());
                groups.push(ImageGroup {
                    id: rec.id.clone(),
                    split,
                    embedding,
                    mask,
                    image: ImageRef {
                        id: rec.id.clone(),
                        path: rec
                            .image
                            .as_deref()
                            .map(|p| image_base.join(p).to_string_lossy().into_owned()),
                        scene: rec.scene.clone(),
                    },
                    boxes: vec![rec.b],
                });
            }
        }
    }
    if groups.is_empty() {
        warn!("manifest {} has no records", path.display());
    }
    Ok(DatasetManifest {
        path: path.to_path_buf(),
        base,
        images: groups,
    })
}

/// Rank-1 embeddings pass through; rank-2 `(T, C)` grids become the
/// `2C`-vector of column means followed by column maxima.
pub fn pool_embedding(dims: &[usize], data: &[f64]) -> Result<Vec<f64>> {
    match dims {
        [_] => Ok(data.to_vec()),
        [t, c] if *t > 0 => {
            let mut mean = vec![0.0; *c];
            let mut max = vec![f64::NEG_INFINITY; *c];
            for row in data.chunks_exact(*c) {
                for j in 0..*c {
                    mean[j] += row[j] / *t as f64;
                    max[j] = max[j].max(row[j]);
                }
            }
            mean.extend(max);
            Ok(mean)
        }
        other => Err(Error::shape(
            "embedding tensor",
            "rank 1 or non-empty rank 2",
            format!("{other:?}"),
        )),
    }
}

/// Loads embeddings once per file.
#[derive(Debug, Default)]
pub struct EmbeddingCache {
    cache: BTreeMap<PathBuf, Vec<f64>>,
}

impl EmbeddingCache {
    pub fn get(&mut self, path: &Path) -> Result<&[f64]> {
        if !self.cache.contains_key(path) {
            let t = read_pdt1(path)?;
            let data: Vec<f64> = t.data.iter().map(|&v| f64::from(v)).collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("embedding {}", path.display())));
            }
            let pooled = pool_embedding(&t.dims, &data).map_err(|e| Error::Corrupt {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?;
            self.cache.insert(path.to_path_buf(), pooled);
        }
        Ok(&self.cache[path])
    }
}

/// Reads a rank-2 ground-truth mask tensor.
pub fn load_mask(path: &Path) -> Result<SoftMask> {
    let t = read_pdt1(path)?;
    match t.dims[..] {
        [h, w] => SoftMask::new(h, w, t.data.iter().map(|&v| f64::from(v)).collect()).map_err(|e| Error::Corrupt {
            path: path.to_path_buf(),
            message: e.to_string(),
        }),
        _ => Err(Error::Corrupt {
            path: path.to_path_buf(),
            message: format!("mask must be rank 2, got dims {:?}", t.dims),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::tensor::write_pdt1;

    fn setup() -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        write_pdt1(&dir.path().join("e.pdt"), &[3], &[1.0, 2.0, 3.0]).unwrap();
        dir
    }

    fn line(id: &str, split: &str, b: [f64; 4]) -> String {
        format!(r#"{{"id":"{id}","split":"{split}","embedding":"e.pdt","box":{b:?}}}"#)
    }

    #[test]
    fn empty_file_gives_empty_splits() {
        let dir = setup();
        let p = dir.path().join("m.jsonl");
        fs::write(&p, "").unwrap();
        let m = load_manifest(&p).unwrap();
        assert!(Split::ALL.iter().all(|&s| m.count(s) == 0));
    }

    #[test]
    fn groups_boxes_by_image() {
        let dir = setup();
        let p = dir.path().join("m.jsonl");
        let text = [
            line("a", "train", [0.1, 0.1, 0.5, 0.5]),
            line("a", "train", [0.1, 0.1, 0.6, 0.5]),
            line("b", "test", [0.2, 0.2, 0.4, 0.4]),
        ]
        .join("\n");
        fs::write(&p, text).unwrap();
        let m = load_manifest(&p).unwrap();
        assert_eq!(m.count(Split::Train), 1);
        assert_eq!(m.images[0].boxes.len(), 2);
        assert_eq!(m.record_count(), 3);
    }

    #[test]
    fn bad_split_names_the_line() {
        let dir = setup();
        let p = dir.path().join("m.jsonl");
        fs::write(
            &p,
            [
                line("a", "train", [0.1, 0.1, 0.5, 0.5]),
                line("b", "dev", [0.1, 0.1, 0.5, 0.5]),
            ]
            .join("\n"),
        )
        .unwrap();
        match load_manifest(&p) {
            Err(Error::Manifest { line, message, .. }) => {
                assert_eq!(line, 2);
                assert!(message.contains("dev"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rejects_duplicates_dangling_refs_and_bad_boxes() {
        let dir = setup();
        let p = dir.path().join("m.jsonl");
        let l = line("a", "train", [0.1, 0.1, 0.5, 0.5]);
        fs::write(&p, format!("{l}\n{l}\n")).unwrap();
        assert!(matches!(load_manifest(&p), Err(Error::Manifest { line: 2, .. })));
        fs::write(&p, l.replace("e.pdt", "missing.pdt")).unwrap();
        assert!(matches!(load_manifest(&p), Err(Error::Manifest { line: 1, .. })));
        fs::write(&p, line("a", "train", [0.5, 0.1, 0.1, 0.5])).unwrap();
        assert!(matches!(load_manifest(&p), Err(Error::Manifest { line: 1, .. })));
        fs::write(&p, "{not json").unwrap();
        assert!(matches!(load_manifest(&p), Err(Error::Manifest { line: 1, .. })));
        assert!(load_manifest(&dir.path().join("nope.jsonl")).is_err());
    }

    #[test]
    fn rank_two_embeddings_are_mean_max_pooled() {
        let dir = tempfile::tempdir().unwrap();
        let t = 5;
        let data: Vec<f32> = (0..t * 256).map(|i| (i % 97) as f32 * 0.01).collect();
        let p = dir.path().join("g.pdt");
        write_pdt1(&p, &[t, 256], &data).unwrap();
        let mut cache = EmbeddingCache::default();
        let v = cache.get(&p).unwrap().to_vec();
        assert_eq!(v.len(), 512);
        let col0: Vec<f64> = (0..t).map(|r| f64::from(data[r * 256])).collect();
        assert!((v[0] - col0.iter().sum::<f64>() / t as f64).abs() < 1e-12);
        assert_eq!(v[256], col0.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    }

    #[test]
    fn pooling_rejects_rank_three() {
        assert!(pool_embedding(&[1, 1, 1], &[0.0]).is_err());
    }
}
