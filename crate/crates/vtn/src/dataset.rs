//! Scene spec JSON, `VTNDATA1` image blobs and the dataset manifest.
//!
//! A blob is the 8-byte magic, then `u32` height, width and count, then
//! `count × height × width` f32 pixels, all little-endian.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vtn_core::synth::{make_dataset, ClassSpec, Dataset, PartShape, PartSpec, SceneSpec, Split};

use crate::error::{AppError, Result};

pub const BLOB_MAGIC: &[u8; 8] = b"VTNDATA1";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartFile {
    pub shape: String,
    /// `[row, col]` in pixels.
    pub center: [f64; 2],
    pub radius: f64,
    pub intensity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassFile {
    pub parts: Vec<PartFile>,
}

/// JSON form of [`SceneSpec`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFile {
    pub height: usize,
    pub width: usize,
    pub translation: f64,
    pub rotation: f64,
    pub scale: [f64; 2],
    pub jitter: f64,
    pub noise: f64,
    pub classes: Vec<ClassFile>,
}

impl From<&SceneSpec> for SceneFile {
    fn from(s: &SceneSpec) -> Self {
        SceneFile {
            height: s.height,
            width: s.width,
            translation: s.translation,
            rotation: s.rotation,
            scale: [s.scale.0, s.scale.1],
            jitter: s.jitter,
            noise: s.noise,
            classes: s
                .classes
                .iter()
                .map(|c| ClassFile {
                    parts: c
                        .parts
                        .iter()
                        .map(|p| PartFile {
                            shape: p.shape.name().to_string(),
                            center: [p.center.0, p.center.1],
                            radius: p.radius,
                            intensity: p.intensity,
                        })
                        .collect(),
                })
                .collect(),
        }
    }
}

impl SceneFile {
    pub fn to_spec(&self) -> Result<SceneSpec> {
        let mut classes = Vec::with_capacity(self.classes.len());
        for (ci, c) in self.classes.iter().enumerate() {
            let mut parts = Vec::with_capacity(c.parts.len());
            for (pi, p) in c.parts.iter().enumerate() {
                let shape = PartShape::parse(&p.shape).ok_or_else(|| {
                    AppError::config(
                        format!("classes[{ci}].parts[{pi}].shape"),
                        format!("unknown shape '{}', expected disk, bar, cross or ring", p.shape),
                    )
                })?;
                parts.push(PartSpec {
                    shape,
                    center: (p.center[0], p.center[1]),
                    radius: p.radius,
                    intensity: p.intensity,
                });
            }
            classes.push(ClassSpec { parts });
        }
        let spec = SceneSpec {
            height: self.height,
            width: self.width,
            classes,
            translation: self.translation,
            rotation: self.rotation,
            scale: (self.scale[0], self.scale[1]),
            jitter: self.jitter,
            noise: self.noise,
        };
        spec.validate().map_err(|e| AppError::config("dataset_spec", e.to_string()))?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<SceneSpec> {
        let text = std::fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        let file: SceneFile = serde_path_to_error::deserialize(de)
            .map_err(|e| AppError::config(format!("dataset_spec:{}", e.path()), e.into_inner().to_string()))?;
        file.to_spec()
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BlobError {
    #[error("bad magic at byte 0, expected \"VTNDATA1\"")]
    BadMagic,
    #[error("truncated at byte {offset}: header or pixel data incomplete")]
    Truncated { offset: usize },
    #[error("{extra} unexpected trailing bytes at byte {offset}")]
    Trailing { offset: usize, extra: usize },
}

pub fn blob_bytes(split: &Split) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + split.images.len() * 4);
    out.extend_from_slice(BLOB_MAGIC);
    for v in [split.height, split.width, split.len()] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for px in &split.images {
        out.extend_from_slice(&px.to_le_bytes());
    }
    out
}

/// Returns `(height, width, count, pixels)`.
pub fn parse_blob(buf: &[u8]) -> std::result::Result<(usize, usize, usize, Vec<f32>), BlobError> {
    if buf.len() < 8 || &buf[..8] != BLOB_MAGIC {
        return Err(BlobError::BadMagic);
    }
    if buf.len() < 20 {
        return Err(BlobError::Truncated { offset: buf.len() });
    }
    let word = |i: usize| u32::from_le_bytes(buf[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
    let (h, w, n) = (word(0), word(1), word(2));
    let need = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(n))
        .and_then(|v| v.checked_mul(4))
        .and_then(|v| v.checked_add(20));
    match need {
        Some(need) if buf.len() == need => {}
        Some(need) if buf.len() > need => {
            return Err(BlobError::Trailing {
                offset: need,
                extra: buf.len() - need,
            })
        }
        _ => return Err(BlobError::Truncated { offset: buf.len() }),
    }
    let px = buf[20..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((h, w, n, px))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitEntry {
    pub file: String,
    pub count: usize,
    /// SHA-256 of the blob file.
    pub sha256: String,
    pub labels: Vec<usize>,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub spec: SceneFile,
    pub train: SplitEntry,
    pub test: SplitEntry,
}

impl Manifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.to_json().as_bytes())
    }
}

fn entry(file: &str, split: &Split, blob: &[u8]) -> SplitEntry {
    SplitEntry {
        file: file.to_string(),
        count: split.len(),
        sha256: sha256_hex(blob),
        labels: split.labels.clone(),
        seeds: split.seeds.clone(),
    }
}

/// Manifest and blob bytes for a dataset, without touching the disk.
pub fn package(data: &Dataset) -> (Manifest, Vec<u8>, Vec<u8>) {
    let train = blob_bytes(&data.train);
    let test = blob_bytes(&data.test);
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        seed: data.seed,
        spec: SceneFile::from(&data.spec),
        train: entry("train.bin", &data.train, &train),
        test: entry("test.bin", &data.test, &test),
    };
    (manifest, train, test)
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| AppError::io(path, e))
}

/// Renders and writes `spec.json`, `train.bin`, `test.bin` and
/// `manifest.json` into `dir`. Returns the manifest.
pub fn generate(spec: &SceneSpec, n_train: usize, n_test: usize, seed: u64, dir: &Path) -> Result<Manifest> {
    let data = make_dataset(spec, n_train, n_test, seed)?;
    std::fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
    let (manifest, train, test) = package(&data);
    let spec_json = serde_json::to_string_pretty(&manifest.spec).expect("spec serializes");
    write(&dir.join("spec.json"), spec_json.as_bytes())?;
    write(&dir.join(&manifest.train.file), &train)?;
    write(&dir.join(&manifest.test.file), &test)?;
    write(&dir.join("manifest.json"), manifest.to_json().as_bytes())?;
    Ok(manifest)
}

fn read_split(dir: &Path, e: &SplitEntry, spec: &SceneSpec) -> Result<Split> {
    let path = dir.join(&e.file);
    let bytes = std::fs::read(&path).map_err(|err| AppError::io(&path, err))?;
    let corrupt = |message: String| AppError::Corrupt {
        path: path.clone(),
        message,
    };
    if sha256_hex(&bytes) != e.sha256 {
        return Err(corrupt("content hash differs from the manifest".into()));
    }
    let (h, w, n, images) = parse_blob(&bytes).map_err(|source| AppError::Blob {
        path: path.clone(),
        source,
    })?;
    if (h, w) != (spec.height, spec.width) || n != e.count || e.labels.len() != n || e.seeds.len() != n {
        return Err(corrupt(format!("blob holds {n} images of {h}x{w}, manifest disagrees")));
    }
    if let Some(&l) = e.labels.iter().find(|&&l| l >= spec.class_count()) {
        return Err(corrupt(format!("label {l} out of range")));
    }
    Ok(Split {
        height: h,
        width: w,
        images,
        labels: e.labels.clone(),
        seeds: e.seeds.clone(),
    })
}

/// Reads a `generate` output back, verifying every content hash.
pub fn load_dir(dir: &Path) -> Result<Dataset> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| AppError::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| AppError::Corrupt {
        path: path.clone(),
        message: e.to_string(),
    })?;
    let spec = manifest.spec.to_spec()?;
    Ok(Dataset {
        train: read_split(dir, &manifest.train, &spec)?,
        test: read_split(dir, &manifest.test, &spec)?,
        spec,
        seed: manifest.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn small() -> Dataset {
        make_dataset(&SceneSpec::desk_default(), 40, 20, 3).unwrap()
    }

    #[test]
    fn scene_json_round_trip() {
        let spec = SceneSpec::desk_default();
        let file = SceneFile::from(&spec);
        let text = serde_json::to_string(&file).unwrap();
        let back: SceneFile = serde_json::from_str(&text).unwrap();
        assert_eq!(back.to_spec().unwrap(), spec);
    }

    #[test]
    fn unknown_shape_names_the_field() {
        let mut file = SceneFile::from(&SceneSpec::desk_default());
        file.classes[2].parts[1].shape = "star".into();
        match file.to_spec() {
            Err(AppError::Config { field, .. }) => assert_eq!(field, "classes[2].parts[1].shape"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn blob_round_trip() {
        let d = small();
        let bytes = blob_bytes(&d.train);
        let (h, w, n, px) = parse_blob(&bytes).unwrap();
        assert_eq!((h, w, n), (32, 32, 40));
        assert_eq!(px, d.train.images);
    }

    #[test]
    fn blob_faults() {
        let bytes = blob_bytes(&small().test);
        assert_eq!(parse_blob(&bytes[..5]), Err(BlobError::BadMagic));
        assert_eq!(parse_blob(&bytes[..15]), Err(BlobError::Truncated { offset: 15 }));
        assert_eq!(parse_blob(&bytes[..100]), Err(BlobError::Truncated { offset: 100 }));
        let mut long = bytes.clone();
        long.extend_from_slice(&[0; 3]);
        assert_eq!(
            parse_blob(&long),
            Err(BlobError::Trailing {
                offset: bytes.len(),
                extra: 3
            })
        );
    }

    #[test]
    fn identical_inputs_identical_manifest_hash() {
        let (a, _, _) = package(&small());
        let (b, _, _) = package(&small());
        assert_eq!(a.hash(), b.hash());
        let (c, _, _) = package(&make_dataset(&SceneSpec::desk_default(), 40, 20, 4).unwrap());
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn no_duplicate_images_across_splits() {
        let d = make_dataset(&SceneSpec::desk_default(), 200, 100, 0).unwrap();
        let mut seen = HashSet::new();
        for split in [&d.train, &d.test] {
            for i in 0..split.len() {
                let bytes: Vec<u8> = split.image(i).iter().flat_map(|v| v.to_le_bytes()).collect();
                assert!(seen.insert(sha256_hex(&bytes)), "duplicate image");
            }
        }
    }

    #[test]
    fn generate_then_load() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SceneSpec::desk_default();
        generate(&spec, 30, 10, 1, dir.path()).unwrap();
        let back = load_dir(dir.path()).unwrap();
        assert_eq!(back, make_dataset(&spec, 30, 10, 1).unwrap());
    }

    #[test]
    fn tampered_blob_detected() {
        let dir = tempfile::tempdir().unwrap();
        generate(&SceneSpec::desk_default(), 10, 10, 1, dir.path()).unwrap();
        let path = dir.path().join("test.bin");
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[40] ^= 1;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_dir(dir.path()), Err(AppError::Corrupt { .. })));
    }
}
