//! On-disk formats: the `VFMT` tensor container and the COCO-style
//! annotation / detection JSON documents.
//!
//! # Tensor container
//!
//! All integers little-endian:
//!
//! | offset      | size       | field                                  |
//! |-------------|------------|----------------------------------------|
//! | 0           | 4          | magic `b"VFMT"`                        |
//! | 4           | 4 (u32)    | version, currently 1                   |
//! | 8           | 4 (u32)    | dtype code, 1 = f32                    |
//! | 12          | 4 (u32)    | ndim                                   |
//! | 16          | 8·ndim     | dims (u64 each)                        |
//! | 16 + 8·ndim | 4·Π dims   | row-major payload                      |
//!
//! `ndim = 0` is a scalar with a one-element payload. Trailing bytes are
//! rejected. The reader checks every length against the buffer before it
//! allocates anything.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::Detection;
use crate::prototype::BoxAnnotation;
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: [u8; 4] = *b"VFMT";
pub const TENSOR_VERSION: u32 = 1;
pub const DTYPE_F32: u32 = 1;
const HEADER_LEN: usize = 16;

/// Serialises `t` at 32-bit precision.
pub fn encode_tensor(t: &Tensor) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * t.ndim() + 4 * t.numel());
    out.extend_from_slice(&TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    out.extend_from_slice(&DTYPE_F32.to_le_bytes());
    out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for (i, &v) in t.data().iter().enumerate() {
        let f = v as f32;
        if !f.is_finite() {
            return Err(Error::Validation(format!(
                "value {v} at flat index {i} is not representable as f32"
            )));
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(out)
}

fn read_u32(buf: &[u8], offset: usize) -> Result<u32> {
    let bytes = buf.get(offset..offset + 4).ok_or(Error::Truncated {
        offset: offset as u64,
        expected: 4,
        actual: buf.len().saturating_sub(offset) as u64,
    })?;
    Ok(u32::from_le_bytes(bytes.try_into().expect("4 bytes")))
}

/// Parses a tensor container held in memory.
pub fn decode_tensor(buf: &[u8]) -> Result<Tensor> {
    if buf.len() < 4 {
        return Err(Error::Truncated {
            offset: 0,
            expected: HEADER_LEN as u64,
            actual: buf.len() as u64,
        });
    }
    if buf[..4] != TENSOR_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad magic {:02x?}, expected \"VFMT\"", &buf[..4]),
        });
    }
    let version = read_u32(buf, 4)?;
    if version != TENSOR_VERSION {
        return Err(Error::Version {
            found: version,
            expected: TENSOR_VERSION,
        });
    }
    let dtype = read_u32(buf, 8)?;
    if dtype != DTYPE_F32 {
        return Err(Error::UnsupportedDtype(dtype));
    }
    let ndim = read_u32(buf, 12)? as usize;
    let dims_end = ndim
        .checked_mul(8)
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or(Error::Format {
            offset: 12,
            msg: format!("ndim {ndim} overflows"),
        })?;
    if dims_end > buf.len() {
        return Err(Error::Truncated {
            offset: HEADER_LEN as u64,
            expected: (dims_end - HEADER_LEN) as u64,
            actual: (buf.len() - HEADER_LEN) as u64,
        });
    }
    let mut shape = Vec::with_capacity(ndim);
    let mut numel: u64 = 1;
    for k in 0..ndim {
        let off = HEADER_LEN + 8 * k;
        let d = u64::from_le_bytes(buf[off..off + 8].try_into().expect("8 bytes"));
        if d == 0 {
            return Err(Error::Format {
                offset: off as u64,
                msg: format!("dimension {k} is zero"),
            });
        }
        numel = numel.checked_mul(d).ok_or(Error::Format {
            offset: off as u64,
            msg: "element count overflows u64".into(),
        })?;
        shape.push(d);
    }
    let payload = &buf[dims_end..];
    let expected = numel.checked_mul(4).ok_or(Error::Format {
        offset: HEADER_LEN as u64,
        msg: "payload size overflows u64".into(),
    })?;
    if (payload.len() as u64) < expected {
        return Err(Error::Truncated {
            offset: dims_end as u64,
            expected,
            actual: payload.len() as u64,
        });
    }
    if (payload.len() as u64) > expected {
        return Err(Error::Format {
            offset: dims_end as u64 + expected,
            msg: format!(
                "{} trailing bytes after payload",
                payload.len() as u64 - expected
            ),
        });
    }
    // payload fits in memory, so every dim fits in usize
    let shape: Vec<usize> = shape.into_iter().map(|d| d as usize).collect();
    let mut data = Vec::with_capacity(numel as usize);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        if !v.is_finite() {
            return Err(Error::Format {
                offset: (dims_end + 4 * i) as u64,
                msg: format!("non-finite value {v}"),
            });
        }
        data.push(f64::from(v));
    }
    Tensor::new(&shape, data)
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    fs::write(path, encode_tensor(t)?)?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_tensor(&fs::read(path)?)
}

/// A parsed document plus any non-fatal warnings raised while reading it.
#[derive(Debug, Clone)]
pub struct Parsed<T> {
    pub value: T,
    pub warnings: Vec<String>,
}

fn from_json_str<T: DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let path = if path == "." {
            "$".to_string()
        } else {
            format!("$.{path}")
        };
        Error::Schema {
            path,
            msg: e.into_inner().to_string(),
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub id: u64,
    pub width: f64,
    pub height: f64,
    /// Weather / lighting domain the image belongs to.
    #[serde(default = "default_domain", alias = "domain_tag")]
    pub domain: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file_name: Option<String>,
}

fn default_domain() -> String {
    "source".to_string()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub id: u64,
    pub name: String,
}

/// Ground truth in COCO layout: images, box annotations and categories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSet {
    pub images: Vec<ImageInfo>,
    pub annotations: Vec<BoxAnnotation>,
    pub categories: Vec<Category>,
}

#[derive(Deserialize)]
struct RawAnnotationSet {
    images: Vec<ImageInfo>,
    annotations: Vec<BoxAnnotation>,
    categories: Vec<Category>,
    #[serde(flatten)]
    extra: BTreeMap<String, serde_json::Value>,
}

impl AnnotationSet {
    /// Referential and geometric checks.
    pub fn validate(&self) -> Result<()> {
        let mut image_ids = HashSet::new();
        for img in &self.images {
            if !image_ids.insert(img.id) {
                return Err(Error::Validation(format!("duplicate image id {}", img.id)));
            }
            if !(img.width > 0.0 && img.height > 0.0) {
                return Err(Error::Validation(format!(
                    "image {} has non-positive size {}×{}",
                    img.id, img.width, img.height
                )));
            }
        }
        let mut cat_ids = HashSet::new();
        let mut names = HashSet::new();
        for c in &self.categories {
            if !cat_ids.insert(c.id) {
                return Err(Error::Validation(format!("duplicate category id {}", c.id)));
            }
            if !names.insert(c.name.as_str()) {
                return Err(Error::Validation(format!(
                    "duplicate category name {:?}",
                    c.name
                )));
            }
        }
        for (i, a) in self.annotations.iter().enumerate() {
            if !image_ids.contains(&a.image_id) {
                return Err(Error::Validation(format!(
                    "annotations[{i}] references unknown image_id {}",
                    a.image_id
                )));
            }
            if !cat_ids.contains(&a.category_id) {
                return Err(Error::Validation(format!(
                    "annotations[{i}] references unknown category_id {}",
                    a.category_id
                )));
            }
            a.bbox
                .validate()
                .map_err(|e| Error::Validation(format!("annotations[{i}]: {e}")))?;
        }
        Ok(())
    }

    pub fn image(&self, id: u64) -> Option<&ImageInfo> {
        self.images.iter().find(|i| i.id == id)
    }

    pub fn category_name(&self, id: u64) -> Option<&str> {
        self.categories
            .iter()
            .find(|c| c.id == id)
            .map(|c| c.name.as_str())
    }
}

/// Parses and validates ground-truth JSON. Unknown top-level keys are
/// reported as warnings.
pub fn annotations_from_str(text: &str) -> Result<Parsed<AnnotationSet>> {
    let raw: RawAnnotationSet = from_json_str(text)?;
    let warnings: Vec<String> = raw
        .extra
        .keys()
        .map(|k| format!("ignoring unknown top-level key {k:?}"))
        .collect();
    for w in &warnings {
        log::warn!("{w}");
    }
    let set = AnnotationSet {
        images: raw.images,
        annotations: raw.annotations,
        categories: raw.categories,
    };
    set.validate()?;
    Ok(Parsed {
        value: set,
        warnings,
    })
}

pub fn parse_annotations(path: impl AsRef<Path>) -> Result<AnnotationSet> {
    Ok(annotations_from_str(&fs::read_to_string(path)?)?.value)
}

/// Parses a COCO-results style JSON array of detections.
pub fn detections_from_str(text: &str) -> Result<Vec<Detection>> {
    let dets: Vec<Detection> = from_json_str(text)?;
    for (i, d) in dets.iter().enumerate() {
        d.validate()
            .map_err(|e| Error::Validation(format!("detections[{i}]: {e}")))?;
    }
    Ok(dets)
}

pub fn parse_detections(path: impl AsRef<Path>) -> Result<Vec<Detection>> {
    detections_from_str(&fs::read_to_string(path)?)
}

pub fn detections_to_string(dets: &[Detection]) -> Result<String> {
    serde_json::to_string_pretty(dets).map_err(|e| Error::Validation(e.to_string()))
}

/// One exported teacher map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportEntry {
    /// Source image path as given to the exporter.
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_id: Option<u64>,
    /// Tensor file, relative to the manifest's directory.
    pub path: String,
    /// `[C_t, H_t, W_t]`.
    pub shape: [usize; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportWarning {
    pub image: String,
    pub reason: String,
}

/// Manifest written by the teacher feature exporter after all tensor
/// files are on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportManifest {
    pub model_id: String,
    #[serde(default)]
    pub images: Vec<String>,
    pub output_dir: String,
    pub entries: Vec<ExportEntry>,
    #[serde(default)]
    pub warnings: Vec<ExportWarning>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_size: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preprocessing: Option<String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl ExportManifest {
    pub fn parse(text: &str) -> Result<Self> {
        from_json_str(text)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// Reads every listed tensor and checks its shape against the entry.
    pub fn validate_files(&self, base_dir: &Path) -> Result<()> {
        for e in &self.entries {
            let t = read_tensor(base_dir.join(&e.path))?;
            if t.shape() != e.shape {
                return Err(Error::Validation(format!(
                    "{}: manifest says {:?}, file holds {:?}",
                    e.path,
                    e.shape,
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    /// Tensor path for an image id, if the exporter recorded one.
    pub fn path_for(&self, base_dir: &Path, image_id: u64) -> Option<PathBuf> {
        self.entries
            .iter()
            .find(|e| e.image_id == Some(image_id))
            .map(|e| base_dir.join(&e.path))
    }
}

/// Writes `value` as pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| Error::Validation(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub(crate) fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    from_json_str(&fs::read_to_string(path)?)
}
