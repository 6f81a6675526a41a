//! Category prototypes: the mean teacher feature inside every
//! ground-truth box of a category, computed once over the source domain.

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::distill::TeacherFeature;
use crate::error::{Error, Result};
use crate::io::{decode_tensor, encode_tensor, read_json, write_json};
use crate::tensor::Tensor;

/// One ground-truth object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxAnnotation {
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: BBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<u64>,
}

impl BoxAnnotation {
    pub fn new(image_id: u64, category_id: u64, bbox: BBox) -> Self {
        Self {
            image_id,
            category_id,
            bbox,
            id: None,
        }
    }
}

/// Feature-grid cells covered by a box.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellRange {
    pub rows: Range<usize>,
    pub cols: Range<usize>,
}

fn axis_cells(lo: f64, hi: f64, extent: f64, cells: usize) -> Range<usize> {
    let s = cells as f64 / extent;
    let start = ((lo * s).floor().max(0.0) as usize).min(cells);
    let end = ((hi * s).ceil().max(0.0) as usize).min(cells);
    if end > start {
        start..end
    } else {
        let centre = ((0.5 * (lo + hi) * s).floor().max(0.0) as usize).min(cells - 1);
        centre..centre + 1
    }
}

/// Maps a pixel box onto a `grid = (H_t, W_t)` feature grid by
/// proportional scaling, flooring the near edge and ceiling the far edge.
/// `image_size` is `(height, width)` in pixels.
pub fn box_cells(bbox: &BBox, image_size: (f64, f64), grid: (usize, usize)) -> Result<CellRange> {
    bbox.validate()?;
    let (ih, iw) = image_size;
    if !(ih > 0.0 && iw > 0.0) || grid.0 == 0 || grid.1 == 0 {
        return Err(Error::contract(format!(
            "invalid image size {image_size:?} or grid {grid:?}"
        )));
    }
    let x0 = bbox.x.max(0.0);
    let y0 = bbox.y.max(0.0);
    let x1 = bbox.x2().min(iw);
    let y1 = bbox.y2().min(ih);
    if x1 <= x0 || y1 <= y0 {
        return Err(Error::contract(format!(
            "box {bbox:?} lies outside the {iw}×{ih} image"
        )));
    }
    Ok(CellRange {
        rows: axis_cells(y0, y1, ih, grid.0),
        cols: axis_cells(x0, x1, iw, grid.1),
    })
}

/// Mean teacher feature over the cells covered by `bbox`.
pub fn pool_box_feature(
    teacher: &TeacherFeature,
    bbox: &BBox,
    image_size: (f64, f64),
) -> Result<Vec<f64>> {
    let (h, w) = teacher.grid();
    let cells = box_cells(bbox, image_size, (h, w))?;
    let c = teacher.channels();
    let data = teacher.map().data();
    let count = (cells.rows.len() * cells.cols.len()) as f64;
    let pooled = (0..c)
        .map(|ch| {
            let plane = &data[ch * h * w..(ch + 1) * h * w];
            let mut acc = 0.0;
            for r in cells.rows.clone() {
                for col in cells.cols.clone() {
                    acc += plane[r * w + col];
                }
            }
            acc / count
        })
        .collect();
    Ok(pooled)
}

/// A pooled instance vector and where it came from.
#[derive(Debug, Clone)]
pub struct Instance {
    pub category_id: u64,
    pub image_id: u64,
    pub bbox: BBox,
    pub vector: Vec<f64>,
}

/// Pools every annotation (in parallel); output order follows `annotations`.
pub fn pool_instances(
    features: &BTreeMap<u64, TeacherFeature>,
    image_sizes: &BTreeMap<u64, (f64, f64)>,
    annotations: &[BoxAnnotation],
) -> Result<Vec<Instance>> {
    annotations
        .par_iter()
        .map(|a| {
            let teacher = features.get(&a.image_id).ok_or_else(|| {
                Error::Lookup(format!("no teacher feature for image_id {}", a.image_id))
            })?;
            let size = image_sizes.get(&a.image_id).ok_or_else(|| {
                Error::Lookup(format!("no image size for image_id {}", a.image_id))
            })?;
            Ok(Instance {
                category_id: a.category_id,
                image_id: a.image_id,
                bbox: a.bbox,
                vector: pool_box_feature(teacher, &a.bbox, *size)?,
            })
        })
        .collect()
}

/// Per-category prototype rows, ordered by ascending category id.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    channels: usize,
    category_ids: Vec<u64>,
    instance_counts: Vec<usize>,
    rows: Vec<f64>,
}

impl PrototypeBank {
    /// `rows` is `K×channels` row-major. Every count must be ≥ 1 and
    /// category ids strictly ascending. `K = 0` is representable but
    /// cannot be saved.
    pub fn new(
        channels: usize,
        category_ids: Vec<u64>,
        instance_counts: Vec<usize>,
        rows: Vec<f64>,
    ) -> Result<Self> {
        let k = category_ids.len();
        if instance_counts.len() != k || rows.len() != k * channels {
            return Err(Error::dim(format!(
                "bank with {k} categories has {} counts and {} values for width {channels}",
                instance_counts.len(),
                rows.len()
            )));
        }
        if channels == 0 {
            return Err(Error::dim("prototype width is zero"));
        }
        if let Some(i) = instance_counts.iter().position(|&n| n == 0) {
            return Err(Error::contract(format!(
                "category {} has no instances",
                category_ids[i]
            )));
        }
        if category_ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::contract("category ids must strictly ascend"));
        }
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite prototype value".into()));
        }
        Ok(Self {
            channels,
            category_ids,
            instance_counts,
            rows,
        })
    }

    pub fn len(&self) -> usize {
        self.category_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.category_ids.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn category_ids(&self) -> &[u64] {
        &self.category_ids
    }

    pub fn instance_counts(&self) -> &[usize] {
        &self.instance_counts
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.rows[k * self.channels..(k + 1) * self.channels]
    }

    /// Prototype of an external category id.
    pub fn get(&self, category_id: u64) -> Option<&[f64]> {
        self.category_ids
            .binary_search(&category_id)
            .ok()
            .map(|k| self.row(k))
    }

    /// `K×C_t` constant tensor of all prototypes.
    pub fn prototypes(&self) -> Result<Tensor> {
        if self.is_empty() {
            return Err(Error::contract("prototype bank is empty"));
        }
        Tensor::new(&[self.len(), self.channels], self.rows.clone())
    }

    /// Copy with rows in the given order. Used to check that attention
    /// does not depend on prototype order.
    pub fn permuted(&self, order: &[usize]) -> Result<PermutedBank> {
        let mut sorted = order.to_vec();
        sorted.sort_unstable();
        if sorted != (0..self.len()).collect::<Vec<_>>() {
            return Err(Error::contract(
                "order is not a permutation of the bank rows",
            ));
        }
        let rows = order.iter().flat_map(|&k| self.row(k).to_vec()).collect();
        Ok(PermutedBank {
            category_ids: order.iter().map(|&k| self.category_ids[k]).collect(),
            prototypes: Tensor::new(&[self.len(), self.channels], rows)?,
        })
    }
}

/// Prototype rows in caller-chosen order, with their category ids.
#[derive(Debug, Clone)]
pub struct PermutedBank {
    pub category_ids: Vec<u64>,
    pub prototypes: Tensor,
}

/// Per-category arithmetic mean of pooled instances.
///
/// Instances of a category are summed in a canonical order (image id,
/// then box), so the bank is bit-identical under any reordering of the
/// annotation list.
pub fn build_bank(
    features: &BTreeMap<u64, TeacherFeature>,
    image_sizes: &BTreeMap<u64, (f64, f64)>,
    annotations: &[BoxAnnotation],
) -> Result<PrototypeBank> {
    if annotations.is_empty() {
        return Err(Error::contract("build_bank needs at least one annotation"));
    }
    let instances = pool_instances(features, image_sizes, annotations)?;
    bank_from_instances(instances)
}

pub fn bank_from_instances(mut instances: Vec<Instance>) -> Result<PrototypeBank> {
    let Some(first) = instances.first() else {
        return Err(Error::contract("no instances to average"));
    };
    let channels = first.vector.len();
    if let Some(bad) = instances.iter().find(|i| i.vector.len() != channels) {
        return Err(Error::dim(format!(
            "instance in image {} has width {}, expected {channels}",
            bad.image_id,
            bad.vector.len()
        )));
    }
    instances.sort_by(|a, b| {
        a.category_id
            .cmp(&b.category_id)
            .then(a.image_id.cmp(&b.image_id))
            .then(a.bbox.x.total_cmp(&b.bbox.x))
            .then(a.bbox.y.total_cmp(&b.bbox.y))
            .then(a.bbox.w.total_cmp(&b.bbox.w))
            .then(a.bbox.h.total_cmp(&b.bbox.h))
    });
    let mut category_ids = Vec::new();
    let mut counts = Vec::new();
    let mut rows = Vec::new();
    for group in instances.chunk_by(|a, b| a.category_id == b.category_id) {
        let mut sum = vec![0.0; channels];
        for inst in group {
            sum.iter_mut().zip(&inst.vector).for_each(|(s, v)| *s += v);
        }
        let n = group.len() as f64;
        rows.extend(sum.into_iter().map(|s| s / n));
        category_ids.push(group[0].category_id);
        counts.push(group.len());
    }
    PrototypeBank::new(channels, category_ids, counts, rows)
}

pub const BANK_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BankMeta {
    format_version: u32,
    channels: usize,
    category_ids: Vec<u64>,
    instance_counts: Vec<usize>,
}

/// Sidecar metadata path for a bank tensor file.
pub fn bank_meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

/// Writes the `K×C_t` prototype tensor to `path` and the metadata record
/// to `<path>.meta.json`. Values are stored at 32-bit precision.
pub fn save_bank(path: impl AsRef<Path>, bank: &PrototypeBank) -> Result<()> {
    let path = path.as_ref();
    let tensor = bank.prototypes()?;
    std::fs::write(path, encode_tensor(&tensor)?)?;
    write_json(
        bank_meta_path(path),
        &BankMeta {
            format_version: BANK_FORMAT_VERSION,
            channels: bank.channels,
            category_ids: bank.category_ids.clone(),
            instance_counts: bank.instance_counts.clone(),
        },
    )
}

pub fn load_bank(path: impl AsRef<Path>) -> Result<PrototypeBank> {
    let path = path.as_ref();
    let tensor = decode_tensor(&std::fs::read(path)?)?;
    let meta: BankMeta = read_json(bank_meta_path(path))?;
    if meta.format_version != BANK_FORMAT_VERSION {
        return Err(Error::Version {
            found: meta.format_version,
            expected: BANK_FORMAT_VERSION,
        });
    }
    let expected = [meta.category_ids.len(), meta.channels];
    if tensor.shape() != expected {
        return Err(Error::Validation(format!(
            "bank tensor has shape {:?}, metadata describes {expected:?}",
            tensor.shape()
        )));
    }
    PrototypeBank::new(
        meta.channels,
        meta.category_ids,
        meta.instance_counts,
        tensor.to_vec(),
    )
}
