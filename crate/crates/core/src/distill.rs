//! Cross-domain relational prior distillation.
//!
//! The student encoder's flattened multi-scale tokens are reshaped back
//! into a [`FeaturePyramid`]. Each selected level is aligned to the
//! teacher's grid, both maps are turned into token-to-token cosine
//! [`RelationMatrix`]es with the diagonal masked, and the Smooth-ℓ1
//! discrepancy between them is summed uniformly over levels.
//!
//! Only relations are compared, never raw features, so student and
//! teacher may have different channel widths.

use std::collections::BTreeSet;
use std::fmt;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::{smooth_l1_with, AxisWeights, Reduction, Tensor};

/// Default weight of the distillation term in the combined objective.
pub const DEFAULT_LAMBDA: f64 = 1.0;
/// Default Smooth-ℓ1 knee.
pub const DEFAULT_BETA: f64 = 1.0;
/// Default distilled levels: every level of a five-level encoder pyramid.
pub const DEFAULT_LEVELS: [usize; 5] = [0, 1, 2, 3, 4];
/// Guard used when normalising token vectors.
pub const NORM_EPS: f64 = 1e-12;

pub fn default_levels() -> BTreeSet<usize> {
    DEFAULT_LEVELS.into_iter().collect()
}

/// One level of a student pyramid: a `C×H×W` map tagged with its index.
#[derive(Debug, Clone)]
pub struct FeatureLevel {
    pub index: usize,
    pub map: Tensor,
}

impl FeatureLevel {
    pub fn height(&self) -> usize {
        self.map.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.map.shape()[2]
    }
}

/// Per-image multi-scale feature maps, ordered by ascending level index.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    levels: Vec<FeatureLevel>,
}

impl FeaturePyramid {
    /// Validates that indices strictly ascend, maps are `C×H×W`, and all
    /// levels share the channel count.
    pub fn new(levels: Vec<FeatureLevel>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::contract("feature pyramid needs at least one level"));
        }
        let mut channels = None;
        for (k, level) in levels.iter().enumerate() {
            let &[c, _, _] = level.map.shape() else {
                return Err(Error::dim(format!(
                    "level {} map must be C×H×W, got {:?}",
                    level.index,
                    level.map.shape()
                )));
            };
            if *channels.get_or_insert(c) != c {
                return Err(Error::dim(format!(
                    "level {} has {c} channels, expected {}",
                    level.index,
                    channels.unwrap()
                )));
            }
            if k > 0 && levels[k - 1].index >= level.index {
                return Err(Error::contract(format!(
                    "level indices must strictly ascend, got {} after {}",
                    level.index,
                    levels[k - 1].index
                )));
            }
        }
        Ok(Self { levels })
    }

    /// Levels indexed `0..maps.len()`.
    pub fn from_maps(maps: Vec<Tensor>) -> Result<Self> {
        Self::new(
            maps.into_iter()
                .enumerate()
                .map(|(index, map)| FeatureLevel { index, map })
                .collect(),
        )
    }

    pub fn levels(&self) -> &[FeatureLevel] {
        &self.levels
    }

    pub fn level(&self, index: usize) -> Option<&FeatureLevel> {
        self.levels.iter().find(|l| l.index == index)
    }

    pub fn channels(&self) -> usize {
        self.levels[0].map.shape()[0]
    }

    pub fn level_shapes(&self) -> Vec<(usize, usize)> {
        self.levels
            .iter()
            .map(|l| (l.height(), l.width()))
            .collect()
    }

    /// Inverse of [`reconstruct_pyramid`]: `Σ H_l·W_l` tokens by `C`.
    pub fn flatten(&self) -> Result<Tensor> {
        let c = self.channels();
        let cols = self
            .levels
            .iter()
            .map(|l| l.map.reshape(&[c, l.height() * l.width()]))
            .collect::<Result<Vec<_>>>()?;
        Tensor::concat_cols(&cols)?.transpose()
    }
}

/// Splits a flat `tokens × C` encoder output into per-level `C×H×W` maps.
///
/// Tokens of level `l` are the next `H_l·W_l` rows, in row-major spatial
/// order. Levels are indexed from 0 in the order given.
pub fn reconstruct_pyramid(
    tokens: &Tensor,
    level_shapes: &[(usize, usize)],
) -> Result<FeaturePyramid> {
    let &[total, c] = tokens.shape() else {
        return Err(Error::dim(format!(
            "encoder tokens must be tokens×C, got {:?}",
            tokens.shape()
        )));
    };
    if level_shapes.is_empty() {
        return Err(Error::contract("level_shapes must not be empty"));
    }
    if let Some(&(h, w)) = level_shapes.iter().find(|&&(h, w)| h == 0 || w == 0) {
        return Err(Error::dim(format!(
            "level shape ({h}, {w}) has a zero side"
        )));
    }
    let expected: usize = level_shapes.iter().map(|&(h, w)| h * w).sum();
    if expected != total {
        return Err(Error::dim(format!(
            "level shapes {level_shapes:?} need {expected} tokens, got {total}"
        )));
    }
    let mut start = 0;
    let mut maps = Vec::with_capacity(level_shapes.len());
    for &(h, w) in level_shapes {
        let n = h * w;
        let map = tokens.narrow(start, n)?.transpose()?.reshape(&[c, h, w])?;
        maps.push(map);
        start += n;
    }
    FeaturePyramid::from_maps(maps)
}

/// Batched variant of [`reconstruct_pyramid`] for `B × tokens × C` input.
pub fn reconstruct_batch(
    tokens: &Tensor,
    level_shapes: &[(usize, usize)],
) -> Result<Vec<FeaturePyramid>> {
    let &[b, _, _] = tokens.shape() else {
        return Err(Error::dim(format!(
            "batched encoder tokens must be B×tokens×C, got {:?}",
            tokens.shape()
        )));
    };
    (0..b)
        .map(|i| reconstruct_pyramid(&tokens.index(i)?, level_shapes))
        .collect()
}

/// Frozen dense teacher features of one image.
#[derive(Debug, Clone)]
pub struct TeacherFeature {
    map: Tensor,
    pub source_tag: String,
}

impl TeacherFeature {
    /// `map` must be `C_t×H_t×W_t`. The stored copy is detached from any tape.
    pub fn new(map: Tensor, source_tag: impl Into<String>) -> Result<Self> {
        if map.ndim() != 3 {
            return Err(Error::dim(format!(
                "teacher feature must be C×H×W, got {:?}",
                map.shape()
            )));
        }
        Ok(Self {
            map: map.detach(),
            source_tag: source_tag.into(),
        })
    }

    pub fn map(&self) -> &Tensor {
        &self.map
    }

    pub fn channels(&self) -> usize {
        self.map.shape()[0]
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.map.shape()[1], self.map.shape()[2])
    }

    /// `H_t·W_t` tokens of width `C_t`, row-major over the grid.
    pub fn tokens(&self) -> Result<Tensor> {
        let (h, w) = self.grid();
        self.map.reshape(&[self.channels(), h * w])?.transpose()
    }
}

/// How a student map is brought onto the teacher grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlignMode {
    Identity,
    AdaptivePool,
    Bilinear,
}

impl fmt::Display for AlignMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AlignMode::Identity => "identity",
            AlignMode::AdaptivePool => "adaptive-pool",
            AlignMode::Bilinear => "bilinear",
        })
    }
}

/// Pooling when the source is at least as large on both axes, bilinear
/// interpolation otherwise (including mixed-aspect cases).
pub fn alignment_mode(from: (usize, usize), to: (usize, usize)) -> AlignMode {
    if from == to {
        AlignMode::Identity
    } else if from.0 >= to.0 && from.1 >= to.1 {
        AlignMode::AdaptivePool
    } else {
        AlignMode::Bilinear
    }
}

/// Adaptive-average-pooling weights: output `i` averages input cells
/// `[⌊i·n/m⌋, ⌈(i+1)·n/m⌉)`.
pub fn adaptive_pool_weights(input: usize, output: usize) -> Vec<AxisWeights> {
    (0..output)
        .map(|i| {
            let start = i * input / output;
            let end = ((i + 1) * input).div_ceil(output);
            let w = 1.0 / (end - start) as f64;
            (start..end).map(|k| (k, w)).collect()
        })
        .collect()
}

/// Bilinear weights with half-pixel centres (`align_corners = false`);
/// source coordinates below zero clamp to the first cell.
pub fn bilinear_weights(input: usize, output: usize) -> Vec<AxisWeights> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let frac = src - i0 as f64;
            if i0 == i1 || frac == 0.0 {
                vec![(i0, 1.0)]
            } else {
                vec![(i0, 1.0 - frac), (i1, frac)]
            }
        })
        .collect()
}

/// Resamples a `C×H×W` map onto `target = (H_t, W_t)`.
pub fn align_resolution(x: &Tensor, target: (usize, usize)) -> Result<Tensor> {
    let &[_, h, w] = x.shape() else {
        return Err(Error::dim(format!(
            "align_resolution expects C×H×W, got {:?}",
            x.shape()
        )));
    };
    let (ht, wt) = target;
    if ht == 0 || wt == 0 {
        return Err(Error::dim(format!(
            "alignment target {target:?} has a zero side"
        )));
    }
    match alignment_mode((h, w), target) {
        AlignMode::Identity => Ok(x.clone()),
        AlignMode::AdaptivePool => {
            x.separable_resample(&adaptive_pool_weights(h, ht), &adaptive_pool_weights(w, wt))
        }
        AlignMode::Bilinear => {
            x.separable_resample(&bilinear_weights(h, ht), &bilinear_weights(w, wt))
        }
    }
}

/// `N×N` token cosine similarities of one map with the diagonal zeroed.
#[derive(Debug, Clone)]
pub struct RelationMatrix {
    values: Tensor,
}

impl RelationMatrix {
    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn tokens(&self) -> usize {
        self.values.shape()[0]
    }

    /// Always true: construction masks the diagonal.
    pub fn mask_diagonal(&self) -> bool {
        true
    }
}

/// Flattens `C×H×W` to `C×N`, ℓ2-normalises each token, forms `ZᵀZ` and
/// zeroes the diagonal.
pub fn relation_matrix(x: &Tensor) -> Result<RelationMatrix> {
    let &[c, h, w] = x.shape() else {
        return Err(Error::dim(format!(
            "relation_matrix expects C×H×W, got {:?}",
            x.shape()
        )));
    };
    let z = x.reshape(&[c, h * w])?.l2_normalize_columns(NORM_EPS)?;
    let s = z.transpose()?.matmul(&z)?.mask_diagonal()?;
    Ok(RelationMatrix { values: s })
}

/// Smooth-ℓ1 over off-diagonal entries, averaged over the `N(N−1)` of them.
/// A single-token grid has no relations and contributes zero.
pub fn relation_discrepancy(
    student: &RelationMatrix,
    teacher: &RelationMatrix,
    beta: f64,
) -> Result<Tensor> {
    if student.values.shape() != teacher.values.shape() {
        return Err(Error::dim(format!(
            "relation matrices {:?} and {:?} differ in size",
            student.values.shape(),
            teacher.values.shape()
        )));
    }
    let n = student.tokens();
    let summed = smooth_l1_with(&student.values, &teacher.values, beta, Reduction::Sum)?;
    if n < 2 {
        return Ok(summed.scale(0.0));
    }
    Ok(summed.scale(1.0 / (n * (n - 1)) as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LevelLoss {
    pub level: usize,
    pub value: f64,
    pub mode: AlignMode,
}

/// Distillation loss with its per-level breakdown.
#[derive(Debug, Clone)]
pub struct CsrpdLoss {
    /// Differentiable scalar, attached to the student features.
    pub total: Tensor,
    pub per_level: Vec<LevelLoss>,
}

impl CsrpdLoss {
    pub fn value(&self) -> f64 {
        self.total.data()[0]
    }
}

/// Relational distillation loss of one image.
///
/// For every selected level the student map is aligned to the teacher
/// grid; per-level discrepancies are summed with uniform weight. The
/// teacher relation matrix is built once and treated as a constant.
pub fn csrpd_loss(
    student: &FeaturePyramid,
    teacher: &TeacherFeature,
    levels: &BTreeSet<usize>,
    beta: f64,
) -> Result<CsrpdLoss> {
    if levels.is_empty() {
        return Err(Error::contract("distillation level set is empty"));
    }
    if let Some(missing) = levels.iter().find(|&&l| student.level(l).is_none()) {
        let have: Vec<usize> = student.levels().iter().map(|l| l.index).collect();
        return Err(Error::Lookup(format!(
            "level {missing} not in student pyramid (levels {have:?})"
        )));
    }
    let grid = teacher.grid();
    let teacher_rel = relation_matrix(teacher.map())?;
    let mut total: Option<Tensor> = None;
    let mut per_level = Vec::with_capacity(levels.len());
    for &l in levels {
        let level = student.level(l).expect("checked above");
        let mode = alignment_mode((level.height(), level.width()), grid);
        let aligned = align_resolution(&level.map, grid)?;
        let term = relation_discrepancy(&relation_matrix(&aligned)?, &teacher_rel, beta)?;
        per_level.push(LevelLoss {
            level: l,
            value: term.data()[0],
            mode,
        });
        total = Some(match total {
            Some(acc) => acc.add(&term)?,
            None => term,
        });
    }
    Ok(CsrpdLoss {
        total: total.expect("non-empty level set"),
        per_level,
    })
}

/// Batch-averaged [`csrpd_loss`]; one teacher per student pyramid.
pub fn csrpd_loss_batch(
    students: &[FeaturePyramid],
    teachers: &[TeacherFeature],
    levels: &BTreeSet<usize>,
    beta: f64,
) -> Result<CsrpdLoss> {
    if students.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    if students.len() != teachers.len() {
        return Err(Error::dim(format!(
            "{} student pyramids but {} teacher maps",
            students.len(),
            teachers.len()
        )));
    }
    let inv_b = 1.0 / students.len() as f64;
    let mut total: Option<Tensor> = None;
    let mut per_level: Vec<LevelLoss> = Vec::new();
    for (s, t) in students.iter().zip(teachers) {
        let img = csrpd_loss(s, t, levels, beta)?;
        let scaled = img.total.scale(inv_b);
        total = Some(match total {
            Some(acc) => acc.add(&scaled)?,
            None => scaled,
        });
        if per_level.is_empty() {
            per_level = img
                .per_level
                .iter()
                .map(|l| LevelLoss { value: 0.0, ..*l })
                .collect();
        }
        for (acc, l) in per_level.iter_mut().zip(&img.per_level) {
            acc.value += l.value * inv_b;
        }
    }
    Ok(CsrpdLoss {
        total: total.expect("non-empty batch"),
        per_level,
    })
}

/// `det_loss + lambda · distill_loss`.
pub fn combine_losses(det_loss: &Tensor, distill_loss: &Tensor, lambda: f64) -> Result<Tensor> {
    if lambda.is_nan() || lambda < 0.0 || !lambda.is_finite() {
        return Err(Error::contract(format!(
            "lambda must be a finite value ≥ 0, got {lambda}"
        )));
    }
    if det_loss.numel() != 1 || distill_loss.numel() != 1 {
        return Err(Error::contract("combine_losses expects scalar losses"));
    }
    det_loss
        .reshape(&[])?
        .add(&distill_loss.reshape(&[])?.scale(lambda))
}
