//! Prior-guided query enhancement.
//!
//! Decoder queries first attend to the projected category prototypes
//! (semantic identity stage), then to the projected, flattened teacher
//! tokens (spatial grounding stage). Each stage is a residual multi-head
//! cross-attention followed by layer normalisation:
//!
//! ```text
//! Q_s = LN(Q   + Attn(Q,   W_p·P, W_p·P))
//! Q_p = LN(Q_s + Attn(Q_s, W_t·T, W_t·T))
//! ```
//!
//! No positional encoding is added to the teacher tokens.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distill::TeacherFeature;
use crate::error::{Error, Result};
use crate::io::{read_json, read_tensor, write_json, write_tensor};
use crate::prototype::PrototypeBank;
use crate::tensor::Tensor;

pub const DEFAULT_HEADS: usize = 8;
pub const LN_EPS: f64 = 1e-5;

/// Affine map `x·W + b` with `W` of shape `in×out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Weights and bias uniform in `±1/√in`.
    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        Self {
            weight: Tensor::rand_uniform(&[input, output], -bound, bound, rng).into_leaf(),
            bias: Tensor::rand_uniform(&[output], -bound, bound, rng).into_leaf(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.weight)?.add_row(&self.bias)
    }

    fn check(&self, name: &str, input: usize, output: usize) -> Result<()> {
        if self.weight.shape() != [input, output] || self.bias.shape() != [output] {
            return Err(Error::dim(format!(
                "{name}: weight {:?} / bias {:?}, expected [{input}, {output}] / [{output}]",
                self.weight.shape(),
                self.bias.shape()
            )));
        }
        Ok(())
    }
}

/// Residual multi-head cross-attention block with post-layer-norm.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    heads: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub norm_gain: Tensor,
    pub norm_bias: Tensor,
}

/// Attention result before the residual connection.
#[derive(Debug, Clone)]
pub struct Attended {
    /// `n×d` output-projected heads.
    pub output: Tensor,
    /// One `n×m` row-stochastic weight matrix per head.
    pub weights: Vec<Tensor>,
}

impl AttentionBlock {
    pub fn new<R: Rng + ?Sized>(dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        check_heads(dim, heads)?;
        Ok(Self {
            heads,
            query: Linear::init(dim, dim, rng),
            key: Linear::init(dim, dim, rng),
            value: Linear::init(dim, dim, rng),
            output: Linear::init(dim, dim, rng),
            norm_gain: Tensor::ones(&[dim]).into_leaf(),
            norm_bias: Tensor::zeros(&[dim]).into_leaf(),
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn dim(&self) -> usize {
        self.query.input_dim()
    }

    fn validate(&self, name: &str) -> Result<()> {
        let d = self.dim();
        check_heads(d, self.heads)?;
        for (part, lin) in [
            ("query", &self.query),
            ("key", &self.key),
            ("value", &self.value),
            ("output", &self.output),
        ] {
            lin.check(&format!("{name}.{part}"), d, d)?;
        }
        if self.norm_gain.shape() != [d] || self.norm_bias.shape() != [d] {
            return Err(Error::dim(format!(
                "{name}.norm parameters do not have width {d}"
            )));
        }
        Ok(())
    }

    /// Scaled dot-product attention of `q` (`n×d`) over `kv` (`m×d`),
    /// heads concatenated and output-projected.
    pub fn attend(&self, q: &Tensor, kv: &Tensor) -> Result<Attended> {
        let d = self.dim();
        for (what, t) in [("queries", q), ("keys/values", kv)] {
            if t.ndim() != 2 || t.shape()[1] != d {
                return Err(Error::dim(format!(
                    "{what} of shape {:?} do not have width {d}",
                    t.shape()
                )));
            }
        }
        let qp = self.query.forward(q)?;
        let kp = self.key.forward(kv)?;
        let vp = self.value.forward(kv)?;
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = qp.narrow_cols(h * dh, dh)?;
            let kh = kp.narrow_cols(h * dh, dh)?;
            let vh = vp.narrow_cols(h * dh, dh)?;
            let attn = qh.matmul(&kh.transpose()?)?.scale(scale).softmax_rows()?;
            outs.push(attn.matmul(&vh)?);
            weights.push(attn);
        }
        let merged = Tensor::concat_cols(&outs)?;
        Ok(Attended {
            output: self.output.forward(&merged)?,
            weights,
        })
    }

    /// `LN(q + Attn(q, kv, kv))`.
    pub fn forward(&self, q: &Tensor, kv: &Tensor) -> Result<Tensor> {
        let attended = self.attend(q, kv)?;
        q.add(&attended.output)?
            .layer_norm(&self.norm_gain, &self.norm_bias, LN_EPS)
    }

    fn tensors(&self) -> [Tensor; 10] {
        [
            self.query.weight.clone(),
            self.query.bias.clone(),
            self.key.weight.clone(),
            self.key.bias.clone(),
            self.value.weight.clone(),
            self.value.bias.clone(),
            self.output.weight.clone(),
            self.output.bias.clone(),
            self.norm_gain.clone(),
            self.norm_bias.clone(),
        ]
    }

    fn from_tensors(heads: usize, t: &[Tensor]) -> Self {
        let lin = |i: usize| Linear {
            weight: t[i].clone(),
            bias: t[i + 1].clone(),
        };
        Self {
            heads,
            query: lin(0),
            key: lin(2),
            value: lin(4),
            output: lin(6),
            norm_gain: t[8].clone(),
            norm_bias: t[9].clone(),
        }
    }

    /// Zeroes the value and output maps, leaving only the residual path.
    pub fn zero_value_output(&mut self) {
        let d = self.dim();
        self.value = Linear {
            weight: Tensor::zeros(&[d, d]).into_leaf(),
            bias: Tensor::zeros(&[d]).into_leaf(),
        };
        self.output = Linear {
            weight: Tensor::zeros(&[d, d]).into_leaf(),
            bias: Tensor::zeros(&[d]).into_leaf(),
        };
    }
}

fn check_heads(dim: usize, heads: usize) -> Result<()> {
    if heads == 0 || dim == 0 || !dim.is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "query width {dim} is not divisible by head count {heads}"
        )));
    }
    Ok(())
}

/// Attention term only (no residual, no normalisation).
pub fn cross_attention(q: &Tensor, kv: &Tensor, block: &AttentionBlock) -> Result<Tensor> {
    Ok(block.attend(q, kv)?.output)
}

/// Pipeline position of a query set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Initial,
    AfterSiga,
    AfterCsga,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Initial => "initial",
            Stage::AfterSiga => "after_siga",
            Stage::AfterCsga => "after_csga",
        })
    }
}

/// `N_q×C_q` decoder queries tagged with their pipeline stage.
#[derive(Debug, Clone)]
pub struct QuerySet {
    queries: Tensor,
    stage: Stage,
}

impl QuerySet {
    /// Initial queries.
    pub fn new(queries: Tensor) -> Result<Self> {
        if queries.ndim() != 2 {
            return Err(Error::dim(format!(
                "queries must be N_q×C_q, got {:?}",
                queries.shape()
            )));
        }
        Ok(Self {
            queries,
            stage: Stage::Initial,
        })
    }

    pub fn queries(&self) -> &Tensor {
        &self.queries
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn into_tensor(self) -> Tensor {
        self.queries
    }

    fn expect_stage(&self, stage: Stage, op: &str) -> Result<()> {
        if self.stage != stage {
            return Err(Error::contract(format!(
                "{op} expects {stage} queries, got {}",
                self.stage
            )));
        }
        Ok(())
    }
}

/// Learnable parameters of both enhancement stages.
#[derive(Debug, Clone)]
pub struct EnhancerParams {
    /// Prototype projection `C_t → C_q`.
    pub proto_projection: Linear,
    /// Teacher token projection `C_t → C_q`.
    pub token_projection: Linear,
    pub siga: AttentionBlock,
    pub csga: AttentionBlock,
}

const BLOCK_PARTS: [&str; 10] = [
    "query.weight",
    "query.bias",
    "key.weight",
    "key.bias",
    "value.weight",
    "value.bias",
    "output.weight",
    "output.bias",
    "norm.gain",
    "norm.bias",
];

impl EnhancerParams {
    /// Seeded initialisation; fails if `query_dim` is not divisible by `heads`.
    pub fn init(teacher_dim: usize, query_dim: usize, heads: usize, seed: u64) -> Result<Self> {
        check_heads(query_dim, heads)?;
        if teacher_dim == 0 {
            return Err(Error::Config("teacher width is zero".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            proto_projection: Linear::init(teacher_dim, query_dim, &mut rng),
            token_projection: Linear::init(teacher_dim, query_dim, &mut rng),
            siga: AttentionBlock::new(query_dim, heads, &mut rng)?,
            csga: AttentionBlock::new(query_dim, heads, &mut rng)?,
        })
    }

    pub fn heads(&self) -> usize {
        self.siga.heads
    }

    pub fn query_dim(&self) -> usize {
        self.siga.dim()
    }

    pub fn teacher_dim(&self) -> usize {
        self.proto_projection.input_dim()
    }

    /// Every parameter tensor with a stable dotted name.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![
            (
                "proto_projection.weight".to_string(),
                self.proto_projection.weight.clone(),
            ),
            (
                "proto_projection.bias".to_string(),
                self.proto_projection.bias.clone(),
            ),
            (
                "token_projection.weight".to_string(),
                self.token_projection.weight.clone(),
            ),
            (
                "token_projection.bias".to_string(),
                self.token_projection.bias.clone(),
            ),
        ];
        for (block, b) in [("siga", &self.siga), ("csga", &self.csga)] {
            for (part, t) in BLOCK_PARTS.iter().zip(b.tensors()) {
                out.push((format!("{block}.{part}"), t));
            }
        }
        out
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }

    /// Same layout as `self` with tensors replaced, in [`Self::tensors`] order.
    pub fn with_tensors(&self, tensors: &[Tensor]) -> Result<Self> {
        if tensors.len() != 24 {
            return Err(Error::contract(format!(
                "expected 24 parameter tensors, got {}",
                tensors.len()
            )));
        }
        let params = Self {
            proto_projection: Linear {
                weight: tensors[0].clone(),
                bias: tensors[1].clone(),
            },
            token_projection: Linear {
                weight: tensors[2].clone(),
                bias: tensors[3].clone(),
            },
            siga: AttentionBlock::from_tensors(self.heads(), &tensors[4..14]),
            csga: AttentionBlock::from_tensors(self.heads(), &tensors[14..24]),
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        let (ct, cq) = (self.teacher_dim(), self.query_dim());
        self.proto_projection.check("proto_projection", ct, cq)?;
        self.token_projection.check("token_projection", ct, cq)?;
        self.siga.validate("siga")?;
        self.csga.validate("csga")?;
        if self.csga.dim() != cq || self.csga.heads != self.siga.heads {
            return Err(Error::Config(
                "siga and csga blocks disagree in width or heads".into(),
            ));
        }
        Ok(())
    }

    pub fn zero_grad(&self) {
        self.tensors().iter().for_each(Tensor::zero_grad);
    }

    /// Writes one tensor file per parameter plus `manifest.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut entries = Vec::new();
        for (name, t) in self.named_tensors() {
            let file = format!("{name}.vfmt");
            write_tensor(dir.join(&file), &t)?;
            entries.push(ManifestTensor {
                name,
                file,
                shape: t.shape().to_vec(),
            });
        }
        write_json(
            dir.join(PARAMS_MANIFEST),
            &ParamsManifest {
                format_version: PARAMS_FORMAT_VERSION,
                heads: self.heads(),
                teacher_dim: self.teacher_dim(),
                query_dim: self.query_dim(),
                tensors: entries,
            },
        )
    }

    /// Loads parameters written by [`Self::save`]; all tensors become
    /// grad-requiring leaves.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: ParamsManifest = read_json(dir.join(PARAMS_MANIFEST))?;
        if manifest.format_version != PARAMS_FORMAT_VERSION {
            return Err(Error::Version {
                found: manifest.format_version,
                expected: PARAMS_FORMAT_VERSION,
            });
        }
        let template = Self::init(manifest.teacher_dim, manifest.query_dim, manifest.heads, 0)?;
        let mut by_name: BTreeMap<&str, &ManifestTensor> = BTreeMap::new();
        for e in &manifest.tensors {
            by_name.insert(e.name.as_str(), e);
        }
        let mut tensors = Vec::with_capacity(24);
        for (name, expected) in template.named_tensors() {
            let entry = by_name
                .get(name.as_str())
                .ok_or_else(|| Error::Lookup(format!("parameter {name} missing from manifest")))?;
            let t = read_tensor(dir.join(&entry.file))?;
            if t.shape() != expected.shape() {
                return Err(Error::dim(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    expected.shape()
                )));
            }
            tensors.push(t.into_leaf());
        }
        template.with_tensors(&tensors)
    }
}

pub const PARAMS_MANIFEST: &str = "manifest.json";
pub const PARAMS_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ManifestTensor {
    name: String,
    file: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamsManifest {
    format_version: u32,
    heads: usize,
    teacher_dim: usize,
    query_dim: usize,
    tensors: Vec<ManifestTensor>,
}

fn check_width(t: &Tensor, expected: usize, what: &str) -> Result<()> {
    if t.ndim() != 2 || t.shape()[1] != expected {
        return Err(Error::dim(format!(
            "{what} of shape {:?} do not match projection input width {expected}",
            t.shape()
        )));
    }
    Ok(())
}

/// Semantic stage over an explicit `K×C_t` prototype matrix.
pub fn siga_with_prototypes(
    q: &QuerySet,
    prototypes: &Tensor,
    params: &EnhancerParams,
) -> Result<QuerySet> {
    q.expect_stage(Stage::Initial, "siga")?;
    check_width(prototypes, params.teacher_dim(), "prototypes")?;
    let projected = params.proto_projection.forward(prototypes)?;
    Ok(QuerySet {
        queries: params.siga.forward(&q.queries, &projected)?,
        stage: Stage::AfterSiga,
    })
}

/// Queries attend to the projected category prototypes.
pub fn siga(q: &QuerySet, bank: &PrototypeBank, params: &EnhancerParams) -> Result<QuerySet> {
    if bank.channels() != params.teacher_dim() {
        return Err(Error::dim(format!(
            "bank width {} does not match prototype projection input {}",
            bank.channels(),
            params.teacher_dim()
        )));
    }
    siga_with_prototypes(q, &bank.prototypes()?, params)
}

/// Grounding stage over explicit `N×C_t` teacher tokens.
pub fn csga_with_tokens(
    q: &QuerySet,
    tokens: &Tensor,
    params: &EnhancerParams,
) -> Result<QuerySet> {
    q.expect_stage(Stage::AfterSiga, "csga")?;
    check_width(tokens, params.teacher_dim(), "teacher tokens")?;
    let projected = params.token_projection.forward(tokens)?;
    Ok(QuerySet {
        queries: params.csga.forward(&q.queries, &projected)?,
        stage: Stage::AfterCsga,
    })
}

/// Queries attend to the flattened, projected teacher map.
pub fn csga(q: &QuerySet, teacher: &TeacherFeature, params: &EnhancerParams) -> Result<QuerySet> {
    if teacher.channels() != params.teacher_dim() {
        return Err(Error::dim(format!(
            "teacher width {} does not match token projection input {}",
            teacher.channels(),
            params.teacher_dim()
        )));
    }
    csga_with_tokens(q, &teacher.tokens()?, params)
}

/// Semantic stage followed by the grounding stage; the order is fixed.
pub fn scpqe(
    q: &QuerySet,
    bank: &PrototypeBank,
    teacher: &TeacherFeature,
    params: &EnhancerParams,
) -> Result<QuerySet> {
    csga(&siga(q, bank, params)?, teacher, params)
}
