//! Dual-branch attention mixing with LoRA-routed QKV projections.
//!
//! One attention layer, forward only. The latent sequence is split into a
//! background branch `[C_T, X, C_bg]` and an object branch `[C_T, X, C_obj]`.
//! Each branch is projected and attended separately; the outputs are then
//! merged: text tokens are averaged, noisy-image tokens inside the box mask
//! come from the object branch and the rest from the background branch, and
//! both condition blocks pass through.
//!
//! Token routing per block:
//!
//! | block   | projection                  |
//! |---------|-----------------------------|
//! | `C_T`   | base + `both` delta         |
//! | `X`     | base + `both` delta         |
//! | `C_bg`  | base + `inp` delta          |
//! | `C_obj` | base + `obj` delta          |

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use thiserror::Error;

pub type Matrix = DMatrix<f64>;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OinError {
    #[error("shape mismatch in {context}: {detail}")]
    Shape {
        context: &'static str,
        detail: String,
    },
    #[error("{block:?} block cannot feed the {branch:?} branch")]
    Routing { block: Block, branch: Branch },
    #[error("mask index {index} out of range for {len} noisy tokens")]
    MaskIndex { index: usize, len: usize },
    #[error("tensor file: {0}")]
    TensorFormat(String),
}

fn shape_err(context: &'static str, detail: impl Into<String>) -> OinError {
    OinError::Shape {
        context,
        detail: detail.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Block {
    Text,
    Noisy,
    BgCond,
    ObjCond,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Branch {
    Background,
    Object,
}

impl Branch {
    pub fn condition_block(self) -> Block {
        match self {
            Branch::Background => Block::BgCond,
            Branch::Object => Block::ObjCond,
        }
    }
}

/// `L x d` token block.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub block: Block,
    pub tokens: Matrix,
}

impl TokenSequence {
    pub fn new(block: Block, tokens: Matrix) -> Result<Self, OinError> {
        if tokens.nrows() == 0 {
            return Err(shape_err(
                "token sequence",
                format!("{block:?} block has no tokens"),
            ));
        }
        Ok(Self { block, tokens })
    }

    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.ncols()
    }
}

/// Low-rank update `up * down` with `down: r x d` and `up: d_out x r`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraDelta {
    pub down: Matrix,
    pub up: Matrix,
}

impl LoraDelta {
    pub fn new(down: Matrix, up: Matrix) -> Result<Self, OinError> {
        if down.nrows() == 0 || up.ncols() != down.nrows() {
            return Err(shape_err(
                "lora delta",
                format!(
                    "down is {}x{}, up is {}x{}",
                    down.nrows(),
                    down.ncols(),
                    up.nrows(),
                    up.ncols()
                ),
            ));
        }
        Ok(Self { down, up })
    }

    pub fn rank(&self) -> usize {
        self.down.nrows()
    }

    pub fn product(&self) -> Matrix {
        &self.up * &self.down
    }
}

/// Deltas for the query, key and value projections of one weight set.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct QkvDelta {
    pub q: Option<LoraDelta>,
    pub k: Option<LoraDelta>,
    pub v: Option<LoraDelta>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionWeights {
    /// Frozen `d_out x d` projections.
    pub base_q: Matrix,
    pub base_k: Matrix,
    pub base_v: Matrix,
    /// Shared by text and noisy tokens in both branches.
    pub both: QkvDelta,
    /// Background-condition (inpainting) tokens.
    pub inp: QkvDelta,
    /// Object-condition tokens.
    pub obj: QkvDelta,
}

impl ProjectionWeights {
    pub fn new(base_q: Matrix, base_k: Matrix, base_v: Matrix) -> Result<Self, OinError> {
        let shape = base_q.shape();
        if base_k.shape() != shape || base_v.shape() != shape {
            return Err(shape_err(
                "projection weights",
                format!(
                    "q {:?}, k {:?}, v {:?}",
                    shape,
                    base_k.shape(),
                    base_v.shape()
                ),
            ));
        }
        Ok(Self {
            base_q,
            base_k,
            base_v,
            both: QkvDelta::default(),
            inp: QkvDelta::default(),
            obj: QkvDelta::default(),
        })
    }

    pub fn model_dim(&self) -> usize {
        self.base_q.ncols()
    }

    pub fn head_dim(&self) -> usize {
        self.base_q.nrows()
    }

    fn deltas_for(&self, block: Block) -> &QkvDelta {
        match block {
            Block::Text | Block::Noisy => &self.both,
            Block::BgCond => &self.inp,
            Block::ObjCond => &self.obj,
        }
    }
}

/// Settings for one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct MixConfig {
    pub d: usize,
    /// Key dimension used in the `1/sqrt(d_out)` logit scale.
    pub d_out: usize,
    /// Indices into the noisy block taken from the object branch.
    pub token_mask: BTreeSet<usize>,
}

/// `base + up * down`, or `base` when the delta is absent.
pub fn lora_apply(base: &Matrix, delta: Option<&LoraDelta>) -> Result<Matrix, OinError> {
    let Some(delta) = delta else {
        return Ok(base.clone());
    };
    if delta.up.nrows() != base.nrows()
        || delta.down.ncols() != base.ncols()
        || delta.up.ncols() != delta.down.nrows()
    {
        return Err(shape_err(
            "lora_apply",
            format!(
                "base {}x{}, up {}x{}, down {}x{}",
                base.nrows(),
                base.ncols(),
                delta.up.nrows(),
                delta.up.ncols(),
                delta.down.nrows(),
                delta.down.ncols()
            ),
        ));
    }
    Ok(base + delta.product())
}

/// Per-token projections of one branch, with block lengths for re-splitting.
#[derive(Debug, Clone, PartialEq)]
pub struct Qkv {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    /// Token counts of `[C_T, X, C_cond]`.
    pub lengths: [usize; 3],
    pub branch: Branch,
}

fn project_block(
    seq: &TokenSequence,
    weights: &ProjectionWeights,
) -> Result<[Matrix; 3], OinError> {
    if seq.dim() != weights.model_dim() {
        return Err(shape_err(
            "project_branch",
            format!(
                "{:?} tokens have dim {}, weights expect {}",
                seq.block,
                seq.dim(),
                weights.model_dim()
            ),
        ));
    }
    let deltas = weights.deltas_for(seq.block);
    let wq = lora_apply(&weights.base_q, deltas.q.as_ref())?;
    let wk = lora_apply(&weights.base_k, deltas.k.as_ref())?;
    let wv = lora_apply(&weights.base_v, deltas.v.as_ref())?;
    // rows are tokens: (L x d) * (d x d_out)
    Ok([
        &seq.tokens * wq.transpose(),
        &seq.tokens * wk.transpose(),
        &seq.tokens * wv.transpose(),
    ])
}

fn stack(parts: &[&Matrix]) -> Matrix {
    let cols = parts[0].ncols();
    let rows: usize = parts.iter().map(|m| m.nrows()).sum();
    let mut out = Matrix::zeros(rows, cols);
    let mut r = 0;
    for m in parts {
        out.rows_mut(r, m.nrows()).copy_from(*m);
        r += m.nrows();
    }
    out
}

/// Projects `[C_T, X, C_cond]` for one branch, routing each block to its
/// weight set.
pub fn project_branch(
    text: &TokenSequence,
    noisy: &TokenSequence,
    condition: &TokenSequence,
    weights: &ProjectionWeights,
    branch: Branch,
) -> Result<Qkv, OinError> {
    for (seq, expected) in [(text, Block::Text), (noisy, Block::Noisy)] {
        if seq.block != expected {
            return Err(OinError::Routing {
                block: seq.block,
                branch,
            });
        }
    }
    if condition.block != branch.condition_block() {
        return Err(OinError::Routing {
            block: condition.block,
            branch,
        });
    }
    let [tq, tk, tv] = project_block(text, weights)?;
    let [xq, xk, xv] = project_block(noisy, weights)?;
    let [cq, ck, cv] = project_block(condition, weights)?;
    Ok(Qkv {
        q: stack(&[&tq, &xq, &cq]),
        k: stack(&[&tk, &xk, &ck]),
        v: stack(&[&tv, &xv, &cv]),
        lengths: [text.len(), noisy.len(), condition.len()],
        branch,
    })
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for mut row in out.row_iter_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.apply(|x| *x = (*x - max).exp());
        let sum: f64 = row.iter().sum();
        row /= sum;
    }
    out
}

/// Attention output of one branch, split back into its three blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchOutput {
    pub text: Matrix,
    pub noisy: Matrix,
    pub condition: Matrix,
    pub branch: Branch,
}

/// Full (non-causal) scaled dot-product attention over the branch sequence.
pub fn attention_branch(qkv: &Qkv, scale_dim: usize) -> Result<BranchOutput, OinError> {
    let n = qkv.q.nrows();
    if qkv.k.nrows() != n || qkv.v.nrows() != n || qkv.lengths.iter().sum::<usize>() != n {
        return Err(shape_err(
            "attention_branch",
            format!(
                "q has {n} rows, k {}, v {}, blocks {:?}",
                qkv.k.nrows(),
                qkv.v.nrows(),
                qkv.lengths
            ),
        ));
    }
    if qkv.q.ncols() != qkv.k.ncols() {
        return Err(shape_err(
            "attention_branch",
            format!(
                "q width {} differs from k width {}",
                qkv.q.ncols(),
                qkv.k.ncols()
            ),
        ));
    }
    if scale_dim == 0 {
        return Err(shape_err("attention_branch", "scale dimension is zero"));
    }
    let logits = (&qkv.q * qkv.k.transpose()) / (scale_dim as f64).sqrt();
    let out = softmax_rows(&logits) * &qkv.v;
    let [lt, lx, lc] = qkv.lengths;
    Ok(BranchOutput {
        text: out.rows(0, lt).into_owned(),
        noisy: out.rows(lt, lx).into_owned(),
        condition: out.rows(lt + lx, lc).into_owned(),
        branch: qkv.branch,
    })
}

/// Output blocks `[C_T_out, X_out, C_bg, C_obj]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedOutput {
    pub text: Matrix,
    pub noisy: Matrix,
    pub background_condition: Matrix,
    pub object_condition: Matrix,
}

/// Averages text tokens, takes masked noisy tokens from the object branch and
/// passes both condition blocks through.
pub fn mix_outputs(
    background: &BranchOutput,
    object: &BranchOutput,
    mask: &BTreeSet<usize>,
) -> Result<MixedOutput, OinError> {
    if background.branch != Branch::Background || object.branch != Branch::Object {
        return Err(OinError::Routing {
            block: Block::Noisy,
            branch: background.branch,
        });
    }
    if background.noisy.shape() != object.noisy.shape() {
        return Err(shape_err(
            "mix_outputs",
            format!(
                "X1 {:?} vs X2 {:?}",
                background.noisy.shape(),
                object.noisy.shape()
            ),
        ));
    }
    if background.text.shape() != object.text.shape() {
        return Err(shape_err(
            "mix_outputs",
            format!(
                "C_T1 {:?} vs C_T2 {:?}",
                background.text.shape(),
                object.text.shape()
            ),
        ));
    }
    let len = background.noisy.nrows();
    if let Some(&index) = mask.iter().find(|i| **i >= len) {
        return Err(OinError::MaskIndex { index, len });
    }
    let text = (&background.text + &object.text) / 2.0;
    let mut noisy = background.noisy.clone();
    for &i in mask {
        noisy.set_row(i, &object.noisy.row(i));
    }
    Ok(MixedOutput {
        text,
        noisy,
        background_condition: background.condition.clone(),
        object_condition: object.condition.clone(),
    })
}

/// One mixed attention layer.
pub fn oin_forward(
    text: &TokenSequence,
    noisy: &TokenSequence,
    background_condition: &TokenSequence,
    object_condition: &TokenSequence,
    weights: &ProjectionWeights,
    cfg: &MixConfig,
) -> Result<MixedOutput, OinError> {
    if weights.model_dim() != cfg.d || weights.head_dim() != cfg.d_out {
        return Err(shape_err(
            "oin_forward",
            format!(
                "weights are {}x{}, config says d_out={} d={}",
                weights.head_dim(),
                weights.model_dim(),
                cfg.d_out,
                cfg.d
            ),
        ));
    }
    if let Some(&index) = cfg.token_mask.iter().find(|i| **i >= noisy.len()) {
        return Err(OinError::MaskIndex {
            index,
            len: noisy.len(),
        });
    }
    let qkv_bg = project_branch(
        text,
        noisy,
        background_condition,
        weights,
        Branch::Background,
    )?;
    let qkv_obj = project_branch(text, noisy, object_condition, weights, Branch::Object)?;
    let out_bg = attention_branch(&qkv_bg, cfg.d_out)?;
    let out_obj = attention_branch(&qkv_obj, cfg.d_out)?;
    mix_outputs(&out_bg, &out_obj, &cfg.token_mask)
}

// ---------------------------------------------------------------------------
// Tensor files
// ---------------------------------------------------------------------------

/// Magic bytes at the start of a tensor file.
pub const TENSOR_MAGIC: &[u8; 4] = b"LCT1";

/// Encodes named 2-D tensors.
///
/// Layout (all integers little-endian): magic, `u32` count, then per tensor
/// `u32` name length, UTF-8 name, `u32` rank (always 2), `u64` per dimension,
/// and the row-major `f64` data.
pub fn write_tensors(tensors: &[(&str, &Matrix)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, m) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&2u32.to_le_bytes());
        out.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
        out.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                out.extend_from_slice(&m[(r, c)].to_le_bytes());
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], OinError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.bytes.len())
            .ok_or_else(|| OinError::TensorFormat(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, OinError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, OinError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn read_tensors(bytes: &[u8]) -> Result<Vec<(String, Matrix)>, OinError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != TENSOR_MAGIC {
        return Err(OinError::TensorFormat("bad magic".into()));
    }
    let count = r.u32()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| OinError::TensorFormat(format!("tensor name: {e}")))?
            .to_string();
        let rank = r.u32()?;
        if rank != 2 {
            return Err(OinError::TensorFormat(format!(
                "{name}: rank {rank}, expected 2"
            )));
        }
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        let n = rows
            .checked_mul(cols)
            .filter(|n| n.checked_mul(8).is_some_and(|b| b <= bytes.len()))
            .ok_or_else(|| {
                OinError::TensorFormat(format!("{name}: implausible shape {rows}x{cols}"))
            })?;
        let data = r.take(n * 8)?;
        let values = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        out.push((name, Matrix::from_row_iterator(rows, cols, values)));
    }
    if r.pos != bytes.len() {
        return Err(OinError::TensorFormat(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(out)
}

impl ProjectionWeights {
    /// Flattens into named tensors: `base.q`, `both.q.down`, `both.q.up`, ...
    pub fn to_tensor_bytes(&self) -> Vec<u8> {
        let mut named: Vec<(String, &Matrix)> = vec![
            ("base.q".into(), &self.base_q),
            ("base.k".into(), &self.base_k),
            ("base.v".into(), &self.base_v),
        ];
        for (set, deltas) in [("both", &self.both), ("inp", &self.inp), ("obj", &self.obj)] {
            for (p, d) in [("q", &deltas.q), ("k", &deltas.k), ("v", &deltas.v)] {
                if let Some(d) = d {
                    named.push((format!("{set}.{p}.down"), &d.down));
                    named.push((format!("{set}.{p}.up"), &d.up));
                }
            }
        }
        let refs: Vec<(&str, &Matrix)> = named.iter().map(|(n, m)| (n.as_str(), *m)).collect();
        write_tensors(&refs)
    }

    pub fn from_tensor_bytes(bytes: &[u8]) -> Result<Self, OinError> {
        let tensors: std::collections::HashMap<String, Matrix> =
            read_tensors(bytes)?.into_iter().collect();
        let get = |name: &str| {
            tensors
                .get(name)
                .cloned()
                .ok_or_else(|| OinError::TensorFormat(format!("missing tensor {name}")))
        };
        let mut w = ProjectionWeights::new(get("base.q")?, get("base.k")?, get("base.v")?)?;
        for set in ["both", "inp", "obj"] {
            for p in ["q", "k", "v"] {
                let down = tensors.get(&format!("{set}.{p}.down"));
                let up = tensors.get(&format!("{set}.{p}.up"));
                let delta = match (down, up) {
                    (Some(d), Some(u)) => Some(LoraDelta::new(d.clone(), u.clone())?),
                    (None, None) => None,
                    _ => {
                        return Err(OinError::TensorFormat(format!(
                            "{set}.{p}: down/up must come in pairs"
                        )))
                    }
                };
                let slot = match set {
                    "both" => &mut w.both,
                    "inp" => &mut w.inp,
                    _ => &mut w.obj,
                };
                match p {
                    "q" => slot.q = delta,
                    "k" => slot.k = delta,
                    _ => slot.v = delta,
                }
            }
        }
        Ok(w)
    }
}
