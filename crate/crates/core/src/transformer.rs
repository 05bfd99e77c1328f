//! Pre-norm transformer block shared by the vision encoder and the toy decoder.

use std::sync::Arc;

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::checkpoint::{normal_matrix, INIT_STD};
use crate::error::Result;
use crate::numkit::Matrix;
use crate::rope2d::RopeTable;

pub const LAYER_NORM_EPS: f64 = 1e-6;

const BLOCK_FIELDS: [&str; 12] = [
    "ln1.gain", "ln1.bias", "attn.q", "attn.k", "attn.v", "attn.o", "ln2.gain", "ln2.bias", "mlp.w1",
    "mlp.b1", "mlp.w2", "mlp.b2",
];

/// Weights of one block. Linear weights are laid out (out × in); biases and
/// norm parameters are 1×width rows.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub ln1_gain: Matrix,
    pub ln1_bias: Matrix,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ln2_gain: Matrix,
    pub ln2_bias: Matrix,
    pub mlp_w1: Matrix,
    pub mlp_b1: Matrix,
    pub mlp_w2: Matrix,
    pub mlp_b2: Matrix,
}

impl BlockParams {
    pub fn init<R: Rng>(rng: &mut R, d_model: usize, d_mlp: usize) -> Self {
        Self {
            ln1_gain: Matrix::filled(1, d_model, 1.0),
            ln1_bias: Matrix::zeros(1, d_model),
            wq: normal_matrix(rng, d_model, d_model, INIT_STD),
            wk: normal_matrix(rng, d_model, d_model, INIT_STD),
            wv: normal_matrix(rng, d_model, d_model, INIT_STD),
            wo: normal_matrix(rng, d_model, d_model, INIT_STD),
            ln2_gain: Matrix::filled(1, d_model, 1.0),
            ln2_bias: Matrix::zeros(1, d_model),
            mlp_w1: normal_matrix(rng, d_mlp, d_model, INIT_STD),
            mlp_b1: Matrix::zeros(1, d_mlp),
            mlp_w2: normal_matrix(rng, d_model, d_mlp, INIT_STD),
            mlp_b2: Matrix::zeros(1, d_model),
        }
    }

    fn as_array(&self) -> [&Matrix; 12] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.mlp_w1,
            &self.mlp_b1,
            &self.mlp_w2,
            &self.mlp_b2,
        ]
    }

    fn as_array_mut(&mut self) -> [&mut Matrix; 12] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.mlp_w1,
            &mut self.mlp_b1,
            &mut self.mlp_w2,
            &mut self.mlp_b2,
        ]
    }

    pub(crate) fn push_tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix)>) {
        for (name, m) in BLOCK_FIELDS.iter().zip(self.as_array()) {
            out.push((format!("{prefix}.{name}"), m));
        }
    }

    pub(crate) fn push_tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Matrix)>) {
        for (name, m) in BLOCK_FIELDS.iter().zip(self.as_array_mut()) {
            out.push((format!("{prefix}.{name}"), m));
        }
    }

    /// Registers every tensor as a graph leaf, in [`push_tensors`] order.
    pub fn bind(&self, g: &mut Graph, leaves: &mut Vec<Var>) -> BlockVars {
        let vars = self.as_array().map(|m| g.leaf(m.clone()));
        leaves.extend_from_slice(&vars);
        let [ln1_gain, ln1_bias, wq, wk, wv, wo, ln2_gain, ln2_bias, mlp_w1, mlp_b1, mlp_w2, mlp_b2] = vars;
        BlockVars {
            ln1_gain,
            ln1_bias,
            wq,
            wk,
            wv,
            wo,
            ln2_gain,
            ln2_bias,
            mlp_w1,
            mlp_b1,
            mlp_w2,
            mlp_b2,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
    pub mlp_w1: Var,
    pub mlp_b1: Var,
    pub mlp_w2: Var,
    pub mlp_b2: Var,
}

/// Grid positions for rotary attention.
#[derive(Clone)]
pub struct RopePositions {
    pub coords: Arc<[(usize, usize)]>,
    pub table: Arc<RopeTable>,
}

/// How attention scores are formed and normalized.
#[derive(Clone)]
pub struct AttentionSpec {
    pub heads: usize,
    /// 2D RoPE on queries and keys, per head.
    pub rope: Option<RopePositions>,
    pub causal: bool,
}

/// `x + O · Attention(LN₁(x))`. Each head's probability matrix is appended
/// to `probs` when given.
pub fn attention_sublayer(
    g: &mut Graph,
    x: Var,
    block: &BlockVars,
    spec: &AttentionSpec,
    mut probs: Option<&mut Vec<Var>>,
) -> Result<Var> {
    let d_model = g.value(x).cols();
    let head_dim = d_model / spec.heads;
    let scale = 1.0 / (head_dim as f64).sqrt();

    let normed = g.layer_norm(x, block.ln1_gain, block.ln1_bias, LAYER_NORM_EPS)?;
    let q = g.matmul_nt(normed, block.wq)?;
    let k = g.matmul_nt(normed, block.wk)?;
    let v = g.matmul_nt(normed, block.wv)?;

    let mut heads = Vec::with_capacity(spec.heads);
    for h in 0..spec.heads {
        let start = h * head_dim;
        let mut qh = g.slice_cols(q, start, head_dim)?;
        let mut kh = g.slice_cols(k, start, head_dim)?;
        let vh = g.slice_cols(v, start, head_dim)?;
        if let Some(rope) = &spec.rope {
            qh = g.rope(qh, rope.coords.clone(), rope.table.clone())?;
            kh = g.rope(kh, rope.coords.clone(), rope.table.clone())?;
        }
        let scores = g.matmul_nt(qh, kh)?;
        let scores = g.scale(scores, scale);
        let p = if spec.causal {
            g.causal_softmax_rows(scores)?
        } else {
            g.softmax_rows(scores)
        };
        if let Some(out) = probs.as_deref_mut() {
            out.push(p);
        }
        heads.push(g.matmul(p, vh)?);
    }
    let merged = g.concat_cols(&heads)?;
    let projected = g.matmul_nt(merged, block.wo)?;
    g.add(x, projected)
}

/// `x + W₂ · GELU(W₁ · LN₂(x) + b₁) + b₂`.
pub fn mlp_sublayer(g: &mut Graph, x: Var, block: &BlockVars) -> Result<Var> {
    let normed = g.layer_norm(x, block.ln2_gain, block.ln2_bias, LAYER_NORM_EPS)?;
    let hidden = g.linear(normed, block.mlp_w1, block.mlp_b1)?;
    let hidden = g.gelu(hidden);
    let out = g.linear(hidden, block.mlp_w2, block.mlp_b2)?;
    g.add(x, out)
}

pub fn block(g: &mut Graph, x: Var, vars: &BlockVars, spec: &AttentionSpec) -> Result<Var> {
    let x = attention_sublayer(g, x, vars, spec, None)?;
    mlp_sublayer(g, x, vars)
}
