//! Vision transformer with 2D rotary attention.
//!
//! Every modality goes through the same stack: kept tokens from all planes
//! are stacked plane-major and attend to each other bidirectionally, with
//! RoPE applied per head to queries and keys from each token's `(m, n)`.
//! The plane index is not encoded positionally.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::checkpoint::{normal_matrix, ParamSet, INIT_STD};
use crate::error::{Error, Result};
use crate::numkit::Matrix;
use crate::rope2d::RopeTable;
use crate::tokred::PrunedSequence;
use crate::transformer::{self, AttentionSpec, BlockParams, BlockVars, RopePositions, LAYER_NORM_EPS};
use crate::vistream::PATCH_SIZE;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub d_model: usize,
    pub d_mlp: usize,
    pub heads: usize,
    /// Patch edge in pixels; sets the patch-embedding input width.
    pub patch: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::desk(2, 8, 2)
    }
}

impl EncoderConfig {
    /// Small configuration for exhaustive numeric checks; MLP width is `2·d_model`.
    pub fn desk(layers: usize, d_model: usize, heads: usize) -> Self {
        Self {
            layers,
            d_model,
            d_mlp: 2 * d_model,
            heads,
            patch: PATCH_SIZE,
        }
    }

    /// 27 layers, width 1152, MLP 4304, 16 heads.
    pub fn full_scale() -> Self {
        Self {
            layers: 27,
            d_model: 1152,
            d_mlp: 4304,
            heads: 16,
            patch: PATCH_SIZE,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model == 0 || self.d_mlp == 0 || self.patch == 0 {
            return Err(Error::Config(format!("encoder dimensions must be positive: {self:?}")));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if !self.head_dim().is_multiple_of(4) {
            return Err(Error::Config(format!(
                "head dim {} must be a multiple of 4 for 2D RoPE",
                self.head_dim()
            )));
        }
        Ok(())
    }

    pub fn rope_table(&self) -> Result<Arc<RopeTable>> {
        Ok(Arc::new(RopeTable::new(self.head_dim())?))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    /// (d_model × patch²)
    pub patch_w: Matrix,
    pub patch_b: Matrix,
    pub blocks: Vec<BlockParams>,
    pub final_gain: Matrix,
    pub final_bias: Matrix,
}

impl ParamSet for EncoderParams {
    fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![
            ("patch_embed.w".to_string(), &self.patch_w),
            ("patch_embed.b".to_string(), &self.patch_b),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            b.push_tensors(&format!("blocks.{i}"), &mut out);
        }
        out.push(("final_norm.gain".into(), &self.final_gain));
        out.push(("final_norm.bias".into(), &self.final_bias));
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = vec![
            ("patch_embed.w".to_string(), &mut self.patch_w),
            ("patch_embed.b".to_string(), &mut self.patch_b),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.push_tensors_mut(&format!("blocks.{i}"), &mut out);
        }
        out.push(("final_norm.gain".into(), &mut self.final_gain));
        out.push(("final_norm.bias".into(), &mut self.final_bias));
        out
    }
}

/// Deterministic initialization: weights ~ N(0, 0.02²), norms at gain 1 / bias 0.
pub fn init_params(config: &EncoderConfig, seed: u64) -> Result<EncoderParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let patch_w = normal_matrix(&mut rng, config.d_model, config.patch * config.patch, INIT_STD);
    let blocks = (0..config.layers)
        .map(|_| BlockParams::init(&mut rng, config.d_model, config.d_mlp))
        .collect();
    Ok(EncoderParams {
        patch_w,
        patch_b: Matrix::zeros(1, config.d_model),
        blocks,
        final_gain: Matrix::filled(1, config.d_model, 1.0),
        final_bias: Matrix::zeros(1, config.d_model),
    })
}

#[derive(Clone, Copy, Debug)]
pub struct PatchEmbedVars {
    pub w: Var,
    pub b: Var,
}

/// Graph handles for the transformer stack and final norm.
#[derive(Clone, Debug)]
pub struct EncoderVars {
    pub blocks: Vec<BlockVars>,
    pub final_gain: Var,
    pub final_bias: Var,
}

impl EncoderParams {
    /// Registers all tensors as leaves; the returned list follows [`ParamSet::tensors`] order.
    pub fn bind(&self, g: &mut Graph) -> (PatchEmbedVars, EncoderVars, Vec<Var>) {
        let w = g.leaf(self.patch_w.clone());
        let b = g.leaf(self.patch_b.clone());
        let mut leaves = vec![w, b];
        let stack = self.bind_stack(g, &mut leaves);
        (PatchEmbedVars { w, b }, stack, leaves)
    }

    /// Registers only the transformer stack and final norm.
    pub fn bind_stack(&self, g: &mut Graph, leaves: &mut Vec<Var>) -> EncoderVars {
        let blocks = self.blocks.iter().map(|b| b.bind(g, leaves)).collect();
        let final_gain = g.leaf(self.final_gain.clone());
        let final_bias = g.leaf(self.final_bias.clone());
        leaves.extend([final_gain, final_bias]);
        EncoderVars {
            blocks,
            final_gain,
            final_bias,
        }
    }
}

/// Patch pixels (N × patch²) to tokens (N × d_model).
pub fn embed_graph(g: &mut Graph, patches: Var, vars: &PatchEmbedVars) -> Result<Var> {
    g.linear(patches, vars.w, vars.b)
}

/// Runs all blocks and the final norm on a stacked token matrix.
pub fn encoder_graph(
    g: &mut Graph,
    tokens: Var,
    coords: Arc<[(usize, usize)]>,
    vars: &EncoderVars,
    config: &EncoderConfig,
    rope: Arc<RopeTable>,
) -> Result<Var> {
    check_tokens(g.value(tokens), coords.len(), config)?;
    let spec = AttentionSpec {
        heads: config.heads,
        rope: Some(RopePositions { coords, table: rope }),
        causal: false,
    };
    let mut x = tokens;
    for block in &vars.blocks {
        x = transformer::block(g, x, block, &spec)?;
    }
    g.layer_norm(x, vars.final_gain, vars.final_bias, LAYER_NORM_EPS)
}

fn check_tokens(tokens: &Matrix, coords: usize, config: &EncoderConfig) -> Result<()> {
    if tokens.cols() != config.d_model {
        return Err(Error::LengthMismatch {
            op: "encoder token width",
            expected: config.d_model,
            found: tokens.cols(),
        });
    }
    if coords != tokens.rows() {
        return Err(Error::LengthMismatch {
            op: "encoder coords",
            expected: tokens.rows(),
            found: coords,
        });
    }
    Ok(())
}

/// Encodes a stacked token matrix whose rows sit at `coords`.
pub fn encode_tokens(
    tokens: &Matrix,
    coords: &[(usize, usize)],
    params: &EncoderParams,
    config: &EncoderConfig,
) -> Result<Matrix> {
    config.validate()?;
    if params.blocks.len() != config.layers {
        return Err(Error::LengthMismatch {
            op: "encoder layers",
            expected: config.layers,
            found: params.blocks.len(),
        });
    }
    let mut g = Graph::new();
    let x = g.leaf(tokens.clone());
    let vars = params.bind_stack(&mut g, &mut Vec::new());
    let out = encoder_graph(&mut g, x, Arc::from(coords), &vars, config, config.rope_table()?)?;
    Ok(g.value(out).clone())
}

/// `H_v`: kept tokens of every plane, encoded jointly (N_kept × d_model).
pub fn encoder_forward(seq: &PrunedSequence, params: &EncoderParams, config: &EncoderConfig) -> Result<Matrix> {
    let (tokens, provenance) = seq.kept_tokens();
    let coords: Vec<(usize, usize)> = provenance.iter().map(|p| (p.m, p.n)).collect();
    encode_tokens(&tokens, &coords, params, config)
}

fn single_block_graph(
    tokens: &Matrix,
    coords: &[(usize, usize)],
    block: &BlockParams,
    rope: &RopeTable,
    config: &EncoderConfig,
) -> Result<(Graph, Var, BlockVars, AttentionSpec)> {
    config.validate()?;
    check_tokens(tokens, coords.len(), config)?;
    if rope.d() != config.head_dim() {
        return Err(Error::LengthMismatch {
            op: "rope table width",
            expected: config.head_dim(),
            found: rope.d(),
        });
    }
    let mut g = Graph::new();
    let x = g.leaf(tokens.clone());
    let vars = block.bind(&mut g, &mut Vec::new());
    let spec = AttentionSpec {
        heads: config.heads,
        rope: Some(RopePositions {
            coords: Arc::from(coords),
            table: Arc::new(rope.clone()),
        }),
        causal: false,
    };
    Ok((g, x, vars, spec))
}

/// Pre-norm residual attention half of one block: `x + O·Attn(LN₁(x))`.
pub fn attention_block(
    tokens: &Matrix,
    coords: &[(usize, usize)],
    block: &BlockParams,
    rope: &RopeTable,
    config: &EncoderConfig,
) -> Result<Matrix> {
    let (mut g, x, vars, spec) = single_block_graph(tokens, coords, block, rope, config)?;
    let out = transformer::attention_sublayer(&mut g, x, &vars, &spec, None)?;
    Ok(g.value(out).clone())
}

/// Per-head attention probabilities (N × N each) of one block.
pub fn attention_weights(
    tokens: &Matrix,
    coords: &[(usize, usize)],
    block: &BlockParams,
    rope: &RopeTable,
    config: &EncoderConfig,
) -> Result<Vec<Matrix>> {
    let (mut g, x, vars, spec) = single_block_graph(tokens, coords, block, rope, config)?;
    let mut probs = Vec::new();
    transformer::attention_sublayer(&mut g, x, &vars, &spec, Some(&mut probs))?;
    Ok(probs.into_iter().map(|p| g.value(p).clone()).collect())
}

/// MLP half of one block: `x + W₂·GELU(W₁·LN₂(x) + b₁) + b₂`.
pub fn mlp_block(tokens: &Matrix, block: &BlockParams) -> Result<Matrix> {
    let mut g = Graph::new();
    let x = g.leaf(tokens.clone());
    let vars = block.bind(&mut g, &mut Vec::new());
    let out = transformer::mlp_sublayer(&mut g, x, &vars)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{self, layer_norm, softmax_in_place};
    use crate::rope2d::{apply_rope2d, PositionedVector};
    use rand::Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
        Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn init_is_deterministic_and_seeded() {
        let cfg = EncoderConfig::default();
        let a = init_params(&cfg, 42).unwrap();
        let b = init_params(&cfg, 42).unwrap();
        assert_eq!(a, b);
        let c = init_params(&cfg, 43).unwrap();
        assert_ne!(a.patch_w, c.patch_w);
        assert!(a.blocks[0].ln1_gain.data().iter().all(|&v| v == 1.0));
        assert!(a.final_bias.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_weight_mean_within_three_sigma() {
        // 10⁴-element block: sample mean ~ N(0, 0.02²/10⁴), 3σ = 6e-4.
        let cfg = EncoderConfig {
            layers: 1,
            d_model: 100,
            d_mlp: 8,
            heads: 1,
            patch: 1,
        };
        let p = init_params(&cfg, 9).unwrap();
        let w = &p.blocks[0].wq;
        assert_eq!(w.len(), 10_000);
        let mean = w.data().iter().sum::<f64>() / w.len() as f64;
        assert!(mean.abs() < 3.0 * 0.02 / 100.0, "mean {mean}");
        let var = w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64;
        assert!((var.sqrt() - 0.02).abs() < 0.001);
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(EncoderConfig::desk(2, 8, 3).validate().is_err());
        assert!(EncoderConfig::desk(2, 12, 2).validate().is_err()); // head dim 6
        assert!(init_params(&EncoderConfig::desk(1, 0, 1), 0).is_err());
        EncoderConfig::full_scale().validate().unwrap();
        assert_eq!(EncoderConfig::full_scale().head_dim(), 72);
    }

    #[test]
    fn single_token_attention_is_value_path() {
        let cfg = EncoderConfig::desk(1, 8, 2);
        let p = init_params(&cfg, 1).unwrap();
        let b = &p.blocks[0];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&mut rng, 1, 8, 1.0);
        let rope = RopeTable::new(4).unwrap();
        let out = attention_block(&x, &[(3, 5)], b, &rope, &cfg).unwrap();
        let normed = layer_norm(x.row(0), b.ln1_gain.data(), b.ln1_bias.data(), LAYER_NORM_EPS).unwrap();
        let v = numkit::matmul_nt(&Matrix::row_vector(normed), &b.wv).unwrap();
        let o = numkit::matmul_nt(&v, &b.wo).unwrap();
        for c in 0..8 {
            assert!((out.get(0, c) - (x.get(0, c) + o.get(0, c))).abs() < 1e-14);
        }
    }

    #[test]
    fn three_token_attention_matches_unrolled_oracle() {
        let cfg = EncoderConfig {
            layers: 1,
            d_model: 4,
            d_mlp: 8,
            heads: 1,
            patch: 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut block = init_params(&cfg, 3).unwrap().blocks.remove(0);
        for w in [&mut block.wq, &mut block.wk, &mut block.wv, &mut block.wo] {
            *w = random(&mut rng, 4, 4, 1.0);
        }
        block.ln1_gain = random(&mut rng, 1, 4, 2.0);
        block.ln1_bias = random(&mut rng, 1, 4, 0.5);
        let x = random(&mut rng, 3, 4, 1.0);
        let coords = [(0, 0), (1, 2), (4, 1)];
        let rope = RopeTable::new(4).unwrap();
        let out = attention_block(&x, &coords, &block, &rope, &cfg).unwrap();

        // unrolled: per-token LN, projections, rope, scores, softmax, mix
        let lin = |w: &Matrix, v: &[f64]| -> Vec<f64> {
            (0..4).map(|r| (0..4).map(|c| w.get(r, c) * v[c]).sum()).collect()
        };
        let normed: Vec<Vec<f64>> = (0..3)
            .map(|i| layer_norm(x.row(i), block.ln1_gain.data(), block.ln1_bias.data(), LAYER_NORM_EPS).unwrap())
            .collect();
        let q: Vec<Vec<f64>> = (0..3)
            .map(|i| apply_rope2d(&PositionedVector::new(lin(&block.wq, &normed[i]), coords[i].0, coords[i].1), &rope).unwrap())
            .collect();
        let k: Vec<Vec<f64>> = (0..3)
            .map(|i| apply_rope2d(&PositionedVector::new(lin(&block.wk, &normed[i]), coords[i].0, coords[i].1), &rope).unwrap())
            .collect();
        let v: Vec<Vec<f64>> = (0..3).map(|i| lin(&block.wv, &normed[i])).collect();
        for i in 0..3 {
            let mut s: Vec<f64> = (0..3)
                .map(|j| (0..4).map(|c| q[i][c] * k[j][c]).sum::<f64>() / 2.0)
                .collect();
            softmax_in_place(&mut s);
            let mixed: Vec<f64> = (0..4).map(|c| (0..3).map(|j| s[j] * v[j][c]).sum()).collect();
            let o = lin(&block.wo, &mixed);
            for c in 0..4 {
                assert!((out.get(i, c) - (x.get(i, c) + o[c])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_layers_is_final_layer_norm() {
        let cfg = EncoderConfig::desk(0, 8, 2);
        let p = init_params(&cfg, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&mut rng, 5, 8, 3.0);
        let coords: Vec<_> = (0..5).map(|i| (i, 0)).collect();
        let out = encode_tokens(&x, &coords, &p, &cfg).unwrap();
        for r in 0..5 {
            let e = layer_norm(x.row(r), &[1.0; 8], &[0.0; 8], LAYER_NORM_EPS).unwrap();
            for c in 0..8 {
                assert!((out.get(r, c) - e[c]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let cfg = EncoderConfig::default();
        let p = init_params(&cfg, 0).unwrap();
        assert!(encode_tokens(&Matrix::zeros(2, 6), &[(0, 0), (0, 1)], &p, &cfg).is_err());
        assert!(encode_tokens(&Matrix::zeros(2, 8), &[(0, 0)], &p, &cfg).is_err());
    }
}
