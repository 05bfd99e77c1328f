//! Visual/text sequence assembly and a toy causal decoder.
//!
//! Text goes through a byte-level tokenizer (256 bytes plus four specials).
//! Projected visual tokens replace the single image placeholder in the
//! prompt, and the decoder predicts every next token from all preceding
//! visual and text positions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::checkpoint::{derive_seed, normal_matrix, ParamSet, INIT_STD};
use crate::encoder::{self, EncoderConfig};
use crate::error::{Error, Result};
use crate::numkit::Matrix;
use crate::projector::{self, ProjectorConfig, ProjectorParams};
use crate::tokred::{self, Provenance};
use crate::transformer::{self, AttentionSpec, BlockParams, BlockVars, LAYER_NORM_EPS};
use crate::vistream::{self, PixelPlane, SourceKind, VisualInput};

pub type TokenId = u32;

pub const PAD: TokenId = 256;
pub const BOS: TokenId = 257;
pub const EOS: TokenId = 258;
pub const IMAGE: TokenId = 259;
pub const VOCAB_SIZE: usize = 260;

/// Prompt marker that [`ByteTokenizer::encode_prompt`] maps to [`IMAGE`].
pub const IMAGE_MARKER: &str = "<img>";

/// Byte-level tokenizer: byte `b` is token `b`; ids 256..260 are specials.
#[derive(Clone, Copy, Debug, Default)]
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub fn vocab_size(&self) -> usize {
        VOCAB_SIZE
    }

    pub fn is_special(id: TokenId) -> bool {
        (256..VOCAB_SIZE as TokenId).contains(&id)
    }

    pub fn encode(&self, bytes: &[u8]) -> Vec<TokenId> {
        bytes.iter().map(|&b| TokenId::from(b)).collect()
    }

    /// Bytes of the non-special ids; specials are skipped.
    pub fn decode(&self, ids: &[TokenId]) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(ids.len());
        for &id in ids {
            match id {
                0..=255 => out.push(id as u8),
                _ if Self::is_special(id) => {}
                _ => {
                    return Err(Error::LengthMismatch {
                        op: "token id",
                        expected: VOCAB_SIZE,
                        found: id as usize,
                    })
                }
            }
        }
        Ok(out)
    }

    /// Encodes `text`, turning each `<img>` into the image placeholder.
    pub fn encode_prompt(&self, text: &str) -> Vec<TokenId> {
        let mut ids = Vec::new();
        for (i, part) in text.split(IMAGE_MARKER).enumerate() {
            if i > 0 {
                ids.push(IMAGE);
            }
            ids.extend(self.encode(part.as_bytes()));
        }
        ids
    }
}

/// Projected visual tokens and where each came from.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualSpan {
    pub embeddings: Matrix,
    pub provenance: Vec<Provenance>,
}

impl VisualSpan {
    pub fn empty(d_llm: usize) -> Self {
        Self {
            embeddings: Matrix::zeros(0, d_llm),
            provenance: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.rows() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Segment {
    /// `offset` indexes the prompt's token list.
    Text { offset: usize, token: TokenId },
    Visual(Provenance),
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixedSequence {
    /// T × d_llm
    pub embeddings: Matrix,
    pub segments: Vec<Segment>,
}

impl MixedSequence {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Index of the first visual position, if any.
    pub fn visual_start(&self) -> Option<usize> {
        self.segments.iter().position(|s| matches!(s, Segment::Visual(_)))
    }
}

/// Prompt split around the image placeholder.
struct Layout {
    prefix: Vec<(usize, TokenId)>,
    suffix: Vec<(usize, TokenId)>,
}

impl Layout {
    fn parse(text_ids: &[TokenId], visual_len: usize) -> Result<Self> {
        if let Some(&bad) = text_ids.iter().find(|&&id| id as usize >= VOCAB_SIZE) {
            return Err(Error::LengthMismatch {
                op: "token id",
                expected: VOCAB_SIZE,
                found: bad as usize,
            });
        }
        let placeholders: Vec<usize> = text_ids
            .iter()
            .enumerate()
            .filter(|(_, &id)| id == IMAGE)
            .map(|(i, _)| i)
            .collect();
        let split = match placeholders.as_slice() {
            [] if visual_len == 0 => text_ids.len(),
            [at] => *at,
            other => return Err(Error::Placeholder { count: other.len() }),
        };
        let indexed = |range: std::ops::Range<usize>| range.map(|i| (i, text_ids[i])).collect();
        Ok(Self {
            prefix: indexed(0..split),
            suffix: indexed((split + 1).min(text_ids.len())..text_ids.len()),
        })
    }

    fn segments(&self, provenance: &[Provenance]) -> Vec<Segment> {
        let text = |&(offset, token): &(usize, TokenId)| Segment::Text { offset, token };
        self.prefix
            .iter()
            .map(text)
            .chain(provenance.iter().copied().map(Segment::Visual))
            .chain(self.suffix.iter().map(text))
            .collect()
    }

    fn ids(part: &[(usize, TokenId)]) -> Vec<usize> {
        part.iter().map(|&(_, t)| t as usize).collect()
    }
}

fn check_visual(visual: &VisualSpan, d_model: usize) -> Result<()> {
    if visual.embeddings.cols() != d_model {
        return Err(Error::LengthMismatch {
            op: "visual span width",
            expected: d_model,
            found: visual.embeddings.cols(),
        });
    }
    if visual.provenance.len() != visual.len() {
        return Err(Error::LengthMismatch {
            op: "visual provenance",
            expected: visual.len(),
            found: visual.provenance.len(),
        });
    }
    Ok(())
}

/// Concatenates prompt text embeddings with the visual span at the placeholder.
pub fn assemble(text_ids: &[TokenId], visual: &VisualSpan, params: &DecoderParams) -> Result<MixedSequence> {
    let d = params.token_embedding.cols();
    check_visual(visual, d)?;
    let layout = Layout::parse(text_ids, visual.len())?;
    let prefix = params.token_embedding.select_rows(&Layout::ids(&layout.prefix));
    let suffix = params.token_embedding.select_rows(&Layout::ids(&layout.suffix));
    let embeddings = Matrix::vstack(&[&prefix, &visual.embeddings, &suffix])?;
    Ok(MixedSequence {
        embeddings,
        segments: layout.segments(&visual.provenance),
    })
}

/// Graph form of [`assemble`]; `visual` is a T_v × d_llm node.
pub fn assemble_graph(
    g: &mut Graph,
    text_ids: &[TokenId],
    visual: Var,
    provenance: &[Provenance],
    vars: &DecoderVars,
) -> Result<(Var, Vec<Segment>)> {
    let layout = Layout::parse(text_ids, g.value(visual).rows())?;
    let prefix = g.gather_rows(vars.token_embedding, &Layout::ids(&layout.prefix))?;
    let suffix = g.gather_rows(vars.token_embedding, &Layout::ids(&layout.suffix))?;
    let x = g.concat_rows(&[prefix, visual, suffix])?;
    Ok((x, layout.segments(provenance)))
}

/// Next-token targets: position `t` predicts the text token at `t + 1`.
pub fn next_token_targets(segments: &[Segment]) -> Vec<Option<usize>> {
    (0..segments.len())
        .map(|t| match segments.get(t + 1) {
            Some(Segment::Text { token, .. }) => Some(*token as usize),
            _ => None,
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub layers: usize,
    pub d_model: usize,
    pub d_mlp: usize,
    pub heads: usize,
    pub max_len: usize,
    pub vocab: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            d_model: 12,
            d_mlp: 24,
            heads: 2,
            max_len: 64,
            vocab: VOCAB_SIZE,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model == 0 || self.d_mlp == 0 || self.max_len == 0 || self.vocab == 0 {
            return Err(Error::Config(format!("decoder dimensions must be positive: {self:?}")));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "decoder d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }
}

/// Toy decoder: token and learned absolute position tables, causal blocks,
/// and an output head tied to the token table.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    pub token_embedding: Matrix,
    pub position_embedding: Matrix,
    pub blocks: Vec<BlockParams>,
    pub final_gain: Matrix,
    pub final_bias: Matrix,
}

impl DecoderParams {
    pub fn init(config: &DecoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let token_embedding = normal_matrix(&mut rng, config.vocab, config.d_model, INIT_STD);
        let position_embedding = normal_matrix(&mut rng, config.max_len, config.d_model, INIT_STD);
        let blocks = (0..config.layers)
            .map(|_| BlockParams::init(&mut rng, config.d_model, config.d_mlp))
            .collect();
        Ok(Self {
            token_embedding,
            position_embedding,
            blocks,
            final_gain: Matrix::filled(1, config.d_model, 1.0),
            final_bias: Matrix::zeros(1, config.d_model),
        })
    }

    pub fn bind(&self, g: &mut Graph) -> (DecoderVars, Vec<Var>) {
        let token_embedding = g.leaf(self.token_embedding.clone());
        let position_embedding = g.leaf(self.position_embedding.clone());
        let mut leaves = vec![token_embedding, position_embedding];
        let blocks = self.blocks.iter().map(|b| b.bind(g, &mut leaves)).collect();
        let final_gain = g.leaf(self.final_gain.clone());
        let final_bias = g.leaf(self.final_bias.clone());
        leaves.extend([final_gain, final_bias]);
        (
            DecoderVars {
                token_embedding,
                position_embedding,
                blocks,
                final_gain,
                final_bias,
            },
            leaves,
        )
    }
}

impl ParamSet for DecoderParams {
    fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![
            ("decoder.token_embedding".to_string(), &self.token_embedding),
            ("decoder.position_embedding".to_string(), &self.position_embedding),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            b.push_tensors(&format!("decoder.blocks.{i}"), &mut out);
        }
        out.push(("decoder.final_norm.gain".into(), &self.final_gain));
        out.push(("decoder.final_norm.bias".into(), &self.final_bias));
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = vec![
            ("decoder.token_embedding".to_string(), &mut self.token_embedding),
            ("decoder.position_embedding".to_string(), &mut self.position_embedding),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.push_tensors_mut(&format!("decoder.blocks.{i}"), &mut out);
        }
        out.push(("decoder.final_norm.gain".into(), &mut self.final_gain));
        out.push(("decoder.final_norm.bias".into(), &mut self.final_bias));
        out
    }
}

#[derive(Clone, Debug)]
pub struct DecoderVars {
    pub token_embedding: Var,
    pub position_embedding: Var,
    pub blocks: Vec<BlockVars>,
    pub final_gain: Var,
    pub final_bias: Var,
}

/// Logits (T × vocab) for an assembled T × d_model input node.
pub fn decoder_graph(g: &mut Graph, x: Var, vars: &DecoderVars, config: &DecoderConfig) -> Result<Var> {
    let (t, d) = g.value(x).shape();
    if t == 0 {
        return Err(Error::Empty("decoder input sequence"));
    }
    if d != config.d_model {
        return Err(Error::LengthMismatch {
            op: "decoder input width",
            expected: config.d_model,
            found: d,
        });
    }
    if t > config.max_len {
        return Err(Error::LengthMismatch {
            op: "decoder sequence length",
            expected: config.max_len,
            found: t,
        });
    }
    let positions: Vec<usize> = (0..t).collect();
    let pos = g.gather_rows(vars.position_embedding, &positions)?;
    let mut h = g.add(x, pos)?;
    let spec = AttentionSpec {
        heads: config.heads,
        rope: None,
        causal: true,
    };
    for block in &vars.blocks {
        h = transformer::block(g, h, block, &spec)?;
    }
    let h = g.layer_norm(h, vars.final_gain, vars.final_bias, LAYER_NORM_EPS)?;
    g.matmul_nt(h, vars.token_embedding)
}

pub fn decoder_forward(seq: &MixedSequence, params: &DecoderParams, config: &DecoderConfig) -> Result<Matrix> {
    config.validate()?;
    let mut g = Graph::new();
    let (vars, _) = params.bind(&mut g);
    let x = g.leaf(seq.embeddings.clone());
    let logits = decoder_graph(&mut g, x, &vars, config)?;
    Ok(g.value(logits).clone())
}

/// Settings for the visual copy task.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CopyTaskConfig {
    pub encoder: EncoderConfig,
    pub projector: ProjectorConfig,
    pub decoder: DecoderConfig,
    pub examples: usize,
    pub pattern_len: usize,
    pub steps: usize,
    pub learning_rate: f64,
}

impl Default for CopyTaskConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            projector: ProjectorConfig::default(),
            decoder: DecoderConfig::default(),
            examples: 16,
            pattern_len: 3,
            steps: 200,
            learning_rate: 0.1,
        }
    }
}

/// A distinct deterministic texture per digit.
fn digit_patch_value(digit: usize, r: usize, c: usize) -> f64 {
    let phase = (digit as f64 + 1.0) * 0.61;
    0.5 + 0.45 * (phase * (r as f64 + 1.7 * c as f64) + digit as f64).sin()
}

/// Renders a digit pattern as one row of patches.
pub fn render_pattern(digits: &[usize], patch: usize) -> Result<VisualInput> {
    let plane = PixelPlane::from_fn(patch, patch * digits.len(), |r, c| {
        digit_patch_value(digits[c / patch], r, c % patch)
    })?;
    VisualInput::new(SourceKind::Image2D, vec![plane])
}

/// One copy-task example: projected visual tokens plus the prompt/answer ids.
#[derive(Clone, Debug)]
pub struct CopyExample {
    pub digits: Vec<usize>,
    pub visual: VisualSpan,
    pub text_ids: Vec<TokenId>,
}

/// Builds examples by running each rendered pattern through the vision path.
pub fn copy_task_examples(config: &CopyTaskConfig, seed: u64) -> Result<Vec<CopyExample>> {
    let enc_params = encoder::init_params(&config.encoder, derive_seed(seed, 0))?;
    let proj_params = ProjectorParams::init(&config.projector, derive_seed(seed, 1))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 3));
    let tok = ByteTokenizer;
    (0..config.examples)
        .map(|_| {
            let digits: Vec<usize> = (0..config.pattern_len).map(|_| rng.random_range(0..10)).collect();
            let input = render_pattern(&digits, config.encoder.patch)?;
            let seq = vistream::decompose(&input)?;
            let tokens = vistream::embed_sequence(&seq, config.encoder.patch, &enc_params.patch_w, &enc_params.patch_b)?;
            let (pruned, _) = tokred::reduce_pipeline(&tokens, tokred::DEFAULT_TAU)?;
            let h_v = encoder::encoder_forward(&pruned, &enc_params, &config.encoder)?;
            let embeddings = projector::project(&h_v, &proj_params)?;
            let (_, provenance) = pruned.kept_tokens();
            let answer: String = digits.iter().map(|d| char::from(b'0' + *d as u8)).collect();
            let mut text_ids = tok.encode_prompt(&format!("{IMAGE_MARKER}={answer}"));
            text_ids.push(EOS);
            Ok(CopyExample {
                digits,
                visual: VisualSpan {
                    embeddings,
                    provenance,
                },
                text_ids,
            })
        })
        .collect()
}

/// Mean loss and per-tensor gradients of the decoder over a batch.
pub fn decoder_batch_gradients(
    examples: &[CopyExample],
    params: &DecoderParams,
    config: &DecoderConfig,
) -> Result<(f64, Vec<Matrix>)> {
    let mut total = 0.0;
    let mut acc: Option<Vec<Matrix>> = None;
    for ex in examples {
        let mut g = Graph::new();
        let (vars, leaves) = params.bind(&mut g);
        let visual = g.leaf(ex.visual.embeddings.clone());
        let (x, segments) = assemble_graph(&mut g, &ex.text_ids, visual, &ex.visual.provenance, &vars)?;
        let logits = decoder_graph(&mut g, x, &vars, config)?;
        let loss = g.cross_entropy(logits, &next_token_targets(&segments))?;
        total += g.value(loss).get(0, 0);
        let grads = g.backward(loss)?.for_leaves(&g, &leaves);
        match &mut acc {
            None => acc = Some(grads),
            Some(acc) => acc.iter_mut().zip(&grads).for_each(|(a, g)| a.add_assign(g)),
        }
    }
    let n = examples.len() as f64;
    let grads = acc
        .ok_or(Error::Empty("training batch"))?
        .into_iter()
        .map(|m| m.map(|v| v / n))
        .collect();
    Ok((total / n, grads))
}

/// Trains the toy decoder by full-batch gradient descent on the copy task.
/// Returns the loss before each update plus the final loss (`steps + 1` values).
pub fn train_copy_task(config: &CopyTaskConfig, seed: u64) -> Result<Vec<f64>> {
    if config.examples == 0 || config.pattern_len == 0 {
        return Err(Error::Config("copy task needs examples and a non-empty pattern".into()));
    }
    if !(config.learning_rate > 0.0) {
        return Err(Error::Config(format!("learning rate must be > 0, got {}", config.learning_rate)));
    }
    let examples = copy_task_examples(config, seed)?;
    let mut params = DecoderParams::init(&config.decoder, derive_seed(seed, 2))?;
    let mut curve = Vec::with_capacity(config.steps + 1);
    for step in 0..=config.steps {
        let (loss, grads) = decoder_batch_gradients(&examples, &params, &config.decoder)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        curve.push(loss);
        if step == config.steps {
            break;
        }
        for ((_, p), g) in params.tensors_mut().into_iter().zip(&grads) {
            for (v, dv) in p.data_mut().iter_mut().zip(g.data()) {
                *v -= config.learning_rate * dv;
            }
        }
    }
    Ok(curve)
}
