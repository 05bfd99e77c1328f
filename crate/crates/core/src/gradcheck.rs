//! Central-difference checks of the tape gradients on desk-scale models.
//!
//! Each fixture owns its parameters, builds a scalar loss on a fresh graph,
//! and exposes the parameters through [`ParamSet`] so every entry can be
//! nudged in place. Weights are perturbed away from their small init so the
//! gradients are large enough for a relative comparison to mean something.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Graph, Var};
use crate::checkpoint::ParamSet;
use crate::encoder::{self, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::fusion::{self, DecoderConfig, DecoderParams, TokenId, IMAGE};
use crate::numkit::Matrix;
use crate::projector::{self, ProjectorConfig, ProjectorParams};
use crate::rope2d::RopeTable;
use crate::tokred::Provenance;

/// Step of the five-point central difference
/// `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h`.
pub const FD_STEP: f64 = 1e-3;

/// Gradients smaller than this are compared in absolute terms. The
/// difference quotient carries around 1e-12 of rounding and truncation
/// error, so a relative measure below this magnitude only reports noise.
pub const GRAD_FLOOR: f64 = 1e-4;

/// Standard deviation of the noise added to initialized weights.
pub const PERTURB_STD: f64 = 0.25;

/// `|a − n| / max(|a|, |n|, GRAD_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Tensor name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
}

/// Compares `analytic` (in [`ParamSet::tensors`] order) with central
/// differences of `loss` over every parameter entry.
pub fn check_gradients<P, F>(params: &mut P, analytic: &[Matrix], mut loss: F) -> Result<GradReport>
where
    P: ParamSet + ?Sized,
    F: FnMut(&P) -> Result<f64>,
{
    let shapes: Vec<(String, (usize, usize))> = params.tensors().iter().map(|(n, m)| (n.clone(), m.shape())).collect();
    if shapes.len() != analytic.len() {
        return Err(Error::LengthMismatch {
            op: "gradient tensors",
            expected: shapes.len(),
            found: analytic.len(),
        });
    }
    let mut report = GradReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    for (t, ((name, shape), grad)) in shapes.iter().zip(analytic).enumerate() {
        if grad.shape() != *shape {
            return Err(Error::ShapeMismatch {
                op: "gradient tensor",
                left: *shape,
                right: grad.shape(),
            });
        }
        for i in 0..grad.len() {
            let original = params.tensors()[t].1.data()[i];
            let mut eval = |params: &mut P, v: f64| {
                params.tensors_mut()[t].1.data_mut()[i] = v;
                loss(params)
            };
            let h = FD_STEP;
            let p2 = eval(params, original + 2.0 * h)?;
            let p1 = eval(params, original + h)?;
            let m1 = eval(params, original - h)?;
            let m2 = eval(params, original - 2.0 * h)?;
            params.tensors_mut()[t].1.data_mut()[i] = original;
            let numeric = (-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * h);
            if !numeric.is_finite() {
                return Err(Error::NonFinite(format!("finite difference of {name}[{i}]")));
            }
            let err = relative_error(grad.data()[i], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}

/// Adds N(0, std²) noise to every parameter entry.
pub fn perturb<P: ParamSet + ?Sized, R: Rng>(params: &mut P, rng: &mut R, std: f64) {
    let dist = Normal::new(0.0, std).expect("positive std");
    for (_, m) in params.tensors_mut() {
        for v in m.data_mut() {
            *v += dist.sample(rng);
        }
    }
}

fn uniform_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Matrix::from_vec(rows, cols, data).expect("uniform samples are finite")
}

fn grid_coords(gh: usize, gw: usize) -> Vec<(usize, usize)> {
    (0..gh).flat_map(|m| (0..gw).map(move |n| (m, n))).collect()
}

/// Patch pixels → patch embedding → encoder, reduced by fixed random weights.
pub struct EncoderFixture {
    pub config: EncoderConfig,
    pub params: EncoderParams,
    pub patches: Matrix,
    pub coords: Arc<[(usize, usize)]>,
    pub readout: Matrix,
    rope: Arc<RopeTable>,
}

impl EncoderFixture {
    /// `grid_h × grid_w` patches of random pixels.
    pub fn random(config: EncoderConfig, grid_h: usize, grid_w: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = encoder::init_params(&config, rng.random())?;
        perturb(&mut params, &mut rng, PERTURB_STD);
        let n = grid_h * grid_w;
        Ok(Self {
            patches: uniform_matrix(&mut rng, n, config.patch * config.patch, 0.0, 1.0),
            readout: uniform_matrix(&mut rng, n, config.d_model, -1.0, 1.0),
            coords: grid_coords(grid_h, grid_w).into(),
            rope: config.rope_table()?,
            config,
            params,
        })
    }

    fn graph(&self, params: &EncoderParams) -> Result<(Graph, Var, Vec<Var>)> {
        let mut g = Graph::new();
        let (embed, stack, leaves) = params.bind(&mut g);
        let x = g.leaf(self.patches.clone());
        let tokens = encoder::embed_graph(&mut g, x, &embed)?;
        let h = encoder::encoder_graph(&mut g, tokens, self.coords.clone(), &stack, &self.config, self.rope.clone())?;
        let loss = g.weighted_sum(h, self.readout.clone())?;
        Ok((g, loss, leaves))
    }

    pub fn check(&self) -> Result<GradReport> {
        let (g, loss, leaves) = self.graph(&self.params)?;
        let analytic = g.backward(loss)?.for_leaves(&g, &leaves);
        let mut params = self.params.clone();
        check_gradients(&mut params, &analytic, |p| {
            let (g, loss, _) = self.graph(p)?;
            Ok(g.value(loss).get(0, 0))
        })
    }
}

/// Projector output reduced by fixed random weights.
pub struct ProjectorFixture {
    pub params: ProjectorParams,
    pub h_v: Matrix,
    pub readout: Matrix,
}

impl ProjectorFixture {
    pub fn random(config: ProjectorConfig, rows: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ProjectorParams::init(&config, rng.random())?;
        perturb(&mut params, &mut rng, PERTURB_STD);
        Ok(Self {
            h_v: uniform_matrix(&mut rng, rows, config.d_model, -2.0, 2.0),
            readout: uniform_matrix(&mut rng, rows, config.d_llm, -1.0, 1.0),
            params,
        })
    }

    fn graph(&self, params: &ProjectorParams) -> Result<(Graph, Var, Vec<Var>)> {
        let mut g = Graph::new();
        let (vars, leaves) = params.bind(&mut g);
        let x = g.leaf(self.h_v.clone());
        let out = projector::project_graph(&mut g, x, &vars)?;
        let loss = g.weighted_sum(out, self.readout.clone())?;
        Ok((g, loss, leaves))
    }

    pub fn check(&self) -> Result<GradReport> {
        let (g, loss, leaves) = self.graph(&self.params)?;
        let analytic = g.backward(loss)?.for_leaves(&g, &leaves);
        let mut params = self.params.clone();
        check_gradients(&mut params, &analytic, |p| {
            let (g, loss, _) = self.graph(p)?;
            Ok(g.value(loss).get(0, 0))
        })
    }
}

/// Encoder, projector and decoder parameters trained jointly.
#[derive(Clone, Debug)]
pub struct FusedParams {
    pub encoder: EncoderParams,
    pub projector: ProjectorParams,
    pub decoder: DecoderParams,
}

impl ParamSet for FusedParams {
    fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = self.encoder.tensors();
        out.extend(self.projector.tensors());
        out.extend(self.decoder.tensors());
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = self.encoder.tensors_mut();
        out.extend(self.projector.tensors_mut());
        out.extend(self.decoder.tensors_mut());
        out
    }
}

/// Pixels through encoder and projector, spliced into a prompt, scored by
/// the decoder's next-token cross-entropy.
pub struct FusedFixture {
    pub encoder_config: EncoderConfig,
    pub decoder_config: DecoderConfig,
    pub params: FusedParams,
    pub patches: Matrix,
    pub coords: Arc<[(usize, usize)]>,
    pub text_ids: Vec<TokenId>,
    rope: Arc<RopeTable>,
}

impl FusedFixture {
    pub fn random(
        encoder_config: EncoderConfig,
        decoder_config: DecoderConfig,
        grid: (usize, usize),
        text_len: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let projector_config = ProjectorConfig {
            d_model: encoder_config.d_model,
            d_hidden: 2 * encoder_config.d_model,
            d_llm: decoder_config.d_model,
        };
        let mut params = FusedParams {
            encoder: encoder::init_params(&encoder_config, rng.random())?,
            projector: ProjectorParams::init(&projector_config, rng.random())?,
            decoder: DecoderParams::init(&decoder_config, rng.random())?,
        };
        perturb(&mut params, &mut rng, PERTURB_STD);
        let n = grid.0 * grid.1;
        let split = rng.random_range(0..=text_len);
        let mut text_ids: Vec<TokenId> = (0..text_len).map(|_| rng.random_range(0..256)).collect();
        text_ids.insert(split, IMAGE);
        Ok(Self {
            patches: uniform_matrix(&mut rng, n, encoder_config.patch * encoder_config.patch, 0.0, 1.0),
            coords: grid_coords(grid.0, grid.1).into(),
            rope: encoder_config.rope_table()?,
            encoder_config,
            decoder_config,
            params,
            text_ids,
        })
    }

    fn graph(&self, params: &FusedParams) -> Result<(Graph, Var, Vec<Var>)> {
        let mut g = Graph::new();
        let (embed, stack, mut leaves) = params.encoder.bind(&mut g);
        let (proj, proj_leaves) = params.projector.bind(&mut g);
        let (dec, dec_leaves) = params.decoder.bind(&mut g);
        leaves.extend(proj_leaves);
        leaves.extend(dec_leaves);

        let x = g.leaf(self.patches.clone());
        let tokens = encoder::embed_graph(&mut g, x, &embed)?;
        let h_v = encoder::encoder_graph(
            &mut g,
            tokens,
            self.coords.clone(),
            &stack,
            &self.encoder_config,
            self.rope.clone(),
        )?;
        let visual = projector::project_graph(&mut g, h_v, &proj)?;
        let provenance: Vec<Provenance> = self.coords.iter().map(|&(m, n)| Provenance { plane: 0, m, n }).collect();
        let (seq, segments) = fusion::assemble_graph(&mut g, &self.text_ids, visual, &provenance, &dec)?;
        let logits = fusion::decoder_graph(&mut g, seq, &dec, &self.decoder_config)?;
        let loss = g.cross_entropy(logits, &fusion::next_token_targets(&segments))?;
        Ok((g, loss, leaves))
    }

    pub fn check(&self) -> Result<GradReport> {
        let (g, loss, leaves) = self.graph(&self.params)?;
        let analytic = g.backward(loss)?.for_leaves(&g, &leaves);
        let mut params = self.params.clone();
        check_gradients(&mut params, &analytic, |p| {
            let (g, loss, _) = self.graph(p)?;
            Ok(g.value(loss).get(0, 0))
        })
    }
}
