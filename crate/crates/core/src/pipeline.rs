//! End-to-end runs: load → decompose → patchify/embed → reduce → encode →
//! project, with a token-budget report.

use std::collections::HashMap;
use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::derive_seed;
use crate::encoder::{self, EncoderConfig, EncoderParams};
use crate::error::{Error, Result, StageContext};
use crate::io;
use crate::numkit::Matrix;
use crate::projector::{self, ProjectorConfig, ProjectorParams};
use crate::tokred::{self, MergeMode, PrunedSequence, ReductionReport, DEFAULT_TAU};
use crate::vistream::{self, PlaneSequence, SourceKind, TokenPlane, VisualInput, PATCH_SIZE};

/// Default decoder embedding width the projector maps into.
pub const DEFAULT_D_LLM: usize = 12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub input: PathBuf,
    pub kind: SourceKind,
    pub patch: usize,
    pub merge: MergeMode,
    pub tau: f64,
    /// Keep every `stride`-th plane (frames or slices).
    pub stride: usize,
    pub encoder: EncoderConfig,
    pub d_llm: usize,
    pub seed: u64,
}

impl PipelineConfig {
    pub fn new(input: impl Into<PathBuf>, kind: SourceKind) -> Self {
        Self {
            input: input.into(),
            kind,
            patch: PATCH_SIZE,
            merge: MergeMode::Auto,
            tau: DEFAULT_TAU,
            stride: 1,
            encoder: EncoderConfig::default(),
            d_llm: DEFAULT_D_LLM,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 {
            return Err(Error::Config("patch size must be positive".into()));
        }
        if self.stride == 0 {
            return Err(Error::Config("stride must be positive".into()));
        }
        if !(self.tau >= 0.0) {
            return Err(Error::Config(format!("tau must be >= 0, got {}", self.tau)));
        }
        if self.d_llm == 0 {
            return Err(Error::Config("d_llm must be positive".into()));
        }
        self.encoder.validate()
    }

    /// Encoder config with this run's patch size.
    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            patch: self.patch,
            ..self.encoder
        }
    }

    pub fn projector_config(&self) -> ProjectorConfig {
        ProjectorConfig {
            d_model: self.encoder.d_model,
            d_hidden: 2 * self.encoder.d_model,
            d_llm: self.d_llm,
        }
    }
}

/// Seeded encoder and projector weights for a pipeline run.
#[derive(Clone, Debug)]
pub struct Model {
    pub encoder: EncoderParams,
    pub projector: ProjectorParams,
}

impl Model {
    pub fn init(config: &PipelineConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            encoder: encoder::init_params(&config.encoder_config(), derive_seed(config.seed, 0))?,
            projector: ProjectorParams::init(&config.projector_config(), derive_seed(config.seed, 1))?,
        })
    }
}

/// Wall-clock milliseconds per stage.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub load: f64,
    pub embed: f64,
    pub reduce: f64,
    pub encode: f64,
    pub project: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub input_kind: SourceKind,
    pub planes: usize,
    /// Patch grid of one plane before merging, `[grid_h, grid_w]`.
    pub grid: [usize; 2],
    pub merged: bool,
    pub tokens_before: usize,
    pub tokens_after_merge: usize,
    pub tokens_after_prune: usize,
    pub rate: f64,
    pub tau: f64,
    pub per_plane: Vec<tokred::PlaneCount>,
    pub encoder_output_shape: [usize; 2],
    pub projector_output_shape: [usize; 2],
    pub timings_ms: Timings,
}

impl PipelineReport {
    /// Report JSON with timings zeroed, for determinism comparisons.
    pub fn to_json_without_timings(&self) -> Result<String> {
        let mut r = self.clone();
        r.timings_ms = Timings::default();
        Ok(serde_json::to_string_pretty(&r)?)
    }
}

/// Everything a run produces besides the report.
#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub report: PipelineReport,
    pub reduced: PrunedSequence,
    pub reduction: ReductionReport,
    pub h_v: Matrix,
    pub h_proj: Matrix,
}

fn ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

pub fn run_pipeline(config: &PipelineConfig) -> Result<PipelineReport> {
    config.validate().stage("config")?;
    let start = Instant::now();
    let input = io::load_input(&config.input, config.kind).stage("load")?;
    let load = ms(start);
    let model = Model::init(config).stage("init")?;
    let mut out = run_on_input(&input, config, &model)?;
    out.report.timings_ms.load = load;
    Ok(out.report)
}

/// Decomposes and embeds every plane (after stride sampling).
pub fn embed_input(input: &VisualInput, config: &PipelineConfig, model: &Model) -> Result<PlaneSequence<TokenPlane>> {
    let seq = vistream::decompose(input).stage("decompose")?;
    let kept_index = vistream::sample_frames(&seq.plane_index, config.stride).stage("sample")?;
    let planes = vistream::sample_frames(&seq.planes, config.stride).stage("sample")?;
    let sampled = PlaneSequence {
        source_kind: seq.source_kind,
        planes,
        plane_index: kept_index,
    };
    vistream::embed_sequence(&sampled, config.patch, &model.encoder.patch_w, &model.encoder.patch_b).stage("embed")
}

/// Runs every stage after loading on an in-memory input.
pub fn run_on_input(input: &VisualInput, config: &PipelineConfig, model: &Model) -> Result<PipelineOutput> {
    config.validate().stage("config")?;
    let mut timings = Timings::default();

    let start = Instant::now();
    let tokens = embed_input(input, config, model)?;
    timings.embed = ms(start);

    let start = Instant::now();
    let (reduced, reduction) = tokred::reduce_with(&tokens, config.tau, config.merge).stage("reduce")?;
    timings.reduce = ms(start);

    let start = Instant::now();
    let h_v = encoder::encoder_forward(&reduced, &model.encoder, &config.encoder_config()).stage("encode")?;
    timings.encode = ms(start);

    let start = Instant::now();
    let h_proj = projector::project(&h_v, &model.projector).stage("project")?;
    timings.project = ms(start);

    let first = &tokens.planes[0];
    let report = PipelineReport {
        input_kind: input.kind(),
        planes: tokens.len(),
        grid: [first.grid_h, first.grid_w],
        merged: config.merge.applies_to(input.kind()),
        tokens_before: reduction.total_before,
        tokens_after_merge: reduction.total_after_merge,
        tokens_after_prune: reduction.total_after,
        rate: reduction.rate,
        tau: reduction.tau,
        per_plane: reduction.per_plane.clone(),
        encoder_output_shape: [h_v.rows(), h_v.cols()],
        projector_output_shape: [h_proj.rows(), h_proj.cols()],
        timings_ms: timings,
    };
    if report.tokens_after_prune != h_proj.rows() || h_proj.cols() != config.d_llm {
        return Err(Error::Invariant(format!(
            "projector output {:?} does not match {} kept tokens of width {}",
            h_proj.shape(),
            report.tokens_after_prune,
            config.d_llm
        )));
    }
    Ok(PipelineOutput {
        report,
        reduced,
        reduction,
        h_v,
        h_proj,
    })
}

/// One row of a τ sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TauRow {
    pub tau: f64,
    pub rate: f64,
    pub tokens_after_prune: usize,
    /// Mean L2 distance between encoder outputs at kept positions and the
    /// same positions of the τ = 0 run.
    pub drift: f64,
}

/// Pruning rate and encoder drift for each τ of `grid`.
pub fn bench_tau(input: &VisualInput, config: &PipelineConfig, model: &Model, grid: &[f64]) -> Result<Vec<TauRow>> {
    if grid.is_empty() {
        return Err(Error::Config("tau grid is empty".into()));
    }
    config.validate()?;
    let tokens = embed_input(input, config, model)?;
    let enc_config = config.encoder_config();
    let encode = |tau: f64| -> Result<(ReductionReport, Vec<tokred::Provenance>, Matrix)> {
        let (reduced, report) = tokred::reduce_with(&tokens, tau, config.merge).stage("reduce")?;
        let h_v = encoder::encoder_forward(&reduced, &model.encoder, &enc_config).stage("encode")?;
        Ok((report, reduced.kept_tokens().1, h_v))
    };
    let (_, base_provenance, base) = encode(0.0)?;
    let base_index: HashMap<_, _> = base_provenance.into_iter().enumerate().map(|(i, p)| (p, i)).collect();

    let mut rows: Vec<TauRow> = Vec::with_capacity(grid.len());
    for &tau in grid {
        let (report, provenance, h_v) = encode(tau)?;
        let mut total = 0.0;
        for (i, p) in provenance.iter().enumerate() {
            let j = *base_index.get(p).ok_or_else(|| {
                Error::Invariant(format!("position {p:?} kept at tau {tau} but pruned at tau 0"))
            })?;
            let d2: f64 = h_v.row(i).iter().zip(base.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            total += d2.sqrt();
        }
        let drift = if provenance.is_empty() { 0.0 } else { total / provenance.len() as f64 };
        rows.push(TauRow {
            tau,
            rate: report.rate,
            tokens_after_prune: report.total_after,
            drift,
        });
    }
    let mut sorted: Vec<&TauRow> = rows.iter().collect();
    sorted.sort_by(|a, b| a.tau.total_cmp(&b.tau));
    if let Some(w) = sorted.windows(2).find(|w| w[1].rate < w[0].rate) {
        return Err(Error::Invariant(format!(
            "pruning rate fell from {} at tau {} to {} at tau {}",
            w[0].rate, w[0].tau, w[1].rate, w[1].tau
        )));
    }
    Ok(rows)
}
