//! Cross-module verification harness.
//!
//! Suites run in parallel, each on its own random stream derived from the
//! master seed, so a given seed always produces the same summary apart from
//! timings. Randomized properties run `trials` instances (1000 by default);
//! the gradient suite runs one full-parameter check per model.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, derive_seed, ParamSet};
use crate::encoder::{self, EncoderConfig};
use crate::error::{Error, Result};
use crate::fusion::{self, ByteTokenizer, DecoderConfig, DecoderParams, MixedSequence, Segment, VisualSpan, IMAGE};
use crate::gradcheck::{self, EncoderFixture, FusedFixture, ProjectorFixture};
use crate::numkit::{self, Matrix};
use crate::pipeline::{self, Model, PipelineConfig};
use crate::projector::{self, ProjectorConfig, ProjectorParams};
use crate::rope2d::{self, Direction, RopeTable};
use crate::tokred::{self, MergeMode, Provenance};
use crate::vistream::{self, PixelPlane, PlaneSequence, SourceKind, TokenPlane, VisualInput};

pub const DEFAULT_TRIALS: usize = 1000;

/// Rotation under test: `(values, m, n, table) -> rotated`.
pub type RopeFn = fn(&[f64], usize, usize, &RopeTable) -> Vec<f64>;

/// The library rotation.
pub fn reference_rope(values: &[f64], m: usize, n: usize, table: &RopeTable) -> Vec<f64> {
    let mut out = values.to_vec();
    rope2d::rotate_in_place(&mut out, m, n, table, Direction::Forward);
    out
}

pub const SUITES: [&str; 10] = [
    "numkit",
    "rope",
    "vistream",
    "tokred",
    "encoder",
    "projector",
    "fusion",
    "checkpoint",
    "pipeline",
    "gradients",
];

const ROPE_DIMS: [usize; 3] = [4, 8, 64];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropertyResult {
    pub name: String,
    pub trials: usize,
    pub failures: usize,
    /// Largest observed error measure; 0 for exact properties.
    pub max_error: f64,
    pub tolerance: f64,
    pub first_failure: Option<String>,
}

impl PropertyResult {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub name: String,
    pub passed: bool,
    pub properties: Vec<PropertyResult>,
    pub elapsed_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub seed: u64,
    pub passed: bool,
    pub properties_checked: usize,
    pub trials: usize,
    pub failures: usize,
    pub suites: Vec<SuiteResult>,
}

/// Accumulates trials of one property. Each trial yields an error measure
/// compared against `tolerance` (`<=`); a trial that errors or yields NaN fails.
struct Property {
    result: PropertyResult,
}

impl Property {
    fn new(name: impl Into<String>, tolerance: f64) -> Self {
        Self {
            result: PropertyResult {
                name: name.into(),
                trials: 0,
                failures: 0,
                max_error: 0.0,
                tolerance,
                first_failure: None,
            },
        }
    }

    fn record(&mut self, outcome: Result<f64>, context: impl FnOnce() -> String) {
        let r = &mut self.result;
        r.trials += 1;
        let failure = match outcome {
            Ok(err) if err <= r.tolerance => {
                r.max_error = r.max_error.max(err);
                None
            }
            Ok(err) => {
                r.max_error = if err.is_nan() { f64::NAN } else { r.max_error.max(err) };
                Some(format!("error {err:e} > {:e}: {}", r.tolerance, context()))
            }
            Err(e) => Some(format!("{e}: {}", context())),
        };
        if let Some(msg) = failure {
            r.failures += 1;
            r.first_failure.get_or_insert(msg);
        }
    }

    fn run<R: Rng>(mut self, trials: usize, rng: &mut R, mut trial: impl FnMut(&mut R) -> Result<f64>) -> PropertyResult {
        for i in 0..trials {
            let outcome = trial(rng);
            self.record(outcome, || format!("trial {i}"));
        }
        self.result
    }
}

fn exact(ok: bool) -> f64 {
    if ok {
        0.0
    } else {
        1.0
    }
}

fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Matrix::from_vec(rows, cols, data).expect("finite samples")
}

fn random_vec<R: Rng>(rng: &mut R, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Harness configuration. `rope` lets tests swap in a faulty rotation.
#[derive(Clone, Copy, Debug)]
pub struct Harness {
    pub seed: u64,
    pub trials: usize,
    pub rope: RopeFn,
}

impl Harness {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            trials: DEFAULT_TRIALS,
            rope: reference_rope,
        }
    }

    /// Runs every suite, or only `only` when given.
    pub fn run(&self, only: Option<&str>) -> Result<Summary> {
        let selected: Vec<(usize, &str)> = match only {
            None => SUITES.iter().copied().enumerate().collect(),
            Some(name) => {
                let i = SUITES
                    .iter()
                    .position(|s| *s == name)
                    .ok_or_else(|| Error::Config(format!("unknown suite `{name}` (one of {})", SUITES.join(", "))))?;
                vec![(i, SUITES[i])]
            }
        };
        let suites: Vec<SuiteResult> = selected
            .par_iter()
            .map(|&(i, name)| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, 100 + i as u64));
                let start = Instant::now();
                let properties = self.suite(name, &mut rng);
                SuiteResult {
                    name: name.to_string(),
                    passed: properties.iter().all(PropertyResult::passed),
                    properties,
                    elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
                }
            })
            .collect();
        let all = suites.iter().flat_map(|s| &s.properties);
        Ok(Summary {
            seed: self.seed,
            passed: suites.iter().all(|s| s.passed),
            properties_checked: all.clone().count(),
            trials: all.clone().map(|p| p.trials).sum(),
            failures: all.map(|p| p.failures).sum(),
            suites,
        })
    }

    fn suite(&self, name: &str, rng: &mut ChaCha8Rng) -> Vec<PropertyResult> {
        match name {
            "numkit" => self.numkit(rng),
            "rope" => self.rope(rng),
            "vistream" => self.vistream(rng),
            "tokred" => self.tokred(rng),
            "encoder" => self.encoder(rng),
            "projector" => self.projector(rng),
            "fusion" => self.fusion(rng),
            "checkpoint" => self.checkpoint(rng),
            "pipeline" => self.pipeline(rng),
            "gradients" => self.gradients(rng),
            _ => unreachable!("suite names come from SUITES"),
        }
    }

    fn numkit(&self, rng: &mut ChaCha8Rng) -> Vec<PropertyResult> {
        let n = self.trials;
        vec![
            Property::new("matmul_matches_triple_loop", 1e-12).run(n, rng, |rng| {
                let (r, k, c) = (rng.random_range(1..7), rng.random_range(1..7), rng.random_range(1..7));
                let a = random_matrix(rng, r, k, 2.0);
                let b = random_matrix(rng, k, c, 2.0);
                let got = numkit::matmul(&a, &b)?;
                let mut err: f64 = 0.0;
                for i in 0..r {
                    for j in 0..c {
                        let mut s = 0.0;
                        for t in 0..k {
                            s += a.get(i, t) * b.get(t, j);
                        }
                        err = err.max((got.get(i, j) - s).abs());
                    }
                }
                Ok(err)
            }),
            Property::new("matmul_transpose_identity", 1e-12).run(n, rng, |rng| {
                let (r, k, c) = (rng.random_range(1..7), rng.random_range(1..7), rng.random_range(1..7));
                let a = random_matrix(rng, r, k, 2.0);
                let b = random_matrix(rng, k, c, 2.0);
                let left = numkit::matmul(&a, &b)?.transpose();
                let right = numkit::matmul(&b.transpose(), &a.transpose())?;
                Ok(left.max_abs_diff(&right))
            }),
            Property::new("softmax_rows_are_distributions", 1e-12).run(n, rng, |rng| {
                let (r, c) = (rng.random_range(1..6), rng.random_range(1..9));
                let m = random_matrix(rng, r, c, 30.0);
                let s = numkit::softmax_rows(&m);
                let mut err: f64 = 0.0;
                for row in s.iter_rows() {
                    if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                        return Ok(f64::INFINITY);
                    }
                    err = err.max((row.iter().sum::<f64>() - 1.0).abs());
                }
                Ok(err)
            }),
            Property::new("layer_norm_standardizes", 1e-9).run(n, rng, |rng| {
                let d = rng.random_range(2..17);
                let scale = rng.random_range(0.1..10.0);
                let v: Vec<f64> = (0..d).map(|_| rng.random_range(-scale..scale)).collect();
                let eps = 1e-6;
                let out = numkit::layer_norm(&v, &vec![1.0; d], &vec![0.0; d], eps)?;
                let mean_in = v.iter().sum::<f64>() / d as f64;
                let var_in = v.iter().map(|x| (x - mean_in).powi(2)).sum::<f64>() / d as f64;
                let mean = out.iter().sum::<f64>() / d as f64;
                let var = out.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d as f64;
                Ok(mean.abs().max((var - var_in / (var_in + eps)).abs()))
            }),
            Property::new("gelu_matches_erf_series", 1e-12).run(n, rng, |rng| {
                let x: f64 = rng.random_range(-3.0..3.0);
                // erf(z) = 2/√π Σ (−1)^k z^(2k+1) / (k! (2k+1))
                let z = x / std::f64::consts::SQRT_2;
                let (mut term, mut sum) = (z, 0.0);
                for k in 0..80 {
                    sum += term / (2 * k + 1) as f64;
                    term *= -z * z / (k + 1) as f64;
                }
                let erf = 2.0 / std::f64::consts::PI.sqrt() * sum;
                Ok((numkit::gelu(x) - 0.5 * x * (1.0 + erf)).abs())
            }),
        ]
    }

    fn rope(&self, rng: &mut ChaCha8Rng) -> Vec<PropertyResult> {
        let rope = self.rope;
        let tables: Vec<RopeTable> = ROPE_DIMS.iter().map(|&d| RopeTable::new(d).expect("valid width")).collect();
        let n = self.trials * ROPE_DIMS.len();
        let mut next = cycle(&tables);
        let mut props = Vec::new();

        props.push(Property::new("rope_identity_at_origin", 0.0).run(n, rng, |rng| {
            let table = next();
            let v = random_vec(rng, table.d());
            Ok(exact(rope(&v, 0, 0, table) == v))
        }));
        let mut next = cycle(&tables);
        props.push(Property::new("rope_norm_preserved", 1e-12).run(n, rng, |rng| {
            let table = next();
            let v = random_vec(rng, table.d());
            let (m, nn) = (rng.random_range(0..2048), rng.random_range(0..2048));
            Ok((norm(&rope(&v, m, nn, table)) - norm(&v)).abs() / norm(&v).max(1e-300))
        }));
        let mut next = cycle(&tables);
        props.push(Property::new("rope_relative_position", 1e-9).run(n, rng, |rng| {
            let table = next();
            let (q, k) = (random_vec(rng, table.d()), random_vec(rng, table.d()));
            let mut pos = || rng.random_range(0..512usize);
            let (mq, nq, mk, nk) = (pos(), pos(), pos(), pos());
            let (s, t) = (pos(), pos());
            let base = numkit::dot(&rope(&q, mq, nq, table), &rope(&k, mk, nk, table));
            let shifted = numkit::dot(&rope(&q, mq + s, nq + t, table), &rope(&k, mk + s, nk + t, table));
            Ok((base - shifted).abs() / (norm(&q) * norm(&k)).max(1.0))
        }));
        let mut next = cycle(&tables);
        props.push(Property::new("rope_composition", 1e-10).run(n, rng, |rng| {
            let table = next();
            let v = random_vec(rng, table.d());
            let mut pos = || rng.random_range(0..512usize);
            let (m1, n1, m2, n2) = (pos(), pos(), pos(), pos());
            let twice = rope(&rope(&v, m1, n1, table), m2, n2, table);
            let once = rope(&v, m1 + m2, n1 + n2, table);
            Ok(twice.iter().zip(&once).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
        }));
        let mut next = cycle(&tables);
        props.push(Property::new("rope_inverse_round_trip", 1e-12).run(n, rng, |rng| {
            let table = next();
            let v = random_vec(rng, table.d());
            let (m, nn) = (rng.random_range(0..2048), rng.random_range(0..2048));
            let mut back = rope(&v, m, nn, table);
            rope2d::rotate_in_place(&mut back, m, nn, table, Direction::Inverse);
            Ok(back.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
        }));
        let small: Vec<RopeTable> = ROPE_DIMS
            .iter()
            .map(|&d| RopeTable::with_max_position(d, 8).expect("valid width"))
            .collect();
        let mut next = cycle(&tables);
        props.push(Property::new("rope_cache_matches_direct", 0.0).run(n, rng, |rng| {
            let table = next();
            let short = small.iter().find(|t| t.d() == table.d()).expect("same widths");
            let p = rng.random_range(0..64);
            let pair = rng.random_range(0..table.freqs().len());
            Ok(exact(table.cos_sin(p, pair) == short.cos_sin(p, pair)))
        }));
        props
    }

    fn vistream(&self, rng: &mut ChaCha8Rng) -> Vec<PropertyResult> {
        let n = self.trials;
        let random_plane = |rng: &mut ChaCha8Rng, h: usize, w: usize| {
            PixelPlane::from_fn(h, w, |_, _| rng.random::<f64>()).expect("finite pixels")
        };
        vec![
            Property::new("patch_count_is_ceil_grid", 0.0).run(n, rng, |rng| {
                let (h, w, p) = (rng.random_range(1..40), rng.random_range(1..40), rng.random_range(1..9));
                let grid = vistream::patchify(&random_plane(rng, h, w), p)?;
                let (gh, gw) = (h.div_ceil(p), w.div_ceil(p));
                Ok(exact(
                    (grid.grid_h, grid.grid_w) == (gh, gw)
                        && grid.vectors.shape() == (gh * gw, p * p)
                        && grid.coords.len() == gh * gw,
                ))
            }),
            Property::new("patchify_reassembles_plane", 0.0).run(n, rng, |rng| {
                let (h, w, p) = (rng.random_range(1..30), rng.random_range(1..30), rng.random_range(1..7));
                let plane = random_plane(rng, h, w);
                let grid = vistream::patchify(&plane, p)?;
                let mut ok = true;
                for (i, &(m, nn)) in grid.coords.iter().enumerate() {
                    let row = grid.vectors.row(i);
                    for (j, &v) in row.iter().enumerate() {
                        let (r, c) = (m * p + j / p, nn * p + j % p);
                        let want = if r < h && c < w { plane.get(r, c) } else { 0.0 };
                        ok &= v == want;
                    }
                }
                Ok(exact(ok))
            }),
            Property::new("decompose_preserves_planes", 0.0).run(n, rng, |rng| {
                let kind = [SourceKind::Image2D, SourceKind::Volume3D, SourceKind::Video][rng.random_range(0..3)];
                let count = if kind == SourceKind::Image2D { 1 } else { rng.random_range(1..6) };
                let (h, w) = (rng.random_range(1..6), rng.random_range(1..6));
                let planes: Vec<PixelPlane> = (0..count).map(|_| random_plane(rng, h, w)).collect();
                let seq = vistream::decompose(&VisualInput::new(kind, planes.clone())?)?;
                Ok(exact(
                    seq.source_kind == kind && seq.planes == planes && seq.plane_index == (0..count).collect::<Vec<_>>(),
                ))
            }),
            Property::new("stride_sampling_count_and_order", 0.0).run(n, rng, |rng| {
                let len = rng.random_range(1..50);
                let stride = rng.random_range(1..10);
                let frames: Vec<usize> = (0..len).collect();
                let kept = vistream::sample_frames(&frames, stride)?;
                Ok(exact(
                    kept.len() == len.div_ceil(stride) && kept.iter().enumerate().all(|(i, &f)| f == i * stride),
                ))
            }),
        ]
    }

    fn tokred(&self, rng: &mut ChaCha8Rng) -> Vec<PropertyResult> {
        let n = self.trials;
        vec![
            Property::new("merge_yields_ceil_quarter", 0.0).run(n, rng, |rng| {
                let (gh, gw, d) = (rng.random_range(1..12), rng.random_range(1..12), rng.random_range(1..5));
                let plane = TokenPlane::new(gh, gw, random_matrix(rng, gh * gw, d, 1.0))?;
                let merged = tokred::merge_2x2(&plane)?;
                Ok(exact(merged.len() == gh.div_ceil(2) * gw.div_ceil(2) && merged.width() == d))
            }),
            Property::new("prune_matches_brute_force", 0.0).run(n, rng, |rng| {
                let (seq, tau) = random_token_sequence(rng);
                let (pruned, _) = tokred::prune_interplane(&seq, tau)?;
                Ok(exact(pruned.keep == brute_force_mask(&seq, tau)))
            }),
            Property::new("prune_monotone_in_tau", 0.0).run(n, rng, |rng| {
                let (seq, tau) = random_token_sequence(rng);
                let tau2 = tau + rng.random_range(0.0..0.3);
                let (lo, _) = tokred::prune_interplane(&seq, tau)?;
                let (hi, _) = tokred::prune_interplane(&seq, tau2)?;
                let subset = lo
                    .keep
                    .iter()
                    .flatten()
                    .zip(hi.keep.iter().flatten())
                    .all(|(&a, &b)| a || !b);
                Ok(exact(subset))
            }),
            Property::new("report_reconciles", 0.0).run(n, rng, |rng| {
                let (seq, tau) = random_token_sequence(rng);
                let merge = [MergeMode::Auto, MergeMode::On, MergeMode::Off][rng.random_range(0..3)];
                let (pruned, report) = tokred::reduce_with(&seq, tau, merge)?;
                report.check()?;
                let expected_merge: usize = if merge.applies_to(seq.source_kind) {
                    seq.planes.iter().map(|p| p.grid_h.div_ceil(2) * p.grid_w.div_ceil(2)).sum()
                } else {
                    report.total_before
                };
                Ok(exact(
                    report.total_after_merge == expected_merge
                        && pruned.kept_count() == report.total_after
                        && pruned.kept_tokens().0.rows() == report.total_after,
                ))
            }),
            Property::new("first_plane_fully_kept", 0.0).run(n, rng, |rng| {
                let (seq, _) = random_token_sequence(rng);
                let (pruned, _) = tokred::prune_interplane(&seq, f64::INFINITY)?;
                let later_pruned = pruned.keep[1..].iter().flatten().all(|&k| !k);
                Ok(exact(pruned.keep[0].iter().all(|&k| k) && later_pruned))
            }),
        ]
    }

    fn encoder(&self, rng: &mut ChaCha8Rng) -> Vec<PropertyResult> {
        let n = self.trials;
        let config = EncoderConfig {
            patch: 4,
            ..EncoderConfig::default()
        };
        let mut params = encoder::init_params(&config, rng.random()).expect("valid desk config");
        gradcheck::perturb(&mut params, rng, gradcheck::PERTURB_STD);
        let rope = config.rope_table().expect("valid desk config");
        let inputs = |rng: &mut ChaCha8Rng| {
            let count = rng.random_range(1..7);
            let tokens = random_matrix(rng, count, config.d_model, 2.0);
            let coords: Vec<(usize, usize)> = (0..count).map(|_| (rng.random_range(0..20), rng.random_range(0..20))).collect();
            (tokens, coords)
        };
        vec![
            Property::new("encoder_permutation_equivariant", 1e-12).run(n, rng, |rng| {
                let (tokens, coords) = inputs(rng);
                let mut order: Vec<usize> = (0..coords.len()).collect();
                for i in (1..order.len()).rev() {
                    order.swap(i, rng.random_range(0..=i));
                }
                let out = encoder::encode_tokens(&tokens, &coords, &params, &config)?;
                let perm_coords: Vec<_> = order.iter().map(|&i| coords[i]).collect();
                let perm = encoder::encode_tokens(&tokens.select_rows(&order), &perm_coords, &params, &config)?;
                Ok(perm.max_abs_diff(&out.select_rows(&order)))
            }),
            Property::new("encoder_translation_invariant", 1e-10).run(n, rng, |rng| {
                let (tokens, coords) = inputs(rng);
                let (s, t) = (rng.random_range(0..100), rng.random_range(0..100));
                let shifted: Vec<_> = coords.iter().map(|&(m, nn)| (m + s, nn + t)).collect();
                let a = encoder::encode_tokens(&tokens, &coords, &params, &config)?;
                let b = encoder::encode_tokens(&tokens, &shifted, &params, &config)?;
                Ok(a.max_abs_diff(&b))
            }),
            Property::new("attention_rows_are_distributions", 1e-12).run(n, rng, |rng| {
                let (tokens, coords) = inputs(rng);
                let heads = encoder::attention_weights(&tokens, &coords, &params.blocks[0], &rope, &config)?;
                let mut err: f64 = 0.0;
                for row in heads.iter().flat_map(Matrix::iter_rows) {
                    if row.iter().any(|&p| p < 0.0) {
                        return Ok(f64::INFINITY);
                    }
                    err = err.max((row.iter().sum::<f64>() - 1.0).abs());
                }
                Ok(err)
            }),
        ]
    }

    fn projector(&self, rng: &mut ChaCha8Rng) -> Vec<PropertyResult> {
        let n = self.trials;
        let config = ProjectorConfig::default();
        vec![
            Property::new("projector_matches_two_step", 1e-12).run(n, rng, |rng| {
                let mut params = ProjectorParams::init(&config, rng.random())?;
                gradcheck::perturb(&mut params, rng, 0.5);
                let rows = rng.random_range(1..6);
                let h = random_matrix(rng, rows, config.d_model, 2.0);
                let got = projector::project(&h, &params)?;
                let mut err: f64 = 0.0;
                for (r, x) in h.iter_rows().enumerate() {
                    let hidden: Vec<f64> = (0..config.d_hidden)
                        .map(|j| numkit::gelu(numkit::dot(params.w1.row(j), x) + params.b1.get(0, j)))
                        .collect();
                    for k in 0..config.d_llm {
                        let want = numkit::dot(params.w2.row(k), &hidden) + params.b2.get(0, k);
                        err = err.max((got.get(r, k) - want).abs());
                    }
                }
                Ok(err)
            }),
            Property::new("projector_rows_independent", 0.0).run(n, rng, |rng| {
                let mut params = ProjectorParams::init(&config, rng.random())?;
                gradcheck::perturb(&mut params, rng, 0.5);
                let rows = rng.random_range(2..6);
                let h = random_matrix(rng, rows, config.d_model, 2.0);
                let all = projector::project(&h, &params)?;
                let r = rng.random_range(0..h.rows());
                let one = projector::project(&h.select_rows(&[r]), &params)?;
                Ok(exact(one.row(0) == all.row(r)))
            }),
        ]
    }

    fn fusion(&self, rng: &mut ChaCha8Rng) -> Vec<PropertyResult> {
        let n = self.trials;
        let config = DecoderConfig::default();
        let mut params = DecoderParams::init(&config, rng.random()).expect("valid decoder config");
        gradcheck::perturb(&mut params, rng, gradcheck::PERTURB_STD);
        let tok = ByteTokenizer;
        vec![
            Property::new("decoder_causal_bitwise", 0.0).run(n, rng, |rng| {
                let len = rng.random_range(2..=24);
                let x = random_matrix(rng, len, config.d_model, 1.0);
                let t = rng.random_range(0..len - 1);
                let mut y = x.clone();
                for r in t + 1..len {
                    for v in y.row_mut(r) {
                        *v = rng.random_range(-5.0..5.0);
                    }
                }
                let logits = |m: Matrix| {
                    let seq = MixedSequence {
                        segments: vec![Segment::Text { offset: 0, token: 0 }; m.rows()],
                        embeddings: m,
                    };
                    fusion::decoder_forward(&seq, &params, &config)
                };
                let (a, b) = (logits(x)?, logits(y)?);
                let same = (0..=t).all(|r| {
                    a.row(r).iter().zip(b.row(r)).all(|(p, q)| p.to_bits() == q.to_bits())
                });
                Ok(exact(same))
            }),
            Property::new("tokenizer_round_trip", 0.0).run(n, rng, |rng| {
                let bytes: Vec<u8> = (0..rng.random_range(0..40)).map(|_| rng.random()).collect();
                Ok(exact(tok.decode(&tok.encode(&bytes))? == bytes))
            }),
            Property::new("assemble_layout", 0.0).run(n, rng, |rng| {
                let text: Vec<u32> = (0..rng.random_range(0..10)).map(|_| rng.random_range(0..256)).collect();
                let at = rng.random_range(0..=text.len());
                let mut ids = text.clone();
                ids.insert(at, IMAGE);
                let count = rng.random_range(0..8);
                let span = VisualSpan {
                    embeddings: random_matrix(rng, count, config.d_model, 1.0),
                    provenance: (0..count).map(|i| Provenance { plane: i / 3, m: i % 3, n: 0 }).collect(),
                };
                let seq = fusion::assemble(&ids, &span, &params)?;
                let visual_rows_match = (0..count).all(|i| seq.embeddings.row(at + i) == span.embeddings.row(i));
                let visual_segments: Vec<Provenance> = seq
                    .segments
                    .iter()
                    .filter_map(|s| match s {
                        Segment::Visual(p) => Some(*p),
                        _ => None,
                    })
                    .collect();
                Ok(exact(
                    seq.len() == text.len() + count && visual_rows_match && visual_segments == span.provenance,
                ))
            }),
            Property::new("targets_are_next_text_tokens", 0.0).run(n, rng, |rng| {
                let segments: Vec<Segment> = (0..rng.random_range(1..20))
                    .map(|i| {
                        if rng.random::<bool>() {
                            Segment::Text { offset: i, token: rng.random_range(0..260) }
                        } else {
                            Segment::Visual(Provenance { plane: 0, m: i, n: 0 })
                        }
                    })
                    .collect();
                let targets = fusion::next_token_targets(&segments);
                let ok = targets.len() == segments.len()
                    && targets.iter().enumerate().all(|(t, target)| match segments.get(t + 1) {
                        Some(Segment::Text { token, .. }) => *target == Some(*token as usize),
                        _ => target.is_none(),
                    });
                Ok(exact(ok))
            }),
        ]
    }

    fn checkpoint(&self, rng: &mut ChaCha8Rng) -> Vec<PropertyResult> {
        let config = ProjectorConfig::default();
        vec![Property::new("checkpoint_round_trip_bitwise", 0.0).run(self.trials, rng, |rng| {
            let mut params = ProjectorParams::init(&config, rng.random())?;
            gradcheck::perturb(&mut params, rng, 1.0);
            let (bytes, manifest) = checkpoint::encode(&params);
            let manifest: checkpoint::Manifest = serde_json::from_str(&serde_json::to_string(&manifest)?)?;
            let mut restored = ProjectorParams::init(&config, rng.random())?;
            checkpoint::decode_into(&mut restored, &bytes, &manifest)?;
            let same = params
                .tensors()
                .iter()
                .zip(restored.tensors())
                .all(|((_, a), (_, b))| a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
            Ok(exact(same))
        })]
    }

    fn pipeline(&self, rng: &mut ChaCha8Rng) -> Vec<PropertyResult> {
        let n = self.trials;
        let mut config = PipelineConfig::new("", SourceKind::Video);
        config.patch = 4;
        let model = Model::init(&config).expect("valid default config");
        let input = |rng: &mut ChaCha8Rng| -> Result<VisualInput> {
            let kind = [SourceKind::Image2D, SourceKind::Volume3D, SourceKind::Video][rng.random_range(0..3)];
            let planes = if kind == SourceKind::Image2D { 1 } else { rng.random_range(1..5) };
            let (h, w) = (rng.random_range(1..20), rng.random_range(1..20));
            let first = PixelPlane::from_fn(h, w, |_, _| rng.random::<f64>())?;
            let mut out = vec![first];
            for _ in 1..planes {
                let prev = out.last().expect("non-empty").clone();
                let jitter = if rng.random::<bool>() { 0.0 } else { rng.random_range(0.0..0.5) };
                out.push(PixelPlane::from_fn(h, w, |r, c| prev.get(r, c) + rng.random_range(-jitter..=jitter))?);
            }
            VisualInput::new(kind, out)
        };
        vec![
            Property::new("pipeline_report_reconciles", 0.0).run(n, rng, |rng| {
                let input = input(rng)?;
                let out = pipeline::run_on_input(&input, &config, &model)?;
                let r = &out.report;
                let [gh, gw] = r.grid;
                let merged = if r.merged { gh.div_ceil(2) * gw.div_ceil(2) } else { gh * gw };
                let pruned: usize = r.per_plane.iter().map(|p| p.pruned).sum();
                Ok(exact(
                    r.tokens_before == r.planes * gh * gw
                        && r.tokens_after_merge == r.planes * merged
                        && r.tokens_after_prune == r.tokens_after_merge - pruned
                        && r.merged == (input.kind() != SourceKind::Image2D)
                        && r.encoder_output_shape == [r.tokens_after_prune, config.encoder.d_model]
                        && r.projector_output_shape == [r.tokens_after_prune, config.d_llm],
                ))
            }),
            Property::new("pipeline_deterministic", 0.0).run(n, rng, |rng| {
                let input = input(rng)?;
                let a = pipeline::run_on_input(&input, &config, &model)?;
                let b = pipeline::run_on_input(&input, &config, &Model::init(&config)?)?;
                Ok(exact(
                    a.report.to_json_without_timings()? == b.report.to_json_without_timings()?
                        && a.h_proj.data().iter().zip(b.h_proj.data()).all(|(x, y)| x.to_bits() == y.to_bits()),
                ))
            }),
        ]
    }

    fn gradients(&self, rng: &mut ChaCha8Rng) -> Vec<PropertyResult> {
        let config = EncoderConfig::default();
        let grad = |name: &str, report: Result<gradcheck::GradReport>| {
            let mut p = Property::new(name, 1e-5);
            let detail = report.as_ref().ok().and_then(|r| r.worst.clone());
            p.record(report.map(|r| r.max_rel_error), || format!("worst entry {detail:?}"));
            p.result
        };
        let (s1, s2, s3) = (rng.random(), rng.random(), rng.random());
        vec![
            grad(
                "encoder_gradients",
                EncoderFixture::random(config, 4, 5, s1).and_then(|f| f.check()),
            ),
            grad(
                "projector_gradients",
                ProjectorFixture::random(ProjectorConfig::default(), 10, s2).and_then(|f| f.check()),
            ),
            grad(
                "fused_decoder_gradients",
                FusedFixture::random(config, DecoderConfig::default(), (2, 3), 8, s3).and_then(|f| f.check()),
            ),
        ]
    }
}

/// Round-robin over `tables`, one per trial.
fn cycle<'a>(tables: &'a [RopeTable]) -> impl FnMut() -> &'a RopeTable + 'a {
    let mut i = 0;
    move || {
        let t = &tables[i % tables.len()];
        i += 1;
        t
    }
}

/// ≤ 4 planes, ≤ 3×3 grids, width ≤ 8. Values sit on a coarse lattice so
/// exact duplicates and distances at the threshold both occur.
fn random_token_sequence(rng: &mut ChaCha8Rng) -> (PlaneSequence<TokenPlane>, f64) {
    let planes = rng.random_range(1..=4);
    let (gh, gw, d) = (rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(1..=8));
    let lattice = |rng: &mut ChaCha8Rng| f64::from(rng.random_range(-4..=4_i32)) * 0.05;
    let mut out: Vec<TokenPlane> = Vec::with_capacity(planes);
    for p in 0..planes {
        let tokens = Matrix::from_vec(
            gh * gw,
            d,
            (0..gh * gw * d)
                .map(|i| match (p, rng.random_range(0..3)) {
                    (0, _) | (_, 0) => lattice(rng),
                    _ => out[p - 1].tokens.data()[i] + if rng.random::<bool>() { 0.0 } else { lattice(rng) },
                })
                .collect(),
        )
        .expect("finite lattice values");
        out.push(TokenPlane::new(gh, gw, tokens).expect("grid matches rows"));
    }
    let kind = [SourceKind::Volume3D, SourceKind::Video][rng.random_range(0..2)];
    let tau = match rng.random_range(0..4) {
        0 => 0.0,
        1 => 0.1,
        2 => f64::from(rng.random_range(0..8_i32)) * 0.025,
        _ => rng.random_range(0.0..0.4),
    };
    (PlaneSequence::new(kind, out).expect("non-empty"), tau)
}

/// Keep mask recomputed site by site from the definition.
fn brute_force_mask(seq: &PlaneSequence<TokenPlane>, tau: f64) -> Vec<Vec<bool>> {
    let mut masks = Vec::new();
    for p in 0..seq.planes.len() {
        let cur = &seq.planes[p];
        let mut mask = Vec::new();
        for m in 0..cur.grid_h {
            for nn in 0..cur.grid_w {
                if p == 0 {
                    mask.push(true);
                    continue;
                }
                let (a, b) = (cur.token(m, nn), seq.planes[p - 1].token(m, nn));
                let mut total = 0.0;
                for i in 0..a.len() {
                    total += (a[i] - b[i]).abs();
                }
                let dist = total / a.len() as f64;
                let redundant = if tau == 0.0 { dist == 0.0 } else { dist < tau };
                mask.push(!redundant);
            }
        }
        masks.push(mask);
    }
    masks
}
