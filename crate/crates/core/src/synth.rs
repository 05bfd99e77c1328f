//! Calibrated synthetic volumes and videos.
//!
//! The generator works on merge sites: the `2p × 2p` pixel blocks whose four
//! patches collapse into one token after the 2×2 merge. For every adjacent
//! plane pair exactly `⌊redundancy · sites⌋` sites repeat the previous plane
//! up to small noise, and the rest change. Distances are checked in the
//! embedding space of the patch projection that the pipeline will use, so
//! the redundant sites land below `tau` and the changed ones well above it.

use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{self, quantize_u8};
use crate::numkit::Matrix;
use crate::tokred::MERGE_FACTOR;
use crate::vistream::{PixelPlane, SourceKind, VisualInput};

/// Redundant sites get per-pixel noise within `±tau · REDUNDANT_NOISE`.
pub const REDUNDANT_NOISE: f64 = 0.1;
/// Changed sites must sit at least `tau · CHANGED_MARGIN` from their predecessor.
pub const CHANGED_MARGIN: f64 = 2.0;
/// Redundant sites must sit below `tau · REDUNDANT_MARGIN`.
pub const REDUNDANT_MARGIN: f64 = 0.5;
const MAX_ATTEMPTS: usize = 100;
const CONTRAST: f64 = 0.4;

/// `kind:redundancy:planes:HxW`, e.g. `video:0.629:8:448x448`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub kind: SourceKind,
    pub redundancy: f64,
    pub planes: usize,
    pub height: usize,
    pub width: usize,
}

impl FromStr for SynthSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("synthetic spec `{s}` is not kind:redundancy:planes:HxW"));
        let parts: Vec<&str> = s.split(':').collect();
        let [kind, redundancy, planes, dims] = parts.as_slice() else {
            return Err(bad());
        };
        let (h, w) = dims.split_once(['x', 'X']).ok_or_else(bad)?;
        Ok(Self {
            kind: kind.parse()?,
            redundancy: redundancy.parse().map_err(|_| bad())?,
            planes: planes.parse().map_err(|_| bad())?,
            height: h.parse().map_err(|_| bad())?,
            width: w.parse().map_err(|_| bad())?,
        })
    }
}

impl SynthSpec {
    /// Merge sites per plane for the given patch size.
    pub fn sites(&self, patch: usize) -> usize {
        let block = patch * MERGE_FACTOR;
        (self.height / block) * (self.width / block)
    }

    /// Fraction of post-merge tokens the pruning stage should remove.
    pub fn expected_rate(&self, patch: usize) -> f64 {
        let sites = self.sites(patch);
        let per_pair = (self.redundancy * sites as f64).floor();
        (self.planes - 1) as f64 * per_pair / (self.planes * sites) as f64
    }

    fn validate(&self, patch: usize, tau: f64) -> Result<()> {
        if self.kind == SourceKind::Image2D {
            return Err(Error::Config("synthetic corpora are volumes or videos".into()));
        }
        if !(0.0..=1.0).contains(&self.redundancy) {
            return Err(Error::Config(format!("redundancy {} outside [0, 1]", self.redundancy)));
        }
        if self.planes == 0 {
            return Err(Error::Config("synthetic corpus needs at least one plane".into()));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::Config(format!("calibration tau must be positive, got {tau}")));
        }
        let block = patch * MERGE_FACTOR;
        if patch == 0 || !self.height.is_multiple_of(block) || !self.width.is_multiple_of(block) {
            return Err(Error::Config(format!(
                "dims {}x{} must be nonzero multiples of {block}",
                self.height, self.width
            )));
        }
        if self.sites(patch) == 0 {
            return Err(Error::Config("synthetic corpus has zero merge sites".into()));
        }
        Ok(())
    }
}

/// Site-level generator bound to a patch projection.
struct SiteModel<'a> {
    w_embed: &'a Matrix,
    patch: usize,
    kind: SourceKind,
}

impl SiteModel<'_> {
    /// Rounds to what the on-disk format stores.
    fn storable(&self, v: f64) -> f64 {
        let v = v.clamp(0.0, 1.0);
        match self.kind {
            SourceKind::Video | SourceKind::Image2D => f64::from(quantize_u8(v)) / 255.0,
            SourceKind::Volume3D => f64::from(v as f32),
        }
    }

    /// Mean of the four patch vectors of a site block (`2p × 2p`, row-major).
    fn mean_patch(&self, block: &[f64]) -> Vec<f64> {
        let p = self.patch;
        let side = 2 * p;
        let mut out = vec![0.0; p * p];
        for (i, &v) in block.iter().enumerate() {
            let (r, c) = (i / side, i % side);
            out[(r % p) * p + c % p] += v / 4.0;
        }
        out
    }

    /// Mean absolute difference of the merged tokens of two site blocks.
    /// The bias cancels, so only the projection matters.
    fn distance(&self, a: &[f64], b: &[f64]) -> f64 {
        let (ma, mb) = (self.mean_patch(a), self.mean_patch(b));
        let delta: Vec<f64> = ma.iter().zip(&mb).map(|(x, y)| x - y).collect();
        let d = self.w_embed.rows();
        self.w_embed
            .iter_rows()
            .map(|w| w.iter().zip(&delta).map(|(a, b)| a * b).sum::<f64>().abs())
            .sum::<f64>()
            / d as f64
    }

    /// A block whose patch pattern follows the sign of `Wᵀσ` for random σ,
    /// which drives every token component away from the previous one.
    fn fresh_block<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let p = self.patch;
        let sigma: Vec<f64> = (0..self.w_embed.rows())
            .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
            .collect();
        let pattern: Vec<f64> = (0..p * p)
            .map(|j| {
                let s: f64 = sigma.iter().enumerate().map(|(k, sk)| sk * self.w_embed.get(k, j)).sum();
                self.storable(0.5 + CONTRAST * s.signum())
            })
            .collect();
        let side = 2 * p;
        (0..side * side).map(|i| pattern[(i / side % p) * p + i % side % p]).collect()
    }

    fn noisy_copy<R: Rng>(&self, rng: &mut R, prev: &[f64], amplitude: f64) -> Vec<f64> {
        prev.iter()
            .map(|&v| self.storable(v + rng.random_range(-amplitude..=amplitude)))
            .collect()
    }
}

/// Builds a calibrated corpus in memory. `w_embed` is the patch projection
/// (d × patch²) the pipeline will embed with.
pub fn synthesize(spec: &SynthSpec, w_embed: &Matrix, patch: usize, tau: f64, seed: u64) -> Result<VisualInput> {
    spec.validate(patch, tau)?;
    if w_embed.cols() != patch * patch {
        return Err(Error::LengthMismatch {
            op: "synthetic patch projection",
            expected: patch * patch,
            found: w_embed.cols(),
        });
    }
    let model = SiteModel {
        w_embed,
        patch,
        kind: spec.kind,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sites = spec.sites(patch);
    let redundant_per_pair = (spec.redundancy * sites as f64).floor() as usize;

    let mut current: Vec<Vec<f64>> = (0..sites).map(|_| model.fresh_block(&mut rng)).collect();
    let mut planes = vec![assemble_plane(spec, patch, &current)?];
    for _ in 1..spec.planes {
        let mut redundant = vec![false; sites];
        for i in index::sample(&mut rng, sites, redundant_per_pair) {
            redundant[i] = true;
        }
        let mut next = Vec::with_capacity(sites);
        for (prev, &is_redundant) in current.iter().zip(&redundant) {
            let mut accepted = None;
            for _ in 0..MAX_ATTEMPTS {
                let candidate = if is_redundant {
                    model.noisy_copy(&mut rng, prev, tau * REDUNDANT_NOISE)
                } else {
                    model.fresh_block(&mut rng)
                };
                let dist = model.distance(prev, &candidate);
                let ok = if is_redundant {
                    dist < tau * REDUNDANT_MARGIN
                } else {
                    dist >= tau * CHANGED_MARGIN
                };
                if ok {
                    accepted = Some(candidate);
                    break;
                }
            }
            next.push(accepted.ok_or_else(|| {
                Error::Config(format!(
                    "could not place a {} site at tau {tau} in {MAX_ATTEMPTS} attempts",
                    if is_redundant { "redundant" } else { "changed" }
                ))
            })?);
        }
        current = next;
        planes.push(assemble_plane(spec, patch, &current)?);
    }
    VisualInput::new(spec.kind, planes)
}

fn assemble_plane(spec: &SynthSpec, patch: usize, blocks: &[Vec<f64>]) -> Result<PixelPlane> {
    let side = patch * MERGE_FACTOR;
    let sites_w = spec.width / side;
    PixelPlane::from_fn(spec.height, spec.width, |r, c| {
        let site = (r / side) * sites_w + c / side;
        blocks[site][(r % side) * side + c % side]
    })
}

/// [`synthesize`] and write the result where [`io::load_input`] reads it.
pub fn gen_synthetic(
    spec: &SynthSpec,
    w_embed: &Matrix,
    patch: usize,
    tau: f64,
    seed: u64,
    out: &Path,
) -> Result<VisualInput> {
    let input = synthesize(spec, w_embed, patch, tau, seed)?;
    io::save_input(out, &input)?;
    Ok(input)
}
