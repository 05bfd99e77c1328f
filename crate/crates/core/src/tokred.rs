//! Two-stage visual token reduction.
//!
//! Stage 1 merges each 2×2 block of a plane's tokens into one (volumes and
//! videos only). Stage 2 drops a token when its mean absolute difference to
//! the token at the same grid site of the previous plane is below `tau`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{self, Matrix};
use crate::vistream::{PlaneSequence, SourceKind, TokenPlane};

/// Default pruning threshold.
pub const DEFAULT_TAU: f64 = 0.1;

/// Spatial merge factor of stage 1 (a 2×2 block becomes one token).
pub const MERGE_FACTOR: usize = 2;

/// Kept/pruned counts for one plane.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlaneCount {
    pub plane_index: usize,
    pub kept: usize,
    pub pruned: usize,
}

/// Token accounting for a reduction run.
///
/// `rate` is the inter-plane pruning rate `pruned / total_after_merge`;
/// the merge stage is accounted separately in `merged_away`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReductionReport {
    pub total_before: usize,
    pub total_after_merge: usize,
    pub total_after: usize,
    pub merged_away: usize,
    pub pruned: usize,
    pub rate: f64,
    pub per_plane: Vec<PlaneCount>,
    pub tau: f64,
}

impl ReductionReport {
    /// Checks that every count reconciles exactly.
    pub fn check(&self) -> Result<()> {
        let per_kept: usize = self.per_plane.iter().map(|p| p.kept).sum();
        let per_pruned: usize = self.per_plane.iter().map(|p| p.pruned).sum();
        let ok = self.total_before == self.total_after_merge + self.merged_away
            && self.total_after == self.total_after_merge - self.pruned
            && per_kept == self.total_after
            && per_pruned == self.pruned
            && (0.0..=1.0).contains(&self.rate);
        if ok {
            Ok(())
        } else {
            Err(Error::Invariant(format!("reduction counts do not reconcile: {self:?}")))
        }
    }
}

/// Where a kept token came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Provenance {
    pub plane: usize,
    pub m: usize,
    pub n: usize,
}

/// Planes with a per-token keep mask.
#[derive(Clone, Debug, PartialEq)]
pub struct PrunedSequence {
    pub source_kind: SourceKind,
    pub planes: Vec<TokenPlane>,
    pub plane_index: Vec<usize>,
    pub keep: Vec<Vec<bool>>,
}

impl PrunedSequence {
    /// Wraps a sequence with every token kept.
    pub fn keep_all(seq: PlaneSequence<TokenPlane>) -> Self {
        let keep = seq.planes.iter().map(|p| vec![true; p.len()]).collect();
        Self {
            source_kind: seq.source_kind,
            planes: seq.planes,
            plane_index: seq.plane_index,
            keep,
        }
    }

    pub fn kept_count(&self) -> usize {
        self.keep.iter().flatten().filter(|&&k| k).count()
    }

    pub fn width(&self) -> usize {
        self.planes.first().map_or(0, TokenPlane::width)
    }

    /// Kept tokens stacked plane-major, row-major within each plane.
    pub fn kept_tokens(&self) -> (Matrix, Vec<Provenance>) {
        let mut rows = Vec::new();
        let mut provenance = Vec::new();
        for ((plane, keep), &plane_index) in self.planes.iter().zip(&self.keep).zip(&self.plane_index) {
            for (i, &(m, n)) in plane.coords.iter().enumerate() {
                if keep[i] {
                    rows.extend_from_slice(plane.tokens.row(i));
                    provenance.push(Provenance {
                        plane: plane_index,
                        m,
                        n,
                    });
                }
            }
        }
        let tokens = Matrix::from_vec(provenance.len(), self.width(), rows)
            .expect("kept tokens are finite rows of uniform width");
        (tokens, provenance)
    }
}

/// Merges each 2×2 block of tokens into its bilinear (block-mean) value.
pub fn merge_2x2(plane: &TokenPlane) -> Result<TokenPlane> {
    if plane.is_empty() {
        return Err(Error::Empty("token plane"));
    }
    let (tokens, gh, gw) = numkit::bilinear_downsample2x(&plane.tokens, plane.grid_h, plane.grid_w)?;
    TokenPlane::new(gh, gw, tokens)
}

/// Mean absolute difference between two equal-width tokens.
#[inline]
pub fn normalized_l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// The pruning predicate. Exact duplicates are always redundant, so `tau = 0`
/// removes only identical tokens.
#[inline]
pub fn is_redundant(distance: f64, tau: f64) -> bool {
    distance < tau || distance == 0.0
}

fn check_tau(tau: f64) -> Result<()> {
    if tau.is_nan() || tau < 0.0 {
        return Err(Error::Config(format!("tau must be >= 0, got {tau}")));
    }
    Ok(())
}

/// Inter-plane pruning against the previous plane's pre-pruning tokens.
pub fn prune_interplane(seq: &PlaneSequence<TokenPlane>, tau: f64) -> Result<(PrunedSequence, ReductionReport)> {
    check_tau(tau)?;
    let first = seq.planes.first().ok_or(Error::Empty("plane sequence"))?;
    let shape = (first.grid_h, first.grid_w);
    for p in &seq.planes {
        if (p.grid_h, p.grid_w) != shape {
            return Err(Error::ShapeMismatch {
                op: "prune_interplane grids",
                left: shape,
                right: (p.grid_h, p.grid_w),
            });
        }
        if p.width() != first.width() {
            return Err(Error::LengthMismatch {
                op: "prune_interplane token width",
                expected: first.width(),
                found: p.width(),
            });
        }
    }

    let mut keep = Vec::with_capacity(seq.len());
    keep.push(vec![true; first.len()]);
    for pair in seq.planes.windows(2) {
        let (prev, cur) = (&pair[0], &pair[1]);
        keep.push(
            (0..cur.len())
                .map(|i| !is_redundant(normalized_l1(cur.tokens.row(i), prev.tokens.row(i)), tau))
                .collect(),
        );
    }

    let total: usize = seq.planes.iter().map(TokenPlane::len).sum();
    let per_plane: Vec<PlaneCount> = keep
        .iter()
        .zip(&seq.plane_index)
        .map(|(mask, &plane_index)| {
            let kept = mask.iter().filter(|&&k| k).count();
            PlaneCount {
                plane_index,
                kept,
                pruned: mask.len() - kept,
            }
        })
        .collect();
    let pruned: usize = per_plane.iter().map(|p| p.pruned).sum();
    let report = ReductionReport {
        total_before: total,
        total_after_merge: total,
        total_after: total - pruned,
        merged_away: 0,
        pruned,
        rate: pruned as f64 / total as f64,
        per_plane,
        tau,
    };
    let pruned_seq = PrunedSequence {
        source_kind: seq.source_kind,
        planes: seq.planes.clone(),
        plane_index: seq.plane_index.clone(),
        keep,
    };
    Ok((pruned_seq, report))
}

/// Whether stage 1 runs. `Auto` merges volumes and videos but not images.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeMode {
    #[default]
    Auto,
    On,
    Off,
}

impl MergeMode {
    pub fn applies_to(self, kind: SourceKind) -> bool {
        match self {
            MergeMode::Auto => kind != SourceKind::Image2D,
            MergeMode::On => true,
            MergeMode::Off => false,
        }
    }
}

impl std::str::FromStr for MergeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(MergeMode::Auto),
            "on" => Ok(MergeMode::On),
            "off" => Ok(MergeMode::Off),
            other => Err(Error::Config(format!("unknown merge mode `{other}` (auto|on|off)"))),
        }
    }
}

/// Full reduction with the default gate: images untouched, volumes and
/// videos merged then pruned.
pub fn reduce_pipeline(seq: &PlaneSequence<TokenPlane>, tau: f64) -> Result<(PrunedSequence, ReductionReport)> {
    reduce_with(seq, tau, MergeMode::Auto)
}

pub fn reduce_with(
    seq: &PlaneSequence<TokenPlane>,
    tau: f64,
    merge: MergeMode,
) -> Result<(PrunedSequence, ReductionReport)> {
    check_tau(tau)?;
    let total_before: usize = seq.planes.iter().map(TokenPlane::len).sum();
    let merged = if merge.applies_to(seq.source_kind) {
        seq.try_map(merge_2x2)?
    } else {
        seq.clone()
    };
    let (pruned, mut report) = prune_interplane(&merged, tau)?;
    report.total_before = total_before;
    report.merged_away = total_before - report.total_after_merge;
    report.check()?;
    Ok((pruned, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_plane(gh: usize, gw: usize, token: &[f64]) -> TokenPlane {
        let data = (0..gh * gw).flat_map(|_| token.iter().copied()).collect();
        TokenPlane::new(gh, gw, Matrix::from_vec(gh * gw, token.len(), data).unwrap()).unwrap()
    }

    fn plane_from(gh: usize, gw: usize, d: usize, f: impl Fn(usize, usize) -> f64) -> TokenPlane {
        let data = (0..gh * gw).flat_map(|i| (0..d).map(move |k| (i, k))).map(|(i, k)| f(i, k)).collect();
        TokenPlane::new(gh, gw, Matrix::from_vec(gh * gw, d, data).unwrap()).unwrap()
    }

    #[test]
    fn merge_examples() {
        let t = [0.5, -1.0, 2.0];
        let merged = merge_2x2(&uniform_plane(4, 6, &t)).unwrap();
        assert_eq!((merged.grid_h, merged.grid_w), (2, 3));
        assert!(merged.tokens.iter_rows().all(|r| r == t));

        let p = plane_from(2, 2, 2, |i, _| 2.0 * i as f64);
        let merged = merge_2x2(&p).unwrap();
        assert_eq!(merged.tokens.data(), &[3.0, 3.0]);
        assert_eq!(merged.coords, vec![(0, 0)]);

        let merged = merge_2x2(&uniform_plane(14, 14, &[1.0])).unwrap();
        assert_eq!(merged.len(), 49);

        let merged = merge_2x2(&uniform_plane(3, 5, &[1.0])).unwrap();
        assert_eq!((merged.grid_h, merged.grid_w), (2, 3));
    }

    #[test]
    fn identical_planes_prune_everything_after_the_first() {
        let planes: Vec<_> = (0..5).map(|_| uniform_plane(3, 3, &[0.2, 0.4])).collect();
        let seq = PlaneSequence::new(SourceKind::Volume3D, planes).unwrap();
        for tau in [0.0, 0.1, 5.0] {
            let (pruned, report) = prune_interplane(&seq, tau).unwrap();
            assert_eq!(report.pruned, 4 * 9);
            assert_eq!(report.total_after, 9);
            assert!((report.rate - 4.0 / 5.0).abs() < 1e-15);
            assert!(pruned.keep[0].iter().all(|&k| k));
            report.check().unwrap();
        }
    }

    #[test]
    fn distant_planes_prune_nothing() {
        let planes: Vec<_> = (0..4).map(|i| uniform_plane(2, 2, &[i as f64 * 0.1; 4])).collect();
        let seq = PlaneSequence::new(SourceKind::Video, planes).unwrap();
        let (_, report) = prune_interplane(&seq, 0.1).unwrap();
        assert_eq!(report.pruned, 0);
        assert_eq!(report.rate, 0.0);
    }

    #[test]
    fn crafted_three_plane_mask() {
        // plane 1 differs from plane 0 by 0.05 at sites 0,3 and 0.2 at 1,2;
        // plane 2 differs from plane 1 by 0.2 at site 0, 0.05 elsewhere.
        let base = [[0.0, 1.0], [0.5, 0.5], [1.0, 0.0], [0.3, 0.7]];
        let d1 = [0.05, 0.2, 0.2, 0.05];
        let d2 = [0.2, 0.05, 0.05, 0.05];
        let p0 = plane_from(2, 2, 2, |i, k| base[i][k]);
        let p1 = plane_from(2, 2, 2, |i, k| base[i][k] + d1[i]);
        let p2 = plane_from(2, 2, 2, |i, k| base[i][k] + d1[i] + d2[i]);
        let seq = PlaneSequence::new(SourceKind::Video, vec![p0, p1, p2]).unwrap();
        let (pruned, report) = prune_interplane(&seq, 0.1).unwrap();

        // per-site distance table, evaluated directly
        let mut expected = vec![vec![true; 4]];
        for d in [d1, d2] {
            expected.push(d.iter().map(|&x| x >= 0.1).collect());
        }
        assert_eq!(pruned.keep, expected);
        assert_eq!(report.pruned, 2 + 3);
        assert_eq!(
            report.per_plane,
            vec![
                PlaneCount { plane_index: 0, kept: 4, pruned: 0 },
                PlaneCount { plane_index: 1, kept: 2, pruned: 2 },
                PlaneCount { plane_index: 2, kept: 1, pruned: 3 },
            ]
        );
        let (tokens, prov) = pruned.kept_tokens();
        assert_eq!(tokens.rows(), 7);
        assert_eq!(prov[4], Provenance { plane: 1, m: 0, n: 1 });
        assert_eq!(prov[5], Provenance { plane: 1, m: 1, n: 0 });
        assert_eq!(prov[6], Provenance { plane: 2, m: 0, n: 0 });
    }

    #[test]
    fn tau_zero_prunes_only_exact_duplicates() {
        let p0 = plane_from(1, 2, 1, |i, _| i as f64);
        let p1 = plane_from(1, 2, 1, |i, _| if i == 0 { 0.0 } else { 1.0 + 1e-12 });
        let seq = PlaneSequence::new(SourceKind::Video, vec![p0, p1]).unwrap();
        let (pruned, _) = prune_interplane(&seq, 0.0).unwrap();
        assert_eq!(pruned.keep[1], vec![false, true]);
        let (pruned, report) = prune_interplane(&seq, f64::INFINITY).unwrap();
        assert_eq!(pruned.keep[1], vec![false, false]);
        assert_eq!(report.total_after, 2);
    }

    #[test]
    fn errors() {
        let seq = PlaneSequence::new(
            SourceKind::Video,
            vec![uniform_plane(2, 2, &[0.0]), uniform_plane(2, 3, &[0.0])],
        )
        .unwrap();
        assert!(matches!(prune_interplane(&seq, 0.1), Err(Error::ShapeMismatch { .. })));
        let seq = PlaneSequence::new(SourceKind::Video, vec![uniform_plane(2, 2, &[0.0])]).unwrap();
        assert!(prune_interplane(&seq, -0.5).is_err());
        assert!(prune_interplane(&seq, f64::NAN).is_err());
        assert!(merge_2x2(&uniform_plane(0, 0, &[0.0])).is_err());
    }

    #[test]
    fn pipeline_gate() {
        let img = PlaneSequence::new(SourceKind::Image2D, vec![uniform_plane(14, 14, &[0.1; 4])]).unwrap();
        let (pruned, report) = reduce_pipeline(&img, 0.1).unwrap();
        assert_eq!(report.total_before, 196);
        assert_eq!(report.total_after, 196);
        assert_eq!(report.rate, 0.0);
        assert_eq!(pruned.kept_count(), 196);

        let frames: Vec<_> = (0..8).map(|_| uniform_plane(14, 14, &[0.1; 4])).collect();
        let video = PlaneSequence::new(SourceKind::Video, frames).unwrap();
        let (_, report) = reduce_pipeline(&video, 0.1).unwrap();
        assert_eq!(report.total_before, 8 * 196);
        assert_eq!(report.total_after_merge, 8 * 49);
        assert_eq!(report.merged_away, 8 * 147);
        assert_eq!(report.total_after, 49);
        assert!((report.rate - 7.0 / 8.0).abs() < 1e-15);

        let (_, report) = reduce_with(&video, 0.1, MergeMode::Off).unwrap();
        assert_eq!(report.total_after_merge, 8 * 196);
        let (_, report) = reduce_with(&img, 0.1, MergeMode::On).unwrap();
        assert_eq!(report.total_after, 49);
    }
}
