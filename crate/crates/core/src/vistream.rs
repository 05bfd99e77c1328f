//! Visual inputs as ordered 2D planes, and planes as embedded patch tokens.
//!
//! Images, volumes and videos share one representation: a [`PlaneSequence`]
//! of grayscale planes. Each plane is cut into non-overlapping square patches
//! (zero-padded bottom/right), flattened row-major, and linearly embedded.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{self, Matrix};

/// Default patch edge in pixels.
pub const PATCH_SIZE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    #[serde(rename = "image")]
    Image2D,
    #[serde(rename = "volume")]
    Volume3D,
    Video,
}

impl SourceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SourceKind::Image2D => "image",
            SourceKind::Volume3D => "volume",
            SourceKind::Video => "video",
        }
    }
}

impl std::str::FromStr for SourceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image" => Ok(SourceKind::Image2D),
            "volume" => Ok(SourceKind::Volume3D),
            "video" => Ok(SourceKind::Video),
            other => Err(Error::Config(format!(
                "unknown input kind `{other}` (expected image|volume|video)"
            ))),
        }
    }
}

impl std::fmt::Display for SourceKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One grayscale pixel grid, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelPlane {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl PixelPlane {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Empty("pixel plane"));
        }
        if data.len() != height * width {
            return Err(Error::LengthMismatch {
                op: "PixelPlane::new",
                expected: height * width,
                found: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("pixel plane".into()));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let data = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.width + c]
    }
}

/// A decoded visual input before decomposition.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualInput {
    kind: SourceKind,
    planes: Vec<PixelPlane>,
}

impl VisualInput {
    pub fn new(kind: SourceKind, planes: Vec<PixelPlane>) -> Result<Self> {
        let Some(first) = planes.first() else {
            return Err(Error::Empty("visual input has no planes"));
        };
        if kind == SourceKind::Image2D && planes.len() != 1 {
            return Err(Error::Config(format!(
                "an image has exactly one plane, got {}",
                planes.len()
            )));
        }
        let shape = (first.height, first.width);
        if let Some(bad) = planes.iter().find(|p| (p.height, p.width) != shape) {
            return Err(Error::ShapeMismatch {
                op: "VisualInput planes",
                left: shape,
                right: (bad.height, bad.width),
            });
        }
        Ok(Self { kind, planes })
    }

    pub fn kind(&self) -> SourceKind {
        self.kind
    }

    pub fn planes(&self) -> &[PixelPlane] {
        &self.planes
    }

    pub fn height(&self) -> usize {
        self.planes[0].height
    }

    pub fn width(&self) -> usize {
        self.planes[0].width
    }
}

/// Ordered planes from one visual input.
#[derive(Clone, Debug, PartialEq)]
pub struct PlaneSequence<P> {
    pub source_kind: SourceKind,
    pub planes: Vec<P>,
    pub plane_index: Vec<usize>,
}

impl<P> PlaneSequence<P> {
    pub fn new(source_kind: SourceKind, planes: Vec<P>) -> Result<Self> {
        if planes.is_empty() {
            return Err(Error::Empty("plane sequence"));
        }
        let plane_index = (0..planes.len()).collect();
        Ok(Self {
            source_kind,
            planes,
            plane_index,
        })
    }

    pub fn len(&self) -> usize {
        self.planes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.planes.is_empty()
    }

    /// Applies `f` to every plane in parallel, keeping order and indices.
    pub fn try_map<Q, F>(&self, f: F) -> Result<PlaneSequence<Q>>
    where
        P: Sync,
        Q: Send,
        F: Fn(&P) -> Result<Q> + Sync,
    {
        let planes = self.planes.par_iter().map(&f).collect::<Result<Vec<_>>>()?;
        Ok(PlaneSequence {
            source_kind: self.source_kind,
            planes,
            plane_index: self.plane_index.clone(),
        })
    }
}

/// Splits an input into its ordered planes.
pub fn decompose(input: &VisualInput) -> Result<PlaneSequence<PixelPlane>> {
    PlaneSequence::new(input.kind, input.planes.clone())
}

/// Keeps frames `0, stride, 2·stride, …`.
pub fn sample_frames<T: Clone>(frames: &[T], stride: usize) -> Result<Vec<T>> {
    if stride == 0 {
        return Err(Error::Config("frame stride must be >= 1".into()));
    }
    Ok(frames.iter().step_by(stride).cloned().collect())
}

/// Flattened patches of one plane with their grid coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    pub grid_h: usize,
    pub grid_w: usize,
    pub patch: usize,
    /// One row per patch (row-major over the grid), `patch²` pixels each.
    pub vectors: Matrix,
    pub coords: Vec<(usize, usize)>,
}

pub fn patchify(plane: &PixelPlane, patch: usize) -> Result<PatchGrid> {
    if patch == 0 {
        return Err(Error::Config("patch size must be >= 1".into()));
    }
    if plane.data.is_empty() {
        return Err(Error::Empty("pixel plane"));
    }
    let grid_h = plane.height.div_ceil(patch);
    let grid_w = plane.width.div_ceil(patch);
    let mut vectors = Matrix::zeros(grid_h * grid_w, patch * patch);
    let mut coords = Vec::with_capacity(grid_h * grid_w);
    for m in 0..grid_h {
        for n in 0..grid_w {
            let row = vectors.row_mut(m * grid_w + n);
            for pr in 0..patch {
                let r = m * patch + pr;
                if r >= plane.height {
                    break;
                }
                for pc in 0..patch {
                    let c = n * patch + pc;
                    if c >= plane.width {
                        break;
                    }
                    row[pr * patch + pc] = plane.get(r, c);
                }
            }
            coords.push((m, n));
        }
    }
    Ok(PatchGrid {
        grid_h,
        grid_w,
        patch,
        vectors,
        coords,
    })
}

/// One plane's embedded patch tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenPlane {
    pub grid_h: usize,
    pub grid_w: usize,
    /// `grid_h·grid_w` rows, row-major over the grid.
    pub tokens: Matrix,
    pub coords: Vec<(usize, usize)>,
}

impl TokenPlane {
    pub fn new(grid_h: usize, grid_w: usize, tokens: Matrix) -> Result<Self> {
        if tokens.rows() != grid_h * grid_w {
            return Err(Error::LengthMismatch {
                op: "TokenPlane::new",
                expected: grid_h * grid_w,
                found: tokens.rows(),
            });
        }
        let coords = (0..grid_h).flat_map(|m| (0..grid_w).map(move |n| (m, n))).collect();
        Ok(Self {
            grid_h,
            grid_w,
            tokens,
            coords,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows() == 0
    }

    pub fn width(&self) -> usize {
        self.tokens.cols()
    }

    pub fn token(&self, m: usize, n: usize) -> &[f64] {
        self.tokens.row(m * self.grid_w + n)
    }
}

/// `token_i = W_embed · patch_i + b_embed`, with `W_embed` (d × patch²) and
/// `b_embed` 1×d.
pub fn embed_patches(grid: &PatchGrid, w_embed: &Matrix, b_embed: &Matrix) -> Result<TokenPlane> {
    let projected = numkit::matmul_nt(&grid.vectors, w_embed)?;
    let tokens = numkit::add_row_broadcast(&projected, b_embed)?;
    Ok(TokenPlane {
        grid_h: grid.grid_h,
        grid_w: grid.grid_w,
        tokens,
        coords: grid.coords.clone(),
    })
}

/// `patchify` then `embed_patches` on every plane.
pub fn embed_sequence(
    seq: &PlaneSequence<PixelPlane>,
    patch: usize,
    w_embed: &Matrix,
    b_embed: &Matrix,
) -> Result<PlaneSequence<TokenPlane>> {
    seq.try_map(|plane| embed_patches(&patchify(plane, patch)?, w_embed, b_embed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn plane(h: usize, w: usize, v: f64) -> PixelPlane {
        PixelPlane::new(h, w, vec![v; h * w]).unwrap()
    }

    #[test]
    fn decompose_counts_and_order() {
        let img = VisualInput::new(SourceKind::Image2D, vec![plane(32, 32, 0.5)]).unwrap();
        assert_eq!(decompose(&img).unwrap().len(), 1);

        let slices: Vec<_> = (0..8).map(|i| plane(4, 4, i as f64 / 8.0)).collect();
        let vol = VisualInput::new(SourceKind::Volume3D, slices.clone()).unwrap();
        let seq = decompose(&vol).unwrap();
        assert_eq!(seq.planes, slices);
        assert_eq!(seq.plane_index, (0..8).collect::<Vec<_>>());

        let frames: Vec<_> = (0..12).map(|i| plane(4, 4, i as f64 / 12.0)).collect();
        let sampled = sample_frames(&frames, 3).unwrap();
        let video = VisualInput::new(SourceKind::Video, sampled).unwrap();
        let seq = decompose(&video).unwrap();
        assert_eq!(seq.len(), 4);
        for (k, p) in seq.planes.iter().enumerate() {
            assert_eq!(p, &frames[3 * k]);
        }
    }

    #[test]
    fn input_invariants() {
        assert!(matches!(
            VisualInput::new(SourceKind::Video, vec![]),
            Err(Error::Empty(_))
        ));
        assert!(VisualInput::new(SourceKind::Image2D, vec![plane(2, 2, 0.0), plane(2, 2, 0.0)]).is_err());
        assert!(VisualInput::new(SourceKind::Volume3D, vec![plane(2, 2, 0.0), plane(2, 3, 0.0)]).is_err());
        assert!(PixelPlane::new(1, 2, vec![0.0, f64::INFINITY]).is_err());
        assert!(matches!(PixelPlane::new(0, 2, vec![]), Err(Error::Empty(_))));
    }

    #[test]
    fn sample_frames_examples() {
        let frames: Vec<u32> = (0..10).collect();
        assert_eq!(sample_frames(&frames, 1).unwrap(), frames);
        assert_eq!(sample_frames(&frames, 4).unwrap(), vec![0, 4, 8]);
        assert_eq!(sample_frames(&[7u32], 5).unwrap(), vec![7]);
        assert!(sample_frames(&frames, 0).is_err());
    }

    #[test]
    fn patchify_examples() {
        let g = patchify(&plane(224, 224, 0.1), 16).unwrap();
        assert_eq!((g.grid_h, g.grid_w, g.vectors.rows()), (14, 14, 196));

        let p = PixelPlane::from_fn(20, 20, |r, c| (r * 20 + c) as f64 / 400.0).unwrap();
        let g = patchify(&p, 16).unwrap();
        assert_eq!((g.grid_h, g.grid_w), (2, 2));
        // patch (1,1) holds pixels [16..20)x[16..20) in its top-left corner, zeros elsewhere
        let v = g.vectors.row(3);
        assert_eq!(v[0], p.get(16, 16));
        assert_eq!(v[3 * 16 + 3], p.get(19, 19));
        assert_eq!(v[4], 0.0);
        assert_eq!(v[4 * 16], 0.0);

        let g = patchify(&plane(32, 32, 0.25), 16).unwrap();
        assert!(g.vectors.iter_rows().all(|r| r == g.vectors.row(0)));
        assert_eq!(g.coords, vec![(0, 0), (0, 1), (1, 0), (1, 1)]);

        assert!(patchify(&plane(4, 4, 0.0), 0).is_err());
    }

    #[test]
    fn embed_examples() {
        let g = patchify(&plane(8, 8, 0.3), 4).unwrap();
        let c = Matrix::row_vector(vec![1.0, -2.0, 0.5]);
        let t = embed_patches(&g, &Matrix::zeros(3, 16), &c).unwrap();
        assert!(t.tokens.iter_rows().all(|r| r == c.row(0)));
        assert_eq!(t.coords, g.coords);

        let t = embed_patches(&g, &Matrix::identity(16), &Matrix::zeros(1, 16)).unwrap();
        assert_eq!(t.tokens, g.vectors);

        assert!(embed_patches(&g, &Matrix::zeros(3, 9), &c).is_err());
    }

    #[test]
    fn embed_matches_per_patch_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = PixelPlane::from_fn(13, 9, |_, _| rng.random::<f64>()).unwrap();
        let g = patchify(&p, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w = Matrix::from_vec(5, 16, (0..80).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let b = Matrix::row_vector((0..5).map(|i| i as f64 * 0.1).collect());
        let t = embed_patches(&g, &w, &b).unwrap();
        for i in 0..g.vectors.rows() {
            for f in 0..5 {
                let mut s = b.get(0, f);
                for k in 0..16 {
                    s += w.get(f, k) * g.vectors.get(i, k);
                }
                assert!((t.tokens.get(i, f) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("video".parse::<SourceKind>().unwrap(), SourceKind::Video);
        assert!("dicom".parse::<SourceKind>().is_err());
        assert_eq!(serde_json::to_string(&SourceKind::Image2D).unwrap(), "\"image\"");
    }
}
