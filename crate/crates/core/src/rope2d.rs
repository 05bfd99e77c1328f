//! Two-dimensional rotary position embedding.
//!
//! A width-`d` feature vector is split into a height half `[0, d/2)` and a
//! width half `[d/2, d)`. Inside each half, adjacent pairs `(2i, 2i+1)`
//! (0-based, pair `i = 0..d/4`) are rotated by `p·θ_{i+1}`, with `p = m` for
//! the height half and `p = n` for the width half, and
//! `θ_i = 10000^(-2i/d)` for `i = 1..=d/4`.

use crate::error::{Error, Result};

pub const ROPE_BASE: f64 = 10_000.0;

/// Positions cached by [`RopeTable::new`]. Larger positions are computed on
/// the fly with the identical formula.
pub const DEFAULT_MAX_POSITION: usize = 1024;

/// `θ_i = 10000^(-2i/d)` for `i = 1..=d/4`, strictly decreasing.
pub fn rope_frequencies(d: usize) -> Result<Vec<f64>> {
    if d < 4 || !d.is_multiple_of(4) {
        return Err(Error::Config(format!(
            "rotary width must be a positive multiple of 4, got {d}"
        )));
    }
    Ok((1..=d / 4)
        .map(|i| ROPE_BASE.powf(-2.0 * i as f64 / d as f64))
        .collect())
}

/// Precomputed `cos(p·θ_i)`, `sin(p·θ_i)` for `p < max_position`.
#[derive(Clone, Debug)]
pub struct RopeTable {
    d: usize,
    freqs: Vec<f64>,
    max_position: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl RopeTable {
    pub fn new(d: usize) -> Result<Self> {
        Self::with_max_position(d, DEFAULT_MAX_POSITION)
    }

    pub fn with_max_position(d: usize, max_position: usize) -> Result<Self> {
        let freqs = rope_frequencies(d)?;
        let pairs = freqs.len();
        let mut cos = Vec::with_capacity(max_position * pairs);
        let mut sin = Vec::with_capacity(max_position * pairs);
        for p in 0..max_position {
            for &theta in &freqs {
                let angle = p as f64 * theta;
                cos.push(angle.cos());
                sin.push(angle.sin());
            }
        }
        Ok(Self {
            d,
            freqs,
            max_position,
            cos,
            sin,
        })
    }

    /// Feature width this table rotates.
    pub fn d(&self) -> usize {
        self.d
    }

    pub fn freqs(&self) -> &[f64] {
        &self.freqs
    }

    pub fn max_position(&self) -> usize {
        self.max_position
    }

    /// `(cos(p·θ), sin(p·θ))` for pair `pair` (0-based).
    #[inline]
    pub fn cos_sin(&self, position: usize, pair: usize) -> (f64, f64) {
        if position < self.max_position {
            let idx = position * self.freqs.len() + pair;
            (self.cos[idx], self.sin[idx])
        } else {
            let angle = position as f64 * self.freqs[pair];
            (angle.cos(), angle.sin())
        }
    }
}

/// A feature vector tagged with its patch-grid coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionedVector {
    pub values: Vec<f64>,
    pub m: usize,
    pub n: usize,
}

impl PositionedVector {
    pub fn new(values: Vec<f64>, m: usize, n: usize) -> Self {
        Self { values, m, n }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    /// Transpose rotation; undoes `Forward` and backpropagates through it.
    Inverse,
}

/// Rotates `values` in place for grid position `(m, n)`.
///
/// Panics if `values.len() != table.d()`; callers validate widths.
pub fn rotate_in_place(values: &mut [f64], m: usize, n: usize, table: &RopeTable, dir: Direction) {
    assert_eq!(values.len(), table.d, "rope width");
    let half = table.d / 2;
    let sign = match dir {
        Direction::Forward => 1.0,
        Direction::Inverse => -1.0,
    };
    for (offset, position) in [(0, m), (half, n)] {
        for pair in 0..table.freqs.len() {
            let (c, s) = table.cos_sin(position, pair);
            let s = sign * s;
            let i = offset + 2 * pair;
            let (x, y) = (values[i], values[i + 1]);
            values[i] = c * x - s * y;
            values[i + 1] = s * x + c * y;
        }
    }
}

pub fn apply_rope2d(v: &PositionedVector, table: &RopeTable) -> Result<Vec<f64>> {
    if v.values.len() != table.d {
        return Err(Error::LengthMismatch {
            op: "apply_rope2d",
            expected: table.d,
            found: v.values.len(),
        });
    }
    let mut out = v.values.clone();
    rotate_in_place(&mut out, v.m, v.n, table, Direction::Forward);
    Ok(out)
}

/// `⟨rope(q), rope(k)⟩`; depends on positions only through `(m_q − m_k, n_q − n_k)`.
pub fn rope_dot(q: &PositionedVector, k: &PositionedVector, table: &RopeTable) -> Result<f64> {
    if q.values.len() != k.values.len() {
        return Err(Error::LengthMismatch {
            op: "rope_dot",
            expected: q.values.len(),
            found: k.values.len(),
        });
    }
    let rq = apply_rope2d(q, table)?;
    let rk = apply_rope2d(k, table)?;
    Ok(crate::numkit::dot(&rq, &rk))
}
