//! Parameter checkpoints: a flat little-endian f64 payload plus a JSON
//! manifest mapping each tensor name to its shape and byte offset.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::Matrix;

/// Standard deviation of freshly initialized weights.
pub const INIT_STD: f64 = 0.02;

/// A named, ordered collection of parameter tensors.
///
/// The order of [`tensors`](ParamSet::tensors) and
/// [`tensors_mut`](ParamSet::tensors_mut) must agree; checkpoints and
/// gradient checks rely on it.
pub trait ParamSet {
    fn tensors(&self) -> Vec<(String, &Matrix)>;
    fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)>;

    fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.len()).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    /// Byte offset into the payload.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub dtype: String,
    pub byte_order: String,
    pub tensors: Vec<TensorEntry>,
}

pub fn encode<P: ParamSet + ?Sized>(params: &P) -> (Vec<u8>, Manifest) {
    let mut bytes = Vec::with_capacity(params.parameter_count() * 8);
    let mut tensors = Vec::new();
    for (name, m) in params.tensors() {
        tensors.push(TensorEntry {
            name,
            shape: [m.rows(), m.cols()],
            offset: bytes.len(),
        });
        for v in m.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        dtype: "f64".into(),
        byte_order: "little".into(),
        tensors,
    };
    (bytes, manifest)
}

/// Overwrites `params` in place from a payload; names and shapes must match.
pub fn decode_into<P: ParamSet + ?Sized>(params: &mut P, bytes: &[u8], manifest: &Manifest) -> Result<()> {
    if manifest.dtype != "f64" || manifest.byte_order != "little" {
        return Err(Error::Config(format!(
            "unsupported checkpoint encoding {}/{}",
            manifest.dtype, manifest.byte_order
        )));
    }
    let targets = params.tensors_mut();
    if targets.len() != manifest.tensors.len() {
        return Err(Error::LengthMismatch {
            op: "checkpoint tensor count",
            expected: targets.len(),
            found: manifest.tensors.len(),
        });
    }
    for ((name, dst), entry) in targets.into_iter().zip(&manifest.tensors) {
        if name != entry.name || [dst.rows(), dst.cols()] != entry.shape {
            return Err(Error::Config(format!(
                "checkpoint tensor {} {:?} does not match expected {} {:?}",
                entry.name,
                entry.shape,
                name,
                [dst.rows(), dst.cols()]
            )));
        }
        let end = entry.offset + dst.len() * 8;
        let chunk = bytes.get(entry.offset..end).ok_or(Error::LengthMismatch {
            op: "checkpoint payload",
            expected: end,
            found: bytes.len(),
        })?;
        for (v, raw) in dst.data_mut().iter_mut().zip(chunk.chunks_exact(8)) {
            *v = f64::from_le_bytes(raw.try_into().expect("8-byte chunk"));
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("checkpoint tensor {}", entry.name)));
            }
        }
    }
    Ok(())
}

pub fn save<P: ParamSet + ?Sized>(params: &P, payload: &Path, manifest: &Path) -> Result<()> {
    let (bytes, m) = encode(params);
    fs::write(payload, bytes).map_err(|e| Error::io(payload, e))?;
    let json = serde_json::to_vec_pretty(&m)?;
    fs::write(manifest, json).map_err(|e| Error::io(manifest, e))?;
    Ok(())
}

pub fn load_into<P: ParamSet + ?Sized>(params: &mut P, payload: &Path, manifest: &Path) -> Result<()> {
    let bytes = fs::read(payload).map_err(|e| Error::io(payload, e))?;
    let text = fs::read(manifest).map_err(|e| Error::io(manifest, e))?;
    let m: Manifest = serde_json::from_slice(&text)?;
    decode_into(params, &bytes, &m)
}

/// Mixes a master seed with a stream id. Model components use fixed streams:
/// 0 encoder, 1 projector, 2 decoder.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

pub(crate) fn normal_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Matrix {
    let dist = Normal::new(0.0, std).expect("positive std");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Matrix::from_vec(rows, cols, data).expect("normal samples are finite")
}
