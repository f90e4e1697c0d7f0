//! Flat parameter vectors.
//!
//! Every quantity exchanged by the protocol (backbones, heads, momentum
//! buffers, gradients) is a [`ParamVec`]: a non-empty, fixed-length vector of
//! finite `f64`s. Operations return new vectors and never mutate inputs.
//!
//! Binary record layout used by checkpoints and dataset files:
//! `u64` little-endian element count followed by that many `f64`
//! little-endian values.

use std::borrow::Borrow;
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::fv::Weighting;

/// Largest record accepted by [`ParamVec::read_record`] (2^28 elements, 2 GiB).
const MAX_RECORD_LEN: u64 = 1 << 28;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamVec {
    values: Vec<f64>,
}

impl ParamVec {
    /// Wraps `values`, rejecting empty or non-finite input.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("parameter vector"));
        }
        check_finite(&values, "parameter vector")?;
        Ok(Self { values })
    }

    /// # Panics
    /// If `len == 0`.
    pub fn zeros(len: usize) -> Self {
        assert!(len > 0, "ParamVec length must be positive");
        Self {
            values: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    /// Always false; kept for clippy's `len_without_is_empty`.
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.values.iter()
    }

    /// FNV-1a over the little-endian bytes. Used to fingerprint payloads in
    /// the message log and to detect snapshot mutation.
    pub fn checksum(&self) -> u64 {
        checksum_f64(&self.values)
    }

    pub fn write_record<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        out.write_all(&(self.values.len() as u64).to_le_bytes())?;
        for v in &self.values {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_record<R: Read>(input: &mut R) -> Result<Self> {
        let mut word = [0u8; 8];
        input.read_exact(&mut word)?;
        let len = u64::from_le_bytes(word);
        if len == 0 || len > MAX_RECORD_LEN {
            return Err(Error::Format(format!("record length {len} out of range")));
        }
        let mut values = Vec::with_capacity(len as usize);
        for _ in 0..len {
            input.read_exact(&mut word)?;
            values.push(f64::from_le_bytes(word));
        }
        ParamVec::new(values).map_err(|e| Error::Format(e.to_string()))
    }

    /// Builds from an internal buffer, verifying finiteness. Used on the hot
    /// path where the length is known to be positive.
    pub(crate) fn from_computed(values: Vec<f64>, what: &str) -> Result<Self> {
        debug_assert!(!values.is_empty());
        check_finite(&values, what)?;
        Ok(Self { values })
    }
}

impl AsRef<[f64]> for ParamVec {
    fn as_ref(&self) -> &[f64] {
        &self.values
    }
}

pub(crate) fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

pub fn checksum_f64(values: &[f64]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut hash = OFFSET;
    for v in values {
        for b in v.to_le_bytes() {
            hash ^= u64::from(b);
            hash = hash.wrapping_mul(PRIME);
        }
    }
    hash
}

/// `a * x + y`, element-wise.
pub fn axpy(a: f64, x: &ParamVec, y: &ParamVec) -> Result<ParamVec> {
    if !a.is_finite() {
        return Err(Error::NonFinite("axpy scalar".into()));
    }
    Error::check_len(x.len(), y.len())?;
    let values = x
        .values
        .iter()
        .zip(&y.values)
        .map(|(xi, yi)| a * xi + yi)
        .collect();
    ParamVec::from_computed(values, "axpy result")
}

/// `x - y`, element-wise.
pub fn sub(x: &ParamVec, y: &ParamVec) -> Result<ParamVec> {
    Error::check_len(x.len(), y.len())?;
    let values = x.values.iter().zip(&y.values).map(|(a, b)| a - b).collect();
    ParamVec::from_computed(values, "difference")
}

pub fn scale(a: f64, x: &ParamVec) -> Result<ParamVec> {
    let values = x.values.iter().map(|v| a * v).collect();
    ParamVec::from_computed(values, "scaled vector")
}

/// `Σ w[i] · vs[i]`, accumulated in ascending index order.
pub fn weighted_sum<V: Borrow<ParamVec>>(vs: &[V], w: &Weighting) -> Result<ParamVec> {
    let first = vs.first().ok_or(Error::Empty("weighted_sum inputs"))?.borrow();
    Error::check_len(vs.len(), w.len())?;
    let n = first.len();
    for v in vs {
        Error::check_len(n, v.borrow().len())?;
    }
    let weights = w.as_slice();
    let mut acc: Vec<f64> = first.values.iter().map(|x| weights[0] * x).collect();
    for (v, &wi) in vs.iter().zip(weights).skip(1) {
        for (a, x) in acc.iter_mut().zip(&v.borrow().values) {
            *a += wi * x;
        }
    }
    ParamVec::from_computed(acc, "weighted sum")
}

/// Maximum absolute element-wise difference.
pub fn dist_inf(x: &ParamVec, y: &ParamVec) -> Result<f64> {
    Error::check_len(x.len(), y.len())?;
    Ok(x.values
        .iter()
        .zip(&y.values)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}
