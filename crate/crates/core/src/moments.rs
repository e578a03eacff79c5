//! Saturated-noise maps and the noise moment matrices used by the objective.
//!
//! `Σ_e = E[e eᵀ]` and `Σ'_e = E[w_{t:N} eᵀ]` are estimated by Monte Carlo.
//! Samples are split into fixed-size chunks, each drawn from its own ChaCha
//! stream, and partial sums are reduced in chunk order, so the estimate only
//! depends on `(seed, samples)` and not on how many workers ran.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, SmpcError};
use crate::linalg;
use crate::model::NoiseModel;

/// Samples per independently seeded chunk.
pub const CHUNK_SAMPLES: usize = 4096;

/// Default sample count for moment estimation.
pub const DEFAULT_MOMENT_SAMPLES: usize = 1_000_000;

const CACHE_MAGIC: &[u8; 8] = b"SMPCMOM1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SaturationSpec {
    /// `φ(ξ) = (1 − e^{−ξ}) / (1 + e^{−ξ})` per coordinate, bounded by 1.
    Sigmoid,
    /// Coordinate clamp to `[−phi_max, phi_max]`.
    Clamp { phi_max: f64 },
}

impl SaturationSpec {
    pub fn phi_max(&self) -> f64 {
        match self {
            SaturationSpec::Sigmoid => 1.0,
            SaturationSpec::Clamp { phi_max } => *phi_max,
        }
    }

    #[inline]
    pub fn apply_scalar(&self, xi: f64) -> f64 {
        match self {
            // Same function as (1 − e^{−ξ})/(1 + e^{−ξ}) without the
            // overflow of e^{−ξ} for very negative ξ.
            SaturationSpec::Sigmoid => (0.5 * xi).tanh(),
            SaturationSpec::Clamp { phi_max } => xi.clamp(-phi_max, *phi_max),
        }
    }

    pub fn label(&self) -> String {
        match self {
            SaturationSpec::Sigmoid => "sigmoid".to_string(),
            SaturationSpec::Clamp { phi_max } => format!("clamp({phi_max:e})"),
        }
    }
}

/// Component-wise saturation of a stacked noise vector.
pub fn saturate(spec: &SaturationSpec, w: &[f64]) -> Vec<f64> {
    w.iter().map(|&x| spec.apply_scalar(x)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseMoments {
    /// `(N−1)d × (N−1)d`.
    pub sigma_e: DMatrix<f64>,
    /// `Nd × (N−1)d`.
    pub sigma_e_prime: DMatrix<f64>,
    /// `Nd × Nd`, exact block diagonal of the per-step covariance.
    pub sigma_w: DMatrix<f64>,
    pub samples: usize,
    pub seed: u64,
}

struct ChunkSums {
    e: Vec<f64>,
    ep: Vec<f64>,
}

pub fn estimate_noise_moments(noise: &NoiseModel, spec: &SaturationSpec, horizon: usize, samples: usize, seed: u64) -> Result<NoiseMoments> {
    if horizon == 0 {
        return Err(SmpcError::param("horizon", "must be at least 1"));
    }
    if samples == 0 {
        return Err(SmpcError::param("samples", "need at least one sample"));
    }
    if samples < 10_000 {
        log::warn!("estimating noise moments from only {samples} samples");
    }
    let d = noise.dim();
    let ne = (horizon - 1) * d;
    let nw = horizon * d;

    let chunks = samples.div_ceil(CHUNK_SAMPLES);
    let partial: Vec<ChunkSums> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let count = CHUNK_SAMPLES.min(samples - c * CHUNK_SAMPLES);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64);
            let mut sums = ChunkSums {
                e: vec![0.0; ne * ne],
                ep: vec![0.0; nw * ne],
            };
            let mut w = vec![0.0; nw];
            let mut e = vec![0.0; ne];
            let mut scratch = vec![0.0; d];
            for _ in 0..count {
                for k in 0..horizon {
                    noise.sample_into(&mut rng, &mut scratch, &mut w[k * d..(k + 1) * d]);
                }
                for (ei, wi) in e.iter_mut().zip(w.iter()) {
                    *ei = spec.apply_scalar(*wi);
                }
                for i in 0..ne {
                    let ei = e[i];
                    let row = &mut sums.e[i * ne..(i + 1) * ne];
                    for (r, ej) in row.iter_mut().zip(e.iter()) {
                        *r += ei * ej;
                    }
                }
                for i in 0..nw {
                    let wi = w[i];
                    let row = &mut sums.ep[i * ne..(i + 1) * ne];
                    for (r, ej) in row.iter_mut().zip(e.iter()) {
                        *r += wi * ej;
                    }
                }
            }
            sums
        })
        .collect();

    let mut e_sum = vec![0.0; ne * ne];
    let mut ep_sum = vec![0.0; nw * ne];
    for p in &partial {
        for (a, b) in e_sum.iter_mut().zip(&p.e) {
            *a += b;
        }
        for (a, b) in ep_sum.iter_mut().zip(&p.ep) {
            *a += b;
        }
    }
    let inv = 1.0 / samples as f64;
    let sigma_e = DMatrix::from_row_slice(ne, ne, &e_sum) * inv;
    let sigma_e_prime = DMatrix::from_row_slice(nw, ne, &ep_sum) * inv;
    let blocks: Vec<&DMatrix<f64>> = vec![noise.covariance(); horizon];
    Ok(NoiseMoments {
        sigma_e: linalg::symmetrize(&sigma_e),
        sigma_e_prime,
        sigma_w: linalg::block_diag(&blocks),
        samples,
        seed,
    })
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Identifies a cached estimate: noise covariance hash, saturation, horizon,
/// sample count and seed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MomentCacheKey(String);

impl MomentCacheKey {
    pub fn new(noise: &NoiseModel, spec: &SaturationSpec, horizon: usize, samples: usize, seed: u64) -> Self {
        let mut h = Sha256::new();
        let cov = noise.covariance();
        h.update((cov.nrows() as u64).to_le_bytes());
        for v in cov.iter() {
            h.update(v.to_bits().to_le_bytes());
        }
        let noise_hash = hex(&h.finalize()[..16]);
        Self(format!("noise={noise_hash};sat={};N={horizon};samples={samples};seed={seed}", spec.label()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn file_name(&self) -> String {
        let digest = Sha256::digest(self.0.as_bytes());
        format!("moments-{}.bin", hex(&digest[..12]))
    }
}

fn write_matrix(out: &mut Vec<u8>, m: &DMatrix<f64>) {
    out.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
    for v in m.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(SmpcError::Format {
                what: "moment cache",
                reason: "truncated file".into(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn matrix(&mut self) -> Result<DMatrix<f64>> {
        let r = self.u64()? as usize;
        let c = self.u64()? as usize;
        let bytes = self.take(r * c * 8)?;
        let data: Vec<f64> = bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
        Ok(DMatrix::from_column_slice(r, c, &data))
    }
}

impl NoiseMoments {
    /// Serialises to the binary cache layout: magic, key, sample count, seed,
    /// then the three matrices (column-major little-endian `f64`).
    pub fn to_cache_bytes(&self, key: &MomentCacheKey) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CACHE_MAGIC);
        out.extend_from_slice(&(key.0.len() as u64).to_le_bytes());
        out.extend_from_slice(key.0.as_bytes());
        out.extend_from_slice(&(self.samples as u64).to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        write_matrix(&mut out, &self.sigma_e);
        write_matrix(&mut out, &self.sigma_e_prime);
        write_matrix(&mut out, &self.sigma_w);
        out
    }

    /// Parses cache bytes; `Ok(None)` when the stored key differs.
    pub fn from_cache_bytes(bytes: &[u8], key: &MomentCacheKey) -> Result<Option<Self>> {
        let mut cur = Cursor { buf: bytes, pos: 0 };
        if cur.take(8)? != CACHE_MAGIC {
            return Err(SmpcError::Format {
                what: "moment cache",
                reason: "bad magic".into(),
            });
        }
        let klen = cur.u64()? as usize;
        if cur.take(klen)? != key.0.as_bytes() {
            return Ok(None);
        }
        let samples = cur.u64()? as usize;
        let seed = cur.u64()?;
        let sigma_e = cur.matrix()?;
        let sigma_e_prime = cur.matrix()?;
        let sigma_w = cur.matrix()?;
        Ok(Some(Self {
            sigma_e,
            sigma_e_prime,
            sigma_w,
            samples,
            seed,
        }))
    }

    pub fn write_cache(&self, path: &Path, key: &MomentCacheKey) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_cache_bytes(key))?;
        Ok(())
    }

    pub fn read_cache(path: &Path, key: &MomentCacheKey) -> Result<Option<Self>> {
        let mut buf = Vec::new();
        fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_cache_bytes(&buf, key)
    }
}

/// Estimates the moments, reusing `cache_dir/<key-hash>.bin` when present.
pub fn load_or_estimate(cache_dir: Option<&Path>, noise: &NoiseModel, spec: &SaturationSpec, horizon: usize, samples: usize, seed: u64) -> Result<NoiseMoments> {
    let Some(dir) = cache_dir else {
        return estimate_noise_moments(noise, spec, horizon, samples, seed);
    };
    let key = MomentCacheKey::new(noise, spec, horizon, samples, seed);
    let path: PathBuf = dir.join(key.file_name());
    if path.exists() {
        match NoiseMoments::read_cache(&path, &key) {
            Ok(Some(m)) => return Ok(m),
            Ok(None) => log::warn!("moment cache {} holds a different key; recomputing", path.display()),
            Err(e) => log::warn!("ignoring unreadable moment cache {}: {e}", path.display()),
        }
    }
    let m = estimate_noise_moments(noise, spec, horizon, samples, seed)?;
    fs::create_dir_all(dir)?;
    m.write_cache(&path, &key)?;
    Ok(m)
}
