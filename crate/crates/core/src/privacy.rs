//! Client release pipeline (encode, project, quantize, clip, noise) and a
//! conservative Gaussian-mechanism accountant.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::prompt::PromptMatrix;
use crate::routing::Encoder;
use crate::server::clip;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DPConfig {
    pub sigma: f64,
    pub delta: f64,
    pub clip_radius: f64,
    /// Release count used by [`epsilon_for`].
    pub rounds: u64,
    pub upload_period: u64,
    /// Upload early when the drift magnitude exceeds this; `None` disables it.
    pub drift_trigger: Option<f64>,
    pub compress_dim: usize,
    pub quantize: bool,
}

impl Default for DPConfig {
    fn default() -> Self {
        Self {
            sigma: 0.0,
            delta: 1e-5,
            clip_radius: 1.0,
            rounds: 1,
            upload_period: 500,
            drift_trigger: None,
            compress_dim: 64,
            quantize: true,
        }
    }
}

impl DPConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0) {
            return Err(Error::Config(format!("dp.sigma must be >= 0, got {}", self.sigma)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Config(format!("dp.delta must be in (0,1), got {}", self.delta)));
        }
        if !(self.clip_radius > 0.0) {
            return Err(Error::Config("dp.clip_radius must be positive".into()));
        }
        if self.upload_period == 0 || self.compress_dim == 0 {
            return Err(Error::Config("dp.upload_period and dp.compress_dim must be positive".into()));
        }
        if self.drift_trigger.is_some_and(|t| !(t >= 0.0)) {
            return Err(Error::Config("dp.drift_trigger must be >= 0".into()));
        }
        Ok(())
    }
}

/// Fixed seeded orthonormal projection plus an optional 8-bit quantizer.
#[derive(Debug, Clone)]
pub struct Compressor {
    /// `d_c x d_phi`. Orthonormal columns when `d_c >= d_phi`, orthonormal
    /// rows otherwise.
    projection: DMatrix<f64>,
    quantize: bool,
}

/// A uniformly quantized vector: `x_i ~ offset + scale * code_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quantized {
    pub codes: Vec<u8>,
    pub scale: f64,
    pub offset: f64,
}

pub fn quantize(x: &DVector<f64>) -> Quantized {
    let lo = x.min();
    let hi = x.max();
    let scale = if hi > lo { (hi - lo) / 255.0 } else { 0.0 };
    let codes = x
        .iter()
        .map(|v| if scale > 0.0 { ((v - lo) / scale).round().clamp(0.0, 255.0) as u8 } else { 0 })
        .collect();
    Quantized { codes, scale, offset: lo }
}

pub fn dequantize(q: &Quantized) -> DVector<f64> {
    DVector::from_iterator(q.codes.len(), q.codes.iter().map(|c| q.offset + q.scale * f64::from(*c)))
}

impl Compressor {
    pub fn new(d_phi: usize, d_c: usize, quantize: bool, seed: u64) -> Self {
        let mut rng = crate::rng::stream(seed, "compressor", &[d_phi as u64, d_c as u64]);
        let projection = if d_c >= d_phi {
            linalg::orthonormal_columns(&mut rng, d_c, d_phi)
        } else {
            linalg::orthonormal_columns(&mut rng, d_phi, d_c).transpose()
        };
        Self { projection, quantize }
    }

    pub fn identity(d_phi: usize) -> Self {
        Self { projection: DMatrix::identity(d_phi, d_phi), quantize: false }
    }

    pub fn projection(&self) -> &DMatrix<f64> {
        &self.projection
    }

    pub fn output_dim(&self) -> usize {
        self.projection.nrows()
    }

    pub fn compress(&self, x: &DVector<f64>) -> DVector<f64> {
        let y = &self.projection * x;
        if self.quantize {
            dequantize(&quantize(&y))
        } else {
            y
        }
    }

    /// Map a release back to `d_phi` with the projection's transpose.
    pub fn lift(&self, z: &DVector<f64>) -> DVector<f64> {
        self.projection.tr_mul(z)
    }

    /// Bytes on the wire for one release.
    pub fn upload_bytes(&self) -> usize {
        if self.quantize {
            self.output_dim() + 16
        } else {
            self.output_dim() * 8
        }
    }
}

/// `clip(compress(phi(p_long))) + N(0, sigma^2 I)`.
pub fn make_upload(
    p_long: &PromptMatrix,
    enc: &Encoder,
    comp: &Compressor,
    dp: &DPConfig,
    rng: &mut impl Rng,
) -> Result<DVector<f64>> {
    let z = comp.compress(&enc.encode_prompt(p_long)?);
    let mut out = clip(&z, dp.clip_radius);
    if dp.sigma > 0.0 {
        for x in out.iter_mut() {
            *x += dp.sigma * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(out)
}

pub fn should_upload(step: u64, drift_mag: f64, dp: &DPConfig) -> bool {
    step % dp.upload_period == 0 || dp.drift_trigger.is_some_and(|t| drift_mag > t)
}

/// Per-release `S sqrt(2 ln(1.25/delta)) / sigma` with `S = 2 * clip_radius`.
pub fn epsilon_per_release(dp: &DPConfig) -> f64 {
    if dp.sigma == 0.0 {
        return f64::INFINITY;
    }
    2.0 * dp.clip_radius * (2.0 * (1.25 / dp.delta).ln()).sqrt() / dp.sigma
}

/// Linear composition over `dp.rounds` releases.
pub fn epsilon_for(dp: &DPConfig) -> f64 {
    epsilon_per_release(dp) * dp.rounds as f64
}

/// Counts releases; one call to [`PrivacyAccountant::record`] per upload.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PrivacyAccountant {
    pub releases: u64,
    /// Largest per-client release count; the per-user guarantee composes over it.
    pub max_client_releases: u64,
}

impl PrivacyAccountant {
    pub fn record(&mut self, client_releases: u64) {
        self.releases += 1;
        self.max_client_releases = self.max_client_releases.max(client_releases);
    }

    /// Composed epsilon for the most exposed client.
    pub fn epsilon(&self, dp: &DPConfig) -> f64 {
        if self.max_client_releases == 0 {
            return 0.0;
        }
        epsilon_for(&DPConfig { rounds: self.max_client_releases, ..dp.clone() })
    }
}
