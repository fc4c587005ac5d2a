//! Feature map from scalar data values to unit `d`-vectors, and whole images
//! to product states.
//!
//! Component `s` (1-based) of the encoded value is
//! `sqrt(C(d-1, s-1)) * cos(phi)^(d-s) * sin(phi)^(s-1)` with
//! `phi = (pi/2) * angle_scale * theta`, which is unit-norm for every `theta`
//! by the binomial theorem.

use thiserror::Error;

use crate::data::LinearizedSet;
use crate::par;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("physical dimension must be >= 2, got {0}")]
    BadPhysDim(usize),
    #[error("angle scale must be positive and finite, got {0}")]
    BadAngleScale(f64),
    #[error("non-finite data value at sample {sample}, site {site}")]
    NonFinite { sample: usize, site: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureConfig {
    pub d: usize,
    pub angle_scale: f64,
}

impl FeatureConfig {
    pub fn new(d: usize, angle_scale: f64) -> Result<Self, FeatureError> {
        if d < 2 {
            return Err(FeatureError::BadPhysDim(d));
        }
        if !(angle_scale > 0.0) || !angle_scale.is_finite() {
            return Err(FeatureError::BadAngleScale(angle_scale));
        }
        Ok(Self { d, angle_scale })
    }
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            d: 2,
            angle_scale: 1.0,
        }
    }
}

/// One image as a product state: `sites * d` unit vectors plus its class.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSample {
    vectors: Vec<f64>,
    d: usize,
    pub label: usize,
}

impl EncodedSample {
    pub fn new(vectors: Vec<f64>, d: usize, label: usize) -> Self {
        assert!(d >= 2 && vectors.len() % d == 0);
        Self { vectors, d, label }
    }

    pub fn sites(&self) -> usize {
        self.vectors.len() / self.d
    }

    pub fn phys_dim(&self) -> usize {
        self.d
    }

    pub fn site_vector(&self, l: usize) -> &[f64] {
        &self.vectors[l * self.d..(l + 1) * self.d]
    }

    /// Sample restricted to its first `len` sites.
    pub fn truncate(&self, len: usize) -> Self {
        assert!(len <= self.sites());
        Self {
            vectors: self.vectors[..len * self.d].to_vec(),
            d: self.d,
            label: self.label,
        }
    }
}

/// Encode one scalar into a unit `d`-vector.
pub fn encode_value(theta: f64, cfg: &FeatureConfig) -> Vec<f64> {
    debug_assert!(theta.is_finite());
    let phi = std::f64::consts::FRAC_PI_2 * cfg.angle_scale * theta;
    let (c, s) = (phi.cos(), phi.sin());
    (0..cfg.d)
        .map(|k| {
            // k = s - 1 in 1-based component terms
            binomial_sqrt(cfg.d - 1, k) * c.powi((cfg.d - 1 - k) as i32) * s.powi(k as i32)
        })
        .collect()
}

fn binomial_sqrt(n: usize, k: usize) -> f64 {
    let mut b = 1.0f64;
    for i in 0..k.min(n - k) {
        b = b * (n - i) as f64 / (i + 1) as f64;
    }
    b.sqrt()
}

/// Encode every sample of a linearized dataset, in parallel.
pub fn encode_dataset(
    data: &LinearizedSet,
    cfg: &FeatureConfig,
) -> Result<Vec<EncodedSample>, FeatureError> {
    if let Some(bad) = data.values.iter().position(|v| !v.is_finite()) {
        return Err(FeatureError::NonFinite {
            sample: bad / data.n_sites,
            site: bad % data.n_sites,
        });
    }
    let indices: Vec<usize> = (0..data.len()).collect();
    Ok(par::map_collect(&indices, |&n| {
        let row = data.sample(n);
        let mut vectors = Vec::with_capacity(row.len() * cfg.d);
        for &theta in row {
            vectors.extend(encode_value(theta, cfg));
        }
        EncodedSample::new(vectors, cfg.d, data.labels[n] as usize)
    }))
}
