//! Gaussian-mixture stand-ins for a speaker's MFCC distribution.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::dataset::{Label, MfccDataset, MfccRow, Provenance};
use crate::mfcc::MfccVector;
use crate::seed;
use crate::N_COEFFS;

/// Equal-weight mixture of isotropic Gaussians over the coefficient vector.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSpeaker {
    pub centers: Vec<[f64; N_COEFFS]>,
    pub sigma: f64,
}

impl GaussianSpeaker {
    /// `clusters` centers drawn uniformly from `[-spread, spread]` per coefficient,
    /// rounded to two decimals.
    pub fn random(clusters: usize, spread: f64, sigma: f64, seed: u64) -> Self {
        assert!(clusters > 0 && spread > 0.0 && sigma >= 0.0);
        let mut rng = seed::rng(seed);
        let centers = (0..clusters)
            .map(|_| std::array::from_fn(|_| (rng.random_range(-spread..spread) * 100.0).round() / 100.0))
            .collect();
        Self { centers, sigma }
    }

    /// Same centers, every coefficient moved by `delta`.
    pub fn shifted(&self, delta: f64) -> Self {
        Self {
            centers: self.centers.iter().map(|c| c.map(|v| v + delta)).collect(),
            sigma: self.sigma,
        }
    }

    pub fn sample(&self, n: usize, label: Label, seed: u64) -> MfccDataset {
        let mut rng = seed::rng(seed);
        let noise = Normal::new(0.0, self.sigma).expect("sigma is finite and non-negative");
        let rows = (0..n)
            .map(|_| {
                let center = &self.centers[rng.random_range(0..self.centers.len())];
                let coeffs = center.map(|m| m + noise.sample(&mut rng));
                MfccRow {
                    coefficients: MfccVector(coeffs),
                    label,
                }
            })
            .collect();
        let provenance = match label {
            Label::Speaker => Provenance::RealPositive,
            Label::Other => Provenance::RealNegative,
        };
        MfccDataset::from_rows(rows, provenance)
    }
}
