//! Mel-frequency cepstral coefficients.
//!
//! Per frame: power spectrum of the zero-padded window, triangular mel
//! filterbank energies, natural log (floored at [`LOG_FLOOR`]) and an
//! unnormalized DCT-II. No pre-emphasis, window taper or liftering is applied.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

use crate::audio::Frame;
use crate::N_COEFFS;

/// Filterbank energies are clamped to this value before the log.
pub const LOG_FLOOR: f64 = 1e-12;

pub const DEFAULT_NFFT: usize = 512;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum MfccError {
    #[error("frame of {frame} samples does not fit in an FFT of size {nfft}")]
    FrameTooLong { frame: usize, nfft: usize },
    #[error("mel conversion needs a non-negative frequency, got {0}")]
    NegativeFrequency(f64),
    #[error("invalid filterbank band: need 0 <= f_low < f_high <= nyquist ({low} .. {high}, nyquist {nyquist})")]
    BadBand { low: f64, high: f64, nyquist: f64 },
    #[error("filterbank needs at least one filter")]
    NoFilters,
    #[error("filter {filter} collapses: edge bins {edges:?} are not strictly increasing (too many filters for nfft {nfft})")]
    CollapsedFilter {
        filter: usize,
        edges: [usize; 3],
        nfft: usize,
    },
    #[error("filterbank expects {expected} spectrum bins, got {got}")]
    BinMismatch { expected: usize, got: usize },
    #[error("filterbank has {0} filters; MFCC vectors need exactly {N_COEFFS}")]
    FilterCount(usize),
}

pub type Result<T> = std::result::Result<T, MfccError>;

/// `|DFT_k|^2 / nfft` for `k = 0..=nfft/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerSpectrum {
    pub bins: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    /// `[n_filters][nfft/2 + 1]` triangular weights.
    pub filters: Vec<Vec<f64>>,
    pub edges_hz: Vec<f64>,
    pub edges_mel: Vec<f64>,
    pub edge_bins: Vec<usize>,
    pub nfft: usize,
    pub sample_rate: u32,
}

impl MelFilterbank {
    pub fn n_filters(&self) -> usize {
        self.filters.len()
    }

    /// Center frequency of each filter in Hz.
    pub fn centers_hz(&self) -> Vec<f64> {
        self.edges_hz[1..self.edges_hz.len() - 1].to_vec()
    }

    pub fn apply(&self, spectrum: &PowerSpectrum) -> Result<Vec<f64>> {
        let expected = self.nfft / 2 + 1;
        if spectrum.bins.len() != expected {
            return Err(MfccError::BinMismatch {
                expected,
                got: spectrum.bins.len(),
            });
        }
        Ok(self
            .filters
            .iter()
            .map(|f| f.iter().zip(&spectrum.bins).map(|(w, p)| w * p).sum())
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MfccVector(pub [f64; N_COEFFS]);

impl MfccVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

pub fn hz_to_mel(f: f64) -> Result<f64> {
    if f < 0.0 || f.is_nan() {
        return Err(MfccError::NegativeFrequency(f));
    }
    Ok(2595.0 * (1.0 + f / 700.0).log10())
}

pub fn mel_to_hz(m: f64) -> Result<f64> {
    if m < 0.0 || m.is_nan() {
        return Err(MfccError::NegativeFrequency(m));
    }
    Ok(700.0 * (10f64.powf(m / 2595.0) - 1.0))
}

pub fn build_filterbank(
    n_filters: usize,
    nfft: usize,
    sample_rate: u32,
    f_low: f64,
    f_high: f64,
) -> Result<MelFilterbank> {
    if n_filters == 0 {
        return Err(MfccError::NoFilters);
    }
    let nyquist = sample_rate as f64 / 2.0;
    if !(f_low >= 0.0 && f_low < f_high && f_high <= nyquist) {
        return Err(MfccError::BadBand {
            low: f_low,
            high: f_high,
            nyquist,
        });
    }
    let mel_lo = hz_to_mel(f_low)?;
    let mel_hi = hz_to_mel(f_high)?;
    let step = (mel_hi - mel_lo) / (n_filters + 1) as f64;
    let edges_mel: Vec<f64> = (0..n_filters + 2)
        .map(|i| mel_lo + step * i as f64)
        .collect();
    let edges_hz = edges_mel
        .iter()
        .map(|&m| mel_to_hz(m))
        .collect::<Result<Vec<_>>>()?;
    let n_bins = nfft / 2 + 1;
    let edge_bins: Vec<usize> = edges_hz
        .iter()
        .map(|&hz| (((nfft + 1) as f64 * hz / sample_rate as f64).floor() as usize).min(n_bins - 1))
        .collect();

    let mut filters = Vec::with_capacity(n_filters);
    for i in 0..n_filters {
        let (lo, mid, hi) = (edge_bins[i], edge_bins[i + 1], edge_bins[i + 2]);
        if !(lo < mid && mid < hi) {
            return Err(MfccError::CollapsedFilter {
                filter: i,
                edges: [lo, mid, hi],
                nfft,
            });
        }
        let mut row = vec![0.0; n_bins];
        for (k, w) in row.iter_mut().enumerate().take(hi + 1).skip(lo) {
            *w = if k <= mid {
                (k - lo) as f64 / (mid - lo) as f64
            } else {
                (hi - k) as f64 / (hi - mid) as f64
            };
        }
        filters.push(row);
    }
    Ok(MelFilterbank {
        filters,
        edges_hz,
        edges_mel,
        edge_bins,
        nfft,
        sample_rate,
    })
}

/// Unnormalized DCT-II `X_k = sum_n x_n cos(pi/N (n + 1/2) k)`, computed with a
/// length-2N FFT of the even extension.
pub struct Dct2 {
    n: usize,
    fft: Arc<dyn Fft<f64>>,
    twiddles: Vec<Complex<f64>>,
}

impl Dct2 {
    pub fn new(n: usize) -> Self {
        let fft = FftPlanner::new().plan_fft_forward(2 * n);
        let twiddles = (0..n)
            .map(|k| Complex::from_polar(0.5, -PI * k as f64 / (2 * n) as f64))
            .collect();
        Self { n, fft, twiddles }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn transform(&self, input: &[f64]) -> Vec<f64> {
        assert_eq!(input.len(), self.n, "DCT length mismatch");
        let mut buf: Vec<Complex<f64>> = input
            .iter()
            .chain(input.iter().rev())
            .map(|&x| Complex::new(x, 0.0))
            .collect();
        self.fft.process(&mut buf);
        buf.iter()
            .zip(&self.twiddles)
            .map(|(y, t)| (y * t).re)
            .collect()
    }
}

/// Reusable FFT + filterbank + DCT plan for one sample rate and FFT size.
pub struct MfccExtractor {
    nfft: usize,
    fft: Arc<dyn Fft<f64>>,
    filterbank: MelFilterbank,
    dct: Dct2,
}

impl MfccExtractor {
    pub fn new(filterbank: MelFilterbank) -> Result<Self> {
        if filterbank.n_filters() != N_COEFFS {
            return Err(MfccError::FilterCount(filterbank.n_filters()));
        }
        let nfft = filterbank.nfft;
        Ok(Self {
            nfft,
            fft: FftPlanner::new().plan_fft_forward(nfft),
            dct: Dct2::new(filterbank.n_filters()),
            filterbank,
        })
    }

    /// 26 filters spanning 0 Hz to Nyquist with a 512-point FFT.
    pub fn standard(sample_rate: u32) -> Result<Self> {
        Self::new(build_filterbank(
            N_COEFFS,
            DEFAULT_NFFT,
            sample_rate,
            0.0,
            sample_rate as f64 / 2.0,
        )?)
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    pub fn power_spectrum(&self, samples: &[f64]) -> Result<PowerSpectrum> {
        spectrum_with(&*self.fft, self.nfft, samples)
    }

    /// Log filterbank energies, before the DCT.
    pub fn log_energies(&self, samples: &[f64]) -> Result<Vec<f64>> {
        let spectrum = self.power_spectrum(samples)?;
        Ok(self
            .filterbank
            .apply(&spectrum)?
            .into_iter()
            .map(|e| e.max(LOG_FLOOR).ln())
            .collect())
    }

    pub fn extract(&self, frame: &Frame) -> Result<MfccVector> {
        let coeffs = self.dct.transform(&self.log_energies(&frame.samples)?);
        let mut out = [0.0; N_COEFFS];
        out.copy_from_slice(&coeffs);
        Ok(MfccVector(out))
    }
}

fn spectrum_with(fft: &dyn Fft<f64>, nfft: usize, samples: &[f64]) -> Result<PowerSpectrum> {
    if samples.len() > nfft {
        return Err(MfccError::FrameTooLong {
            frame: samples.len(),
            nfft,
        });
    }
    let mut buf = vec![Complex::new(0.0, 0.0); nfft];
    for (b, &s) in buf.iter_mut().zip(samples) {
        b.re = s;
    }
    fft.process(&mut buf);
    Ok(PowerSpectrum {
        bins: buf[..=nfft / 2]
            .iter()
            .map(|c| c.norm_sqr() / nfft as f64)
            .collect(),
    })
}

pub fn power_spectrum(frame: &Frame, nfft: usize) -> Result<PowerSpectrum> {
    let fft = FftPlanner::new().plan_fft_forward(nfft);
    spectrum_with(&*fft, nfft, &frame.samples)
}

pub fn extract_mfcc(frame: &Frame, fb: &MelFilterbank) -> Result<MfccVector> {
    MfccExtractor::new(fb.clone())?.extract(frame)
}
