//! STFT analysis/synthesis and the ideal-ratio-mask oracle separator.
//!
//! Conventions: periodic square-root Hann window on both analysis and
//! synthesis, unnormalized forward DFT, `1/N` inverse, and per-sample
//! normalization by the summed squared window during overlap-add. At 50 %
//! overlap the squared windows sum to exactly one.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

use crate::par::{self, Execution};
use crate::signal::{SignalError, Waveform};

pub const DEFAULT_FFT_SIZE: usize = 256;
pub const DEFAULT_HOP: usize = 128;

#[derive(Debug, Error)]
pub enum SpectralError {
    #[error("fft size {0} is not a power of two >= 2")]
    InvalidFftSize(usize),
    #[error("hop {hop} must be in 1..={fft_size}")]
    InvalidHop { hop: usize, fft_size: usize },
    #[error("ideal ratio masks need at least 2 sources, got {0}")]
    TooFewSources(usize),
    #[error(transparent)]
    Signal(#[from] SignalError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Window {
    SqrtHann,
}

impl Window {
    pub fn coefficients(self, n: usize) -> Vec<f64> {
        match self {
            Window::SqrtHann => (0..n)
                .map(|i| (0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).sqrt())
                .collect(),
        }
    }
}

/// Non-negative-frequency STFT bins, row-major `[num_frames × (fft_size/2+1)]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    bins: Vec<Complex64>,
    num_frames: usize,
    fft_size: usize,
    hop: usize,
    window: Window,
    original_len: usize,
    sample_rate_hz: u32,
}

impl Spectrogram {
    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn num_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn fft_size(&self) -> usize {
        self.fft_size
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn window(&self) -> Window {
        self.window
    }

    pub fn original_len(&self) -> usize {
        self.original_len
    }

    pub fn bins(&self) -> &[Complex64] {
        &self.bins
    }

    pub fn frame(&self, t: usize) -> &[Complex64] {
        let nb = self.num_bins();
        &self.bins[t * nb..(t + 1) * nb]
    }

    pub fn magnitudes(&self) -> Vec<f64> {
        self.bins.iter().map(|c| c.norm()).collect()
    }

    /// Time-domain energy of windowed frame `t`, recovered from its half
    /// spectrum by Parseval's relation.
    pub fn frame_energy(&self, t: usize) -> f64 {
        let f = self.frame(t);
        let n = self.fft_size;
        let last = f.len() - 1;
        let inner: f64 = f[1..last].iter().map(|c| c.norm_sqr()).sum();
        (f[0].norm_sqr() + f[last].norm_sqr() + 2.0 * inner) / n as f64
    }

    /// Elementwise real gain on every bin.
    pub fn masked(&self, mask: &[f64]) -> Spectrogram {
        assert_eq!(
            mask.len(),
            self.bins.len(),
            "mask does not match spectrogram"
        );
        Spectrogram {
            bins: self.bins.iter().zip(mask).map(|(c, m)| c * m).collect(),
            ..self.clone()
        }
    }
}

/// Per-source masks over the time-frequency grid; masks sum to one per bin.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet {
    masks: Vec<Vec<f64>>,
    num_frames: usize,
    num_bins: usize,
}

impl MaskSet {
    pub fn num_sources(&self) -> usize {
        self.masks.len()
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn num_bins(&self) -> usize {
        self.num_bins
    }

    pub fn mask(&self, s: usize) -> &[f64] {
        &self.masks[s]
    }

    pub fn get(&self, s: usize, t: usize, f: usize) -> f64 {
        self.masks[s][t * self.num_bins + f]
    }
}

fn validate(fft_size: usize, hop: usize) -> Result<(), SpectralError> {
    if fft_size < 2 || !fft_size.is_power_of_two() {
        return Err(SpectralError::InvalidFftSize(fft_size));
    }
    if hop == 0 || hop > fft_size {
        return Err(SpectralError::InvalidHop { hop, fft_size });
    }
    Ok(())
}

fn num_frames(len: usize, fft_size: usize, hop: usize) -> usize {
    1 + len.saturating_sub(fft_size).div_ceil(hop)
}

/// Forward DFT of a real power-of-two-length frame, non-negative bins only.
pub fn rfft(frame: &[f64]) -> Result<Vec<Complex64>, SpectralError> {
    let n = frame.len();
    if n < 2 || !n.is_power_of_two() {
        return Err(SpectralError::InvalidFftSize(n));
    }
    let fft = FftPlanner::new().plan_fft_forward(n);
    Ok(rfft_with(&*fft, frame))
}

fn rfft_with(fft: &dyn Fft<f64>, frame: &[f64]) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = frame.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    fft.process(&mut buf);
    buf.truncate(frame.len() / 2 + 1);
    buf
}

pub fn stft(w: &Waveform, fft_size: usize, hop: usize) -> Result<Spectrogram, SpectralError> {
    stft_with(w, fft_size, hop, Execution::default())
}

pub fn stft_with(
    w: &Waveform,
    fft_size: usize,
    hop: usize,
    exec: Execution,
) -> Result<Spectrogram, SpectralError> {
    validate(fft_size, hop)?;
    let window = Window::SqrtHann;
    let win = window.coefficients(fft_size);
    let fft: Arc<dyn Fft<f64>> = FftPlanner::new().plan_fft_forward(fft_size);
    let x = w.samples();
    let nf = num_frames(x.len(), fft_size, hop);
    let frames = par::map_range(exec, nf, |t| {
        let start = t * hop;
        let frame: Vec<f64> = (0..fft_size)
            .map(|i| x.get(start + i).copied().unwrap_or(0.0) * win[i])
            .collect();
        rfft_with(&*fft, &frame)
    });
    Ok(Spectrogram {
        bins: frames.concat(),
        num_frames: nf,
        fft_size,
        hop,
        window,
        original_len: x.len(),
        sample_rate_hz: w.sample_rate_hz(),
    })
}

pub fn istft(s: &Spectrogram) -> Waveform {
    istft_with(s, Execution::default())
}

pub fn istft_with(s: &Spectrogram, exec: Execution) -> Waveform {
    let n = s.fft_size;
    let win = s.window.coefficients(n);
    let ifft: Arc<dyn Fft<f64>> = FftPlanner::new().plan_fft_inverse(n);
    let frames = par::map_range(exec, s.num_frames, |t| {
        let half = s.frame(t);
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        buf[..half.len()].copy_from_slice(half);
        for k in 1..n / 2 {
            buf[n - k] = half[k].conj();
        }
        ifft.process(&mut buf);
        buf.iter()
            .zip(&win)
            .map(|(c, w)| c.re / n as f64 * w)
            .collect::<Vec<f64>>()
    });
    let covered = (s.num_frames - 1) * s.hop + n;
    let mut out = vec![0.0; covered];
    let mut norm = vec![0.0; covered];
    for (t, frame) in frames.iter().enumerate() {
        let off = t * s.hop;
        for (i, v) in frame.iter().enumerate() {
            out[off + i] += v;
            norm[off + i] += win[i] * win[i];
        }
    }
    out.truncate(s.original_len);
    for (o, w) in out.iter_mut().zip(&norm) {
        *o = if *w > 1e-10 { *o / w } else { 0.0 };
    }
    Waveform::new(out, s.sample_rate_hz).expect("original_len is positive")
}

/// Ideal ratio masks `|X_s| / Σ_s |X_s|`; bins where every source is silent
/// get `1/S` for each source.
pub fn irm_masks(
    sources: &[Waveform],
    fft_size: usize,
    hop: usize,
) -> Result<MaskSet, SpectralError> {
    if sources.len() < 2 {
        return Err(SpectralError::TooFewSources(sources.len()));
    }
    for s in &sources[1..] {
        if s.len() != sources[0].len() {
            return Err(SignalError::LengthMismatch(sources[0].len(), s.len()).into());
        }
    }
    let mags: Vec<Vec<f64>> = sources
        .iter()
        .map(|w| stft(w, fft_size, hop).map(|s| s.magnitudes()))
        .collect::<Result<_, _>>()?;
    let cells = mags[0].len();
    let uniform = 1.0 / sources.len() as f64;
    let mut masks = vec![vec![0.0; cells]; sources.len()];
    for c in 0..cells {
        let total: f64 = mags.iter().map(|m| m[c]).sum();
        for (mask, mag) in masks.iter_mut().zip(&mags) {
            mask[c] = if total > 0.0 { mag[c] / total } else { uniform };
        }
    }
    Ok(MaskSet {
        masks,
        num_frames: num_frames(sources[0].len(), fft_size, hop),
        num_bins: fft_size / 2 + 1,
    })
}

/// Applies each source's ideal ratio mask to the mixture STFT (keeping the
/// mixture phase) and resynthesizes.
pub fn irm_separate(
    mixture: &Waveform,
    sources: &[Waveform],
    fft_size: usize,
    hop: usize,
) -> Result<Vec<Waveform>, SpectralError> {
    if let Some(s) = sources.iter().find(|s| s.len() != mixture.len()) {
        return Err(SignalError::LengthMismatch(mixture.len(), s.len()).into());
    }
    let masks = irm_masks(sources, fft_size, hop)?;
    let spec = stft(mixture, fft_size, hop)?;
    Ok((0..sources.len())
        .map(|s| istft(&spec.masked(masks.mask(s))))
        .collect())
}
