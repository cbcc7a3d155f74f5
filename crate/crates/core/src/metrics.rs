//! Signal-to-distortion ratio, SDR improvement, and permutation-invariant
//! assignment of estimates to targets.
//!
//! SDR projects the estimate `s` onto the target `x`:
//!
//! ```text
//! x̃ = (⟨x, s⟩ / ⟨x, x⟩) · x
//! e = x̃ − s
//! SDR = 10 · log10(⟨x̃, x̃⟩ / ⟨e, e⟩)
//! ```
//!
//! Results are clamped to ±[`SDR_CLAMP_DB`]. Both energy ratios used for the
//! degenerate cases are scale-free, so `sdr(βx, αs) == sdr(x, s)` for any
//! `α > 0`, `β ≠ 0`.

use thiserror::Error;

use crate::signal::Waveform;

pub const SDR_CLAMP_DB: f64 = 100.0;
/// Relative energy below which a term is treated as zero.
pub const ENERGY_EPS: f64 = 1e-20;
/// Largest source count accepted by the exhaustive permutation search.
pub const MAX_PIT_SOURCES: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("target has zero energy")]
    ZeroEnergyTarget,
    #[error("length mismatch: target {target} vs estimate {estimate} samples")]
    LengthMismatch { target: usize, estimate: usize },
    #[error("need at least 2 sources, got {0}")]
    TooFewSources(usize),
    #[error("{0} sources exceeds the permutation search limit of {MAX_PIT_SOURCES}")]
    TooManySources(usize),
    #[error("{targets} targets but {estimates} estimates")]
    CountMismatch { targets: usize, estimates: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SdrResult {
    pub sdr_db: f64,
    /// ⟨x̃, x̃⟩
    pub projection_energy: f64,
    /// ⟨e, e⟩
    pub error_energy: f64,
    /// ⟨x, s⟩ / ⟨x, x⟩
    pub scale: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PitResult {
    /// Output `j` is assigned to target `permutation[j]`.
    pub permutation: Vec<usize>,
    /// SDR of output `j` against its assigned target.
    pub per_source_sdr_db: Vec<f64>,
    pub mean_sdr_db: f64,
    pub loss: f64,
}

pub fn sdr(target: &Waveform, estimate: &Waveform) -> Result<SdrResult, MetricsError> {
    sdr_slices(target.samples(), estimate.samples())
}

/// SDR on raw sample slices.
pub fn sdr_slices(target: &[f64], estimate: &[f64]) -> Result<SdrResult, MetricsError> {
    if target.len() != estimate.len() {
        return Err(MetricsError::LengthMismatch {
            target: target.len(),
            estimate: estimate.len(),
        });
    }
    let xx: f64 = target.iter().map(|v| v * v).sum();
    if xx == 0.0 {
        return Err(MetricsError::ZeroEnergyTarget);
    }
    let xs: f64 = target.iter().zip(estimate).map(|(a, b)| a * b).sum();
    let ss: f64 = estimate.iter().map(|v| v * v).sum();
    let scale = xs / xx;
    let projection_energy = scale * scale * xx;
    let error_energy: f64 = target
        .iter()
        .zip(estimate)
        .map(|(x, s)| {
            let e = scale * x - s;
            e * e
        })
        .sum();
    let sdr_db = if projection_energy <= ENERGY_EPS * ss {
        -SDR_CLAMP_DB
    } else if error_energy <= ENERGY_EPS * projection_energy {
        SDR_CLAMP_DB
    } else {
        (10.0 * (projection_energy / error_energy).log10()).clamp(-SDR_CLAMP_DB, SDR_CLAMP_DB)
    };
    Ok(SdrResult {
        sdr_db,
        projection_energy,
        error_energy,
        scale,
    })
}

/// `sdr(target, estimate) − sdr(target, mixture)`, in dB.
pub fn sdr_improvement(
    target: &Waveform,
    estimate: &Waveform,
    mixture: &Waveform,
) -> Result<f64, MetricsError> {
    Ok(sdr(target, estimate)?.sdr_db - sdr(target, mixture)?.sdr_db)
}

/// `matrix[j][i]` is the SDR of estimate `j` against target `i`.
pub fn pairwise_sdr(
    targets: &[Waveform],
    estimates: &[Waveform],
) -> Result<Vec<Vec<f64>>, MetricsError> {
    estimates
        .iter()
        .map(|e| {
            targets
                .iter()
                .map(|t| sdr(t, e).map(|r| r.sdr_db))
                .collect()
        })
        .collect()
}

/// Exhaustive search for the output-to-target assignment with the highest
/// mean SDR. Ties keep the lexicographically smallest permutation.
pub fn pit_assign(targets: &[Waveform], estimates: &[Waveform]) -> Result<PitResult, MetricsError> {
    check_counts(targets.len(), estimates.len())?;
    let matrix = pairwise_sdr(targets, estimates)?;
    Ok(best_permutation(&matrix))
}

pub(crate) fn check_counts(targets: usize, estimates: usize) -> Result<(), MetricsError> {
    if targets != estimates {
        return Err(MetricsError::CountMismatch { targets, estimates });
    }
    if targets < 2 {
        return Err(MetricsError::TooFewSources(targets));
    }
    if targets > MAX_PIT_SOURCES {
        return Err(MetricsError::TooManySources(targets));
    }
    Ok(())
}

/// Maximizes the mean of `matrix[j][perm[j]]` over all permutations.
pub fn best_permutation(matrix: &[Vec<f64>]) -> PitResult {
    let s = matrix.len();
    let mut perm: Vec<usize> = (0..s).collect();
    let mut best: Option<(f64, Vec<usize>)> = None;
    loop {
        let mean = perm
            .iter()
            .enumerate()
            .map(|(j, &i)| matrix[j][i])
            .sum::<f64>()
            / s as f64;
        if best.as_ref().is_none_or(|(m, _)| mean > *m) {
            best = Some((mean, perm.clone()));
        }
        if !next_permutation(&mut perm) {
            break;
        }
    }
    let (mean_sdr_db, permutation) = best.expect("at least one permutation");
    let per_source_sdr_db = permutation
        .iter()
        .enumerate()
        .map(|(j, &i)| matrix[j][i])
        .collect();
    PitResult {
        permutation,
        per_source_sdr_db,
        mean_sdr_db,
        loss: -mean_sdr_db,
    }
}

/// Advances to the next permutation in lexicographic order; `false` once the
/// last one has been passed (the slice is then sorted again).
pub fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        p.reverse();
        return false;
    }
    let mut j = n - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}
