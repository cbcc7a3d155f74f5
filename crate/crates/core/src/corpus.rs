//! Seeded synthetic mixtures of harmonic "speakers".
//!
//! Each speaker is a sum of harmonics of a slowly drifting fundamental,
//! amplitude-modulated and peak-normalized. An example draws `S` speakers
//! with distinct fundamentals, scales every interferer against source 1 to
//! the drawn SNR, and stores the scaled sources so that they sum exactly to
//! the mixture.
//!
//! With `band_separable` set, speaker `s` keeps only harmonics inside its own
//! frequency band (bands are disjoint, with guard gaps wide enough for the
//! pitch drift), which makes the task spectrally separable.
//!
//! # Manifest format
//!
//! JSON lines. The first line describes the corpus, with fields in this
//! order: `generator_version`, `split`, `seed`, `sample_rate_hz`,
//! `num_sources`, `duration_s`, `snr_min_db`, `snr_max_db`,
//! `band_separable`. Every further line is one example: `example_id`,
//! `mixture`, `sources`, `snr_db`, `seed`. Audio paths are relative to the
//! manifest's directory.

use std::f64::consts::TAU;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::par::{self, Execution};
use crate::signal::{self, mix_at_snr, mix_sum, SignalError, Waveform};

pub const GENERATOR_VERSION: u32 = 1;
/// Peak amplitude of every synthesized speaker.
pub const SPEAKER_PEAK: f64 = 0.7;
/// Mixtures louder than this are attenuated, together with their sources.
pub const MIXTURE_PEAK: f64 = 0.9;
/// Relative pitch excursion of the slow drift.
pub const PITCH_DRIFT: f64 = 0.03;
/// Closest allowed spacing between fundamentals in one mixture.
pub const MIN_F0_SPACING_HZ: f64 = 20.0;
/// Per-sample tolerance of the additivity check on quantized files.
pub const ADDITIVITY_TOLERANCE: f64 = 2.0 / 32768.0;

const F0_RANGE_HZ: (f64, f64) = (90.0, 300.0);
const AM_RATE_RANGE_HZ: (f64, f64) = (2.0, 6.0);
const AM_DEPTH: f64 = 0.5;
const BAND_EDGES_HZ: (f64, f64) = (100.0, 3800.0);
const BAND_GUARD_HZ: f64 = 150.0;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error("invalid corpus config: {0}")]
    InvalidConfig(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Manifest {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("example {id}: missing file {path}")]
    MissingFile { id: String, path: PathBuf },
    #[error(
        "example {id}: sources differ from the mixture by {deviation:.3e} (limit {limit:.3e})"
    )]
    Additivity {
        id: String,
        deviation: f64,
        limit: f64,
    },
    #[error("speaker profile has no audible harmonics")]
    Silent,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerProfile {
    pub fundamental_hz: f64,
    /// Weight of harmonic `k + 1` at index `k`.
    pub harmonic_weights: Vec<f64>,
    /// Amplitude-modulation rate; 0 gives a constant envelope.
    pub am_rate_hz: f64,
    /// Relative pitch drift amplitude; [`PITCH_DRIFT`] for generated speakers.
    pub drift: f64,
    pub seed: u64,
}

/// Renders a speaker. Harmonics that could cross Nyquist under drift are
/// dropped.
pub fn synth_speaker(
    profile: &SpeakerProfile,
    duration_s: f64,
    sample_rate_hz: u32,
) -> Result<Waveform, CorpusError> {
    if !(duration_s >= 0.1) {
        return Err(CorpusError::InvalidConfig(format!(
            "duration {duration_s} s is below the 0.1 s minimum"
        )));
    }
    if !(profile.fundamental_hz > 0.0) || profile.harmonic_weights.iter().any(|w| !w.is_finite()) {
        return Err(CorpusError::InvalidConfig(
            "malformed speaker profile".into(),
        ));
    }
    let sr = f64::from(sample_rate_hz);
    let n = (duration_s * sr).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(profile.seed);
    let phases: Vec<f64> = profile
        .harmonic_weights
        .iter()
        .map(|_| rng.gen_range(0.0..TAU))
        .collect();
    let drift_rates = [rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0)];
    let drift_phases = [rng.gen_range(0.0..TAU), rng.gen_range(0.0..TAU)];
    let am_phase = rng.gen_range(0.0..TAU);

    let ceiling = profile.fundamental_hz * (1.0 + profile.drift);
    let harmonics: Vec<(f64, f64, f64)> = profile
        .harmonic_weights
        .iter()
        .zip(&phases)
        .enumerate()
        .filter(|&(k, (&w, _))| w != 0.0 && (k + 1) as f64 * ceiling < sr / 2.0)
        .map(|(k, (&w, &p))| ((k + 1) as f64, w, p))
        .collect();
    if harmonics.is_empty() {
        return Err(CorpusError::Silent);
    }

    let mut theta = 0.0;
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / sr;
        let wobble = (0..2)
            .map(|j| (TAU * drift_rates[j] * t + drift_phases[j]).sin())
            .sum::<f64>()
            / 2.0;
        let env = 1.0 + AM_DEPTH * (TAU * profile.am_rate_hz * t + am_phase).sin();
        let v: f64 = harmonics
            .iter()
            .map(|&(k, w, p)| w * (k * theta + p).sin())
            .sum();
        samples.push(env * v);
        theta += TAU * profile.fundamental_hz * (1.0 + profile.drift * wobble) / sr;
    }
    let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak == 0.0 {
        return Err(CorpusError::Silent);
    }
    let gain = SPEAKER_PEAK / peak;
    samples.iter_mut().for_each(|v| *v *= gain);
    Ok(Waveform::new(samples, sample_rate_hz)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    /// First per-example seed of this split; splits never share seeds.
    pub fn seed_base(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Dev => 1 << 32,
            Split::Test => 2 << 32,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(format!(
                "unknown split `{other}` (expected train, dev or test)"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub split: Split,
    pub num_examples: usize,
    pub num_sources: usize,
    pub duration_s: f64,
    pub snr_min_db: f64,
    pub snr_max_db: f64,
    pub seed: u64,
    pub sample_rate_hz: u32,
    pub band_separable: bool,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            split: Split::Train,
            num_examples: 200,
            num_sources: 2,
            duration_s: 1.0,
            snr_min_db: 0.0,
            snr_max_db: 5.0,
            seed: 0,
            sample_rate_hz: signal::DEFAULT_SAMPLE_RATE,
            band_separable: true,
        }
    }
}

impl CorpusConfig {
    /// The default desk-scale split sizes: 200 train, 40 dev, 40 test.
    pub fn desk(split: Split, seed: u64) -> Self {
        let num_examples = if split == Split::Train { 200 } else { 40 };
        Self {
            split,
            num_examples,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: &str| Err(CorpusError::InvalidConfig(m.into()));
        if self.num_examples == 0 {
            return bad("num_examples must be at least 1");
        }
        if self.num_sources < 2 {
            return bad("at least two sources are needed");
        }
        if !(self.snr_min_db <= self.snr_max_db) {
            return bad("snr_min must not exceed snr_max");
        }
        if !(self.duration_s >= 0.1) {
            return bad("duration must be at least 0.1 s");
        }
        if self.sample_rate_hz < 2 * BAND_EDGES_HZ.1 as u32 {
            return bad("sample rate is too low for the synthetic speakers");
        }
        let max_sources = ((F0_RANGE_HZ.1 - F0_RANGE_HZ.0) / MIN_F0_SPACING_HZ) as usize;
        if self.num_sources > max_sources {
            return bad("too many sources for distinct fundamentals");
        }
        Ok(())
    }

    fn band(&self, slot: usize) -> Option<(f64, f64)> {
        if !self.band_separable {
            return None;
        }
        let width = (BAND_EDGES_HZ.1 - BAND_EDGES_HZ.0) / self.num_sources as f64;
        let lo = BAND_EDGES_HZ.0 + slot as f64 * width;
        Some((lo + BAND_GUARD_HZ, lo + width - BAND_GUARD_HZ))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixtureExample {
    pub mixture: Waveform,
    /// Scaled sources; they sum to `mixture`.
    pub sources: Vec<Waveform>,
    pub snr_db: f64,
    pub example_id: String,
    pub seed: u64,
}

fn draw_profile(
    rng: &mut ChaCha8Rng,
    f0: f64,
    band: Option<(f64, f64)>,
    sr: f64,
) -> SpeakerProfile {
    let count = ((sr / 2.0) / f0).floor() as usize;
    let harmonic_weights = (1..=count)
        .map(|k| {
            let w = rng.gen_range(0.4..1.0) / (k as f64).sqrt();
            let f = k as f64 * f0;
            let inside = band.is_none_or(|(lo, hi)| {
                f * (1.0 - PITCH_DRIFT) >= lo && f * (1.0 + PITCH_DRIFT) <= hi
            });
            if inside {
                w
            } else {
                0.0
            }
        })
        .collect();
    SpeakerProfile {
        fundamental_hz: f0,
        harmonic_weights,
        am_rate_hz: rng.gen_range(AM_RATE_RANGE_HZ.0..AM_RATE_RANGE_HZ.1),
        drift: PITCH_DRIFT,
        seed: rng.gen(),
    }
}

fn draw_fundamentals(rng: &mut ChaCha8Rng, count: usize) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::with_capacity(count);
    while out.len() < count {
        let f0 = rng.gen_range(F0_RANGE_HZ.0..F0_RANGE_HZ.1);
        if out.iter().all(|&f| (f - f0).abs() >= MIN_F0_SPACING_HZ) {
            out.push(f0);
        }
    }
    out
}

/// Builds example `index` of the configured split.
pub fn generate_example(cfg: &CorpusConfig, index: usize) -> Result<MixtureExample, CorpusError> {
    let seed = cfg.split.seed_base() + index as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(seed);
    let sr = cfg.sample_rate_hz;
    let f0s = draw_fundamentals(&mut rng, cfg.num_sources);
    let mut slots: Vec<usize> = (0..cfg.num_sources).collect();
    if rng.gen_bool(0.5) {
        slots.reverse();
    }
    let snr_db = if cfg.snr_max_db > cfg.snr_min_db {
        rng.gen_range(cfg.snr_min_db..=cfg.snr_max_db)
    } else {
        cfg.snr_min_db
    };
    let mut raw = Vec::with_capacity(cfg.num_sources);
    for (f0, &slot) in f0s.iter().zip(&slots) {
        let profile = draw_profile(&mut rng, *f0, cfg.band(slot), f64::from(sr));
        raw.push(synth_speaker(&profile, cfg.duration_s, sr)?);
    }
    let mut sources = vec![raw[0].clone()];
    for interferer in &raw[1..] {
        let (_, scaled) = mix_at_snr(&raw[0], interferer, snr_db)?;
        sources.push(scaled);
    }
    let peak = mix_sum(&sources)?.peak();
    if peak > MIXTURE_PEAK {
        let gain = MIXTURE_PEAK / peak;
        sources = sources.iter().map(|s| s.scaled(gain)).collect();
    }
    let mixture = mix_sum(&sources)?;
    Ok(MixtureExample {
        mixture,
        sources,
        snr_db,
        example_id: format!("{}-{index:05}", cfg.split.name()),
        seed,
    })
}

/// All examples of a split, in id order, without touching the disk.
pub fn generate_examples(
    cfg: &CorpusConfig,
    exec: Execution,
) -> Result<Vec<MixtureExample>, CorpusError> {
    cfg.validate()?;
    par::map_range(exec, cfg.num_examples, |i| generate_example(cfg, i))
        .into_iter()
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub generator_version: u32,
    pub split: Split,
    pub seed: u64,
    pub sample_rate_hz: u32,
    pub num_sources: usize,
    pub duration_s: f64,
    pub snr_min_db: f64,
    pub snr_max_db: f64,
    pub band_separable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub example_id: String,
    pub mixture: PathBuf,
    pub sources: Vec<PathBuf>,
    pub snr_db: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub path: PathBuf,
    pub header: ManifestHeader,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let path = path.as_ref();
        let file = File::open(path).map_err(io_err(path))?;
        let parse_err = |line: usize, msg: String| CorpusError::Manifest {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut lines = BufReader::new(file).lines();
        let first = lines
            .next()
            .ok_or_else(|| parse_err(1, "empty manifest".into()))?
            .map_err(io_err(path))?;
        let header: ManifestHeader =
            serde_json::from_str(&first).map_err(|e| parse_err(1, e.to_string()))?;
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line.map_err(io_err(path))?;
            if line.trim().is_empty() {
                continue;
            }
            let record: ManifestRecord =
                serde_json::from_str(&line).map_err(|e| parse_err(i + 2, e.to_string()))?;
            records.push(record);
        }
        Ok(Self {
            path: path.to_path_buf(),
            header,
            records,
        })
    }

    fn write(&self) -> Result<(), CorpusError> {
        let path = &self.path;
        let file = File::create(path).map_err(io_err(path))?;
        let mut w = BufWriter::new(file);
        let header = serde_json::to_string(&self.header).expect("header serializes");
        writeln!(w, "{header}").map_err(io_err(path))?;
        for r in &self.records {
            let line = serde_json::to_string(r).expect("record serializes");
            writeln!(w, "{line}").map_err(io_err(path))?;
        }
        w.flush().map_err(io_err(path))
    }

    fn resolve(&self, rel: &Path) -> PathBuf {
        self.path.parent().unwrap_or(Path::new(".")).join(rel)
    }
}

/// Generates a split and writes `<split>.jsonl` plus its WAV files into
/// `out_dir`.
pub fn generate_corpus(
    cfg: &CorpusConfig,
    out_dir: impl AsRef<Path>,
    exec: Execution,
) -> Result<Manifest, CorpusError> {
    let out_dir = out_dir.as_ref();
    let examples = generate_examples(cfg, exec)?;
    let audio_rel = PathBuf::from(cfg.split.name());
    let audio_dir = out_dir.join(&audio_rel);
    fs::create_dir_all(&audio_dir).map_err(io_err(&audio_dir))?;
    let mut records = Vec::with_capacity(examples.len());
    for ex in &examples {
        let mixture = audio_rel.join(format!("{}.mix.wav", ex.example_id));
        signal::write_wav(&ex.mixture, out_dir.join(&mixture))?;
        let mut sources = Vec::with_capacity(ex.sources.len());
        for (s, src) in ex.sources.iter().enumerate() {
            let rel = audio_rel.join(format!("{}.s{}.wav", ex.example_id, s + 1));
            signal::write_wav(src, out_dir.join(&rel))?;
            sources.push(rel);
        }
        records.push(ManifestRecord {
            example_id: ex.example_id.clone(),
            mixture,
            sources,
            snr_db: ex.snr_db,
            seed: ex.seed,
        });
    }
    let manifest = Manifest {
        path: out_dir.join(format!("{}.jsonl", cfg.split.name())),
        header: ManifestHeader {
            generator_version: GENERATOR_VERSION,
            split: cfg.split,
            seed: cfg.seed,
            sample_rate_hz: cfg.sample_rate_hz,
            num_sources: cfg.num_sources,
            duration_s: cfg.duration_s,
            snr_min_db: cfg.snr_min_db,
            snr_max_db: cfg.snr_max_db,
            band_separable: cfg.band_separable,
        },
        records,
    };
    manifest.write()?;
    Ok(manifest)
}

/// Reads every example of a manifest and re-checks that the sources still
/// add up to the mixture.
pub fn load_corpus(manifest_path: impl AsRef<Path>) -> Result<Vec<MixtureExample>, CorpusError> {
    let manifest = Manifest::read(manifest_path)?;
    let read = |id: &str, rel: &Path| {
        let path = manifest.resolve(rel);
        if !path.exists() {
            return Err(CorpusError::MissingFile {
                id: id.to_string(),
                path,
            });
        }
        Ok(signal::read_wav(&path)?)
    };
    manifest
        .records
        .iter()
        .map(|r| {
            let mixture = read(&r.example_id, &r.mixture)?;
            let sources = r
                .sources
                .iter()
                .map(|p| read(&r.example_id, p))
                .collect::<Result<Vec<_>, _>>()?;
            let sum = mix_sum(&sources)?;
            if sum.len() != mixture.len() {
                return Err(SignalError::LengthMismatch(sum.len(), mixture.len()).into());
            }
            let deviation = sum
                .samples()
                .iter()
                .zip(mixture.samples())
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            if deviation > ADDITIVITY_TOLERANCE {
                return Err(CorpusError::Additivity {
                    id: r.example_id.clone(),
                    deviation,
                    limit: ADDITIVITY_TOLERANCE,
                });
            }
            Ok(MixtureExample {
                mixture,
                sources,
                snr_db: r.snr_db,
                example_id: r.example_id.clone(),
                seed: r.seed,
            })
        })
        .collect()
}
