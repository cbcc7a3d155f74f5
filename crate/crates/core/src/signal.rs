//! Time-domain substrate: waveforms, PCM-16 WAV I/O, framing with averaging
//! overlap-add, and SNR-controlled mixing.

use std::fs::File;
use std::io::{self, BufReader, BufWriter};
use std::path::{Path, PathBuf};

use thiserror::Error;

pub const DEFAULT_SAMPLE_RATE: u32 = 8000;

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("no such file: {0}")]
    NotFound(PathBuf),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: expected 16-bit integer PCM, found {found}")]
    NotPcm16 { path: PathBuf, found: String },
    #[error("{path}: expected mono audio, found {channels} channels")]
    Channels { path: PathBuf, channels: u16 },
    #[error("{0}: truncated WAV header or data")]
    Truncated(PathBuf),
    #[error("{path}: malformed WAV: {msg}")]
    Malformed { path: PathBuf, msg: String },
    #[error("waveform has no samples")]
    Empty,
    #[error("sample rate must be positive")]
    InvalidSampleRate,
    #[error(
        "invalid frame geometry: frame_len {frame_len}, hop {hop} (need 0 < hop <= frame_len)"
    )]
    InvalidGeometry { frame_len: usize, hop: usize },
    #[error("frame matrix holds {found} frames, {expected} expected for {original_len} samples")]
    FrameCount {
        expected: usize,
        found: usize,
        original_len: usize,
    },
    #[error("length mismatch: {0} vs {1} samples")]
    LengthMismatch(usize, usize),
    #[error("sample rate mismatch: {0} Hz vs {1} Hz")]
    RateMismatch(u32, u32),
    #[error("signal has zero energy")]
    ZeroEnergy,
    #[error("no sources to mix")]
    NoSources,
}

/// Mono audio at a fixed sample rate, amplitudes nominally in [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate_hz: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self, SignalError> {
        if sample_rate_hz == 0 {
            return Err(SignalError::InvalidSampleRate);
        }
        if samples.is_empty() {
            return Err(SignalError::Empty);
        }
        Ok(Self {
            samples,
            sample_rate_hz,
        })
    }

    pub fn zeros(len: usize, sample_rate_hz: u32) -> Result<Self, SignalError> {
        Self::new(vec![0.0; len], sample_rate_hz)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    /// Sum of squared samples.
    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|x| x * x).sum()
    }

    /// Mean squared sample.
    pub fn power(&self) -> f64 {
        self.energy() / self.samples.len() as f64
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn scaled(&self, factor: f64) -> Waveform {
        Waveform {
            samples: self.samples.iter().map(|x| x * factor).collect(),
            sample_rate_hz: self.sample_rate_hz,
        }
    }

    fn check_compatible(&self, other: &Waveform) -> Result<(), SignalError> {
        if self.sample_rate_hz != other.sample_rate_hz {
            return Err(SignalError::RateMismatch(
                self.sample_rate_hz,
                other.sample_rate_hz,
            ));
        }
        if self.len() != other.len() {
            return Err(SignalError::LengthMismatch(self.len(), other.len()));
        }
        Ok(())
    }
}

impl AsRef<[f64]> for Waveform {
    fn as_ref(&self) -> &[f64] {
        &self.samples
    }
}

/// Frame length and hop, both in samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrameGeometry {
    frame_len: usize,
    hop: usize,
}

impl Default for FrameGeometry {
    /// 10 ms frames with a 5 ms shift at 8 kHz.
    fn default() -> Self {
        Self {
            frame_len: 80,
            hop: 40,
        }
    }
}

impl FrameGeometry {
    pub fn new(frame_len: usize, hop: usize) -> Result<Self, SignalError> {
        if hop == 0 || hop > frame_len {
            return Err(SignalError::InvalidGeometry { frame_len, hop });
        }
        Ok(Self { frame_len, hop })
    }

    pub fn frame_len(&self) -> usize {
        self.frame_len
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    /// Frames needed so that the last one reaches the final sample:
    /// `1 + ceil(max(len − frame_len, 0) / hop)`.
    pub fn num_frames(&self, len: usize) -> usize {
        1 + len.saturating_sub(self.frame_len).div_ceil(self.hop)
    }

    /// Length of the zero-padded signal covered by [`Self::num_frames`] frames.
    pub fn padded_len(&self, len: usize) -> usize {
        (self.num_frames(len) - 1) * self.hop + self.frame_len
    }
}

/// Row-major `[num_frames × frame_len]` matrix of rectangular frames.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameMatrix {
    data: Vec<f64>,
    num_frames: usize,
    geometry: FrameGeometry,
    original_len: usize,
    sample_rate_hz: u32,
}

impl FrameMatrix {
    pub fn new(
        data: Vec<f64>,
        geometry: FrameGeometry,
        original_len: usize,
        sample_rate_hz: u32,
    ) -> Result<Self, SignalError> {
        if sample_rate_hz == 0 {
            return Err(SignalError::InvalidSampleRate);
        }
        if original_len == 0 {
            return Err(SignalError::Empty);
        }
        let expected = geometry.num_frames(original_len);
        let found = data.len() / geometry.frame_len;
        if !data.len().is_multiple_of(geometry.frame_len) || found != expected {
            return Err(SignalError::FrameCount {
                expected,
                found,
                original_len,
            });
        }
        Ok(Self {
            data,
            num_frames: expected,
            geometry,
            original_len,
            sample_rate_hz,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn geometry(&self) -> FrameGeometry {
        self.geometry
    }

    pub fn original_len(&self) -> usize {
        self.original_len
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        let fl = self.geometry.frame_len;
        &self.data[i * fl..(i + 1) * fl]
    }

    pub fn frames(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.geometry.frame_len)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }
}

/// Rectangular framing with tail zero-padding.
pub fn frame(w: &Waveform, g: FrameGeometry) -> FrameMatrix {
    let n = g.num_frames(w.len());
    let mut data = vec![0.0; n * g.frame_len];
    for (i, dst) in data.chunks_exact_mut(g.frame_len).enumerate() {
        let start = i * g.hop;
        let end = (start + g.frame_len).min(w.len());
        dst[..end - start].copy_from_slice(&w.samples[start..end]);
    }
    FrameMatrix {
        data,
        num_frames: n,
        geometry: g,
        original_len: w.len(),
        sample_rate_hz: w.sample_rate_hz,
    }
}

/// Each output sample is the mean of every frame sample covering it.
pub fn overlap_add(f: &FrameMatrix) -> Waveform {
    let g = f.geometry;
    let covered = g.padded_len(f.original_len);
    // Running mean, so that identical overlapping copies reproduce the
    // original sample bit for bit.
    let mut mean = vec![0.0; covered];
    let mut count = vec![0u32; covered];
    for (i, fr) in f.frames().enumerate() {
        let off = i * g.hop;
        for (j, v) in fr.iter().enumerate() {
            let k = off + j;
            count[k] += 1;
            mean[k] += (v - mean[k]) / f64::from(count[k]);
        }
    }
    mean.truncate(f.original_len);
    Waveform {
        samples: mean,
        sample_rate_hz: f.sample_rate_hz,
    }
}

/// Scales `s2` so that `s1` sits `snr_db` above it, returning the mixture and
/// the scaled `s2`. Powers are mean squared samples.
pub fn mix_at_snr(
    s1: &Waveform,
    s2: &Waveform,
    snr_db: f64,
) -> Result<(Waveform, Waveform), SignalError> {
    s1.check_compatible(s2)?;
    let (p1, p2) = (s1.power(), s2.power());
    if p1 == 0.0 || p2 == 0.0 {
        return Err(SignalError::ZeroEnergy);
    }
    let alpha = (p1 / (p2 * 10f64.powf(snr_db / 10.0))).sqrt();
    let scaled = s2.scaled(alpha);
    let mixture = mix_sum(&[s1.clone(), scaled.clone()])?;
    Ok((mixture, scaled))
}

/// Elementwise sum of equally long sources.
pub fn mix_sum(sources: &[Waveform]) -> Result<Waveform, SignalError> {
    let first = sources.first().ok_or(SignalError::NoSources)?;
    let mut out = vec![0.0; first.len()];
    for s in sources {
        first.check_compatible(s)?;
        out.iter_mut().zip(&s.samples).for_each(|(o, x)| *o += x);
    }
    Ok(Waveform {
        samples: out,
        sample_rate_hz: first.sample_rate_hz,
    })
}

/// Measured SNR in dB of `reference` over `interferer`.
pub fn snr_db(reference: &Waveform, interferer: &Waveform) -> f64 {
    10.0 * (reference.power() / interferer.power()).log10()
}

/// Reads a mono PCM-16 little-endian WAV file, scaling samples by 1/32768.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform, SignalError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => SignalError::NotFound(path.to_path_buf()),
        _ => SignalError::Io {
            path: path.to_path_buf(),
            source: e,
        },
    })?;
    let map_err = |e: hound::Error| match e {
        hound::Error::IoError(e) if is_short_read(&e) => SignalError::Truncated(path.to_path_buf()),
        hound::Error::IoError(e) => SignalError::Io {
            path: path.to_path_buf(),
            source: e,
        },
        hound::Error::Unsupported => SignalError::NotPcm16 {
            path: path.to_path_buf(),
            found: "unsupported encoding".into(),
        },
        other => SignalError::Malformed {
            path: path.to_path_buf(),
            msg: other.to_string(),
        },
    };
    let reader = hound::WavReader::new(BufReader::new(file)).map_err(map_err)?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(SignalError::NotPcm16 {
            path: path.to_path_buf(),
            found: format!("{:?} {}-bit", spec.sample_format, spec.bits_per_sample),
        });
    }
    if spec.channels != 1 {
        return Err(SignalError::Channels {
            path: path.to_path_buf(),
            channels: spec.channels,
        });
    }
    let declared = reader.len() as usize;
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| f64::from(v) / 32768.0))
        .collect::<Result<Vec<_>, _>>()
        .map_err(map_err)?;
    if samples.len() != declared {
        return Err(SignalError::Truncated(path.to_path_buf()));
    }
    Waveform::new(samples, spec.sample_rate)
}

// hound reports running out of input either as `UnexpectedEof` or as a
// custom error carrying this message.
fn is_short_read(e: &io::Error) -> bool {
    e.kind() == io::ErrorKind::UnexpectedEof || e.to_string().contains("enough bytes")
}

/// Quantizes to PCM-16 and writes a mono WAV file. Samples outside [-1, 1]
/// are clamped; the number of such samples is returned.
pub fn write_wav(w: &Waveform, path: impl AsRef<Path>) -> Result<usize, SignalError> {
    let path = path.as_ref();
    let io_err = |e: hound::Error| match e {
        hound::Error::IoError(source) => SignalError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => SignalError::Malformed {
            path: path.to_path_buf(),
            msg: other.to_string(),
        },
    };
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate_hz,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let file = File::create(path).map_err(|source| SignalError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut writer = hound::WavWriter::new(BufWriter::new(file), spec).map_err(io_err)?;
    let mut clipped = 0;
    for &x in &w.samples {
        if !(-1.0..=1.0).contains(&x) {
            clipped += 1;
        }
        writer.write_sample(quantize(x)).map_err(io_err)?;
    }
    writer.finalize().map_err(io_err)?;
    if clipped > 0 {
        log::warn!(
            "{}: clamped {clipped} samples outside [-1, 1]",
            path.display()
        );
    }
    Ok(clipped)
}

/// Nearest PCM-16 code for `x`, saturating at the format limits.
pub fn quantize(x: f64) -> i16 {
    (x * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn wave(samples: Vec<f64>) -> Waveform {
        Waveform::new(samples, DEFAULT_SAMPLE_RATE).unwrap()
    }

    /// Independent framer: walk start offsets until one frame reaches the end.
    fn brute_force_starts(len: usize, frame_len: usize, hop: usize) -> Vec<usize> {
        let mut starts = vec![0];
        while starts.last().unwrap() + frame_len < len {
            starts.push(starts.last().unwrap() + hop);
        }
        starts
    }

    #[test]
    fn frames_200_samples_into_four() {
        let w = wave((0..200).map(|i| i as f64).collect());
        let f = frame(&w, FrameGeometry::default());
        assert_eq!(f.num_frames(), 4);
        assert_eq!(f.frame(3)[0], 120.0);
        assert_eq!(f.frame(3)[79], 199.0);
    }

    #[test]
    fn single_frame_is_identity() {
        let w = wave((0..80).map(|i| (i as f64).sin()).collect());
        let f = frame(&w, FrameGeometry::default());
        assert_eq!(f.num_frames(), 1);
        assert_eq!(f.frame(0), w.samples());
    }

    #[test]
    fn tail_frame_is_zero_padded() {
        let w = wave(vec![1.0; 81]);
        let f = frame(&w, FrameGeometry::default());
        assert_eq!(f.num_frames(), 2);
        let tail = f.frame(1);
        assert!(tail[..41].iter().all(|&x| x == 1.0));
        assert_eq!(tail[41..].len(), 39);
        assert!(tail[41..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn hand_averaged_overlap() {
        let g = FrameGeometry::new(2, 1).unwrap();
        let f = FrameMatrix::new(vec![1.0, 1.0, 3.0, 3.0], g, 3, 8000).unwrap();
        assert_eq!(overlap_add(&f).samples(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn single_frame_overlap_add_truncates() {
        let g = FrameGeometry::new(4, 2).unwrap();
        let f = FrameMatrix::new(vec![1.0, 2.0, 3.0, 4.0], g, 3, 8000).unwrap();
        assert_eq!(overlap_add(&f).samples(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn geometry_rejects_bad_hop() {
        assert!(FrameGeometry::new(80, 0).is_err());
        assert!(FrameGeometry::new(80, 81).is_err());
        assert!(FrameGeometry::new(80, 80).is_ok());
    }

    #[test]
    fn equal_power_zero_db_leaves_source_unscaled() {
        let s1 = wave(vec![1.0, -1.0, 1.0, -1.0]);
        let s2 = wave(vec![-1.0, 1.0, 1.0, -1.0]);
        let (_, scaled) = mix_at_snr(&s1, &s2, 0.0).unwrap();
        assert_eq!(scaled, s2);
    }

    #[test]
    fn four_times_power_halves_the_interferer() {
        let s1 = wave(vec![1.0, -1.0, 1.0, -1.0]);
        let s2 = wave(vec![2.0, 2.0, -2.0, -2.0]);
        let (mix, scaled) = mix_at_snr(&s1, &s2, 0.0).unwrap();
        assert_eq!(scaled.samples(), &[1.0, 1.0, -1.0, -1.0]);
        assert_eq!(mix.samples(), &[2.0, 0.0, 0.0, -2.0]);
    }

    #[test]
    fn zero_energy_is_rejected() {
        let s1 = wave(vec![1.0, 0.5]);
        let z = wave(vec![0.0, 0.0]);
        assert!(matches!(
            mix_at_snr(&s1, &z, 3.0),
            Err(SignalError::ZeroEnergy)
        ));
        assert!(matches!(
            mix_at_snr(&z, &s1, 3.0),
            Err(SignalError::ZeroEnergy)
        ));
    }

    #[test]
    fn mix_sum_identities() {
        let x = wave(vec![0.1, -0.2, 0.3]);
        assert_eq!(mix_sum(&[x.clone(), wave(vec![0.0; 3])]).unwrap(), x);
        let neg = x.scaled(-1.0);
        assert!(mix_sum(&[x.clone(), neg])
            .unwrap()
            .samples()
            .iter()
            .all(|&v| v == 0.0));
        let imp = |i: usize| {
            let mut v = vec![0.0; 5];
            v[i] = 1.0;
            wave(v)
        };
        let m = mix_sum(&[imp(0), imp(2), imp(4)]).unwrap();
        assert_eq!(m.samples(), &[1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!(matches!(
            mix_sum(&[x, wave(vec![0.0; 2])]),
            Err(SignalError::LengthMismatch(3, 2))
        ));
    }

    #[test]
    fn reads_known_pcm_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("known.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 8000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        for v in [0i16, 16384, -32768] {
            w.write_sample(v).unwrap();
        }
        w.finalize().unwrap();
        let wav = read_wav(&path).unwrap();
        assert_eq!(wav.samples(), &[0.0, 0.5, -1.0]);
        assert_eq!(wav.sample_rate_hz(), 8000);
    }

    #[test]
    fn rejects_stereo_missing_and_truncated_files() {
        let dir = tempfile::tempdir().unwrap();
        let stereo = dir.path().join("stereo.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 8000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&stereo, spec).unwrap();
        for _ in 0..4 {
            w.write_sample(0i16).unwrap();
        }
        w.finalize().unwrap();
        assert!(matches!(
            read_wav(&stereo),
            Err(SignalError::Channels { channels: 2, .. })
        ));

        assert!(matches!(
            read_wav(dir.path().join("absent.wav")),
            Err(SignalError::NotFound(_))
        ));

        let mono = dir.path().join("mono.wav");
        write_wav(&wave(vec![0.25; 16]), &mono).unwrap();
        let bytes = std::fs::read(&mono).unwrap();
        let cut = dir.path().join("cut.wav");
        std::fs::write(&cut, &bytes[..20]).unwrap();
        let r = read_wav(&cut);
        assert!(matches!(r, Err(SignalError::Truncated(_))), "{r:?}");

        let float = dir.path().join("float.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 8000,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut w = hound::WavWriter::create(&float, spec).unwrap();
        w.write_sample(0.5f32).unwrap();
        w.finalize().unwrap();
        assert!(matches!(
            read_wav(&float),
            Err(SignalError::NotPcm16 { .. })
        ));
    }

    #[test]
    fn single_sample_file_and_clipping() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("one.wav");
        assert_eq!(write_wav(&wave(vec![0.0]), &p).unwrap(), 0);
        let r = read_wav(&p).unwrap();
        assert_eq!((r.len(), r.sample_rate_hz()), (1, 8000));

        let p = dir.path().join("clip.wav");
        assert_eq!(write_wav(&wave(vec![1.5, 0.0]), &p).unwrap(), 1);
        let raw: Vec<i16> = hound::WavReader::open(&p)
            .unwrap()
            .into_samples::<i16>()
            .map(Result::unwrap)
            .collect();
        assert_eq!(raw, vec![32767, 0]);
    }

    #[test]
    fn unwritable_path_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("missing-dir").join("x.wav");
        assert!(matches!(
            write_wav(&wave(vec![0.0]), p),
            Err(SignalError::Io { .. })
        ));
    }

    proptest! {
        #[test]
        fn overlap_add_inverts_framing(
            samples in prop::collection::vec(-1.0f64..1.0, 1..400),
            frame_len in 1usize..64,
            hop_frac in 0.0f64..1.0,
        ) {
            let hop = 1 + ((frame_len - 1) as f64 * hop_frac) as usize;
            let g = FrameGeometry::new(frame_len, hop).unwrap();
            let w = wave(samples);
            prop_assert_eq!(overlap_add(&frame(&w, g)), w);
        }

        #[test]
        fn frame_count_matches_brute_force(
            len in 1usize..2000, frame_len in 1usize..200, hop_frac in 0.0f64..1.0,
        ) {
            let hop = 1 + ((frame_len - 1) as f64 * hop_frac) as usize;
            let g = FrameGeometry::new(frame_len, hop).unwrap();
            prop_assert_eq!(g.num_frames(len), brute_force_starts(len, frame_len, hop).len());
        }

        #[test]
        fn mixing_hits_requested_snr(
            a in prop::collection::vec(-1.0f64..1.0, 32),
            b in prop::collection::vec(-1.0f64..1.0, 32),
            snr in -10.0f64..20.0,
        ) {
            let (s1, s2) = (wave(a), wave(b));
            prop_assume!(s1.power() > 1e-6 && s2.power() > 1e-6);
            let (mix, scaled) = mix_at_snr(&s1, &s2, snr).unwrap();
            prop_assert!((snr_db(&s1, &scaled) - snr).abs() < 1e-9);
            let resum = mix_sum(&[s1, scaled]).unwrap();
            prop_assert_eq!(resum, mix);
        }

        #[test]
        fn wav_round_trip_within_quantization(
            samples in prop::collection::vec(-1.0f64..1.0, 1..200),
        ) {
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("rt.wav");
            let w = wave(samples);
            write_wav(&w, &p).unwrap();
            let r = read_wav(&p).unwrap();
            for (a, b) in w.samples().iter().zip(r.samples()) {
                prop_assert!((a - b).abs() <= 1.0 / 32768.0);
            }
        }

        #[test]
        fn grid_samples_round_trip_exactly(
            codes in prop::collection::vec(any::<i16>(), 1..200),
        ) {
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("grid.wav");
            let w = wave(codes.iter().map(|&c| f64::from(c) / 32768.0).collect());
            write_wav(&w, &p).unwrap();
            prop_assert_eq!(read_wav(&p).unwrap(), w);
        }
    }
}
