//! The separation network and its frame-in, utterance-out pipeline.
//!
//! ```text
//! mixture ─ pad ─ GConv(1 → C, kernel = frame_len, stride = hop) ─ LN
//!               ─ [GConv(C → C, kernel k) ─ LN] × (gconv_layers − 1)
//!               ─ transpose ─ BiLSTM × bilstm_layers ─ Dense(relu) × dnn_layers
//!               ─ Dense(linear, S·frame_len) ─ split per source ─ overlap-add
//! ```
//!
//! The first gated convolution spans a whole frame and steps by the hop, so
//! it maps each analysis frame to a `C`-dimensional feature vector. Later
//! convolutions mix channels per frame (kernel 1 by default, or an odd
//! kernel across neighbouring frames). The recurrence runs over the frame
//! sequence of the whole utterance.
//!
//! # Checkpoint format
//!
//! All integers little-endian:
//!
//! ```text
//! b"FURCANET"            8 bytes
//! version: u32           currently 1
//! config_len: u32
//! config: JSON           config_len bytes, a serialized ModelConfig
//! count: u64             number of parameter scalars
//! values: f64 × count    in ParamStore order
//! sha256                 32 bytes over everything above
//! ```

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, ParamStore, Tensor, Var};
use crate::corpus::MixtureExample;
use crate::layers::{
    usdr_loss, Activation, BiLstmLayer, DenseLayer, GConvLayer, LayerError, LayerNorm, UsdrLoss,
};
use crate::metrics::MAX_PIT_SOURCES;
use crate::signal::{FrameGeometry, SignalError, Waveform};

const MAGIC: &[u8; 8] = b"FURCANET";
const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error("input of {len} samples is shorter than one frame ({frame_len})")]
    TooShort { len: usize, frame_len: usize },
    #[error("example has {found} sources, model separates {expected}")]
    SourceCount { expected: usize, found: usize },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint is truncated")]
    TruncatedCheckpoint,
    #[error("checkpoint checksum mismatch")]
    Checksum,
    #[error("checkpoint config is unreadable: {0}")]
    ConfigFormat(#[from] serde_json::Error),
    #[error("checkpoint holds {found} parameters, its config needs {expected}")]
    ParamCount { expected: usize, found: usize },
}

impl From<AutodiffError> for ModelError {
    fn from(e: AutodiffError) -> Self {
        ModelError::Layer(e.into())
    }
}

/// Every architecture hyperparameter.
///
/// Defaults are desk-scale. Full-scale values for reference: 1000 GConv
/// channels, 1000 LSTM units per direction, 2000-unit dense layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_sources: usize,
    pub frame_len: usize,
    pub hop: usize,
    pub gconv_layers: usize,
    pub gconv_channels: usize,
    /// Kernel of the first GConv; must equal `frame_len`.
    pub first_kernel_len: usize,
    /// Odd kernel length of the later GConv layers, across frames. 1 keeps
    /// them pointwise.
    pub gconv_kernel_len: usize,
    pub bilstm_layers: usize,
    pub bilstm_hidden: usize,
    pub dnn_layers: usize,
    pub dnn_width: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_sources: 2,
            frame_len: 80,
            hop: 40,
            gconv_layers: 5,
            gconv_channels: 16,
            first_kernel_len: 80,
            gconv_kernel_len: 1,
            bilstm_layers: 2,
            bilstm_hidden: 32,
            dnn_layers: 2,
            dnn_width: 64,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::InvalidConfig(msg));
        if !(2..=MAX_PIT_SOURCES).contains(&self.num_sources) {
            return bad(format!("num_sources must be in 2..={MAX_PIT_SOURCES}"));
        }
        if self.first_kernel_len != self.frame_len {
            return bad(format!(
                "first_kernel_len ({}) must equal frame_len ({})",
                self.first_kernel_len, self.frame_len
            ));
        }
        if self.gconv_kernel_len.is_multiple_of(2) {
            return bad("gconv_kernel_len must be odd".into());
        }
        if self.gconv_layers == 0 {
            return bad("at least one GConv layer is required".into());
        }
        for (name, v) in [
            ("gconv_channels", self.gconv_channels),
            ("bilstm_hidden", self.bilstm_hidden),
            ("dnn_width", self.dnn_width),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        FrameGeometry::new(self.frame_len, self.hop)
            .map_err(|e| ModelError::InvalidConfig(e.to_string()))?;
        Ok(())
    }

    pub fn geometry(&self) -> FrameGeometry {
        FrameGeometry::new(self.frame_len, self.hop).expect("validated config")
    }

    pub fn head_width(&self) -> usize {
        self.num_sources * self.frame_len
    }

    /// Closed-form number of trainable scalars.
    pub fn param_count(&self) -> usize {
        let c = self.gconv_channels;
        let gconv = |cin: usize, k: usize| 2 * c * (cin * k + 1) + 2 * c;
        let mut n = gconv(1, self.first_kernel_len);
        n += (self.gconv_layers - 1) * gconv(c, self.gconv_kernel_len);
        let h = self.bilstm_hidden;
        let mut width = c;
        for _ in 0..self.bilstm_layers {
            n += 2 * 4 * h * (width + h + 1);
            width = 2 * h;
        }
        for _ in 0..self.dnn_layers {
            n += self.dnn_width * (width + 1);
            width = self.dnn_width;
        }
        n + self.head_width() * (width + 1)
    }
}

#[derive(Clone, Debug)]
struct Stage {
    conv: GConvLayer,
    norm: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct FurcaNetModel {
    config: ModelConfig,
    params: ParamStore,
    stages: Vec<Stage>,
    bilstms: Vec<BiLstmLayer>,
    dnns: Vec<DenseLayer>,
    head: DenseLayer,
}

impl FurcaNetModel {
    /// Builds the network with parameters drawn from `config.seed`.
    pub fn build(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let c = config.gconv_channels;
        let mut stages = Vec::with_capacity(config.gconv_layers);
        for i in 0..config.gconv_layers {
            let (cin, k, stride) = if i == 0 {
                (1, config.first_kernel_len, config.hop)
            } else {
                (c, config.gconv_kernel_len, 1)
            };
            let conv = GConvLayer::new(
                &mut params,
                &format!("gconv{i}"),
                cin,
                c,
                k,
                stride,
                &mut rng,
            )?;
            let norm = LayerNorm::new(&mut params, &format!("ln{i}"), c)?;
            stages.push(Stage { conv, norm });
        }
        let mut width = c;
        let mut bilstms = Vec::with_capacity(config.bilstm_layers);
        for i in 0..config.bilstm_layers {
            let layer = BiLstmLayer::new(
                &mut params,
                &format!("bilstm{i}"),
                width,
                config.bilstm_hidden,
                &mut rng,
            )?;
            width = layer.output_size();
            bilstms.push(layer);
        }
        let mut dnns = Vec::with_capacity(config.dnn_layers);
        for i in 0..config.dnn_layers {
            let name = format!("dnn{i}");
            dnns.push(DenseLayer::new(
                &mut params,
                &name,
                width,
                config.dnn_width,
                Activation::Relu,
                &mut rng,
            )?);
            width = config.dnn_width;
        }
        let head = DenseLayer::new(
            &mut params,
            "head",
            width,
            config.head_width(),
            Activation::Linear,
            &mut rng,
        )?;
        Ok(Self {
            config,
            params,
            stages,
            bilstms,
            dnns,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_sources(&self) -> usize {
        self.config.num_sources
    }

    /// Full-utterance outputs, one `[len]` node per source, using this
    /// model's parameters.
    pub fn forward_utterance(
        &self,
        g: &mut Graph,
        mixture: &Waveform,
    ) -> Result<Vec<Var>, ModelError> {
        self.forward_utterance_with(g, &self.params, mixture)
    }

    /// As [`forward_utterance`](Self::forward_utterance) but reading parameter
    /// values from `params`, which must share this model's layout (a clone of
    /// [`params`](Self::params), typically).
    pub fn forward_utterance_with(
        &self,
        g: &mut Graph,
        params: &ParamStore,
        mixture: &Waveform,
    ) -> Result<Vec<Var>, ModelError> {
        let cfg = &self.config;
        let len = mixture.len();
        if len < cfg.frame_len {
            return Err(ModelError::TooShort {
                len,
                frame_len: cfg.frame_len,
            });
        }
        let geometry = cfg.geometry();
        let padded = geometry.padded_len(len);
        let mut samples = mixture.samples().to_vec();
        samples.resize(padded, 0.0);
        let mut x = g.input(Tensor::matrix(1, padded, samples)?);

        let pad = (cfg.gconv_kernel_len - 1) / 2;
        for (i, stage) in self.stages.iter().enumerate() {
            if i > 0 && pad > 0 {
                let zeros = g.input(Tensor::zeros(&[cfg.gconv_channels, pad]));
                x = g.concat(&[zeros, x, zeros], 1)?;
            }
            x = stage.conv.forward(g, params, x)?;
            x = stage.norm.forward(g, params, x)?;
        }
        // [channels × frames] → [frames × channels]
        let mut h = g.transpose(x)?;
        for layer in &self.bilstms {
            h = layer.forward(g, params, h)?;
        }
        for layer in &self.dnns {
            h = layer.forward(g, params, h)?;
        }
        let out = self.head.forward(g, params, h)?;
        (0..cfg.num_sources)
            .map(|s| {
                let frames = g.slice(out, 1, s * cfg.frame_len, cfg.frame_len)?;
                Ok(g.overlap_add(frames, cfg.hop, len)?)
            })
            .collect()
    }

    /// Separated sources as waveforms at the mixture's sample rate.
    pub fn separate(&self, mixture: &Waveform) -> Result<Vec<Waveform>, ModelError> {
        let mut g = Graph::new();
        let outputs = self.forward_utterance(&mut g, mixture)?;
        outputs
            .into_iter()
            .map(|v| {
                Ok(Waveform::new(
                    g.value(v).data().to_vec(),
                    mixture.sample_rate_hz(),
                )?)
            })
            .collect()
    }

    /// Utterance-level SDR loss of this model on `example`.
    pub fn loss_on_example(
        &self,
        g: &mut Graph,
        example: &MixtureExample,
    ) -> Result<UsdrLoss, ModelError> {
        self.loss_on_example_with(g, &self.params, example)
    }

    pub fn loss_on_example_with(
        &self,
        g: &mut Graph,
        params: &ParamStore,
        example: &MixtureExample,
    ) -> Result<UsdrLoss, ModelError> {
        if example.sources.len() != self.config.num_sources {
            return Err(ModelError::SourceCount {
                expected: self.config.num_sources,
                found: example.sources.len(),
            });
        }
        let outputs = self.forward_utterance_with(g, params, &example.mixture)?;
        Ok(usdr_loss(g, &example.sources, &outputs)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let config = serde_json::to_vec(&self.config).expect("config serializes");
        let values = self.params.flat_values();
        let mut out = Vec::with_capacity(24 + config.len() + 8 * values.len() + DIGEST_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(&config);
        out.extend_from_slice(&(values.len() as u64).to_le_bytes());
        for v in &values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        if bytes.len() < MAGIC.len() + 8 + DIGEST_LEN {
            return Err(ModelError::TruncatedCheckpoint);
        }
        if &bytes[..MAGIC.len()] != MAGIC {
            return Err(ModelError::BadMagic);
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(ModelError::Checksum);
        }
        let mut cursor = Cursor {
            bytes: body,
            pos: MAGIC.len(),
        };
        let version = u32::from_le_bytes(cursor.take()?);
        if version != FORMAT_VERSION {
            return Err(ModelError::UnsupportedVersion(version));
        }
        let config_len = u32::from_le_bytes(cursor.take()?) as usize;
        let config: ModelConfig = serde_json::from_slice(cursor.slice(config_len)?)?;
        let count = u64::from_le_bytes(cursor.take()?) as usize;
        let mut model = Self::build(config)?;
        let expected = model.params.num_scalars();
        if count != expected || cursor.remaining() != 8 * count {
            return Err(ModelError::ParamCount {
                expected,
                found: count.min(cursor.remaining() / 8),
            });
        }
        let values: Vec<f64> = cursor
            .slice(8 * count)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        model.params.load_flat_values(&values)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn slice(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(ModelError::TruncatedCheckpoint)?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn take<const N: usize>(&mut self) -> Result<[u8; N], ModelError> {
        Ok(self.slice(N)?.try_into().expect("exact length"))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

#[cfg(test)]
mod tests;
