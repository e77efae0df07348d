//! MLP encoders mapping one modality's raw view to a unit-norm embedding.
//!
//! The stack is `hidden_dims` trunk layers followed by `head_dims` projection
//! layers. Every layer but the last is followed by a rectifier; the output
//! is L2-normalized.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::format::{Reader, Writer};
use crate::numerics::{Matrix, Tape, Var, NORM_EPS};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub head_dims: Vec<usize>,
    pub activation: Activation,
}

impl EncoderConfig {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, head_dims: Vec<usize>) -> Self {
        Self {
            input_dim,
            hidden_dims,
            head_dims,
            activation: Activation::Relu,
        }
    }

    /// Trunk `[512, 512]`, head `[512, 512, 128]`.
    pub fn with_default_dims(input_dim: usize) -> Self {
        Self::new(input_dim, vec![512, 512], vec![512, 512, 128])
    }

    pub fn embed_dim(&self) -> usize {
        self.head_dims.last().copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_dims.is_empty() {
            return Err(Error::config("head_dims must not be empty"));
        }
        if self.input_dim == 0 || self.hidden_dims.iter().chain(&self.head_dims).any(|&d| d == 0) {
            return Err(Error::config("encoder dims must be positive"));
        }
        if self.embed_dim() < 2 {
            return Err(Error::config("embed_dim must be >= 2"));
        }
        Ok(())
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::new();
        let mut fan_in = self.input_dim;
        for &d in self.hidden_dims.iter().chain(&self.head_dims) {
            dims.push((fan_in, d));
            fan_in = d;
        }
        dims
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `fan_in × fan_out`
    pub weight: Matrix,
    /// `1 × fan_out`
    pub bias: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub layers: Vec<Layer>,
}

/// Output of a traced forward pass.
pub struct EmbeddingBatch {
    pub embeddings: Var,
    /// Weight and bias leaves, in [`Encoder::params_mut`] order.
    pub params: Vec<Var>,
}

impl Encoder {
    /// Glorot-uniform weights, zero biases.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = config
            .layer_dims()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Layer {
                    weight: Matrix::from_fn(fan_in, fan_out, |_, _| rng.random_range(-limit..limit)),
                    bias: Matrix::zeros(1, fan_out),
                }
            })
            .collect();
        Ok(Self { config, layers })
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim()
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.config.input_dim {
            return Err(Error::Dimension {
                op: "encoder forward",
                lhs: x.shape(),
                rhs: (x.rows(), self.config.input_dim),
            });
        }
        Ok(())
    }

    fn run(&self, x: &Matrix, stop_after: usize) -> Result<Matrix> {
        self.check_input(x)?;
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (k, layer) in self.layers.iter().enumerate().take(stop_after) {
            h = h.matmul(&layer.weight)?;
            for r in 0..h.rows() {
                for (o, b) in h.row_mut(r).iter_mut().zip(layer.bias.data()) {
                    *o += b;
                }
            }
            if k != last {
                h = h.map(|v| v.max(0.0));
            }
        }
        Ok(h)
    }

    /// Unit-norm embeddings without recording a tape.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.run(x, self.layers.len())?.l2_normalize_rows(NORM_EPS))
    }

    /// Activations after the last trunk layer (the input itself when the
    /// trunk is empty).
    pub fn trunk_features(&self, x: &Matrix) -> Result<Matrix> {
        self.run(x, self.config.hidden_dims.len())
    }

    /// Records the forward pass on `tape`, with parameters as fresh leaves.
    pub fn forward_traced(&self, tape: &mut Tape<'_>, x: Var) -> Result<EmbeddingBatch> {
        self.check_input(tape.value(x))?;
        let last = self.layers.len() - 1;
        let mut params = Vec::with_capacity(self.layers.len() * 2);
        let mut h = x;
        for (k, layer) in self.layers.iter().enumerate() {
            let w = tape.input(layer.weight.clone());
            let b = tape.input(layer.bias.clone());
            params.push(w);
            params.push(b);
            h = tape.matmul(h, w)?;
            h = tape.add_row(h, b)?;
            if k != last {
                h = tape.relu(h);
            }
        }
        let embeddings = tape.l2_normalize_rows(h, NORM_EPS);
        Ok(EmbeddingBatch { embeddings, params })
    }

    pub fn param_shapes(&self) -> Vec<(usize, usize)> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.shape(), l.bias.shape()])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn params(&self) -> Vec<&Matrix> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub(crate) fn write(&self, w: &mut Writer) {
        let c = &self.config;
        w.u8(match c.activation {
            Activation::Relu => 0,
        });
        w.u32(c.input_dim as u32);
        w.u32(c.hidden_dims.len() as u32);
        c.hidden_dims.iter().for_each(|&d| w.u32(d as u32));
        w.u32(c.head_dims.len() as u32);
        c.head_dims.iter().for_each(|&d| w.u32(d as u32));
        for layer in &self.layers {
            w.matrix(&layer.weight);
            w.matrix(&layer.bias);
        }
    }

    pub(crate) fn read(r: &mut Reader<'_>) -> Result<Self> {
        let at = r.offset();
        let activation = match r.u8()? {
            0 => Activation::Relu,
            t => return Err(r.err(format!("unknown activation tag {t}")).into()),
        };
        let input_dim = r.u32()? as usize;
        let n_hidden = r.len_u32(4)?;
        let hidden_dims = (0..n_hidden).map(|_| r.u32().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
        let n_head = r.len_u32(4)?;
        let head_dims = (0..n_head).map(|_| r.u32().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
        let config = EncoderConfig {
            input_dim,
            hidden_dims,
            head_dims,
            activation,
        };
        config
            .validate()
            .map_err(|e| crate::error::FormatError::new(at, e.to_string()))?;
        let mut layers = Vec::new();
        for (fan_in, fan_out) in config.layer_dims() {
            let at = r.offset();
            let weight = r.matrix()?;
            let bias = r.matrix()?;
            if weight.shape() != (fan_in, fan_out) || bias.shape() != (1, fan_out) {
                return Err(crate::error::FormatError::new(
                    at,
                    format!("layer shape {:?}/{:?} does not match config", weight.shape(), bias.shape()),
                )
                .into());
            }
            layers.push(Layer { weight, bias });
        }
        Ok(Self { config, layers })
    }
}

const MAGIC: &[u8; 4] = b"XMCK";
const VERSION: u32 = 1;

pub(crate) const CHECKPOINT_MAGIC: &[u8; 4] = MAGIC;
pub(crate) const CHECKPOINT_VERSION: u32 = VERSION;

/// Encoder-pair checkpoint: video encoder, audio encoder, then a flag byte
/// that is 1 when a full training state follows (see `trainer`).
pub fn encoders_to_bytes(video: &Encoder, audio: &Encoder) -> Vec<u8> {
    let mut w = Writer::header(MAGIC, VERSION);
    write_encoder_pair(&mut w, video, audio);
    w.u8(0);
    w.into_inner()
}

/// Reads the encoders from any checkpoint, including full training states.
pub fn encoders_from_bytes(bytes: &[u8]) -> Result<(Encoder, Encoder)> {
    let mut r = Reader::with_header(bytes, MAGIC, VERSION)?;
    let pair = read_encoder_pair(&mut r)?;
    match r.u8()? {
        0 => r.finish()?,
        1 => {}
        t => return Err(r.err(format!("unknown checkpoint section flag {t}")).into()),
    }
    Ok(pair)
}

pub(crate) fn write_encoder_pair(w: &mut Writer, video: &Encoder, audio: &Encoder) {
    w.u32(2);
    video.write(w);
    audio.write(w);
}

pub(crate) fn read_encoder_pair(r: &mut Reader<'_>) -> Result<(Encoder, Encoder)> {
    let at = r.offset();
    let count = r.u32()?;
    if count != 2 {
        return Err(crate::error::FormatError::new(at, format!("expected 2 encoders, found {count}")).into());
    }
    let video = Encoder::read(r)?;
    let audio = Encoder::read(r)?;
    Ok((video, audio))
}
