//! Encoder-decoder reconstructor layout and its text form.
//!
//! Blocks are written `C{k}^{m}` (conv, batch norm, leaky ReLU),
//! `CD{k}^{m}` (the same with a stride-2 convolution) and `CU{k}^{m}` (the
//! same followed by 2x nearest upsampling), with `k` channels and `m x m`
//! filters. The decoder is listed from the full-resolution level down, the
//! way the encoder is, and therefore runs in reverse listing order.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn::{Layer, Sequential};

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockKind {
    Conv,
    ConvDown,
    ConvUp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub kind: BlockKind,
    pub channels: usize,
    pub kernel: usize,
}

impl Block {
    pub const fn new(kind: BlockKind, channels: usize, kernel: usize) -> Self {
        Block {
            kind,
            channels,
            kernel,
        }
    }
}

impl fmt::Display for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = match self.kind {
            BlockKind::Conv => "C",
            BlockKind::ConvDown => "CD",
            BlockKind::ConvUp => "CU",
        };
        write!(f, "{tag}{}^{}", self.channels, self.kernel)
    }
}

impl FromStr for Block {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, rest) = if let Some(r) = s.strip_prefix("CD") {
            (BlockKind::ConvDown, r)
        } else if let Some(r) = s.strip_prefix("CU") {
            (BlockKind::ConvUp, r)
        } else if let Some(r) = s.strip_prefix('C') {
            (BlockKind::Conv, r)
        } else {
            return Err(invalid(format!("unknown block {s:?}")));
        };
        let (k, m) = rest
            .split_once('^')
            .ok_or_else(|| invalid(format!("block {s:?} lacks a kernel size")))?;
        let parse = |t: &str| {
            t.parse::<usize>()
                .map_err(|_| invalid(format!("bad number in block {s:?}")))
        };
        let (channels, kernel) = (parse(k)?, parse(m)?);
        if channels == 0 || kernel == 0 || kernel % 2 == 0 {
            return Err(invalid(format!(
                "block {s:?} needs positive channels and an odd kernel"
            )));
        }
        Ok(Block {
            kind,
            channels,
            kernel,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReconstructorSpec {
    pub encoder: Vec<Block>,
    /// Listed from the full-resolution level down.
    pub decoder: Vec<Block>,
    pub noise_channels: usize,
    pub out_channels: usize,
}

impl Default for ReconstructorSpec {
    fn default() -> Self {
        use BlockKind::*;
        let levels = [(16, 7), (32, 7), (64, 5), (128, 5), (128, 3), (128, 3)];
        ReconstructorSpec {
            encoder: levels
                .iter()
                .flat_map(|&(k, m)| [Block::new(ConvDown, k, m), Block::new(Conv, k, m)])
                .collect(),
            decoder: levels
                .iter()
                .flat_map(|&(k, m)| [Block::new(Conv, k, m), Block::new(ConvUp, k, m)])
                .collect(),
            noise_channels: 32,
            out_channels: 3,
        }
    }
}

fn join(blocks: &[Block]) -> String {
    blocks
        .iter()
        .map(Block::to_string)
        .collect::<Vec<_>>()
        .join("-")
}

impl fmt::Display for ReconstructorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "encoder: {}", join(&self.encoder))?;
        writeln!(f, "decoder: {}", join(&self.decoder))
    }
}

impl ReconstructorSpec {
    /// Parses the two-line `encoder: ...` / `decoder: ...` form. Noise and
    /// output channels take their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut encoder = None;
        let mut decoder = None;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (key, value) = line.split_once(':').ok_or_else(|| {
                invalid(format!("expected `encoder:` or `decoder:`, got {line:?}"))
            })?;
            let blocks = value
                .trim()
                .split('-')
                .map(str::parse)
                .collect::<Result<Vec<Block>>>()?;
            match key.trim() {
                "encoder" => encoder = Some(blocks),
                "decoder" => decoder = Some(blocks),
                other => return Err(invalid(format!("unknown section {other:?}"))),
            }
        }
        let spec = ReconstructorSpec {
            encoder: encoder.ok_or_else(|| invalid("missing encoder line"))?,
            decoder: decoder.ok_or_else(|| invalid("missing decoder line"))?,
            ..Default::default()
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Keeps only the first `levels` resolution levels of both halves.
    pub fn truncated(&self, levels: usize) -> Result<Self> {
        // an encoder level starts at its downsampling block
        let mut downs = 0;
        let encoder = self
            .encoder
            .iter()
            .take_while(|b| {
                downs += (b.kind == BlockKind::ConvDown) as usize;
                downs <= levels
            })
            .copied()
            .collect();
        // a listed decoder level ends at its upsampling block
        let mut decoder = Vec::new();
        let mut ups = 0;
        for b in &self.decoder {
            if ups == levels {
                break;
            }
            decoder.push(*b);
            ups += (b.kind == BlockKind::ConvUp) as usize;
        }
        let spec = ReconstructorSpec {
            encoder,
            decoder,
            ..self.clone()
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn downsamples(&self) -> usize {
        self.encoder
            .iter()
            .filter(|b| b.kind == BlockKind::ConvDown)
            .count()
    }

    pub fn upsamples(&self) -> usize {
        self.decoder
            .iter()
            .filter(|b| b.kind == BlockKind::ConvUp)
            .count()
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder.is_empty() || self.decoder.is_empty() {
            return Err(invalid("reconstructor needs encoder and decoder blocks"));
        }
        if self.encoder.iter().any(|b| b.kind == BlockKind::ConvUp)
            || self.decoder.iter().any(|b| b.kind == BlockKind::ConvDown)
        {
            return Err(invalid(
                "upsampling belongs to the decoder and downsampling to the encoder",
            ));
        }
        if self.downsamples() != self.upsamples() {
            return Err(invalid(format!(
                "encoder halves the resolution {} times but the decoder doubles it {} times",
                self.downsamples(),
                self.upsamples()
            )));
        }
        if self.noise_channels == 0 || self.out_channels == 0 {
            return Err(invalid("noise and output channels must be positive"));
        }
        Ok(())
    }

    /// Layer stack: encoder blocks, decoder blocks in reverse listing
    /// order, then a 1x1 convolution to `out_channels` and a sigmoid.
    pub fn layers(&self) -> Vec<Layer> {
        let mut layers = Vec::new();
        let mut ch = self.noise_channels;
        let decoder = self.decoder.iter().rev();
        for b in self.encoder.iter().chain(decoder) {
            layers.push(Layer::Conv2d {
                in_ch: ch,
                out_ch: b.channels,
                kernel: b.kernel,
                stride: if b.kind == BlockKind::ConvDown { 2 } else { 1 },
            });
            layers.push(Layer::BatchNorm {
                channels: b.channels,
            });
            layers.push(Layer::LeakyRelu { slope: LEAKY_SLOPE });
            if b.kind == BlockKind::ConvUp {
                layers.push(Layer::Upsample2x);
            }
            ch = b.channels;
        }
        layers.push(Layer::Conv2d {
            in_ch: ch,
            out_ch: self.out_channels,
            kernel: 1,
            stride: 1,
        });
        layers.push(Layer::Sigmoid);
        layers
    }
}

/// The reconstruction network `r_theta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reconstructor {
    pub spec: ReconstructorSpec,
    pub net: Sequential,
}

impl Reconstructor {
    /// Input sides must be divisible by `2^downsamples`.
    pub fn check_size(&self, height: usize, width: usize) -> Result<()> {
        let f = 1usize << self.spec.downsamples();
        if height % f != 0 || width % f != 0 || height == 0 || width == 0 {
            return Err(invalid(format!(
                "{height}x{width} is not divisible by {f}, the reconstructor's total downsampling"
            )));
        }
        Ok(())
    }

    pub fn output_shape(&self, height: usize, width: usize) -> Result<(usize, usize, usize)> {
        self.check_size(height, width)?;
        self.net
            .output_shape(self.spec.noise_channels, height, width)
            .ok_or_else(|| invalid("reconstructor does not fit the input size"))
    }
}

/// Builds the network for `spec` and draws its initial parameters from `seed`.
pub fn build_reconstructor(
    spec: &ReconstructorSpec,
    seed: u64,
) -> Result<(Reconstructor, Vec<f64>)> {
    spec.validate()?;
    let net = Sequential::new(spec.layers());
    let params = net.init_params(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok((
        Reconstructor {
            spec: spec.clone(),
            net,
        },
        params,
    ))
}
