//! Frame feature extraction: a small convolution stack for 5-channel frames
//! (RGB plus horizontal/vertical flow), or a passthrough for precomputed
//! feature vectors.

use std::io::{Read, Write};

use crate::binio;
use crate::error::{dim_err, domain_err, format_err, Error, Result};
use crate::tensorcore::{Graph, NodeId, RngStream, Tensor};

pub const FRAME_CHANNELS: usize = 5;
pub const FLOW_X: usize = 3;
pub const FLOW_Y: usize = 4;

const ENCODER_MAGIC: &[u8; 4] = b"SQEN";
const ENCODER_VERSION: u32 = 1;

/// A 5-channel frame stored height-major, channel-interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct RawFrame {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl RawFrame {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != FRAME_CHANNELS {
            return format_err(format!(
                "frame has {channels} channels, the encoder needs {FRAME_CHANNELS}"
            ));
        }
        if height == 0 || width == 0 || data.len() != height * width * channels {
            return dim_err(format!(
                "frame {height}x{width}x{channels} does not match {} values",
                data.len()
            ));
        }
        for (i, v) in data.iter().enumerate() {
            let c = i % FRAME_CHANNELS;
            let ok = if c < 3 {
                (0.0..=1.0).contains(v)
            } else {
                (-1.0..=1.0).contains(v)
            };
            if !ok {
                return domain_err(format!("channel {c} value {v} out of range at index {i}"));
            }
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * FRAME_CHANNELS + c]
    }

    /// Planar `[C, H, W]` copy for the convolution stack.
    pub fn to_chw(&self) -> Tensor {
        let (h, w) = (self.height, self.width);
        let mut out = vec![0.0; FRAME_CHANNELS * h * w];
        for y in 0..h {
            for x in 0..w {
                for c in 0..FRAME_CHANNELS {
                    out[(c * h + y) * w + x] = self.data[(y * w + x) * FRAME_CHANNELS + c];
                }
            }
        }
        Tensor::from_parts(vec![FRAME_CHANNELS, h, w], out)
    }
}

/// One frame as seen by an encoder.
#[derive(Clone, Debug, PartialEq)]
pub enum Frame {
    Feature(Vec<f64>),
    Image(RawFrame),
}

impl Frame {
    pub fn as_feature(&self) -> Option<&[f64]> {
        match self {
            Frame::Feature(v) => Some(v),
            Frame::Image(_) => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConvEncoderConfig {
    pub height: usize,
    pub width: usize,
    pub channels1: usize,
    pub channels2: usize,
    pub kernel: usize,
    pub feature_dim: usize,
}

impl Default for ConvEncoderConfig {
    fn default() -> Self {
        Self {
            height: 48,
            width: 64,
            channels1: 8,
            channels2: 8,
            kernel: 3,
            feature_dim: 128,
        }
    }
}

impl ConvEncoderConfig {
    /// Spatial size after the two conv + pool blocks.
    fn pooled_size(&self) -> Result<(usize, usize)> {
        let k = self.kernel;
        let step = |s: usize| -> Option<usize> {
            let c = s.checked_sub(k - 1)?;
            (c >= 2).then_some(c / 2)
        };
        match (step(self.height).and_then(step), step(self.width).and_then(step)) {
            (Some(h), Some(w)) if h > 0 && w > 0 => Ok((h, w)),
            _ => Err(Error::Config(format!(
                "input {}x{} too small for two {}x{} conv/pool blocks",
                self.height, self.width, k, k
            ))),
        }
    }

    pub fn flat_dim(&self) -> Result<usize> {
        let (h, w) = self.pooled_size()?;
        Ok(self.channels2 * h * w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.channels1 == 0 || self.channels2 == 0 || self.feature_dim == 0 {
            return Err(Error::Config("encoder sizes must be positive".into()));
        }
        self.flat_dim().map(|_| ())
    }
}

/// Parameters of the conv stack: two conv+tanh+maxpool blocks and a final
/// affine layer to the feature dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvEncoder {
    config: ConvEncoderConfig,
    blocks: Vec<Tensor>,
}

impl ConvEncoder {
    fn shapes(config: &ConvEncoderConfig) -> Result<Vec<Vec<usize>>> {
        let (k, c1, c2) = (config.kernel, config.channels1, config.channels2);
        Ok(vec![
            vec![c1, FRAME_CHANNELS, k, k],
            vec![c1],
            vec![c2, c1, k, k],
            vec![c2],
            vec![config.feature_dim, config.flat_dim()?],
            vec![config.feature_dim],
        ])
    }

    fn fan_in(weight: &[usize]) -> usize {
        weight[1..].iter().product()
    }

    pub fn init(config: ConvEncoderConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let shapes = Self::shapes(&config)?;
        let blocks = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                // biases share the fan-in of the weight block before them
                let weight = &shapes[i - i % 2];
                let bound = 1.0 / (Self::fan_in(weight) as f64).sqrt();
                Tensor::uniform(s, bound, rng)
            })
            .collect();
        Ok(Self { config, blocks })
    }

    pub fn zeros(config: ConvEncoderConfig) -> Result<Self> {
        config.validate()?;
        let blocks = Self::shapes(&config)?.iter().map(|s| Tensor::zeros(s)).collect();
        Ok(Self { config, blocks })
    }

    pub fn config(&self) -> &ConvEncoderConfig {
        &self.config
    }

    pub fn blocks(&self) -> &[Tensor] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [Tensor] {
        &mut self.blocks
    }

    pub fn leaves(&self, g: &mut Graph) -> Vec<NodeId> {
        self.blocks.iter().map(|b| g.leaf(b.clone())).collect()
    }

    /// Builds the stack on the tape for a `[5, H, W]` input node.
    pub fn encode_graph(&self, g: &mut Graph, leaves: &[NodeId], input: NodeId) -> Result<NodeId> {
        let s = g.value(input).shape();
        if s != [FRAME_CHANNELS, self.config.height, self.config.width] {
            return dim_err(format!(
                "encoder expects [5, {}, {}] input, got {:?}",
                self.config.height, self.config.width, s
            ));
        }
        let c = g.conv2d(input, leaves[0], leaves[1])?;
        let c = g.tanh(c);
        let c = g.max_pool2(c)?;
        let c = g.conv2d(c, leaves[2], leaves[3])?;
        let c = g.tanh(c);
        let c = g.max_pool2(c)?;
        let n = g.value(c).len();
        let flat = g.reshape(c, &[n])?;
        g.affine(flat, leaves[4], Some(leaves[5]))
    }
}

/// Frame feature extractor.
#[derive(Clone, Debug, PartialEq)]
pub enum Encoder {
    /// Features are supplied directly and wrapped unchanged.
    Passthrough { dim: usize },
    Conv(ConvEncoder),
}

impl Encoder {
    pub fn feature_dim(&self) -> usize {
        match self {
            Encoder::Passthrough { dim } => *dim,
            Encoder::Conv(c) => c.config.feature_dim,
        }
    }

    pub fn params(&self) -> &[Tensor] {
        match self {
            Encoder::Passthrough { .. } => &[],
            Encoder::Conv(c) => &c.blocks,
        }
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        match self {
            Encoder::Passthrough { .. } => &mut [],
            Encoder::Conv(c) => &mut c.blocks,
        }
    }

    pub fn leaves(&self, g: &mut Graph) -> Vec<NodeId> {
        self.params().iter().map(|p| g.leaf(p.clone())).collect()
    }

    /// Puts one frame through the encoder on the tape.
    pub fn encode_graph(&self, g: &mut Graph, leaves: &[NodeId], frame: &Frame) -> Result<NodeId> {
        match (self, frame) {
            (Encoder::Passthrough { dim }, Frame::Feature(v)) => {
                let f = encode_passthrough(v, *dim)?;
                Ok(g.leaf(Tensor::from_parts(vec![f.len()], f)))
            }
            (Encoder::Conv(c), Frame::Image(img)) => {
                let x = g.leaf(img.to_chw());
                c.encode_graph(g, leaves, x)
            }
            (Encoder::Passthrough { .. }, Frame::Image(_)) => {
                format_err("passthrough encoder was given an image frame")
            }
            (Encoder::Conv(_), Frame::Feature(_)) => {
                format_err("convolutional encoder was given a feature vector")
            }
        }
    }

    /// Inference-path encoding of a single frame.
    pub fn encode(&self, frame: &Frame) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let leaves = self.leaves(&mut g);
        let out = self.encode_graph(&mut g, &leaves, frame)?;
        Ok(g.value(out).data().to_vec())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        binio::write_magic(w, ENCODER_MAGIC, ENCODER_VERSION)?;
        match self {
            Encoder::Passthrough { dim } => {
                binio::write_u32(w, 0)?;
                binio::write_u32(w, binio::to_u32(*dim, "dim")?)?;
            }
            Encoder::Conv(c) => {
                binio::write_u32(w, 1)?;
                let cfg = c.config;
                for v in [
                    cfg.height,
                    cfg.width,
                    cfg.channels1,
                    cfg.channels2,
                    cfg.kernel,
                    cfg.feature_dim,
                ] {
                    binio::write_u32(w, binio::to_u32(v, "encoder size")?)?;
                }
                for b in &c.blocks {
                    binio::write_f64s(w, b.data())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        binio::read_magic(r, ENCODER_MAGIC, ENCODER_VERSION)?;
        match binio::read_u32(r)? {
            0 => {
                let dim = binio::read_u32(r)? as usize;
                if dim == 0 {
                    return format_err("zero passthrough dimension");
                }
                Ok(Encoder::Passthrough { dim })
            }
            1 => {
                let mut v = [0usize; 6];
                for x in &mut v {
                    *x = binio::read_u32(r)? as usize;
                }
                let config = ConvEncoderConfig {
                    height: v[0],
                    width: v[1],
                    channels1: v[2],
                    channels2: v[3],
                    kernel: v[4],
                    feature_dim: v[5],
                };
                config
                    .validate()
                    .map_err(|e| Error::Format(format!("bad encoder config: {e}")))?;
                let blocks = ConvEncoder::shapes(&config)?
                    .into_iter()
                    .map(|s| {
                        let data = binio::read_f64s(r, s.iter().product())?;
                        binio::check_finite(&data, "encoder block")?;
                        Tensor::new(s, data)
                    })
                    .collect::<Result<_>>()?;
                Ok(Encoder::Conv(ConvEncoder { config, blocks }))
            }
            k => format_err(format!("unknown encoder kind {k}")),
        }
    }
}

/// Wraps a precomputed feature vector after checking its width.
pub fn encode_passthrough(feature: &[f64], dim: usize) -> Result<Vec<f64>> {
    if feature.len() != dim {
        return dim_err(format!(
            "feature of dimension {} where {} is configured",
            feature.len(),
            dim
        ));
    }
    Ok(feature.to_vec())
}

/// Inference-path convolutional encoding.
pub fn encode_frame(frame: &RawFrame, encoder: &ConvEncoder) -> Result<Vec<f64>> {
    Encoder::Conv(encoder.clone()).encode(&Frame::Image(frame.clone()))
}

/// One draw of crop position and mirroring, reusable across frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentDraw {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    pub mirror: bool,
}

impl AugmentDraw {
    pub fn sample(
        frame_h: usize,
        frame_w: usize,
        crop: (usize, usize),
        mirror_prob: f64,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let (ch, cw) = crop;
        if ch == 0 || cw == 0 || ch > frame_h || cw > frame_w {
            return domain_err(format!(
                "crop {ch}x{cw} does not fit frame {frame_h}x{frame_w}"
            ));
        }
        if !(0.0..=1.0).contains(&mirror_prob) {
            return domain_err(format!("mirror probability {mirror_prob} outside [0, 1]"));
        }
        let top = rng.below(frame_h - ch + 1);
        let left = rng.below(frame_w - cw + 1);
        let mirror = rng.bernoulli(mirror_prob);
        Ok(Self {
            top,
            left,
            height: ch,
            width: cw,
            mirror,
        })
    }

    /// Crops, then mirrors horizontally; mirroring negates the flow-x channel.
    pub fn apply(&self, frame: &RawFrame) -> Result<RawFrame> {
        if self.top + self.height > frame.height || self.left + self.width > frame.width {
            return domain_err("augmentation window outside frame");
        }
        let mut data = Vec::with_capacity(self.height * self.width * FRAME_CHANNELS);
        for y in 0..self.height {
            for x in 0..self.width {
                let sx = if self.mirror {
                    self.left + self.width - 1 - x
                } else {
                    self.left + x
                };
                for c in 0..FRAME_CHANNELS {
                    let v = frame.at(self.top + y, sx, c);
                    data.push(if self.mirror && c == FLOW_X { -v } else { v });
                }
            }
        }
        Ok(RawFrame {
            height: self.height,
            width: self.width,
            data,
        })
    }
}

/// Random crop followed by random horizontal mirroring.
pub fn augment(
    frame: &RawFrame,
    rng: &mut RngStream,
    crop: (usize, usize),
    mirror_prob: f64,
) -> Result<RawFrame> {
    AugmentDraw::sample(frame.height, frame.width, crop, mirror_prob, rng)?.apply(frame)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_frame(h: usize, w: usize, rng: &mut RngStream) -> RawFrame {
        let data = (0..h * w * FRAME_CHANNELS)
            .map(|i| {
                if i % FRAME_CHANNELS < 3 {
                    rng.uniform()
                } else {
                    rng.uniform_range(-1.0, 1.0)
                }
            })
            .collect();
        RawFrame::new(h, w, FRAME_CHANNELS, data).unwrap()
    }

    fn tiny_config() -> ConvEncoderConfig {
        ConvEncoderConfig {
            height: 8,
            width: 6,
            channels1: 2,
            channels2: 2,
            kernel: 1,
            feature_dim: 4,
        }
    }

    #[test]
    fn wrong_channel_count_is_format_error() {
        assert!(matches!(
            RawFrame::new(2, 2, 3, vec![0.0; 12]),
            Err(Error::Format(_))
        ));
        assert!(matches!(
            RawFrame::new(1, 1, 5, vec![0.0, 0.0, 2.0, 0.0, 0.0]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn zero_frame_zero_params_gives_zero_feature() {
        let enc = ConvEncoder::zeros(tiny_config()).unwrap();
        let frame = RawFrame::new(8, 6, 5, vec![0.0; 240]).unwrap();
        let f = encode_frame(&frame, &enc).unwrap();
        assert_eq!(f, vec![0.0; 4]);
    }

    #[test]
    fn inference_encoding_is_repeatable() {
        let mut rng = RngStream::new(3);
        let enc = ConvEncoder::init(tiny_config(), &mut rng).unwrap();
        let frame = random_frame(8, 6, &mut rng);
        let a = encode_frame(&frame, &enc).unwrap();
        let b = encode_frame(&frame, &enc).unwrap();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn passthrough_checks_dimension() {
        assert_eq!(encode_passthrough(&[1.0, 2.0, 3.0], 3).unwrap(), vec![1.0, 2.0, 3.0]);
        assert!(matches!(
            encode_passthrough(&[1.0, 2.0, 3.0, 4.0], 3),
            Err(Error::Dimension(_))
        ));
        let enc = Encoder::Passthrough { dim: 3 };
        assert_eq!(enc.encode(&Frame::Feature(vec![1.0, 2.0, 3.0])).unwrap(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn full_crop_without_mirror_is_identity() {
        let mut rng = RngStream::new(1);
        let f = random_frame(5, 7, &mut rng);
        let out = augment(&f, &mut rng, (5, 7), 0.0).unwrap();
        assert_eq!(out, f);
        assert!(augment(&f, &mut rng, (6, 7), 0.0).is_err());
    }

    #[test]
    fn mirror_twice_restores_and_negates_flow_x() {
        let mut rng = RngStream::new(2);
        let f = random_frame(6, 7, &mut rng);
        let draw = AugmentDraw {
            top: 1,
            left: 2,
            height: 4,
            width: 5,
            mirror: true,
        };
        let once = draw.apply(&f).unwrap();
        let plain = AugmentDraw { mirror: false, ..draw }.apply(&f).unwrap();
        for y in 0..4 {
            for x in 0..5 {
                assert_eq!(once.at(y, x, FLOW_X), -plain.at(y, 4 - x, FLOW_X));
                assert_eq!(once.at(y, x, FLOW_Y), plain.at(y, 4 - x, FLOW_Y));
                assert_eq!(once.at(y, x, 0), plain.at(y, 4 - x, 0));
            }
        }
        let full = AugmentDraw {
            top: 0,
            left: 0,
            height: 4,
            width: 5,
            mirror: true,
        };
        let twice = full.apply(&once).unwrap();
        assert_eq!(twice, plain);
    }

    #[test]
    fn mirror_frequency_matches_probability() {
        let mut rng = RngStream::new(77);
        let n = 10_000;
        let hits = (0..n)
            .filter(|_| AugmentDraw::sample(4, 4, (3, 3), 0.5, &mut rng).unwrap().mirror)
            .count();
        let freq = hits as f64 / n as f64;
        assert!((freq - 0.5).abs() < 0.02, "{freq}");
    }

    #[test]
    fn encoder_block_round_trip() {
        let mut rng = RngStream::new(5);
        let enc = Encoder::Conv(ConvEncoder::init(tiny_config(), &mut rng).unwrap());
        let mut buf = Vec::new();
        enc.write_to(&mut buf).unwrap();
        let back = Encoder::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, enc);
        let p = Encoder::Passthrough { dim: 32 };
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        assert_eq!(Encoder::read_from(&mut buf.as_slice()).unwrap(), p);
    }
}
