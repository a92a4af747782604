//! The full feature extraction network and its checkpoint container.
//!
//! Checkpoint layout (`SQCK`): magic, version, architecture word
//! (0 = rnn, 1 = fnn), then an encoder block (`SQEN`) and the stage
//! parameter block (`SQSP`) verbatim.

use std::fs;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use crate::binio;
use crate::encoder::{Encoder, Frame, RawFrame, FRAME_CHANNELS};
use crate::error::{format_err, Result};
use crate::seqstage::{self, Arch, Dropout, SeqStageParams, StageLeaves};
use crate::tensorcore::{Graph, NodeId, RngStream, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SQCK";
pub const CHECKPOINT_VERSION: u32 = 1;
/// Byte offset of the architecture word inside a checkpoint.
pub const ARCH_OFFSET: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub arch: Arch,
    pub encoder: Encoder,
    pub stage: SeqStageParams,
}

/// Graph handles for every trainable block of a [`Model`].
#[derive(Clone, Debug)]
pub struct ModelLeaves {
    pub encoder: Vec<NodeId>,
    pub stage: StageLeaves,
}

impl ModelLeaves {
    pub fn all(&self) -> Vec<NodeId> {
        let mut v = self.encoder.clone();
        v.extend(self.stage.ids());
        v
    }
}

impl Model {
    pub fn param_blocks(&self) -> Vec<&Tensor> {
        let mut v: Vec<&Tensor> = self.encoder.params().iter().collect();
        v.extend(self.stage.blocks());
        v
    }

    pub fn param_blocks_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = self.encoder.params_mut().iter_mut().collect();
        v.extend(self.stage.blocks_mut());
        v
    }

    pub fn leaves(&self, g: &mut Graph) -> ModelLeaves {
        ModelLeaves {
            encoder: self.encoder.leaves(g),
            stage: self.stage.leaves(g),
        }
    }

    /// Pooled descriptor of a frame sequence on the tape.
    pub fn descriptor_graph(
        &self,
        g: &mut Graph,
        leaves: &ModelLeaves,
        frames: &[Frame],
        dropout: Dropout,
        rng: &mut RngStream,
    ) -> Result<NodeId> {
        let feats = frames
            .iter()
            .map(|f| self.encoder.encode_graph(g, &leaves.encoder, f))
            .collect::<Result<Vec<_>>>()?;
        let outs = seqstage::stage_graph(self.arch, g, &feats, &leaves.stage, dropout, rng)?;
        g.mean_over_time(&outs)
    }

    /// Inference descriptor: dropout off, frames center-cropped to the
    /// encoder input size when needed.
    pub fn descriptor(&self, frames: &[Frame]) -> Result<Vec<f64>> {
        self.descriptor_as(self.arch, frames)
    }

    /// Inference descriptor under an explicit architecture.
    pub fn descriptor_as(&self, arch: Arch, frames: &[Frame]) -> Result<Vec<f64>> {
        let frames = frames
            .iter()
            .map(|f| self.fit_frame(f))
            .collect::<Result<Vec<_>>>()?;
        let mut g = Graph::new();
        let leaves = self.leaves(&mut g);
        let mut rng = RngStream::new(0);
        let view = Model {
            arch,
            encoder: self.encoder.clone(),
            stage: self.stage.clone(),
        };
        // `view` shares values with `self`; only the interpreting graph differs
        let d = view.descriptor_graph(&mut g, &leaves, &frames, Dropout::OFF, &mut rng)?;
        Ok(g.value(d).data().to_vec())
    }

    fn fit_frame(&self, frame: &Frame) -> Result<Frame> {
        match (&self.encoder, frame) {
            (Encoder::Conv(c), Frame::Image(img)) => {
                let (h, w) = (c.config().height, c.config().width);
                if img.height() == h && img.width() == w {
                    return Ok(frame.clone());
                }
                if img.height() < h || img.width() < w {
                    return format_err(format!(
                        "frame {}x{} smaller than encoder input {h}x{w}",
                        img.height(),
                        img.width()
                    ));
                }
                Ok(Frame::Image(center_crop(img, h, w)?))
            }
            _ => Ok(frame.clone()),
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        binio::write_magic(w, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        binio::write_u32(w, arch_word(self.arch))?;
        self.encoder.write_to(w)?;
        self.stage.write_to(w)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        binio::read_magic(r, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        let arch = match binio::read_u32(r)? {
            0 => Arch::Rnn,
            1 => Arch::Fnn,
            k => return format_err(format!("unknown architecture tag {k}")),
        };
        let encoder = Encoder::read_from(r)?;
        let stage = SeqStageParams::read_from(r)?;
        binio::expect_eof(r)?;
        if encoder.feature_dim() != stage.d_in() {
            return format_err(format!(
                "encoder emits {} features but the stage expects {}",
                encoder.feature_dim(),
                stage.d_in()
            ));
        }
        Ok(Self {
            arch,
            encoder,
            stage,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        Self::read_from(&mut bytes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(fs::File::open(path)?))
    }

    /// Same values, reinterpreted by the feed-forward graph.
    pub fn transplanted(&self) -> Self {
        Self {
            arch: self.arch.flipped(),
            encoder: self.encoder.clone(),
            stage: seqstage::transplant(&self.stage),
        }
    }

    pub fn bits_eq(&self, other: &Model) -> bool {
        self.to_bytes() == other.to_bytes()
    }
}

fn arch_word(arch: Arch) -> u32 {
    match arch {
        Arch::Rnn => 0,
        Arch::Fnn => 1,
    }
}

/// Flips the architecture word of a serialized checkpoint and leaves every
/// other byte untouched. Validates the whole record first.
pub fn transplant_checkpoint_bytes(bytes: &[u8]) -> Result<Vec<u8>> {
    let model = Model::from_bytes(bytes)?;
    let mut out = bytes.to_vec();
    out[ARCH_OFFSET..ARCH_OFFSET + 4].copy_from_slice(&arch_word(model.arch.flipped()).to_le_bytes());
    Ok(out)
}

pub fn center_crop(img: &RawFrame, h: usize, w: usize) -> Result<RawFrame> {
    let top = (img.height() - h) / 2;
    let left = (img.width() - w) / 2;
    let mut data = Vec::with_capacity(h * w * FRAME_CHANNELS);
    for y in 0..h {
        for x in 0..w {
            for c in 0..FRAME_CHANNELS {
                data.push(img.at(top + y, left + x, c));
            }
        }
    }
    RawFrame::new(h, w, FRAME_CHANNELS, data)
}
