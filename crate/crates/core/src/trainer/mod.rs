//! Siamese training of encoder and sequence stage.

mod loss;
mod model;
mod sampler;

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataio::IdentityRecord;
use crate::encoder::{AugmentDraw, ConvEncoder, ConvEncoderConfig, Encoder, Frame};
use crate::error::{domain_err, Error, Result};
use crate::seqstage::{Arch, Dropout, SeqStageParams};
use crate::tensorcore::{Graph, NodeId, RngStream, Tensor};

pub use loss::{contrastive_loss, identification_loss, ClassifierHead, CONTRASTIVE_FORMULA};
pub use model::{
    center_crop, transplant_checkpoint_bytes, Model, ModelLeaves, ARCH_OFFSET, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use sampler::{iterations_per_epoch, EpochLedger, PairItem, PairSample, PairSampler};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Seq,
    Frm,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Seq => "seq",
            Mode::Frm => "frm",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "seq" => Ok(Mode::Seq),
            "frm" => Ok(Mode::Frm),
            _ => Err(Error::Config(format!("unknown mode `{s}` (expected seq or frm)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LrScaling {
    Sqrt,
    Linear,
}

/// Learning rate for a batch `k` times larger than the one `base` was tuned for.
pub fn scale_learning_rate(base: f64, k: f64, rule: LrScaling) -> Result<f64> {
    if !(k >= 1.0) || !k.is_finite() {
        return domain_err(format!("batch growth factor must be >= 1, got {k}"));
    }
    Ok(match rule {
        LrScaling::Sqrt => base * k.sqrt(),
        LrScaling::Linear => base * k,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: Mode,
    pub arch: Arch,
    pub batch_size: usize,
    pub subseq_len: usize,
    /// Descriptor dimension `d2`.
    pub feature_dim: usize,
    pub margin: f64,
    pub learning_rate: f64,
    pub epochs: u64,
    /// Overrides `epochs` with an absolute iteration budget.
    pub iterations: Option<u64>,
    pub dropout_p: f64,
    pub seed: u64,
    pub id_loss_weight: f64,
    /// Random crop size for image frames; `None` keeps the full frame.
    pub crop: Option<(usize, usize)>,
    pub mirror_prob: f64,
    /// Per-frame feature size `d1` produced by the conv encoder.
    pub frame_dim: usize,
    pub conv_channels: (usize, usize),
    pub conv_kernel: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::reference_seq()
    }
}

impl TrainConfig {
    pub fn reference_seq() -> Self {
        Self {
            mode: Mode::Seq,
            arch: Arch::Rnn,
            batch_size: 1,
            subseq_len: 16,
            feature_dim: 128,
            margin: 2.0,
            learning_rate: 1e-3,
            epochs: 1000,
            iterations: None,
            dropout_p: 0.6,
            seed: 0,
            id_loss_weight: 1.0,
            crop: None,
            mirror_prob: 0.5,
            frame_dim: 128,
            conv_channels: (8, 8),
            conv_kernel: 3,
        }
    }

    pub fn reference_frm() -> Self {
        Self {
            mode: Mode::Frm,
            arch: Arch::Fnn,
            learning_rate: 16e-3,
            epochs: 16000,
            ..Self::reference_seq()
        }
    }

    pub fn for_mode(mode: Mode) -> Self {
        match mode {
            Mode::Seq => Self::reference_seq(),
            Mode::Frm => Self::reference_frm(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.mode == Mode::Frm && self.arch == Arch::Rnn {
            return bad(
                "FRM mode trains on sequences of length 1, where the recurrent term never \
                 receives a gradient; use arch=fnn"
                    .into(),
            );
        }
        if !(self.margin > 0.0) || !self.margin.is_finite() {
            return bad(format!("margin must be positive, got {}", self.margin));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout_p must lie in [0, 1), got {}", self.dropout_p));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning_rate must be non-negative, got {}", self.learning_rate));
        }
        if !(self.id_loss_weight >= 0.0) || !self.id_loss_weight.is_finite() {
            return bad(format!("id_loss_weight must be non-negative, got {}", self.id_loss_weight));
        }
        if !(0.0..=1.0).contains(&self.mirror_prob) {
            return bad(format!("mirror_prob must lie in [0, 1], got {}", self.mirror_prob));
        }
        if self.epochs == 0 && self.iterations.is_none() {
            return bad("epochs must be positive".into());
        }
        if self.batch_size == 0 || self.subseq_len == 0 || self.feature_dim == 0 || self.frame_dim == 0 {
            return bad("batch_size, subseq_len, feature_dim and frame_dim must be positive".into());
        }
        if self.mode == Mode::Frm && (self.batch_size * self.subseq_len) % 2 == 1 {
            return bad(format!(
                "FRM batches of B*L = {} pairs cannot be split in half",
                self.batch_size * self.subseq_len
            ));
        }
        if let Some((h, w)) = self.crop {
            if h == 0 || w == 0 {
                return bad("crop size must be positive".into());
            }
        }
        Ok(())
    }

    /// Sets one field from its `key=value` spelling.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
        }
        let v = value.trim();
        match key.trim() {
            "mode" => self.mode = v.parse()?,
            "arch" => self.arch = v.parse()?,
            "batch_size" | "B" => self.batch_size = num(key, v)?,
            "subseq_len" | "L" => self.subseq_len = num(key, v)?,
            "feature_dim" => self.feature_dim = num(key, v)?,
            "margin" => self.margin = num(key, v)?,
            "learning_rate" | "lr" => self.learning_rate = num(key, v)?,
            "epochs" => self.epochs = num(key, v)?,
            "iterations" => {
                self.iterations = if v.is_empty() || v == "none" {
                    None
                } else {
                    Some(num(key, v)?)
                }
            }
            "dropout_p" | "dropout" => self.dropout_p = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "id_loss_weight" => self.id_loss_weight = num(key, v)?,
            "mirror_prob" => self.mirror_prob = num(key, v)?,
            "crop" => {
                self.crop = if v.is_empty() || v == "none" {
                    None
                } else {
                    Some(parse_size(v)?)
                }
            }
            "frame_dim" => self.frame_dim = num(key, v)?,
            "conv_channels1" => self.conv_channels.0 = num(key, v)?,
            "conv_channels2" => self.conv_channels.1 = num(key, v)?,
            "conv_kernel" => self.conv_kernel = num(key, v)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Builds a config from ordered `key=value` pairs. The `mode` key, if
    /// present, selects the default set; later pairs win.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let mode = match pairs.iter().rev().find(|(k, _)| k.trim() == "mode") {
            Some((_, v)) => v.parse()?,
            None => Mode::Seq,
        };
        let mut cfg = Self::for_mode(mode);
        for (k, v) in pairs {
            cfg.apply_kv(k, v)?;
        }
        Ok(cfg)
    }

    pub fn total_iterations(&self, n_identities: usize) -> u64 {
        self.iterations.unwrap_or_else(|| {
            self.epochs * iterations_per_epoch(self.mode, n_identities, self.batch_size, self.subseq_len)
        })
    }
}

/// Parses `HxW`.
pub fn parse_size(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("expected HxW, got `{s}`"));
    let (h, w) = s.trim().split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((h.parse().map_err(|_| bad())?, w.parse().map_err(|_| bad())?))
}

/// Parses a flat `key=value` text; `#` starts a comment.
pub fn parse_kv_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Model plus the training-only classifier head.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub head: ClassifierHead,
}

impl TrainState {
    /// Fresh parameters sized for `dataset`. Feature tracks get a passthrough
    /// encoder; image tracks get a conv encoder over the crop size.
    pub fn init(dataset: &[IdentityRecord], config: &TrainConfig) -> Result<Self> {
        let first = dataset
            .first()
            .ok_or_else(|| Error::Domain("training set is empty".into()))?
            .tracks[0]
            .frames()[0]
            .clone();
        let mut rng = RngStream::derive(config.seed, 0x1417);
        let encoder = match &first {
            Frame::Feature(v) => Encoder::Passthrough { dim: v.len() },
            Frame::Image(img) => {
                let (height, width) = config.crop.unwrap_or((img.height(), img.width()));
                let cfg = ConvEncoderConfig {
                    height,
                    width,
                    channels1: config.conv_channels.0,
                    channels2: config.conv_channels.1,
                    kernel: config.conv_kernel,
                    feature_dim: config.frame_dim,
                };
                Encoder::Conv(ConvEncoder::init(cfg, &mut rng)?)
            }
        };
        let stage = SeqStageParams::init(encoder.feature_dim(), config.feature_dim, &mut rng);
        let head = ClassifierHead::init(dataset.len(), config.feature_dim, &mut rng);
        Ok(Self {
            model: Model {
                arch: config.arch,
                encoder,
                stage,
            },
            head,
        })
    }

    pub fn param_blocks(&self) -> Vec<&Tensor> {
        let mut v = self.model.param_blocks();
        v.push(&self.head.w);
        v.push(&self.head.b);
        v
    }

    pub fn param_blocks_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.model.param_blocks_mut();
        v.push(&mut self.head.w);
        v.push(&mut self.head.b);
        v
    }
}

/// A mini-batch loss on the tape, with one leaf per parameter block in the
/// order of [`TrainState::param_blocks`].
pub struct BatchLoss {
    pub graph: Graph,
    pub total: NodeId,
    pub params: Vec<NodeId>,
    pub contrastive: f64,
    pub identification: f64,
}

/// Frames of one pair member, with crop and mirroring applied to images.
/// A subsequence shares one augmentation draw.
pub fn item_frames(
    dataset: &[IdentityRecord],
    item: &PairItem,
    config: &TrainConfig,
    rng: &mut RngStream,
) -> Result<Vec<Frame>> {
    let track = &dataset[item.identity()].tracks[item.camera()];
    let (start, len) = item.range();
    let frames = &track.frames()[start..start + len];
    let Some(Frame::Image(first)) = frames.first() else {
        return Ok(frames.to_vec());
    };
    let crop = config.crop.unwrap_or((first.height(), first.width()));
    let draw = AugmentDraw::sample(first.height(), first.width(), crop, config.mirror_prob, rng)?;
    frames
        .iter()
        .map(|f| match f {
            Frame::Image(img) => draw.apply(img).map(Frame::Image),
            Frame::Feature(_) => Err(Error::Format("track mixes images and features".into())),
        })
        .collect()
}

/// Mean over pairs of `contrastive + w * (id(a) + id(b))`.
pub fn batch_loss(
    state: &TrainState,
    dataset: &[IdentityRecord],
    pairs: &[PairSample],
    config: &TrainConfig,
    rng: &mut RngStream,
) -> Result<BatchLoss> {
    if pairs.is_empty() {
        return domain_err("empty batch");
    }
    let mut g = Graph::new();
    let leaves = state.model.leaves(&mut g);
    let head = state.head.leaves(&mut g);
    let dropout = Dropout::training(config.dropout_p);
    let mut terms = Vec::with_capacity(pairs.len());
    let (mut c_sum, mut id_sum) = (0.0, 0.0);
    for pair in pairs {
        let fa = item_frames(dataset, &pair.a, config, rng)?;
        let fb = item_frames(dataset, &pair.b, config, rng)?;
        let da = state.model.descriptor_graph(&mut g, &leaves, &fa, dropout, rng)?;
        let db = state.model.descriptor_graph(&mut g, &leaves, &fb, dropout, rng)?;
        let c = contrastive_loss(&mut g, da, db, pair.positive, config.margin)?;
        let ia = identification_loss(&mut g, da, pair.a.identity(), head)?;
        let ib = identification_loss(&mut g, db, pair.b.identity(), head)?;
        let ids = g.add(ia, ib)?;
        c_sum += g.value(c).item();
        id_sum += g.value(ids).item();
        let weighted = g.scale(ids, config.id_loss_weight);
        terms.push(g.add(c, weighted)?);
    }
    let n = pairs.len() as f64;
    let sum = g.sum(&terms)?;
    let total = g.scale(sum, 1.0 / n);
    let mut params = leaves.all();
    params.push(head.0);
    params.push(head.1);
    Ok(BatchLoss {
        graph: g,
        total,
        params,
        contrastive: c_sum / n,
        identification: id_sum / n,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iteration: u64,
    pub epoch: u64,
    pub mode: Mode,
    pub contrastive: f64,
    pub identification: f64,
    pub total: f64,
    pub elapsed_secs: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub header: Vec<String>,
    pub records: Vec<IterationRecord>,
}

impl TrainLog {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for h in &self.header {
            s.push_str("# ");
            s.push_str(h);
            s.push('\n');
        }
        s.push_str("iteration epoch mode contrastive identification total elapsed_s\n");
        for r in &self.records {
            s.push_str(&format!(
                "{} {} {} {:.9e} {:.9e} {:.9e} {:.3}\n",
                r.iteration, r.epoch, r.mode, r.contrastive, r.identification, r.total, r.elapsed_secs
            ));
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrainProgress {
    /// Completed updates; 0 before the first one.
    pub iteration: u64,
    pub total: u64,
    pub epoch: u64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: TrainLog,
    pub ledger: EpochLedger,
}

pub fn train(dataset: &[IdentityRecord], config: &TrainConfig) -> Result<TrainOutcome> {
    train_with_hook(dataset, config, |_, _| Ok(()))
}

/// Plain SGD. `hook` runs before the first update and after every update.
pub fn train_with_hook<F>(dataset: &[IdentityRecord], config: &TrainConfig, mut hook: F) -> Result<TrainOutcome>
where
    F: FnMut(&TrainProgress, &Model) -> Result<()>,
{
    config.validate()?;
    if dataset.is_empty() {
        return domain_err("training set is empty");
    }
    let mut state = TrainState::init(dataset, config)?;
    let mut sampler = PairSampler::new(
        dataset,
        config.mode,
        config.batch_size,
        config.subseq_len,
        RngStream::derive(config.seed, 0x5a3b),
    )?;
    let mut rng = RngStream::derive(config.seed, 0xd40f);
    let total = config.total_iterations(dataset.len());
    let mut log = TrainLog {
        header: vec![
            format!("mode {} arch {}", config.mode, config.arch),
            format!("contrastive {CONTRASTIVE_FORMULA}, margin {}", config.margin),
            format!(
                "total = mean over pairs of contrastive + {} * (id(a) + id(b))",
                config.id_loss_weight
            ),
            format!(
                "sgd lr {} iterations {} ({} per epoch)",
                config.learning_rate,
                total,
                sampler.ledger().iterations_per_epoch
            ),
        ],
        records: Vec::new(),
    };
    let start = Instant::now();
    hook(
        &TrainProgress {
            iteration: 0,
            total,
            epoch: 0,
        },
        &state.model,
    )?;
    for it in 1..=total {
        let (epoch, _) = sampler.position();
        let pairs = sampler.next_batch();
        let mut bl = batch_loss(&state, dataset, &pairs, config, &mut rng)?;
        let value = bl.graph.value(bl.total).item();
        if !value.is_finite() {
            return Err(Error::Divergence(format!(
                "non-finite loss at iteration {it} (contrastive {}, identification {})",
                bl.contrastive, bl.identification
            )));
        }
        bl.graph.backward(bl.total)?;
        for (block, id) in state.param_blocks_mut().into_iter().zip(&bl.params) {
            if let Some(grad) = bl.graph.grad(*id) {
                for (p, g) in block.data_mut().iter_mut().zip(grad.data()) {
                    *p -= config.learning_rate * g;
                }
            }
        }
        log.records.push(IterationRecord {
            iteration: it,
            epoch,
            mode: config.mode,
            contrastive: bl.contrastive,
            identification: bl.identification,
            total: value,
            elapsed_secs: start.elapsed().as_secs_f64(),
        });
        hook(
            &TrainProgress {
                iteration: it,
                total,
                epoch,
            },
            &state.model,
        )?;
    }
    Ok(TrainOutcome {
        model: state.model,
        log,
        ledger: sampler.ledger().clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::synth::{generate_synthetic, SyntheticSpec};

    fn small_config(mode: Mode) -> TrainConfig {
        TrainConfig {
            feature_dim: 6,
            iterations: Some(20),
            seed: 9,
            ..TrainConfig::for_mode(mode)
        }
    }

    fn data() -> Vec<IdentityRecord> {
        generate_synthetic(&SyntheticSpec::features(4, 6, 5, 2)).unwrap()
    }

    #[test]
    fn learning_rate_scaling() {
        assert!((scale_learning_rate(1e-3, 16.0, LrScaling::Linear).unwrap() - 1.6e-2).abs() < 1e-15);
        assert!((scale_learning_rate(1e-3, 16.0, LrScaling::Sqrt).unwrap() - 4e-3).abs() < 1e-15);
        assert_eq!(scale_learning_rate(1e-3, 1.0, LrScaling::Sqrt).unwrap(), 1e-3);
        assert!(scale_learning_rate(1e-3, 0.5, LrScaling::Linear).is_err());
    }

    #[test]
    fn frm_with_rnn_is_rejected() {
        let cfg = TrainConfig {
            arch: Arch::Rnn,
            ..TrainConfig::reference_frm()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        assert!(TrainConfig::reference_frm().validate().is_ok());
        assert!(TrainConfig::reference_seq().validate().is_ok());
    }

    #[test]
    fn invalid_fields_are_rejected() {
        for (k, v) in [("margin", "0"), ("dropout_p", "1.0"), ("learning_rate", "-1")] {
            let mut c = TrainConfig::reference_seq();
            c.apply_kv(k, v).unwrap();
            assert!(c.validate().is_err(), "{k}={v}");
        }
        assert!(TrainConfig::reference_seq().apply_kv("nope", "1").is_err());
    }

    #[test]
    fn kv_text_round_trip() {
        let pairs = parse_kv_text("mode = frm # comment\narch=fnn\n\nlr=0.004\ncrop=40x30\n").unwrap();
        let cfg = TrainConfig::from_pairs(&pairs).unwrap();
        assert_eq!(cfg.mode, Mode::Frm);
        assert_eq!(cfg.epochs, 16000);
        assert_eq!(cfg.learning_rate, 0.004);
        assert_eq!(cfg.crop, Some((40, 30)));
        assert!(parse_kv_text("novalue").is_err());
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let ds = data();
        let mut cfg = small_config(Mode::Seq);
        cfg.learning_rate = 0.0;
        let init = TrainState::init(&ds, &cfg).unwrap().model;
        let out = train(&ds, &cfg).unwrap();
        assert_eq!(out.model.to_bytes(), init.to_bytes());
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let ds = data();
        for mode in [Mode::Seq, Mode::Frm] {
            let cfg = small_config(mode);
            let a = train(&ds, &cfg).unwrap();
            let b = train(&ds, &cfg).unwrap();
            assert_eq!(a.model.to_bytes(), b.model.to_bytes());
            let mut other = cfg.clone();
            other.seed += 1;
            assert_ne!(train(&ds, &other).unwrap().model.to_bytes(), a.model.to_bytes());
        }
    }

    #[test]
    fn hook_sees_every_iteration() {
        let ds = data();
        let cfg = small_config(Mode::Frm);
        let mut seen = Vec::new();
        train_with_hook(&ds, &cfg, |p, _| {
            seen.push(p.iteration);
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, (0..=20).collect::<Vec<_>>());
    }

    #[test]
    fn huge_learning_rate_diverges() {
        let ds = data();
        let mut cfg = small_config(Mode::Seq);
        cfg.learning_rate = 1e200;
        cfg.iterations = Some(50);
        assert!(matches!(train(&ds, &cfg), Err(Error::Divergence(_))));
    }

    #[test]
    fn log_has_formula_header() {
        let ds = data();
        let out = train(&ds, &small_config(Mode::Seq)).unwrap();
        let text = out.log.to_text();
        assert!(text.contains(CONTRASTIVE_FORMULA));
        assert_eq!(out.log.records.len(), 20);
        assert!(out.log.records.iter().all(|r| r.total >= 0.0));
    }
}
