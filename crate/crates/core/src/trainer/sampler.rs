//! Pair samplers for the two training modes.
//!
//! SEQ: `B` pairs of length-`L` subsequences per iteration, positive and
//! negative iterations alternate, `2N/B` iterations per epoch (rounded up).
//! FRM: `B*L` single-frame pairs per iteration, half positive, half negative,
//! `ceil(2N/(B*L))` iterations per epoch.
//!
//! Positive identities come from a queue shuffled at the start of each epoch.
//! When the queue runs dry inside an epoch a fresh pass is shuffled in, which
//! pads the last FRM batch with identities already seen that epoch.

use std::collections::BTreeMap;

use crate::dataio::IdentityRecord;
use crate::error::{domain_err, Error, Result};
use crate::tensorcore::RngStream;
use crate::trainer::Mode;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PairItem {
    Subsequence {
        identity: usize,
        camera: usize,
        start: usize,
        len: usize,
    },
    Frame {
        identity: usize,
        camera: usize,
        frame: usize,
    },
}

impl PairItem {
    pub fn identity(&self) -> usize {
        match *self {
            PairItem::Subsequence { identity, .. } | PairItem::Frame { identity, .. } => identity,
        }
    }

    pub fn camera(&self) -> usize {
        match *self {
            PairItem::Subsequence { camera, .. } | PairItem::Frame { camera, .. } => camera,
        }
    }

    /// Number of frames this item loads.
    pub fn frames(&self) -> usize {
        match *self {
            PairItem::Subsequence { len, .. } => len,
            PairItem::Frame { .. } => 1,
        }
    }

    /// `(start, len)` range inside the track.
    pub fn range(&self) -> (usize, usize) {
        match *self {
            PairItem::Subsequence { start, len, .. } => (start, len),
            PairItem::Frame { frame, .. } => (frame, 1),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairSample {
    pub a: PairItem,
    pub b: PairItem,
    pub positive: bool,
}

/// Iteration accounting for one sampler.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EpochLedger {
    pub iterations_per_epoch: u64,
    /// Images loaded by the most recent iteration.
    pub images_per_iteration: usize,
    pub total_images: u64,
    pub iterations: u64,
    /// Positive-pair count per training identity, current epoch.
    pub epoch_positives: BTreeMap<usize, u32>,
    /// Positive-pair count per training identity, whole run.
    pub coverage: BTreeMap<usize, u64>,
}

pub fn iterations_per_epoch(mode: Mode, n: usize, batch: usize, subseq_len: usize) -> u64 {
    let num = 2 * n as u64;
    let den = match mode {
        Mode::Seq => batch as u64,
        Mode::Frm => (batch * subseq_len) as u64,
    };
    num.div_ceil(den)
}

#[derive(Clone, Debug)]
pub struct PairSampler {
    mode: Mode,
    batch: usize,
    subseq_len: usize,
    lengths: Vec<[usize; 2]>,
    queue: Vec<usize>,
    epoch: u64,
    iter_in_epoch: u64,
    ledger: EpochLedger,
    rng: RngStream,
}

impl PairSampler {
    pub fn new(
        dataset: &[IdentityRecord],
        mode: Mode,
        batch: usize,
        subseq_len: usize,
        rng: RngStream,
    ) -> Result<Self> {
        if dataset.len() < 2 {
            return domain_err(format!(
                "pair sampling needs at least 2 identities, got {}",
                dataset.len()
            ));
        }
        if batch == 0 || subseq_len == 0 {
            return Err(Error::Config("batch size and subsequence length must be positive".into()));
        }
        if mode == Mode::Frm && (batch * subseq_len) % 2 == 1 {
            return Err(Error::Config(format!(
                "FRM batches of B*L = {} pairs cannot be split in half",
                batch * subseq_len
            )));
        }
        let lengths = dataset
            .iter()
            .map(|r| [r.tracks[0].len(), r.tracks[1].len()])
            .collect();
        let ledger = EpochLedger {
            iterations_per_epoch: iterations_per_epoch(mode, dataset.len(), batch, subseq_len),
            ..Default::default()
        };
        Ok(Self {
            mode,
            batch,
            subseq_len,
            lengths,
            queue: Vec::new(),
            epoch: 0,
            iter_in_epoch: 0,
            ledger,
            rng,
        })
    }

    pub fn ledger(&self) -> &EpochLedger {
        &self.ledger
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    fn n(&self) -> usize {
        self.lengths.len()
    }

    fn refill(&mut self) {
        let mut q = self.rng.permutation(self.n());
        // popped from the back
        q.reverse();
        self.queue = q;
    }

    fn next_positive(&mut self) -> usize {
        if self.queue.is_empty() {
            self.refill();
        }
        let id = self.queue.pop().expect("refilled queue is non-empty");
        *self.ledger.epoch_positives.entry(id).or_default() += 1;
        *self.ledger.coverage.entry(id).or_default() += 1;
        id
    }

    fn negative_ids(&mut self) -> (usize, usize) {
        let n = self.n();
        let i = self.rng.below(n);
        let j = (i + 1 + self.rng.below(n - 1)) % n;
        (i, j)
    }

    fn item(&mut self, identity: usize, camera: usize) -> PairItem {
        let t = self.lengths[identity][camera];
        match self.mode {
            Mode::Seq => {
                let len = self.subseq_len.min(t);
                let start = self.rng.below(t - len + 1);
                PairItem::Subsequence {
                    identity,
                    camera,
                    start,
                    len,
                }
            }
            Mode::Frm => PairItem::Frame {
                identity,
                camera,
                frame: self.rng.below(t),
            },
        }
    }

    fn positive_pair(&mut self) -> PairSample {
        let id = self.next_positive();
        PairSample {
            a: self.item(id, 0),
            b: self.item(id, 1),
            positive: true,
        }
    }

    fn negative_pair(&mut self) -> PairSample {
        let (i, j) = self.negative_ids();
        let cam = self.rng.below(2);
        PairSample {
            a: self.item(i, cam),
            b: self.item(j, 1 - cam),
            positive: false,
        }
    }

    /// Pairs for the next iteration; advances the epoch state.
    pub fn next_batch(&mut self) -> Vec<PairSample> {
        if self.iter_in_epoch == 0 {
            self.refill();
            self.ledger.epoch_positives.clear();
        }
        let pairs: Vec<PairSample> = match self.mode {
            Mode::Seq => {
                let positive = self.iter_in_epoch % 2 == 0;
                (0..self.batch)
                    .map(|_| {
                        if positive {
                            self.positive_pair()
                        } else {
                            self.negative_pair()
                        }
                    })
                    .collect()
            }
            Mode::Frm => {
                let half = self.batch * self.subseq_len / 2;
                let mut v: Vec<PairSample> = (0..half).map(|_| self.positive_pair()).collect();
                v.extend((0..half).map(|_| self.negative_pair()));
                v
            }
        };
        let images: usize = pairs.iter().map(|p| p.a.frames() + p.b.frames()).sum();
        self.ledger.images_per_iteration = images;
        self.ledger.total_images += images as u64;
        self.ledger.iterations += 1;
        self.iter_in_epoch += 1;
        if self.iter_in_epoch == self.ledger.iterations_per_epoch {
            self.iter_in_epoch = 0;
            self.epoch += 1;
        }
        pairs
    }

    /// Epoch the next batch belongs to and whether it starts one.
    pub fn position(&self) -> (u64, u64) {
        (self.epoch, self.iter_in_epoch)
    }
}
