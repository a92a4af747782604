//! Synthetic two-camera datasets for desk-scale experiments.
//!
//! Feature mode draws, per identity, a latent signature; each camera track
//! adds a nuisance offset confined to the first half of the coordinates,
//! camera B adds one global shift, and every frame adds noise:
//!
//! ```text
//! f = signature(id) + [cam B] shift + nuisance(id, cam) + noise(t)
//! ```
//!
//! The noise is a stationary AR(1) process along each track.
//!
//! Signatures are either i.i.d. per coordinate or drawn from a fixed random
//! subspace of rank `signal_rank`.
//!
//! Image mode paints three colored bands with a moving stripe texture, so
//! consecutive frames carry real horizontal motion for the flow step.

use serde::{Deserialize, Serialize};

use crate::dataio::flow::{flow_track, DEFAULT_CLAMP, DEFAULT_WINDOW};
use crate::dataio::formats::StoredFrame;
use crate::dataio::{IdentityRecord, Track};
use crate::encoder::{Frame, RawFrame};
use crate::error::{Error, Result};
use crate::tensorcore::RngStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum SynthKind {
    Features { dim: usize },
    Images { height: usize, width: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub identities: usize,
    pub frames_min: usize,
    pub frames_max: usize,
    pub kind: SynthKind,
    /// Per-coordinate standard deviation of identity signatures (feature
    /// mode) or color contrast in `[0, 1]` (image mode).
    pub signal: f64,
    /// Per-frame noise standard deviation.
    pub noise: f64,
    /// Per-track nuisance standard deviation (feature mode only).
    #[serde(default)]
    pub nuisance: f64,
    /// Lag-one autocorrelation of the per-frame noise along a track, in
    /// `[0, 1)` (feature mode only).
    #[serde(default)]
    pub noise_correlation: f64,
    /// Rank of the subspace identity signatures are drawn from (feature mode
    /// only); 0 means full rank.
    #[serde(default)]
    pub signal_rank: usize,
    /// Standard deviation of the camera-B shift vector.
    pub camera_shift: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn features(identities: usize, frames: usize, dim: usize, seed: u64) -> Self {
        Self {
            identities,
            frames_min: frames,
            frames_max: frames,
            kind: SynthKind::Features { dim },
            signal: 1.0,
            noise: 0.3,
            nuisance: 0.0,
            noise_correlation: 0.0,
            signal_rank: 0,
            camera_shift: 0.5,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.identities == 0 {
            return bad("identity count must be positive");
        }
        if self.frames_min == 0 || self.frames_max < self.frames_min {
            return bad("frame range must satisfy 1 <= min <= max");
        }
        match self.kind {
            SynthKind::Features { dim } if dim == 0 => return bad("feature dimension must be positive"),
            SynthKind::Features { dim } if self.signal_rank > dim => {
                return bad("signal rank exceeds the feature dimension")
            }
            SynthKind::Images { height, width } if height < 2 || width < 2 => {
                return bad("image size must be at least 2x2")
            }
            _ => {}
        }
        for (name, v) in [
            ("signal", self.signal),
            ("noise", self.noise),
            ("nuisance", self.nuisance),
            ("camera shift", self.camera_shift),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(&format!("{name} must be finite and non-negative"));
            }
        }
        if !(0.0..1.0).contains(&self.noise_correlation) {
            return bad("noise correlation must lie in [0, 1)");
        }
        Ok(())
    }

    fn track_len(&self, rng: &mut RngStream) -> usize {
        self.frames_min + rng.below(self.frames_max - self.frames_min + 1)
    }
}

fn gaussian(n: usize, sd: f64, rng: &mut RngStream) -> Vec<f64> {
    (0..n).map(|_| sd * rng.normal()).collect()
}

fn feature_tracks(spec: &SyntheticSpec, dim: usize) -> Vec<IdentityRecord> {
    let mut rng = RngStream::new(spec.seed);
    let shift = gaussian(dim, spec.camera_shift, &mut rng);
    let half = dim / 2;
    let rank = spec.signal_rank;
    // dim x rank basis with N(0, 1/rank) entries keeps per-coordinate variance at signal^2
    let basis = (rank > 0).then(|| gaussian(dim * rank, 1.0 / (rank as f64).sqrt(), &mut rng));
    (0..spec.identities)
        .map(|i| {
            let sig = match &basis {
                None => gaussian(dim, spec.signal, &mut rng),
                Some(b) => {
                    let z = gaussian(rank, spec.signal, &mut rng);
                    (0..dim)
                        .map(|r| (0..rank).map(|k| b[r * rank + k] * z[k]).sum())
                        .collect()
                }
            };
            let tracks = [0usize, 1].map(|cam| {
                let mut offset = sig.clone();
                if cam == 1 {
                    offset.iter_mut().zip(&shift).for_each(|(o, s)| *o += s);
                }
                for o in offset.iter_mut().take(half) {
                    *o += spec.nuisance * rng.normal();
                }
                let t = spec.track_len(&mut rng);
                let rho = spec.noise_correlation;
                let innovation = (1.0 - rho * rho).sqrt();
                let mut state = gaussian(dim, 1.0, &mut rng);
                let frames = (0..t)
                    .map(|k| {
                        if k > 0 {
                            for s in state.iter_mut() {
                                *s = rho * *s + innovation * rng.normal();
                            }
                        }
                        Frame::Feature(
                            offset
                                .iter()
                                .zip(&state)
                                .map(|(o, s)| o + spec.noise * s)
                                .collect(),
                        )
                    })
                    .collect();
                Track::new(frames).expect("track length is positive")
            });
            IdentityRecord {
                id: i as u32,
                tracks,
            }
        })
        .collect()
}

/// RGB tracks for image mode, one pair per identity.
pub fn generate_rgb_tracks(spec: &SyntheticSpec) -> Result<Vec<(u32, [Vec<StoredFrame>; 2])>> {
    spec.validate()?;
    let SynthKind::Images { height, width } = spec.kind else {
        return Err(Error::Config("RGB tracks need an image-mode spec".into()));
    };
    let mut rng = RngStream::new(spec.seed);
    let shift: Vec<f64> = gaussian(3, spec.camera_shift, &mut rng);
    let lo = 0.5 - 0.5 * spec.signal.min(1.0);
    let span = spec.signal.min(1.0);
    let mut out = Vec::with_capacity(spec.identities);
    for i in 0..spec.identities {
        let bands: Vec<[f64; 3]> = (0..3)
            .map(|_| [0; 3].map(|_| lo + span * rng.uniform()))
            .collect();
        let freq = rng.uniform_range(0.3, 0.8);
        let phase = rng.uniform_range(0.0, std::f64::consts::TAU);
        let tracks = [0usize, 1].map(|cam| {
            let t_len = spec.track_len(&mut rng);
            (0..t_len)
                .map(|t| {
                    let mut data = Vec::with_capacity(height * width * 3);
                    for y in 0..height {
                        let band = &bands[(3 * y / height).min(2)];
                        for x in 0..width {
                            let tex = 0.1 * (freq * (x as f64 - t as f64) + phase).sin();
                            for c in 0..3 {
                                let cam_shift = if cam == 1 { shift[c] } else { 0.0 };
                                let v = band[c] + tex + cam_shift + spec.noise * rng.normal();
                                data.push(v.clamp(0.0, 1.0) as f32);
                            }
                        }
                    }
                    StoredFrame::new(height, width, 3, data).expect("sizes are consistent")
                })
                .collect::<Vec<_>>()
        });
        out.push((i as u32, tracks));
    }
    Ok(out)
}

/// Builds the dataset described by `spec`. Image mode runs the flow step in
/// memory with the default window and clamp.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<IdentityRecord>> {
    spec.validate()?;
    match spec.kind {
        SynthKind::Features { dim } => Ok(feature_tracks(spec, dim)),
        SynthKind::Images { .. } => generate_rgb_tracks(spec)?
            .into_iter()
            .map(|(id, [a, b])| {
                let to_track = |frames: Vec<StoredFrame>| -> Result<Track> {
                    let frames = flow_track(&frames, DEFAULT_WINDOW, DEFAULT_CLAMP)?
                        .into_iter()
                        .map(|f| {
                            let data = f.data.iter().map(|&v| v as f64).collect();
                            RawFrame::new(f.height, f.width, f.channels, data).map(Frame::Image)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    Track::new(frames)
                };
                Ok(IdentityRecord {
                    id,
                    tracks: [to_track(a)?, to_track(b)?],
                })
            })
            .collect(),
    }
}
