//! Two-camera identity datasets: in-memory records, the on-disk tree,
//! train/test splits, synthetic generation and optical-flow preprocessing.
//!
//! On-disk layout:
//!
//! ```text
//! root/
//!   meta.json            optional, written by `synth` and `flow`
//!   ignore.txt           optional, one identity number per line
//!   id0007/camA/frame00000.bin ...   (image datasets, SQFR records)
//!   id0007/camA/features.bin         (feature datasets, one SQFT record)
//!   id0007/camB/...
//! ```

pub mod flow;
pub mod formats;
pub mod synth;

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::encoder::{Frame, RawFrame};
use crate::error::{domain_err, format_err, Error, Result};
use crate::tensorcore::RngStream;
use formats::StoredFrame;

pub use synth::{generate_synthetic, SynthKind, SyntheticSpec};

pub const CAMERAS: [&str; 2] = ["camA", "camB"];
pub const FEATURE_FILE: &str = "features.bin";
pub const META_FILE: &str = "meta.json";
pub const IGNORE_FILE: &str = "ignore.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Images,
    Features,
}

impl fmt::Display for DataFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DataFormat::Images => "images",
            DataFormat::Features => "features",
        })
    }
}

impl FromStr for DataFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "images" => Ok(DataFormat::Images),
            "features" => Ok(DataFormat::Features),
            other => Err(Error::Config(format!("unknown data format '{other}'"))),
        }
    }
}

/// One camera's ordered frames for an identity.
#[derive(Clone, Debug, PartialEq)]
pub struct Track {
    frames: Vec<Frame>,
}

impl Track {
    pub fn new(frames: Vec<Frame>) -> Result<Self> {
        if frames.is_empty() {
            return domain_err("a track needs at least one frame");
        }
        Ok(Self { frames })
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// An identity observed by both cameras.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityRecord {
    pub id: u32,
    pub tracks: [Track; 2],
}

/// Train/test partition of dataset indices for one trial.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub trial: u64,
    pub seed: u64,
}

/// Random half/half split, reproducible from `(seed, trial)`. The training
/// half gets `floor(N/2)` identities.
pub fn make_split(n_identities: usize, trial: u64, seed: u64) -> Result<DatasetSplit> {
    if n_identities < 2 {
        return domain_err(format!("need at least 2 identities to split, got {n_identities}"));
    }
    let mut rng = RngStream::derive(seed, trial);
    let perm = rng.permutation(n_identities);
    let half = n_identities / 2;
    let mut train = perm[..half].to_vec();
    let mut test = perm[half..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok(DatasetSplit {
        train,
        test,
        trial,
        seed,
    })
}

/// Picks the records at `indices`.
pub fn subset(dataset: &[IdentityRecord], indices: &[usize]) -> Vec<IdentityRecord> {
    indices.iter().map(|&i| dataset[i].clone()).collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format: Option<DataFormat>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flow_window: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flow_clamp: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
}

impl DatasetMeta {
    pub fn load(root: &Path) -> Result<Option<Self>> {
        let p = root.join(META_FILE);
        if !p.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&p)?;
        serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| Error::Format(format!("{}: {e}", p.display())))
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("meta serializes");
        fs::write(root.join(META_FILE), text + "\n")?;
        Ok(())
    }
}

/// Guesses the format from metadata, else from the first identity folder.
pub fn detect_format(root: &Path) -> Result<DataFormat> {
    if let Some(DatasetMeta {
        format: Some(f), ..
    }) = DatasetMeta::load(root)?
    {
        return Ok(f);
    }
    let ids = identity_dirs(root)?;
    match ids.first() {
        Some((_, dir)) if dir.join(CAMERAS[0]).join(FEATURE_FILE).exists() => Ok(DataFormat::Features),
        Some(_) => Ok(DataFormat::Images),
        None => Ok(DataFormat::Features),
    }
}

pub fn identity_dir_name(id: u32) -> String {
    format!("id{id:04}")
}

pub fn frame_file_name(index: usize) -> String {
    format!("frame{index:05}.bin")
}

fn parse_prefixed(name: &str, prefix: &str, suffix: &str) -> Option<u64> {
    let digits = name.strip_prefix(prefix)?.strip_suffix(suffix)?;
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}

/// Identity folders sorted by identity number.
pub fn identity_dirs(root: &Path) -> Result<Vec<(u32, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(root)? {
        let entry = entry?;
        if !entry.file_type()?.is_dir() {
            continue;
        }
        let name = entry.file_name();
        let Some(id) = name.to_str().and_then(|n| parse_prefixed(n, "id", "")) else {
            continue;
        };
        let id = u32::try_from(id).map_err(|_| Error::Format(format!("identity {id} too large")))?;
        out.push((id, entry.path()));
    }
    out.sort_by_key(|(id, _)| *id);
    Ok(out)
}

fn read_ignore_list(root: &Path) -> Result<BTreeSet<u32>> {
    let p = root.join(IGNORE_FILE);
    if !p.exists() {
        return Ok(BTreeSet::new());
    }
    fs::read_to_string(&p)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            let digits = l.strip_prefix("id").unwrap_or(l);
            digits
                .parse::<u32>()
                .map_err(|_| Error::Format(format!("{}: bad identity '{l}'", p.display())))
        })
        .collect()
}

/// Frame files in a camera folder, sorted by frame index.
fn frame_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name();
        if let Some(i) = name.to_str().and_then(|n| parse_prefixed(n, "frame", ".bin")) {
            files.push((i, entry.path()));
        }
    }
    files.sort_by_key(|(i, _)| *i);
    Ok(files.into_iter().map(|(_, p)| p).collect())
}

fn load_track(dir: &Path, format: DataFormat) -> Result<Track> {
    if !dir.is_dir() {
        return format_err(format!("missing camera track {}", dir.display()));
    }
    let frames = match format {
        DataFormat::Features => {
            let p = dir.join(FEATURE_FILE);
            if !p.exists() {
                return format_err(format!("missing {}", p.display()));
            }
            formats::load_features(&p)?
                .into_iter()
                .map(Frame::Feature)
                .collect()
        }
        DataFormat::Images => frame_files(dir)?
            .iter()
            .map(|p| {
                let f = StoredFrame::load(p)?;
                let data = f.data.iter().map(|&v| v as f64).collect();
                RawFrame::new(f.height, f.width, f.channels, data)
                    .map(Frame::Image)
                    .map_err(|e| match e {
                        Error::Format(m) => Error::Format(format!(
                            "{}: {m} (run the flow step on RGB datasets first)",
                            p.display()
                        )),
                        other => other,
                    })
            })
            .collect::<Result<Vec<_>>>()?,
    };
    if frames.is_empty() {
        return format_err(format!("camera track {} has no frames", dir.display()));
    }
    Track::new(frames)
}

fn frame_dims(f: &Frame) -> (usize, usize) {
    match f {
        Frame::Feature(v) => (v.len(), 0),
        Frame::Image(r) => (r.height(), r.width()),
    }
}

/// Loads a dataset tree. Identities in `ignore` or in `root/ignore.txt` are
/// skipped. Records are ordered by identity, then camera, then frame index.
pub fn load_dataset(
    root: &Path,
    format: DataFormat,
    ignore: &BTreeSet<u32>,
) -> Result<Vec<IdentityRecord>> {
    let mut skip = read_ignore_list(root)?;
    skip.extend(ignore);
    let dirs = identity_dirs(root)?;
    if dirs.is_empty() {
        warn!("no identity folders under {}; dataset is empty", root.display());
        return Ok(Vec::new());
    }
    let mut out = Vec::with_capacity(dirs.len());
    let mut dims: Option<(usize, usize)> = None;
    for (id, dir) in dirs {
        if skip.contains(&id) {
            continue;
        }
        let a = load_track(&dir.join(CAMERAS[0]), format)?;
        let b = load_track(&dir.join(CAMERAS[1]), format)?;
        for f in a.frames().iter().chain(b.frames()) {
            let d = frame_dims(f);
            match dims {
                None => dims = Some(d),
                Some(prev) if prev != d => {
                    return format_err(format!(
                        "identity {id}: frame size {d:?} differs from {prev:?}"
                    ))
                }
                _ => {}
            }
        }
        out.push(IdentityRecord { id, tracks: [a, b] });
    }
    Ok(out)
}

/// Writes records into a fresh tree layout under `root`.
pub fn save_dataset(root: &Path, dataset: &[IdentityRecord]) -> Result<()> {
    fs::create_dir_all(root)?;
    for rec in dataset {
        let idir = root.join(identity_dir_name(rec.id));
        for (cam, track) in CAMERAS.iter().zip(&rec.tracks) {
            let dir = idir.join(cam);
            fs::create_dir_all(&dir)?;
            save_track(&dir, track)?;
        }
    }
    Ok(())
}

fn save_track(dir: &Path, track: &Track) -> Result<()> {
    match &track.frames()[0] {
        Frame::Feature(_) => {
            let rows: Vec<Vec<f64>> = track
                .frames()
                .iter()
                .map(|f| match f {
                    Frame::Feature(v) => Ok(v.clone()),
                    Frame::Image(_) => format_err("track mixes features and images"),
                })
                .collect::<Result<_>>()?;
            formats::save_features(&dir.join(FEATURE_FILE), &rows)
        }
        Frame::Image(_) => {
            for (i, f) in track.frames().iter().enumerate() {
                let Frame::Image(img) = f else {
                    return format_err("track mixes features and images");
                };
                let data = img.data().iter().map(|&v| v as f32).collect();
                StoredFrame::new(img.height(), img.width(), crate::encoder::FRAME_CHANNELS, data)?
                    .save(&dir.join(frame_file_name(i)))?;
            }
            Ok(())
        }
    }
}

/// Saves raw stored frames (any channel count) for one camera folder.
pub fn save_stored_track(dir: &Path, frames: &[StoredFrame]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, f) in frames.iter().enumerate() {
        f.save(&dir.join(frame_file_name(i)))?;
    }
    Ok(())
}

pub fn load_stored_track(dir: &Path) -> Result<Vec<StoredFrame>> {
    if !dir.is_dir() {
        return format_err(format!("missing camera track {}", dir.display()));
    }
    let frames = frame_files(dir)?
        .iter()
        .map(|p| StoredFrame::load(p))
        .collect::<Result<Vec<_>>>()?;
    if frames.is_empty() {
        return format_err(format!("camera track {} has no frames", dir.display()));
    }
    Ok(frames)
}

/// Batch flow preprocessing: reads RGB frames under `input` and writes
/// 5-channel frames with normalized flow under `output`.
pub fn flow_tree(input: &Path, output: &Path, window: usize, clamp: f64) -> Result<usize> {
    use rayon::prelude::*;

    let skip = read_ignore_list(input)?;
    let dirs: Vec<(u32, PathBuf)> = identity_dirs(input)?
        .into_iter()
        .filter(|(id, _)| !skip.contains(id))
        .collect();
    if dirs.is_empty() {
        warn!("no identity folders under {}", input.display());
    }
    fs::create_dir_all(output)?;
    dirs.par_iter()
        .map(|(id, dir)| -> Result<()> {
            for cam in CAMERAS {
                let frames = load_stored_track(&dir.join(cam))?;
                let out = flow::flow_track(&frames, window, clamp)?;
                save_stored_track(&output.join(identity_dir_name(*id)).join(cam), &out)?;
            }
            Ok(())
        })
        .collect::<Result<Vec<()>>>()?;
    let mut meta = DatasetMeta::load(input)?.unwrap_or_default();
    meta.format = Some(DataFormat::Images);
    meta.channels = Some(5);
    meta.flow_window = Some(window);
    meta.flow_clamp = Some(clamp);
    meta.save(output)?;
    Ok(dirs.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes_and_determinism() {
        let s = make_split(4, 0, 1).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (2, 2));
        assert_eq!(s, make_split(4, 0, 1).unwrap());
        let s = make_split(7, 3, 9).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (3, 4));
        let all: BTreeSet<usize> = s.train.iter().chain(&s.test).cloned().collect();
        assert_eq!(all, (0..7).collect());
        assert!(matches!(make_split(1, 0, 0), Err(Error::Domain(_))));
    }

    #[test]
    fn test_frequency_over_twenty_trials() {
        let mut counts = vec![0; 200];
        for trial in 0..20 {
            for i in make_split(200, trial, 2024).unwrap().test {
                counts[i] += 1;
            }
        }
        let outside = counts.iter().filter(|&&c| !(8..=12).contains(&c)).count();
        let mean = counts.iter().sum::<usize>() as f64 / 200.0;
        assert_eq!(mean, 10.0);
        // Binomial(20, 1/2) leaves ~26% of identities outside 8..=12; allow ~3 sd.
        assert!(outside <= 70, "{outside} identities outside 8..=12");
    }

    #[test]
    fn prefixed_names() {
        assert_eq!(parse_prefixed("id0042", "id", ""), Some(42));
        assert_eq!(parse_prefixed("frame00003.bin", "frame", ".bin"), Some(3));
        assert_eq!(parse_prefixed("idx", "id", ""), None);
        assert_eq!(parse_prefixed("frame.bin", "frame", ".bin"), None);
    }
}
