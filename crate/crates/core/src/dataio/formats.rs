//! Binary record formats. All integers are little-endian `u32`; every record
//! starts with a four-byte magic tag and a version word.
//!
//! | magic  | header after version    | payload                         |
//! |--------|-------------------------|---------------------------------|
//! | `SQFR` | height, width, channels | `f32`, row-major, interleaved   |
//! | `SQFT` | T, d                    | `f64`, one row per frame        |
//! | `SQPD` | count, dim              | `f64`, one row per descriptor   |

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::binio;
use crate::error::{dim_err, format_err, Result};

pub const FRAME_MAGIC: &[u8; 4] = b"SQFR";
pub const FEATURE_MAGIC: &[u8; 4] = b"SQFT";
pub const DESCRIPTOR_MAGIC: &[u8; 4] = b"SQPD";
pub const FORMAT_VERSION: u32 = 1;

/// An image frame as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredFrame {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl StoredFrame {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return dim_err("frame dimensions must be positive");
        }
        if data.len() != height * width * channels {
            return dim_err(format!(
                "frame {height}x{width}x{channels} does not match {} values",
                data.len()
            ));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        binio::write_magic(w, FRAME_MAGIC, FORMAT_VERSION)?;
        binio::write_u32(w, binio::to_u32(self.height, "height")?)?;
        binio::write_u32(w, binio::to_u32(self.width, "width")?)?;
        binio::write_u32(w, binio::to_u32(self.channels, "channels")?)?;
        binio::write_f32s(w, &self.data)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        binio::read_magic(r, FRAME_MAGIC, FORMAT_VERSION)?;
        let h = binio::read_u32(r)? as usize;
        let w = binio::read_u32(r)? as usize;
        let c = binio::read_u32(r)? as usize;
        if h == 0 || w == 0 || c == 0 {
            return format_err(format!("degenerate frame header {h}x{w}x{c}"));
        }
        let data = binio::read_f32s(r, h * w * c)?;
        if data.iter().any(|v| !v.is_finite()) {
            return format_err("non-finite pixel value");
        }
        binio::expect_eof(r)?;
        Self::new(h, w, c, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(fs::File::open(path)?))
    }
}

/// Writes a row matrix under the given magic; rows must share one width.
fn write_rows(w: &mut impl Write, magic: &[u8; 4], rows: &[Vec<f64>], what: &str) -> Result<()> {
    let dim = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != dim) {
        return dim_err(format!("{what}: rows of mixed width"));
    }
    binio::write_magic(w, magic, FORMAT_VERSION)?;
    binio::write_u32(w, binio::to_u32(rows.len(), "row count")?)?;
    binio::write_u32(w, binio::to_u32(dim, "row width")?)?;
    for r in rows {
        binio::write_f64s(w, r)?;
    }
    Ok(())
}

fn read_rows(r: &mut impl Read, magic: &[u8; 4], what: &str) -> Result<Vec<Vec<f64>>> {
    binio::read_magic(r, magic, FORMAT_VERSION)?;
    let n = binio::read_u32(r)? as usize;
    let d = binio::read_u32(r)? as usize;
    let rows = (0..n)
        .map(|_| {
            let row = binio::read_f64s(r, d)?;
            binio::check_finite(&row, what)?;
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    binio::expect_eof(r)?;
    Ok(rows)
}

pub fn write_features(w: &mut impl Write, frames: &[Vec<f64>]) -> Result<()> {
    write_rows(w, FEATURE_MAGIC, frames, "feature file")
}

pub fn read_features(r: &mut impl Read) -> Result<Vec<Vec<f64>>> {
    let rows = read_rows(r, FEATURE_MAGIC, "feature file")?;
    if rows.is_empty() {
        return format_err("feature file with zero frames");
    }
    if rows[0].is_empty() {
        return format_err("feature file with zero-width frames");
    }
    Ok(rows)
}

pub fn save_features(path: &Path, frames: &[Vec<f64>]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write_features(&mut w, frames)?;
    w.flush()?;
    Ok(())
}

pub fn load_features(path: &Path) -> Result<Vec<Vec<f64>>> {
    read_features(&mut BufReader::new(fs::File::open(path)?))
}

pub fn write_descriptors(w: &mut impl Write, rows: &[Vec<f64>]) -> Result<()> {
    write_rows(w, DESCRIPTOR_MAGIC, rows, "descriptor matrix")
}

pub fn read_descriptors(r: &mut impl Read) -> Result<Vec<Vec<f64>>> {
    read_rows(r, DESCRIPTOR_MAGIC, "descriptor matrix")
}

pub fn save_descriptors(path: &Path, rows: &[Vec<f64>]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write_descriptors(&mut w, rows)?;
    w.flush()?;
    Ok(())
}

pub fn load_descriptors(path: &Path) -> Result<Vec<Vec<f64>>> {
    read_descriptors(&mut BufReader::new(fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Error;

    #[test]
    fn frame_layout_is_exact() {
        let f = StoredFrame::new(1, 2, 1, vec![1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        f.write_to(&mut buf).unwrap();
        let mut expect = b"SQFR".to_vec();
        for v in [1u32, 1, 2, 1] {
            expect.extend_from_slice(&v.to_le_bytes());
        }
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        expect.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(buf, expect);
        assert_eq!(StoredFrame::read_from(&mut buf.as_slice()).unwrap(), f);
    }

    #[test]
    fn descriptor_layout_is_exact() {
        let rows = vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]];
        let mut buf = Vec::new();
        write_descriptors(&mut buf, &rows).unwrap();
        assert_eq!(&buf[..4], b"SQPD");
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(buf[12..16].try_into().unwrap()), 2);
        assert_eq!(buf.len(), 16 + 6 * 8);
        assert_eq!(read_descriptors(&mut buf.as_slice()).unwrap(), rows);
    }

    #[test]
    fn corrupt_records_are_format_errors() {
        let mut buf = Vec::new();
        write_features(&mut buf, &[vec![1.0, 2.0]]).unwrap();
        let mut bad = buf.clone();
        bad[1] = b'X';
        assert!(matches!(read_features(&mut bad.as_slice()), Err(Error::Format(_))));
        assert!(matches!(
            read_features(&mut &buf[..buf.len() - 3]),
            Err(Error::Format(_))
        ));
        let mut extra = buf.clone();
        extra.push(0);
        assert!(matches!(read_features(&mut extra.as_slice()), Err(Error::Format(_))));
        assert!(write_features(&mut Vec::new(), &[vec![1.0], vec![1.0, 2.0]]).is_err());
    }
}
