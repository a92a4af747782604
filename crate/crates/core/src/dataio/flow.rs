//! Window-based Lucas-Kanade optical flow and its normalization into the
//! flow channels of a 5-channel frame.

use crate::dataio::formats::StoredFrame;
use crate::error::{dim_err, domain_err, Result};

pub const DEFAULT_WINDOW: usize = 5;
pub const DEFAULT_CLAMP: f64 = 8.0;
/// Smallest accepted eigenvalue of the normal matrix, per unit window area.
pub const CONDITION_PER_AREA: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return dim_err(format!("gray image {height}x{width} with {} values", data.len()));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let data = (0..height)
            .flat_map(|y| (0..width).map(move |x| (y, x)))
            .map(|(y, x)| f(y, x))
            .collect();
        Self {
            height,
            width,
            data,
        }
    }

    /// Rec. 601 luma of the first three channels.
    pub fn luma(frame: &StoredFrame) -> Result<Self> {
        if frame.channels < 3 {
            return dim_err(format!("luma needs 3 color channels, frame has {}", frame.channels));
        }
        Ok(Self::from_fn(frame.height, frame.width, |y, x| {
            0.299 * frame.at(y, x, 0) as f64
                + 0.587 * frame.at(y, x, 1) as f64
                + 0.114 * frame.at(y, x, 2) as f64
        }))
    }

    fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

/// Two-channel flow, `(u, v)` per pixel, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub height: usize,
    pub width: usize,
    pub data: Vec<[f64; 2]>,
}

impl FlowField {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![[0.0, 0.0]; height * width],
        }
    }

    pub fn at(&self, y: usize, x: usize) -> [f64; 2] {
        self.data[y * self.width + x]
    }
}

/// Central differences in the interior, one-sided at the borders.
fn gradients(img: &GrayImage) -> (Vec<f64>, Vec<f64>) {
    let (h, w) = (img.height, img.width);
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            gx[y * w + x] = if w == 1 {
                0.0
            } else if x == 0 {
                img.at(y, 1) - img.at(y, 0)
            } else if x == w - 1 {
                img.at(y, x) - img.at(y, x - 1)
            } else {
                0.5 * (img.at(y, x + 1) - img.at(y, x - 1))
            };
            gy[y * w + x] = if h == 1 {
                0.0
            } else if y == 0 {
                img.at(1, x) - img.at(0, x)
            } else if y == h - 1 {
                img.at(y, x) - img.at(y - 1, x)
            } else {
                0.5 * (img.at(y + 1, x) - img.at(y - 1, x))
            };
        }
    }
    (gx, gy)
}

/// Per-pixel least-squares flow from `a` to `b` over a square window.
///
/// Spatial gradients are averaged over both frames. Windows whose normal
/// matrix has its smallest eigenvalue below `CONDITION_PER_AREA * window^2`
/// get zero flow. Windows are clipped at the image border.
pub fn lucas_kanade(a: &GrayImage, b: &GrayImage, window: usize) -> Result<FlowField> {
    if a.height != b.height || a.width != b.width {
        return dim_err(format!(
            "frame sizes differ: {}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        ));
    }
    if window < 3 || window % 2 == 0 {
        return domain_err(format!("window must be odd and at least 3, got {window}"));
    }
    let (h, w) = (a.height, a.width);
    let (ax, ay) = gradients(a);
    let (bx, by) = gradients(b);
    let n = h * w;
    let mut ix = vec![0.0; n];
    let mut iy = vec![0.0; n];
    let mut it = vec![0.0; n];
    for i in 0..n {
        ix[i] = 0.5 * (ax[i] + bx[i]);
        iy[i] = 0.5 * (ay[i] + by[i]);
        it[i] = b.data[i] - a.data[i];
    }
    let r = window / 2;
    let threshold = CONDITION_PER_AREA * (window * window) as f64;
    let mut flow = FlowField::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let (mut sxx, mut sxy, mut syy, mut sxt, mut syt) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for yy in y.saturating_sub(r)..(y + r + 1).min(h) {
                for xx in x.saturating_sub(r)..(x + r + 1).min(w) {
                    let k = yy * w + xx;
                    sxx += ix[k] * ix[k];
                    sxy += ix[k] * iy[k];
                    syy += iy[k] * iy[k];
                    sxt += ix[k] * it[k];
                    syt += iy[k] * it[k];
                }
            }
            let tr = sxx + syy;
            let disc = ((sxx - syy) * (sxx - syy) + 4.0 * sxy * sxy).sqrt();
            let lambda_min = 0.5 * (tr - disc);
            if lambda_min < threshold {
                continue;
            }
            let det = sxx * syy - sxy * sxy;
            let u = (-syy * sxt + sxy * syt) / det;
            let v = (sxy * sxt - sxx * syt) / det;
            // + 0.0 folds a negative zero into +0
            flow.data[y * w + x] = [u + 0.0, v + 0.0];
        }
    }
    Ok(flow)
}

/// Clamps each component to `[-clamp, clamp]` and divides by `clamp`.
pub fn normalize_flow(flow: &FlowField, clamp: f64) -> Result<FlowField> {
    if !(clamp > 0.0) || !clamp.is_finite() {
        return domain_err(format!("flow clamp must be positive, got {clamp}"));
    }
    let data = flow
        .data
        .iter()
        .map(|[u, v]| [u.clamp(-clamp, clamp) / clamp, v.clamp(-clamp, clamp) / clamp])
        .collect();
    Ok(FlowField {
        height: flow.height,
        width: flow.width,
        data,
    })
}

/// Turns a track of RGB frames into 5-channel frames. Frame `t` carries the
/// flow from `t` to `t + 1`; the last frame repeats the previous flow and a
/// single-frame track gets zero flow.
pub fn flow_track(frames: &[StoredFrame], window: usize, clamp: f64) -> Result<Vec<StoredFrame>> {
    let grays = frames.iter().map(GrayImage::luma).collect::<Result<Vec<_>>>()?;
    let mut flows = Vec::with_capacity(frames.len());
    for t in 0..frames.len() {
        let f = if frames.len() == 1 {
            FlowField::zeros(grays[0].height, grays[0].width)
        } else if t + 1 < frames.len() {
            normalize_flow(&lucas_kanade(&grays[t], &grays[t + 1], window)?, clamp)?
        } else {
            normalize_flow(&lucas_kanade(&grays[t - 1], &grays[t], window)?, clamp)?
        };
        flows.push(f);
    }
    frames
        .iter()
        .zip(flows)
        .map(|(fr, fl)| {
            let mut data = Vec::with_capacity(fr.height * fr.width * 5);
            for y in 0..fr.height {
                for x in 0..fr.width {
                    for c in 0..3 {
                        data.push(fr.at(y, x, c));
                    }
                    let [u, v] = fl.at(y, x);
                    data.push(u as f32);
                    data.push(v as f32);
                }
            }
            StoredFrame::new(fr.height, fr.width, 5, data)
        })
        .collect()
}
