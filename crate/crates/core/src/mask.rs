//! Square mask grids, resolution conversion, Laplacian edges and overlap.
//!
//! Masks persist as 8-bit grayscale PNG (0 background, 255 foreground).
//! Soft masks persist as a little-endian float blob: `"DMSK"`, `u32 r`,
//! `u32 r`, `u32 0`, then `r*r` `f32` values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::diff::laplacian_values;
use crate::error::{Error, Result};

/// Candidate rung sides, cheapest first.
pub const RUNG_SIDES: [usize; 4] = [14, 28, 56, 112];

/// Default binarisation threshold on the quarter-scaled Laplacian magnitude.
pub const EDGE_THRESHOLD: f32 = 0.2;

const BLOB_MAGIC: &[u8; 4] = b"DMSK";

/// An `r x r` grid of values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskGrid {
    side: usize,
    values: Vec<f32>,
    binary: bool,
}

/// Edge maps share the mask grid representation.
pub type EdgeMap = MaskGrid;

/// Axis-aligned window in continuous pixel coordinates: `[y0, y1) x [x0, x1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Window {
    pub y0: f64,
    pub x0: f64,
    pub y1: f64,
    pub x1: f64,
}

impl MaskGrid {
    pub fn new(side: usize, values: Vec<f32>, binary: bool) -> Result<Self> {
        if side == 0 || values.len() != side * side {
            return Err(Error::shape("mask", format!("{} values for a {side}x{side} grid", values.len())));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("mask values must lie in [0, 1]".into()));
        }
        if binary && values.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidArgument("binary mask holds non-binary values".into()));
        }
        Ok(Self { side, values, binary })
    }

    pub fn soft(side: usize, values: Vec<f32>) -> Result<Self> {
        Self::new(side, values, false)
    }

    pub fn binary_from_fn(side: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut values = Vec::with_capacity(side * side);
        for y in 0..side {
            for x in 0..side {
                values.push(if f(y, x) { 1.0 } else { 0.0 });
            }
        }
        Self { side, values, binary: true }
    }

    pub fn filled(side: usize, on: bool) -> Self {
        Self::binary_from_fn(side, |_, _| on)
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn is_binary(&self) -> bool {
        self.binary
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.values[y * self.side + x]
    }

    pub fn area(&self) -> f64 {
        self.values.iter().map(|&v| v as f64).sum()
    }

    /// Tight bounding box `(x, y, w, h)` of nonzero cells, if any.
    pub fn support_box(&self) -> Option<(usize, usize, usize, usize)> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..self.side {
            for x in 0..self.side {
                if self.get(y, x) > 0.0 {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        (x0 != usize::MAX).then(|| (x0, y0, x1 - x0 + 1, y1 - y0 + 1))
    }
}

/// Area-weighted average of `values` (`h x w`) over an `r x r` tiling of `window`.
pub fn area_pool(values: &[f32], h: usize, w: usize, window: Window, r: usize) -> Vec<f64> {
    let cell_h = (window.y1 - window.y0) / r as f64;
    let cell_w = (window.x1 - window.x0) / r as f64;
    let spans = |start: f64, cell: f64, limit: usize| -> Vec<Vec<(usize, f64)>> {
        (0..r)
            .map(|i| {
                let a = start + i as f64 * cell;
                let b = a + cell;
                let lo = a.floor().max(0.0) as usize;
                let hi = (b.ceil().max(0.0) as usize).min(limit);
                (lo..hi)
                    .filter_map(|p| {
                        let ov = (b.min(p as f64 + 1.0) - a.max(p as f64)).max(0.0);
                        (ov > 0.0).then_some((p, ov))
                    })
                    .collect()
            })
            .collect()
    };
    let rows = spans(window.y0, cell_h, h);
    let cols = spans(window.x0, cell_w, w);
    let area = cell_h * cell_w;
    let mut out = vec![0.0; r * r];
    for (i, row) in rows.iter().enumerate() {
        for (j, col) in cols.iter().enumerate() {
            let mut s = 0.0;
            for &(py, wy) in row {
                let line = &values[py * w..(py + 1) * w];
                for &(px, wx) in col {
                    s += wy * wx * line[px] as f64;
                }
            }
            out[i * r + j] = s / area;
        }
    }
    out
}

fn threshold_pooled(pooled: Vec<f64>, r: usize) -> MaskGrid {
    let values = pooled.into_iter().map(|v| if v >= 0.5 - 1e-12 { 1.0 } else { 0.0 }).collect();
    MaskGrid { side: r, values, binary: true }
}

/// Area-average pooling of a full-resolution binary mask to `r x r`, then a
/// 0.5 threshold with ties going to foreground.
pub fn downsample_gt(full: &MaskGrid, r: usize) -> Result<MaskGrid> {
    if r == 0 {
        return Err(Error::InvalidArgument("target resolution must be positive".into()));
    }
    let s = full.side as f64;
    let window = Window { y0: 0.0, x0: 0.0, y1: s, x1: s };
    Ok(threshold_pooled(area_pool(&full.values, full.side, full.side, window, r), r))
}

/// Box-aligned ground truth: the full mask sampled over `window` into `r x r`.
pub fn crop_window(full: &MaskGrid, window: Window, r: usize) -> Result<MaskGrid> {
    if r == 0 {
        return Err(Error::InvalidArgument("target resolution must be positive".into()));
    }
    if window.y1 <= window.y0 || window.x1 <= window.x0 {
        return Err(Error::InvalidArgument("empty crop window".into()));
    }
    Ok(threshold_pooled(area_pool(&full.values, full.side, full.side, window, r), r))
}

/// Quarter-scaled absolute Laplacian. Binary masks are thresholded into a
/// binary edge map; soft masks yield the clamped soft map.
pub fn laplacian_edge(mask: &MaskGrid, threshold: f32) -> EdgeMap {
    let lap = laplacian_values(&mask.values, mask.side, mask.side);
    let soft = lap.into_iter().map(|v| (v.abs() * 0.25).min(1.0));
    if mask.binary {
        MaskGrid {
            side: mask.side,
            values: soft.map(|v| if v >= threshold { 1.0 } else { 0.0 }).collect(),
            binary: true,
        }
    } else {
        MaskGrid { side: mask.side, values: soft.collect(), binary: false }
    }
}

/// Values at or above `theta` become foreground.
pub fn binarize(pred: &MaskGrid, theta: f32) -> MaskGrid {
    MaskGrid {
        side: pred.side,
        values: pred.values.iter().map(|&v| if v >= theta { 1.0 } else { 0.0 }).collect(),
        binary: true,
    }
}

/// Half-pixel bilinear resize to `r x r` with edge clamping.
pub fn resize_bilinear(mask: &MaskGrid, r: usize) -> MaskGrid {
    let n = mask.side;
    let scale = n as f64 / r as f64;
    let taps: Vec<(usize, usize, f32)> = (0..r)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, (src - i0 as f64) as f32)
        })
        .collect();
    let mut values = Vec::with_capacity(r * r);
    for &(y0, y1, ty) in &taps {
        for &(x0, x1, tx) in &taps {
            let top = mask.get(y0, x0) * (1.0 - tx) + mask.get(y0, x1) * tx;
            let bot = mask.get(y1, x0) * (1.0 - tx) + mask.get(y1, x1) * tx;
            values.push((top * (1.0 - ty) + bot * ty).clamp(0.0, 1.0));
        }
    }
    MaskGrid { side: r, values, binary: false }
}

/// Brings a prediction to side `r` (bilinear, then 0.5 threshold).
pub fn to_resolution(pred: &MaskGrid, r: usize) -> MaskGrid {
    if pred.side == r {
        return binarize(pred, 0.5);
    }
    binarize(&resize_bilinear(pred, r), 0.5)
}

/// Intersection over union of two binary masks; 1 when both are empty.
pub fn iou(a: &MaskGrid, b: &MaskGrid) -> Result<f64> {
    if a.side != b.side {
        return Err(Error::shape("iou", format!("resolution {} vs {}", a.side, b.side)));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.values.iter().zip(&b.values) {
        let (x, y) = (x >= 0.5, y >= 0.5);
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

pub fn save_png(mask: &MaskGrid, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = mask.values.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
    write_png(path, mask.side as u32, mask.side as u32, png::ColorType::Grayscale, &bytes)
}

/// Loads a grayscale PNG mask; pixels at or above 128 are foreground.
pub fn load_png(path: &Path) -> Result<MaskGrid> {
    let (w, h, channels, bytes) = read_png(path)?;
    if w != h || channels != 1 {
        return Err(Error::parse(
            path.display().to_string(),
            format!("expected square grayscale mask, got {w}x{h} with {channels} channels"),
        ));
    }
    Ok(MaskGrid {
        side: w as usize,
        values: bytes.iter().map(|&b| if b >= 128 { 1.0 } else { 0.0 }).collect(),
        binary: true,
    })
}

pub(crate) fn write_png(path: &Path, w: u32, h: u32, color: png::ColorType, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w, h);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let to_io = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
    let mut writer = enc.write_header().map_err(to_io)?;
    writer.write_image_data(bytes).map_err(to_io)?;
    writer.finish().map_err(to_io)
}

/// Returns `(width, height, channels, bytes)` for an 8-bit PNG.
pub(crate) fn read_png(path: &Path) -> Result<(u32, u32, usize, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let bad = |e: png::DecodingError| Error::parse(path.display().to_string(), e.to_string());
    let mut reader = decoder.read_info().map_err(bad)?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(bad)?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::parse(path.display().to_string(), "expected 8-bit PNG"));
    }
    let channels = info.color_type.samples();
    buf.truncate(info.buffer_size());
    Ok((info.width, info.height, channels, buf))
}

pub fn save_blob(mask: &MaskGrid, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let r = mask.side as u32;
    let mut bytes = Vec::with_capacity(16 + 4 * mask.values.len());
    bytes.extend_from_slice(BLOB_MAGIC);
    bytes.extend_from_slice(&r.to_le_bytes());
    bytes.extend_from_slice(&r.to_le_bytes());
    bytes.extend_from_slice(&0u32.to_le_bytes());
    for v in &mask.values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_blob(path: &Path) -> Result<MaskGrid> {
    let mut bytes = Vec::new();
    File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| Error::io(path, e))?;
    let what = path.display().to_string();
    if bytes.len() < 16 || &bytes[..4] != BLOB_MAGIC {
        return Err(Error::parse(what, "missing DMSK header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (r, r2) = (word(4), word(8));
    if r != r2 || r == 0 {
        return Err(Error::parse(what, format!("non-square or empty grid {r}x{r2}")));
    }
    if bytes.len() != 16 + 4 * r * r {
        return Err(Error::parse(what, format!("expected {} payload bytes, found {}", 4 * r * r, bytes.len() - 16)));
    }
    let values = bytes[16..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    MaskGrid::soft(r, values)
}
