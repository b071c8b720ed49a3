//! Greyscale fingerprint images: 13 protocol rows by 53 feature columns.
//!
//! Normalization is per image. The cross-protocol block is min-max scaled
//! over all 13 x 4 cells, the packet and timing groups are min-max scaled
//! per row within the group, and port columns use the fixed scale
//! `value / 65535 * 255`. A constant block or row maps to 0. All rounding
//! is half-up.

use std::fs;
use std::io::{BufRead, BufWriter, Cursor, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::capture::ProtocolLane;
use crate::flow::{LaneWindowStats, CROSS_PROTOCOL, FEATURE_COUNT, PACKET_GROUP, PORT_GROUP, TIMING_GROUP};

pub const IMAGE_ROWS: usize = ProtocolLane::COUNT;
pub const IMAGE_COLS: usize = FEATURE_COUNT;
pub const PIXEL_COUNT: usize = IMAGE_ROWS * IMAGE_COLS;
pub const INDEX_FILE: &str = "index.jsonl";

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image must be {IMAGE_COLS}x{IMAGE_ROWS} 8-bit greyscale, got {0}")]
    Dimensions(String),
    #[error("png decode: {0}")]
    Decode(#[from] png::DecodingError),
    #[error("png encode: {0}")]
    Encode(#[from] png::EncodingError),
    #[error("image path `{0}` does not follow <device>/dayNN/wMM.png")]
    Layout(PathBuf),
    #[error("image index: {0}")]
    Index(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ImageError + '_ {
    move |source| ImageError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Which device, day and window an image describes.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ImageKey {
    pub device_id: String,
    pub day_index: u32,
    pub window_index: usize,
}

impl ImageKey {
    pub fn new(device_id: impl Into<String>, day_index: u32, window_index: usize) -> Self {
        Self {
            device_id: device_id.into(),
            day_index,
            window_index,
        }
    }

    /// `<device>/dayNN/wMM.png`, relative to an image root.
    pub fn relative_path(&self) -> PathBuf {
        PathBuf::from(&self.device_id)
            .join(format!("day{:02}", self.day_index))
            .join(format!("w{:02}.png", self.window_index))
    }

    /// Recover a key from the last three components of an image path.
    pub fn from_path(path: &Path) -> Result<Self, ImageError> {
        let bad = || ImageError::Layout(path.to_path_buf());
        let mut comps = path.components().rev().map(|c| c.as_os_str().to_str());
        let file = comps.next().flatten().ok_or_else(bad)?;
        let day = comps.next().flatten().ok_or_else(bad)?;
        let device = comps.next().flatten().ok_or_else(bad)?;
        let window = file
            .strip_prefix('w')
            .and_then(|s| s.strip_suffix(".png"))
            .and_then(|s| s.parse().ok())
            .ok_or_else(bad)?;
        let day_index = day
            .strip_prefix("day")
            .and_then(|s| s.parse().ok())
            .ok_or_else(bad)?;
        Ok(Self::new(device, day_index, window))
    }
}

/// 13 x 53 greyscale fingerprint of one device-window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FingerprintImage {
    pub key: ImageKey,
    pixels: Vec<u8>,
}

impl FingerprintImage {
    pub fn new(key: ImageKey, pixels: Vec<u8>) -> Result<Self, ImageError> {
        if pixels.len() != PIXEL_COUNT {
            return Err(ImageError::Dimensions(format!("{} pixels", pixels.len())));
        }
        Ok(Self { key, pixels })
    }

    /// Row-major pixel buffer, lane-major rows.
    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixel(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * IMAGE_COLS + col]
    }

    pub fn row(&self, row: usize) -> &[u8] {
        &self.pixels[row * IMAGE_COLS..(row + 1) * IMAGE_COLS]
    }

    /// Fully black or fully white: carries no information.
    pub fn is_degenerate(&self) -> bool {
        is_degenerate(&self.pixels)
    }
}

pub fn is_degenerate(pixels: &[u8]) -> bool {
    pixels.iter().all(|&p| p == 0) || pixels.iter().all(|&p| p == 255)
}

fn round_half_up(x: f64) -> u8 {
    (x + 0.5).floor().clamp(0.0, 255.0) as u8
}

fn min_max_scale(value: f64, lo: f64, hi: f64) -> u8 {
    if hi > lo {
        round_half_up((value - lo) / (hi - lo) * 255.0)
    } else {
        0
    }
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

/// Port value to pixel on the fixed 0..=65535 scale.
pub fn port_pixel(port: f64) -> u8 {
    round_half_up(port / 65535.0 * 255.0)
}

/// Pixels for one window's 13 lane statistics.
pub fn render_pixels(stats: &[LaneWindowStats; ProtocolLane::COUNT]) -> Vec<u8> {
    let mut px = vec![0u8; PIXEL_COUNT];

    let (lo, hi) = bounds(stats.iter().flat_map(|s| s.values()[CROSS_PROTOCOL].iter().copied()));
    for (row, s) in stats.iter().enumerate() {
        for c in CROSS_PROTOCOL {
            px[row * IMAGE_COLS + c] = min_max_scale(s.get(c), lo, hi);
        }
    }

    let per_row = |px: &mut [u8], cols: Range<usize>| {
        for (row, s) in stats.iter().enumerate() {
            let (lo, hi) = bounds(s.values()[cols.clone()].iter().copied());
            for c in cols.clone() {
                px[row * IMAGE_COLS + c] = min_max_scale(s.get(c), lo, hi);
            }
        }
    };
    per_row(&mut px, PACKET_GROUP);
    per_row(&mut px, TIMING_GROUP);

    for (row, s) in stats.iter().enumerate() {
        for c in PORT_GROUP {
            px[row * IMAGE_COLS + c] = port_pixel(s.get(c));
        }
    }
    px
}

pub fn render_image(stats: &[LaneWindowStats; ProtocolLane::COUNT], key: ImageKey) -> FingerprintImage {
    FingerprintImage {
        key,
        pixels: render_pixels(stats),
    }
}

/// Encode pixels as an 8-bit greyscale PNG.
pub fn encode_png(pixels: &[u8]) -> Result<Vec<u8>, ImageError> {
    if pixels.len() != PIXEL_COUNT {
        return Err(ImageError::Dimensions(format!("{} pixels", pixels.len())));
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, IMAGE_COLS as u32, IMAGE_ROWS as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header()?;
        w.write_image_data(pixels)?;
        w.finish()?;
    }
    Ok(out)
}

/// Decode a PNG, insisting on 53x13 8-bit greyscale.
pub fn decode_png(bytes: &[u8]) -> Result<Vec<u8>, ImageError> {
    let limits = png::Limits { bytes: 1 << 20 };
    let decoder = png::Decoder::new_with_limits(Cursor::new(bytes), limits);
    let mut reader = decoder.read_info()?;
    let info = reader.info();
    let (w, h, color, depth) = (info.width, info.height, info.color_type, info.bit_depth);
    if w as usize != IMAGE_COLS
        || h as usize != IMAGE_ROWS
        || color != png::ColorType::Grayscale
        || depth != png::BitDepth::Eight
    {
        return Err(ImageError::Dimensions(format!("{w}x{h} {color:?} {depth:?}")));
    }
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(PIXEL_COUNT)];
    let frame = reader.next_frame(&mut buf)?;
    buf.truncate(frame.buffer_size());
    if buf.len() != PIXEL_COUNT {
        return Err(ImageError::Dimensions(format!("{} decoded bytes", buf.len())));
    }
    Ok(buf)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ImageError> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Store an image under `root` following the `<device>/dayNN/wMM.png` layout.
pub fn store_image(root: &Path, image: &FingerprintImage) -> Result<PathBuf, ImageError> {
    let path = root.join(image.key.relative_path());
    write_atomic(&path, &encode_png(&image.pixels)?)?;
    Ok(path)
}

/// Load an image; its key is taken from the path layout.
pub fn load_image(path: &Path) -> Result<FingerprintImage, ImageError> {
    let key = ImageKey::from_path(path)?;
    let bytes = fs::read(path).map_err(io_err(path))?;
    FingerprintImage::new(key, decode_png(&bytes)?)
}

/// One line of the sidecar index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub device_id: String,
    pub day: u32,
    pub window: usize,
    /// Relative to the image root.
    pub path: PathBuf,
    pub degenerate: bool,
}

impl IndexEntry {
    pub fn for_image(image: &FingerprintImage) -> Self {
        Self {
            device_id: image.key.device_id.clone(),
            day: image.key.day_index,
            window: image.key.window_index,
            path: image.key.relative_path(),
            degenerate: image.is_degenerate(),
        }
    }

    pub fn key(&self) -> ImageKey {
        ImageKey::new(self.device_id.clone(), self.day, self.window)
    }
}

/// Write `<root>/index.jsonl`, sorted by (device, day, window).
pub fn write_index(root: &Path, entries: &[IndexEntry]) -> Result<(), ImageError> {
    let mut sorted = entries.to_vec();
    sorted.sort_by(|a, b| (&a.device_id, a.day, a.window).cmp(&(&b.device_id, b.day, b.window)));
    let mut buf = BufWriter::new(Vec::new());
    for e in &sorted {
        let line = serde_json::to_string(e).map_err(|e| ImageError::Index(e.to_string()))?;
        writeln!(buf, "{line}").map_err(io_err(root))?;
    }
    let bytes = buf.into_inner().map_err(|e| ImageError::Index(e.to_string()))?;
    write_atomic(&root.join(INDEX_FILE), &bytes)
}

pub fn parse_index<R: BufRead>(reader: R) -> Result<Vec<IndexEntry>, ImageError> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| ImageError::Index(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: IndexEntry =
            serde_json::from_str(&line).map_err(|e| ImageError::Index(format!("line {}: {e}", n + 1)))?;
        out.push(entry);
    }
    Ok(out)
}

pub fn read_index(root: &Path) -> Result<Vec<IndexEntry>, ImageError> {
    let path = root.join(INDEX_FILE);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    parse_index(&bytes[..])
}
