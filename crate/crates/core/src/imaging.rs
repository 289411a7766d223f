//! Frame preprocessing: bilinear downscale of raw conveyor frames, cutting
//! overlapping square segments, and training-time augmentation.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 8-bit RGB frame, interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RawImage {
    pub fn new(width: usize, height: usize) -> Self {
        RawImage {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut img = Self::new(width, height);
        for px in img.data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * 3 + c]
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

pub fn load_png(path: &Path) -> Result<RawImage> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let img_err = |msg: String| Error::Image {
        path: path.to_path_buf(),
        msg,
    };
    let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| img_err(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| img_err("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| img_err(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let data = match info.color_type {
        png::ColorType::Rgb => buf[..w * h * 3].to_vec(),
        png::ColorType::Rgba => buf[..w * h * 4]
            .chunks_exact(4)
            .flat_map(|p| [p[0], p[1], p[2]])
            .collect(),
        png::ColorType::Grayscale => buf[..w * h].iter().flat_map(|&g| [g, g, g]).collect(),
        png::ColorType::GrayscaleAlpha => buf[..w * h * 2]
            .chunks_exact(2)
            .flat_map(|p| [p[0], p[0], p[0]])
            .collect(),
        other => return Err(img_err(format!("unsupported colour type {other:?}"))),
    };
    Ok(RawImage {
        width: w,
        height: h,
        data,
    })
}

pub fn save_png(img: &RawImage, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), img.width as u32, img.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let img_err = |e: png::EncodingError| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    };
    let mut w = enc.write_header().map_err(img_err)?;
    w.write_image_data(&img.data).map_err(img_err)?;
    w.finish().map_err(img_err)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentAnchor {
    /// Segments start at column 0; leftover columns on the right are unused.
    Left,
    /// Leftover columns are split between both sides.
    Centered,
}

/// Frame and segment sizes for one camera setup.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    pub raw_width: usize,
    pub raw_height: usize,
    pub patch_width: usize,
    pub patch_height: usize,
    pub segment_size: usize,
    pub stride: usize,
    pub segment_count: usize,
    pub anchor: SegmentAnchor,
}

impl Geometry {
    /// Plant camera: 1024x400 frames, 573x224 patches, seven 224 px
    /// segments at stride 56.
    pub const PLANT: Geometry = Geometry {
        raw_width: 1024,
        raw_height: 400,
        patch_width: 573,
        patch_height: 224,
        segment_size: 224,
        stride: 56,
        segment_count: 7,
        anchor: SegmentAnchor::Left,
    };

    /// Desk-scale analogue for synthetic 64x64 frames: 64x32 patches cut
    /// into three 32 px segments at stride 16.
    pub const DESK: Geometry = Geometry {
        raw_width: 64,
        raw_height: 64,
        patch_width: 64,
        patch_height: 32,
        segment_size: 32,
        stride: 16,
        segment_count: 3,
        anchor: SegmentAnchor::Left,
    };

    pub fn validate(&self) -> Result<()> {
        let span = self.segment_size + (self.segment_count.max(1) - 1) * self.stride;
        if self.segment_count == 0
            || self.segment_size == 0
            || self.segment_size > self.patch_height
            || span > self.patch_width
        {
            return Err(Error::precondition(format!(
                "segments ({} x {} px, stride {}) do not fit a {}x{} patch",
                self.segment_count,
                self.segment_size,
                self.stride,
                self.patch_width,
                self.patch_height
            )));
        }
        Ok(())
    }

    pub fn segment_offsets(&self) -> Vec<usize> {
        let span = self.segment_size + (self.segment_count - 1) * self.stride;
        let margin = match self.anchor {
            SegmentAnchor::Left => 0,
            SegmentAnchor::Centered => (self.patch_width - span) / 2,
        };
        (0..self.segment_count)
            .map(|k| margin + k * self.stride)
            .collect()
    }
}

/// Downscaled frame, channel-major `[3][h][w]`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl PatchImage {
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }
}

/// Square crop, channel-major `[3][s][s]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub size: usize,
    pub offset_x: usize,
    pub pixels: Vec<f64>,
}

/// Source coordinate and blend weight for each output index, pixel-centre
/// aligned.
fn bilinear_taps(src_len: usize, dst_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = src_len as f64 / dst_len as f64;
    (0..dst_len)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src_len - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// Bilinear resample of an 8-bit frame into a `[0, 1]` patch.
pub fn downscale(raw: &RawImage, geom: &Geometry) -> Result<PatchImage> {
    if raw.width != geom.raw_width || raw.height != geom.raw_height || raw.data.len() != raw.width * raw.height * 3 {
        return Err(Error::shape(format!(
            "expected a {}x{}x3 frame, got {}x{} ({} bytes)",
            geom.raw_width,
            geom.raw_height,
            raw.width,
            raw.height,
            raw.data.len()
        )));
    }
    let (w, h) = (geom.patch_width, geom.patch_height);
    let xt = bilinear_taps(raw.width, w);
    let yt = bilinear_taps(raw.height, h);
    let mut data = vec![0f32; 3 * w * h];
    for c in 0..3 {
        for (y, &(y0, y1, fy)) in yt.iter().enumerate() {
            for (x, &(x0, x1, fx)) in xt.iter().enumerate() {
                let p = |xx: usize, yy: usize| raw.get(xx, yy, c) as f64 / 255.0;
                let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
                let bot = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
                let v = top * (1.0 - fy) + bot * fy;
                data[(c * h + y) * w + x] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Ok(PatchImage {
        width: w,
        height: h,
        data,
    })
}

pub fn extract_segments(patch: &PatchImage, geom: &Geometry) -> Result<Vec<Segment>> {
    geom.validate()?;
    if patch.width != geom.patch_width || patch.height != geom.patch_height {
        return Err(Error::shape(format!(
            "expected a {}x{} patch, got {}x{}",
            geom.patch_width, geom.patch_height, patch.width, patch.height
        )));
    }
    let s = geom.segment_size;
    let y0 = (patch.height - s) / 2;
    Ok(geom
        .segment_offsets()
        .into_iter()
        .map(|ox| {
            let mut pixels = Vec::with_capacity(3 * s * s);
            for c in 0..3 {
                for y in 0..s {
                    let row = (c * patch.height + y0 + y) * patch.width + ox;
                    pixels.extend(patch.data[row..row + s].iter().map(|&v| v as f64));
                }
            }
            Segment {
                size: s,
                offset_x: ox,
                pixels,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Flip {
    None,
    Horizontal,
    Vertical,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraw {
    pub flip: Flip,
    pub brightness: f64,
}

pub const BRIGHTNESS_RANGE: (f64, f64) = (0.5, 1.0);

impl AugmentDraw {
    pub fn identity() -> Self {
        AugmentDraw {
            flip: Flip::None,
            brightness: 1.0,
        }
    }

    pub fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let flip = match rng.random_range(0..3u8) {
            0 => Flip::None,
            1 => Flip::Horizontal,
            _ => Flip::Vertical,
        };
        let brightness = rng.random_range(BRIGHTNESS_RANGE.0..=BRIGHTNESS_RANGE.1);
        AugmentDraw { flip, brightness }
    }
}

pub fn apply_augment(seg: &Segment, draw: AugmentDraw) -> Segment {
    let s = seg.size;
    let mut pixels = vec![0.0; seg.pixels.len()];
    for c in 0..3 {
        for y in 0..s {
            for x in 0..s {
                let (sy, sx) = match draw.flip {
                    Flip::None => (y, x),
                    Flip::Horizontal => (y, s - 1 - x),
                    Flip::Vertical => (s - 1 - y, x),
                };
                let v = seg.pixels[(c * s + sy) * s + sx] * draw.brightness;
                pixels[(c * s + y) * s + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    Segment {
        size: s,
        offset_x: seg.offset_x,
        pixels,
    }
}

/// Random flip (none / horizontal / vertical, equally likely) followed by a
/// brightness factor drawn from `[0.5, 1]`.
pub fn augment(seg: &Segment, seed: u64) -> Segment {
    apply_augment(seg, AugmentDraw::from_seed(seed))
}

/// Writes segments side by side as one PNG, for eyeballing.
pub fn dump_segments_png(segments: &[Segment], path: &Path) -> Result<()> {
    let s = segments.first().map(|g| g.size).unwrap_or(0);
    let gap = 2;
    let width = segments.len() * (s + gap);
    let mut img = RawImage::new(width.max(1), s.max(1));
    for (k, seg) in segments.iter().enumerate() {
        for y in 0..s {
            for x in 0..s {
                let px = |c: usize| (seg.pixels[(c * s + y) * s + x] * 255.0).round() as u8;
                img.put(k * (s + gap) + x, y, [px(0), px(1), px(2)]);
            }
        }
    }
    save_png(&img, path)
}
