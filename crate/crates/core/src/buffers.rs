//! Multi-channel frame buffers and their on-disk encodings (8-bit sRGB PNG,
//! 16-bit PNG, little-endian PFM).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::kernel::CompositeResult;
use crate::math::Vec3;
use crate::scene::SEG_BITS;

pub const NO_HIT: u8 = 255;

#[derive(Clone, Debug, PartialEq)]
pub struct FrameBuffers {
    pub width: u32,
    pub height: u32,
    pub rgb: Vec<[f64; 3]>,
    /// Metres along the ray; 0 where nothing was hit.
    pub depth: Vec<f64>,
    /// World space.
    pub normal: Vec<[f64; 3]>,
    pub intensity: Vec<f64>,
    /// Composited segmentation-bit features before decoding.
    pub seg_features: Vec<[f64; SEG_BITS]>,
    /// 0..63, or [`NO_HIT`].
    pub seg_id: Vec<u8>,
    pub alpha: Vec<f64>,
}

impl FrameBuffers {
    pub fn new(width: u32, height: u32) -> Self {
        let n = width as usize * height as usize;
        Self {
            width,
            height,
            rgb: vec![[0.0; 3]; n],
            depth: vec![0.0; n],
            normal: vec![[0.0; 3]; n],
            intensity: vec![0.0; n],
            seg_features: vec![[0.0; SEG_BITS]; n],
            seg_id: vec![NO_HIT; n],
            alpha: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.rgb.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rgb.is_empty()
    }

    pub fn index(&self, i: u32, j: u32) -> usize {
        j as usize * self.width as usize + i as usize
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width as usize, self.height as usize)
    }

    /// Stores a composite plus background; `seg_id` is left for decoding.
    pub fn set(&mut self, idx: usize, r: &CompositeResult, background: &[f64; 3]) {
        let t = 1.0 - r.accumulated_alpha;
        self.rgb[idx] = [
            r.rgb[0] + t * background[0],
            r.rgb[1] + t * background[1],
            r.rgb[2] + t * background[2],
        ];
        self.depth[idx] = r.depth;
        self.normal[idx] = r.normal.into();
        self.intensity[idx] = r.intensity;
        self.seg_features[idx] = r.seg_features;
        self.alpha[idx] = r.accumulated_alpha;
    }

    pub fn normal_at(&self, idx: usize) -> Vec3 {
        Vec3::from(self.normal[idx])
    }

    pub fn mean_rgb(&self) -> [f64; 3] {
        let mut m = [0.0; 3];
        for p in &self.rgb {
            for c in 0..3 {
                m[c] += p[c];
            }
        }
        let n = self.len().max(1) as f64;
        m.map(|v| v / n)
    }

    /// Largest per-channel absolute rgb difference.
    pub fn max_rgb_diff(&self, other: &FrameBuffers) -> f64 {
        self.rgb
            .iter()
            .zip(&other.rgb)
            .flat_map(|(a, b)| (0..3).map(move |c| (a[c] - b[c]).abs()))
            .fold(0.0, f64::max)
    }
}

pub fn srgb_encode(linear: f64) -> f64 {
    let v = linear.clamp(0.0, 1.0);
    if v <= 0.003_130_8 {
        12.92 * v
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn write_png(path: &Path, w: u32, h: u32, color: png::ColorType, depth: png::BitDepth, data: &[u8]) -> Result<()> {
    let file = create(path)?;
    let mut enc = png::Encoder::new(file, w, h);
    enc.set_color(color);
    enc.set_depth(depth);
    if color == png::ColorType::Rgb {
        enc.set_source_srgb(png::SrgbRenderingIntent::Perceptual);
    }
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::Image(e.to_string()))?;
    writer
        .write_image_data(data)
        .map_err(|e| Error::Image(e.to_string()))?;
    writer.finish().map_err(|e| Error::Image(e.to_string()))
}

/// 8-bit RGB, linear values encoded with the sRGB transfer curve.
pub fn write_rgb_png(path: impl AsRef<Path>, fb: &FrameBuffers) -> Result<()> {
    let data: Vec<u8> = fb
        .rgb
        .iter()
        .flat_map(|p| p.map(|v| (srgb_encode(v) * 255.0).round() as u8))
        .collect();
    write_png(path.as_ref(), fb.width, fb.height, png::ColorType::Rgb, png::BitDepth::Eight, &data)
}

/// 16-bit greyscale segmentation IDs (255 = no hit).
pub fn write_seg_png(path: impl AsRef<Path>, fb: &FrameBuffers) -> Result<()> {
    let data: Vec<u8> = fb
        .seg_id
        .iter()
        .flat_map(|&id| (id as u16).to_be_bytes())
        .collect();
    write_png(
        path.as_ref(),
        fb.width,
        fb.height,
        png::ColorType::Grayscale,
        png::BitDepth::Sixteen,
        &data,
    )
}

pub fn read_png16(path: impl AsRef<Path>) -> Result<(u32, u32, Vec<u16>)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(file);
    let mut reader = decoder.read_info().map_err(|e| Error::Image(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Image(e.to_string()))?;
    if info.bit_depth != png::BitDepth::Sixteen || info.color_type != png::ColorType::Grayscale {
        return Err(Error::Image("expected 16-bit greyscale".into()));
    }
    let vals = buf[..info.buffer_size()]
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect();
    Ok((info.width, info.height, vals))
}

/// Little-endian PFM with `channels` of 1 or 3, rows stored bottom to top.
pub fn write_pfm(path: impl AsRef<Path>, width: u32, height: u32, channels: usize, data: &[f32]) -> Result<()> {
    let path = path.as_ref();
    assert!(channels == 1 || channels == 3);
    assert_eq!(data.len(), width as usize * height as usize * channels);
    let mut w = create(path)?;
    let tag = if channels == 3 { "PF" } else { "Pf" };
    let io = |e| Error::io(path, e);
    write!(w, "{tag}\n{width} {height}\n-1.0\n").map_err(io)?;
    let row = width as usize * channels;
    for j in (0..height as usize).rev() {
        for v in &data[j * row..(j + 1) * row] {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<(u32, u32, usize, Vec<f32>)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let io = |e| Error::io(path, e);
    let mut line = String::new();
    r.read_line(&mut line).map_err(io)?;
    let channels = match line.trim() {
        "PF" => 3,
        "Pf" => 1,
        other => return Err(Error::Image(format!("bad PFM tag `{other}`"))),
    };
    line.clear();
    r.read_line(&mut line).map_err(io)?;
    let dims: Vec<u32> = line
        .split_whitespace()
        .filter_map(|t| t.parse().ok())
        .collect();
    let [width, height] = dims[..] else {
        return Err(Error::Image("bad PFM dimensions".into()));
    };
    line.clear();
    r.read_line(&mut line).map_err(io)?;
    let scale: f64 = line
        .trim()
        .parse()
        .map_err(|_| Error::Image("bad PFM scale".into()))?;
    let little = scale < 0.0;
    let row = width as usize * channels;
    let mut rows = vec![0f32; row * height as usize];
    let mut buf = [0u8; 4];
    for j in (0..height as usize).rev() {
        for v in &mut rows[j * row..(j + 1) * row] {
            r.read_exact(&mut buf).map_err(io)?;
            *v = if little {
                f32::from_le_bytes(buf)
            } else {
                f32::from_be_bytes(buf)
            };
        }
    }
    Ok((width, height, channels, rows))
}

/// Image channels that can be written to disk.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Channel {
    Rgb,
    Depth,
    Normal,
    Intensity,
    Seg,
    Alpha,
}

impl Channel {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s.trim() {
            "rgb" => Self::Rgb,
            "depth" => Self::Depth,
            "normal" => Self::Normal,
            "intensity" => Self::Intensity,
            "seg" => Self::Seg,
            "alpha" => Self::Alpha,
            _ => return None,
        })
    }

    pub fn file_name(self) -> &'static str {
        match self {
            Self::Rgb => "rgb.png",
            Self::Depth => "depth.pfm",
            Self::Normal => "normal.pfm",
            Self::Intensity => "intensity.pfm",
            Self::Seg => "seg.png",
            Self::Alpha => "alpha.pfm",
        }
    }
}

/// Writes one channel into `dir` and returns the file path.
pub fn write_channel(dir: &Path, fb: &FrameBuffers, ch: Channel) -> Result<std::path::PathBuf> {
    let path = dir.join(ch.file_name());
    let scalar = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<_>>();
    match ch {
        Channel::Rgb => write_rgb_png(&path, fb)?,
        Channel::Seg => write_seg_png(&path, fb)?,
        Channel::Depth => write_pfm(&path, fb.width, fb.height, 1, &scalar(&fb.depth))?,
        Channel::Intensity => write_pfm(&path, fb.width, fb.height, 1, &scalar(&fb.intensity))?,
        Channel::Alpha => write_pfm(&path, fb.width, fb.height, 1, &scalar(&fb.alpha))?,
        Channel::Normal => {
            let data: Vec<f32> = fb.normal.iter().flat_map(|n| n.map(|v| v as f32)).collect();
            write_pfm(&path, fb.width, fb.height, 3, &data)?
        }
    }
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pfm_round_trip_preserves_orientation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.pfm");
        let data: Vec<f32> = (0..6).map(|v| v as f32 * 0.5).collect();
        write_pfm(&p, 3, 2, 1, &data).unwrap();
        let (w, h, c, back) = read_pfm(&p).unwrap();
        assert_eq!((w, h, c), (3, 2, 1));
        assert_eq!(back, data);
    }

    #[test]
    fn seg_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("seg.png");
        let mut fb = FrameBuffers::new(4, 2);
        fb.seg_id[1] = 5;
        fb.seg_id[7] = 63;
        write_seg_png(&p, &fb).unwrap();
        let (w, h, ids) = read_png16(&p).unwrap();
        assert_eq!((w, h), (4, 2));
        let expected: Vec<u16> = fb.seg_id.iter().map(|&v| v as u16).collect();
        assert_eq!(ids, expected);
    }

    #[test]
    fn srgb_endpoints() {
        assert_eq!(srgb_encode(0.0), 0.0);
        assert!((srgb_encode(1.0) - 1.0).abs() < 1e-12);
        assert_eq!(srgb_encode(2.0), srgb_encode(1.0));
    }

    #[test]
    fn background_fills_transmittance() {
        let mut fb = FrameBuffers::new(1, 1);
        let r = CompositeResult {
            rgb: [0.25, 0.0, 0.0],
            accumulated_alpha: 0.5,
            ..Default::default()
        };
        fb.set(0, &r, &[1.0, 1.0, 0.0]);
        assert_eq!(fb.rgb[0], [0.75, 0.5, 0.0]);
    }
}
