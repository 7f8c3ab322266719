//! Binary PPM (8-bit RGB) and PGM (16-bit depth in millimeters) images.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::render::Rgb;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: u32,
    pub height: u32,
    /// Row-major RGB triplets.
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![0; width as usize * height as usize * 3],
        }
    }

    pub fn from_colors(width: u32, height: u32, colors: &[Rgb]) -> Self {
        assert_eq!(colors.len(), width as usize * height as usize);
        Self {
            width,
            height,
            data: colors.iter().flat_map(|c| c.map(quantize)).collect(),
        }
    }

    pub fn pixel(&self, index: usize) -> Rgb {
        let p = &self.data[index * 3..index * 3 + 3];
        [p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0]
    }

    pub fn to_colors(&self) -> Vec<Rgb> {
        (0..self.pixel_count()).map(|i| self.pixel(i)).collect()
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn encode_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn decode_ppm(bytes: &[u8]) -> Result<Self> {
        let (magic, width, height, maxval, body) = parse_pnm_header(bytes)?;
        if magic != "P6" || maxval != 255 {
            return Err(Error::Format(format!("expected 8-bit P6 image, got {magic} maxval {maxval}")));
        }
        let n = width as usize * height as usize * 3;
        if body.len() < n {
            return Err(Error::Format("truncated PPM data".into()));
        }
        Ok(Self {
            width,
            height,
            data: body[..n].to_vec(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.encode_ppm())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::decode_ppm(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Rounds a `[0, 1]` intensity to 8 bits.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Depth map in millimeters; 0 marks invalid pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DepthMap {
    pub width: u32,
    pub height: u32,
    pub millimeters: Vec<u16>,
}

impl DepthMap {
    pub fn from_meters(width: u32, height: u32, depth: &[f64], valid: &[bool]) -> Self {
        let millimeters = depth
            .iter()
            .zip(valid)
            .map(|(&d, &ok)| {
                if ok && d.is_finite() && d > 0.0 {
                    (d * 1000.0).round().clamp(1.0, u16::MAX as f64) as u16
                } else {
                    0
                }
            })
            .collect();
        Self {
            width,
            height,
            millimeters,
        }
    }

    /// Depth in meters, `None` for invalid pixels.
    pub fn meters(&self, index: usize) -> Option<f64> {
        match self.millimeters[index] {
            0 => None,
            mm => Some(mm as f64 / 1000.0),
        }
    }

    pub fn encode_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n65535\n", self.width, self.height).into_bytes();
        for v in &self.millimeters {
            out.extend_from_slice(&v.to_be_bytes());
        }
        out
    }

    pub fn decode_pgm(bytes: &[u8]) -> Result<Self> {
        let (magic, width, height, maxval, body) = parse_pnm_header(bytes)?;
        if magic != "P5" || maxval != 65535 {
            return Err(Error::Format(format!("expected 16-bit P5 depth map, got {magic} maxval {maxval}")));
        }
        let n = width as usize * height as usize;
        if body.len() < 2 * n {
            return Err(Error::Format("truncated PGM data".into()));
        }
        Ok(Self {
            width,
            height,
            millimeters: body[..2 * n]
                .chunks_exact(2)
                .map(|c| u16::from_be_bytes([c[0], c[1]]))
                .collect(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.encode_pgm())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::decode_pgm(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn parse_pnm_header(bytes: &[u8]) -> Result<(String, u32, u32, u32, &[u8])> {
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated image header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let num = |s: &str| s.parse::<u32>().map_err(|_| Error::Format(format!("bad header number {s:?}")));
    Ok((
        fields[0].clone(),
        num(&fields[1])?,
        num(&fields[2])?,
        num(&fields[3])?,
        bytes.get(pos..).unwrap_or(&[]),
    ))
}

pub fn mse(a: &[Rgb], b: &[Rgb]) -> f64 {
    assert_eq!(a.len(), b.len());
    let sum: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (0..3).map(|k| (x[k] - y[k]).powi(2)).sum::<f64>())
        .sum();
    sum / (3 * a.len().max(1)) as f64
}

/// Peak signal-to-noise ratio in dB for intensities in `[0, 1]`.
pub fn psnr(a: &[Rgb], b: &[Rgb]) -> f64 {
    -10.0 * mse(a, b).max(1e-20).log10()
}
