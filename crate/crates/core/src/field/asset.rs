//! Binary asset format for trained fields.
//!
//! Little-endian layout:
//!
//! ```text
//! "VXSA" | u32 version | u8 kind (0 background, 1 object)
//! bounds min xyz, max xyz (6 x f64) | resolution (3 x u32) | voxel_size f64
//! u8 color mode (0 direct, 1 feature+MLP) | f64 density bias
//! density grid (f32 x nodes) | color/feature grid (f32 x nodes x channels)
//! u32 layer count, per layer: u32 inputs, u32 outputs, f32 weights, f32 biases
//! object only: canonical box size (3 x f64) | u8 symmetric
//! u32 CRC32 of everything above
//! ```

use std::path::Path;

use super::mlp::{ColorMlp, DenseLayer};
use super::{ColorMode, ObjectAsset, VoxelField};
use crate::error::{Error, Result};
use crate::geometry::{Aabb, Vec3};

pub const MAGIC: &[u8; 4] = b"VXSA";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Asset {
    Background(VoxelField<f32>),
    Object(ObjectAsset),
}

impl Asset {
    pub fn field(&self) -> &VoxelField<f32> {
        match self {
            Asset::Background(f) => f,
            Asset::Object(o) => &o.field,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Asset::Background(_) => "background",
            Asset::Object(_) => "object",
        }
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32s(&mut self, vs: &[f32]) {
        self.0.reserve(vs.len() * 4);
        for v in vs {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format(format!("unexpected end of data at byte {}", self.pos))),
        }
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("array too large".into()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn encode_asset(asset: &Asset) -> Vec<u8> {
    let field = asset.field();
    let mut w = Writer(Vec::with_capacity(64 + field.node_count() * 4 * (1 + field.channels())));
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.u8(match asset {
        Asset::Background(_) => 0,
        Asset::Object(_) => 1,
    });
    let b = field.bounds();
    for v in b.min.iter().chain(b.max.iter()) {
        w.f64(*v);
    }
    for n in field.resolution() {
        w.u32(n as u32);
    }
    w.f64(field.voxel_size());
    w.u8(match field.color_mode() {
        ColorMode::Direct => 0,
        ColorMode::FeatureMlp => 1,
    });
    w.f64(field.density_bias);
    w.f32s(&field.density);
    w.f32s(&field.color);
    match &field.mlp {
        None => w.u32(0),
        Some(mlp) => {
            w.u32(mlp.layers.len() as u32);
            for layer in &mlp.layers {
                w.u32(layer.inputs as u32);
                w.u32(layer.outputs as u32);
                w.f32s(&layer.weights);
                w.f32s(&layer.bias);
            }
        }
    }
    if let Asset::Object(obj) = asset {
        for v in obj.size().iter() {
            w.f64(*v);
        }
        w.u8(obj.symmetric as u8);
    }
    let crc = crc32fast::hash(&w.0);
    w.u32(crc);
    w.0
}

pub fn decode_asset(bytes: &[u8]) -> Result<Asset> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic bytes, not a voxel asset".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported asset version {version}")));
    }
    let kind = r.u8()?;
    let mut b = [0.0; 6];
    for v in &mut b {
        *v = r.f64()?;
    }
    let bounds = Aabb::new(Vec3::new(b[0], b[1], b[2]), Vec3::new(b[3], b[4], b[5]))
        .map_err(|e| Error::Format(e.to_string()))?;
    let mut resolution = [0usize; 3];
    for n in &mut resolution {
        *n = r.u32()? as usize;
    }
    let voxel_size = r.f64()?;
    let color_mode = match r.u8()? {
        0 => ColorMode::Direct,
        1 => ColorMode::FeatureMlp,
        m => return Err(Error::Format(format!("unknown color mode {m}"))),
    };
    let density_bias = r.f64()?;
    let nodes = resolution
        .iter()
        .try_fold(1usize, |acc, &n| acc.checked_mul(n))
        .ok_or_else(|| Error::Format("resolution overflow".into()))?;
    let density = r.f32s(nodes)?;
    let color = r.f32s(nodes * color_mode.channels())?;
    let layer_count = r.u32()? as usize;
    let mlp = if layer_count == 0 {
        None
    } else {
        let mut layers = Vec::with_capacity(layer_count);
        for _ in 0..layer_count {
            let inputs = r.u32()? as usize;
            let outputs = r.u32()? as usize;
            let weights = r.f32s(inputs * outputs)?;
            let bias = r.f32s(outputs)?;
            layers.push(DenseLayer {
                inputs,
                outputs,
                weights,
                bias,
            });
        }
        Some(ColorMlp { layers })
    };
    let field = VoxelField::from_parts(bounds, resolution, voxel_size, density, color_mode, color, mlp, density_bias);
    field.validate()?;
    let asset = match kind {
        0 => Asset::Background(field),
        1 => {
            let size = Vec3::new(r.f64()?, r.f64()?, r.f64()?);
            let symmetric = r.u8()? != 0;
            Asset::Object(ObjectAsset::new(field, size, symmetric).map_err(|e| Error::Format(e.to_string()))?)
        }
        k => return Err(Error::Format(format!("unknown asset kind {k}"))),
    };
    if r.pos != body.len() {
        return Err(Error::Format(format!("{} trailing bytes", body.len() - r.pos)));
    }
    Ok(asset)
}

pub fn save_asset(asset: &Asset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_asset(asset)).map_err(|e| Error::io(path, e))
}

pub fn load_asset(path: impl AsRef<Path>) -> Result<Asset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_asset(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_field(mode: ColorMode) -> VoxelField<f32> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut f = VoxelField::<f32>::new(Vec3::new(-1.0, -1.0, -0.5), 0.25, [9, 9, 5], mode).unwrap();
        f.density.iter_mut().for_each(|v| *v = rng.gen());
        f.color.iter_mut().for_each(|v| *v = rng.gen_range(-3.0..3.0));
        f.init_mlp(&mut rng);
        f
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        for mode in [ColorMode::Direct, ColorMode::FeatureMlp] {
            let bg = Asset::Background(random_field(mode));
            let back = decode_asset(&encode_asset(&bg)).unwrap();
            assert_eq!(bg, back);
            let obj = Asset::Object(ObjectAsset::new(random_field(mode), Vec3::new(1.0, 1.5, 0.5), true).unwrap());
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("obj.vxsa");
            save_asset(&obj, &path).unwrap();
            assert_eq!(load_asset(&path).unwrap(), obj);
        }
    }

    #[test]
    fn truncated_file_fails_checksum() {
        let bytes = encode_asset(&Asset::Background(random_field(ColorMode::Direct)));
        let cut = &bytes[..bytes.len() - 17];
        assert!(matches!(decode_asset(cut), Err(Error::Checksum { .. })));
    }

    #[test]
    fn wrong_magic_is_format_error() {
        let mut bytes = encode_asset(&Asset::Background(random_field(ColorMode::Direct)));
        bytes[0] = b'X';
        assert!(matches!(decode_asset(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn corrupted_payload_fails_checksum() {
        let mut bytes = encode_asset(&Asset::Background(random_field(ColorMode::Direct)));
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(decode_asset(&bytes), Err(Error::Checksum { .. })));
    }
}
