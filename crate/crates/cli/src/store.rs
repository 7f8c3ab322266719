//! Flat directory of assets keyed by the SHA-256 of their encoding.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use voxaug::field::asset::{decode_asset, encode_asset};
use voxaug::Asset;

use crate::exit::{Failure, MISSING_ASSET};

pub const EXTENSION: &str = "vxa";

pub struct AssetStore {
    dir: PathBuf,
}

impl AssetStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, Failure> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Failure::general(format!("{}: {e}", dir.display())))?;
        Ok(Self { dir })
    }

    pub fn path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.{EXTENSION}"))
    }

    /// Stores `asset` and returns its id, and whether it was already present.
    pub fn put(&self, asset: &Asset) -> Result<(String, bool), Failure> {
        let bytes = encode_asset(asset);
        let id = format!("{:x}", Sha256::digest(&bytes));
        let path = self.path(&id);
        if path.exists() {
            return Ok((id, true));
        }
        let tmp = self.dir.join(format!(".{id}.tmp"));
        std::fs::write(&tmp, &bytes)?;
        std::fs::rename(&tmp, &path)?;
        Ok((id, false))
    }

    pub fn get(&self, id: &str) -> Result<Asset, Failure> {
        let path = self.path(id);
        let bytes = std::fs::read(&path).map_err(|_| Failure::new(MISSING_ASSET, format!("asset {id} not found in {}", self.dir.display())))?;
        Ok(decode_asset(&bytes)?)
    }

    /// Accepts an asset file path or a store id. Files are imported into the store.
    pub fn resolve(&self, reference: &str) -> Result<(String, Asset), Failure> {
        let p = Path::new(reference);
        if p.is_file() {
            let asset = voxaug::load_asset(p)?;
            let (id, _) = self.put(&asset)?;
            return Ok((id, asset));
        }
        Ok((reference.to_owned(), self.get(reference)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use voxaug::{ColorMode, Vec3, VoxelField};

    fn asset(v: f32) -> Asset {
        let mut f = VoxelField::<f32>::new(Vec3::zeros(), 1.0, [2, 2, 2], ColorMode::Direct).unwrap();
        f.density[0] = v;
        Asset::Background(f)
    }

    #[test]
    fn content_addressed_and_cached() {
        let dir = tempfile::tempdir().unwrap();
        let store = AssetStore::open(dir.path()).unwrap();
        let (a, hit) = store.put(&asset(1.0)).unwrap();
        assert!(!hit);
        assert_eq!(a.len(), 64);
        let (again, hit) = store.put(&asset(1.0)).unwrap();
        assert!(hit);
        assert_eq!(a, again);
        let (b, _) = store.put(&asset(2.0)).unwrap();
        assert_ne!(a, b);
        assert_eq!(store.get(&a).unwrap(), asset(1.0));
        assert_eq!(store.get("missing").unwrap_err().code, MISSING_ASSET);
    }

    #[test]
    fn resolves_paths_and_ids() {
        let dir = tempfile::tempdir().unwrap();
        let store = AssetStore::open(dir.path().join("store")).unwrap();
        let file = dir.path().join("x.vxa");
        voxaug::save_asset(&asset(3.0), &file).unwrap();
        let (id, a) = store.resolve(file.to_str().unwrap()).unwrap();
        assert_eq!(a, asset(3.0));
        assert!(store.path(&id).exists());
        assert_eq!(store.resolve(&id).unwrap().1, asset(3.0));
    }
}
