//! On-disk cache of extracted feature maps.
//!
//! Layout: one binary tensor file per entry plus `index.csv` with columns
//! `image_id,tap,timestep,backend_version,file`. A tensor file is the
//! magic `OAFM`, then `channels, height, width` as little-endian `u32`,
//! then the values as little-endian `f32`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DiffusionFeatureMap, FeatureRequest, GenerativeBackend};
use crate::annotation::ImageId;
use crate::error::{Error, Result};
use crate::seed::hash_str;

const MAGIC: &[u8; 4] = b"OAFM";
const INDEX: &str = "index.csv";

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FeatureKey {
    pub image_id: ImageId,
    pub tap: String,
    pub timestep: u32,
    pub backend_version: String,
}

impl FeatureKey {
    fn file_name(&self) -> String {
        format!(
            "{}_{}_{}_{:016x}.bin",
            self.image_id,
            self.tap,
            self.timestep,
            hash_str(&self.backend_version)
        )
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexRow {
    image_id: u64,
    tap: String,
    timestep: u32,
    backend_version: String,
    file: String,
}

#[derive(Debug)]
pub struct FeatureCache {
    dir: PathBuf,
    index: BTreeMap<FeatureKey, String>,
}

impl FeatureCache {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut index = BTreeMap::new();
        let index_path = dir.join(INDEX);
        if index_path.exists() {
            let mut r = csv::Reader::from_path(&index_path)?;
            for row in r.deserialize::<IndexRow>() {
                let row = row?;
                index.insert(
                    FeatureKey {
                        image_id: ImageId(row.image_id),
                        tap: row.tap,
                        timestep: row.timestep,
                        backend_version: row.backend_version,
                    },
                    row.file,
                );
            }
        }
        Ok(Self { dir, index })
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn get(&self, key: &FeatureKey) -> Result<Option<DiffusionFeatureMap>> {
        match self.index.get(key) {
            Some(file) => read_tensor(&self.dir.join(file)).map(Some),
            None => Ok(None),
        }
    }

    pub fn put(&mut self, key: FeatureKey, map: &DiffusionFeatureMap) -> Result<()> {
        let file = key.file_name();
        write_tensor(&self.dir.join(&file), map)?;
        self.index.insert(key, file);
        self.write_index()
    }

    /// Returns the cached map or extracts, stores and returns it.
    pub fn get_or_extract(
        &mut self,
        backend: &dyn GenerativeBackend,
        image_id: ImageId,
        req: &FeatureRequest,
    ) -> Result<DiffusionFeatureMap> {
        let key = FeatureKey {
            image_id,
            tap: req.tap.clone(),
            timestep: req.timestep,
            backend_version: backend.capabilities()?.version,
        };
        if let Some(hit) = self.get(&key)? {
            return Ok(hit);
        }
        let map = backend.extract_features(req)?;
        self.put(key, &map)?;
        Ok(map)
    }

    fn write_index(&self) -> Result<()> {
        let path = self.dir.join(INDEX);
        let mut w = csv::Writer::from_path(&path)?;
        for (k, file) in &self.index {
            w.serialize(IndexRow {
                image_id: k.image_id.0,
                tap: k.tap.clone(),
                timestep: k.timestep,
                backend_version: k.backend_version.clone(),
                file: file.clone(),
            })?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        Ok(())
    }
}

pub fn write_tensor(path: &Path, map: &DiffusionFeatureMap) -> Result<()> {
    let mut bytes = Vec::with_capacity(16 + map.values().len() * 4);
    bytes.extend_from_slice(MAGIC);
    for d in [map.channels(), map.height(), map.width()] {
        bytes.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in map.values() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<DiffusionFeatureMap> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |message: &str| Error::Parse {
        offset: 0,
        message: format!("{}: {message}", path.display()),
    };
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(bad("not a feature tensor file"));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
    let (c, h, w) = (dim(0), dim(1), dim(2));
    let body = &bytes[16..];
    if body.len() != c * h * w * 4 {
        return Err(bad("tensor body length does not match header"));
    }
    let values = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    DiffusionFeatureMap::new(c, h, w, values)
}
