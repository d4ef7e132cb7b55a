//! Binary checkpoint: header, parameter manifest, then raw buffers.
//!
//! ```text
//! magic    8 bytes  "TRKCKPT\0"
//! version  u32
//! meta     u32 length + UTF-8 `key=value` lines, keys sorted
//! count    u32
//! manifest per parameter: u16 name length, name, u8 dtype (1 = f64),
//!          u8 rank, u32 per dim, u8 trainable
//! buffers  per parameter, little-endian f64 values in manifest order
//! ```

use std::collections::BTreeMap;
use std::io::{Cursor, Read};
use std::path::Path;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"TRKCKPT\0";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub manifest: Vec<ManifestEntry>,
    pub data: Vec<Vec<f64>>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, meta: BTreeMap<String, String>) -> Self {
        Self::from_store_filtered(store, meta, |_| true)
    }

    pub fn from_store_filtered(
        store: &ParamStore,
        meta: BTreeMap<String, String>,
        keep: impl Fn(&str) -> bool,
    ) -> Self {
        let mut manifest = Vec::new();
        let mut data = Vec::new();
        for p in store.iter().filter(|p| keep(&p.name)) {
            manifest.push(ManifestEntry { name: p.name.clone(), shape: p.value.shape.clone(), trainable: p.trainable });
            data.push(p.value.data.clone());
        }
        Checkpoint { meta, manifest, data }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.manifest.iter().map(|e| e.name.as_str())
    }

    pub fn tensor(&self, name: &str) -> Option<Tensor> {
        let i = self.manifest.iter().position(|e| e.name == name)?;
        Some(Tensor { shape: self.manifest[i].shape.clone(), data: self.data[i].clone() })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        let meta: String = self.meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        b.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        b.extend_from_slice(meta.as_bytes());
        b.extend_from_slice(&(self.manifest.len() as u32).to_le_bytes());
        for e in &self.manifest {
            b.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            b.extend_from_slice(e.name.as_bytes());
            b.push(DTYPE_F64);
            b.push(e.shape.len() as u8);
            for &d in &e.shape {
                b.extend_from_slice(&(d as u32).to_le_bytes());
            }
            b.push(e.trainable as u8);
        }
        for buf in &self.data {
            for v in buf {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let bad = |what: &str| Error::Checkpoint(format!("truncated or corrupt checkpoint ({what})"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("magic"))?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = read_u32(&mut r).map_err(|_| bad("version"))?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let meta_len = read_u32(&mut r).map_err(|_| bad("meta"))? as usize;
        let meta_bytes = read_vec(&mut r, meta_len).map_err(|_| bad("meta"))?;
        let meta_text = String::from_utf8(meta_bytes).map_err(|_| bad("meta utf-8"))?;
        let mut meta = BTreeMap::new();
        for line in meta_text.lines() {
            let (k, v) = line.split_once('=').ok_or_else(|| bad("meta line"))?;
            meta.insert(k.to_string(), v.to_string());
        }
        let count = read_u32(&mut r).map_err(|_| bad("count"))? as usize;
        let mut manifest = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let mut n = [0u8; 2];
            r.read_exact(&mut n).map_err(|_| bad("name"))?;
            let name = String::from_utf8(read_vec(&mut r, u16::from_le_bytes(n) as usize).map_err(|_| bad("name"))?)
                .map_err(|_| bad("name utf-8"))?;
            let mut hdr = [0u8; 2];
            r.read_exact(&mut hdr).map_err(|_| bad("dtype"))?;
            if hdr[0] != DTYPE_F64 {
                return Err(Error::Checkpoint(format!("parameter {name}: unsupported dtype {}", hdr[0])));
            }
            let shape = (0..hdr[1])
                .map(|_| read_u32(&mut r).map(|d| d as usize))
                .collect::<std::io::Result<Vec<_>>>()
                .map_err(|_| bad("shape"))?;
            let mut t = [0u8; 1];
            r.read_exact(&mut t).map_err(|_| bad("trainable"))?;
            manifest.push(ManifestEntry { name, shape, trainable: t[0] != 0 });
        }
        let mut data = Vec::with_capacity(manifest.len());
        for e in &manifest {
            let n: usize = e.shape.iter().product();
            let raw = read_vec(&mut r, n * 8).map_err(|_| bad("buffer"))?;
            data.push(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect());
        }
        if (r.position() as usize) != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Checkpoint { meta, manifest, data })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Overwrites every parameter of `store`; the manifests must match exactly.
    pub fn restore(&self, store: &mut ParamStore) -> Result<()> {
        let ours: Vec<_> = store.iter().map(|p| (p.name.as_str(), &p.value.shape)).collect();
        let theirs: Vec<_> = self.manifest.iter().map(|e| (e.name.as_str(), &e.shape)).collect();
        if ours != theirs {
            let diff = ours
                .iter()
                .zip(&theirs)
                .find(|(a, b)| a != b)
                .map(|(a, b)| format!("model has {} {:?}, checkpoint has {} {:?}", a.0, a.1, b.0, b.1))
                .unwrap_or_else(|| format!("model has {} parameters, checkpoint {}", ours.len(), theirs.len()));
            return Err(Error::Checkpoint(format!("manifest mismatch: {diff}")));
        }
        self.load_matching(store).map(|_| ())
    }

    /// Copies every checkpoint entry into the same-named parameter of
    /// `store` and verifies the copy bit for bit. Returns the names of
    /// store parameters the checkpoint does not cover.
    pub fn load_matching(&self, store: &mut ParamStore) -> Result<Vec<String>> {
        for (e, buf) in self.manifest.iter().zip(&self.data) {
            let id = store
                .id(&e.name)
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint parameter {} not in model", e.name)))?;
            let p = store.get_mut(id);
            if p.value.shape != e.shape {
                return Err(Error::Checkpoint(format!(
                    "parameter {}: model shape {:?}, checkpoint shape {:?}",
                    e.name, p.value.shape, e.shape
                )));
            }
            p.value.data.copy_from_slice(buf);
            if p.value.data.iter().zip(buf).any(|(a, b)| a.to_bits() != b.to_bits()) {
                return Err(Error::Checkpoint(format!("parameter {} not bit-identical after load", e.name)));
            }
        }
        let covered: std::collections::HashSet<&str> = self.names().collect();
        Ok(store.iter().filter(|p| !covered.contains(p.name.as_str())).map(|p| p.name.clone()).collect())
    }
}

fn read_u32(r: &mut Cursor<&[u8]>) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_vec(r: &mut Cursor<&[u8]>, n: usize) -> std::io::Result<Vec<u8>> {
    let remaining = r.get_ref().len() - r.position() as usize;
    if n > remaining {
        return Err(std::io::ErrorKind::UnexpectedEof.into());
    }
    let mut v = vec![0u8; n];
    r.read_exact(&mut v)?;
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        let mut rng = crate::seed::rng(1);
        s.add_uniform("enc.w", &[3, 2], 2, &mut rng);
        s.add_buffer("enc.rm", Tensor::full(&[2], 0.25));
        s.add_uniform("head.w", &[2, 6], 2, &mut rng);
        s
    }

    #[test]
    fn bytes_round_trip() {
        let mut meta = BTreeMap::new();
        meta.insert("kind".to_string(), "test".to_string());
        let c = Checkpoint::from_store(&store(), meta);
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        let mut s2 = store();
        s2.iter_mut().for_each(|p| p.value.data.iter_mut().for_each(|v| *v = 0.0));
        back.restore(&mut s2).unwrap();
        assert_eq!(s2, store());
    }

    #[test]
    fn rejects_mismatch_and_corruption() {
        let c = Checkpoint::from_store(&store(), BTreeMap::new());
        let mut other = ParamStore::new();
        other.add_zeros("enc.w", &[2, 3]);
        assert!(c.restore(&mut other).is_err());
        let b = c.to_bytes();
        assert!(Checkpoint::from_bytes(&b[..b.len() - 1]).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
    }

    #[test]
    fn subset_load_reports_uncovered() {
        let enc = Checkpoint::from_store_filtered(&store(), BTreeMap::new(), |n| n.starts_with("enc."));
        let mut fresh = ParamStore::new();
        let mut rng = crate::seed::rng(9);
        fresh.add_uniform("enc.w", &[3, 2], 2, &mut rng);
        fresh.add_buffer("enc.rm", Tensor::zeros(&[2]));
        fresh.add_uniform("head.w", &[2, 6], 2, &mut rng);
        let missing = enc.load_matching(&mut fresh).unwrap();
        assert_eq!(missing, vec!["head.w".to_string()]);
        assert_eq!(fresh.get(fresh.id("enc.w").unwrap()).value, enc.tensor("enc.w").unwrap());
    }
}
