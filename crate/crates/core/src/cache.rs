//! On-disk cache of invariant densities.
//!
//! Records are JSON files named by the SHA-256 of the parameters that
//! determine them.  Writes go to a temporary file that is renamed into place,
//! so readers never see partial records.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::grid::{Mesh, MeshSpec};
use crate::map::MapParams;
use crate::transfer::{density, DensityMethod, DensityOptions, DensityRecord};

pub const SCHEMA_VERSION: u32 = 1;
pub const CACHE_DIR_ENV: &str = "PMLAB_CACHE_DIR";

#[derive(Serialize)]
struct KeyRepr {
    schema: u32,
    alpha: u64,
    size: usize,
    orbit_len: usize,
    x_min: u64,
    tol: u64,
    method: DensityMethod,
}

#[derive(Serialize, Deserialize)]
struct Envelope {
    schema_version: u32,
    key: String,
    record: DensityRecord,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn cache_key(p: &MapParams, spec: &MeshSpec, opts: &DensityOptions) -> String {
    let k = KeyRepr {
        schema: SCHEMA_VERSION,
        alpha: p.alpha().to_bits(),
        size: spec.size,
        orbit_len: spec.orbit_len,
        x_min: spec.x_min.to_bits(),
        tol: opts.tol.to_bits(),
        method: opts.method,
    };
    let bytes = serde_json::to_vec(&k).expect("key serializes");
    sha256_hex(&bytes)
}

#[derive(Clone, Debug)]
pub struct DensityCache {
    dir: PathBuf,
}

impl DensityCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        DensityCache { dir: dir.into() }
    }

    /// `$PMLAB_CACHE_DIR`, else `.pmlab-cache` in the working directory.
    pub fn from_env() -> Self {
        let dir = std::env::var_os(CACHE_DIR_ENV).map_or_else(|| PathBuf::from(".pmlab-cache"), PathBuf::from);
        DensityCache::new(dir)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("density-{key}.json"))
    }

    /// A cached record on exactly this mesh, if present and readable.
    pub fn load(&self, p: &MapParams, mesh: &Arc<Mesh>, opts: &DensityOptions) -> Option<DensityRecord> {
        let key = cache_key(p, &mesh.spec(), opts);
        let text = fs::read_to_string(self.path(&key)).ok()?;
        let env: Envelope = serde_json::from_str(&text).ok()?;
        if env.schema_version != SCHEMA_VERSION || env.key != key || !env.record.mesh().same_as(mesh) {
            return None;
        }
        Some(env.record)
    }

    pub fn store(&self, rec: &DensityRecord, opts: &DensityOptions) -> Result<PathBuf> {
        fs::create_dir_all(&self.dir)?;
        let key = cache_key(&rec.params, &rec.mesh().spec(), opts);
        let target = self.path(&key);
        let tmp = self.dir.join(format!(".density-{key}.{}.tmp", std::process::id()));
        let env = Envelope { schema_version: SCHEMA_VERSION, key, record: rec.clone() };
        {
            let mut f = fs::File::create(&tmp)?;
            serde_json::to_writer(&mut f, &env)?;
            f.flush()?;
            f.sync_all()?;
        }
        fs::rename(&tmp, &target)?;
        Ok(target)
    }

    /// Returns the record and whether it came from the cache.
    pub fn get_or_compute(
        &self,
        p: &MapParams,
        mesh: &Arc<Mesh>,
        opts: &DensityOptions,
    ) -> Result<(DensityRecord, bool)> {
        if let Some(r) = self.load(p, mesh, opts) {
            return Ok((r, true));
        }
        let r = density(p, mesh, opts)?;
        if r.converged {
            self.store(&r, opts)?;
        }
        Ok((r, false))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_key_sensitivity() {
        let dir = tempfile::tempdir().unwrap();
        let cache = DensityCache::new(dir.path());
        let p = MapParams::new(0.2).unwrap();
        let mesh = Mesh::standard(&p, 256).unwrap();
        let opts = DensityOptions { tol: 1e-12, ..Default::default() };
        let (a, hit) = cache.get_or_compute(&p, &mesh, &opts).unwrap();
        assert!(!hit);
        let (b, hit) = cache.get_or_compute(&p, &mesh, &opts).unwrap();
        assert!(hit);
        assert_eq!(a.density.values(), b.density.values());
        assert_eq!(a.iterations, b.iterations);

        let other = DensityOptions { tol: 1e-11, ..opts };
        assert_ne!(cache_key(&p, &mesh.spec(), &opts), cache_key(&p, &mesh.spec(), &other));
        assert!(cache.load(&p, &mesh, &other).is_none());
        let q = MapParams::new(0.21).unwrap();
        assert_ne!(cache_key(&p, &mesh.spec(), &opts), cache_key(&q, &mesh.spec(), &opts));
        let leftovers = fs::read_dir(dir.path()).unwrap().filter(|e| {
            e.as_ref().unwrap().file_name().to_string_lossy().ends_with(".tmp")
        });
        assert_eq!(leftovers.count(), 0);
    }

    #[test]
    fn corrupt_entries_are_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let cache = DensityCache::new(dir.path());
        let p = MapParams::new(0.0).unwrap();
        let mesh = Mesh::standard(&p, 64).unwrap();
        let opts = DensityOptions::default();
        let key = cache_key(&p, &mesh.spec(), &opts);
        fs::write(cache.path(&key), "{not json").unwrap();
        assert!(cache.load(&p, &mesh, &opts).is_none());
        let (_, hit) = cache.get_or_compute(&p, &mesh, &opts).unwrap();
        assert!(!hit);
        assert!(cache.load(&p, &mesh, &opts).is_some());
    }
}
