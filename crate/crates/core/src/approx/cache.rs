//! On-disk cache of approximation results.
//!
//! Layout: `<root>/<model_id>/<layer_name>/<key-digest>/` holding
//! `a.wtn1`, `b.wtn1`, `r.wtn1`, `trajectory.csv`, optional
//! `checkpoints/step_<n>_{a,b}.wtn1`, and `meta.json`. The key digest is a
//! SHA-256 of every input that influences the result. `meta.json` records the
//! SHA-256 of each payload file; a mismatch on load moves the entry into
//! `<root>/.quarantine/` and reports a miss.
//!
//! Entries are written to a temporary sibling directory and renamed into
//! place, so readers never see a partial entry.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, OnceLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{read_trajectory_csv, write_trajectory_csv, ApproxConfig, ApproxResult, FactorCheckpoint, TrajectoryPoint};
use crate::approx::model::Role;
use crate::error::{Error, Result};
use crate::optim::AdamConfig;
use crate::tensor::{Dtype, Matrix};
use crate::wtn;

const META_FILE: &str = "meta.json";
const META_FORMAT: u32 = 1;

/// Every input that determines an approximation result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheKey {
    pub w0_hash: String,
    pub rank: usize,
    pub steps: usize,
    pub seed: u64,
    pub lr: f64,
    pub step_size: usize,
    pub gamma: f64,
    pub init_mu: f64,
    pub init_sigma: f64,
    pub adam: AdamConfig,
}

impl CacheKey {
    /// Key for `cfg` with a resolved init sigma.
    pub fn new(w0_hash: &str, cfg: &ApproxConfig, init_sigma: f64) -> Self {
        CacheKey {
            w0_hash: w0_hash.to_string(),
            rank: cfg.rank,
            steps: cfg.steps,
            seed: cfg.seed,
            lr: cfg.schedule.base_lr,
            step_size: cfg.schedule.step_size,
            gamma: cfg.schedule.gamma,
            init_mu: cfg.init_mu,
            init_sigma,
            adam: cfg.adam,
        }
    }

    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("cache key serializes");
        hex::encode(Sha256::digest(&json))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct CheckpointMeta {
    step: usize,
    mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CacheMeta {
    format: u32,
    model_id: String,
    layer_name: String,
    role: Role,
    key: CacheKey,
    key_digest: String,
    final_mse: f64,
    final_frobenius_sq: f64,
    checkpoints: Vec<CheckpointMeta>,
    /// File name → SHA-256 of its bytes.
    files: BTreeMap<String, String>,
    created_at: String,
}

/// A persisted approximation, as returned by store and lookup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub model_id: String,
    pub layer_name: String,
    pub role: Role,
    pub w0_hash: String,
    pub rank: usize,
    pub steps: usize,
    pub seed: u64,
    pub key: CacheKey,
    pub key_digest: String,
    pub dir: PathBuf,
    pub a_path: PathBuf,
    pub b_path: PathBuf,
    pub residual_path: PathBuf,
    pub trajectory_path: PathBuf,
    pub final_mse: f64,
    pub created_at: String,
    /// Digest over the key and every payload file; independent of timestamps.
    pub content_digest: String,
}

/// A verified cache entry together with its tensors.
#[derive(Debug, Clone)]
pub struct CacheHit {
    pub entry: CacheEntry,
    pub a: Matrix,
    pub b: Matrix,
    pub residual: Matrix,
    pub trajectory: Vec<TrajectoryPoint>,
    pub checkpoints: Vec<FactorCheckpoint>,
}

#[derive(Debug, Clone)]
pub struct ApproxCache {
    root: PathBuf,
}

fn sanitize(component: &str) -> String {
    let s: String = component
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-') { c } else { '_' })
        .collect();
    match s.as_str() {
        "" | "." | ".." => format!("_{s}"),
        _ => s,
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn content_digest(key_digest: &str, files: &BTreeMap<String, String>) -> String {
    let mut h = Sha256::new();
    h.update(key_digest.as_bytes());
    for (name, digest) in files {
        h.update(b"\0");
        h.update(name.as_bytes());
        h.update(b"=");
        h.update(digest.as_bytes());
    }
    hex::encode(h.finalize())
}

fn checkpoint_file(step: usize, factor: &str) -> String {
    format!("checkpoints/step_{step}_{factor}.wtn1")
}

fn key_lock(path: &Path) -> Arc<Mutex<()>> {
    static LOCKS: OnceLock<Mutex<HashMap<PathBuf, Arc<Mutex<()>>>>> = OnceLock::new();
    let mut map = LOCKS.get_or_init(Default::default).lock().unwrap_or_else(|e| e.into_inner());
    map.entry(path.to_path_buf()).or_default().clone()
}

impl ApproxCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        ApproxCache { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn entry_dir(&self, model_id: &str, layer_name: &str, key_digest: &str) -> PathBuf {
        self.root
            .join(sanitize(model_id))
            .join(sanitize(layer_name))
            .join(key_digest)
    }

    pub fn quarantine_dir(&self) -> PathBuf {
        self.root.join(".quarantine")
    }

    /// Persists `result` under its key and returns the stored entry.
    pub fn store(&self, model_id: &str, layer_name: &str, role: Role, result: &ApproxResult) -> Result<CacheEntry> {
        let sigma = result
            .config
            .init_sigma
            .ok_or_else(|| Error::invalid("approximation result has no resolved init sigma"))?;
        let key = CacheKey::new(&result.w0_hash, &result.config, sigma);
        let key_digest = key.digest();
        let final_dir = self.entry_dir(model_id, layer_name, &key_digest);
        let parent = final_dir.parent().expect("entry dir has a parent");
        fs::create_dir_all(parent).map_err(|e| Error::io(format!("create {}", parent.display()), e))?;

        static COUNTER: AtomicU64 = AtomicU64::new(0);
        let tmp = parent.join(format!(
            ".tmp-{key_digest}-{}-{}",
            std::process::id(),
            COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        let written = self.write_payload(&tmp, model_id, layer_name, role, &key, &key_digest, result);
        let meta = match written {
            Ok(meta) => meta,
            Err(e) => {
                let _ = fs::remove_dir_all(&tmp);
                return Err(e);
            }
        };

        let lock = key_lock(&final_dir);
        let _guard = lock.lock().unwrap_or_else(|e| e.into_inner());
        if final_dir.exists() {
            fs::remove_dir_all(&final_dir).map_err(|e| Error::io(format!("replace {}", final_dir.display()), e))?;
        }
        fs::rename(&tmp, &final_dir).map_err(|e| {
            let _ = fs::remove_dir_all(&tmp);
            Error::io(format!("publish {}", final_dir.display()), e)
        })?;
        Ok(entry_from_meta(&final_dir, meta))
    }

    #[allow(clippy::too_many_arguments)]
    fn write_payload(
        &self,
        dir: &Path,
        model_id: &str,
        layer_name: &str,
        role: Role,
        key: &CacheKey,
        key_digest: &str,
        result: &ApproxResult,
    ) -> Result<CacheMeta> {
        fs::create_dir_all(dir.join("checkpoints")).map_err(|e| Error::io(format!("create {}", dir.display()), e))?;
        let mut files = BTreeMap::new();
        let mut put_tensor = |name: String, m: &Matrix| -> Result<()> {
            let bytes = wtn::encode(m, Dtype::F64);
            let path = dir.join(&name);
            fs::write(&path, &bytes).map_err(|e| Error::io(format!("write {}", path.display()), e))?;
            files.insert(name, sha256_hex(&bytes));
            Ok(())
        };
        put_tensor("a.wtn1".into(), &result.a)?;
        put_tensor("b.wtn1".into(), &result.b)?;
        put_tensor("r.wtn1".into(), &result.residual)?;
        for ck in &result.checkpoints {
            put_tensor(checkpoint_file(ck.step, "a"), &ck.a)?;
            put_tensor(checkpoint_file(ck.step, "b"), &ck.b)?;
        }
        let traj_path = dir.join("trajectory.csv");
        write_trajectory_csv(&traj_path, &result.trajectory)?;
        let traj_bytes = fs::read(&traj_path).map_err(|e| Error::io(format!("read {}", traj_path.display()), e))?;
        files.insert("trajectory.csv".into(), sha256_hex(&traj_bytes));

        let meta = CacheMeta {
            format: META_FORMAT,
            model_id: model_id.to_string(),
            layer_name: layer_name.to_string(),
            role,
            key: key.clone(),
            key_digest: key_digest.to_string(),
            final_mse: result.final_mse,
            final_frobenius_sq: result.final_frobenius_sq,
            checkpoints: result
                .checkpoints
                .iter()
                .map(|c| CheckpointMeta { step: c.step, mse: c.mse })
                .collect(),
            files,
            created_at: chrono::Utc::now().to_rfc3339(),
        };
        let meta_path = dir.join(META_FILE);
        fs::write(&meta_path, serde_json::to_vec_pretty(&meta)?)
            .map_err(|e| Error::io(format!("write {}", meta_path.display()), e))?;
        Ok(meta)
    }

    /// Looks up `key`; corrupt entries are quarantined and reported as misses.
    ///
    /// A hit also requires every step in `checkpoint_steps` to be stored.
    pub fn lookup(
        &self,
        model_id: &str,
        layer_name: &str,
        key: &CacheKey,
        checkpoint_steps: &[usize],
    ) -> Result<Option<CacheHit>> {
        let dir = self.entry_dir(model_id, layer_name, &key.digest());
        if !dir.join(META_FILE).exists() {
            return Ok(None);
        }
        match self.load_verified(&dir, key) {
            Ok(hit) => {
                let missing = checkpoint_steps
                    .iter()
                    .filter(|&&s| s <= key.steps)
                    .any(|s| !hit.checkpoints.iter().any(|c| c.step == *s));
                Ok(if missing { None } else { Some(hit) })
            }
            Err(Error::Corrupt { path, reason }) => {
                log::warn!("quarantining cache entry {}: {reason}", path.display());
                self.quarantine(&dir)?;
                Ok(None)
            }
            Err(e) => Err(e),
        }
    }

    fn load_verified(&self, dir: &Path, key: &CacheKey) -> Result<CacheHit> {
        let corrupt = |reason: String| Error::Corrupt {
            path: dir.to_path_buf(),
            reason,
        };
        let meta_bytes = fs::read(dir.join(META_FILE)).map_err(|e| corrupt(format!("unreadable meta: {e}")))?;
        let meta: CacheMeta = serde_json::from_slice(&meta_bytes).map_err(|e| corrupt(format!("bad meta: {e}")))?;
        if meta.format != META_FORMAT {
            return Err(corrupt(format!("unknown meta format {}", meta.format)));
        }
        if &meta.key != key || meta.key_digest != key.digest() {
            return Err(corrupt("stored key does not match its directory".into()));
        }
        let mut blobs = HashMap::new();
        for (name, expected) in &meta.files {
            let bytes = fs::read(dir.join(name)).map_err(|e| corrupt(format!("missing {name}: {e}")))?;
            let found = sha256_hex(&bytes);
            if &found != expected {
                return Err(corrupt(format!("{name} digest {found} != recorded {expected}")));
            }
            blobs.insert(name.clone(), bytes);
        }
        let tensor = |name: &str| -> Result<Matrix> {
            let bytes = blobs.get(name).ok_or_else(|| corrupt(format!("meta lacks {name}")))?;
            wtn::decode(bytes).map(|(m, _)| m).map_err(|e| corrupt(format!("{name}: {e}")))
        };
        let a = tensor("a.wtn1")?;
        let b = tensor("b.wtn1")?;
        let residual = tensor("r.wtn1")?;
        if a.rows() != key.rank || b.cols() != key.rank || (b.rows(), a.cols()) != residual.shape() {
            return Err(corrupt("factor shapes are inconsistent".into()));
        }
        let mut checkpoints = Vec::with_capacity(meta.checkpoints.len());
        for &CheckpointMeta { step, mse } in &meta.checkpoints {
            let ca = tensor(&checkpoint_file(step, "a"))?;
            let cb = tensor(&checkpoint_file(step, "b"))?;
            checkpoints.push(FactorCheckpoint { step, a: ca, b: cb, mse });
        }
        if !blobs.contains_key("trajectory.csv") {
            return Err(corrupt("meta lacks trajectory.csv".into()));
        }
        let trajectory = read_trajectory_csv(&dir.join("trajectory.csv"))?;
        Ok(CacheHit {
            entry: entry_from_meta(dir, meta),
            a,
            b,
            residual,
            trajectory,
            checkpoints,
        })
    }

    fn quarantine(&self, dir: &Path) -> Result<()> {
        static COUNTER: AtomicU64 = AtomicU64::new(0);
        let rel = dir.strip_prefix(&self.root).unwrap_or(dir);
        let name = format!(
            "{}-{}-{}",
            rel.to_string_lossy().replace(['/', '\\'], "__"),
            std::process::id(),
            COUNTER.fetch_add(1, Ordering::Relaxed)
        );
        let qdir = self.quarantine_dir();
        fs::create_dir_all(&qdir).map_err(|e| Error::io(format!("create {}", qdir.display()), e))?;
        if fs::rename(dir, qdir.join(name)).is_err() {
            fs::remove_dir_all(dir).map_err(|e| Error::io(format!("remove {}", dir.display()), e))?;
        }
        Ok(())
    }
}

fn entry_from_meta(dir: &Path, meta: CacheMeta) -> CacheEntry {
    let content_digest = content_digest(&meta.key_digest, &meta.files);
    CacheEntry {
        model_id: meta.model_id,
        layer_name: meta.layer_name,
        role: meta.role,
        w0_hash: meta.key.w0_hash.clone(),
        rank: meta.key.rank,
        steps: meta.key.steps,
        seed: meta.key.seed,
        key_digest: meta.key_digest,
        key: meta.key,
        dir: dir.to_path_buf(),
        a_path: dir.join("a.wtn1"),
        b_path: dir.join("b.wtn1"),
        residual_path: dir.join("r.wtn1"),
        trajectory_path: dir.join("trajectory.csv"),
        final_mse: meta.final_mse,
        created_at: meta.created_at,
        content_digest,
    }
}

/// Rebuilds an [`ApproxResult`] from a verified hit.
impl CacheHit {
    pub fn into_result(self, config: ApproxConfig) -> ApproxResult {
        let n = self.residual.len() as f64;
        let final_frobenius_sq = self.entry.final_mse * n;
        ApproxResult {
            a: self.a,
            b: self.b,
            residual: self.residual,
            final_mse: self.entry.final_mse,
            final_frobenius_sq,
            trajectory: self.trajectory,
            checkpoints: self.checkpoints,
            config,
            w0_hash: self.entry.w0_hash,
            steps_executed: 0,
        }
    }
}
