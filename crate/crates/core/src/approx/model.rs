//! Model manifests and the parallel per-layer approximation driver.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::cache::{ApproxCache, CacheEntry, CacheKey};
use super::{approximate, check_rank, ApproxConfig, ApproxResult};
use crate::error::{Error, Result};
use crate::stats::{global_init, layer_stats, GlobalInitParams, LayerStats};
use crate::tensor::{content_hash, derive_seed, Matrix};
use crate::wtn;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Query,
    Value,
    Other,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Query => "query",
            Role::Value => "value",
            Role::Other => "other",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "query" => Ok(Role::Query),
            "value" => Ok(Role::Value),
            "other" => Ok(Role::Other),
            _ => Err(Error::invalid(format!("unknown role {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestLayer {
    pub name: String,
    pub role: Role,
    /// WTN1 file, relative to the manifest's directory unless absolute.
    pub file: PathBuf,
    pub rows: usize,
    pub cols: usize,
}

/// `{model_id, layers: [{name, role, file, rows, cols}]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub model_id: String,
    pub layers: Vec<ManifestLayer>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Manifest> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("read manifest {}", path.display()), e))?;
        let mut m: Manifest = serde_json::from_str(&text)?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self)?;
        fs::write(path, json).map_err(|e| Error::io(format!("write manifest {}", path.display()), e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_id.is_empty() {
            return Err(Error::invalid("manifest model_id is empty"));
        }
        let mut seen = std::collections::HashSet::new();
        for l in &self.layers {
            if !seen.insert(l.name.as_str()) {
                return Err(Error::invalid(format!("duplicate layer name {:?}", l.name)));
            }
            if l.rows == 0 || l.cols == 0 {
                return Err(Error::invalid(format!("layer {} has zero dimension", l.name)));
            }
        }
        Ok(())
    }

    pub fn layer_path(&self, layer: &ManifestLayer) -> PathBuf {
        if layer.file.is_absolute() {
            layer.file.clone()
        } else {
            self.base_dir.join(&layer.file)
        }
    }

    /// Reads a layer's weights and checks them against the declared shape.
    pub fn load_layer(&self, layer: &ManifestLayer) -> Result<Matrix> {
        let (m, _) = wtn::read(&self.layer_path(layer))?;
        if m.shape() != (layer.rows, layer.cols) {
            return Err(Error::Format(format!(
                "layer {} declares {}x{} but file holds {}x{}",
                layer.name,
                layer.rows,
                layer.cols,
                m.rows(),
                m.cols()
            )));
        }
        Ok(m)
    }

    pub fn select(&self, targets: &TargetFilter) -> Vec<&ManifestLayer> {
        self.layers.iter().filter(|l| targets.matches(l)).collect()
    }
}

/// Selects layers by role name or exact layer name; empty selects all.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetFilter(pub Vec<String>);

impl TargetFilter {
    pub fn query_value() -> Self {
        TargetFilter(vec!["query".into(), "value".into()])
    }

    pub fn all() -> Self {
        TargetFilter(Vec::new())
    }

    pub fn parse(list: &str) -> Self {
        TargetFilter(
            list.split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty() && *s != "all")
                .map(String::from)
                .collect(),
        )
    }

    pub fn matches(&self, layer: &ManifestLayer) -> bool {
        self.0.is_empty() || self.0.iter().any(|t| t == layer.role.as_str() || *t == layer.name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum LayerStatus {
    Hit,
    Computed { steps_executed: usize },
    Failed { error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerOutcome {
    pub layer_name: String,
    pub role: Role,
    #[serde(flatten)]
    pub status: LayerStatus,
    pub entry: Option<CacheEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRun {
    pub model_id: String,
    pub init: GlobalInitParams,
    pub init_sigma: f64,
    pub layers: Vec<LayerOutcome>,
}

impl ModelRun {
    pub fn failed(&self) -> impl Iterator<Item = &LayerOutcome> {
        self.layers.iter().filter(|l| matches!(l.status, LayerStatus::Failed { .. }))
    }

    pub fn any_failed(&self) -> bool {
        self.failed().next().is_some()
    }

    pub fn steps_executed(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l.status {
                LayerStatus::Computed { steps_executed } => steps_executed,
                _ => 0,
            })
            .sum()
    }

    pub fn hits(&self) -> usize {
        self.layers.iter().filter(|l| l.status == LayerStatus::Hit).count()
    }
}

/// Per-layer seed: independent of scheduling and of other layers.
pub fn layer_seed(base: u64, layer: &ManifestLayer) -> u64 {
    derive_seed(base, &layer.name, layer.role.as_str())
}

/// Statistics for every selected layer that loads, plus their global average.
pub fn model_stats(manifest: &Manifest, targets: &TargetFilter) -> Result<(Vec<LayerStats>, GlobalInitParams)> {
    let mut stats = Vec::new();
    for layer in manifest.select(targets) {
        let w = manifest.load_layer(layer)?;
        stats.push(layer_stats(&w, &layer.name)?);
    }
    let global = global_init(&stats)?;
    Ok((stats, global))
}

/// Approximates every targeted layer with at most `concurrency` jobs in flight.
///
/// Layers that fail to load or diverge are reported in the returned run and
/// do not stop the others. Validation problems common to the whole run (no
/// targets, rank too large for some layer) are returned as errors.
pub fn approximate_model(
    manifest: &Manifest,
    targets: &TargetFilter,
    cfg: &ApproxConfig,
    concurrency: usize,
    cache: &ApproxCache,
) -> Result<ModelRun> {
    cfg.validate()?;
    if concurrency == 0 {
        return Err(Error::invalid("concurrency must be >= 1"));
    }
    let selected = manifest.select(targets);
    if selected.is_empty() {
        return Err(Error::invalid(format!("no layers match targets {:?}", targets.0)));
    }
    for layer in &selected {
        check_rank(cfg.rank, layer.rows, layer.cols)?;
    }

    let loaded: Vec<(&ManifestLayer, Result<Matrix>)> = selected.iter().map(|l| (*l, manifest.load_layer(l))).collect();
    let stats = loaded
        .iter()
        .filter_map(|(l, w)| w.as_ref().ok().map(|w| layer_stats(w, &l.name)))
        .collect::<Result<Vec<_>>>()?;
    let init = global_init(&stats).map_err(|_| Error::invalid("no targeted layer could be loaded"))?;
    let init_sigma = match cfg.init_sigma {
        Some(s) => s,
        None if init.sigma_bar > 0.0 => init.sigma_bar,
        None => return Err(Error::invalid("targeted layers have zero spread; pass an explicit init sigma")),
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(concurrency)
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    let layers = pool.install(|| {
        loaded
            .into_par_iter()
            .map(|(layer, weights)| {
                let outcome = weights.and_then(|w| run_layer(manifest, layer, &w, cfg, init_sigma, cache));
                match outcome {
                    Ok((status, entry)) => LayerOutcome {
                        layer_name: layer.name.clone(),
                        role: layer.role,
                        status,
                        entry: Some(entry),
                    },
                    Err(e) => {
                        log::error!("layer {} failed: {e}", layer.name);
                        LayerOutcome {
                            layer_name: layer.name.clone(),
                            role: layer.role,
                            status: LayerStatus::Failed { error: e.to_string() },
                            entry: None,
                        }
                    }
                }
            })
            .collect::<Vec<_>>()
    });

    Ok(ModelRun {
        model_id: manifest.model_id.clone(),
        init,
        init_sigma,
        layers,
    })
}

fn run_layer(
    manifest: &Manifest,
    layer: &ManifestLayer,
    w0: &Matrix,
    cfg: &ApproxConfig,
    init_sigma: f64,
    cache: &ApproxCache,
) -> Result<(LayerStatus, CacheEntry)> {
    let (status, entry, _) = approximate_layer(manifest, layer, w0, cfg, init_sigma, cache)?;
    Ok((status, entry))
}

/// Approximates one manifest layer through the cache, with the same per-layer
/// seed and key as [`approximate_model`].
pub fn approximate_layer(
    manifest: &Manifest,
    layer: &ManifestLayer,
    w0: &Matrix,
    cfg: &ApproxConfig,
    init_sigma: f64,
    cache: &ApproxCache,
) -> Result<(LayerStatus, CacheEntry, ApproxResult)> {
    let mut layer_cfg = cfg.clone();
    layer_cfg.seed = layer_seed(cfg.seed, layer);
    layer_cfg.init_sigma = Some(init_sigma);
    let key = CacheKey::new(&content_hash(w0), &layer_cfg, init_sigma);
    if let Some(hit) = cache.lookup(&manifest.model_id, &layer.name, &key, &layer_cfg.checkpoint_steps)? {
        log::info!("{}: cache hit", layer.name);
        let entry = hit.entry.clone();
        return Ok((LayerStatus::Hit, entry, hit.into_result(layer_cfg)));
    }
    log::info!("{}: approximating {}x{} at rank {}", layer.name, layer.rows, layer.cols, cfg.rank);
    let result = approximate(w0, &layer_cfg)?;
    let entry = cache.store(&manifest.model_id, &layer.name, layer.role, &result)?;
    log::info!("{}: final mse {:.6e}", layer.name, result.final_mse);
    Ok((
        LayerStatus::Computed {
            steps_executed: result.steps_executed,
        },
        entry,
        result,
    ))
}

/// Writes `weights` as WTN1 files next to a new manifest in `dir`.
pub fn write_model(dir: &Path, model_id: &str, weights: &[(String, Role, Matrix)]) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("create {}", dir.display()), e))?;
    let mut layers = Vec::with_capacity(weights.len());
    for (name, role, w) in weights {
        let file = PathBuf::from(format!("{}.wtn1", name.replace(['/', '\\'], "_")));
        wtn::write(&dir.join(&file), w, crate::tensor::Dtype::F64)?;
        layers.push(ManifestLayer {
            name: name.clone(),
            role: *role,
            file,
            rows: w.rows(),
            cols: w.cols(),
        });
    }
    let manifest = Manifest {
        model_id: model_id.to_string(),
        layers,
        base_dir: dir.to_path_buf(),
    };
    manifest.validate()?;
    manifest.save(&dir.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{sample, DistributionSpec};

    fn toy(dir: &Path) -> Manifest {
        let spec = DistributionSpec::Normal { mean: 0.0, std: 0.05 };
        let weights = vec![
            ("l0.q".to_string(), Role::Query, sample(&spec, 12, 10, 1).unwrap()),
            ("l0.v".to_string(), Role::Value, sample(&spec, 12, 10, 2).unwrap()),
            ("l0.o".to_string(), Role::Other, sample(&spec, 10, 12, 3).unwrap()),
        ];
        write_model(dir, "toy", &weights).unwrap()
    }

    fn cfg() -> ApproxConfig {
        ApproxConfig {
            rank: 2,
            steps: 30,
            ..Default::default()
        }
    }

    #[test]
    fn manifest_roundtrip_and_filters() {
        let dir = tempfile::tempdir().unwrap();
        let m = toy(dir.path());
        let loaded = Manifest::load(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(loaded.layers, m.layers);
        let qv: Vec<_> = loaded.select(&TargetFilter::query_value()).iter().map(|l| l.name.as_str()).collect();
        assert_eq!(qv, ["l0.q", "l0.v"]);
        assert_eq!(loaded.select(&TargetFilter::all()).len(), 3);
        assert_eq!(loaded.select(&TargetFilter::parse("l0.o")).len(), 1);
        assert_eq!(TargetFilter::parse("query, value"), TargetFilter::query_value());
    }

    #[test]
    fn manifest_rejects_duplicates_and_shape_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = toy(dir.path());
        m.layers[1].name = "l0.q".into();
        assert!(m.validate().is_err());
        let mut m = toy(dir.path());
        m.layers[0].rows = 11;
        assert!(m.load_layer(&m.layers[0]).is_err());
    }

    #[test]
    fn stats_over_targets_are_unweighted() {
        let dir = tempfile::tempdir().unwrap();
        let m = toy(dir.path());
        let (stats, global) = model_stats(&m, &TargetFilter::query_value()).unwrap();
        assert_eq!(stats.len(), 2);
        assert_eq!(global.n_layers, 2);
        assert!((global.sigma_bar - (stats[0].sigma + stats[1].sigma) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn missing_file_fails_only_that_layer() {
        let dir = tempfile::tempdir().unwrap();
        let m = toy(dir.path());
        fs::remove_file(dir.path().join("l0.v.wtn1")).unwrap();
        let cache = ApproxCache::new(dir.path().join("cache"));
        let run = approximate_model(&m, &TargetFilter::query_value(), &cfg(), 4, &cache).unwrap();
        assert!(run.any_failed());
        assert_eq!(run.failed().count(), 1);
        assert_eq!(run.failed().next().unwrap().layer_name, "l0.v");
        assert_eq!(run.layers[0].status, LayerStatus::Computed { steps_executed: 30 });
    }

    #[test]
    fn rank_too_large_is_a_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let m = toy(dir.path());
        let cache = ApproxCache::new(dir.path().join("cache"));
        let bad = ApproxConfig { rank: 10, ..cfg() };
        let err = approximate_model(&m, &TargetFilter::query_value(), &bad, 1, &cache).unwrap_err();
        assert!(err.is_validation());
        assert!(err.to_string().contains("rank must be < min(d,k)"));
        let none = approximate_model(&m, &TargetFilter::parse("nope"), &cfg(), 1, &cache).unwrap_err();
        assert!(none.is_validation());
    }

    #[test]
    fn second_run_hits_cache() {
        let dir = tempfile::tempdir().unwrap();
        let m = toy(dir.path());
        let cache = ApproxCache::new(dir.path().join("cache"));
        let first = approximate_model(&m, &TargetFilter::all(), &cfg(), 2, &cache).unwrap();
        assert_eq!(first.steps_executed(), 90);
        let second = approximate_model(&m, &TargetFilter::all(), &cfg(), 2, &cache).unwrap();
        assert_eq!(second.steps_executed(), 0);
        assert_eq!(second.hits(), 3);
        let digests = |r: &ModelRun| -> Vec<String> {
            r.layers.iter().map(|l| l.entry.as_ref().unwrap().content_digest.clone()).collect()
        };
        assert_eq!(digests(&first), digests(&second));
    }

    #[test]
    fn layer_seeds_differ_by_name_and_role() {
        let a = ManifestLayer { name: "x".into(), role: Role::Query, file: "x".into(), rows: 2, cols: 2 };
        let b = ManifestLayer { role: Role::Value, ..a.clone() };
        let c = ManifestLayer { name: "y".into(), ..a.clone() };
        assert_ne!(layer_seed(1, &a), layer_seed(1, &b));
        assert_ne!(layer_seed(1, &a), layer_seed(1, &c));
        assert_eq!(layer_seed(1, &a), layer_seed(1, &a.clone()));
    }
}
