//! Per-layer weight statistics and the global initialization parameters
//! derived from them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub layer_name: String,
    pub mu: f64,
    pub sigma: f64,
    pub element_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlobalInitParams {
    pub mu_bar: f64,
    pub sigma_bar: f64,
    pub n_layers: usize,
}

/// Population mean and population standard deviation of every entry.
pub fn layer_stats(w: &Matrix, name: &str) -> Result<LayerStats> {
    if w.is_empty() {
        return Err(Error::invalid(format!("layer {name} is empty")));
    }
    let n = w.len() as f64;
    let first = w.data().iter().sum::<f64>() / n;
    // One refinement pass removes the rounding error of the naive mean.
    let mu = first + w.data().iter().map(|v| v - first).sum::<f64>() / n;
    let var = w.data().iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    Ok(LayerStats {
        layer_name: name.to_string(),
        mu,
        sigma: var.sqrt(),
        element_count: w.len(),
    })
}

/// Unweighted average of per-layer means and standard deviations.
///
/// Each layer counts once regardless of its size. Layers are summed in
/// name order so the result does not depend on the order they are given.
pub fn global_init(stats: &[LayerStats]) -> Result<GlobalInitParams> {
    if stats.is_empty() {
        return Err(Error::invalid("global_init needs at least one layer"));
    }
    let mut sorted: Vec<&LayerStats> = stats.iter().collect();
    sorted.sort_by(|a, b| {
        a.layer_name
            .cmp(&b.layer_name)
            .then(a.mu.total_cmp(&b.mu))
            .then(a.sigma.total_cmp(&b.sigma))
    });
    let n = sorted.len() as f64;
    let mu_bar = sorted.iter().map(|s| s.mu).sum::<f64>() / n;
    let sigma_bar = sorted.iter().map(|s| s.sigma).sum::<f64>() / n;
    Ok(GlobalInitParams {
        mu_bar,
        sigma_bar,
        n_layers: sorted.len(),
    })
}
