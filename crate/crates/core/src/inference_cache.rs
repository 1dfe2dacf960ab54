//! Per-entity precomputation of leaf outputs.
//!
//! Leaf modules only see time-invariant features, so their Gaussians can be
//! computed once per entity. Serving then evaluates only the tree. Cached
//! predictions reuse the exact values `leaf_forward` produced and the same
//! assembly routine as [`Model::predict_density`], so the two paths agree
//! bit for bit.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::leaf_mdn::GaussianParams;
use crate::mixture::{FeatureVector, MixtureDensity, Model, ModelBody, ModelKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub invariant_features: Vec<f64>,
    pub leaf_gaussians: Vec<GaussianParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeafCache {
    entries: HashMap<String, CacheEntry>,
    model_fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CacheFile {
    format_version: u32,
    model_fingerprint: String,
    entries: BTreeMap<String, CacheEntry>,
}

impl LeafCache {
    pub fn build<'a, I>(model: &Model, entities: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, &'a [f64])>,
    {
        if model.kind() != ModelKind::TreeGated {
            return Err(Error::KindMismatch(format!(
                "leaf cache requires a tree_gated model, got {}",
                model.kind().name()
            )));
        }
        let mut entries = HashMap::new();
        for (key, invariant) in entities {
            if entries.contains_key(key) {
                return Err(Error::DuplicateKey(key.to_string()));
            }
            let leaf_gaussians = model.leaf_gaussians(invariant)?;
            entries.insert(
                key.to_string(),
                CacheEntry {
                    invariant_features: invariant.to_vec(),
                    leaf_gaussians,
                },
            );
        }
        Ok(Self {
            entries,
            model_fingerprint: model.fingerprint(),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn fingerprint(&self) -> &str {
        &self.model_fingerprint
    }

    pub fn get(&self, key: &str) -> Option<&CacheEntry> {
        self.entries.get(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Fails with "stale cache" unless the cache was built from `model`.
    pub fn check(&self, model: &Model) -> Result<()> {
        let current = model.fingerprint();
        if current != self.model_fingerprint {
            return Err(Error::StaleCache {
                cache: self.model_fingerprint.clone(),
                model: current,
            });
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let file = CacheFile {
            format_version: 1,
            model_fingerprint: self.model_fingerprint.clone(),
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CacheFile = serde_json::from_str(text)?;
        if file.format_version != 1 {
            return Err(Error::FormatVersion(file.format_version));
        }
        Ok(Self {
            entries: file.entries.into_iter().collect(),
            model_fingerprint: file.model_fingerprint,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Convenience wrapper over [`LeafCache::build`].
pub fn build_cache<'a, I>(model: &Model, entities: I) -> Result<LeafCache>
where
    I: IntoIterator<Item = (&'a str, &'a [f64])>,
{
    LeafCache::build(model, entities)
}

/// Mixture for one request using cached leaf Gaussians; only the tree runs.
///
/// The fingerprint is not rechecked per call; validate once with
/// [`LeafCache::check`] (as [`predict_cached`] does) before serving.
pub fn predict_with_cache(
    model: &Model,
    cache: &LeafCache,
    entity_key: &str,
    variant_features: &[f64],
) -> Result<MixtureDensity> {
    let entry = cache
        .get(entity_key)
        .ok_or_else(|| Error::CacheMiss(entity_key.to_string()))?;
    let tree = match model.body() {
        ModelBody::TreeGated { tree, .. } => tree,
        _ => {
            return Err(Error::KindMismatch(format!(
                "cached prediction requires a tree_gated model, got {}",
                model.kind().name()
            )))
        }
    };
    if variant_features.len() != model.schema().variant_names.len() {
        return Err(Error::Schema(format!(
            "variant has {} values, expected {}",
            variant_features.len(),
            model.schema().variant_names.len()
        )));
    }
    let mut x = Vec::with_capacity(variant_features.len() + entry.invariant_features.len());
    x.extend_from_slice(variant_features);
    x.extend_from_slice(&entry.invariant_features);
    Model::assemble_tree_gated(tree, &x, &entry.leaf_gaussians)
}

/// Checked variant of [`predict_with_cache`]: verifies the fingerprint first.
pub fn predict_cached(
    model: &Model,
    cache: &LeafCache,
    entity_key: &str,
    variant_features: &[f64],
) -> Result<MixtureDensity> {
    cache.check(model)?;
    predict_with_cache(model, cache, entity_key, variant_features)
}

/// One serving request.
#[derive(Debug, Clone, PartialEq)]
pub struct Request {
    pub entity_key: String,
    pub variant: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchRepetition {
    pub repetition: usize,
    pub cached_ns_per_pred: f64,
    pub full_ns_per_pred: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub requests: usize,
    pub cached_ns_per_pred: f64,
    pub full_ns_per_pred: f64,
    pub speedup: f64,
    pub repetitions: Vec<BenchRepetition>,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Times the cached path against the full path (leaf MLPs recomputed per
/// request) over `repetitions` passes after one untimed warmup pass. Reports
/// per-prediction medians.
pub fn bench_inference(
    model: &Model,
    cache: &LeafCache,
    workload: &[Request],
    repetitions: usize,
) -> Result<BenchReport> {
    if workload.is_empty() || repetitions == 0 {
        return Err(Error::Config(
            "benchmark needs requests and repetitions".into(),
        ));
    }
    cache.check(model)?;
    let full_inputs = workload
        .iter()
        .map(|r| {
            let entry = cache
                .get(&r.entity_key)
                .ok_or_else(|| Error::CacheMiss(r.entity_key.clone()))?;
            Ok(FeatureVector {
                variant: r.variant.clone(),
                invariant: entry.invariant_features.clone(),
                entity_key: r.entity_key.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let run_cached = || -> Result<f64> {
        let mut sink = 0.0;
        for r in workload {
            sink += predict_with_cache(model, cache, &r.entity_key, &r.variant)?.alphas[0];
        }
        Ok(sink)
    };
    let run_full = || -> Result<f64> {
        let mut sink = 0.0;
        for x in &full_inputs {
            sink += model.predict_density(x)?.alphas[0];
        }
        Ok(sink)
    };

    std::hint::black_box(run_cached()?);
    std::hint::black_box(run_full()?);
    let n = workload.len() as f64;
    let mut reps = Vec::with_capacity(repetitions);
    for repetition in 0..repetitions {
        let start = Instant::now();
        std::hint::black_box(run_cached()?);
        let cached = start.elapsed().as_nanos() as f64 / n;
        let start = Instant::now();
        std::hint::black_box(run_full()?);
        let full = start.elapsed().as_nanos() as f64 / n;
        reps.push(BenchRepetition {
            repetition,
            cached_ns_per_pred: cached,
            full_ns_per_pred: full,
        });
    }
    let cached = median(
        &mut reps
            .iter()
            .map(|r| r.cached_ns_per_pred)
            .collect::<Vec<_>>(),
    );
    let full = median(&mut reps.iter().map(|r| r.full_ns_per_pred).collect::<Vec<_>>());
    Ok(BenchReport {
        requests: workload.len(),
        cached_ns_per_pred: cached,
        full_ns_per_pred: full,
        speedup: full / cached,
        repetitions: reps,
    })
}
