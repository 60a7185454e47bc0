//! Embedding materialization with an on-disk cache, and wall-clock timing.

use std::path::{Path, PathBuf};
use std::time::{Instant, UNIX_EPOCH};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{self, LibraryManifest, Library};
use crate::encoder::{apply_head, EncoderSpec, MetricHead};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub t_embed: f64,
    pub t_dist: f64,
    pub t_total: f64,
}

#[derive(Debug, Clone)]
pub struct Materialized {
    pub library: Library,
    /// Cache key of every set, in manifest order.
    pub keys: Vec<String>,
    pub t_embed: f64,
    pub cache_hits: usize,
}

/// Identifies one materialized embedding: encoder, dataset, head and the
/// input file's size and modification time.
fn cache_key(encoder: &str, id: &str, head: &str, input: &Path) -> Result<String> {
    let meta = std::fs::metadata(input).map_err(|e| Error::io(input, e))?;
    let mtime = meta
        .modified()
        .ok()
        .and_then(|t| t.duration_since(UNIX_EPOCH).ok())
        .map(|d| d.as_nanos())
        .unwrap_or(0);
    let text = format!("{encoder}\n{id}\n{head}\n{}\n{mtime}", meta.len());
    Ok(format!("{id}-{}", seed::digest_hex(text.as_bytes())))
}

fn cache_path(dir: &Path, key: &str) -> PathBuf {
    dir.join(format!("{key}.emb"))
}

/// Rounded through single precision, the on-disk format, so a cached and a
/// freshly computed embedding are identical.
fn to_storage_precision(z: Array2<f64>) -> Array2<f64> {
    z.mapv(|v| v as f32 as f64)
}

/// Encode (and optionally pass through `head`) every dataset of the manifest.
/// Each embedding is computed once; with `cache` set, later runs reuse it.
pub fn materialize(
    manifest: &LibraryManifest,
    encoder: &EncoderSpec,
    head: Option<&MetricHead>,
    cache: Option<&Path>,
) -> Result<Materialized> {
    let start = Instant::now();
    let enc_digest = encoder.digest();
    let head_digest = head.map_or_else(|| "none".to_string(), MetricHead::digest);
    let results: Vec<(Array2<f64>, String, bool)> = manifest
        .entries
        .par_iter()
        .map(|entry| {
            let input = data::input_path(manifest, entry);
            let key = cache_key(&enc_digest, &entry.dataset_id, &head_digest, &input)?;
            if let Some(dir) = cache {
                let p = cache_path(dir, &key);
                if p.exists() {
                    return Ok((data::read_embeddings(&p)?, key, true));
                }
            }
            let mut z = encoder.encode(&data::read_embeddings(&input)?)?;
            if let Some(h) = head {
                z = apply_head(h, &z)?;
            }
            let z = to_storage_precision(z);
            if let Some(dir) = cache {
                data::write_embeddings(&cache_path(dir, &key), &z)?;
            }
            Ok((z, key, false))
        })
        .collect::<Result<_>>()?;
    let cache_hits = results.iter().filter(|r| r.2).count();
    let (matrices, keys): (Vec<_>, Vec<_>) = results.into_iter().map(|(z, k, _)| (z, k)).unzip();
    let library = data::assemble_library(manifest, matrices)?;
    Ok(Materialized {
        library,
        keys,
        t_embed: start.elapsed().as_secs_f64(),
        cache_hits,
    })
}

/// Cache file for a distance matrix computed from the given embeddings and settings.
pub fn distance_cache_path(dir: &Path, keys: &[String], tag: &str) -> PathBuf {
    let text = format!("{}\n{tag}", keys.join("\n"));
    dir.join(format!("dist-{}.csv", seed::digest_hex(text.as_bytes())))
}
